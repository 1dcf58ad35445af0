use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use adi_core::augment::apply_policy;
use adi_core::config::RunConfig;
use adi_core::dsp::{load_waveform, read_feature_file, write_feature_file, write_waveform, Mfcc, Waveform};
use adi_core::eval::{evaluate as run_evaluation, EvalItem};
use adi_core::inference::{build_cohorts as make_cohorts, check_weights, score_line, Classifier, CohortSet, System};
use adi_core::synth::{corpus, pseudo_pretrained, pseudo_pretrained_frontend, split, write_corpus, SynthSpec};
use adi_core::train::{feature_path, initial_checkpoint, load_examples, train as run_training, Checkpoint, Manifest, ManifestEntry};
use anyhow::{bail, Context, Result};

use crate::{AugmentArgs, CohortArgs, ConfigArg, ExtractArgs, FeatureType, ScoreArgs, SynthArgs, TrainArgs};

/// Bad invocation; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("manifest {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec { n_classes: a.classes, per_class: a.per_class, duration_s: a.duration, seed: a.seed, ..Default::default() };
    if a.test_per_class >= a.per_class {
        return Err(usage("--test-per-class must be smaller than --per-class"));
    }
    let (train, test) = split(corpus(&spec)?, &spec, a.test_per_class);
    let wav_dir = a.out_dir.join("wav");
    write_corpus(&wav_dir, &train)?.save(&a.out_dir.join("train.tsv"))?;
    write_corpus(&wav_dir, &test)?.save(&a.out_dir.join("test.tsv"))?;
    println!("wrote {} training and {} test utterances to {}", train.len(), test.len(), a.out_dir.display());
    Ok(())
}

fn wav_pool(dir: Option<&Path>, enabled: bool, what: &str) -> Result<Vec<Waveform>> {
    let Some(dir) = dir.filter(|_| enabled) else {
        if enabled {
            return Err(usage(format!("{what} augmentation is enabled but no directory was given")));
        }
        return Ok(Vec::new());
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("{what} directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_waveform(p).with_context(|| p.display().to_string())).collect()
}

pub fn augment(a: AugmentArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let policy = cfg.augmentation;
    let noise = wav_pool(a.noise_dir.as_deref(), policy.noise_enabled, "noise")?;
    let rirs = wav_pool(a.rir_dir.as_deref(), policy.rir_enabled, "impulse-response")?;
    let manifest = load_manifest(&a.manifest)?;

    let mut suffixes = vec![String::new()];
    if policy.noise_enabled {
        suffixes.push("-noise".into());
    }
    if policy.rir_enabled {
        suffixes.push("-rir".into());
    }
    suffixes.extend(policy.speed_factors.iter().filter(|&&f| f != 1.0).map(|f| format!("-sp{f}")));

    fs::create_dir_all(&a.out_dir)?;
    let mut entries = Vec::new();
    for (i, e) in manifest.entries().iter().enumerate() {
        let wav = load_waveform(&e.path).with_context(|| format!("{}: {}", e.id, e.path.display()))?;
        let copies = apply_policy(&wav, &policy.for_utterance(i as u64), &noise, &rirs)?;
        for (copy, suffix) in copies.iter().zip(&suffixes) {
            let id = format!("{}{suffix}", e.id);
            let path = a.out_dir.join(format!("{id}.wav"));
            write_waveform(&path, copy)?;
            entries.push(ManifestEntry { id, path, label: e.label.clone(), duration_s: copy.duration_s() });
        }
    }
    let out = Manifest::new(entries)?;
    out.save(&a.out_dir.join("manifest.tsv"))?;
    println!("wrote {} utterances ({} per input)", out.len(), suffixes.len());
    Ok(())
}

pub fn extract_features(a: ExtractArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let frontend = match a.kind {
        FeatureType::Mfcc => Mfcc::new(cfg.features.clone())?,
        FeatureType::PseudoPretrained => pseudo_pretrained_frontend()?,
        FeatureType::Pretrained => {
            return Err(usage("pretrained features are produced by the external exporter; point --features-dir at its output"))
        }
    };
    let manifest = load_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out_dir)?;
    let (mut written, mut skipped, mut failed) = (0, 0, 0);
    for e in manifest.entries() {
        let out = feature_path(&a.out_dir, &e.id);
        if out.exists() && !a.force {
            skipped += 1;
            continue;
        }
        let result = load_waveform(&e.path).and_then(|wav| match a.kind {
            FeatureType::PseudoPretrained => pseudo_pretrained(&frontend, &wav),
            _ => frontend.extract(&wav),
        });
        match result.and_then(|feat| write_feature_file(&out, &feat)) {
            Ok(()) => written += 1,
            Err(err) => {
                eprintln!("error: {}: {}: {err}", e.id, e.path.display());
                failed += 1;
            }
        }
    }
    println!("wrote {written}, skipped {skipped}, failed {failed}");
    if failed > 0 {
        bail!("{failed} of {} utterances failed", manifest.len());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut tc = cfg.training.clone();
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    let manifest = load_manifest(&a.manifest)?;
    let arch = a.arch.into();
    let ck = match &a.resume {
        Some(path) => Checkpoint::load_expecting(path, arch).with_context(|| format!("checkpoint {}", path.display()))?,
        None => {
            let first = manifest.entries().first().context("manifest is empty")?;
            let dim = read_feature_file(feature_path(&a.features_dir, &first.id))?.dim();
            initial_checkpoint(cfg.model_config(arch), dim, manifest.labels().to_vec(), &tc)?
        }
    };
    let data = load_examples(&manifest, &a.features_dir, &ck.labels)?;
    println!("# epoch\tloss\ttrain_acc\tlr");
    let ck = run_training(ck, &data, &tc, &mut |log| println!("{log}"))?;
    ck.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("# saved {} ({} epochs)", a.out.display(), ck.epoch);
    Ok(())
}

pub fn build_cohorts(a: CohortArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("checkpoint {}", a.checkpoint.display()))?;
    let manifest = load_manifest(&a.manifest)?;
    let data = load_examples(&manifest, &a.features_dir, &ck.labels)?;
    check_dim(&a.checkpoint, &ck, &a.features_dir, &data[0].features.dim())?;
    let cohorts = make_cohorts(&ck.model, &data, cfg.inference.cohort_size, cfg.inference.seed)?;
    cohorts.save(&a.out)?;
    let counts: Vec<String> = ck.labels.iter().zip(cohorts.counts()).map(|(l, n)| format!("{l}={n}")).collect();
    println!("cohorts: {}", counts.join(" "));
    Ok(())
}

fn check_dim(path: &Path, ck: &Checkpoint, dir: &Path, dim: &usize) -> Result<()> {
    let expected = ck.model.input_dim();
    if *dim != expected {
        bail!(
            "dimension mismatch: checkpoint {} expects {expected}-dim features but {} holds {dim}-dim features",
            path.display(),
            dir.display()
        );
    }
    Ok(())
}

struct Scoring {
    classifier: Classifier,
    manifest: Manifest,
    dirs: Vec<PathBuf>,
}

fn setup_scoring(a: &ScoreArgs) -> Result<Scoring> {
    let n = a.checkpoints.len();
    if a.cohorts.len() != n || a.features_dirs.len() != n {
        return Err(usage(format!(
            "{n} checkpoints need as many cohort files and feature directories (got {} and {})",
            a.cohorts.len(),
            a.features_dirs.len()
        )));
    }
    if let Some(w) = &a.fusion_weights {
        if w.len() != n {
            return Err(usage(format!("{} fusion weights for {n} checkpoints", w.len())));
        }
        check_weights(w).map_err(|e| usage(e.to_string()))?;
    }
    let mut cfg = load_config(&a.config)?;
    cfg.inference.fusion_weights = a.fusion_weights.clone();
    let manifest = load_manifest(&a.manifest)?;
    let first = manifest.entries().first().context("manifest is empty")?;

    let mut systems = Vec::with_capacity(n);
    for ((ck_path, co_path), dir) in a.checkpoints.iter().zip(&a.cohorts).zip(&a.features_dirs) {
        let ck = Checkpoint::load(ck_path).with_context(|| format!("checkpoint {}", ck_path.display()))?;
        let probe = read_feature_file(feature_path(dir, &first.id))?;
        check_dim(ck_path, &ck, dir, &probe.dim())?;
        let cohorts = CohortSet::load(co_path).with_context(|| format!("cohorts {}", co_path.display()))?;
        systems.push(System::new(ck.model, cohorts, ck.labels)?);
    }
    let classifier = Classifier::new(systems, cfg.inference)?;
    Ok(Scoring { classifier, manifest, dirs: a.features_dirs.clone() })
}

fn features_for(dirs: &[PathBuf], id: &str) -> Result<Vec<adi_core::dsp::FeatureMatrix>> {
    dirs.iter()
        .map(|d| {
            let p = feature_path(d, id);
            read_feature_file(&p).with_context(|| p.display().to_string())
        })
        .collect()
}

fn write_scores(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn evaluate(a: ScoreArgs) -> Result<()> {
    let s = setup_scoring(&a)?;
    let labels = s.manifest.class_ids(s.classifier.labels())?;
    let items = s
        .manifest
        .entries()
        .iter()
        .zip(labels)
        .map(|(e, label)| Ok(EvalItem { id: e.id.clone(), label, features: features_for(&s.dirs, &e.id)? }))
        .collect::<Result<Vec<_>>>()?;
    let report = run_evaluation(&s.classifier, &items)?;
    write_scores(a.scores.as_deref(), &report.scores_tsv())?;
    print!("{}", report.text());
    Ok(())
}

pub fn classify(a: ScoreArgs) -> Result<()> {
    let s = setup_scoring(&a)?;
    let mut out = String::new();
    for e in s.manifest.entries() {
        let feats = features_for(&s.dirs, &e.id)?;
        let d = s.classifier.classify(&feats.iter().collect::<Vec<_>>())?;
        let line = score_line(&e.id, &d.fused, &s.classifier.labels()[d.label]);
        println!("{line}");
        out.push_str(&line);
        out.push('\n');
    }
    write_scores(a.scores.as_deref(), &out)
}
