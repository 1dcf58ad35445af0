//! Manifest handling, segment sampling, the optimizer and the training loop.

mod adam;
mod checkpoint;
mod manifest;
mod schedule;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use manifest::{feature_path, Manifest, ManifestEntry};
pub use schedule::{sample_segment, segment_frames, TrainConfig, TriangularLr};

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::splitmix64;
use crate::dsp::{read_feature_file, FeatureMatrix};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::softmax_cross_entropy;

/// One labelled utterance with precomputed features.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: FeatureMatrix,
    pub label: usize,
}

/// Reads `<features_dir>/<id>.adif` for every manifest entry, indexing labels
/// by `labels`.
pub fn load_examples(manifest: &Manifest, features_dir: &Path, labels: &[String]) -> Result<Vec<Example>> {
    let ids = manifest.class_ids(labels)?;
    manifest
        .entries()
        .iter()
        .zip(ids)
        .map(|(e, label)| {
            let path = feature_path(features_dir, &e.id);
            let features = read_feature_file(&path).map_err(|err| match err {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                other => other,
            })?;
            Ok(Example { id: e.id.clone(), features, label })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training segments whose highest cosine is the true class.
    pub train_acc: f64,
    /// Learning rate of the epoch's final step.
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.4}\t{:.6e}", self.epoch, self.loss, self.train_acc, self.lr)
    }
}

/// Builds a freshly initialized checkpoint for `labels.len()` classes.
pub fn initial_checkpoint(mut config: ModelConfig, input_dim: usize, labels: Vec<String>, cfg: &TrainConfig) -> Result<Checkpoint> {
    config.set_io(input_dim, labels.len());
    let model = Model::build(config, cfg.seed)?;
    Checkpoint::fresh(model, labels, cfg.seed, Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps))
}

/// Data-order RNG for one epoch. Derived from `(seed, epoch)` alone so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch as u64 + 1)))
}

/// Shuffled mini-batches. A trailing batch of one is merged into its
/// predecessor because batch normalization needs two examples.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

/// Runs epochs `ck.epoch..cfg.epochs_total` and returns the final state.
///
/// `log` receives one record per finished epoch.
pub fn train(mut ck: Checkpoint, data: &[Example], cfg: &TrainConfig, log: &mut dyn FnMut(&EpochLog)) -> Result<Checkpoint> {
    cfg.validate()?;
    let k = ck.model.n_classes();
    let mut counts = vec![0usize; k];
    for ex in data {
        if ex.label >= k {
            return Err(Error::LabelOutOfRange { label: ex.label, classes: k });
        }
        if ex.features.dim() != ck.model.input_dim() {
            return Err(Error::Dimension(format!(
                "{}: {}-dim features for a model expecting {}",
                ex.id,
                ex.features.dim(),
                ck.model.input_dim()
            )));
        }
        counts[ex.label] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("class {:?} has no training utterances", ck.labels[empty])));
    }

    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let schedule = TriangularLr::new(cfg, per_epoch);
    while ck.epoch < cfg.epochs_total {
        let mut rng = epoch_rng(ck.seed, ck.epoch);
        let duration = cfg.segment_for_epoch(ck.epoch);
        let (mut loss_sum, mut correct, mut seen, mut lr) = (0.0, 0usize, 0usize, cfg.lr_min);
        for batch in make_batches(data.len(), cfg.batch_size, &mut rng) {
            let segments = batch
                .iter()
                .map(|&i| sample_segment(&data[i].features, duration, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FeatureMatrix> = segments.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let x = ck.model.input_tensor(&refs)?;

            ck.model.zero_grad();
            let logits = ck.model.forward_train(&x, &labels)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", ck.epoch + 1)));
            }
            let cosines = ck.model.head().last_cosines().expect("forward caches cosines");
            for (row, &y) in cosines.chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();

            ck.model.backward(&grad);
            lr = schedule.at(ck.optimizer.steps);
            let model = &mut ck.model;
            ck.optimizer.step(lr, |f| model.visit_params(f));
        }
        ck.epoch += 1;
        log(&EpochLog { epoch: ck.epoch, loss: loss_sum / seen as f64, train_acc: correct as f64 / seen as f64, lr });
    }
    Ok(ck)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
