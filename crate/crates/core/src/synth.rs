//! Seeded synthetic corpora for smoke tests and demos.
//!
//! Each class is noise shaped by a three-formant all-pole envelope, switched
//! on and off in syllable-length bursts over a white noise floor. The bursts
//! matter: per-utterance feature normalization removes any stationary
//! spectral envelope, while the on/off contrast per frequency band survives it.
//!
//! [`pseudo_pretrained`] stands in for the external 1024-dim frame encoder by
//! projecting log-mel frames through a fixed random matrix.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::splitmix64;
use crate::dsp::{write_waveform, FeatureMatrix, FeatureSource, Mfcc, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::train::{Manifest, ManifestEntry};

/// Formant frequencies (Hz) of the available class templates.
pub const FORMANT_TEMPLATES: [[f64; 3]; 5] = [
    [300.0, 2200.0, 3000.0],
    [700.0, 1200.0, 2600.0],
    [500.0, 1700.0, 3400.0],
    [400.0, 900.0, 2300.0],
    [650.0, 1900.0, 2900.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Relative formant jitter per utterance (0.05 = up to ±5 %).
    pub jitter: f64,
    /// Standard deviation of the white floor relative to unit-RMS bursts.
    pub floor: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_classes: 3, per_class: 80, duration_s: 2.0, sample_rate: 16000, jitter: 0.05, floor: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub label: String,
    pub class: usize,
    pub wave: Waveform,
}

pub fn class_label(class: usize) -> String {
    format!("class{class}")
}

/// Two-pole resonator at `freq` with `bandwidth` (Hz).
fn resonate(x: &[f64], freq: f64, bandwidth: f64, fs: f64) -> Vec<f64> {
    let r = (-PI * bandwidth / fs).exp();
    let (a1, a2) = (2.0 * r * (2.0 * PI * freq / fs).cos(), -r * r);
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let y1 = if n >= 1 { y[n - 1] } else { 0.0 };
        let y2 = if n >= 2 { y[n - 2] } else { 0.0 };
        y[n] = (1.0 - r) * x[n] + a1 * y1 + a2 * y2;
    }
    y
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One utterance of `class`, drawn from `rng`.
pub fn synth_utterance(class: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let template = FORMANT_TEMPLATES
        .get(class)
        .ok_or_else(|| Error::Config(format!("only {} synthetic classes exist", FORMANT_TEMPLATES.len())))?;
    formant_utterance(template, spec, rng)
}

/// Gated bursts of noise shaped by resonators at `formants` (Hz), over a
/// white noise floor.
pub fn formant_utterance(formants: &[f64], spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if formants.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Config("formant frequencies must be positive".into()));
    }
    let fs = spec.sample_rate as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let mut shaped: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for &f in formants {
        let f = f * (1.0 + spec.jitter * rng.gen_range(-1.0..=1.0));
        shaped = resonate(&shaped, f.min(0.45 * fs), rng.gen_range(80.0..140.0), fs);
    }
    let scale = 1.0 / rms(&shaped).max(1e-12);

    let mut gate = vec![0.0; n];
    let mut pos = (rng.gen_range(0.0..0.15) * fs) as usize;
    while pos < n {
        let len = (rng.gen_range(0.10..0.25) * fs) as usize;
        let gain = 10f64.powf(rng.gen_range(-0.3..0.3));
        let ramp = (0.01 * fs) as usize;
        for i in 0..len.min(n - pos) {
            let edge = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
            gate[pos + i] = gain * edge;
        }
        pos += len + (rng.gen_range(0.05..0.20) * fs) as usize;
    }

    let samples = (0..n)
        .map(|i| {
            let floor: f64 = rng.sample(StandardNormal);
            0.1 * (gate[i] * shaped[i] * scale + spec.floor * floor)
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// `per_class` utterances for each of the first `n_classes` templates, ordered
/// class by class. Utterance `i` of class `k` depends only on `(seed, k, i)`.
pub fn corpus(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    let mut out = Vec::with_capacity(spec.n_classes * spec.per_class);
    for class in 0..spec.n_classes {
        for i in 0..spec.per_class {
            let key = splitmix64(spec.seed ^ splitmix64(((class as u64) << 32) | i as u64));
            let wave = synth_utterance(class, spec, &mut ChaCha8Rng::seed_from_u64(key))?;
            let label = class_label(class);
            out.push(SynthUtterance { id: format!("{label}_{i:03}"), label, class, wave });
        }
    }
    Ok(out)
}

/// Splits off the last `test_per_class` utterances of every class.
pub fn split(utts: Vec<SynthUtterance>, spec: &SynthSpec, test_per_class: usize) -> (Vec<SynthUtterance>, Vec<SynthUtterance>) {
    let keep = spec.per_class.saturating_sub(test_per_class);
    utts.into_iter().partition(|u| u.id[u.label.len() + 1..].parse::<usize>().is_ok_and(|i| i < keep))
}

/// Writes `<dir>/<id>.wav` for every utterance and returns the manifest.
pub fn write_corpus(dir: &Path, utts: &[SynthUtterance]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let path = dir.join(format!("{}.wav", u.id));
        write_waveform(&path, &u.wave)?;
        entries.push(ManifestEntry { id: u.id.clone(), path, label: u.label.clone(), duration_s: u.wave.duration_s() });
    }
    Manifest::new(entries)
}

pub const PSEUDO_PRETRAINED_DIM: usize = 1024;
const PROJECTION_SEED: u64 = 0x5EED_1024;

/// Front end for [`pseudo_pretrained`]: 80 log-mel bands on a 20 ms hop.
pub fn pseudo_pretrained_frontend() -> Result<Mfcc> {
    Mfcc::new(MfccConfig { hop_ms: 20.0, apply_dct: false, ..Default::default() })
}

/// 1024-dim frames `tanh(W z / sqrt(80))`, where `z` is the log-mel frame
/// standardized by the utterance's overall mean and spread and `W` is a fixed
/// Gaussian matrix shared by all utterances.
pub fn pseudo_pretrained(frontend: &Mfcc, wav: &Waveform) -> Result<FeatureMatrix> {
    let log_mel = frontend.log_mel(wav)?;
    let n_mels = frontend.config().n_mels;
    let all = log_mel.iter().flatten();
    let count = (log_mel.len() * n_mels) as f64;
    let mean = all.clone().sum::<f64>() / count;
    let sd = (all.map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt().max(1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let w: Vec<f64> =
        (0..PSEUDO_PRETRAINED_DIM * n_mels).map(|_| rng.sample::<f64, _>(StandardNormal) / (n_mels as f64).sqrt()).collect();
    let mut data = Vec::with_capacity(log_mel.len() * PSEUDO_PRETRAINED_DIM);
    for frame in &log_mel {
        let z: Vec<f64> = frame.iter().map(|v| (v - mean) / sd).collect();
        for row in w.chunks_exact(n_mels) {
            data.push(row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().tanh() as f32);
        }
    }
    FeatureMatrix::new(log_mel.len(), PSEUDO_PRETRAINED_DIM, frontend.config().hop_ms as f32, FeatureSource::Pretrained, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_determinism() {
        let spec = SynthSpec { per_class: 4, duration_s: 0.5, ..Default::default() };
        let a = corpus(&spec).unwrap();
        let b = corpus(&spec).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a[5].id, "class1_001");
        assert!(a.iter().zip(&b).all(|(x, y)| x.wave == y.wave));
        assert_eq!(a[0].wave.len(), 8000);
        assert!(a.iter().all(|u| u.wave.peak() < 1.0 && u.wave.power() > 0.0));
        let other = corpus(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a[0].wave, other[0].wave);
        let (train, test) = split(a, &spec, 1);
        assert_eq!((train.len(), test.len()), (9, 3));
        assert!(test.iter().all(|u| u.id.ends_with("003")));
    }

    #[test]
    fn too_many_classes() {
        let spec = SynthSpec { n_classes: 6, per_class: 1, duration_s: 0.1, ..Default::default() };
        assert!(corpus(&spec).is_err());
    }

    #[test]
    fn spectrum_peaks_at_the_formants() {
        let spec = SynthSpec { per_class: 1, floor: 0.0, jitter: 0.0, ..Default::default() };
        let u = &corpus(&spec).unwrap()[0];
        let mut avg = vec![0.0; 257];
        for frame in u.wave.samples.chunks_exact(512) {
            for (a, p) in avg.iter_mut().zip(crate::dsp::power_spectrum(frame, 512)) {
                *a += p;
            }
        }
        let band = |lo: f64, hi: f64| {
            let bins = (lo / 31.25) as usize..=(hi / 31.25) as usize;
            bins.map(|b| avg[b]).fold(0.0, f64::max)
        };
        let [f1, f2, f3] = FORMANT_TEMPLATES[0];
        let valleys = [band(1150.0, 1350.0), band(4500.0, 5000.0)];
        for f in [f1, f2, f3] {
            let peak = band(f - 100.0, f + 100.0);
            assert!(valleys.iter().all(|v| peak > 4.0 * v), "{f}: {peak} vs {valleys:?}");
        }
    }

    #[test]
    fn pseudo_pretrained_features() {
        let spec = SynthSpec { per_class: 1, duration_s: 1.0, ..Default::default() };
        let u = &corpus(&spec).unwrap()[1];
        let fe = pseudo_pretrained_frontend().unwrap();
        let f = pseudo_pretrained(&fe, &u.wave).unwrap();
        assert_eq!(f.dim(), 1024);
        assert_eq!(f.frames(), 49);
        assert_eq!(f.source, FeatureSource::Pretrained);
        assert_eq!(f.frame_shift_ms, 20.0);
        assert!(f.is_finite() && f.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(f, pseudo_pretrained(&fe, &u.wave).unwrap());
    }
}
