use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::resample_linear;
use super::{FeatureMatrix, FeatureSource, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub preemphasis: f64,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// When false the DCT is skipped and log-mel energies are emitted.
    pub apply_dct: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            n_mels: 80,
            n_ceps: 80,
            preemphasis: 0.97,
            fmin_hz: 20.0,
            fmax_hz: 7600.0,
            log_floor: 1e-10,
            apply_dct: true,
        }
    }
}

impl MfccConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("mfcc: {m}")));
        if self.sample_rate_hz == 0 {
            return fail("sample_rate_hz must be positive".into());
        }
        if self.win_samples() == 0 || self.hop_samples() == 0 {
            return fail("window and hop must span at least one sample".into());
        }
        if self.n_mels == 0 || self.n_ceps == 0 || self.n_ceps > self.n_mels {
            return fail(format!("need 0 < n_ceps <= n_mels, got n_ceps={} n_mels={}", self.n_ceps, self.n_mels));
        }
        if self.fft_size < self.win_samples() {
            return fail(format!("fft_size {} shorter than window {}", self.fft_size, self.win_samples()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) || self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return fail(format!("need 0 <= fmin < fmax <= nyquist, got {}..{}", self.fmin_hz, self.fmax_hz));
        }
        if !(self.log_floor > 0.0) {
            return fail("log_floor must be positive".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `|X_k|^2` for `k = 0..=fft_size/2` of a zero-padded frame.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    power_spectrum_with(&*fft, frame, &mut buf)
}

fn power_spectrum_with(fft: &dyn Fft<f64>, frame: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
    }
    fft.process(buf);
    buf[..buf.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// MFCC extractor with the window, filterbank, DCT basis and FFT plan precomputed.
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// Per filter: first FFT bin and the weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.win_samples();
        let window = (0..w)
            .map(|n| if w == 1 { 1.0 } else { 0.54 - 0.46 * (2.0 * PI * n as f64 / (w - 1) as f64).cos() })
            .collect();
        let filters = mel_filterbank(&cfg);
        let dct = dct2_orthonormal(cfg.n_mels, cfg.n_ceps);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg, window, filters, dct, fft })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Dense filterbank weights, `n_mels x (fft_size/2 + 1)`.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let n_bins = self.cfg.fft_size / 2 + 1;
        self.filters
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; n_bins];
                row[*start..*start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        let (w, h) = (self.cfg.win_samples(), self.cfg.hop_samples());
        if n_samples < w {
            0
        } else {
            (n_samples - w) / h + 1
        }
    }

    fn prepare(&self, wav: &Waveform) -> Result<Vec<f64>> {
        let resampled;
        let wav = if wav.sample_rate != self.cfg.sample_rate_hz {
            resampled = resample_linear(wav, self.cfg.sample_rate_hz)?;
            &resampled
        } else {
            wav
        };
        let w = self.cfg.win_samples();
        if wav.samples.len() < w {
            return Err(Error::TooShort { needed: w, got: wav.samples.len() });
        }
        let a = self.cfg.preemphasis;
        let s = &wav.samples;
        Ok((0..s.len()).map(|i| if i == 0 { s[0] } else { s[i] - a * s[i - 1] }).collect())
    }

    /// Mel filterbank energies before the log, one row per frame.
    pub fn mel_energies(&self, wav: &Waveform) -> Result<Vec<Vec<f64>>> {
        let emph = self.prepare(wav)?;
        let (w, h) = (self.cfg.win_samples(), self.cfg.hop_samples());
        let frames = self.frame_count(emph.len());
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut frame = vec![0.0; w];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            for (i, f) in frame.iter_mut().enumerate() {
                *f = emph[t * h + i] * self.window[i];
            }
            let power = power_spectrum_with(&*self.fft, &frame, &mut buf);
            out.push(
                self.filters
                    .iter()
                    .map(|(start, wts)| wts.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Floored natural-log mel energies, `frames x n_mels`.
    pub fn log_mel(&self, wav: &Waveform) -> Result<Vec<Vec<f64>>> {
        let floor = self.cfg.log_floor;
        let mut e = self.mel_energies(wav)?;
        for row in &mut e {
            for v in row.iter_mut() {
                *v = v.max(floor).ln();
            }
        }
        Ok(e)
    }

    /// Cepstra (or log-mel energies when `apply_dct` is off), not normalized.
    pub fn compute(&self, wav: &Waveform) -> Result<FeatureMatrix> {
        let log_mel = self.log_mel(wav)?;
        let (n_mels, n_ceps) = (self.cfg.n_mels, self.cfg.n_ceps);
        let dim = if self.cfg.apply_dct { n_ceps } else { n_mels };
        let mut data = Vec::with_capacity(log_mel.len() * dim);
        for row in &log_mel {
            if self.cfg.apply_dct {
                for k in 0..n_ceps {
                    let basis = &self.dct[k * n_mels..(k + 1) * n_mels];
                    data.push(basis.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() as f32);
                }
            } else {
                data.extend(row.iter().map(|&v| v as f32));
            }
        }
        FeatureMatrix::new(log_mel.len(), dim, self.cfg.hop_ms as f32, FeatureSource::Mfcc, data)
    }

    /// The full front end: cepstra followed by per-utterance normalization.
    pub fn extract(&self, wav: &Waveform) -> Result<FeatureMatrix> {
        Ok(instance_normalize(&self.compute(wav)?))
    }
}

pub fn compute_mfcc(wav: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    Mfcc::new(cfg.clone())?.compute(wav)
}

fn mel_filterbank(cfg: &MfccConfig) -> Vec<(usize, Vec<f64>)> {
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect();
            let start = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
            let end = weights.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
            (start, weights[start..end].to_vec())
        })
        .collect()
}

/// Row-major `n_out x n` orthonormal DCT-II basis.
fn dct2_orthonormal(n: usize, n_out: usize) -> Vec<f64> {
    let mut basis = Vec::with_capacity(n * n_out);
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            basis.push(scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    basis
}

/// Standardizes every coefficient over the utterance's frames: `(x - mean) / sqrt(var + 1e-5)`.
pub fn instance_normalize(feat: &FeatureMatrix) -> FeatureMatrix {
    const EPS: f64 = 1e-5;
    let (frames, dim) = (feat.frames(), feat.dim());
    let mut mean = vec![0.0f64; dim];
    for t in 0..frames {
        for (m, &v) in mean.iter_mut().zip(feat.frame(t)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let mut var = vec![0.0f64; dim];
    for t in 0..frames {
        for ((s, &v), m) in var.iter_mut().zip(feat.frame(t)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / frames as f64 + EPS).sqrt()).collect();
    let data = (0..frames * dim)
        .map(|i| {
            let d = i % dim;
            ((feat.data()[i] as f64 - mean[d]) * inv[d]) as f32
        })
        .collect();
    FeatureMatrix::new(frames, dim, feat.frame_shift_ms, feat.source, data).expect("shape preserved")
}
