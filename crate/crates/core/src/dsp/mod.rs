//! Audio front end: waveform I/O, MFCC extraction and the ADIF feature-file format.

mod adif;
mod mfcc;
mod wav;

pub use adif::{read_feature_file, write_feature_file, decode_adif, encode_adif, ADIF_HEADER_LEN, ADIF_MAGIC, ADIF_VERSION};
pub use mfcc::{compute_mfcc, instance_normalize, mel_to_hz, hz_to_mel, power_spectrum, Mfcc, MfccConfig};
pub use wav::{load_waveform, resample_linear, write_waveform};
pub(crate) use wav::interpolate as interpolate_at;

use crate::error::{Error, Result};

/// Mono PCM audio. Samples are nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Where a feature matrix came from; stored as byte 5 of an ADIF header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Mfcc,
    Pretrained,
}

impl FeatureSource {
    pub fn code(self) -> u8 {
        match self {
            FeatureSource::Mfcc => 0,
            FeatureSource::Pretrained => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FeatureSource::Mfcc),
            1 => Ok(FeatureSource::Pretrained),
            other => Err(Error::AdifSource(other)),
        }
    }

    /// Coefficient count the networks expect for this source.
    pub fn nominal_dim(self) -> usize {
        match self {
            FeatureSource::Mfcc => 80,
            FeatureSource::Pretrained => 1024,
        }
    }
}

impl std::fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureSource::Mfcc => "mfcc",
            FeatureSource::Pretrained => "pretrained",
        })
    }
}

/// A `frames x dim` matrix stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    pub frame_shift_ms: f32,
    pub source: FeatureSource,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, frame_shift_ms: f32, source: FeatureSource, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Dimension(format!("feature matrix must be non-empty, got {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "{frames}x{dim} feature matrix needs {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, frame_shift_ms, source, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.data[t * self.dim + d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies frames `start..start+len`, wrapping around the end of the utterance.
    pub fn cyclic_slice(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(len * self.dim);
        for i in 0..len {
            data.extend_from_slice(self.frame((start + i) % self.frames));
        }
        Self { frames: len, dim: self.dim, frame_shift_ms: self.frame_shift_ms, source: self.source, data }
    }
}
