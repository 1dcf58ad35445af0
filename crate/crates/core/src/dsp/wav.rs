use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::Unsupported => Error::UnsupportedEncoding("codec not supported by the decoder".into()),
        hound::Error::FormatError(msg) => Error::WavFormat(msg.to_string()),
        other => Error::WavFormat(other.to_string()),
    }
}

/// Decodes a RIFF/WAVE file holding PCM16 or IEEE float32 samples.
///
/// Multichannel audio is averaged to mono. PCM16 values are scaled by 1/32768.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavFormat("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::WavFormat("sample count is not a multiple of the channel count".into()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono PCM16 file. Samples outside `[-1, 1)` are clipped.
pub fn write_waveform(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &wav.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Linear-interpolation resampling to `target_rate`.
pub fn resample_linear(wav: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if wav.sample_rate == target_rate || wav.samples.is_empty() {
        return Waveform::new(wav.samples.clone(), target_rate);
    }
    let ratio = wav.sample_rate as f64 / target_rate as f64;
    let n = wav.samples.len();
    let out_len = (((n - 1) as f64) / ratio).floor() as usize + 1;
    let samples = (0..out_len).map(|j| interpolate(&wav.samples, j as f64 * ratio)).collect();
    Waveform::new(samples, target_rate)
}

/// Value of the piecewise-linear interpolant of `s` at fractional index `pos`.
pub(crate) fn interpolate(s: &[f64], pos: f64) -> f64 {
    let last = s.len() - 1;
    if pos <= 0.0 {
        return s[0];
    }
    let i0 = pos.floor() as usize;
    if i0 >= last {
        return s[last];
    }
    let frac = pos - i0 as f64;
    s[i0] + (s[i0 + 1] - s[i0]) * frac
}
