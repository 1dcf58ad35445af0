//! Offline waveform augmentation: additive noise at a target SNR, impulse
//! response convolution and speed perturbation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{resample_linear, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub noise_enabled: bool,
    pub noise_snr_db_range: [f64; 2],
    /// Factor 1.0 is the clean copy and never produces an extra output.
    pub speed_factors: Vec<f64>,
    pub rir_enabled: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_enabled: true,
            noise_snr_db_range: [5.0, 20.0],
            speed_factors: vec![0.9, 1.0, 1.1],
            rir_enabled: true,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Everything switched off: `apply_policy` returns only the clean copy.
    pub fn disabled() -> Self {
        Self { noise_enabled: false, speed_factors: Vec::new(), rir_enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise_snr_db_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("augmentation: snr range [{lo}, {hi}] is inverted")));
        }
        if let Some(f) = self.speed_factors.iter().find(|f| !(**f > 0.0)) {
            return Err(Error::Config(format!("augmentation: speed factor {f} must be positive")));
        }
        Ok(())
    }

    /// Same policy with the seed mixed with a per-utterance key.
    pub fn for_utterance(&self, key: u64) -> Self {
        let mut p = self.clone();
        p.seed = splitmix64(self.seed ^ splitmix64(key));
        p
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Adds `noise` scaled so that `10 log10(P_signal / P_noise_scaled) = snr_db`.
///
/// The noise is resampled to the signal's rate, then tiled or truncated to its length.
pub fn mix_noise(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if noise.is_empty() {
        return Err(Error::DegenerateNoise);
    }
    let resampled;
    let noise = if noise.sample_rate != signal.sample_rate {
        resampled = resample_linear(noise, signal.sample_rate)?;
        &resampled
    } else {
        noise
    };
    let fitted: Vec<f64> = noise.samples.iter().copied().cycle().take(signal.len()).collect();
    let p_signal = signal.power();
    let p_noise = if fitted.is_empty() { 0.0 } else { fitted.iter().map(|v| v * v).sum::<f64>() / fitted.len() as f64 };
    if !(p_noise > 0.0) {
        return Err(Error::DegenerateNoise);
    }
    if !(p_signal > 0.0) {
        return Err(Error::DegenerateSignal);
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = signal.samples.iter().zip(&fitted).map(|(s, n)| s + gain * n).collect();
    Waveform::new(samples, signal.sample_rate)
}

/// Convolves with a room impulse response, keeps the first `len(signal)`
/// samples and rescales to the original peak amplitude.
pub fn convolve_rir(signal: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::Config("impulse response is empty".into()));
    }
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let taps = rir.samples.len().min(i + 1);
        *o = (0..taps).map(|k| rir.samples[k] * signal.samples[i - k]).sum();
    }
    let peak_in = signal.peak();
    let peak_out = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(out, signal.sample_rate)
}

/// Speed perturbation by linear-interpolation resampling at positions `j * factor`.
///
/// Output length is `floor((N - 1) / factor) + 1`; pitch and tempo change together.
pub fn speed_perturb(signal: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) {
        return Err(Error::Config(format!("speed factor {factor} must be positive")));
    }
    if signal.is_empty() {
        return Ok(signal.clone());
    }
    let n = signal.len();
    let out_len = ((n - 1) as f64 / factor).floor() as usize + 1;
    let samples = (0..out_len)
        .map(|j| crate::dsp::interpolate_at(&signal.samples, j as f64 * factor))
        .collect();
    Waveform::new(samples, signal.sample_rate)
}

/// One clean copy followed by one copy per enabled branch, in the order
/// noise, impulse response, then each speed factor other than 1.0.
pub fn apply_policy(
    signal: &Waveform,
    policy: &AugmentPolicy,
    noise_pool: &[Waveform],
    rir_pool: &[Waveform],
) -> Result<Vec<Waveform>> {
    policy.validate()?;
    if policy.noise_enabled && noise_pool.is_empty() {
        return Err(Error::Config("noise augmentation enabled but the noise pool is empty".into()));
    }
    if policy.rir_enabled && rir_pool.is_empty() {
        return Err(Error::Config("impulse-response augmentation enabled but the pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut out = vec![signal.clone()];
    if policy.noise_enabled {
        let noise = noise_pool.choose(&mut rng).expect("pool checked non-empty");
        let [lo, hi] = policy.noise_snr_db_range;
        let snr = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        out.push(mix_noise(signal, noise, snr)?);
    }
    if policy.rir_enabled {
        let rir = rir_pool.choose(&mut rng).expect("pool checked non-empty");
        out.push(convolve_rir(signal, rir)?);
    }
    for &f in &policy.speed_factors {
        if f != 1.0 {
            out.push(speed_perturb(signal, f)?);
        }
    }
    Ok(out)
}
