//! WebAssembly bindings behind `www/index.html`.
//!
//! Each demo operation has a plain Rust function (tested natively) and a thin
//! `#[wasm_bindgen]` wrapper that turns errors into JS exceptions.

use std::f64::consts::PI;

use adi_core::dsp::{Mfcc, MfccConfig};
use adi_core::inference::{combine, fuse, normalize, CohortNormalization};
use adi_core::nn::{aam_logits, AamConfig, Tensor};
use adi_core::synth::{formant_utterance, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Normalized MFCC frames of a 1 s synthetic signal with three formants,
/// row-major `[frames, 80]`.
pub fn formant_mfcc(formants: [f64; 3], seed: u64) -> Result<(usize, Vec<f32>), String> {
    let spec = SynthSpec { duration_s: 1.0, ..Default::default() };
    let wave = formant_utterance(&formants, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let feat = Mfcc::new(MfccConfig::default()).and_then(|m| m.extract(&wave)).map_err(|e| e.to_string())?;
    Ok((feat.frames(), feat.data().to_vec()))
}

/// Target-class logits over `points` angles in `[0, pi]`, as
/// `[theta, training logit, inference logit]` triples.
pub fn aam_curve(scale: f64, margin: f64, points: usize) -> Result<Vec<f64>, String> {
    let cfg = AamConfig { scale, margin, ..AamConfig::new(2, 2) };
    cfg.validate().map_err(|e| e.to_string())?;
    let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let theta = PI * i as f64 / (points.max(2) - 1) as f64;
        let e = [theta.cos(), theta.sin()];
        let train = aam_logits(&e, &w, &cfg, Some(0)).map_err(|e| e.to_string())?[0];
        let infer = aam_logits(&e, &w, &cfg, None).map_err(|e| e.to_string())?[0];
        out.extend([theta, train, infer]);
    }
    Ok(out)
}

/// Per-system softmax/cohort mix followed by weighted fusion. `softmax` and
/// `cohort` hold `weights.len()` rows of `k` scores each; returns the per-system
/// combined rows followed by the fused row.
pub fn fuse_systems(softmax: &[f64], cohort: &[f64], k: usize, softmax_weight: f64, weights: &[f64]) -> Result<Vec<f64>, String> {
    let n = weights.len();
    if k == 0 || softmax.len() != n * k || cohort.len() != n * k {
        return Err(format!("expected {n} systems x {k} classes of scores"));
    }
    let combined = softmax
        .chunks_exact(k)
        .zip(cohort.chunks_exact(k))
        .map(|(p, c)| combine(p, &normalize(c, CohortNormalization::MinMax), softmax_weight))
        .collect::<adi_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let fused = fuse(&combined, weights).map_err(|e| e.to_string())?;
    Ok(combined.into_iter().flatten().chain(fused).collect())
}

#[wasm_bindgen]
pub struct MfccImage {
    frames: usize,
    data: Vec<f32>,
}

#[wasm_bindgen]
impl MfccImage {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn dim(&self) -> usize {
        self.data.len() / self.frames.max(1)
    }

    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }
}

#[wasm_bindgen(js_name = formantMfcc)]
pub fn formant_mfcc_js(f1: f64, f2: f64, f3: f64, seed: u32) -> Result<MfccImage, JsError> {
    let (frames, data) = formant_mfcc([f1, f2, f3], seed as u64).map_err(|e| JsError::new(&e))?;
    Ok(MfccImage { frames, data })
}

#[wasm_bindgen(js_name = aamCurve)]
pub fn aam_curve_js(scale: f64, margin: f64, points: usize) -> Result<Vec<f64>, JsError> {
    aam_curve(scale, margin, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fuseSystems)]
pub fn fuse_systems_js(softmax: &[f64], cohort: &[f64], k: usize, softmax_weight: f64, weights: &[f64]) -> Result<Vec<f64>, JsError> {
    fuse_systems(softmax, cohort, k, softmax_weight, weights).map_err(|e| JsError::new(&e))
}
