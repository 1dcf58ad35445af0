use std::f64::consts::{FRAC_PI_2, PI};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cached, he_uniform, ParamVisitor, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl AamConfig {
    pub fn new(n_classes: usize, embed_dim: usize) -> Self {
        Self { scale: 30.0, margin: 0.4, n_classes, embed_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("aam scale {} must be positive", self.scale)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("aam margin {} must lie in [0, pi/2)", self.margin)));
        }
        if self.n_classes < 2 || self.embed_dim == 0 {
            return Err(Error::Config("aam needs at least 2 classes and a non-empty embedding".into()));
        }
        Ok(())
    }

    /// `cos(theta + m)` for the target class and its derivative w.r.t. `cos(theta)`.
    ///
    /// Past `theta + m = pi` the curve stops being monotone, so there it is
    /// replaced by the linear surrogate `cos(theta) - m sin(m)`.
    fn target_cos(&self, cos: f64) -> (f64, f64) {
        let m = self.margin;
        let threshold = (PI - m).cos();
        if cos > threshold {
            let sin = (1.0 - cos * cos).max(0.0).sqrt();
            let phi = cos * m.cos() - sin * m.sin();
            let dphi = m.cos() + m.sin() * cos / sin.max(1e-12);
            (phi, dphi)
        } else {
            (cos - (PI - m).sin() * m, 1.0)
        }
    }
}

fn unit_rows(x: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in unit.chunks_exact_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Normalization);
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Scaled cosine logits for one embedding; the target class gets the angular
/// margin when `label` is given.
pub fn aam_logits(embedding: &[f64], weights: &Tensor, cfg: &AamConfig, label: Option<usize>) -> Result<Vec<f64>> {
    let (k, d) = (weights.dim(0), weights.dim(1));
    if embedding.len() != d {
        return Err(Error::Dimension(format!("aam expects {d}-dim embeddings, got {}", embedding.len())));
    }
    if let Some(y) = label.filter(|&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }
    let (e, _) = unit_rows(embedding, d)?;
    let (w, _) = unit_rows(weights.data(), d)?;
    Ok((0..k)
        .map(|j| {
            let cos: f64 = e.iter().zip(&w[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            let cos = cos.clamp(-1.0, 1.0);
            cfg.scale * if label == Some(j) { cfg.target_cos(cos).0 } else { cos }
        })
        .collect())
}

/// Additive angular margin classification head on `[B, D]` embeddings.
#[derive(Debug, Clone)]
pub struct AamHead {
    pub weight: Parameter,
    pub cfg: AamConfig,
    cache: Option<AamCache>,
}

#[derive(Debug, Clone)]
struct AamCache {
    unit_emb: Vec<f64>,
    emb_norms: Vec<f64>,
    unit_w: Vec<f64>,
    w_norms: Vec<f64>,
    cos: Vec<f64>,
    /// d logit / d cos for every entry.
    slope: Vec<f64>,
}

impl AamHead {
    pub fn new(cfg: AamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let weight = Parameter::new(he_uniform(&[cfg.n_classes, cfg.embed_dim], cfg.embed_dim, rng));
        Ok(Self { weight, cfg, cache: None })
    }

    fn cosines(&self, emb: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        emb.expect_rank(2, "aam head")?;
        let (k, d) = (self.cfg.n_classes, self.cfg.embed_dim);
        if emb.dim(1) != d {
            return Err(Error::Dimension(format!("aam expects {d}-dim embeddings, got {}", emb.dim(1))));
        }
        let (ue, en) = unit_rows(emb.data(), d)?;
        let (uw, wn) = unit_rows(self.weight.value.data(), d)?;
        let b = emb.dim(0);
        let mut cos = vec![0.0; b * k];
        super::gemm(b, d, k, &ue, false, &uw, true, 0.0, &mut cos);
        cos.iter_mut().for_each(|c| *c = c.clamp(-1.0, 1.0));
        Ok((ue, en, uw, wn, cos))
    }

    /// Training-mode logits; the labelled class of each row receives the margin.
    pub fn forward(&mut self, emb: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let (unit_emb, emb_norms, unit_w, w_norms, cos) = self.cosines(emb)?;
        let (b, k, s) = (emb.dim(0), self.cfg.n_classes, self.cfg.scale);
        if let Some(l) = labels {
            if l.len() != b {
                return Err(Error::Dimension(format!("{} labels for a batch of {b}", l.len())));
            }
            if let Some(&y) = l.iter().find(|&&y| y >= k) {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
        }
        let mut logits = vec![0.0; b * k];
        let mut slope = vec![s; b * k];
        for bi in 0..b {
            for j in 0..k {
                let c = cos[bi * k + j];
                logits[bi * k + j] = s * c;
                if labels.is_some_and(|l| l[bi] == j) {
                    let (phi, dphi) = self.cfg.target_cos(c);
                    logits[bi * k + j] = s * phi;
                    slope[bi * k + j] = s * dphi;
                }
            }
        }
        self.cache = Some(AamCache { unit_emb, emb_norms, unit_w, w_norms, cos, slope });
        Tensor::from_vec(&[b, k], logits)
    }

    /// Inference logits `s * cos(theta_k)`.
    pub fn infer(&self, emb: &Tensor) -> Result<Tensor> {
        let (.., cos) = self.cosines(emb)?;
        let s = self.cfg.scale;
        Tensor::from_vec(&[emb.dim(0), self.cfg.n_classes], cos.into_iter().map(|c| s * c).collect())
    }

    /// Cosines from the most recent training forward, `[B * K]`.
    pub fn last_cosines(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.cos.as_slice())
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let c = cached(&self.cache, "aam head");
        let (k, d) = (self.cfg.n_classes, self.cfg.embed_dim);
        let b = grad.dim(0);
        let dcos: Vec<f64> = grad.data().iter().zip(&c.slope).map(|(g, s)| g * s).collect();
        let mut d_ue = vec![0.0; b * d];
        super::gemm(b, k, d, &dcos, false, &c.unit_w, false, 0.0, &mut d_ue);
        let mut d_uw = vec![0.0; k * d];
        super::gemm(k, b, d, &dcos, true, &c.unit_emb, false, 0.0, &mut d_uw);
        // u = v / |v|  =>  dv = (du - u (u . du)) / |v|
        let unnormalize = |du: &mut [f64], u: &[f64], norms: &[f64]| {
            for ((row, urow), n) in du.chunks_exact_mut(d).zip(u.chunks_exact(d)).zip(norms) {
                let proj: f64 = row.iter().zip(urow).map(|(a, b)| a * b).sum();
                for (g, uv) in row.iter_mut().zip(urow) {
                    *g = (*g - uv * proj) / n;
                }
            }
        };
        unnormalize(&mut d_ue, &c.unit_emb, &c.emb_norms);
        unnormalize(&mut d_uw, &c.unit_w, &c.w_norms);
        for (g, v) in self.weight.grad.data_mut().iter_mut().zip(&d_uw) {
            *g += v;
        }
        Tensor::from_vec(&[b, d], d_ue).expect("embedding shape")
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        f("weight", &mut self.weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_class_weights() -> Tensor {
        Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_margin_matches_inference() {
        let cfg = AamConfig { margin: 0.0, ..AamConfig::new(2, 2) };
        let w = two_class_weights();
        let e = [0.3, -0.8];
        assert_eq!(aam_logits(&e, &w, &cfg, Some(1)).unwrap(), aam_logits(&e, &w, &cfg, None).unwrap());
    }

    #[test]
    fn aligned_target_logit() {
        let cfg = AamConfig::new(2, 2);
        let l = aam_logits(&[2.0, 0.0], &two_class_weights(), &cfg, Some(0)).unwrap();
        assert!((l[0] - 27.632).abs() < 1e-3, "{}", l[0]);
        assert!((l[0] - 30.0 * 0.4f64.cos()).abs() < 1e-12);
        assert!(l[1].abs() < 1e-12);
    }

    #[test]
    fn margin_lowers_target_logit() {
        let cfg = AamConfig::new(2, 2);
        let w = two_class_weights();
        for i in 1..100 {
            let theta = (PI - cfg.margin) * i as f64 / 100.0;
            let e = [theta.cos(), theta.sin()];
            let train = aam_logits(&e, &w, &cfg, Some(0)).unwrap()[0];
            let inf = aam_logits(&e, &w, &cfg, None).unwrap()[0];
            assert!(train < inf, "theta={theta}");
        }
    }

    #[test]
    fn target_curve_is_monotone_across_threshold() {
        let cfg = AamConfig::new(2, 2);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let c = -1.0 + i as f64 / 1000.0;
            let (phi, slope) = cfg.target_cos(c);
            assert!(phi > prev, "not increasing at cos={c}");
            assert!(slope > 0.0);
            prev = phi;
        }
    }

    #[test]
    fn rejects_zero_embedding_and_bad_config() {
        let cfg = AamConfig::new(2, 2);
        assert!(matches!(aam_logits(&[0.0, 0.0], &two_class_weights(), &cfg, None), Err(Error::Normalization)));
        assert!(AamConfig { margin: 1.6, ..cfg.clone() }.validate().is_err());
        assert!(AamConfig { scale: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn head_matches_free_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = AamHead::new(AamConfig::new(3, 4), &mut rng).unwrap();
        let emb = Tensor::from_vec(&[2, 4], vec![0.1, -0.4, 0.9, 0.2, -1.0, 0.5, 0.0, 0.3]).unwrap();
        let logits = head.forward(&emb, Some(&[2, 0])).unwrap();
        for (b, y) in [(0usize, 2usize), (1, 0)] {
            let free = aam_logits(&emb.data()[b * 4..(b + 1) * 4], &head.weight.value, &head.cfg, Some(y)).unwrap();
            for j in 0..3 {
                assert!((logits.data()[b * 3 + j] - free[j]).abs() < 1e-12);
            }
        }
    }
}
