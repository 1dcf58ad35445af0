//! Cohort similarity scoring, score combination and multi-system fusion.

mod cohort;

pub use cohort::{build_cohorts, cohort_scores, unit_normalize, CohortSet, COHORT_MAGIC, COHORT_VERSION};

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::softmax;
use crate::train::argmax;

/// How per-class cohort similarities are mapped before combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CohortNormalization {
    #[default]
    MinMax,
    ZNorm,
    Softmax,
}

/// Which per-system vector enters the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionInput {
    #[default]
    Combined,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Cohort utterances per class (fewer if the class has fewer).
    pub cohort_size: usize,
    /// Weight of the softmax term; the cohort term gets the rest.
    pub softmax_weight: f64,
    pub normalization: CohortNormalization,
    pub fusion_input: FusionInput,
    /// Per-system fusion weights; equal weights when absent.
    pub fusion_weights: Option<Vec<f64>>,
    /// Seed for cohort sampling.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            cohort_size: 500,
            softmax_weight: 0.5,
            normalization: CohortNormalization::MinMax,
            fusion_input: FusionInput::Combined,
            fusion_weights: None,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cohort_size == 0 {
            return Err(Error::Config("inference: cohort_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.softmax_weight) {
            return Err(Error::Config("inference: softmax_weight must lie in [0, 1]".into()));
        }
        if let Some(w) = &self.fusion_weights {
            check_weights(w)?;
        }
        Ok(())
    }
}

/// `(x - min) / (max - min)`; an all-equal vector maps to `1/K` everywhere.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}

/// Zero mean, unit (population) standard deviation; all-equal input maps to zeros.
pub fn znorm(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    scores.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }).collect()
}

pub fn normalize(scores: &[f64], method: CohortNormalization) -> Vec<f64> {
    match method {
        CohortNormalization::MinMax => minmax_normalize(scores),
        CohortNormalization::ZNorm => znorm(scores),
        CohortNormalization::Softmax => softmax(scores),
    }
}

/// `weight * softmax + (1 - weight) * cohort`.
pub fn combine(softmax_probs: &[f64], cohort: &[f64], weight: f64) -> Result<Vec<f64>> {
    if softmax_probs.len() != cohort.len() {
        return Err(Error::Dimension(format!(
            "cannot combine {} softmax scores with {} cohort scores",
            softmax_probs.len(),
            cohort.len()
        )));
    }
    Ok(softmax_probs.iter().zip(cohort).map(|(p, c)| weight * p + (1.0 - weight) * c).collect())
}

pub fn check_weights(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Config(format!("fusion weights must sum to 1 (got {sum})")));
    }
    Ok(())
}

pub fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Weighted sum of per-system score vectors.
pub fn fuse(systems: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if systems.len() != weights.len() {
        return Err(Error::Config(format!("{} fusion weights for {} systems", weights.len(), systems.len())));
    }
    check_weights(weights)?;
    let k = systems[0].len();
    if systems.iter().any(|s| s.len() != k) {
        return Err(Error::Config("fused systems disagree on the number of classes".into()));
    }
    let mut out = vec![0.0; k];
    for (s, w) in systems.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// The score vectors one system produces for an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemScores {
    pub softmax: Vec<f64>,
    pub cohort: Vec<f64>,
    pub cohort_normalized: Vec<f64>,
    pub combined: Vec<f64>,
}

/// A trained model with its cohorts.
#[derive(Debug, Clone)]
pub struct System {
    pub model: Model,
    pub cohorts: CohortSet,
    pub labels: Vec<String>,
}

impl System {
    pub fn new(model: Model, cohorts: CohortSet, labels: Vec<String>) -> Result<Self> {
        if cohorts.n_classes() != model.n_classes() || labels.len() != model.n_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, cohorts {}, labels {}",
                model.n_classes(),
                cohorts.n_classes(),
                labels.len()
            )));
        }
        if cohorts.embed_dim() != model.embed_dim() {
            return Err(Error::Dimension(format!(
                "cohort embeddings are {}-dim, model embeddings {}-dim",
                cohorts.embed_dim(),
                model.embed_dim()
            )));
        }
        Ok(Self { model, cohorts, labels })
    }

    pub fn score(&self, feat: &FeatureMatrix, cfg: &InferenceConfig) -> Result<SystemScores> {
        let emb = self.model.embed(feat)?;
        let softmax = softmax(&self.model.logits_from_embedding(&emb, None)?);
        let cohort = cohort_scores(&emb, &self.cohorts)?;
        let cohort_normalized = normalize(&cohort, cfg.normalization);
        let combined = combine(&softmax, &cohort_normalized, cfg.softmax_weight)?;
        Ok(SystemScores { softmax, cohort, cohort_normalized, combined })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub label: usize,
    pub fused: Vec<f64>,
    pub systems: Vec<SystemScores>,
}

/// One or more systems fused with fixed weights.
#[derive(Debug, Clone)]
pub struct Classifier {
    systems: Vec<System>,
    weights: Vec<f64>,
    cfg: InferenceConfig,
}

impl Classifier {
    pub fn new(systems: Vec<System>, cfg: InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        let first = systems.first().ok_or_else(|| Error::Config("no systems to classify with".into()))?;
        if let Some(other) = systems.iter().find(|s| s.labels != first.labels) {
            return Err(Error::Config(format!("label sets differ: {:?} vs {:?}", first.labels, other.labels)));
        }
        let weights = cfg.fusion_weights.clone().unwrap_or_else(|| equal_weights(systems.len()));
        if weights.len() != systems.len() {
            return Err(Error::Config(format!("{} fusion weights for {} systems", weights.len(), systems.len())));
        }
        Ok(Self { systems, weights, cfg })
    }

    pub fn systems(&self) -> &[System] {
        &self.systems
    }

    pub fn labels(&self) -> &[String] {
        &self.systems[0].labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Scores one utterance; `feats[i]` feeds system `i`. Ties in the fused
    /// vector go to the lowest class index.
    pub fn classify(&self, feats: &[&FeatureMatrix]) -> Result<Decision> {
        if feats.len() != self.systems.len() {
            return Err(Error::Config(format!("{} feature inputs for {} systems", feats.len(), self.systems.len())));
        }
        let scores = self.systems.iter().zip(feats).map(|(s, f)| s.score(f, &self.cfg)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| match self.cfg.fusion_input {
                FusionInput::Combined => s.combined.clone(),
                FusionInput::Softmax => s.softmax.clone(),
            })
            .collect();
        let fused = fuse(&inputs, &self.weights)?;
        Ok(Decision { label: argmax(&fused), fused, systems: scores })
    }
}

/// Score export line: `utt_id<TAB>score_0..score_{K-1}<TAB>decision`.
pub fn score_line(id: &str, scores: &[f64], decision: &str) -> String {
    let mut line = id.to_string();
    for s in scores {
        line.push_str(&format!("\t{s:.6}"));
    }
    line.push('\t');
    line.push_str(decision);
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[0.3; 3]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&[0.6, 0.4], &[1.0, 0.0], 0.5).unwrap(), vec![0.8, 0.2]);
        let c = combine(&[0.51, 0.49], &[0.0, 1.0], 0.5).unwrap();
        assert!((c[0] - 0.255).abs() < 1e-12 && (c[1] - 0.745).abs() < 1e-12);
        assert_eq!(argmax(&c), 1);
        assert!(matches!(combine(&[0.5, 0.5], &[1.0], 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_examples() {
        let v = vec![0.3, 0.7];
        assert_eq!(fuse(&[v.clone(), v.clone(), v.clone(), v.clone()], &[0.25; 4]).unwrap(), v);
        let s = [vec![0.9, 0.1], vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        let f = fuse(&s, &[0.25; 4]).unwrap();
        assert!((f[0] - 0.65).abs() < 1e-12 && (f[1] - 0.35).abs() < 1e-12);
        assert!(matches!(fuse(&s, &[0.3; 4]), Err(Error::Config(_))));
        assert!(matches!(fuse(&s[..2], &[0.5; 3]), Err(Error::Config(_))));
        assert!(fuse(&[vec![1.0], vec![1.0, 0.0]], &[0.5, 0.5]).is_err());
        assert!(fuse(&[vec![1.0, 0.0]], &[1.0 + 1e-10]).is_ok());
    }

    #[test]
    fn alternative_normalizations() {
        let z = znorm(&[1.0, 2.0, 3.0]);
        assert!((z.iter().sum::<f64>()).abs() < 1e-12);
        assert!((z.iter().map(|x| x * x).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(znorm(&[2.0, 2.0]), vec![0.0, 0.0]);
        let s = normalize(&[0.0, 1.0], CohortNormalization::Softmax);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12 && s[1] > s[0]);
    }

    #[test]
    fn score_line_format() {
        assert_eq!(score_line("u1", &[0.25, 0.75], "b"), "u1\t0.250000\t0.750000\tb");
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        let bad = InferenceConfig { fusion_weights: Some(vec![0.5, 0.6]), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = InferenceConfig { softmax_weight: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn minmax_ignores_positive_affine_maps(
            x in prop::collection::vec(-10i32..10, 2..8),
            a_exp in -3i32..4,
            b in -16i32..16,
        ) {
            // Power-of-two scales and small integer offsets keep every step exact.
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let a = 2f64.powi(a_exp);
            let y: Vec<f64> = x.iter().map(|v| a * v + b as f64).collect();
            prop_assert_eq!(minmax_normalize(&x), minmax_normalize(&y));
        }

        #[test]
        fn simplex_bounds_are_preserved(
            p in prop::collection::vec(0.0f64..=1.0, 3),
            q in prop::collection::vec(0.0f64..=1.0, 3),
            w in 0.0f64..=1.0,
        ) {
            let c = combine(&p, &q, w).unwrap();
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            let f = fuse(&[p.clone(), q.clone(), c], &[0.2, 0.3, 0.5]).unwrap();
            prop_assert!(f.iter().all(|v| (-1e-15..=1.0 + 1e-15).contains(v)));
        }

        #[test]
        fn minmax_affine_maps_in_general(
            x in prop::collection::vec(-5.0f64..5.0, 2..8),
            a in 0.1f64..10.0,
            b in -100.0f64..100.0,
        ) {
            let range = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(range > 0.1);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            for (p, q) in minmax_normalize(&x).iter().zip(minmax_normalize(&y)) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn minmax_keeps_the_argmax(x in prop::collection::vec(-5.0f64..5.0, 2..6)) {
            let n = minmax_normalize(&x);
            if n.iter().any(|v| *v != n[0]) {
                prop_assert_eq!(argmax(&n), argmax(&x));
            }
        }
    }
}
