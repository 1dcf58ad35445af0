//! Per-class reference embeddings and their binary store.
//!
//! Store layout (little-endian): magic `ADCO`, version u32, class count `K`
//! u32, embedding dim u32, `K` per-class counts u32, then every embedding as
//! f32 values, class by class.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::Example;

pub const COHORT_MAGIC: [u8; 4] = *b"ADCO";
pub const COHORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSet {
    embed_dim: usize,
    classes: Vec<Vec<Vec<f64>>>,
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Normalization);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl CohortSet {
    /// Builds a cohort set from raw embeddings, normalizing each to unit length.
    pub fn new(embed_dim: usize, classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("a cohort set needs at least two classes".into()));
        }
        let mut out = Vec::with_capacity(classes.len());
        for (k, members) in classes.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("cohort for class {k} is empty")));
            }
            let mut normed = Vec::with_capacity(members.len());
            for e in members {
                if e.len() != embed_dim {
                    return Err(Error::Dimension(format!("cohort embedding has {} dims, expected {embed_dim}", e.len())));
                }
                normed.push(unit_normalize(&e)?);
            }
            out.push(normed);
        }
        Ok(Self { embed_dim, classes: out })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn class(&self, k: usize) -> &[Vec<f64>] {
        &self.classes[k]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&COHORT_MAGIC);
        out.extend_from_slice(&COHORT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
        }
        for v in self.classes.iter().flatten().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes a store; embeddings are renormalized after the f32 round trip.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CohortFormat(m.to_string());
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..4) != Some(&COHORT_MAGIC[..]) {
            return Err(bad("bad magic"));
        }
        let version = word(1)?;
        if version != COHORT_VERSION {
            return Err(Error::CohortFormat(format!("unsupported version {version}")));
        }
        let (k, dim) = (word(2)? as usize, word(3)? as usize);
        let counts = (0..k).map(|i| word(4 + i).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let total: usize = counts.iter().sum();
        let body = &bytes[(4 + k) * 4..];
        if Some(body.len()) != total.checked_mul(dim).and_then(|n| n.checked_mul(4)) {
            return Err(Error::CohortFormat(format!("expected {} embedding bytes, found {}", total * dim * 4, body.len())));
        }
        let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let classes = counts
            .iter()
            .map(|&n| (0..n).map(|_| values.by_ref().take(dim).collect()).collect())
            .collect();
        Self::new(dim, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Samples up to `n_per_class` utterances per class without replacement and
/// stores their unit-normalized eval-mode embeddings.
pub fn build_cohorts(model: &Model, examples: &[Example], n_per_class: usize, seed: u64) -> Result<CohortSet> {
    let k = model.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, ex) in examples.iter().enumerate() {
        by_class
            .get_mut(ex.label)
            .ok_or(Error::LabelOutOfRange { label: ex.label, classes: k })?
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(k);
    for (label, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Config(format!("class {label} has no utterances to build a cohort from")));
        }
        members.shuffle(&mut rng);
        members.truncate(n_per_class);
        classes.push(members.iter().map(|&i| model.embed(&examples[i].features)).collect::<Result<Vec<_>>>()?);
    }
    CohortSet::new(model.embed_dim(), classes)
}

/// Mean cosine similarity between `embedding` and each class cohort.
pub fn cohort_scores(embedding: &[f64], cohorts: &CohortSet) -> Result<Vec<f64>> {
    if embedding.len() != cohorts.embed_dim {
        return Err(Error::Dimension(format!(
            "{}-dim embedding scored against {}-dim cohorts",
            embedding.len(),
            cohorts.embed_dim
        )));
    }
    let e = unit_normalize(embedding)?;
    Ok(cohorts
        .classes
        .iter()
        .map(|members| {
            let sum: f64 = members.iter().map(|r| r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()).sum();
            (sum / members.len() as f64).clamp(-1.0, 1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(classes: Vec<Vec<Vec<f64>>>) -> CohortSet {
        CohortSet::new(classes[0][0].len(), classes).unwrap()
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let e = vec![0.6, 0.8, 0.0];
        let c = set(vec![vec![e.clone()], vec![vec![0.0, 0.0, 2.0], vec![-0.8, 0.6, 0.0]], vec![e.clone(), vec![-0.6, -0.8, 0.0]]]);
        let s = cohort_scores(&e, &c).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
        assert!(matches!(cohort_scores(&[0.0; 3], &c), Err(Error::Normalization)));
        assert!(matches!(cohort_scores(&[1.0; 2], &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn stored_embeddings_are_unit_norm() {
        let c = set(vec![vec![vec![3.0, 4.0]], vec![vec![1e-3, 0.0], vec![5.0, -5.0]]]);
        for k in 0..2 {
            for e in c.class(k) {
                assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_round_trip_and_errors() {
        let c = set(vec![vec![vec![3.0, 4.0, 1.0]], vec![vec![1.0, 0.0, 0.0], vec![5.0, -5.0, 2.0]]]);
        let bytes = c.to_bytes();
        let back = CohortSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.counts(), vec![1, 2]);
        for k in 0..2 {
            for (a, b) in back.class(k).iter().zip(c.class(k)) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
                assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(back.to_bytes(), bytes);
        assert!(CohortSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(CohortSet::from_bytes(&bytes[..10]).is_err());
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(CohortSet::from_bytes(&v).is_err());
        assert!(CohortSet::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn empty_classes_are_rejected() {
        assert!(CohortSet::new(2, vec![vec![vec![1.0, 0.0]], vec![]]).is_err());
        assert!(CohortSet::new(2, vec![vec![vec![1.0, 0.0]]]).is_err());
    }
}
