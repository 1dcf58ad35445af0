//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `ADCK` | 4 bytes |
//! | version | u32 |
//! | architecture code | u8 (0 resnet34, 1 ecapa) |
//! | header length, header | u32, UTF-8 JSON |
//! | tensor count | u32 |
//! | per tensor: name length, name, rank, dims, values | u16, UTF-8, u8, u32 × rank, f64 × numel |
//!
//! Tensor names carry a section prefix: `param/`, `buffer/`, `adam_m/` and
//! `adam_v/`. Values are stored as f64 so a resumed run continues bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Adam;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Class names in class-index order.
    pub labels: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    labels: Vec<String>,
    epoch: usize,
    seed: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_steps: u64,
}

fn arch_code(a: Architecture) -> u8 {
    match a {
        Architecture::ResNet34 => 0,
        Architecture::Ecapa => 1,
    }
}

fn trainable_names(model: &mut Model) -> Vec<String> {
    let mut names = Vec::new();
    model.visit_params(&mut |n, p| {
        if p.trainable {
            names.push(n.to_string())
        }
    });
    names
}

impl Checkpoint {
    pub fn fresh(model: Model, labels: Vec<String>, seed: u64, optimizer: Adam) -> Result<Self> {
        if labels.len() != model.n_classes() {
            return Err(Error::Config(format!("{} labels for a {}-class model", labels.len(), model.n_classes())));
        }
        Ok(Self { model, labels, epoch: 0, seed, optimizer })
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut model = self.model.clone();
        let header = Header {
            model: model.config().clone(),
            labels: self.labels.clone(),
            epoch: self.epoch,
            seed: self.seed,
            adam_beta1: self.optimizer.beta1,
            adam_beta2: self.optimizer.beta2,
            adam_eps: self.optimizer.eps,
            adam_steps: self.optimizer.steps,
        };
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        model.visit_params(&mut |n, p| {
            tensors.push((format!("param/{n}"), p.value.shape().to_vec(), p.value.data().to_vec()))
        });
        model.visit_buffers(&mut |n, b| tensors.push((format!("buffer/{n}"), b.shape().to_vec(), b.data().to_vec())));
        let names = trainable_names(&mut model);
        for (section, moments) in [("adam_m", &self.optimizer.m), ("adam_v", &self.optimizer.v)] {
            for (n, m) in names.iter().zip(moments) {
                tensors.push((format!("{section}/{n}"), vec![m.len()], m.clone()));
            }
        }

        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(arch_code(self.architecture()));
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let code = r.u8()?;
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        if code != arch_code(header.model.architecture()) {
            return Err(Error::CheckpointCorrupt(format!(
                "architecture code {code} disagrees with header ({})",
                header.model.architecture()
            )));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::CheckpointCorrupt(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or(Error::CheckpointTruncated { offset: r.pos, wanted: usize::MAX })?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(Error::CheckpointCorrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        header.model.validate()?;
        let mut model = Model::build(header.model, 0)?;
        let mut problem = None;
        let mut take = |key: String, dst: &mut Tensor| match tensors.remove(&key) {
            Some(t) if t.shape() == dst.shape() => *dst = t,
            Some(t) => {
                problem.get_or_insert(format!("{key}: shape {:?}, expected {:?}", t.shape(), dst.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {key}"));
            }
        };
        model.visit_params(&mut |n, p| take(format!("param/{n}"), &mut p.value));
        model.visit_buffers(&mut |n, b| take(format!("buffer/{n}"), b));
        if let Some(p) = problem {
            return Err(Error::CheckpointCorrupt(p));
        }
        let mut optimizer = Adam::new(header.adam_beta1, header.adam_beta2, header.adam_eps);
        optimizer.steps = header.adam_steps;
        for n in trainable_names(&mut model) {
            match (tensors.remove(&format!("adam_m/{n}")), tensors.remove(&format!("adam_v/{n}"))) {
                (Some(m), Some(v)) if m.len() == v.len() => {
                    optimizer.m.push(m.into_data());
                    optimizer.v.push(v.into_data());
                }
                (None, None) => break,
                _ => return Err(Error::CheckpointCorrupt(format!("incomplete optimizer state for {n}"))),
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::CheckpointCorrupt(format!("unexpected tensor {extra}")));
        }
        Checkpoint::fresh(model, header.labels, header.seed, optimizer).map(|c| Checkpoint { epoch: header.epoch, ..c })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads a checkpoint and checks it holds the expected architecture.
    pub fn load_expecting(path: &Path, expected: Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.architecture() != expected {
            return Err(Error::KindMismatch { expected: expected.to_string(), found: ck.architecture().to_string() });
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::CheckpointTruncated { offset: self.pos, wanted: n })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EcapaConfig, ResNetConfig};

    fn ecapa_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::Ecapa(EcapaConfig {
            input_dim: 12,
            channels: 8,
            se_dim: 4,
            attn_dim: 4,
            res2_scale: 4,
            embed_dim: 5,
            n_classes: 2,
            ..Default::default()
        });
        let model = Model::build(cfg, 9).unwrap();
        Checkpoint::fresh(model, vec!["a".into(), "b".into()], 9, Adam::new(0.9, 0.999, 1e-8)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut ck = ecapa_checkpoint();
        ck.epoch = 4;
        let mut model = ck.model.clone();
        model.visit_params(&mut |_, p| p.grad.fill(0.5));
        ck.optimizer.step(1e-3, |f| model.visit_params(f));
        ck.model = model;
        let bytes = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.epoch, 4);
        assert_eq!(loaded.labels, ck.labels);
        assert_eq!(loaded.optimizer, ck.optimizer);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = ecapa_checkpoint().to_bytes();
        for cut in [3, 9, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointTruncated { .. })), "{cut}");
        }
        let mut long_header = bytes.clone();
        long_header[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&long_header), Err(Error::CheckpointTruncated { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::CheckpointVersion(2))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CheckpointMagic)));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn kind_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        ecapa_checkpoint().save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, Architecture::Ecapa).is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&path, Architecture::ResNet34),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn label_count_must_match_classes() {
        let cfg = ModelConfig::ResNet34(ResNetConfig { stage_channels: vec![1, 1, 1, 1], embed_dim: 2, ..Default::default() });
        let model = Model::build(cfg, 0).unwrap();
        assert!(Checkpoint::fresh(model, vec!["only".into()], 0, Adam::new(0.9, 0.999, 1e-8)).is_err());
    }
}
