//! The two classifier architectures and the [`Model`] wrapper that pairs a
//! trunk with its additive angular margin head.

mod ecapa;
mod resnet;

pub use ecapa::{Ecapa, EcapaConfig, ECAPA_DILATIONS};
pub use resnet::{ResNet, ResNetConfig};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::{aam_logits, AamConfig, AamHead, BufferVisitor, Layer, ParamVisitor, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "resnet34")]
    ResNet34,
    #[serde(rename = "ecapa")]
    Ecapa,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ResNet34 => "resnet34",
            Architecture::Ecapa => "ecapa",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(Architecture::ResNet34),
            "ecapa" => Ok(Architecture::Ecapa),
            other => Err(Error::Config(format!("unknown architecture {other:?} (expected resnet34 or ecapa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelConfig {
    #[serde(rename = "resnet34")]
    ResNet34(ResNetConfig),
    Ecapa(EcapaConfig),
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::ResNet34(_) => Architecture::ResNet34,
            ModelConfig::Ecapa(_) => Architecture::Ecapa,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::ResNet34(c) => c.input_dim,
            ModelConfig::Ecapa(c) => c.input_dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::ResNet34(c) => c.n_classes,
            ModelConfig::Ecapa(c) => c.n_classes,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ModelConfig::ResNet34(c) => c.embed_dim,
            ModelConfig::Ecapa(c) => c.embed_dim,
        }
    }

    pub fn aam(&self) -> AamConfig {
        let (scale, margin) = match self {
            ModelConfig::ResNet34(c) => (c.aam_scale, c.aam_margin),
            ModelConfig::Ecapa(c) => (c.aam_scale, c.aam_margin),
        };
        AamConfig { scale, margin, n_classes: self.n_classes(), embed_dim: self.embed_dim() }
    }

    pub fn set_io(&mut self, input_dim: usize, n_classes: usize) {
        match self {
            ModelConfig::ResNet34(c) => (c.input_dim, c.n_classes) = (input_dim, n_classes),
            ModelConfig::Ecapa(c) => (c.input_dim, c.n_classes) = (input_dim, n_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::ResNet34(c) => c.validate()?,
            ModelConfig::Ecapa(c) => c.validate()?,
        }
        self.aam().validate()
    }
}

#[derive(Debug, Clone)]
enum Trunk {
    ResNet(ResNet),
    Ecapa(Ecapa),
}

impl Trunk {
    fn layer(&self) -> &dyn Layer {
        match self {
            Trunk::ResNet(r) => r,
            Trunk::Ecapa(e) => e,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn Layer {
        match self {
            Trunk::ResNet(r) => r,
            Trunk::Ecapa(e) => e,
        }
    }
}

/// A trunk producing utterance embeddings plus its AAM classification head.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    trunk: Trunk,
    head: AamHead,
}

impl Model {
    /// Builds and initializes a model; the same seed always gives the same parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = match &config {
            ModelConfig::ResNet34(c) => Trunk::ResNet(ResNet::new(c, &mut rng)?),
            ModelConfig::Ecapa(c) => Trunk::Ecapa(Ecapa::new(c, &mut rng)?),
        };
        let head = AamHead::new(config.aam(), &mut rng)?;
        Ok(Self { config, trunk, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes()
    }

    pub fn head(&self) -> &AamHead {
        &self.head
    }

    pub fn ecapa(&self) -> Option<&Ecapa> {
        match &self.trunk {
            Trunk::Ecapa(e) => Some(e),
            Trunk::ResNet(_) => None,
        }
    }

    pub fn resnet(&self) -> Option<&ResNet> {
        match &self.trunk {
            Trunk::ResNet(r) => Some(r),
            Trunk::Ecapa(_) => None,
        }
    }

    /// Stacks equal-length feature matrices into the trunk's input layout:
    /// `[B, 1, D, T]` for ResNet, `[B, D, T]` for ECAPA.
    pub fn input_tensor(&self, feats: &[&FeatureMatrix]) -> Result<Tensor> {
        let first = feats.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let (t, d) = (first.frames(), first.dim());
        for f in feats {
            if f.dim() != self.input_dim() {
                return Err(Error::Dimension(format!(
                    "{} model expects {}-dim features, got {}-dim",
                    self.architecture(),
                    self.input_dim(),
                    f.dim()
                )));
            }
            if f.frames() != t {
                return Err(Error::Dimension("batch items must have equal frame counts".into()));
            }
        }
        let mut data = Vec::with_capacity(feats.len() * t * d);
        for f in feats {
            for di in 0..d {
                data.extend((0..t).map(|ti| f.get(ti, di) as f64));
            }
        }
        let shape = match self.trunk {
            Trunk::ResNet(_) => vec![feats.len(), 1, d, t],
            Trunk::Ecapa(_) => vec![feats.len(), d, t],
        };
        Tensor::from_vec(&shape, data)
    }

    /// Evaluation-mode embeddings `[B, E]`.
    pub fn embed_batch(&self, x: &Tensor) -> Result<Tensor> {
        let e = self.trunk.layer().infer(x)?;
        if !e.all_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(e)
    }

    /// Evaluation-mode utterance embedding.
    pub fn embed(&self, feat: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&self.input_tensor(&[feat])?)?.into_data())
    }

    /// Head logits for one utterance. Without a label these are the inference
    /// logits `s cos(theta_k)`; with a label the target class gets the margin.
    pub fn logits(&self, feat: &FeatureMatrix, label: Option<usize>) -> Result<Vec<f64>> {
        self.logits_from_embedding(&self.embed(feat)?, label)
    }

    pub fn logits_from_embedding(&self, embedding: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
        aam_logits(embedding, &self.head.weight.value, &self.head.cfg, label)
    }

    /// Training forward pass to margin logits `[B, K]`.
    pub fn forward_train(&mut self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let e = self.trunk.layer_mut().forward(x)?;
        self.head.forward(&e, Some(labels))
    }

    /// Backward from logit gradients; parameter gradients accumulate.
    pub fn backward(&mut self, dlogits: &Tensor) -> Tensor {
        let de = self.head.backward(dlogits);
        self.trunk.layer_mut().backward(&de)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.trunk.layer_mut().visit_params(&mut |n, p| f(&format!("trunk.{n}"), p));
        self.head.visit_params(&mut |n, p| f(&format!("head.{n}"), p));
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        self.trunk.layer_mut().visit_buffers(&mut |n, b| f(&format!("trunk.{n}"), b));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Parameter| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureSource;

    fn feats(frames: usize, dim: usize, seed: u32) -> FeatureMatrix {
        let data = (0..frames * dim).map(|i| ((i as u32 ^ seed) as f32 * 0.618).sin()).collect();
        FeatureMatrix::new(frames, dim, 10.0, FeatureSource::Mfcc, data).unwrap()
    }

    fn small_resnet() -> ModelConfig {
        ModelConfig::ResNet34(ResNetConfig {
            stage_channels: vec![2, 3, 4, 5],
            embed_dim: 8,
            n_classes: 3,
            ..Default::default()
        })
    }

    fn small_ecapa() -> ModelConfig {
        ModelConfig::Ecapa(EcapaConfig {
            channels: 16,
            se_dim: 4,
            attn_dim: 4,
            res2_scale: 8,
            embed_dim: 6,
            n_classes: 3,
            ..Default::default()
        })
    }

    #[test]
    fn architecture_parsing() {
        assert_eq!("ecapa".parse::<Architecture>().unwrap(), Architecture::Ecapa);
        assert_eq!("resnet34".parse::<Architecture>().unwrap(), Architecture::ResNet34);
        assert!("resnet43".parse::<Architecture>().is_err());
    }

    #[test]
    fn resnet34_has_36_convolutions() {
        let m = Model::build(small_resnet(), 0).unwrap();
        assert_eq!(m.resnet().unwrap().conv_count(), 36);
    }

    #[test]
    fn same_seed_same_parameters() {
        for cfg in [small_resnet(), small_ecapa()] {
            let collect = |m: &mut Model| {
                let mut v = Vec::new();
                m.visit_params(&mut |_, p| v.extend(p.value.data().iter().map(|x| x.to_bits())));
                v
            };
            let mut a = Model::build(cfg.clone(), 11).unwrap();
            let mut b = Model::build(cfg.clone(), 11).unwrap();
            let mut c = Model::build(cfg, 12).unwrap();
            assert_eq!(collect(&mut a), collect(&mut b));
            assert_ne!(collect(&mut a), collect(&mut c));
        }
    }

    #[test]
    fn embeddings_have_fixed_size_for_any_length() {
        let r = Model::build(small_resnet(), 1).unwrap();
        let e = Model::build(small_ecapa(), 1).unwrap();
        for t in [1, 7, 98, 300] {
            let f = feats(t, 80, t as u32);
            let re = r.embed(&f).unwrap();
            assert_eq!(re.len(), 8);
            assert!(re.iter().all(|v| v.is_finite()));
            assert_eq!(e.embed(&f).unwrap().len(), 6);
        }
    }

    #[test]
    fn eval_is_deterministic_and_logits_follow_head() {
        let m = Model::build(small_ecapa(), 2).unwrap();
        let f = feats(40, 80, 5);
        assert_eq!(m.embed(&f).unwrap(), m.embed(&f).unwrap());
        let plain = m.logits(&f, None).unwrap();
        let p = crate::nn::softmax(&plain);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let with_label = m.logits(&f, Some(1)).unwrap();
        assert!(with_label[1] < plain[1]);
        assert_eq!(with_label[0], plain[0]);
    }

    #[test]
    fn zero_margin_label_is_ignored() {
        let mut cfg = small_resnet();
        if let ModelConfig::ResNet34(c) = &mut cfg {
            c.aam_margin = 0.0;
        }
        let m = Model::build(cfg, 3).unwrap();
        let f = feats(20, 80, 1);
        assert_eq!(m.logits(&f, Some(2)).unwrap(), m.logits(&f, None).unwrap());
    }

    #[test]
    fn wrong_feature_dim_is_rejected() {
        let m = Model::build(small_ecapa(), 0).unwrap();
        assert!(matches!(m.embed(&feats(10, 1024, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig::ResNet34(ResNetConfig { stage_depths: vec![3, 4, 6], ..Default::default() });
        assert!(matches!(Model::build(bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig::Ecapa(EcapaConfig { channels: 20, ..Default::default() });
        assert!(matches!(Model::build(bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig::Ecapa(EcapaConfig { n_classes: 1, ..Default::default() });
        assert!(Model::build(bad, 0).is_err());
    }
}
