use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    visit_child_buffers, visit_child_params, AttentiveStatsPool, BufferVisitor, ConvReluBn1d, Layer, Linear,
    ParamVisitor, SeRes2Block, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcapaConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub se_dim: usize,
    pub attn_dim: usize,
    pub res2_scale: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub pool_use_variance: bool,
}

impl Default for EcapaConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            channels: 512,
            se_dim: 128,
            attn_dim: 128,
            res2_scale: 8,
            embed_dim: 192,
            n_classes: 2,
            aam_scale: 30.0,
            aam_margin: 0.4,
            pool_use_variance: false,
        }
    }
}

/// Dilations of the three SE-Res2 blocks.
pub const ECAPA_DILATIONS: [usize; 3] = [2, 3, 4];

impl EcapaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("ecapa: {m}")));
        if self.res2_scale < 2 || self.channels % self.res2_scale != 0 {
            return fail(format!("{} channels not divisible by res2 scale {}", self.channels, self.res2_scale));
        }
        if [self.input_dim, self.channels, self.se_dim, self.attn_dim, self.embed_dim].contains(&0) {
            return fail("all dimensions must be positive".into());
        }
        if self.n_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        Ok(())
    }
}

/// ECAPA-TDNN trunk for `[B, D, T]` inputs.
///
/// Stem (k=5) -> three SE-Res2 blocks (k=3, dilations 2, 3, 4) -> the block
/// outputs concatenated through a 1x1 unit -> attentive statistics pooling ->
/// linear projection to the embedding.
#[derive(Debug, Clone)]
pub struct Ecapa {
    cfg: EcapaConfig,
    stem: ConvReluBn1d,
    blocks: Vec<SeRes2Block>,
    mfa: ConvReluBn1d,
    pool: AttentiveStatsPool,
    embed: Linear,
}

impl Ecapa {
    pub fn new(cfg: &EcapaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem = ConvReluBn1d::new(cfg.input_dim, c, 5, 1, rng);
        let blocks = ECAPA_DILATIONS
            .iter()
            .map(|&d| SeRes2Block::new(c, cfg.res2_scale, 3, d, cfg.se_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let mfa = ConvReluBn1d::new(3 * c, 3 * c, 1, 1, rng);
        let pool = AttentiveStatsPool::new(3 * c, cfg.attn_dim, cfg.pool_use_variance, rng);
        let embed = Linear::new(6 * c, cfg.embed_dim, rng);
        Ok(Self { cfg: cfg.clone(), stem, blocks, mfa, pool, embed })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3, "ecapa")?;
        if x.dim(1) != self.cfg.input_dim {
            return Err(Error::Dimension(format!(
                "ecapa built for {}-dim features got input shape {:?}",
                self.cfg.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// The frame-level map fed to attentive pooling, evaluation mode.
    pub fn pooling_input(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.stem.infer(x)?;
        let mut outs = Vec::with_capacity(3);
        for b in &self.blocks {
            h = b.infer(&h)?;
            outs.push(h.clone());
        }
        self.mfa.infer(&Tensor::concat_channels(&outs.iter().collect::<Vec<_>>()))
    }

    pub fn pool(&self) -> &AttentiveStatsPool {
        &self.pool
    }
}

impl Layer for Ecapa {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.stem.forward(x)?;
        let mut outs = Vec::with_capacity(3);
        for b in &mut self.blocks {
            h = b.forward(&h)?;
            outs.push(h.clone());
        }
        let h = self.mfa.forward(&Tensor::concat_channels(&outs.iter().collect::<Vec<_>>()))?;
        let pooled = self.pool.forward(&h)?;
        self.embed.forward(&pooled)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.pooling_input(x)?;
        self.embed.infer(&self.pool.infer(&h)?)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let c = self.cfg.channels;
        let d = self.embed.backward(grad);
        let d = self.pool.backward(&d);
        let d = self.mfa.backward(&d);
        // block i's output feeds both the concatenation and block i+1
        let mut carry: Option<Tensor> = None;
        for i in (0..self.blocks.len()).rev() {
            let mut g = d.channel_slice(i * c, c);
            if let Some(next) = carry.take() {
                g.add_assign(&next);
            }
            carry = Some(self.blocks[i].backward(&g));
        }
        self.stem.backward(&carry.expect("three blocks"))
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("stem", &mut self.stem, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_params(&format!("block{i}"), b, f);
        }
        visit_child_params("mfa", &mut self.mfa, f);
        visit_child_params("pool", &mut self.pool, f);
        visit_child_params("embed", &mut self.embed, f);
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        visit_child_buffers("stem", &mut self.stem, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_buffers(&format!("block{i}"), b, f);
        }
        visit_child_buffers("mfa", &mut self.mfa, f);
    }
}
