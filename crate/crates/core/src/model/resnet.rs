use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cached, visit_child_buffers, visit_child_params, BatchNorm, BufferVisitor, Conv2d, Layer, Linear, ParamVisitor,
    Relu, StatsPool, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    /// Feature coefficients per frame (80 for MFCC, 1024 for pretrained).
    pub input_dim: usize,
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub pool_use_variance: bool,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            stage_depths: vec![3, 4, 6, 3],
            stage_channels: vec![32, 64, 128, 256],
            embed_dim: 256,
            n_classes: 2,
            aam_scale: 30.0,
            aam_margin: 0.4,
            pool_use_variance: false,
        }
    }
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("resnet: {m}")));
        if self.stage_depths.len() != 4 || self.stage_channels.len() != 4 {
            return fail("expected exactly 4 stages of depths and channels");
        }
        if self.stage_depths.iter().chain(&self.stage_channels).any(|&v| v == 0) {
            return fail("stage depths and channels must be positive");
        }
        if self.input_dim == 0 || self.embed_dim == 0 {
            return fail("input and embedding dimensions must be positive");
        }
        if self.n_classes < 2 {
            return fail("need at least 2 classes");
        }
        Ok(())
    }

    /// Frequency bins left after the three stride-2 stages.
    pub fn pooled_freq_bins(&self) -> usize {
        (0..3).fold(self.input_dim, |f, _| f.div_ceil(2))
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| (Conv2d::new(c_in, c_out, 1, stride, 0, false, rng), BatchNorm::new(c_out)));
        Self {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(c_out),
            relu1: Relu::new(),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(c_out),
            shortcut,
            relu_out: Relu::new(),
        }
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x)?)?)?;
        let mut h = self.bn2.forward(&self.conv2.forward(&h)?)?;
        match &mut self.shortcut {
            Some((conv, bn)) => h.add_assign(&bn.forward(&conv.forward(x)?)?),
            None => h.add_assign(x),
        }
        self.relu_out.forward(&h)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(x)?)?)?;
        let mut h = self.bn2.infer(&self.conv2.infer(&h)?)?;
        match &self.shortcut {
            Some((conv, bn)) => h.add_assign(&bn.infer(&conv.infer(x)?)?),
            None => h.add_assign(x),
        }
        self.relu_out.infer(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu_out.backward(grad);
        let d = self.bn2.backward(&g);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.bn1.backward(&d);
        let mut dx = self.conv1.backward(&d);
        match &mut self.shortcut {
            Some((conv, bn)) => dx.add_assign(&conv.backward(&bn.backward(&g))),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("conv1", &mut self.conv1, f);
        visit_child_params("bn1", &mut self.bn1, f);
        visit_child_params("conv2", &mut self.conv2, f);
        visit_child_params("bn2", &mut self.bn2, f);
        if let Some((conv, bn)) = &mut self.shortcut {
            visit_child_params("shortcut.conv", conv, f);
            visit_child_params("shortcut.bn", bn, f);
        }
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        visit_child_buffers("bn1", &mut self.bn1, f);
        visit_child_buffers("bn2", &mut self.bn2, f);
        if let Some((_, bn)) = &mut self.shortcut {
            visit_child_buffers("shortcut.bn", bn, f);
        }
    }
}

/// ResNet34 trunk for `[B, 1, F, T]` feature maps.
///
/// A 3x3 stride-1 stem feeds four stages of basic blocks; stages 2-4 halve
/// both frequency and time. The final map is flattened over channels and
/// frequency, pooled over time (mean and std) and projected to the embedding.
#[derive(Debug, Clone)]
pub struct ResNet {
    cfg: ResNetConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stem_relu: Relu,
    blocks: Vec<BasicBlock>,
    pool: StatsPool,
    embed: Linear,
    pooled_shape: Option<Vec<usize>>,
}

impl ResNet {
    pub fn new(cfg: &ResNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let stem = Conv2d::new(1, c0, 3, 1, 1, false, rng);
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (stage, (&depth, &c_out)) in cfg.stage_depths.iter().zip(&cfg.stage_channels).enumerate() {
            for i in 0..depth {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(c_in, c_out, stride, rng));
                c_in = c_out;
            }
        }
        let flat = c_in * cfg.pooled_freq_bins();
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_bn: BatchNorm::new(c0),
            stem_relu: Relu::new(),
            blocks,
            pool: StatsPool::new(cfg.pool_use_variance),
            embed: Linear::new(2 * flat, cfg.embed_dim, rng),
            pooled_shape: None,
        })
    }

    /// Number of weighted convolutions (stem, block convs, projection shortcuts).
    pub fn conv_count(&self) -> usize {
        1 + self.blocks.iter().map(|b| 2 + usize::from(b.shortcut.is_some())).sum::<usize>()
    }

    /// `[B, C, F', T'] -> [B, C*F', T']`.
    fn flatten(h: Tensor) -> Result<Tensor> {
        let s = h.shape().to_vec();
        h.reshape(&[s[0], s[1] * s[2], s[3]])
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(4, "resnet")?;
        if x.dim(1) != 1 || x.dim(2) != self.cfg.input_dim {
            return Err(Error::Dimension(format!(
                "resnet built for {}-dim features got input shape {:?}",
                self.cfg.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Layer for ResNet {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.stem_relu.forward(&self.stem_bn.forward(&self.stem.forward(x)?)?)?;
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        self.pooled_shape = Some(h.shape().to_vec());
        let pooled = self.pool.forward(&Self::flatten(h)?)?;
        self.embed.forward(&pooled)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.stem_relu.infer(&self.stem_bn.infer(&self.stem.infer(x)?)?)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        self.embed.infer(&self.pool.infer(&Self::flatten(h)?)?)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let d = self.embed.backward(grad);
        let d = self.pool.backward(&d);
        let shape = cached(&self.pooled_shape, "resnet").clone();
        let mut d = d.reshape(&shape).expect("pooled map shape");
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        let d = self.stem_relu.backward(&d);
        let d = self.stem_bn.backward(&d);
        self.stem.backward(&d)
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("stem.conv", &mut self.stem, f);
        visit_child_params("stem.bn", &mut self.stem_bn, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_params(&format!("block{i}"), b, f);
        }
        visit_child_params("embed", &mut self.embed, f);
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        visit_child_buffers("stem.bn", &mut self.stem_bn, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_buffers(&format!("block{i}"), b, f);
        }
    }
}
