use rand_chacha::ChaCha8Rng;

use super::{
    cached, visit_child_buffers, visit_child_params, BatchNorm, BufferVisitor, Conv1d, Layer, Linear, ParamVisitor,
    Relu, Sigmoid, Tensor,
};
use crate::error::{Error, Result};

/// Conv1d, then ReLU, then batch norm.
#[derive(Debug, Clone)]
pub struct ConvReluBn1d {
    pub conv: Conv1d,
    relu: Relu,
    pub bn: BatchNorm,
}

impl ConvReluBn1d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv1d::same(c_in, c_out, kernel, dilation, rng), relu: Relu::new(), bn: BatchNorm::new(c_out) }
    }
}

impl Layer for ConvReluBn1d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.relu.forward(&self.conv.forward(x)?)?;
        self.bn.forward(&h)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.infer(&self.relu.infer(&self.conv.infer(x)?)?)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.bn.backward(grad);
        let g = self.relu.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("conv", &mut self.conv, f);
        visit_child_params("bn", &mut self.bn, f);
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        visit_child_buffers("bn", &mut self.bn, f);
    }
}

/// Squeeze-excitation over `[B, C, T]`: time-averaged channels pass through a
/// bottleneck and a sigmoid, and the resulting gates rescale every channel.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: Linear,
    relu: Relu,
    pub excite: Linear,
    sigmoid: Sigmoid,
    cache: Option<(Tensor, Tensor)>,
}

impl SeBlock {
    pub fn new(channels: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            squeeze: Linear::new(channels, bottleneck, rng),
            relu: Relu::new(),
            excite: Linear::new(bottleneck, channels, rng),
            sigmoid: Sigmoid::new(),
            cache: None,
        }
    }

    fn time_mean(x: &Tensor) -> Result<Tensor> {
        x.expect_rank(3, "squeeze-excitation")?;
        let t = x.dim(2);
        let means = x.data().chunks_exact(t).map(|row| row.iter().sum::<f64>() / t as f64).collect();
        Tensor::from_vec(&[x.dim(0), x.dim(1)], means)
    }

    fn gate(x: &Tensor, gates: &Tensor) -> Tensor {
        let t = x.dim(2);
        let mut y = x.clone();
        for (row, &g) in y.data_mut().chunks_exact_mut(t).zip(gates.data()) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        y
    }

    /// Gates in (0, 1), shape `[B, C]`, evaluation mode.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let s = Self::time_mean(x)?;
        self.sigmoid.infer(&self.excite.infer(&self.relu.infer(&self.squeeze.infer(&s)?)?)?)
    }
}

impl Layer for SeBlock {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = Self::time_mean(x)?;
        let h = self.relu.forward(&self.squeeze.forward(&s)?)?;
        let gates = self.sigmoid.forward(&self.excite.forward(&h)?)?;
        let y = Self::gate(x, &gates);
        self.cache = Some((x.clone(), gates));
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::gate(x, &self.gates(x)?))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, gates) = cached(&self.cache, "squeeze-excitation");
        let t = x.dim(2);
        let mut dx = Self::gate(grad, gates);
        let dgates: Vec<f64> = grad
            .data()
            .chunks_exact(t)
            .zip(x.data().chunks_exact(t))
            .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        let dgates = Tensor::from_vec(gates.shape(), dgates).expect("gate shape");
        let d = self.sigmoid.backward(&dgates);
        let d = self.excite.backward(&d);
        let d = self.relu.backward(&d);
        let ds = self.squeeze.backward(&d);
        for (row, &g) in dx.data_mut().chunks_exact_mut(t).zip(ds.data()) {
            row.iter_mut().for_each(|v| *v += g / t as f64);
        }
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("squeeze", &mut self.squeeze, f);
        visit_child_params("excite", &mut self.excite, f);
    }
}

/// Res2Net-style multi-scale convolution over `[B, C, T]`.
///
/// Channels split into `scale` groups. Group 0 passes through, group 1 goes
/// through its own conv unit, and every later group `i` convolves
/// `x_i + y_{i-1}`, so the receptive field grows across groups.
#[derive(Debug, Clone)]
pub struct Res2Block {
    scale: usize,
    width: usize,
    pub units: Vec<ConvReluBn1d>,
}

impl Res2Block {
    pub fn new(channels: usize, scale: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if scale < 2 || channels % scale != 0 {
            return Err(Error::Config(format!("res2: {channels} channels not divisible into scale {scale}")));
        }
        let width = channels / scale;
        let units = (1..scale).map(|_| ConvReluBn1d::new(width, width, kernel, dilation, rng)).collect();
        Ok(Self { scale, width, units })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3, "res2")?;
        if x.dim(1) != self.scale * self.width {
            return Err(Error::Dimension(format!("res2 expects {} channels, got {}", self.scale * self.width, x.dim(1))));
        }
        Ok(())
    }

}

impl Layer for Res2Block {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut outs = vec![x.channel_slice(0, self.width)];
        for i in 1..self.scale {
            let mut input = x.channel_slice(i * self.width, self.width);
            if i >= 2 {
                input.add_assign(&outs[i - 1]);
            }
            outs.push(self.units[i - 1].forward(&input)?);
        }
        Ok(Tensor::concat_channels(&outs.iter().collect::<Vec<_>>()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut outs = vec![x.channel_slice(0, self.width)];
        for i in 1..self.scale {
            let mut input = x.channel_slice(i * self.width, self.width);
            if i >= 2 {
                input.add_assign(&outs[i - 1]);
            }
            outs.push(self.units[i - 1].infer(&input)?);
        }
        Ok(Tensor::concat_channels(&outs.iter().collect::<Vec<_>>()))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dparts: Vec<Tensor> = (0..self.scale).map(|i| grad.channel_slice(i * self.width, self.width)).collect();
        for i in (1..self.scale).rev() {
            let d_in = self.units[i - 1].backward(&dparts[i]);
            if i >= 2 {
                dparts[i - 1].add_assign(&d_in);
            }
            dparts[i] = d_in;
        }
        Tensor::concat_channels(&dparts.iter().collect::<Vec<_>>())
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            visit_child_params(&format!("unit{i}"), u, f);
        }
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            visit_child_buffers(&format!("unit{i}"), u, f);
        }
    }
}

/// The ECAPA-TDNN block: 1x1 unit, Res2 unit, 1x1 unit, SE gating, plus a residual connection.
#[derive(Debug, Clone)]
pub struct SeRes2Block {
    pub expand: ConvReluBn1d,
    pub res2: Res2Block,
    pub project: ConvReluBn1d,
    pub se: SeBlock,
}

impl SeRes2Block {
    pub fn new(channels: usize, scale: usize, kernel: usize, dilation: usize, se_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            expand: ConvReluBn1d::new(channels, channels, 1, 1, rng),
            res2: Res2Block::new(channels, scale, kernel, dilation, rng)?,
            project: ConvReluBn1d::new(channels, channels, 1, 1, rng),
            se: SeBlock::new(channels, se_dim, rng),
        })
    }
}

impl Layer for SeRes2Block {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.expand.forward(x)?;
        let h = self.res2.forward(&h)?;
        let h = self.project.forward(&h)?;
        let mut y = self.se.forward(&h)?;
        y.add_assign(x);
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.project.infer(&self.res2.infer(&self.expand.infer(x)?)?)?;
        let mut y = self.se.infer(&h)?;
        y.add_assign(x);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.se.backward(grad);
        let g = self.project.backward(&g);
        let g = self.res2.backward(&g);
        let mut dx = self.expand.backward(&g);
        dx.add_assign(grad);
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("expand", &mut self.expand, f);
        visit_child_params("res2", &mut self.res2, f);
        visit_child_params("project", &mut self.project, f);
        visit_child_params("se", &mut self.se, f);
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        visit_child_buffers("expand", &mut self.expand, f);
        visit_child_buffers("res2", &mut self.res2, f);
        visit_child_buffers("project", &mut self.project, f);
    }
}
