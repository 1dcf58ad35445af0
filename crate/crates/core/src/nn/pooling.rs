use rand_chacha::ChaCha8Rng;

use super::{cached, visit_child_params, Conv1d, Layer, ParamVisitor, Tensor, Tanh};
use crate::error::{Error, Result};

/// Variance floor inside the square root of pooled standard deviations.
const STD_EPS: f64 = 1e-8;

fn check_btc(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, what)?;
    if x.dim(2) == 0 {
        return Err(Error::Dimension(format!("{what} needs at least one frame")));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// Mean and standard deviation (or variance) of every channel over time:
/// `[B, C, T] -> [B, 2C]` laid out as `[means | spreads]`.
#[derive(Debug, Clone, Default)]
pub struct StatsPool {
    /// Emit the population variance instead of `sqrt(var + 1e-8)`.
    pub use_variance: bool,
    cache: Option<(Tensor, Tensor)>,
}

impl StatsPool {
    pub fn new(use_variance: bool) -> Self {
        Self { use_variance, cache: None }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = check_btc(x, "statistics pooling")?;
        let mut out = Tensor::zeros(&[b, 2 * c]);
        for bi in 0..b {
            for ci in 0..c {
                let row = &x.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let mean = row.iter().sum::<f64>() / t as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
                let o = out.data_mut();
                o[bi * 2 * c + ci] = mean;
                o[bi * 2 * c + c + ci] = if self.use_variance { var } else { (var + STD_EPS).sqrt() };
            }
        }
        Ok(out)
    }
}

impl Layer for StatsPool {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, y) = cached(&self.cache, "statistics pooling");
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ci in 0..c {
                let mean = y.data()[bi * 2 * c + ci];
                let spread = y.data()[bi * 2 * c + c + ci];
                let d_mean = grad.data()[bi * 2 * c + ci];
                let d_spread = grad.data()[bi * 2 * c + c + ci];
                // d var / d x_t = 2 (x_t - mean) / T
                let d_var = if self.use_variance { d_spread } else { d_spread / (2.0 * spread) };
                let off = (bi * c + ci) * t;
                for i in off..off + t {
                    dx.data_mut()[i] = d_mean / t as f64 + d_var * 2.0 * (x.data()[i] - mean) / t as f64;
                }
            }
        }
        dx
    }
}

/// Attention-weighted channel statistics given per-channel frame weights
/// `alpha` (each `[b, c, :]` row sums to one): `[B, C, T] -> [B, 2C]`.
pub fn weighted_statistics(x: &Tensor, alpha: &Tensor, use_variance: bool) -> Result<Tensor> {
    let (b, c, t) = check_btc(x, "attentive statistics pooling")?;
    if alpha.shape() != x.shape() {
        return Err(Error::Dimension(format!("attention {:?} vs frames {:?}", alpha.shape(), x.shape())));
    }
    let mut out = Tensor::zeros(&[b, 2 * c]);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * t;
            let (xs, ws) = (&x.data()[off..off + t], &alpha.data()[off..off + t]);
            let mean: f64 = xs.iter().zip(ws).map(|(v, w)| w * v).sum();
            let second: f64 = xs.iter().zip(ws).map(|(v, w)| w * v * v).sum();
            let var = (second - mean * mean).max(0.0);
            out.data_mut()[bi * 2 * c + ci] = mean;
            out.data_mut()[bi * 2 * c + c + ci] = if use_variance { var } else { (var + STD_EPS).sqrt() };
        }
    }
    Ok(out)
}

fn softmax_over_time(logits: &Tensor) -> Tensor {
    let t = logits.dim(2);
    let mut alpha = logits.clone();
    for row in alpha.data_mut().chunks_exact_mut(t) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    alpha
}

/// Channel-dependent attentive statistics pooling.
///
/// Frame logits come from a two-layer 1x1 network
/// `W2 tanh(W1 x + b1) + b2`, normalized with a softmax over time for every
/// channel separately. The output layer starts at zero, so a fresh pool
/// weights all frames uniformly.
#[derive(Debug, Clone)]
pub struct AttentiveStatsPool {
    pub attn_in: Conv1d,
    pub attn_out: Conv1d,
    tanh: Tanh,
    pub use_variance: bool,
    cache: Option<AspCache>,
}

#[derive(Debug, Clone)]
struct AspCache {
    x: Tensor,
    alpha: Tensor,
    stats: Tensor,
}

impl AttentiveStatsPool {
    pub fn new(channels: usize, attn_dim: usize, use_variance: bool, rng: &mut ChaCha8Rng) -> Self {
        let attn_in = Conv1d::new(channels, attn_dim, 1, 1, 0, 1, rng);
        let mut attn_out = Conv1d::new(attn_dim, channels, 1, 1, 0, 1, rng);
        attn_out.weight_mut().value.fill(0.0);
        attn_out.bias_mut().value.fill(0.0);
        Self { attn_in, attn_out, tanh: Tanh::new(), use_variance, cache: None }
    }

    /// Attention weights `[B, C, T]` for an input, evaluation mode.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        check_btc(x, "attentive statistics pooling")?;
        let h = self.tanh.infer(&self.attn_in.infer(x)?)?;
        Ok(softmax_over_time(&self.attn_out.infer(&h)?))
    }
}

impl Layer for AttentiveStatsPool {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        check_btc(x, "attentive statistics pooling")?;
        let h = self.tanh.forward(&self.attn_in.forward(x)?)?;
        let alpha = softmax_over_time(&self.attn_out.forward(&h)?);
        let stats = weighted_statistics(x, &alpha, self.use_variance)?;
        self.cache = Some(AspCache { x: x.clone(), alpha, stats: stats.clone() });
        Ok(stats)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        weighted_statistics(x, &self.attention(x)?, self.use_variance)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let AspCache { x, alpha, stats } = cached(&self.cache, "attentive statistics pooling");
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = Tensor::zeros(x.shape());
        let mut dlogits = Tensor::zeros(x.shape());
        let mut g = vec![0.0; t];
        for bi in 0..b {
            for ci in 0..c {
                let mean = stats.data()[bi * 2 * c + ci];
                let spread = stats.data()[bi * 2 * c + c + ci];
                let d_mean = grad.data()[bi * 2 * c + ci];
                let d_var = if self.use_variance {
                    grad.data()[bi * 2 * c + c + ci]
                } else {
                    grad.data()[bi * 2 * c + c + ci] / (2.0 * spread)
                };
                let off = (bi * c + ci) * t;
                let xs = &x.data()[off..off + t];
                let ws = &alpha.data()[off..off + t];
                let mut g_bar = 0.0;
                for i in 0..t {
                    // var = sum(a x^2) - mean^2
                    dx.data_mut()[off + i] = ws[i] * (d_mean + d_var * 2.0 * (xs[i] - mean));
                    g[i] = d_mean * xs[i] + d_var * (xs[i] * xs[i] - 2.0 * mean * xs[i]);
                    g_bar += ws[i] * g[i];
                }
                for i in 0..t {
                    dlogits.data_mut()[off + i] = ws[i] * (g[i] - g_bar);
                }
            }
        }
        let dh = self.attn_out.backward(&dlogits);
        let dpre = self.tanh.backward(&dh);
        dx.add_assign(&self.attn_in.backward(&dpre));
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        visit_child_params("attn_in", &mut self.attn_in, f);
        visit_child_params("attn_out", &mut self.attn_out, f);
    }
}
