use super::{cached, BufferVisitor, Layer, ParamVisitor, Parameter, Tensor};
use crate::error::{Error, Result};

/// Batch normalization over the channel axis of `[B, C, ...]` inputs.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased estimate into the running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.shape().len() < 2 || x.dim(1) != self.channels() {
            return Err(Error::Dimension(format!(
                "batch norm over {} channels got input shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok((x.dim(0), x.dim(1), x.shape()[2..].iter().product()))
    }

    fn affine(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let (b, c, l) = (x.dim(0), x.dim(1), x.len() / (x.dim(0) * x.dim(1)));
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (g, be) = (self.gamma.value.data(), self.beta.value.data());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for i in off..off + l {
                    let h = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = g[ci] * h + be[ci];
                }
            }
        }
        (y, xhat)
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, l) = self.geometry(x)?;
        if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        let n = (b * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                mean[ci] += x.data()[off..off + l].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                var[ci] += x.data()[off..off + l].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, xhat) = self.affine(x, &mean, &inv_std);
        let m = self.momentum;
        for ci in 0..c {
            let rm = &mut self.running_mean.data_mut()[ci];
            *rm = m * *rm + (1.0 - m) * mean[ci];
            let rv = &mut self.running_var.data_mut()[ci];
            *rv = m * *rv + (1.0 - m) * var[ci] * n / (n - 1.0);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.geometry(x)?;
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok(self.affine(x, self.running_mean.data(), &inv_std).0)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = cached(&self.cache, "batch norm");
        let (b, c) = (grad.dim(0), grad.dim(1));
        let l = grad.len() / (b * c);
        let n = (b * l) as f64;
        let g = self.gamma.value.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for i in off..off + l {
                    sum_dy[ci] += grad.data()[i];
                    sum_dy_xhat[ci] += grad.data()[i] * cache.xhat.data()[i];
                }
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                let k = g[ci] * cache.inv_std[ci] / n;
                for i in off..off + l {
                    dx.data_mut()[i] =
                        k * (n * grad.data()[i] - sum_dy[ci] - cache.xhat.data()[i] * sum_dy_xhat[ci]);
                }
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += sum_dy_xhat[ci];
            self.beta.grad.data_mut()[ci] += sum_dy[ci];
        }
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_batch_is_fixed_point() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::from_vec(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_with_identity_stats_is_affine() {
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap();
        bn.beta.value = Tensor::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bn.infer(&x).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expect = [2.0 * s + 0.5, 4.0 * s + 0.5, -3.0 * s + 3.0, -4.0 * s + 3.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_example_batch_is_rejected() {
        let mut bn = BatchNorm::new(3);
        assert!(matches!(bn.forward(&Tensor::zeros(&[1, 3, 10])), Err(Error::DegenerateBatch(1))));
        assert!(bn.infer(&Tensor::zeros(&[1, 3, 10])).is_ok());
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::new(1);
        bn.forward(&Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        // batch mean 2, unbiased var 2
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
