use rand_chacha::ChaCha8Rng;

use super::{cached, gemm, he_uniform, Layer, ParamVisitor, Parameter, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer on `[B, in]`: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(he_uniform(&[d_out, d_in], d_in, rng)),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
            input: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(2, "linear")?;
        let (d_out, d_in) = (self.weight.value.dim(0), self.weight.value.dim(1));
        if x.dim(1) != d_in {
            return Err(Error::Dimension(format!("linear expects {d_in} inputs, got {}", x.dim(1))));
        }
        let b = x.dim(0);
        let mut y = Vec::with_capacity(b * d_out);
        for _ in 0..b {
            y.extend_from_slice(self.bias.value.data());
        }
        gemm(b, d_in, d_out, x.data(), false, self.weight.value.data(), true, 1.0, &mut y);
        Tensor::from_vec(&[b, d_out], y)
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = cached(&self.input, "linear");
        let (b, d_out, d_in) = (x.dim(0), self.weight.value.dim(0), self.weight.value.dim(1));
        gemm(d_out, b, d_in, grad.data(), true, x.data(), false, 1.0, self.weight.grad.data_mut());
        for row in grad.data().chunks_exact(d_out) {
            for (g, v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&[b, d_in]);
        gemm(b, d_out, d_in, grad.data(), false, self.weight.value.data(), false, 0.0, dx.data_mut());
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
