use super::{cached, Layer, Tensor};
use crate::error::Result;

macro_rules! elementwise {
    ($name:ident, $label:literal, |$x:ident| $f:expr, |$y:ident| $df:expr) => {
        #[derive(Debug, Clone, Default)]
        pub struct $name {
            output: Option<Tensor>,
        }

        impl $name {
            pub fn new() -> Self {
                Self::default()
            }

            fn compute(x: &Tensor) -> Tensor {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| {
                    let $x = *v;
                    *v = $f;
                });
                y
            }
        }

        impl Layer for $name {
            fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
                let y = Self::compute(x);
                self.output = Some(y.clone());
                Ok(y)
            }

            fn infer(&self, x: &Tensor) -> Result<Tensor> {
                Ok(Self::compute(x))
            }

            fn backward(&mut self, grad: &Tensor) -> Tensor {
                let out = cached(&self.output, $label);
                let mut dx = grad.clone();
                for (g, &$y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *g *= $df;
                }
                dx
            }
        }
    };
}

elementwise!(Relu, "relu", |x| x.max(0.0), |y| if y > 0.0 { 1.0 } else { 0.0 });
elementwise!(Tanh, "tanh", |x| x.tanh(), |y| 1.0 - y * y);
elementwise!(Sigmoid, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |y| y * (1.0 - y));
