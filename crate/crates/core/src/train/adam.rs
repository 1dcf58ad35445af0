use crate::nn::{ParamVisitor, Parameter};

/// Bias-corrected Adam. Moment buffers follow parameter visitation order and
/// are created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to every trainable parameter reached by `visit`.
    pub fn step(&mut self, lr: f64, visit: impl FnOnce(&mut ParamVisitor<'_>)) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        visit(&mut |_, p: &mut Parameter| {
            if !p.trainable {
                return;
            }
            if ms.len() == idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter {idx}");
            let grads = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(values: &[f64], grads: &[f64]) -> Parameter {
        let mut p = Parameter::new(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..3 {
            adam.step(0.1, |f| f("p", &mut p));
        }
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = param(&[0.0, 0.0, 0.0], &[3.0, -0.02, 1e3]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(0.01, |f| f("p", &mut p));
        for (w, s) in p.value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - 0.01 * s).abs() < 1e-8, "{w}");
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = param(&[1.0], &[1.0]);
        b.trainable = false;
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(0.1, |f| {
            f("a", &mut a);
            f("b", &mut b);
        });
        assert_eq!(b.value.data(), &[1.0]);
        assert_eq!(adam.m.len(), 1);
    }

    #[test]
    fn identical_state_identical_update() {
        let mut p = param(&[0.5, 0.25], &[0.1, -0.3]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(0.01, |f| f("p", &mut p));
        let (mut p2, mut adam2) = (p.clone(), adam.clone());
        adam.step(0.01, |f| f("p", &mut p));
        adam2.step(0.01, |f| f("p", &mut p2));
        assert_eq!(p, p2);
        assert_eq!(adam, adam2);
    }
}
