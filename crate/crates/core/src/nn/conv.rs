use rand_chacha::ChaCha8Rng;

use super::{cached, gemm, he_uniform, Layer, ParamVisitor, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Axis {
    const UNIT: Axis = Axis { kernel: 1, stride: 1, padding: 0, dilation: 1 };

    fn out_len(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn is_identity(&self) -> bool {
        *self == Axis::UNIT
    }
}

/// Shared 2-D cross-correlation machinery; 1-D convolution is the `H = 1` case.
#[derive(Debug, Clone)]
struct ConvCore {
    weight: Parameter,
    bias: Option<Parameter>,
    c_in: usize,
    c_out: usize,
    axes: [Axis; 2],
    input: Option<(Tensor, [usize; 2])>,
}

impl ConvCore {
    fn new(
        c_in: usize,
        c_out: usize,
        axes: [Axis; 2],
        weight_shape: &[usize],
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * axes[0].kernel * axes[1].kernel;
        Self {
            weight: Parameter::new(he_uniform(weight_shape, fan_in, rng)),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[c_out]))),
            c_in,
            c_out,
            axes,
            input: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.axes[0].kernel * self.axes[1].kernel
    }

    fn out_dims(&self, h: usize, w: usize) -> Result<[usize; 2]> {
        match (self.axes[0].out_len(h), self.axes[1].out_len(w)) {
            (Some(a), Some(b)) => Ok([a, b]),
            _ => Err(Error::Dimension(format!("input {h}x{w} is smaller than the convolution kernel"))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.axes[0].is_identity() && self.axes[1].is_identity()
    }

    /// Unfolds one example `[C_in, H, W]` into `[C_in*KH*KW, Ho*Wo]`.
    fn im2col(&self, x: &[f64], h: usize, w: usize, out: [usize; 2], cols: &mut [f64]) {
        let [ah, aw] = self.axes;
        let n_out = out[0] * out[1];
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for kh in 0..ah.kernel {
                for kw in 0..aw.kernel {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oh in 0..out[0] {
                        let ih = (oh * ah.stride + kh * ah.dilation) as isize - ah.padding as isize;
                        let line = &mut dst[oh * out[1]..(oh + 1) * out[1]];
                        if ih < 0 || ih >= h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        let off = (kw * aw.dilation) as isize - aw.padding as isize;
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * aw.stride) as isize + off;
                            *v = if iw < 0 || iw >= w as isize { 0.0 } else { src[iw as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, out: [usize; 2], dx: &mut [f64]) {
        let [ah, aw] = self.axes;
        let n_out = out[0] * out[1];
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for kh in 0..ah.kernel {
                for kw in 0..aw.kernel {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oh in 0..out[0] {
                        let ih = (oh * ah.stride + kh * ah.dilation) as isize - ah.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = ih as usize * w;
                        let off = (kw * aw.dilation) as isize - aw.padding as isize;
                        for ow in 0..out[1] {
                            let iw = (ow * aw.stride) as isize + off;
                            if iw >= 0 && iw < w as isize {
                                plane[base + iw as usize] += src[oh * out[1] + ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn run(&self, x: &[f64], batch: usize, h: usize, w: usize) -> Result<(Vec<f64>, [usize; 2])> {
        let out = self.out_dims(h, w)?;
        let n_out = out[0] * out[1];
        let (k, wt) = (self.patch_len(), self.weight.value.data());
        let mut y = vec![0.0; batch * self.c_out * n_out];
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; k * n_out] };
        for b in 0..batch {
            let xb = &x[b * self.c_in * h * w..(b + 1) * self.c_in * h * w];
            let yb = &mut y[b * self.c_out * n_out..(b + 1) * self.c_out * n_out];
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.data().iter().enumerate() {
                    yb[o * n_out..(o + 1) * n_out].iter_mut().for_each(|v| *v = bv);
                }
            }
            let src = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, h, w, out, &mut cols);
                &cols
            };
            gemm(self.c_out, k, n_out, wt, false, src, false, 1.0, yb);
        }
        Ok((y, out))
    }

    fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (x, [h, w]) = cached(&self.input, "conv");
        let batch = x.dim(0);
        let out = self.out_dims(*h, *w).expect("validated in forward");
        let n_out = out[0] * out[1];
        let k = self.patch_len();
        let pointwise = self.is_pointwise();
        let mut dx = vec![0.0; x.len()];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * n_out] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; k * n_out] };
        let in_len = self.c_in * h * w;
        for b in 0..batch {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let dyb = &dy[b * self.c_out * n_out..(b + 1) * self.c_out * n_out];
            if let Some(bias) = &mut self.bias {
                for (o, g) in bias.grad.data_mut().iter_mut().enumerate() {
                    *g += dyb[o * n_out..(o + 1) * n_out].iter().sum::<f64>();
                }
            }
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(self.c_out, n_out, k, dyb, false, xb, true, 1.0, self.weight.grad.data_mut());
                gemm(k, self.c_out, n_out, self.weight.value.data(), true, dyb, false, 1.0, dxb);
            } else {
                self.im2col(xb, *h, *w, out, &mut cols);
                gemm(self.c_out, n_out, k, dyb, false, &cols, true, 1.0, self.weight.grad.data_mut());
                gemm(k, self.c_out, n_out, self.weight.value.data(), true, dyb, false, 0.0, &mut dcols);
                self.col2im(&dcols, *h, *w, out, dxb);
            }
        }
        dx
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }
}

/// 1-D convolution over `[B, C_in, T]` with zero padding and optional dilation.
#[derive(Debug, Clone)]
pub struct Conv1d {
    core: ConvCore,
}

impl Conv1d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let axes = [Axis::UNIT, Axis { kernel, stride, padding, dilation }];
        Self { core: ConvCore::new(c_in, c_out, axes, &[c_out, c_in, kernel], true, rng) }
    }

    /// Kernel `k`, stride 1, dilation `d`, padding that preserves length.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(c_in, c_out, kernel, 1, dilation * (kernel - 1) / 2, dilation, rng)
    }

    pub fn weight_mut(&mut self) -> &mut Parameter {
        &mut self.core.weight
    }

    pub fn bias_mut(&mut self) -> &mut Parameter {
        self.core.bias.as_mut().expect("conv1d always has a bias")
    }

    pub fn out_channels(&self) -> usize {
        self.core.c_out
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3, "conv1d")?;
        if x.dim(1) != self.core.c_in {
            return Err(Error::Dimension(format!("conv1d expects {} input channels, got {}", self.core.c_in, x.dim(1))));
        }
        Ok(())
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (y, [_, t]) = self.core.run(x.data(), x.dim(0), 1, x.dim(2))?;
        Tensor::from_vec(&[x.dim(0), self.core.c_out, t], y)
    }
}

impl Layer for Conv1d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.core.input = Some((x.clone(), [1, x.dim(2)]));
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let dx = self.core.backward(grad.data());
        let shape = cached(&self.core.input, "conv1d").0.shape().to_vec();
        Tensor::from_vec(&shape, dx).expect("input shape")
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.core.visit(f);
    }
}

/// 2-D convolution over `[B, C_in, H, W]`, square kernel, same stride and padding on both axes.
#[derive(Debug, Clone)]
pub struct Conv2d {
    core: ConvCore,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let axis = Axis { kernel, stride, padding, dilation: 1 };
        Self { core: ConvCore::new(c_in, c_out, [axis, axis], &[c_out, c_in, kernel, kernel], bias, rng) }
    }

    pub fn weight_mut(&mut self) -> &mut Parameter {
        &mut self.core.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut Parameter> {
        self.core.bias.as_mut()
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(4, "conv2d")?;
        if x.dim(1) != self.core.c_in {
            return Err(Error::Dimension(format!("conv2d expects {} input channels, got {}", self.core.c_in, x.dim(1))));
        }
        let (y, [ho, wo]) = self.core.run(x.data(), x.dim(0), x.dim(2), x.dim(3))?;
        Tensor::from_vec(&[x.dim(0), self.core.c_out, ho, wo], y)
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.core.input = Some((x.clone(), [x.dim(2), x.dim(3)]));
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let dx = self.core.backward(grad.data());
        let shape = cached(&self.core.input, "conv2d").0.shape().to_vec();
        Tensor::from_vec(&shape, dx).expect("input shape")
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.core.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut conv = Conv1d::new(3, 3, 1, 1, 0, 1, &mut rng());
        let w = conv.weight_mut();
        w.value.fill(0.0);
        for c in 0..3 {
            w.value.data_mut()[c * 3 + c] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        assert_eq!(conv.infer(&x).unwrap(), x);

        let mut c2 = Conv2d::new(2, 2, 1, 1, 0, false, &mut rng());
        let w = c2.weight_mut();
        w.value.fill(0.0);
        w.value.data_mut()[0] = 1.0;
        w.value.data_mut()[3] = 1.0;
        let x = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(c2.infer(&x).unwrap(), x);
    }

    #[test]
    fn three_tap_sum() {
        let mut conv = Conv1d::new(1, 1, 3, 1, 0, 1, &mut rng());
        conv.weight_mut().value.fill(1.0);
        let y = conv.infer(&Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn output_size_formula() {
        let conv = Conv2d::new(1, 1, 3, 2, 1, true, &mut rng());
        for (h, w) in [(80, 98), (7, 1), (1, 1), (10, 33)] {
            let y = conv.infer(&Tensor::zeros(&[1, 1, h, w])).unwrap();
            assert_eq!(y.shape(), &[1, 1, (h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1]);
        }
        let dil = Conv1d::same(2, 2, 3, 4, &mut rng());
        assert_eq!(dil.infer(&Tensor::zeros(&[1, 2, 17])).unwrap().shape(), &[1, 2, 17]);
    }

    #[test]
    fn dilated_taps_match_direct_sum() {
        let mut conv = Conv1d::new(1, 1, 3, 1, 0, 2, &mut rng());
        conv.weight_mut().value = Tensor::from_vec(&[1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = conv.infer(&x).unwrap();
        assert_eq!(y.data(), &[1.0 + 30.0 + 500.0, 2.0 + 40.0 + 600.0]);
    }

    #[test]
    fn shape_errors() {
        let conv = Conv1d::new(4, 2, 5, 1, 0, 1, &mut rng());
        assert!(matches!(conv.infer(&Tensor::zeros(&[1, 3, 10])), Err(Error::Dimension(_))));
        assert!(matches!(conv.infer(&Tensor::zeros(&[1, 4, 4])), Err(Error::Dimension(_))));
        assert!(matches!(conv.infer(&Tensor::zeros(&[4, 10])), Err(Error::Dimension(_))));
    }
}
