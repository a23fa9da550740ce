//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients into its [`Param`]s during `backward`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{col2im, conv_out_len, gemm, im2col, Tensor};

/// What a parameter array is used for; decides optimizer and decay treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense kernel. The only kind subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
    /// Running statistics; checkpointed but never touched by the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(kind: ParamKind, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { kind, shape, value, grad }
    }

    pub fn filled(kind: ParamKind, shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Param::new(kind, shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Walks named parameters. Names are dot-separated paths.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How rectifiers route gradients backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Guided backpropagation: a rectifier also blocks negative incoming gradients.
    Guided,
}

/// 2-D convolution, square kernel, weights laid out `[k, k, c_in, c_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    /// Fan-in variance-scaled normal initialization.
    pub fn new(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let len = kernel * kernel * in_channels * out_channels;
        let w = (0..len).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(
                ParamKind::Weight,
                vec![kernel, kernel, in_channels, out_channels],
                w,
            ),
            bias: bias.then(|| Param::filled(ParamKind::Bias, vec![out_channels], 0.0)),
            input: None,
        }
    }

    /// Same-size convolution (stride 1, padding `k / 2`).
    pub fn same(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Conv2d::new(rng, cin, cout, k, 1, k / 2, bias)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel, self.stride, self.pad),
            conv_out_len(w, self.kernel, self.stride, self.pad),
        )
    }

    /// Forward without caching the input.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let [n, h, w, c] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let row = k * k * c;
        let mut out = Tensor::zeros([n, oh, ow, self.out_channels]);
        let mut col = vec![0.0; oh * ow * row];
        for i in 0..n {
            let y = out.item_mut(i);
            if k == 1 && self.stride == 1 && self.pad == 0 {
                gemm(oh * ow, row, self.out_channels, x.item(i), false, &self.weight.value, false, 0.0, y);
            } else {
                im2col(x.item(i), (h, w, c), k, self.stride, self.pad, &mut col);
                gemm(oh * ow, row, self.out_channels, &col, false, &self.weight.value, false, 0.0, y);
            }
            if let Some(b) = &self.bias {
                for px in y.chunks_exact_mut(self.out_channels) {
                    for (v, bv) in px.iter_mut().zip(&b.value) {
                        *v += bv;
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.apply(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("conv backward before forward");
        let [n, h, w, c] = x.shape();
        let [_, oh, ow, co] = dy.shape();
        let k = self.kernel;
        let row = k * k * c;
        let pointwise = k == 1 && self.stride == 1 && self.pad == 0;
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![0.0; oh * ow * row];
        let mut dcol = vec![0.0; oh * ow * row];
        for i in 0..n {
            let g = dy.item(i);
            if pointwise {
                gemm(row, oh * ow, co, x.item(i), true, g, false, 1.0, &mut self.weight.grad);
                gemm(oh * ow, co, row, g, false, &self.weight.value, true, 0.0, dx.item_mut(i));
            } else {
                im2col(x.item(i), (h, w, c), k, self.stride, self.pad, &mut col);
                gemm(row, oh * ow, co, &col, true, g, false, 1.0, &mut self.weight.grad);
                gemm(oh * ow, co, row, g, false, &self.weight.value, true, 0.0, &mut dcol);
                col2im(&dcol, (h, w, c), k, self.stride, self.pad, dx.item_mut(i));
            }
            if let Some(b) = &mut self.bias {
                for px in g.chunks_exact(co) {
                    for (bg, v) in b.grad.iter_mut().zip(px) {
                        *bg += v;
                    }
                }
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(ParamKind::Norm, vec![channels], 1.0),
            beta: Param::filled(ParamKind::Norm, vec![channels], 0.0),
            running_mean: Param::filled(ParamKind::Buffer, vec![channels], 0.0),
            running_var: Param::filled(ParamKind::Buffer, vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let c = self.channels;
        assert_eq!(x.channels(), c, "batch-norm channels");
        let count = x.data().len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for px in x.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(px) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for px in x.data().chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch];
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for ((px, xh), o) in x
            .data()
            .chunks_exact(c)
            .zip(xhat.data_mut().chunks_exact_mut(c))
            .zip(out.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let v = (px[ch] - mean[ch]) * inv_std[ch];
                xh[ch] = v;
                o[ch] = v * self.gamma.value[ch] + self.beta.value[ch];
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, mode });
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("batch-norm backward before forward");
        let c = self.channels;
        let count = (dy.data().len() / c) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (g, xh) in dy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += g[ch];
                sum_dy_xhat[ch] += g[ch] * xh[ch];
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xhat[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        let gamma = &self.gamma.value;
        for ((g, xh), d) in dy
            .data()
            .chunks_exact(c)
            .zip(cache.xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                d[ch] = match cache.mode {
                    Mode::Eval => g[ch] * scale,
                    Mode::Train => {
                        scale * (g[ch] - sum_dy[ch] / count - xh[ch] * sum_dy_xhat[ch] / count)
                    }
                };
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Rectified-linear unit.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.active = x.data().iter().map(|&v| v > 0.0).collect();
        x.map(|v| v.max(0.0))
    }

    pub fn backward(&self, dy: &Tensor, mode: BackwardMode) -> Tensor {
        let mut dx = dy.clone();
        relu_backward_in_place(dx.data_mut(), &self.active, mode);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.active = Vec::new();
    }
}

pub(crate) fn relu_backward_in_place(grad: &mut [f64], active: &[bool], mode: BackwardMode) {
    assert_eq!(grad.len(), active.len(), "relu backward before forward");
    for (g, &on) in grad.iter_mut().zip(active) {
        if !on || (mode == BackwardMode::Guided && *g < 0.0) {
            *g = 0.0;
        }
    }
}
