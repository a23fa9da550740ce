//! Channel gating and the multi-branch spatial attention module (MAM).
//!
//! `MAM(F) = F_sq ⊙ A_s` with `F_sq = F ⊙ g(F)` (squeeze-and-excitation style
//! channel gate) and `A_s = σ(Σ_k conv_k(F_sq))` over odd kernel sizes `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward_in_place, BackwardMode, Conv2d, Module, Param};
use crate::tensor::{conv_to_scalar, conv_to_scalar_backward, sigmoid, Tensor};

pub const DEFAULT_REDUCTION: usize = 8;

/// What the spatial branches convolve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialDescriptor {
    /// Per-pixel channel mean and channel max (2 input channels per branch).
    #[default]
    ChannelPooled,
    /// Every channel of the squeezed map.
    FullChannels,
}

/// Feature map already refined by the channel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezedFeatureMap(pub Tensor);

/// Sigmoid spatial map, shape `[batch, h, w, 1]`, values in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap(pub Tensor);

pub fn validate_kernel_sizes(kernel_sizes: &[usize]) -> Result<()> {
    if kernel_sizes.is_empty() {
        return Err(Error::Config("attention needs at least one kernel size".into()));
    }
    for &k in kernel_sizes {
        if k % 2 == 0 || k < 3 {
            return Err(Error::Config(format!(
                "attention kernel size {k} must be odd and at least 3"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    cache: Option<ChannelCache>,
}

#[derive(Clone, Debug)]
struct ChannelCache {
    input: Tensor,
    gate: Vec<f64>,
    argmax: Vec<usize>,
    hidden_active: Vec<bool>,
}

impl ChannelAttention {
    pub fn new(rng: &mut impl Rng, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::Config(format!(
                "channel attention needs channels ({channels}) >= reduction ratio ({reduction})"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            channels,
            reduction,
            fc1: Conv2d::new(rng, channels, hidden, 1, 1, 0, true),
            fc2: Conv2d::new(rng, hidden, channels, 1, 1, 0, true),
            cache: None,
        })
    }

    fn pooled(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let [n, h, w, c] = x.shape();
        let mut stacked = Tensor::zeros([2 * n, 1, 1, c]);
        let mut argmax = vec![0usize; n * c];
        for b in 0..n {
            let item = x.item(b);
            let mut sum = vec![0.0; c];
            let mut max = vec![f64::NEG_INFINITY; c];
            for (p, px) in item.chunks_exact(c).enumerate() {
                for ch in 0..c {
                    sum[ch] += px[ch];
                    if px[ch] > max[ch] {
                        max[ch] = px[ch];
                        argmax[b * c + ch] = p;
                    }
                }
            }
            let area = (h * w) as f64;
            for ch in 0..c {
                stacked.data_mut()[b * c + ch] = sum[ch] / area;
                stacked.data_mut()[(n + b) * c + ch] = max[ch];
            }
        }
        (stacked, argmax)
    }

    /// Per-image, per-channel gate in (0, 1), laid out `[batch * channels]`.
    pub fn gate(&self, x: &Tensor) -> Vec<f64> {
        let n = x.batch();
        let (stacked, _) = self.pooled(x);
        let hidden = self.fc1.apply(&stacked).map(|v| v.max(0.0));
        let z = self.fc2.apply(&hidden);
        let half = n * self.channels;
        (0..half).map(|i| sigmoid(z.data()[i] + z.data()[half + i])).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Result<SqueezedFeatureMap> {
        self.check(x)?;
        let gate = self.gate(x);
        Ok(SqueezedFeatureMap(scale_channels(x, &gate)))
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "channel attention built for {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let n = x.batch();
        let (stacked, argmax) = self.pooled(x);
        let pre_hidden = self.fc1.forward(&stacked);
        let hidden_active: Vec<bool> = pre_hidden.data().iter().map(|&v| v > 0.0).collect();
        let hidden = pre_hidden.map(|v| v.max(0.0));
        let z = self.fc2.forward(&hidden);
        let half = n * self.channels;
        let gate: Vec<f64> = (0..half)
            .map(|i| sigmoid(z.data()[i] + z.data()[half + i]))
            .collect();
        let out = scale_channels(x, &gate);
        self.cache = Some(ChannelCache {
            input: x.clone(),
            gate,
            argmax,
            hidden_active,
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor, mode: BackwardMode) -> Tensor {
        let cache = self.cache.take().expect("channel attention backward before forward");
        let x = &cache.input;
        let [n, h, w, c] = x.shape();
        let mut dz = Tensor::zeros([2 * n, 1, 1, c]);
        for b in 0..n {
            let mut dg = vec![0.0; c];
            for (g, v) in dy.item(b).chunks_exact(c).zip(x.item(b).chunks_exact(c)) {
                for ch in 0..c {
                    dg[ch] += g[ch] * v[ch];
                }
            }
            for ch in 0..c {
                let s = cache.gate[b * c + ch];
                let d = dg[ch] * s * (1.0 - s);
                dz.data_mut()[b * c + ch] = d;
                dz.data_mut()[(n + b) * c + ch] = d;
            }
        }
        let mut dhidden = self.fc2.backward(&dz);
        relu_backward_in_place(dhidden.data_mut(), &cache.hidden_active, mode);
        let dstacked = self.fc1.backward(&dhidden);
        let mut dx = scale_channels(dy, &cache.gate);
        let area = (h * w) as f64;
        for b in 0..n {
            let item = dx.item_mut(b);
            for ch in 0..c {
                let davg = dstacked.data()[b * c + ch] / area;
                for px in item.chunks_exact_mut(c) {
                    px[ch] += davg;
                }
                let p = cache.argmax[b * c + ch];
                item[p * c + ch] += dstacked.data()[(n + b) * c + ch];
            }
        }
        self.cache = Some(cache);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.fc1.clear_cache();
        self.fc2.clear_cache();
    }
}

impl Module for ChannelAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

fn scale_channels(x: &Tensor, gate: &[f64]) -> Tensor {
    let c = x.channels();
    let mut out = x.clone();
    for b in 0..x.batch() {
        let g = &gate[b * c..(b + 1) * c];
        for px in out.item_mut(b).chunks_exact_mut(c) {
            for (v, s) in px.iter_mut().zip(g) {
                *v *= s;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub channels: usize,
    pub descriptor: SpatialDescriptor,
    pub kernel_sizes: Vec<usize>,
    pub branches: Vec<Conv2d>,
    cache: Option<SpatialCache>,
}

#[derive(Clone, Debug)]
struct SpatialCache {
    input: Tensor,
    descriptor: Tensor,
    attention: Tensor,
    argmax: Vec<usize>,
}

impl SpatialAttention {
    pub fn new(
        rng: &mut impl Rng,
        channels: usize,
        kernel_sizes: &[usize],
        descriptor: SpatialDescriptor,
    ) -> Result<Self> {
        validate_kernel_sizes(kernel_sizes)?;
        let cin = match descriptor {
            SpatialDescriptor::ChannelPooled => 2,
            SpatialDescriptor::FullChannels => channels,
        };
        let branches = kernel_sizes
            .iter()
            .map(|&k| Conv2d::same(rng, cin, 1, k, true))
            .collect();
        Ok(SpatialAttention {
            channels,
            descriptor,
            kernel_sizes: kernel_sizes.to_vec(),
            branches,
            cache: None,
        })
    }

    fn describe(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        match self.descriptor {
            SpatialDescriptor::FullChannels => (x.clone(), Vec::new()),
            SpatialDescriptor::ChannelPooled => {
                let [n, h, w, c] = x.shape();
                let mut d = Tensor::zeros([n, h, w, 2]);
                let mut argmax = vec![0usize; n * h * w];
                for (p, px) in x.data().chunks_exact(c).enumerate() {
                    let mut best = 0;
                    for ch in 1..c {
                        if px[ch] > px[best] {
                            best = ch;
                        }
                    }
                    argmax[p] = best;
                    d.data_mut()[2 * p] = px.iter().sum::<f64>() / c as f64;
                    d.data_mut()[2 * p + 1] = px[best];
                }
                (d, argmax)
            }
        }
    }

    /// Pre-sigmoid response of a single branch.
    pub fn branch_response(&self, branch: usize, x: &Tensor) -> Tensor {
        let (d, _) = self.describe(x);
        self.branches[branch].apply(&d)
    }

    /// Sum of all branch responses, before the sigmoid.
    pub fn pre_activation(&self, x: &Tensor) -> Tensor {
        let (d, _) = self.describe(x);
        let mut sum = self.branches[0].apply(&d);
        for conv in &self.branches[1..] {
            sum.add_assign(&conv.apply(&d));
        }
        sum
    }

    pub fn attention_map(&self, squeezed: &SqueezedFeatureMap) -> Result<SpatialAttentionMap> {
        if squeezed.0.channels() != self.channels {
            return Err(Error::Shape(format!(
                "spatial attention built for {} channels, got {}",
                self.channels,
                squeezed.0.channels()
            )));
        }
        Ok(SpatialAttentionMap(self.pre_activation(&squeezed.0).map(sigmoid)))
    }

    /// All branches folded into one centered kernel of the largest size.
    ///
    /// Same-padded convolutions are linear, so the branch sum equals a single
    /// convolution with the zero-padded kernels added together.
    fn fused_kernel(&self) -> (usize, Vec<f64>, f64) {
        let big = *self.kernel_sizes.iter().max().expect("non-empty");
        let cin = self.branches[0].in_channels;
        let mut kernel = vec![0.0; big * big * cin];
        let mut bias = 0.0;
        for (conv, &k) in self.branches.iter().zip(&self.kernel_sizes) {
            let off = (big - k) / 2;
            for ky in 0..k {
                for kx in 0..k {
                    let src = (ky * k + kx) * cin;
                    let dst = ((ky + off) * big + kx + off) * cin;
                    for ci in 0..cin {
                        kernel[dst + ci] += conv.weight.value[src + ci];
                    }
                }
            }
            bias += conv.bias.as_ref().map_or(0.0, |b| b.value[0]);
        }
        (big, kernel, bias)
    }

    /// Returns `x ⊙ A_s(x)`.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (d, argmax) = self.describe(x);
        let (big, kernel, bias) = self.fused_kernel();
        let attention = conv_to_scalar(&d, &kernel, big, bias).map(sigmoid);
        let out = broadcast_mul(x, &attention);
        self.cache = Some(SpatialCache {
            input: x.clone(),
            descriptor: d,
            attention,
            argmax,
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("spatial attention backward before forward");
        let x = &cache.input;
        let [n, h, w, c] = x.shape();
        let mut ds = Tensor::zeros([n, h, w, 1]);
        for (p, (g, v)) in dy.data().chunks_exact(c).zip(x.data().chunks_exact(c)).enumerate() {
            let da: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
            let a = cache.attention.data()[p];
            ds.data_mut()[p] = da * a * (1.0 - a);
        }
        let (big, kernel, _) = self.fused_kernel();
        let cin = self.branches[0].in_channels;
        let mut dkernel = vec![0.0; kernel.len()];
        let dd = conv_to_scalar_backward(&cache.descriptor, &kernel, big, &ds, &mut dkernel);
        let dbias: f64 = ds.data().iter().sum();
        for (conv, &k) in self.branches.iter_mut().zip(&self.kernel_sizes) {
            let off = (big - k) / 2;
            for ky in 0..k {
                for kx in 0..k {
                    let dst = (ky * k + kx) * cin;
                    let src = ((ky + off) * big + kx + off) * cin;
                    for ci in 0..cin {
                        conv.weight.grad[dst + ci] += dkernel[src + ci];
                    }
                }
            }
            if let Some(b) = &mut conv.bias {
                b.grad[0] += dbias;
            }
        }
        let mut dx = broadcast_mul(dy, &cache.attention);
        match self.descriptor {
            SpatialDescriptor::FullChannels => dx.add_assign(&dd),
            SpatialDescriptor::ChannelPooled => {
                for (p, px) in dx.data_mut().chunks_exact_mut(c).enumerate() {
                    let dmean = dd.data()[2 * p] / c as f64;
                    for v in px.iter_mut() {
                        *v += dmean;
                    }
                    px[cache.argmax[p]] += dd.data()[2 * p + 1];
                }
            }
        }
        self.cache = Some(cache);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for b in &mut self.branches {
            b.clear_cache();
        }
    }
}

impl Module for SpatialAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (conv, k) in self.branches.iter_mut().zip(&self.kernel_sizes) {
            conv.visit_params(&join(prefix, &format!("branch{k}")), f);
        }
    }
}

/// Multiplies every channel by a single-channel map of the same spatial size.
pub fn broadcast_mul(x: &Tensor, map: &Tensor) -> Tensor {
    let c = x.channels();
    let mut out = x.clone();
    for (px, &a) in out.data_mut().chunks_exact_mut(c).zip(map.data()) {
        for v in px.iter_mut() {
            *v *= a;
        }
    }
    out
}

/// Multi-branch attention module: channel gate followed by spatial gate.
#[derive(Clone, Debug)]
pub struct Mam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Mam {
    pub fn new(
        rng: &mut impl Rng,
        channels: usize,
        reduction: usize,
        kernel_sizes: &[usize],
        descriptor: SpatialDescriptor,
    ) -> Result<Self> {
        Ok(Mam {
            channel: ChannelAttention::new(rng, channels, reduction)?,
            spatial: SpatialAttention::new(rng, channels, kernel_sizes, descriptor)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let squeezed = self.channel.apply(x)?;
        let attention = self.spatial.attention_map(&squeezed)?;
        Ok(broadcast_mul(&squeezed.0, &attention.0))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let squeezed = self.channel.forward(x);
        self.spatial.forward(&squeezed)
    }

    pub fn backward(&mut self, dy: &Tensor, mode: BackwardMode) -> Tensor {
        let dsq = self.spatial.backward(dy);
        self.channel.backward(&dsq, mode)
    }

    pub fn clear_cache(&mut self) {
        self.channel.clear_cache();
        self.spatial.clear_cache();
    }
}

impl Module for Mam {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.channel.visit_params(&join(prefix, "channel"), f);
        self.spatial.visit_params(&join(prefix, "spatial"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_too_few_channels_and_even_kernels() {
        let mut r = rng();
        assert!(ChannelAttention::new(&mut r, 4, 8).is_err());
        assert!(SpatialAttention::new(&mut r, 8, &[3, 4], SpatialDescriptor::ChannelPooled).is_err());
        assert!(SpatialAttention::new(&mut r, 8, &[1], SpatialDescriptor::ChannelPooled).is_err());
    }

    #[test]
    fn saturated_gate_is_identity() {
        let mut r = rng();
        let mut ca = ChannelAttention::new(&mut r, 8, 8).unwrap();
        ca.fc2.bias.as_mut().unwrap().value.fill(50.0);
        let x = random_tensor(&mut r, [2, 5, 5, 8]);
        assert_eq!(ca.apply(&x).unwrap().0, x);
    }

    #[test]
    fn zero_input_stays_zero() {
        let mut r = rng();
        let ca = ChannelAttention::new(&mut r, 16, 8).unwrap();
        let x = Tensor::zeros([1, 4, 4, 16]);
        let gate = ca.gate(&x);
        let hidden: Vec<f64> = ca.fc1.bias.as_ref().unwrap().value.iter().map(|b| b.max(0.0)).collect();
        for ch in 0..16 {
            let mut z = ca.fc2.bias.as_ref().unwrap().value[ch];
            for (j, hv) in hidden.iter().enumerate() {
                z += hv * ca.fc2.weight.value[j * 16 + ch];
            }
            assert!((gate[ch] - sigmoid(2.0 * z)).abs() < 1e-12);
        }
        assert!(ca.apply(&x).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_output_is_per_channel_scaling() {
        let mut r = rng();
        let ca = ChannelAttention::new(&mut r, 8, 8).unwrap();
        let x = random_tensor(&mut r, [1, 6, 6, 8]);
        let y = ca.apply(&x).unwrap().0;
        for ch in 0..8 {
            let ratio = y.at(0, 0, 0, ch) / x.at(0, 0, 0, ch);
            assert!(ratio > 0.0 && ratio < 1.0);
            for yy in 0..6 {
                for xx in 0..6 {
                    assert!((y.at(0, yy, xx, ch) - ratio * x.at(0, yy, xx, ch)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_branches_give_half() {
        let mut r = rng();
        let mut sa = SpatialAttention::new(&mut r, 4, &[3, 5, 7], SpatialDescriptor::FullChannels).unwrap();
        for b in &mut sa.branches {
            b.weight.value.fill(0.0);
            b.bias.as_mut().unwrap().value.fill(0.0);
        }
        let x = random_tensor(&mut r, [1, 6, 6, 4]);
        let a = sa.attention_map(&SqueezedFeatureMap(x)).unwrap();
        assert!(a.0.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_kernel_single_branch() {
        let mut r = rng();
        for descriptor in [SpatialDescriptor::FullChannels, SpatialDescriptor::ChannelPooled] {
            let mut sa = SpatialAttention::new(&mut r, 1, &[3], descriptor).unwrap();
            let conv = &mut sa.branches[0];
            conv.weight.value.fill(0.0);
            // center tap of input channel 0
            conv.weight.value[4 * conv.in_channels] = 1.0;
            conv.bias.as_mut().unwrap().value[0] = 0.0;
            let x = random_tensor(&mut r, [1, 5, 5, 1]);
            let a = sa.attention_map(&SqueezedFeatureMap(x.clone())).unwrap();
            for (got, v) in a.0.data().iter().zip(x.data()) {
                assert!((got - sigmoid(*v)).abs() < 1e-15);
            }
        }
    }
}
