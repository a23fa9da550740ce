//! The CELNet classifier: a 3x3 convolution head, three attention-based
//! residual modules, and companion GAP/GMP heads on modules 2 and 3 whose
//! concatenation feeds a 1x1 convolution producing the cancer logit.
//!
//! The companion pooling is windowed rather than global: at the configured
//! input size the window covers the whole feature map, while larger inputs
//! slide the window and yield a spatial grid of logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{validate_kernel_sizes, Mam, SpatialDescriptor, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{join, BackwardMode, BatchNorm, Conv2d, Mode, Module, Param, ParamKind, Relu};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CelnetConfig {
    pub input_size: usize,
    pub module_channels: [usize; 3],
    pub blocks_per_module: usize,
    pub attention_kernel_sizes: Vec<usize>,
    pub head_channels: usize,
    pub reduction: usize,
    pub spatial_descriptor: SpatialDescriptor,
    /// `false` builds the ablated network without attention modules.
    pub attention: bool,
}

impl Default for CelnetConfig {
    fn default() -> Self {
        CelnetConfig {
            input_size: 96,
            module_channels: [16, 32, 64],
            blocks_per_module: 3,
            attention_kernel_sizes: vec![3, 5, 7],
            head_channels: 16,
            reduction: DEFAULT_REDUCTION,
            spatial_descriptor: SpatialDescriptor::ChannelPooled,
            attention: true,
        }
    }
}

impl CelnetConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.module_channels;
        if !(a < b && b < c) {
            return Err(Error::Config(format!(
                "module channels must be strictly increasing, got {:?}",
                self.module_channels
            )));
        }
        if a == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_module == 0 {
            return Err(Error::Config("blocks_per_module must be at least 1".into()));
        }
        if self.input_size < 4 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        validate_kernel_sizes(&self.attention_kernel_sizes)?;
        if self.attention && (self.reduction == 0 || a < self.reduction) {
            return Err(Error::Config(format!(
                "smallest module width {a} is below the channel-attention reduction ratio {}",
                self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    mam: Option<Mam>,
    shortcut: Option<(Conv2d, BatchNorm)>,
    relu_out: Relu,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &CelnetConfig, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mam = if cfg.attention {
            Some(Mam::new(
                rng,
                cout,
                cfg.reduction,
                &cfg.attention_kernel_sizes,
                cfg.spatial_descriptor,
            )?)
        } else {
            None
        };
        let shortcut = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(rng, cin, cout, 3, stride, 1, false), BatchNorm::new(cout)));
        Ok(ResBlock {
            conv1: Conv2d::new(rng, cin, cout, 3, stride, 1, false),
            bn1: BatchNorm::new(cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(rng, cout, cout, 3, 1, 1, false),
            bn2: BatchNorm::new(cout),
            mam,
            shortcut,
            relu_out: Relu::default(),
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h, mode);
        if let Some(mam) = &mut self.mam {
            h = mam.forward(&h);
        }
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                h.add_assign(&bn.forward(&s, mode));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward(&h)
    }

    fn backward(&mut self, dy: &Tensor, bmode: BackwardMode) -> Tensor {
        let d = self.relu_out.backward(dy, bmode);
        let mut dmain = d.clone();
        if let Some(mam) = &mut self.mam {
            dmain = mam.backward(&dmain, bmode);
        }
        let dmain = self.bn2.backward(&dmain);
        let dmain = self.conv2.backward(&dmain);
        let dmain = self.relu1.backward(&dmain, bmode);
        let dmain = self.bn1.backward(&dmain);
        let mut dx = self.conv1.backward(&dmain);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                dx.add_assign(&conv.backward(&ds));
            }
            None => dx.add_assign(&d),
        }
        dx
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        if let Some(m) = &mut self.mam {
            m.clear_cache();
        }
        if let Some((c, b)) = &mut self.shortcut {
            c.clear_cache();
            b.clear_cache();
        }
        self.relu_out.clear_cache();
    }
}

impl Module for ResBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some(m) = &mut self.mam {
            m.visit_params(&join(prefix, "mam"), f);
        }
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_params(&join(prefix, "shortcut.conv"), f);
            b.visit_params(&join(prefix, "shortcut.bn"), f);
        }
    }
}

/// Sliding average + max pooling, concatenated along channels.
#[derive(Clone, Debug, Default)]
struct CompanionPool {
    cache: Option<PoolCache>,
}

#[derive(Clone, Debug)]
struct PoolCache {
    shape: [usize; 4],
    window: (usize, usize),
    stride: (usize, usize),
    argmax: Vec<usize>,
}

impl CompanionPool {
    fn forward(&mut self, x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Tensor {
        let [n, h, w, c] = x.shape();
        let (wh, ww) = window;
        let gh = (h - wh) / stride.0 + 1;
        let gw = (w - ww) / stride.1 + 1;
        let area = (wh * ww) as f64;
        let mut out = Tensor::zeros([n, gh, gw, 2 * c]);
        let mut argmax = vec![0usize; n * gh * gw * c];
        let mut sum = vec![0.0; c];
        let mut max = vec![0.0; c];
        for b in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    sum.fill(0.0);
                    max.fill(f64::NEG_INFINITY);
                    let cell = ((b * gh + gy) * gw + gx) * c;
                    for y in gy * stride.0..gy * stride.0 + wh {
                        for xx in gx * stride.1..gx * stride.1 + ww {
                            let base = x.index(b, y, xx, 0);
                            let px = &x.data()[base..base + c];
                            for ch in 0..c {
                                sum[ch] += px[ch];
                                if px[ch] > max[ch] {
                                    max[ch] = px[ch];
                                    argmax[cell + ch] = base + ch;
                                }
                            }
                        }
                    }
                    for ch in 0..c {
                        out.set(b, gy, gx, ch, sum[ch] / area);
                        out.set(b, gy, gx, c + ch, max[ch]);
                    }
                }
            }
        }
        self.cache = Some(PoolCache { shape: x.shape(), window, stride, argmax });
        out
    }

    fn backward(&self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("pool backward before forward");
        let [n, _, _, c] = cache.shape;
        let [_, gh, gw, _] = dy.shape();
        let (wh, ww) = cache.window;
        let stride = cache.stride;
        let area = (wh * ww) as f64;
        let mut dx = Tensor::zeros(cache.shape);
        for b in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    let cell = ((b * gh + gy) * gw + gx) * c;
                    for y in gy * stride.0..gy * stride.0 + wh {
                        for xx in gx * stride.1..gx * stride.1 + ww {
                            let base = dx.index(b, y, xx, 0);
                            for ch in 0..c {
                                dx.data_mut()[base + ch] += dy.at(b, gy, gx, ch) / area;
                            }
                        }
                    }
                    for ch in 0..c {
                        dx.data_mut()[cache.argmax[cell + ch]] += dy.at(b, gy, gx, c + ch);
                    }
                }
            }
        }
        dx
    }
}

/// Outputs of module 2 (`f2`) and module 3 (`f3`).
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub f2: Tensor,
    pub f3: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CancerScore {
    pub logit: f64,
    pub probability: f64,
}

impl CancerScore {
    pub fn from_logit(logit: f64) -> Self {
        CancerScore { logit, probability: sigmoid(logit) }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Main logits, `[batch, grid_h, grid_w, 1]`; the grid is 1x1 at the configured input size.
    pub logits: Tensor,
    pub aux2: Tensor,
    pub aux3: Tensor,
    pub features: FeatureStack,
}

impl ForwardOutput {
    /// One score per image. For spatial logit grids this is the mean logit.
    pub fn scores(&self) -> Vec<CancerScore> {
        let per = self.logits.item_len();
        self.logits
            .data()
            .chunks_exact(per)
            .map(|cells| CancerScore::from_logit(cells.iter().sum::<f64>() / per as f64))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientTarget {
    F2,
    F3,
    Input,
}

#[derive(Clone, Debug)]
struct RetainedGradients {
    f2: Tensor,
    f3: Tensor,
    input: Tensor,
}

#[derive(Clone, Debug)]
pub struct CelnetModel {
    config: CelnetConfig,
    mode: Mode,
    head_conv: Conv2d,
    head_bn: BatchNorm,
    head_relu: Relu,
    modules: [Vec<ResBlock>; 3],
    pool2: CompanionPool,
    pool3: CompanionPool,
    score_head: Conv2d,
    aux2_head: Conv2d,
    aux3_head: Conv2d,
    retained: Option<RetainedGradients>,
}

impl CelnetModel {
    /// Builds a freshly initialized network in eval mode.
    pub fn build(config: CelnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.module_channels;
        let head_conv = Conv2d::new(&mut rng, 3, config.head_channels, 3, 1, 1, false);
        let head_bn = BatchNorm::new(config.head_channels);
        let mut modules: [Vec<ResBlock>; 3] = Default::default();
        let mut cin = config.head_channels;
        for (m, (cout, stride)) in [c1, c2, c3].into_iter().zip([1, 2, 2]).enumerate() {
            for b in 0..config.blocks_per_module {
                let s = if b == 0 { stride } else { 1 };
                modules[m].push(ResBlock::new(&mut rng, &config, cin, cout, s)?);
                cin = cout;
            }
        }
        let score_head = Conv2d::new(&mut rng, 2 * (c2 + c3), 1, 1, 1, 0, true);
        let aux2_head = Conv2d::new(&mut rng, 2 * c2, 1, 1, 1, 0, true);
        let aux3_head = Conv2d::new(&mut rng, 2 * c3, 1, 1, 1, 0, true);
        Ok(CelnetModel {
            config,
            mode: Mode::Eval,
            head_conv,
            head_bn,
            head_relu: Relu::default(),
            modules,
            pool2: CompanionPool::default(),
            pool3: CompanionPool::default(),
            score_head,
            aux2_head,
            aux3_head,
            retained: None,
        })
    }

    pub fn config(&self) -> &CelnetConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn parameter_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable() {
                total += p.len();
            }
        });
        total
    }

    pub fn score_head_mut(&mut self) -> &mut Conv2d {
        &mut self.score_head
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Sum of squared convolution/dense kernel weights.
    pub fn weight_norm_sq(&mut self) -> f64 {
        let mut total = 0.0;
        self.visit_params("", &mut |_, p| {
            if p.kind == ParamKind::Weight {
                total += p.value.iter().map(|v| v * v).sum::<f64>();
            }
        });
        total
    }

    pub fn validate_input(&self, images: &Tensor) -> Result<()> {
        let [n, h, w, c] = images.shape();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if c != 3 {
            return Err(Error::Input(format!("expected 3 colour channels, got {c}")));
        }
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Input(format!(
                "input {h}x{w} must be at least 4x4 and a multiple of the 4x total downsampling"
            )));
        }
        Ok(())
    }

    /// Companion pooling geometry at module-3 resolution for a given F3 size.
    fn pool_geometry(&self, h3: usize, w3: usize) -> ((usize, usize), (usize, usize)) {
        let base = self.config.input_size / 4;
        let stride = (base / 3).max(1);
        ((base.min(h3), base.min(w3)), (stride, stride))
    }

    /// Spatial size of the logit grid for an input of `h x w` pixels.
    pub fn logit_grid(&self, h: usize, w: usize) -> (usize, usize) {
        let (h3, w3) = (h / 4, w / 4);
        let ((wh, ww), (sh, sw)) = self.pool_geometry(h3, w3);
        ((h3 - wh) / sh + 1, (w3 - ww) / sw + 1)
    }

    /// Forward pass in the model's current mode, caching what backward needs.
    pub fn forward(&mut self, images: &Tensor) -> Result<ForwardOutput> {
        self.validate_input(images)?;
        self.retained = None;
        let mode = self.mode;
        let h = self.head_conv.forward(images);
        let h = self.head_bn.forward(&h, mode);
        let mut h = self.head_relu.forward(&h);
        let mut f2 = None;
        for (m, blocks) in self.modules.iter_mut().enumerate() {
            for block in blocks.iter_mut() {
                h = block.forward(&h, mode);
            }
            if m == 1 {
                f2 = Some(h.clone());
            }
        }
        let f3 = h;
        let f2 = f2.expect("three modules");
        let (win3, stride3) = self.pool_geometry(f3.height(), f3.width());
        let pooled2 = self.pool2.forward(
            &f2,
            (2 * win3.0, 2 * win3.1),
            (2 * stride3.0, 2 * stride3.1),
        );
        let pooled3 = self.pool3.forward(&f3, win3, stride3);
        let logits = self.score_head.forward(&Tensor::concat_channels(&pooled2, &pooled3));
        let aux2 = self.aux2_head.forward(&pooled2);
        let aux3 = self.aux3_head.forward(&pooled3);
        Ok(ForwardOutput {
            logits,
            aux2,
            aux3,
            features: FeatureStack { f2, f3 },
        })
    }

    /// Scores without keeping anything for a backward pass.
    pub fn predict(&mut self, images: &Tensor) -> Result<Vec<CancerScore>> {
        let out = self.forward(images)?;
        self.clear_cache();
        Ok(out.scores())
    }

    /// Backpropagates the given output gradients through the network.
    ///
    /// Accumulates parameter gradients and retains the gradients at F2, F3
    /// and the input. `d_aux2`/`d_aux3` may be `None` when the auxiliary
    /// heads do not contribute.
    pub fn backward(
        &mut self,
        d_logits: &Tensor,
        d_aux2: Option<&Tensor>,
        d_aux3: Option<&Tensor>,
        bmode: BackwardMode,
    ) -> Tensor {
        let c2 = 2 * self.config.module_channels[1];
        let dcat = self.score_head.backward(d_logits);
        let (mut dp2, mut dp3) = dcat.split_channels(c2);
        if let Some(d) = d_aux2 {
            dp2.add_assign(&self.aux2_head.backward(d));
        }
        if let Some(d) = d_aux3 {
            dp3.add_assign(&self.aux3_head.backward(d));
        }
        let df3 = self.pool3.backward(&dp3);
        let mut h = df3.clone();
        for block in self.modules[2].iter_mut().rev() {
            h = block.backward(&h, bmode);
        }
        h.add_assign(&self.pool2.backward(&dp2));
        let df2 = h.clone();
        for m in [1, 0] {
            for block in self.modules[m].iter_mut().rev() {
                h = block.backward(&h, bmode);
            }
        }
        let h = self.head_relu.backward(&h, bmode);
        let h = self.head_bn.backward(&h);
        let dx = self.head_conv.backward(&h);
        self.retained = Some(RetainedGradients {
            f2: df2,
            f3: df3,
            input: dx.clone(),
        });
        dx
    }

    /// Backpropagates the cancer logit (summed over the logit grid), auxiliary heads excluded.
    pub fn backward_score(&mut self, logits_shape: [usize; 4], bmode: BackwardMode) -> Tensor {
        let seed = Tensor::filled(logits_shape, 1.0);
        self.backward(&seed, None, None, bmode)
    }

    /// Gradient of the logit retained by the last backward pass.
    pub fn retained_gradient(&self, target: GradientTarget) -> Result<&Tensor> {
        let r = self.retained.as_ref().ok_or(Error::GradientsNotRetained)?;
        Ok(match target {
            GradientTarget::F2 => &r.f2,
            GradientTarget::F3 => &r.f3,
            GradientTarget::Input => &r.input,
        })
    }

    /// Runs forward and backward on `images` and returns `∂logit/∂target`.
    pub fn score_gradients(&mut self, images: &Tensor, target: GradientTarget) -> Result<Tensor> {
        let out = self.forward(images)?;
        self.backward_score(out.logits.shape(), BackwardMode::Standard);
        let g = self.retained_gradient(target)?.clone();
        self.clear_cache();
        Ok(g)
    }

    /// Drops activation caches (retained gradients survive).
    pub fn clear_cache(&mut self) {
        self.head_conv.clear_cache();
        self.head_bn.clear_cache();
        self.head_relu.clear_cache();
        for blocks in &mut self.modules {
            for b in blocks {
                b.clear_cache();
            }
        }
        self.pool2.cache = None;
        self.pool3.cache = None;
        self.score_head.clear_cache();
        self.aux2_head.clear_cache();
        self.aux3_head.clear_cache();
    }
}

impl Module for CelnetModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head_conv.visit_params(&join(prefix, "head.conv"), f);
        self.head_bn.visit_params(&join(prefix, "head.bn"), f);
        for (m, blocks) in self.modules.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("module{}.block{}", m + 1, b)), f);
            }
        }
        self.score_head.visit_params(&join(prefix, "score_head"), f);
        self.aux2_head.visit_params(&join(prefix, "aux2_head"), f);
        self.aux3_head.visit_params(&join(prefix, "aux3_head"), f);
    }
}
