//! Evidence maps: gradient-weighted activation maps (CAM) at modules 2 and 3,
//! the guided-backpropagation saliency map (CSM), and their fusion (CELM).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, gaussian_smooth, min_max_normalize, LUMA};
use crate::model::{CelnetModel, GradientTarget};
use crate::nn::{BackwardMode, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamLayer {
    Module2,
    Module3,
}

/// Rectified, gradient-weighted feature sum at a layer's native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub data: Array2<f64>,
    pub layer: CamLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub data: Array2<f64>,
    /// The guided gradient was constant, so the map is all zeros.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight of the module-3 map against the module-2 map.
    pub alpha: f64,
    /// Weight of the CAM⊙CSM product against the plain CAM.
    pub beta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 0.5, beta: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        check_unit("beta", self.beta)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub fusion: FusionConfig,
    /// Gaussian sigma, in pixels, applied to the grey saliency map.
    pub csm_sigma: f64,
    /// Min-max normalize each CAM before fusing.
    pub normalize_cams: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            fusion: FusionConfig::default(),
            csm_sigma: 2.0,
            normalize_cams: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExplanationMaps {
    pub cam2: ActivationMap,
    pub cam3: ActivationMap,
    pub cam_fused: Array2<f64>,
    pub csm: SaliencyMap,
    pub celm: Array2<f64>,
}

/// `ReLU(Σ_k α_k F^k)` with `α_k` the spatial mean of `∂y/∂F^k`.
///
/// `features` and `grads` are one image's `[h, w, c]` slices.
pub fn cam_from_gradients(features: &[f64], grads: &[f64], (h, w, c): (usize, usize, usize)) -> Array2<f64> {
    let mut alpha = vec![0.0; c];
    for px in grads.chunks_exact(c) {
        for (a, g) in alpha.iter_mut().zip(px) {
            *a += g;
        }
    }
    let area = (h * w) as f64;
    alpha.iter_mut().for_each(|a| *a /= area);
    let values = features
        .chunks_exact(c)
        .map(|px| px.iter().zip(&alpha).map(|(f, a)| f * a).sum::<f64>().max(0.0))
        .collect();
    Array2::from_shape_vec((h, w), values).expect("h * w pixels")
}

fn cams_from_retained(model: &CelnetModel, f2: &Tensor, f3: &Tensor, b: usize) -> Result<(ActivationMap, ActivationMap)> {
    let g2 = model.retained_gradient(GradientTarget::F2)?;
    let g3 = model.retained_gradient(GradientTarget::F3)?;
    let cam = |f: &Tensor, g: &Tensor, layer| ActivationMap {
        data: cam_from_gradients(f.item(b), g.item(b), (f.height(), f.width(), f.channels())),
        layer,
    };
    Ok((cam(f2, g2, CamLayer::Module2), cam(f3, g3, CamLayer::Module3)))
}

/// Grey, smoothed, `[0, 1]` saliency from one image's `[H, W, 3]` input gradient.
pub fn saliency_from_gradient(grad: &[f64], (h, w): (usize, usize), sigma: f64) -> SaliencyMap {
    let raw = Array2::from_shape_vec((h * w, 3), grad.to_vec()).expect("H * W * 3 gradient");
    let Some(normalized) = min_max_normalize(&raw) else {
        return SaliencyMap { data: Array2::zeros((h, w)), degenerate: true };
    };
    let grey = Array2::from_shape_fn((h, w), |(y, x)| {
        let p = y * w + x;
        (0..3).map(|ch| LUMA[ch] * normalized[[p, ch]]).sum::<f64>()
    });
    let data = gaussian_smooth(&grey, sigma).mapv(|v| v.clamp(0.0, 1.0));
    SaliencyMap { data, degenerate: false }
}

struct EvalGuard<'a> {
    model: &'a mut CelnetModel,
    previous: Mode,
}

impl<'a> EvalGuard<'a> {
    fn new(model: &'a mut CelnetModel) -> Self {
        let previous = model.mode();
        model.set_mode(Mode::Eval);
        EvalGuard { model, previous }
    }
}

impl Drop for EvalGuard<'_> {
    fn drop(&mut self) {
        self.model.clear_cache();
        self.model.zero_grad();
        self.model.set_mode(self.previous);
    }
}

/// CAM2 and CAM3 for every image of the batch.
pub fn compute_cams(model: &mut CelnetModel, images: &Tensor) -> Result<Vec<(ActivationMap, ActivationMap)>> {
    let guard = EvalGuard::new(model);
    let out = guard.model.forward(images)?;
    guard.model.backward_score(out.logits.shape(), BackwardMode::Standard);
    let (f2, f3) = (&out.features.f2, &out.features.f3);
    (0..images.batch())
        .map(|b| cams_from_retained(guard.model, f2, f3, b))
        .collect()
}

/// CAM for one image (`[1, H, W, 3]`) at the requested layer.
pub fn compute_cam(model: &mut CelnetModel, image: &Tensor, layer: CamLayer) -> Result<ActivationMap> {
    if image.batch() != 1 {
        return Err(Error::Input(format!("expected a single image, got a batch of {}", image.batch())));
    }
    let (cam2, cam3) = compute_cams(model, image)?.pop().expect("one image");
    Ok(match layer {
        CamLayer::Module2 => cam2,
        CamLayer::Module3 => cam3,
    })
}

/// Raw guided-backpropagation input gradient, `[batch, H, W, 3]`.
pub fn guided_gradient(model: &mut CelnetModel, images: &Tensor) -> Result<Tensor> {
    let guard = EvalGuard::new(model);
    let out = guard.model.forward(images)?;
    Ok(guard.model.backward_score(out.logits.shape(), BackwardMode::Guided))
}

pub fn compute_csm(model: &mut CelnetModel, images: &Tensor, sigma: f64) -> Result<Vec<SaliencyMap>> {
    let grad = guided_gradient(model, images)?;
    let hw = (images.height(), images.width());
    Ok((0..images.batch())
        .map(|b| saliency_from_gradient(grad.item(b), hw, sigma))
        .collect())
}

/// `α·up(cam3) + (1−α)·up(cam2)` at `size`, bilinear upsampling.
pub fn fuse_cam(cam2: &Array2<f64>, cam3: &Array2<f64>, alpha: f64, size: (usize, usize)) -> Result<Array2<f64>> {
    check_unit("alpha", alpha)?;
    let up2 = bilinear_resize(cam2, size.0, size.1);
    let up3 = bilinear_resize(cam3, size.0, size.1);
    Ok(&up3 * alpha + &up2 * (1.0 - alpha))
}

/// `β·(M_c ⊙ M_s) + (1−β)·M_c`.
pub fn fuse_celm(cam_fused: &Array2<f64>, csm: &Array2<f64>, beta: f64) -> Result<Array2<f64>> {
    check_unit("beta", beta)?;
    if cam_fused.dim() != csm.dim() {
        return Err(Error::Shape(format!(
            "CAM is {:?} but CSM is {:?}",
            cam_fused.dim(),
            csm.dim()
        )));
    }
    Ok(cam_fused * csm * beta + cam_fused * (1.0 - beta))
}

/// Min-max rescaling of a CAM before fusion. A constant map is divided by its
/// maximum instead (zero stays zero).
pub fn normalize_cam(map: &Array2<f64>) -> Array2<f64> {
    min_max_normalize(map).unwrap_or_else(|| scale_to_unit(map))
}

/// Divides by the maximum when it is positive.
pub fn scale_to_unit(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map / max
    } else {
        map.clone()
    }
}

/// Full explanation for every image: one forward pass, then a standard and a guided backward pass.
pub fn explain(model: &mut CelnetModel, images: &Tensor, config: &ExplainConfig) -> Result<Vec<ExplanationMaps>> {
    config.fusion.validate()?;
    let size = (images.height(), images.width());
    let guard = EvalGuard::new(model);
    let out = guard.model.forward(images)?;
    guard.model.backward_score(out.logits.shape(), BackwardMode::Standard);
    let cams: Vec<_> = (0..images.batch())
        .map(|b| cams_from_retained(guard.model, &out.features.f2, &out.features.f3, b))
        .collect::<Result<_>>()?;
    let guided = guard.model.backward_score(out.logits.shape(), BackwardMode::Guided);
    drop(guard);
    cams.into_iter()
        .enumerate()
        .map(|(b, (cam2, cam3))| {
            let csm = saliency_from_gradient(guided.item(b), size, config.csm_sigma);
            let (m2, m3) = if config.normalize_cams {
                (normalize_cam(&cam2.data), normalize_cam(&cam3.data))
            } else {
                (cam2.data.clone(), cam3.data.clone())
            };
            let cam_fused = fuse_cam(&m2, &m3, config.fusion.alpha, size)?;
            let celm = fuse_celm(&cam_fused, &csm.data, config.fusion.beta)?;
            Ok(ExplanationMaps { cam2, cam3, cam_fused, csm, celm })
        })
        .collect()
}
