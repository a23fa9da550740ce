//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use celnet::localize::{Component, GroundTruthMask, Verdict};
use celnet::model::{CelnetConfig, CelnetModel, GradientTarget};
use celnet::nn::{BackwardMode, Mode};
use celnet::tensor::Tensor;
use celnet::wsi::{SlideAnnotation, TumorDetection, FROC_FP_RATES};
use ndarray::Array2;
use rand::Rng;

/// A cheap network on 32×32 inputs.
pub fn small_config() -> CelnetConfig {
    CelnetConfig {
        input_size: 32,
        module_channels: [8, 12, 16],
        blocks_per_module: 1,
        head_channels: 8,
        ..Default::default()
    }
}

pub fn random_images(rng: &mut impl Rng, n: usize, size: usize) -> Tensor {
    let data = (0..n * size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec([n, size, size, 3], data).unwrap()
}

pub fn random_direction(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Model in eval mode whose batch-norm running statistics have moved off their initial values.
pub fn warmed_model(config: CelnetConfig, seed: u64, rng: &mut impl Rng) -> CelnetModel {
    let mut model = CelnetModel::build(config.clone(), seed).unwrap();
    model.set_mode(Mode::Train);
    for _ in 0..3 {
        let x = random_images(rng, 4, config.input_size);
        model.forward(&x).unwrap();
        model.clear_cache();
    }
    model.set_mode(Mode::Eval);
    model
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn shifted(x: &Tensor, d: &Tensor, eps: f64) -> Tensor {
    let data = x.data().iter().zip(d.data()).map(|(a, b)| a + eps * b).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn total_logit(model: &mut CelnetModel, x: &Tensor) -> f64 {
    let out = model.forward(x).unwrap();
    model.clear_cache();
    out.logits.data().iter().sum()
}

/// Central difference of the summed logit along `d` against `<∂y/∂x, d>`.
pub fn input_gradient_error(model: &mut CelnetModel, x: &Tensor, d: &Tensor, eps: f64) -> f64 {
    let g = model.score_gradients(x, GradientTarget::Input).unwrap();
    let analytic = dot(&g, d);
    let fd = (total_logit(model, &shifted(x, d, eps)) - total_logit(model, &shifted(x, d, -eps))) / (2.0 * eps);
    rel_err(fd, analytic)
}

/// The logit depends on the input only through F2 (and through F3), so a
/// finite input step must change it by `<∂y/∂F, ΔF>` to first order. This
/// checks the retained feature gradients that weight the CAMs.
pub fn feature_gradient_error(model: &mut CelnetModel, x: &Tensor, d: &Tensor, eps: f64, target: GradientTarget) -> f64 {
    let g = model.score_gradients(x, target).unwrap();
    let features = |model: &mut CelnetModel, x: &Tensor| {
        let out = model.forward(x).unwrap();
        model.clear_cache();
        let y: f64 = out.logits.data().iter().sum();
        let f = match target {
            GradientTarget::F2 => out.features.f2,
            GradientTarget::F3 => out.features.f3,
            GradientTarget::Input => unreachable!(),
        };
        (y, f)
    };
    let (yp, fp) = features(model, &shifted(x, d, eps));
    let (ym, fm) = features(model, &shifted(x, d, -eps));
    let df: Vec<f64> = fp.data().iter().zip(fm.data()).map(|(a, b)| a - b).collect();
    let df = Tensor::from_vec(fp.shape(), df).unwrap();
    rel_err((yp - ym) / (2.0 * eps), dot(&g, &df) / (2.0 * eps))
}

/// Guided and standard gradients for the same input.
pub fn both_gradients(model: &mut CelnetModel, x: &Tensor) -> (Tensor, Tensor) {
    let out = model.forward(x).unwrap();
    let standard = model.backward_score(out.logits.shape(), BackwardMode::Standard);
    let guided = model.backward_score(out.logits.shape(), BackwardMode::Guided);
    model.clear_cache();
    (standard, guided)
}

/// Counts every pixel of the image against a membership set.
pub fn classify_oracle(component: &Component, gt: &GroundTruthMask) -> Verdict {
    let members: HashSet<(usize, usize)> = component.pixels.iter().copied().collect();
    let (mut tumor, mut normal) = (0usize, 0usize);
    for ((y, x), &t) in gt.0.indexed_iter() {
        if members.contains(&(y, x)) {
            if t {
                tumor += 1;
            } else {
                normal += 1;
            }
        }
    }
    let n = tumor + normal;
    if 4 * tumor >= 3 * n {
        Verdict::TruePositive
    } else if 4 * normal >= 3 * n {
        Verdict::FalsePositive
    } else {
        Verdict::Neither
    }
}

/// Visits cells by descending score (row-major among ties) and accepts a
/// cell when it reaches the floor and lies farther than `radius` from every
/// accepted cell.
pub fn nms_oracle(grid: &Array2<f64>, floor: f64, radius: f64) -> Vec<(usize, usize, f64)> {
    let mut cells: Vec<(usize, usize, f64)> = grid.indexed_iter().map(|((r, c), &v)| (r, c, v)).collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for (r, c, v) in cells {
        if v < floor {
            break;
        }
        let clear = kept.iter().all(|&(kr, kc, _)| {
            let d2 = (kr as f64 - r as f64).powi(2) + (kc as f64 - c as f64).powi(2);
            d2 > radius * radius
        });
        if clear {
            kept.push((r, c, v));
        }
    }
    kept
}

/// Recomputes hits and false positives from scratch at every candidate threshold.
pub fn froc_oracle(detections: &[Vec<TumorDetection>], annotations: &[SlideAnnotation]) -> (Vec<f64>, f64) {
    let total: usize = annotations.iter().map(|a| a.n_regions).sum();
    let mut thresholds: Vec<f64> = detections.iter().flatten().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut hit = HashSet::new();
        let mut fps = 0;
        for (s, dets) in detections.iter().enumerate() {
            for d in dets.iter().filter(|d| d.score >= t) {
                let inside = annotations[s].labels.get([d.row, d.col]).copied().unwrap_or(0);
                if inside > 0 {
                    hit.insert((s, inside));
                } else {
                    fps += 1;
                }
            }
        }
        points.push((fps as f64 / detections.len() as f64, hit.len() as f64 / total as f64));
    }
    let sens: Vec<f64> = FROC_FP_RATES
        .iter()
        .map(|&rate| points.iter().filter(|p| p.0 <= rate).map(|p| p.1).fold(0.0, f64::max))
        .collect();
    let mean = sens.iter().sum::<f64>() / sens.len() as f64;
    (sens, mean)
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Keeps only the score-head weights that read the module-3 average pool,
/// set to `w`, so the logit is linear in F3. Returns the model with `w`.
pub fn linear_head_model(config: CelnetConfig, seed: u64, rng: &mut impl Rng) -> (CelnetModel, Vec<f64>) {
    let mut model = warmed_model(config, seed, rng);
    let c2 = model.config().module_channels[1];
    let c3 = model.config().module_channels[2];
    let w: Vec<f64> = (0..c3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let head = model.score_head_mut();
    head.weight.value.fill(0.0);
    head.weight.value[2 * c2..2 * c2 + c3].copy_from_slice(&w);
    (model, w)
}

/// Closed-form CAM3 of the linear head: every F3 pixel lies in windows whose
/// average pools sum to `cells` cells, so `α_k = w_k · cells / (h · w)`.
pub fn linear_cam_oracle(f3: &Tensor, w: &[f64], cells: usize) -> Array2<f64> {
    let (h, wd, c) = (f3.height(), f3.width(), f3.channels());
    let scale = cells as f64 / (h * wd) as f64;
    Array2::from_shape_fn((h, wd), |(y, x)| {
        (0..c).map(|k| w[k] * scale * f3.at(0, y, x, k)).sum::<f64>().max(0.0)
    })
}

fn fill(mask: &mut Array2<bool>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
    for y in rows {
        for x in cols.clone() {
            mask[[y, x]] = true;
        }
    }
}

/// Ten 32×32 images holding 7 true positives, 2 false positives, one
/// component of neither kind and 10 tumor regions of which 8 are hit.
/// Returns `(evidence masks, ground truth)`.
pub fn planted_localization() -> (Vec<Array2<bool>>, Vec<Array2<bool>>) {
    let blank = || Array2::from_elem((32, 32), false);
    let mut evidence = Vec::new();
    let mut truth = Vec::new();
    // Two regions one pixel apart, covered by one component spanning the gap.
    let (mut e, mut t) = (blank(), blank());
    fill(&mut t, 4..8, 4..8);
    fill(&mut t, 4..8, 9..13);
    fill(&mut e, 4..8, 4..13);
    evidence.push(e);
    truth.push(t);
    for i in 0..6 {
        let (mut e, mut t) = (blank(), blank());
        let o = 2 + 3 * i;
        fill(&mut t, o..o + 8, o..o + 8);
        fill(&mut e, o + 1..o + 7, o + 2..o + 6);
        evidence.push(e);
        truth.push(t);
    }
    // Missed region, a component a third on tumor, and a false positive.
    let (mut e, mut t) = (blank(), blank());
    fill(&mut t, 2..8, 2..8);
    fill(&mut e, 2..8, 6..12);
    fill(&mut e, 20..26, 20..26);
    evidence.push(e);
    truth.push(t);
    let (mut e, mut t) = (blank(), blank());
    fill(&mut t, 2..8, 2..8);
    fill(&mut e, 20..26, 20..26);
    evidence.push(e);
    truth.push(t);
    evidence.push(blank());
    truth.push(blank());
    (evidence, truth)
}

fn detection(row: usize, col: usize, score: f64) -> TumorDetection {
    TumorDetection { row, col, grid_row: row / 10, grid_col: col / 10, score }
}

/// Three 100×100 slides with three tumor regions in total, a duplicate hit
/// and one all-normal slide.
pub fn froc_fixture() -> (Vec<Vec<TumorDetection>>, Vec<SlideAnnotation>) {
    let mut a = Array2::from_elem((100, 100), false);
    fill(&mut a, 10..30, 10..30);
    fill(&mut a, 60..80, 60..80);
    let mut b = Array2::from_elem((100, 100), false);
    fill(&mut b, 40..60, 40..60);
    let annotations = vec![
        SlideAnnotation::from_mask(&a),
        SlideAnnotation::from_mask(&b),
        SlideAnnotation::normal(100, 100),
    ];
    let detections = vec![
        vec![detection(20, 20, 0.9), detection(50, 5, 0.8), detection(70, 70, 0.6), detection(12, 28, 0.3)],
        vec![detection(5, 5, 0.95), detection(50, 50, 0.7), detection(90, 90, 0.4)],
        vec![detection(30, 30, 0.85), detection(80, 10, 0.5)],
    ];
    (detections, annotations)
}
