//! Runs every acceptance criterion and prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use celnet::data::{generate_synthetic, LocalizationDataset, PatchDataset, Split, SyntheticSpec};
use celnet::explain::{compute_cam, compute_cams, explain, fuse_cam, fuse_celm, CamLayer, ExplainConfig};
use celnet::localize::{
    classify_component, connected_components, map_to_mask, score_dataset, EvidenceMask, GroundTruthMask,
    LocalizationScore, MaskParams,
};
use celnet::metrics::roc_auc;
use celnet::model::{CelnetConfig, CelnetModel, GradientTarget};
use celnet::train::{evaluate, fit, TrainConfig};
use celnet::wsi::{compute_froc, score_slide, slide_score, TilingParams};
use common::*;
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn architecture() -> Outcome {
    let mut model = CelnetModel::build(CelnetConfig::default(), 0).map_err(|e| e.to_string())?;
    let params = model.parameter_count();
    let x = celnet::tensor::Tensor::zeros([1, 96, 96, 3]);
    let out = model.forward(&x).map_err(|e| e.to_string())?;
    let (f2, f3) = (out.features.f2.shape(), out.features.f3.shape());
    let ok = (280_000..=320_000).contains(&params) && f2[1..3] == [48, 48] && f3[1..3] == [24, 24];
    check(ok, format!("{params} parameters, F2 {}x{}, F3 {}x{}", f2[1], f2[2], f3[1], f3[2]))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_input, mut worst_feature): (f64, f64) = (0.0, 0.0);
    let cases = 20;
    for case in 0..cases {
        let mut model = warmed_model(small_config(), 1000 + case, &mut rng);
        let x = random_images(&mut rng, 1, 32);
        let d = random_direction(&mut rng, x.shape());
        worst_input = worst_input.max(input_gradient_error(&mut model, &x, &d, 1e-6));
        worst_feature = worst_feature.max(feature_gradient_error(&mut model, &x, &d, 1e-6, GradientTarget::F2));
        let c2 = 2 * model.config().module_channels[1];
        model.score_head_mut().weight.value[..c2].fill(0.0);
        worst_feature = worst_feature.max(feature_gradient_error(&mut model, &x, &d, 1e-6, GradientTarget::F3));
    }
    check(
        worst_input < 1e-2 && worst_feature < 1e-2,
        format!("{cases} cases, worst relative error input {worst_input:.2e}, CAM weights {worst_feature:.2e}"),
    )
}

fn explanation_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = warmed_model(small_config(), 3, &mut rng);
    let (mut negative, mut endpoint, mut over) = (0usize, 0usize, 0usize);
    let config = ExplainConfig::default();
    for _ in 0..10 {
        let x = random_images(&mut rng, 10, 32);
        for (cam2, cam3) in compute_cams(&mut model, &x).map_err(|e| e.to_string())? {
            negative += cam2.data.iter().chain(cam3.data.iter()).filter(|&&v| v < 0.0).count();
        }
        for m in explain(&mut model, &x, &config).map_err(|e| e.to_string())? {
            let up2 = celnet::imaging::bilinear_resize(&m.cam2.data, 32, 32);
            let up3 = celnet::imaging::bilinear_resize(&m.cam3.data, 32, 32);
            let e = |r: celnet::Result<Array2<f64>>, want: &Array2<f64>| usize::from(r.ok().as_ref() != Some(want));
            endpoint += e(fuse_cam(&m.cam2.data, &m.cam3.data, 0.0, (32, 32)), &up2);
            endpoint += e(fuse_cam(&m.cam2.data, &m.cam3.data, 1.0, (32, 32)), &up3);
            endpoint += e(fuse_celm(&m.cam_fused, &m.csm.data, 0.0), &m.cam_fused);
            endpoint += e(fuse_celm(&m.cam_fused, &m.csm.data, 1.0), &(&m.cam_fused * &m.csm.data));
            for beta in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
                let celm = fuse_celm(&m.cam_fused, &m.csm.data, beta).map_err(|e| e.to_string())?;
                over += celm.iter().zip(&m.cam_fused).filter(|(c, f)| c > f).count();
            }
        }
    }
    check(
        negative == 0 && endpoint == 0 && over == 0,
        format!("100 inputs: {negative} negative CAM pixels, {endpoint} endpoint mismatches, {over} CELM > CAM pixels"),
    )
}

fn linear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for (case, size) in [(0, 32), (1, 32), (2, 48), (3, 64)] {
        let (mut model, w) = linear_head_model(small_config(), 400 + case, &mut rng);
        let x = random_images(&mut rng, 1, size);
        let (gh, gw) = model.logit_grid(size, size);
        let f3 = model.forward(&x).map_err(|e| e.to_string())?.features.f3;
        model.clear_cache();
        let cam = compute_cam(&mut model, &x, CamLayer::Module3).map_err(|e| e.to_string())?;
        let oracle = linear_cam_oracle(&f3, &w, gh * gw);
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (a, b) in cam.data.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    check(worst < 1e-5, format!("4 inputs, worst relative deviation {worst:.2e}"))
}

fn evidence(data: Array2<bool>) -> EvidenceMask {
    EvidenceMask { components: connected_components(&data), data }
}

fn localization_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut components, mut mismatches) = (0usize, 0usize);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let (pg, pe) = (rng.gen_range(0.0..1.0), rng.gen_range(0.1..0.7));
        let gt = GroundTruthMask(Array2::from_shape_fn((h, w), |_| rng.gen_bool(pg)));
        let ev = Array2::from_shape_fn((h, w), |_| rng.gen_bool(pe));
        for c in connected_components(&ev) {
            components += 1;
            mismatches += usize::from(classify_component(&c, &gt) != classify_oracle(&c, &gt));
        }
    }
    let (ev, gt) = planted_localization();
    let masks: Vec<_> = ev.into_iter().map(evidence).collect();
    let gts: Vec<_> = gt.into_iter().map(GroundTruthMask).collect();
    let score = score_dataset(&masks, &gts).map_err(|e| e.to_string())?;
    let p = score.precision.unwrap_or(f64::NAN);
    let r = score.recall.unwrap_or(f64::NAN);
    check(
        mismatches == 0 && (p - 7.0 / 9.0).abs() < 1e-9 && r == 0.8,
        format!("{mismatches} oracle mismatches over {components} components; planted precision {p:.9}, recall {r}"),
    )
}

fn synthetic(n: usize, n_loc: usize, seed: u64, split: Split) -> (PatchDataset, LocalizationDataset) {
    let spec = SyntheticSpec { n_images: n, n_localization: n_loc, seed, ..Default::default() };
    generate_synthetic(&spec, split).expect("valid synthetic spec")
}

fn reduced_model(attention: bool) -> CelnetConfig {
    CelnetConfig {
        module_channels: [8, 16, 32],
        blocks_per_module: 1,
        head_channels: 8,
        attention,
        ..Default::default()
    }
}

fn reduced_training(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.02,
        lr_halving_epochs: vec![1],
        seed,
        ..Default::default()
    }
}

fn localize_celm(model: &mut CelnetModel, set: &LocalizationDataset) -> celnet::Result<LocalizationScore> {
    let config = ExplainConfig::default();
    let mut masks = Vec::new();
    let mut gts = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(32) {
        for (m, &i) in explain(model, &set.tensor(chunk), &config)?.iter().zip(chunk) {
            masks.push(map_to_mask(&m.celm, &MaskParams::default())?);
            gts.push(GroundTruthMask(set.mask(i)));
        }
    }
    score_dataset(&masks, &gts)
}

const E2E_SEED: u64 = 2024;

/// Trains the reduced network on the separable synthetic task; shared with the slide criterion.
fn end_to_end(trained: &mut Option<(CelnetModel, PatchDataset)>) -> Outcome {
    let (train, _) = synthetic(5000, 0, E2E_SEED, Split::Train);
    let (val, _) = synthetic(500, 0, E2E_SEED + 1, Split::Valid);
    let (test, _) = synthetic(1000, 0, E2E_SEED + 2, Split::Test);
    let (_, loc) = synthetic(0, 200, E2E_SEED + 3, Split::Test);
    let mut model = CelnetModel::build(reduced_model(true), E2E_SEED).map_err(|e| e.to_string())?;
    let config = reduced_training(2, E2E_SEED);
    fit(&mut model, &train, &val, &config).map_err(|e| e.to_string())?;
    let eval = evaluate(&mut model, &test, &config.objective(), 64).map_err(|e| e.to_string())?;
    let auc = eval.auc.unwrap_or(0.0);
    let score = localize_celm(&mut model, &loc).map_err(|e| e.to_string())?;
    let (p, r) = (score.precision.unwrap_or(0.0), score.recall.unwrap_or(0.0));
    *trained = Some((model, test));
    check(
        eval.accuracy >= 0.95 && auc >= 0.98 && p >= 0.80 && r >= 0.70,
        format!(
            "2 epochs; test accuracy {:.4}, AUC {auc:.4}; CELM precision {p:.4}, recall {r:.4}",
            eval.accuracy
        ),
    )
}

fn ablation() -> Outcome {
    let mut diffs = Vec::new();
    let mut detail = Vec::new();
    for seed in [11u64, 12, 13] {
        let (train, _) = synthetic(1000, 0, seed, Split::Train);
        let (val, _) = synthetic(200, 0, seed + 100, Split::Valid);
        let (_, loc) = synthetic(0, 100, seed + 200, Split::Test);
        let mut precision = [0.0; 2];
        for (slot, attention) in [(0, true), (1, false)] {
            let mut model = CelnetModel::build(reduced_model(attention), seed).map_err(|e| e.to_string())?;
            fit(&mut model, &train, &val, &reduced_training(1, seed)).map_err(|e| e.to_string())?;
            precision[slot] = localize_celm(&mut model, &loc).map_err(|e| e.to_string())?.precision.unwrap_or(0.0);
        }
        diffs.push(precision[1] - precision[0]);
        detail.push(format!("seed {seed} on {:.3} off {:.3}", precision[0], precision[1]));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let allowance = (2.0 * sd / n.sqrt()).max(0.01);
    check(
        mean <= allowance,
        format!("{}; mean excess without attention {mean:.4} vs allowance {allowance:.4}", detail.join(", ")),
    )
}

fn pipeline(trained: &mut Option<(CelnetModel, PatchDataset)>) -> Outcome {
    let (model, test) = trained.as_mut().ok_or("needs the end-to-end model, which failed to train")?;
    let t = test.image_size();
    let positive = (0..test.len()).find(|&i| test.labels[i] == 1).ok_or("no positive test patch")?;
    let patch = test.images.index_axis(Axis(0), positive).to_owned();
    let alone = model.predict(&test.tensor(&[positive])).map_err(|e| e.to_string())?[0].probability;
    let negatives: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == 0).take(9).collect();
    let mut slide = Array3::<u8>::zeros((3 * t, 3 * t, 3));
    for (k, &i) in negatives.iter().enumerate() {
        let (r, c) = (k / 3, k % 3);
        slide.slice_mut(s![r * t..(r + 1) * t, c * t..(c + 1) * t, ..]).assign(&test.images.index_axis(Axis(0), i));
    }
    slide.slice_mut(s![t..2 * t, t..2 * t, ..]).assign(&patch);
    let params = TilingParams { tile_size: t, stride: t, tissue_threshold: 0.1 };
    let heatmap = score_slide(model, "pasted", &slide, &params, 16).map_err(|e| e.to_string())?;
    let slide_prob = slide_score(&heatmap).map_err(|e| e.to_string())?;

    let (detections, annotations) = froc_fixture();
    let result = compute_froc(&detections, &annotations).map_err(|e| e.to_string())?;
    let (sens, mean) = froc_oracle(&detections, &annotations);
    let exact = result.sensitivities == sens && result.froc_score == mean;
    check(
        (slide_prob - alone).abs() <= 0.05 && exact,
        format!(
            "slide score {slide_prob:.4} vs patch {alone:.4}; FROC {:.6} vs oracle {mean:.6} ({})",
            result.froc_score,
            if exact { "exact" } else { "differs" }
        ),
    )
}

fn auc_engine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for case in 0..300 {
        let n = rng.gen_range(2..=1000);
        let levels = [4, 50, 1_000_000][case % 3];
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.ok_or("undefined AUC")?;
        worst = worst.max((auc - mann_whitney(&scores, &labels)).abs());
    }
    check(worst < 1e-9, format!("300 score sets, worst deviation {worst:.2e}"))
}

const TINY_CONFIG: &str = r#"{
  "seed": 5,
  "model": { "input_size": 32, "module_channels": [8, 12, 16], "blocks_per_module": 1, "head_channels": 8 },
  "train": { "epochs": 2, "batch_size": 8, "lr": 0.02, "lr_halving_epochs": [1] },
  "synthetic": { "image_size": 32, "blob_radius_range": [4.0, 7.0], "n_localization": 4 },
  "splits": { "train": 48, "valid": 16, "test": 16 },
  "batch_size": 8
}"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_celnet")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline_run(root: &Path, name: &str, config: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(name).join(s).to_str().unwrap().to_string();
    let cfg = config.to_str().unwrap();
    cli(&["gen-data", "--config", cfg, "--out", &p("data")])?;
    cli(&["train", "--config", cfg, "--data", &p("data"), "--out", &p("train")])?;
    let ck = p("train/checkpoint.npz");
    cli(&["eval", "--config", cfg, "--checkpoint", &ck, "--data", &p("data"), "--out", &p("eval")])?;
    let loc = p("data/localization.npz");
    cli(&["localize", "--config", cfg, "--checkpoint", &ck, "--data", &loc, "--out", &p("localize")])
}

const METRIC_FILES: [&str; 9] = [
    "data/counts.json",
    "train/metrics.jsonl",
    "train/state.json",
    "train/summary.txt",
    "train/checkpoint.npz",
    "eval/metrics.jsonl",
    "eval/summary.txt",
    "localize/metrics.jsonl",
    "localize/summary.txt",
];

fn determinism() -> Outcome {
    let (train, _) = synthetic(64, 0, 21, Split::Train);
    let (val, _) = synthetic(16, 0, 22, Split::Valid);
    let epoch0 = || -> Result<f64, String> {
        let mut model = CelnetModel::build(reduced_model(true), 21).map_err(|e| e.to_string())?;
        let out = fit(&mut model, &train, &val, &TrainConfig { batch_size: 16, ..reduced_training(1, 21) })
            .map_err(|e| e.to_string())?;
        Ok(out.state.history[0].train_loss)
    };
    let (a, b) = (epoch0()?, epoch0()?);

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let config = root.join("config.json");
    fs::write(&config, TINY_CONFIG).map_err(|e| e.to_string())?;
    pipeline_run(root, "first", &config)?;
    pipeline_run(root, "second", &config)?;
    pipeline_run(root, "replay", &root.join("first/train/manifest.json"))?;
    let mut differing = Vec::new();
    for run in ["second", "replay"] {
        for f in METRIC_FILES {
            let x = fs::read(root.join("first").join(f)).map_err(|e| format!("{f}: {e}"))?;
            let y = fs::read(root.join(run).join(f)).map_err(|e| format!("{f}: {e}"))?;
            if x != y {
                differing.push(format!("{run}/{f}"));
            }
        }
    }
    check(
        a.to_bits() == b.to_bits() && differing.is_empty(),
        format!(
            "epoch-0 loss {a:.12} vs {b:.12}; {} metric files compared across 3 runs, differing: {}",
            METRIC_FILES.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

fn main() -> ExitCode {
    let mut trained = None;
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    };
    run(1, "architecture fidelity", &mut architecture);
    run(2, "gradient suite", &mut gradient_suite);
    run(3, "explanation algebra", &mut explanation_algebra);
    run(4, "linear-model oracle", &mut linear_oracle);
    run(5, "localization protocol", &mut localization_protocol);
    run(6, "end-to-end synthetic", &mut || end_to_end(&mut trained));
    run(7, "ablation direction", &mut ablation);
    run(8, "slide pipeline", &mut || pipeline(&mut trained));
    run(9, "AUC engine", &mut auc_engine);
    run(10, "determinism", &mut determinism);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
