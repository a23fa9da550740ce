mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use celnet::checkpoint::load_model;
use celnet::data::{
    generate_synthetic, load_localization_dataset, load_patch_dataset, LocalizationDataset, Split, SyntheticSpec,
};
use celnet::explain::{explain, fuse_celm, fuse_cam, normalize_cam, scale_to_unit, ExplainConfig, ExplanationMaps, FusionConfig};
use celnet::imaging::{load_rgb, save_grey_png, save_rgb};
use celnet::localize::{map_to_mask, score_dataset, GroundTruthMask, LocalizationScore, MaskParams};
use celnet::model::CelnetModel;
use celnet::train::{evaluate, fit_with};
use celnet::wsi::{compute_froc, extract_detections, score_slide, slide_score, SlideAnnotation, SlideHeatmap, TumorDetection};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array2, Array3};
use serde::Serialize;
use serde_json::json;

use config::{OutputDir, RunConfig};

#[derive(Parser)]
#[command(name = "celnet", version, about = "Train, explain and localize with CELNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config, or a manifest emitted by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; locked for the duration of the run.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct FusionFlags {
    /// Weight of the module-3 CAM against the module-2 CAM.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of CAM⊙CSM against the plain CAM.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MapKind {
    Celm,
    Cam,
    Csm,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/valid/test patch splits and a localization set.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_valid: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        n_localization: Option<usize>,
        #[arg(long)]
        nucleus_density: Option<f64>,
    },
    /// Train on `{data}/train.npz`, selecting weights by `{data}/valid.npz` loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        aux_loss_weight: Option<f64>,
    },
    /// Accuracy, AUC and loss of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write CAM, CSM and CELM images for localization images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fusion: FusionFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Region-level precision and recall of evidence masks, computed either from
    /// a checkpoint and localization set or from directories of map and mask images.
    Localize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fusion: FusionFlags,
        #[arg(long, required_unless_present = "maps", requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Directory of greyscale map images.
        #[arg(long, conflicts_with = "checkpoint", requires = "masks")]
        maps: Option<PathBuf>,
        /// Directory of 0/255 ground-truth masks named like the maps.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Fraction of the smoothed map's peak a pixel must reach.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "celm")]
        map: MapKind,
    },
    /// Localization precision and recall over an (alpha, beta) grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        betas: Vec<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Heatmap, slide score and detections for one slide.
    WsiInfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slide image file.
        #[arg(long, conflicts_with = "tiles", required_unless_present = "tiles")]
        slide: Option<PathBuf>,
        /// Directory of pre-extracted tiles named `r{row}_c{col}.png`.
        #[arg(long)]
        tiles: Option<PathBuf>,
        #[arg(long)]
        slide_id: Option<String>,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        tissue_threshold: Option<f64>,
        #[arg(long)]
        score_floor: Option<f64>,
        /// Suppression disc radius in heatmap cells.
        #[arg(long)]
        suppression_radius: Option<f64>,
    },
    /// FROC of detection lists against tumor masks.
    Froc {
        #[command(flatten)]
        common: Common,
        /// Detection files written by `wsi-infer`.
        #[arg(long, required = true, num_args = 1..)]
        detections: Vec<PathBuf>,
        /// Directory of `{slide_id}.png` tumor masks; slides without one are normal.
        #[arg(long)]
        annotations: PathBuf,
        /// Extra slide ids to include, for normal slides with no detections.
        #[arg(long, value_delimiter = ',')]
        slides: Vec<String>,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        Ok(cfg)
    }
}

impl FusionFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(a) = self.alpha {
            cfg.explain.fusion.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.explain.fusion.beta = b;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, n_train, n_valid, n_test, n_localization, nucleus_density } => {
            let mut cfg = common.run_config()?;
            set(&mut cfg.splits.train, n_train);
            set(&mut cfg.splits.valid, n_valid);
            set(&mut cfg.splits.test, n_test);
            set(&mut cfg.synthetic.n_localization, n_localization);
            set(&mut cfg.synthetic.nucleus_density, nucleus_density);
            gen_data(&common.out, cfg.resolve()?)
        }
        Command::Train { common, data, epochs, lr, aux_loss_weight } => {
            let mut cfg = common.run_config()?;
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.lr, lr);
            set(&mut cfg.train.aux_loss_weight, aux_loss_weight);
            train(&common.out, &data, cfg.resolve()?)
        }
        Command::Eval { common, checkpoint, data, split } => {
            eval(&common.out, &checkpoint, &data, split, common.run_config()?.resolve()?)
        }
        Command::Explain { common, fusion, checkpoint, data, limit } => {
            let mut cfg = common.run_config()?;
            fusion.apply(&mut cfg);
            explain_cmd(&common.out, &checkpoint, &data, limit, cfg.resolve()?)
        }
        Command::Localize { common, fusion, checkpoint, data, maps, masks, threshold, map } => {
            let mut cfg = common.run_config()?;
            fusion.apply(&mut cfg);
            set(&mut cfg.mask.threshold, threshold);
            let cfg = cfg.resolve()?;
            match (checkpoint, data, maps, masks) {
                (Some(c), Some(d), _, _) => localize(&common.out, &c, &d, map, cfg),
                (_, _, Some(m), Some(g)) => localize_images(&common.out, &m, &g, cfg),
                _ => bail!("give --checkpoint with --data, or --maps with --masks"),
            }
        }
        Command::Sweep { common, checkpoint, data, alphas, betas, threshold } => {
            let mut cfg = common.run_config()?;
            set(&mut cfg.mask.threshold, threshold);
            sweep(&common.out, &checkpoint, &data, &alphas, &betas, cfg.resolve()?)
        }
        Command::WsiInfer {
            common,
            checkpoint,
            slide,
            tiles,
            slide_id,
            tile_size,
            stride,
            tissue_threshold,
            score_floor,
            suppression_radius,
        } => {
            let mut cfg = common.run_config()?;
            set(&mut cfg.tiling.tile_size, tile_size);
            set(&mut cfg.tiling.stride, stride);
            set(&mut cfg.tiling.tissue_threshold, tissue_threshold);
            set(&mut cfg.detection.score_floor, score_floor);
            set(&mut cfg.detection.suppression_radius, suppression_radius);
            let source = match (slide, tiles) {
                (Some(s), _) => SlideSource::Image(s),
                (None, Some(t)) => SlideSource::Tiles(t),
                (None, None) => bail!("one of --slide or --tiles is required"),
            };
            wsi_infer(&common.out, &checkpoint, source, slide_id, cfg.resolve()?)
        }
        Command::Froc { common, detections, annotations, slides } => {
            froc(&common.out, &detections, &annotations, &slides, common.run_config()?.resolve()?)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn open_model(checkpoint: &Path) -> Result<CelnetModel> {
    load_model(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

fn gen_data(out: &Path, cfg: RunConfig) -> Result<()> {
    let dir = OutputDir::acquire(out)?;
    let sizes = [
        (Split::Train, cfg.splits.train),
        (Split::Valid, cfg.splits.valid),
        (Split::Test, cfg.splits.test),
    ];
    let mut counts = BTreeMap::new();
    for (k, (split, n)) in sizes.into_iter().enumerate() {
        let spec = SyntheticSpec {
            n_images: n,
            n_localization: 0,
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.synthetic.clone()
        };
        let (patches, _) = generate_synthetic(&spec, split)?;
        patches.save(&dir.path)?;
        let (neg, pos) = patches.class_balance();
        counts.insert(split.as_str(), json!({ "images": n, "negatives": neg, "positives": pos }));
    }
    let loc_spec = SyntheticSpec { n_images: 0, seed: cfg.seed.wrapping_add(3), ..cfg.synthetic.clone() };
    let (_, loc) = generate_synthetic(&loc_spec, Split::Test)?;
    loc.save(&dir.path)?;
    counts.insert("localization", json!({ "images": loc.len() }));
    dir.write_json("counts.json", &counts)?;
    dir.write_manifest("gen-data", json!({}), &cfg)?;
    Ok(())
}

fn train(out: &Path, data: &Path, cfg: RunConfig) -> Result<()> {
    let train_set = load_patch_dataset(data, Split::Train)?;
    let val_set = load_patch_dataset(data, Split::Valid)?;
    let dir = OutputDir::acquire(out)?;
    let mut model = CelnetModel::build(cfg.model.clone(), cfg.seed)?;
    let outcome = fit_with(&mut model, &train_set, &val_set, &cfg.train, |r| {
        eprintln!(
            "epoch {} lr {:.3e} train_loss {:.6} val_loss {:.6} val_acc {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_accuracy
        );
        Ok(())
    })?;
    outcome.best.save(&dir.file("checkpoint.npz"))?;
    dir.write_jsonl("metrics.jsonl", &outcome.state.history)?;
    dir.write_json("state.json", &outcome.state)?;
    let best = &outcome.state.history[outcome.state.best_epoch];
    dir.write_text(
        "summary.txt",
        &format!(
            "epochs {}\nbest_epoch {}\nbest_val_loss {:.6}\nbest_val_accuracy {:.4}\nbest_val_auc {}\nparameters {}\n",
            outcome.state.epoch,
            outcome.state.best_epoch,
            outcome.state.best_validation_loss,
            best.val_accuracy,
            fmt_opt(best.val_auc),
            model.parameter_count()
        ),
    )?;
    dir.write_manifest("train", json!({ "data": path_str(data) }), &cfg)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

#[derive(Serialize)]
struct EvalReport {
    split: Split,
    n: usize,
    positives: usize,
    accuracy: f64,
    auc: Option<f64>,
    loss: f64,
}

fn eval(out: &Path, checkpoint: &Path, data: &Path, split: Split, cfg: RunConfig) -> Result<()> {
    let set = load_patch_dataset(data, split)?;
    let mut model = open_model(checkpoint)?;
    let dir = OutputDir::acquire(out)?;
    let e = evaluate(&mut model, &set, &cfg.train.objective(), cfg.batch_size)?;
    let report = EvalReport {
        split,
        n: set.len(),
        positives: set.class_balance().1,
        accuracy: e.accuracy,
        auc: e.auc,
        loss: e.loss,
    };
    dir.write_jsonl("metrics.jsonl", &[&report])?;
    dir.write_text(
        "summary.txt",
        &format!("split {split}\nn {}\naccuracy {:.4}\nauc {}\nloss {:.6}\n", report.n, e.accuracy, fmt_opt(e.auc), e.loss),
    )?;
    let inputs = json!({ "checkpoint": path_str(checkpoint), "data": path_str(data), "split": split });
    dir.write_manifest("eval", inputs, &cfg)?;
    Ok(())
}

fn explain_range(
    model: &mut CelnetModel,
    set: &LocalizationDataset,
    n: usize,
    config: &ExplainConfig,
    batch: usize,
) -> Result<Vec<ExplanationMaps>> {
    let idx: Vec<usize> = (0..n).collect();
    let mut maps = Vec::with_capacity(n);
    for chunk in idx.chunks(batch.max(1)) {
        maps.extend(explain(model, &set.tensor(chunk), config)?);
    }
    Ok(maps)
}

fn explain_cmd(out: &Path, checkpoint: &Path, data: &Path, limit: usize, cfg: RunConfig) -> Result<()> {
    let set = load_localization_dataset(data)?;
    let mut model = open_model(checkpoint)?;
    let dir = OutputDir::acquire(out)?;
    let n = limit.min(set.len());
    let maps = explain_range(&mut model, &set, n, &cfg.explain, cfg.batch_size)?;
    let mut records = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        save_grey_png(&dir.file(&format!("{i:04}_cam2.png")), &scale_to_unit(&m.cam2.data))?;
        save_grey_png(&dir.file(&format!("{i:04}_cam3.png")), &scale_to_unit(&m.cam3.data))?;
        save_grey_png(&dir.file(&format!("{i:04}_cam.png")), &m.cam_fused)?;
        save_grey_png(&dir.file(&format!("{i:04}_csm.png")), &m.csm.data)?;
        save_grey_png(&dir.file(&format!("{i:04}_celm.png")), &m.celm)?;
        save_grey_png(&dir.file(&format!("{i:04}_mask.png")), &set.mask(i).mapv(|v| if v { 1.0 } else { 0.0 }))?;
        let image = set.images.index_axis(ndarray::Axis(0), i);
        save_rgb(&dir.file(&format!("{i:04}_overlay.png")), &overlay(image, &m.celm))?;
        records.push(json!({ "index": i, "csm_degenerate": m.csm.degenerate }));
    }
    dir.write_jsonl("maps.jsonl", &records)?;
    let inputs = json!({ "checkpoint": path_str(checkpoint), "data": path_str(data), "limit": limit });
    dir.write_manifest("explain", inputs, &cfg)?;
    Ok(())
}

/// Input blended half and half with a black-red-yellow-white rendering of `heat`.
fn overlay(image: ndarray::ArrayView3<u8>, heat: &Array2<f64>) -> Array3<u8> {
    Array3::from_shape_fn(image.dim(), |(y, x, c)| {
        let v = heat[[y, x]].clamp(0.0, 1.0);
        let colour = (3.0 * v - c as f64).clamp(0.0, 1.0) * 255.0;
        (0.5 * image[[y, x, c]] as f64 + 0.5 * colour).round() as u8
    })
}

fn pick_map(m: &ExplanationMaps, kind: MapKind) -> &Array2<f64> {
    match kind {
        MapKind::Celm => &m.celm,
        MapKind::Cam => &m.cam_fused,
        MapKind::Csm => &m.csm.data,
    }
}

fn score_maps<'a>(
    maps: impl Iterator<Item = &'a Array2<f64>>,
    set: &LocalizationDataset,
    params: &MaskParams,
) -> Result<LocalizationScore> {
    let mut masks = Vec::new();
    let mut gts = Vec::new();
    for (i, map) in maps.enumerate() {
        masks.push(map_to_mask(map, params)?);
        gts.push(GroundTruthMask(set.mask(i)));
    }
    Ok(score_dataset(&masks, &gts)?)
}

fn localize(out: &Path, checkpoint: &Path, data: &Path, kind: MapKind, cfg: RunConfig) -> Result<()> {
    let set = load_localization_dataset(data)?;
    let mut model = open_model(checkpoint)?;
    let dir = OutputDir::acquire(out)?;
    let maps = explain_range(&mut model, &set, set.len(), &cfg.explain, cfg.batch_size)?;
    let score = score_maps(maps.iter().map(|m| pick_map(m, kind)), &set, &cfg.mask)?;
    let record = json!({
        "map": kind,
        "alpha": cfg.explain.fusion.alpha,
        "beta": cfg.explain.fusion.beta,
        "threshold": cfg.mask.threshold,
        "precision": score.precision,
        "recall": score.recall,
        "tally": score.tally,
    });
    dir.write_jsonl("metrics.jsonl", &[record])?;
    dir.write_text(
        "summary.txt",
        &format!("images {}\nprecision {}\nrecall {}\n", set.len(), fmt_opt(score.precision), fmt_opt(score.recall)),
    )?;
    let inputs = json!({ "checkpoint": path_str(checkpoint), "data": path_str(data), "map": kind });
    dir.write_manifest("localize", inputs, &cfg)?;
    Ok(())
}

fn grey_from_png(path: &Path) -> Result<Array2<f64>> {
    let rgb = load_rgb(path)?;
    Ok(rgb.map_axis(ndarray::Axis(2), |p| p[0] as f64 / 255.0))
}

fn localize_images(out: &Path, maps: &Path, masks: &Path, cfg: RunConfig) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(maps)
        .with_context(|| format!("reading maps {}", maps.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("png"));
    names.sort();
    if names.is_empty() {
        bail!("no .png maps in {}", maps.display());
    }
    let mut evidence = Vec::new();
    let mut gts = Vec::new();
    for p in &names {
        let name = p.file_name().unwrap();
        let gt_path = masks.join(name);
        let gt = load_rgb(&gt_path).with_context(|| format!("ground truth for {}", p.display()))?;
        let gt = GroundTruthMask::from_u8(gt.index_axis(ndarray::Axis(2), 0).to_owned())
            .with_context(|| format!("mask {}", gt_path.display()))?;
        evidence.push(map_to_mask(&grey_from_png(p)?, &cfg.mask)?);
        gts.push(gt);
    }
    let score = score_dataset(&evidence, &gts)?;
    let dir = OutputDir::acquire(out)?;
    let record = json!({
        "threshold": cfg.mask.threshold,
        "precision": score.precision,
        "recall": score.recall,
        "tally": score.tally,
    });
    dir.write_jsonl("metrics.jsonl", &[record])?;
    dir.write_text(
        "summary.txt",
        &format!("images {}\nprecision {}\nrecall {}\n", names.len(), fmt_opt(score.precision), fmt_opt(score.recall)),
    )?;
    let inputs = json!({ "maps": path_str(maps), "masks": path_str(masks) });
    dir.write_manifest("localize", inputs, &cfg)?;
    Ok(())
}

fn sweep(out: &Path, checkpoint: &Path, data: &Path, alphas: &[f64], betas: &[f64], cfg: RunConfig) -> Result<()> {
    for &v in alphas.iter().chain(betas) {
        FusionConfig { alpha: v, beta: v }.validate()?;
    }
    let set = load_localization_dataset(data)?;
    let mut model = open_model(checkpoint)?;
    let dir = OutputDir::acquire(out)?;
    let maps = explain_range(&mut model, &set, set.len(), &cfg.explain, cfg.batch_size)?;
    let size = (set.images.dim().1, set.images.dim().2);
    let units: Vec<_> = maps
        .iter()
        .map(|m| {
            if cfg.explain.normalize_cams {
                (normalize_cam(&m.cam2.data), normalize_cam(&m.cam3.data))
            } else {
                (m.cam2.data.clone(), m.cam3.data.clone())
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut table = String::from("alpha\tbeta\tprecision\trecall\n");
    for &alpha in alphas {
        let cams: Vec<Array2<f64>> = units
            .iter()
            .map(|(c2, c3)| fuse_cam(c2, c3, alpha, size))
            .collect::<celnet::Result<_>>()?;
        for &beta in betas {
            let celms: Vec<Array2<f64>> = cams
                .iter()
                .zip(&maps)
                .map(|(c, m)| fuse_celm(c, &m.csm.data, beta))
                .collect::<celnet::Result<_>>()?;
            let score = score_maps(celms.iter(), &set, &cfg.mask)?;
            table.push_str(&format!(
                "{alpha}\t{beta}\t{}\t{}\n",
                fmt_opt(score.precision),
                fmt_opt(score.recall)
            ));
            rows.push(json!({ "alpha": alpha, "beta": beta, "precision": score.precision, "recall": score.recall }));
        }
    }
    dir.write_jsonl("sweep.jsonl", &rows)?;
    dir.write_text("sweep.txt", &table)?;
    let inputs = json!({ "checkpoint": path_str(checkpoint), "data": path_str(data), "alphas": alphas, "betas": betas });
    dir.write_manifest("sweep", inputs, &cfg)?;
    Ok(())
}

enum SlideSource {
    Image(PathBuf),
    Tiles(PathBuf),
}

/// Reassembles `r{row}_c{col}.png` tiles into one image on the configured stride.
fn assemble_tiles(dir: &Path, cfg: &RunConfig) -> Result<Array3<u8>> {
    let t = cfg.tiling.tile_size;
    let mut tiles = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading tile directory {}", dir.display()))? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some((r, c)) = stem.strip_prefix('r').and_then(|s| s.split_once("_c")) else { continue };
        let (r, c): (usize, usize) = (r.parse()?, c.parse()?);
        let img = load_rgb(&path)?;
        if img.dim() != (t, t, 3) {
            bail!("tile {} is {:?}, expected {t}x{t} RGB", path.display(), img.dim());
        }
        tiles.push((r, c, img));
    }
    if tiles.is_empty() {
        bail!("no r{{row}}_c{{col}}.png tiles in {}", dir.display());
    }
    let rows = tiles.iter().map(|t| t.0).max().unwrap() + 1;
    let cols = tiles.iter().map(|t| t.1).max().unwrap() + 1;
    let s = cfg.tiling.stride;
    let mut slide = Array3::from_elem(((rows - 1) * s + t, (cols - 1) * s + t, 3), 255u8);
    for (r, c, img) in tiles {
        slide.slice_mut(s![r * s..r * s + t, c * s..c * s + t, ..]).assign(&img);
    }
    Ok(slide)
}

fn grid_text(grid: &Array2<f64>) -> String {
    let mut text = String::new();
    for row in grid.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    text
}

fn detections_text(slide_id: &str, detections: &[TumorDetection]) -> String {
    let mut text = String::from("slide_id,row,col,score\n");
    for d in detections {
        text.push_str(&format!("{slide_id},{},{},{:.6}\n", d.row, d.col, d.score));
    }
    text
}

fn wsi_infer(out: &Path, checkpoint: &Path, source: SlideSource, slide_id: Option<String>, cfg: RunConfig) -> Result<()> {
    let (slide, input, default_id) = match &source {
        SlideSource::Image(p) => (load_rgb(p)?, path_str(p), p.file_stem().map(|s| s.to_string_lossy().into_owned())),
        SlideSource::Tiles(d) => (assemble_tiles(d, &cfg)?, path_str(d), d.file_name().map(|s| s.to_string_lossy().into_owned())),
    };
    let slide_id = slide_id.or(default_id).unwrap_or_else(|| "slide".into());
    let mut model = open_model(checkpoint)?;
    let dir = OutputDir::acquire(out)?;
    let heatmap: SlideHeatmap = score_slide(&mut model, &slide_id, &slide, &cfg.tiling, cfg.batch_size)?;
    let score = slide_score(&heatmap)?;
    let detections = extract_detections(&heatmap, &cfg.detection)?;
    save_grey_png(&dir.file("heatmap.png"), &heatmap.grid)?;
    dir.write_text("heatmap.txt", &grid_text(&heatmap.grid))?;
    dir.write_text("detections.csv", &detections_text(&slide_id, &detections))?;
    let (rows, cols) = heatmap.grid.dim();
    dir.write_jsonl(
        "metrics.jsonl",
        &[json!({ "slide_id": slide_id, "slide_score": score, "grid_rows": rows, "grid_cols": cols, "detections": detections.len() })],
    )?;
    let inputs = json!({ "checkpoint": path_str(checkpoint), "slide": input, "slide_id": slide_id });
    dir.write_manifest("wsi-infer", inputs, &cfg)?;
    Ok(())
}

fn read_detections(path: &Path, into: &mut BTreeMap<String, Vec<TumorDetection>>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading detections {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("slide_id,row,col,score") {
        bail!("{}: expected header `slide_id,row,col,score`", path.display());
    }
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || format!("{}: malformed detection on line {}", path.display(), n + 2);
        if fields.len() != 4 {
            bail!(bad());
        }
        let row = fields[1].parse().with_context(bad)?;
        let col = fields[2].parse().with_context(bad)?;
        let score = fields[3].parse().with_context(bad)?;
        into.entry(fields[0].to_string())
            .or_default()
            .push(TumorDetection { row, col, grid_row: 0, grid_col: 0, score });
    }
    Ok(())
}

fn froc(out: &Path, detection_files: &[PathBuf], annotations: &Path, extra: &[String], cfg: RunConfig) -> Result<()> {
    let mut per_slide: BTreeMap<String, Vec<TumorDetection>> = BTreeMap::new();
    for f in detection_files {
        read_detections(f, &mut per_slide)?;
    }
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(annotations).with_context(|| format!("reading annotations {}", annotations.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let id = path.file_stem().unwrap().to_string_lossy().into_owned();
        let rgb = load_rgb(&path)?;
        let mask = rgb.map_axis(ndarray::Axis(2), |p| p.iter().any(|&v| v > 0));
        masks.insert(id, mask);
    }
    let mut ids: Vec<String> = per_slide.keys().chain(masks.keys()).cloned().collect();
    ids.extend(extra.iter().cloned());
    ids.sort();
    ids.dedup();
    let dets: Vec<Vec<TumorDetection>> = ids.iter().map(|id| per_slide.get(id).cloned().unwrap_or_default()).collect();
    let anns: Vec<SlideAnnotation> = ids
        .iter()
        .map(|id| masks.get(id).map_or_else(|| SlideAnnotation::normal(0, 0), SlideAnnotation::from_mask))
        .collect();
    let result = compute_froc(&dets, &anns)?;
    let dir = OutputDir::acquire(out)?;
    dir.write_jsonl("metrics.jsonl", &[&result])?;
    let mut summary = format!("slides {}\nfroc {:.6}\n", ids.len(), result.froc_score);
    for (r, s) in result.fp_rates.iter().zip(&result.sensitivities) {
        summary.push_str(&format!("sensitivity@{r} {s:.6}\n"));
    }
    dir.write_text("summary.txt", &summary)?;
    let files: Vec<String> = detection_files.iter().map(|p| path_str(p)).collect();
    let inputs = json!({ "detections": files, "annotations": path_str(annotations), "slides": ids });
    dir.write_manifest("froc", inputs, &cfg)?;
    Ok(())
}
