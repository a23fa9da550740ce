//! Slide tiling, heatmaps, detection extraction and FROC scoring.

use std::collections::HashSet;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::images_to_tensor;
use crate::error::{Error, Result};
use crate::localize::connected_components;
use crate::model::CelnetModel;

/// Mean false positives per slide at which FROC sensitivities are read.
pub const FROC_FP_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const TISSUE_SATURATION: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingParams {
    pub tile_size: usize,
    pub stride: usize,
    /// Minimum fraction of tissue pixels for a tile to be scored.
    pub tissue_threshold: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams { tile_size: 96, stride: 96, tissue_threshold: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub grid_row: usize,
    pub grid_col: usize,
    /// Top-left pixel of the tile in slide coordinates.
    pub y: usize,
    pub x: usize,
    pub patch: Array3<u8>,
}

/// HSV saturation of one RGB pixel.
pub fn saturation(rgb: [u8; 3]) -> f64 {
    let max = *rgb.iter().max().unwrap() as f64;
    let min = *rgb.iter().min().unwrap() as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

pub fn tissue_fraction(patch: ArrayView3<u8>) -> f64 {
    let (h, w, _) = patch.dim();
    let tissue = patch
        .lanes(Axis(2))
        .into_iter()
        .filter(|p| saturation([p[0], p[1], p[2]]) > TISSUE_SATURATION)
        .count();
    tissue as f64 / (h * w) as f64
}

/// `(rows, cols)` of the regular tile grid.
pub fn grid_shape(height: usize, width: usize, params: &TilingParams) -> Result<(usize, usize)> {
    if params.tile_size == 0 || params.stride == 0 {
        return Err(Error::Config("tile_size and stride must be positive".into()));
    }
    if height < params.tile_size || width < params.tile_size {
        return Err(Error::Input(format!(
            "slide {height}x{width} is smaller than one {} px tile",
            params.tile_size
        )));
    }
    Ok((
        (height - params.tile_size) / params.stride + 1,
        (width - params.tile_size) / params.stride + 1,
    ))
}

/// Tiles on a regular grid, skipping those below the tissue threshold.
pub fn tile_slide(slide: &Array3<u8>, params: &TilingParams) -> Result<Vec<Tile>> {
    let (h, w, c) = slide.dim();
    if c != 3 {
        return Err(Error::Input(format!("slide must be RGB, got {c} channels")));
    }
    let (rows, cols) = grid_shape(h, w, params)?;
    let t = params.tile_size;
    let mut tiles = Vec::new();
    for r in 0..rows {
        for col in 0..cols {
            let (y, x) = (r * params.stride, col * params.stride);
            let patch = slide.slice(s![y..y + t, x..x + t, ..]);
            if tissue_fraction(patch) < params.tissue_threshold {
                continue;
            }
            tiles.push(Tile { grid_row: r, grid_col: col, y, x, patch: patch.to_owned() });
        }
    }
    Ok(tiles)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideHeatmap {
    pub slide_id: String,
    /// Patch probabilities; skipped background tiles hold 0.
    pub grid: Array2<f64>,
    pub tile_size: usize,
    pub stride: usize,
}

impl SlideHeatmap {
    /// Slide coordinates of the center of grid cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> (usize, usize) {
        (r * self.stride + self.tile_size / 2, c * self.stride + self.tile_size / 2)
    }
}

/// Scores every tissue tile with the model in eval mode.
pub fn score_slide(
    model: &mut CelnetModel,
    slide_id: &str,
    slide: &Array3<u8>,
    params: &TilingParams,
    batch_size: usize,
) -> Result<SlideHeatmap> {
    let (rows, cols) = grid_shape(slide.dim().0, slide.dim().1, params)?;
    let tiles = tile_slide(slide, params)?;
    let previous = model.mode();
    model.set_mode(crate::nn::Mode::Eval);
    let mut grid = Array2::zeros((rows, cols));
    let t = params.tile_size;
    for chunk in tiles.chunks(batch_size.max(1)) {
        let mut batch = Array4::<u8>::zeros((chunk.len(), t, t, 3));
        for (i, tile) in chunk.iter().enumerate() {
            batch.index_axis_mut(Axis(0), i).assign(&tile.patch);
        }
        let scores = model.predict(&images_to_tensor(batch.view()));
        let scores = match scores {
            Ok(s) => s,
            Err(e) => {
                model.set_mode(previous);
                return Err(e);
            }
        };
        for (tile, s) in chunk.iter().zip(scores) {
            grid[[tile.grid_row, tile.grid_col]] = s.probability;
        }
    }
    model.set_mode(previous);
    Ok(SlideHeatmap { slide_id: slide_id.to_string(), grid, tile_size: t, stride: params.stride })
}

/// Maximum patch probability.
pub fn slide_score(heatmap: &SlideHeatmap) -> Result<f64> {
    if heatmap.grid.is_empty() {
        return Err(Error::Input("empty heatmap".into()));
    }
    Ok(heatmap.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorDetection {
    /// Slide coordinates of the detecting tile's center.
    pub row: usize,
    pub col: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub score_floor: f64,
    /// Disc radius in grid cells.
    pub suppression_radius: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams { score_floor: 0.5, suppression_radius: 8.0 }
    }
}

/// Greedy non-maximum suppression. Repeatedly takes the global maximum (first
/// in row-major order on ties) while it reaches the floor, then suppresses every
/// cell within `suppression_radius` of it. Scores come out non-increasing.
pub fn extract_detections(heatmap: &SlideHeatmap, params: &DetectionParams) -> Result<Vec<TumorDetection>> {
    if !(params.suppression_radius > 0.0) {
        return Err(Error::Config(format!(
            "suppression_radius must be positive, got {}",
            params.suppression_radius
        )));
    }
    let mut grid = heatmap.grid.clone();
    let (rows, cols) = grid.dim();
    let r2 = params.suppression_radius * params.suppression_radius;
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for ((r, c), &v) in grid.indexed_iter() {
            if best.map_or(true, |(_, _, b)| v > b) {
                best = Some((r, c, v));
            }
        }
        let Some((br, bc, score)) = best else { break };
        if !(score >= params.score_floor) {
            break;
        }
        let (row, col) = heatmap.cell_center(br, bc);
        out.push(TumorDetection { row, col, grid_row: br, grid_col: bc, score });
        let reach = params.suppression_radius.floor() as usize;
        for r in br.saturating_sub(reach)..(br + reach + 1).min(rows) {
            for c in bc.saturating_sub(reach)..(bc + reach + 1).min(cols) {
                let d2 = (r as f64 - br as f64).powi(2) + (c as f64 - bc as f64).powi(2);
                if d2 <= r2 {
                    grid[[r, c]] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok(out)
}

/// Tumor regions of one slide as a label image (0 = normal, k = region k).
#[derive(Clone, Debug, PartialEq)]
pub struct SlideAnnotation {
    pub labels: Array2<u32>,
    pub n_regions: usize,
}

impl SlideAnnotation {
    pub fn normal(height: usize, width: usize) -> Self {
        SlideAnnotation { labels: Array2::zeros((height, width)), n_regions: 0 }
    }

    /// Each 8-connected tumor component becomes one region.
    pub fn from_mask(mask: &Array2<bool>) -> Self {
        let mut labels = Array2::zeros(mask.dim());
        let comps = connected_components(mask);
        for (k, comp) in comps.iter().enumerate() {
            for &(y, x) in &comp.pixels {
                labels[[y, x]] = k as u32 + 1;
            }
        }
        SlideAnnotation { labels, n_regions: comps.len() }
    }

    /// Region containing the point, if any; points off the slide hit nothing.
    pub fn region_at(&self, row: usize, col: usize) -> Option<u32> {
        self.labels.get([row, col]).copied().filter(|&l| l > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub fp_rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub froc_score: f64,
    /// `(mean FP per slide, sensitivity)` after each distinct score threshold.
    pub curve: Vec<(f64, f64)>,
}

/// Sweeps every distinct detection score as a threshold. A detection whose
/// center lies in a tumor region hits it; one outside every region is a false
/// positive; repeat hits on a region count as neither. The sensitivity at each
/// FP rate is the best reached with mean FP per slide not above that rate.
pub fn compute_froc(detections: &[Vec<TumorDetection>], annotations: &[SlideAnnotation]) -> Result<FrocResult> {
    if detections.len() != annotations.len() {
        return Err(Error::Input(format!(
            "{} detection lists for {} annotated slides",
            detections.len(),
            annotations.len()
        )));
    }
    let total: usize = annotations.iter().map(|a| a.n_regions).sum();
    if total == 0 {
        return Err(Error::Input("FROC needs at least one tumor region".into()));
    }
    let n_slides = annotations.len() as f64;
    let mut all: Vec<(f64, usize, Option<u32>)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, dets)| {
            dets.iter().map(move |d| (d.score, s, annotations[s].region_at(d.row, d.col)))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hit: HashSet<(usize, u32)> = HashSet::new();
    let mut fps = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            match all[i].2 {
                Some(region) => {
                    hit.insert((all[i].1, region));
                }
                None => fps += 1,
            }
            i += 1;
        }
        curve.push((fps as f64 / n_slides, hit.len() as f64 / total as f64));
    }
    let sensitivities: Vec<f64> = FROC_FP_RATES
        .iter()
        .map(|&rate| {
            curve
                .iter()
                .filter(|(fp, _)| *fp <= rate)
                .map(|&(_, s)| s)
                .fold(0.0, f64::max)
        })
        .collect();
    let froc_score = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    Ok(FrocResult { fp_rates: FROC_FP_RATES.to_vec(), sensitivities, froc_score, curve })
}
