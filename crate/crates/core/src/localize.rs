//! Evidence masks from explanation maps and the region-level scoring protocol.
//!
//! A predicted component is a true positive when at least 75% of its pixels
//! lie on tumor, a false positive when at least 75% lie on normal tissue, and
//! neither otherwise. Precision counts only TP and FP components; recall is the
//! fraction of ground-truth tumor regions touched by some TP component.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::gaussian_smooth;

pub const OVERLAP_RULE: f64 = 0.75;

/// One 8-connected set of pixels, stored as `(row, col)` in row-major discovery order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len().max(1) as f64;
        let (sy, sx) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64, b + x as f64));
        (sy / n, sx / n)
    }
}

/// 8-connected components of the `true` pixels.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            seen[[y, x]] = true;
            queue.push_back((y, x));
            let mut pixels = Vec::new();
            while let Some((cy, cx)) = queue.pop_front() {
                pixels.push((cy, cx));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let ny = cy as isize + dy;
                        let nx = cx as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(Component { pixels });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceMask {
    pub data: Array2<bool>,
    pub components: Vec<Component>,
}

impl EvidenceMask {
    pub fn empty(h: usize, w: usize) -> Self {
        EvidenceMask { data: Array2::from_elem((h, w), false), components: Vec::new() }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Binary tumor annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMask(pub Array2<bool>);

impl GroundTruthMask {
    /// Accepts 0/1 or 0/255 encodings; anything else is rejected.
    pub fn from_u8(values: Array2<u8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| !matches!(v, 0 | 1 | 255)) {
            return Err(Error::Input(format!("ground-truth mask has non-binary value {bad}")));
        }
        Ok(GroundTruthMask(values.mapv(|v| v != 0)))
    }

    pub fn regions(&self) -> Vec<Component> {
        connected_components(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    /// Fraction of the smoothed map's maximum a pixel must reach.
    pub threshold: f64,
    pub smooth_sigma: f64,
    pub min_area: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams { threshold: 0.5, smooth_sigma: 1.0, min_area: 16 }
    }
}

/// Smooth, threshold relative to the peak, keep components of at least `min_area` pixels.
pub fn map_to_mask(map: &Array2<f64>, params: &MaskParams) -> Result<EvidenceMask> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("explanation map contains non-finite values".into()));
    }
    let (h, w) = map.dim();
    let smoothed = gaussian_smooth(map, params.smooth_sigma);
    let peak = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Ok(EvidenceMask::empty(h, w));
    }
    let cut = params.threshold * peak;
    let binary = smoothed.mapv(|v| v > 0.0 && v >= cut);
    let components: Vec<Component> = connected_components(&binary)
        .into_iter()
        .filter(|c| c.area() >= params.min_area)
        .collect();
    let mut data = Array2::from_elem((h, w), false);
    for c in &components {
        for &(y, x) in &c.pixels {
            data[[y, x]] = true;
        }
    }
    Ok(EvidenceMask { data, components })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
    Neither,
}

pub fn classify_component(component: &Component, gt: &GroundTruthMask) -> Verdict {
    let total = component.area();
    if total == 0 {
        return Verdict::Neither;
    }
    let tumor = component.pixels.iter().filter(|&&(y, x)| gt.0[[y, x]]).count();
    let tumor_frac = tumor as f64 / total as f64;
    let normal_frac = (total - tumor) as f64 / total as f64;
    if tumor_frac >= OVERLAP_RULE {
        Verdict::TruePositive
    } else if normal_frac >= OVERLAP_RULE {
        Verdict::FalsePositive
    } else {
        Verdict::Neither
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationTally {
    pub true_positives: usize,
    pub false_positives: usize,
    pub neither: usize,
    pub gt_regions_hit: usize,
    pub gt_regions_total: usize,
}

impl LocalizationTally {
    pub fn precision(&self) -> Option<f64> {
        let denom = self.true_positives + self.false_positives;
        (denom > 0).then(|| self.true_positives as f64 / denom as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.gt_regions_total > 0).then(|| self.gt_regions_hit as f64 / self.gt_regions_total as f64)
    }

    fn absorb(&mut self, other: LocalizationTally) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.neither += other.neither;
        self.gt_regions_hit += other.gt_regions_hit;
        self.gt_regions_total += other.gt_regions_total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    /// Absent when no component was a TP or FP.
    pub precision: Option<f64>,
    /// Absent when there are no ground-truth tumor regions.
    pub recall: Option<f64>,
    pub tally: LocalizationTally,
}

pub fn score_image(mask: &EvidenceMask, gt: &GroundTruthMask) -> Result<LocalizationTally> {
    if mask.data.dim() != gt.0.dim() {
        return Err(Error::Shape(format!(
            "evidence mask {:?} vs ground truth {:?}",
            mask.data.dim(),
            gt.0.dim()
        )));
    }
    let regions = gt.regions();
    let (h, w) = gt.0.dim();
    let mut region_of = Array2::from_elem((h, w), usize::MAX);
    for (i, r) in regions.iter().enumerate() {
        for &(y, x) in &r.pixels {
            region_of[[y, x]] = i;
        }
    }
    let mut hit = vec![false; regions.len()];
    let mut tally = LocalizationTally { gt_regions_total: regions.len(), ..Default::default() };
    for c in &mask.components {
        match classify_component(c, gt) {
            Verdict::TruePositive => {
                tally.true_positives += 1;
                for &(y, x) in &c.pixels {
                    let r = region_of[[y, x]];
                    if r != usize::MAX {
                        hit[r] = true;
                    }
                }
            }
            Verdict::FalsePositive => tally.false_positives += 1,
            Verdict::Neither => tally.neither += 1,
        }
    }
    tally.gt_regions_hit = hit.iter().filter(|&&h| h).count();
    Ok(tally)
}

pub fn score_dataset(masks: &[EvidenceMask], gts: &[GroundTruthMask]) -> Result<LocalizationScore> {
    if masks.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} evidence masks but {} ground-truth masks",
            masks.len(),
            gts.len()
        )));
    }
    let mut tally = LocalizationTally::default();
    for (m, g) in masks.iter().zip(gts) {
        tally.absorb(score_image(m, g)?);
    }
    Ok(LocalizationScore {
        precision: tally.precision(),
        recall: tally.recall(),
        tally,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
    }

    #[test]
    fn uniform_map_is_one_component() {
        let m = map_to_mask(&Array2::from_elem((20, 20), 1.0), &MaskParams::default()).unwrap();
        assert_eq!(m.components.len(), 1);
        assert_eq!(m.area(), 400);
    }

    #[test]
    fn zero_map_is_empty() {
        let m = map_to_mask(&Array2::zeros((20, 20)), &MaskParams::default()).unwrap();
        assert!(m.components.is_empty());
    }

    #[test]
    fn rejects_non_finite_maps() {
        let mut map = Array2::zeros((4, 4));
        map[[1, 1]] = f64::NAN;
        assert!(map_to_mask(&map, &MaskParams::default()).is_err());
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let mut m = Array2::from_elem((3, 3), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        m[[2, 0]] = true;
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn verdicts() {
        let gt = GroundTruthMask(square(10, 10, 0, 0, 5));
        let inside = Component { pixels: (0..5).map(|x| (0, x)).collect() };
        assert_eq!(classify_component(&inside, &gt), Verdict::TruePositive);
        // 8 of 10 pixels on normal tissue
        let mut pixels: Vec<_> = (3..10).map(|x| (4, x)).collect();
        pixels.extend((0..3).map(|x| (5, x)));
        let mostly_normal = Component { pixels };
        let tumor = mostly_normal.pixels.iter().filter(|&&(y, x)| gt.0[[y, x]]).count();
        assert_eq!(tumor, 2);
        assert_eq!(classify_component(&mostly_normal, &gt), Verdict::FalsePositive);
        let split = Component { pixels: (2..7).map(|x| (0, x)).collect() };
        assert_eq!(classify_component(&split, &gt), Verdict::Neither);
    }

    #[test]
    fn empty_prediction_scores() {
        let gt = GroundTruthMask(square(10, 10, 2, 2, 4));
        let s = score_dataset(&[EvidenceMask::empty(10, 10)], &[gt]).unwrap();
        assert_eq!(s.precision, None);
        assert_eq!(s.recall, Some(0.0));
    }

    #[test]
    fn ground_truth_encodings() {
        assert!(GroundTruthMask::from_u8(Array2::from_elem((2, 2), 255)).is_ok());
        assert!(GroundTruthMask::from_u8(Array2::from_elem((2, 2), 7)).is_err());
    }
}
