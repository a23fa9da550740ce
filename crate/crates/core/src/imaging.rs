//! 2-D map utilities shared by the explanation and localization code.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps, truncated at `truncate * sigma`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma).ceil().max(0.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Reflects an out-of-range index back into `0..len` (`d c b a | a b c d`).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflected borders. `sigma <= 0` returns a copy.
pub fn gaussian_smooth(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 || map.is_empty() {
        return map.clone();
    }
    let taps = gaussian_kernel(sigma, 4.0);
    let r = (taps.len() / 2) as isize;
    let (h, w) = map.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * map[[y, reflect(x as isize + i as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[[reflect(y as isize + i as isize - r, h), x]])
                .sum();
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn bilinear_resize(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Rescales to `[0, 1]`; `None` when the map is constant.
pub fn min_max_normalize(map: &Array2<f64>) -> Option<Array2<f64>> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let span = hi - lo;
    Some(map.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Luminance weights for RGB → grey.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// 8-bit single-channel PNG; values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn save_grey_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let bytes: Vec<u8> = map.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape(format!("cannot encode a {h}x{w} map")))?;
    img.save(path)?;
    Ok(())
}

/// Decodes any supported image file to `H x W x 3` bytes.
pub fn load_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn save_rgb(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape(format!("cannot encode a {h}x{w} image")))?;
    img.save(path)?;
    Ok(())
}
