//! Patch and localization datasets, their array-archive container, and a
//! synthetic histology-like generator.
//!
//! Container layout (`.npz`): `x` is `uint8` N×H×W×3 and `y` is `uint8` N for
//! patch splits stored as `{split}.npz`; localization archives hold `x` and a
//! `uint8` N×H×W `mask`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}` (expected train, valid or test)"))),
        }
    }
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), reason: reason.into() }
}

fn check_images(images: &Array4<u8>) -> std::result::Result<(), String> {
    let (_, h, w, c) = images.dim();
    if c != 3 || h != w || h == 0 {
        return Err(format!("`x` has shape {:?}, expected N×S×S×3", images.shape()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub images: Array4<u8>,
    pub labels: Array1<u8>,
    pub split: Split,
}

impl PatchDataset {
    pub fn new(images: Array4<u8>, labels: Array1<u8>, split: Split) -> Result<Self> {
        Self::validated(images, labels, split).map_err(Error::Input)
    }

    fn validated(images: Array4<u8>, labels: Array1<u8>, split: Split) -> std::result::Result<Self, String> {
        check_images(&images)?;
        if images.len_of(Axis(0)) != labels.len() {
            return Err(format!("`x` holds {} images but `y` holds {} labels", images.len_of(Axis(0)), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(format!("`y` contains non-binary label {bad}"));
        }
        Ok(PatchDataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.len_of(Axis(1))
    }

    /// `(negatives, positives)`.
    pub fn class_balance(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    pub fn labels_vec(&self) -> Vec<u8> {
        self.labels.to_vec()
    }

    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        images_to_tensor(self.images.select(Axis(0), indices).view())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.npz", self.split));
        let mut npz = NpzWriter::new(BufWriter::new(File::create(&path)?));
        npz.add_array("x", &self.images).map_err(|e| data_err(&path, e.to_string()))?;
        npz.add_array("y", &self.labels).map_err(|e| data_err(&path, e.to_string()))?;
        npz.finish().map_err(|e| data_err(&path, e.to_string()))?;
        Ok(path)
    }
}

fn open_npz(path: &Path) -> Result<NpzReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| data_err(path, e.to_string()))?;
    NpzReader::new(BufReader::new(file)).map_err(|e| data_err(path, format!("not an array archive: {e}")))
}

fn read_field<D: ndarray::Dimension>(
    npz: &mut NpzReader<BufReader<File>>,
    path: &Path,
    name: &str,
) -> Result<ndarray::Array<u8, D>> {
    let names = npz.names().map_err(|e| data_err(path, e.to_string()))?;
    if !names.iter().any(|n| n == name) {
        return Err(data_err(path, format!("missing array `{name}`")));
    }
    npz.by_name(name)
        .map_err(|e| data_err(path, format!("array `{name}`: {e}")))
}

/// Reads `{split}.npz` from a directory, or the archive itself when `path` is a file.
pub fn load_patch_dataset(path: &Path, split: Split) -> Result<PatchDataset> {
    let file = if path.is_dir() { path.join(format!("{split}.npz")) } else { path.to_path_buf() };
    let mut npz = open_npz(&file)?;
    let images = read_field(&mut npz, &file, "x")?;
    let labels = read_field(&mut npz, &file, "y")?;
    PatchDataset::validated(images, labels, split).map_err(|r| data_err(&file, r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationDataset {
    pub images: Array4<u8>,
    /// 0/1 tumor annotation per pixel.
    pub masks: Array3<u8>,
}

pub const LOCALIZATION_FILE: &str = "localization.npz";

impl LocalizationDataset {
    pub fn new(images: Array4<u8>, masks: Array3<u8>) -> Result<Self> {
        Self::validated(images, masks).map_err(Error::Input)
    }

    fn validated(images: Array4<u8>, masks: Array3<u8>) -> std::result::Result<Self, String> {
        check_images(&images)?;
        let (n, h, w, _) = images.dim();
        if masks.dim() != (n, h, w) {
            return Err(format!("`mask` has shape {:?}, expected {:?}", masks.shape(), [n, h, w]));
        }
        if let Some(bad) = masks.iter().find(|&&v| !matches!(v, 0 | 1 | 255)) {
            return Err(format!("`mask` contains non-binary value {bad}"));
        }
        let masks = masks.mapv(|v| u8::from(v != 0));
        for (i, m) in masks.outer_iter().enumerate() {
            let on = m.iter().filter(|&&v| v == 1).count();
            if on == 0 || on == m.len() {
                return Err(format!("`mask` {i} does not contain both tumor and normal pixels"));
            }
        }
        Ok(LocalizationDataset { images, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self, i: usize) -> Array2<bool> {
        self.masks.index_axis(Axis(0), i).mapv(|v| v == 1)
    }

    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        images_to_tensor(self.images.select(Axis(0), indices).view())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(LOCALIZATION_FILE);
        let mut npz = NpzWriter::new(BufWriter::new(File::create(&path)?));
        npz.add_array("x", &self.images).map_err(|e| data_err(&path, e.to_string()))?;
        npz.add_array("mask", &self.masks).map_err(|e| data_err(&path, e.to_string()))?;
        npz.finish().map_err(|e| data_err(&path, e.to_string()))?;
        Ok(path)
    }
}

pub fn load_localization_dataset(path: &Path) -> Result<LocalizationDataset> {
    let file = if path.is_dir() { path.join(LOCALIZATION_FILE) } else { path.to_path_buf() };
    let mut npz = open_npz(&file)?;
    let images = read_field(&mut npz, &file, "x")?;
    let masks = read_field(&mut npz, &file, "mask")?;
    LocalizationDataset::validated(images, masks).map_err(|r| data_err(&file, r))
}

/// Scales bytes to `[0, 1]` in NHWC order.
pub fn images_to_tensor(images: ArrayView4<u8>) -> Tensor {
    let (n, h, w, c) = images.dim();
    let data = images.iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::from_vec([n, h, w, c], data).expect("shape matches element count")
}

/// One element of the symmetry group of the square: `rotations` quarter turns
/// counter-clockwise applied after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rotations: 0, flip: false };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral { rotations: (i % 4) as u8, flip: i >= 4 })
    }

    pub fn index(self) -> usize {
        self.rotations as usize % 4 + if self.flip { 4 } else { 0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::all()[rng.gen_range(0..8)]
    }

    pub fn apply<T: Clone>(self, image: ArrayView3<T>) -> Result<Array3<T>> {
        let (h, w, _) = image.dim();
        if h != w {
            return Err(Error::Shape(format!("augmentation needs a square image, got {h}×{w}")));
        }
        let mut v = image;
        if self.flip {
            v.invert_axis(Axis(1));
        }
        for _ in 0..self.rotations % 4 {
            v = v.permuted_axes([1, 0, 2]);
            v.invert_axis(Axis(0));
        }
        Ok(v.to_owned())
    }
}

/// Applies a uniformly sampled dihedral element.
pub fn augment<T: Clone>(image: ArrayView3<T>, rng: &mut impl Rng) -> Result<Array3<T>> {
    Dihedral::sample(rng).apply(image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    /// Images in the localization set; every one carries blobs.
    pub n_localization: usize,
    pub image_size: usize,
    /// Inclusive range of blobs planted in a positive image.
    pub blob_count_range: (usize, usize),
    /// Inclusive range of ellipse semi-axes in pixels.
    pub blob_radius_range: (f64, f64),
    /// Strength of the hypercellular darkening inside blobs; 0 plants invisible blobs.
    pub nucleus_density: f64,
    pub texture_noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 1000,
            n_localization: 200,
            image_size: 96,
            blob_count_range: (1, 3),
            blob_radius_range: (8.0, 16.0),
            nucleus_density: 0.6,
            texture_noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (rlo, rhi) = self.blob_radius_range;
        let (clo, chi) = self.blob_count_range;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(Error::Config(format!("blob_radius_range {:?} must be positive and ordered", self.blob_radius_range)));
        }
        if clo == 0 || chi < clo {
            return Err(Error::Config(format!("blob_count_range {:?} must be positive and ordered", self.blob_count_range)));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is below 16", self.image_size)));
        }
        if 2.0 * rhi + 2.0 >= self.image_size as f64 {
            return Err(Error::Config("blobs must fit strictly inside the image".into()));
        }
        if !(0.0..=1.0).contains(&self.nucleus_density) {
            return Err(Error::Config(format!("nucleus_density {} outside [0, 1]", self.nucleus_density)));
        }
        if !(self.texture_noise_scale >= 0.0) {
            return Err(Error::Config("texture_noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

const EOSIN: [f64; 3] = [232.0, 168.0, 204.0];
const HEMATOXYLIN: [f64; 3] = [96.0, 56.0, 148.0];
const DENSE_NUCLEI: [f64; 3] = [72.0, 36.0, 120.0];
const SMALL_NUCLEI_PER_IMAGE: usize = 24;

/// Sum of octaves of bilinearly interpolated lattice noise with equal energy per octave.
fn pink_noise(size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = Array2::zeros((size, size));
    let mut octaves = 0.0;
    let mut cell = size / 2;
    while cell >= 2 {
        let g = size / cell + 2;
        let lattice: Array2<f64> = Array2::from_shape_fn((g, g), |_| StandardNormal.sample(rng));
        for ((y, x), v) in out.indexed_iter_mut() {
            let fy = y as f64 / cell as f64;
            let fx = x as f64 / cell as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
            let bottom = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
            *v += top * (1.0 - ty) + bottom * ty;
        }
        octaves += 1.0;
        cell /= 2;
    }
    out.mapv_inplace(|v| v / f64::sqrt(octaves));
    out
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(size: usize, radius: (f64, f64), rng: &mut impl Rng) -> Self {
        let a = rng.gen_range(radius.0..=radius.1);
        let b = rng.gen_range(radius.0..=radius.1);
        let margin = a.max(b) + 1.0;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Ellipse {
            cy: rng.gen_range(margin..size as f64 - margin),
            cx: rng.gen_range(margin..size as f64 - margin),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// One synthetic image; `blobs` selects the positive class. Returns the image and blob mask.
fn render(spec: &SyntheticSpec, blobs: bool, rng: &mut impl Rng) -> (Array3<u8>, Array2<u8>) {
    let size = spec.image_size;
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-18.0..18.0));
    let texture = pink_noise(size, rng);
    let amp = 22.0 * spec.texture_noise_scale;
    let mut rgb = Array3::<f64>::zeros((size, size, 3));
    for ((y, x, c), v) in rgb.indexed_iter_mut() {
        *v = EOSIN[c] + jitter[c] + amp * texture[[y, x]] * [1.0, 1.2, 0.8][c];
    }
    for _ in 0..SMALL_NUCLEI_PER_IMAGE {
        let r: f64 = rng.gen_range(1.2..2.4);
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                if d <= r {
                    for c in 0..3 {
                        rgb[[y, x, c]] = 0.3 * rgb[[y, x, c]] + 0.7 * HEMATOXYLIN[c];
                    }
                }
            }
        }
    }
    let mut mask = Array2::<u8>::zeros((size, size));
    if blobs {
        let (lo, hi) = spec.blob_count_range;
        let count = rng.gen_range(lo..=hi);
        let grain = pink_noise(size, rng);
        for _ in 0..count {
            let e = Ellipse::random(size, spec.blob_radius_range, rng);
            for y in 0..size {
                for x in 0..size {
                    if e.contains(y, x) {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
        let d = spec.nucleus_density;
        for ((y, x), &m) in mask.indexed_iter() {
            if m == 1 {
                let shade = 1.0 + 0.25 * grain[[y, x]];
                for c in 0..3 {
                    let target = DENSE_NUCLEI[c] * shade;
                    rgb[[y, x, c]] = (1.0 - d) * rgb[[y, x, c]] + d * target;
                }
            }
        }
    }
    let image = rgb.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    (image, mask)
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Balanced patch set (odd indices positive) plus a localization set of
/// blob-bearing images. Each image draws from its own RNG stream.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<(PatchDataset, LocalizationDataset)> {
    spec.validate()?;
    let s = spec.image_size;
    let mut images = Array4::<u8>::zeros((spec.n_images, s, s, 3));
    let mut labels = Array1::<u8>::zeros(spec.n_images);
    for i in 0..spec.n_images {
        let positive = i % 2 == 1;
        let (img, _) = render(spec, positive, &mut image_rng(spec.seed, i as u64));
        images.slice_mut(s![i, .., .., ..]).assign(&img);
        labels[i] = u8::from(positive);
    }
    let mut loc_images = Array4::<u8>::zeros((spec.n_localization, s, s, 3));
    let mut masks = Array3::<u8>::zeros((spec.n_localization, s, s));
    for i in 0..spec.n_localization {
        let stream = (1u64 << 32) + i as u64;
        let (img, mask) = render(spec, true, &mut image_rng(spec.seed, stream));
        loc_images.slice_mut(s![i, .., .., ..]).assign(&img);
        masks.slice_mut(s![i, .., ..]).assign(&mask);
    }
    Ok((
        PatchDataset::new(images, labels, split)?,
        LocalizationDataset::new(loc_images, masks)?,
    ))
}

/// Per-image blob masks for a patch set generated by [`generate_synthetic`];
/// negatives come back empty.
pub fn synthetic_patch_masks(spec: &SyntheticSpec) -> Result<Array3<u8>> {
    spec.validate()?;
    let s = spec.image_size;
    let mut masks = Array3::<u8>::zeros((spec.n_images, s, s));
    for i in (1..spec.n_images).step_by(2) {
        let (_, mask) = render(spec, true, &mut image_rng(spec.seed, i as u64));
        masks.slice_mut(s![i, .., ..]).assign(&mask);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_images: 6, n_localization: 3, image_size: 32, blob_radius_range: (4.0, 6.0), ..Default::default() }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (a, la) = generate_synthetic(&small(), Split::Train).unwrap();
        let (b, lb) = generate_synthetic(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_synthetic(&SyntheticSpec { seed: 9, ..small() }, Split::Train).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(SyntheticSpec { blob_radius_range: (0.0, 3.0), ..small() }.validate().is_err());
        assert!(SyntheticSpec { blob_count_range: (2, 1), ..small() }.validate().is_err());
        assert!(SyntheticSpec { blob_radius_range: (4.0, 20.0), ..small() }.validate().is_err());
    }

    #[test]
    fn masks_follow_labels() {
        let spec = small();
        let (patches, _) = generate_synthetic(&spec, Split::Train).unwrap();
        let masks = synthetic_patch_masks(&spec).unwrap();
        for (i, m) in masks.outer_iter().enumerate() {
            let on = m.iter().any(|&v| v == 1);
            assert_eq!(on, patches.labels[i] == 1);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| y * 100 + x * 10 + c);
        let r = Dihedral { rotations: 1, flip: false };
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = r.apply(cur.view()).unwrap();
        }
        assert_eq!(cur, img);
        assert_eq!(Dihedral::IDENTITY.apply(img.view()).unwrap(), img);
        let once = r.apply(img.view()).unwrap();
        // counter-clockwise: the top-right pixel moves to the top-left
        assert_eq!(once[[0, 0, 0]], img[[0, 3, 0]]);
        assert!(r.apply(Array3::<u8>::zeros((3, 4, 1)).view()).is_err());
    }

    #[test]
    fn all_group_elements_are_distinct() {
        let img = Array3::from_shape_fn((3, 3, 1), |(y, x, _)| y * 3 + x);
        let outs: Vec<_> = Dihedral::all().iter().map(|d| d.apply(img.view()).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }
}
