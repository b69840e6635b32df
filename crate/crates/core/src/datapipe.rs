//! Datasets on disk, edge ground truth, training augmentation and the
//! procedural mirror-scene generator.
//!
//! On-disk layout: `<root>/<split>/image/<id>.{jpg,png}` paired with
//! `<root>/<split>/mask/<id>.png`. File extensions are matched
//! case-insensitively and ignored when pairing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_matrix;

pub const DEFAULT_EDGE_RADIUS: usize = 2;
const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Per-channel statistics used to standardize images before the network.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(H, W)` with values in `{0, 1}`.
    pub mask: Array2<u8>,
    pub edge: Array2<u8>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<u8>, edge_radius: usize) -> Result<Self> {
        let edge = derive_edge(mask.view(), edge_radius, BorderMode::default());
        let r = Self {
            id: id.into(),
            image,
            mask,
            edge,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 || (h, w) != self.mask.dim() || (h, w) != self.edge.dim() {
            return Err(Error::Dataset(format!(
                "{}: image {:?}, mask {:?} and edge {:?} disagree",
                self.id,
                self.image.dim(),
                self.mask.dim(),
                self.edge.dim()
            )));
        }
        if self.mask.iter().chain(self.edge.iter()).any(|&v| v > 1) {
            return Err(Error::Dataset(format!("{}: mask or edge is not binary", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// How pixels outside the image take part in dilation and erosion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    /// Outside pixels are skipped, so the image border is never an edge.
    #[default]
    Ignore,
    /// Outside pixels count as background, so foreground touching the
    /// border produces an edge there.
    Background,
}

/// 1-D running max (`dilate`) or min over a window of `radius` on each side.
fn sweep(line: &[u8], radius: usize, dilate: bool, border: BorderMode) -> Vec<u8> {
    let n = line.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let win = line[lo..=hi].iter().copied();
            let clipped = i < radius || i + radius >= n;
            if dilate {
                win.max().unwrap_or(0)
            } else if clipped && border == BorderMode::Background {
                0
            } else {
                win.min().unwrap_or(0)
            }
        })
        .collect()
}

fn morph(mask: ArrayView2<u8>, radius: usize, dilate: bool, border: BorderMode) -> Array2<u8> {
    let mut out = mask.to_owned();
    for axis in [Axis(1), Axis(0)] {
        for mut lane in out.lanes_mut(axis) {
            let v: Vec<u8> = lane.iter().copied().collect();
            for (d, s) in lane.iter_mut().zip(sweep(&v, radius, dilate, border)) {
                *d = s;
            }
        }
    }
    out
}

/// Morphological gradient (dilation minus erosion) with a square element of
/// side `2 * radius + 1`.
pub fn derive_edge(mask: ArrayView2<u8>, radius: usize, border: BorderMode) -> Array2<u8> {
    if mask.is_empty() {
        return mask.to_owned();
    }
    let d = morph(mask, radius, true, border);
    let e = morph(mask, radius, false, border);
    d - e
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory keyed by file stem.
fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_image_file(&p) {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if let Some(prev) = out.insert(stem.clone(), p.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate id {stem}: {} and {}",
                    prev.display(),
                    p.display()
                )));
            }
        }
    }
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let hwc = Array3::from_shape_vec((h as usize, w as usize, 3), raw).expect("rgb buffer size");
    Ok(hwc.permuted_axes([2, 0, 1]).mapv(|v| v as f32 / 255.0).as_standard_layout().to_owned())
}

/// Reads a mask, binarizing at 128. The flag reports whether any value was
/// neither 0 nor 255.
pub fn read_mask(path: &Path) -> Result<(Array2<u8>, bool)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let non_binary = raw.iter().any(|&v| v != 0 && v != 255);
    let m = Array2::from_shape_vec((h as usize, w as usize), raw).expect("mask buffer size");
    Ok((m.mapv(|v| (v >= 128) as u8), non_binary))
}

pub fn write_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let hwc = image.view().permuted_axes([1, 2, 0]);
    let raw: Vec<u8> = hwc.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let raw: Vec<u8> = values.iter().copied().collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("gray buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every matched image/mask pair of a split, sorted by id.
pub fn load_dataset(root: &Path, split: Split, edge_radius: usize) -> Result<Vec<SampleRecord>> {
    let base = root.join(split.dir_name());
    let images = index_dir(&base.join("image"))?;
    let masks = index_dir(&base.join("mask"))?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("image/{k}"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("mask/{k}")))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "unmatched files under {}: {}",
            base.display(),
            orphans.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for (id, ipath) in &images {
        let image = read_rgb(ipath)?;
        let (mask, non_binary) = read_mask(&masks[id])?;
        if non_binary {
            log::warn!("{}: mask is not strictly binary, thresholded at 128", masks[id].display());
        }
        if mask.dim() != (image.dim().1, image.dim().2) {
            return Err(Error::Dataset(format!(
                "{id}: image is {}x{} but mask is {}x{}",
                image.dim().1,
                image.dim().2,
                mask.dim().0,
                mask.dim().1
            )));
        }
        out.push(SampleRecord::new(id.clone(), image, mask, edge_radius)?);
    }
    Ok(out)
}

/// Writes records in the standard layout plus a `manifest.txt` id list.
pub fn write_dataset(records: &[SampleRecord], root: &Path, split: Split) -> Result<()> {
    let base = root.join(split.dir_name());
    fs::create_dir_all(base.join("image"))?;
    fs::create_dir_all(base.join("mask"))?;
    let mut manifest = String::new();
    for r in records {
        write_rgb(&base.join("image").join(format!("{}.png", r.id)), &r.image)?;
        write_gray(&base.join("mask").join(format!("{}.png", r.id)), &r.mask.mapv(|v| v * 255))?;
        manifest.push_str(&r.id);
        manifest.push('\n');
    }
    fs::write(base.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Copies a published archive split into the standard layout. Image and mask
/// folders are located by common names; masks are re-encoded as binary PNG.
/// Returns the number of pairs written.
pub fn ingest(src_split_dir: &Path, dst_root: &Path, split: Split) -> Result<usize> {
    let find = |names: &[&str]| -> Result<PathBuf> {
        names
            .iter()
            .map(|n| src_split_dir.join(n))
            .find(|p| p.is_dir())
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "{}: none of {} found",
                    src_split_dir.display(),
                    names.join(", ")
                ))
            })
    };
    let images = index_dir(&find(&["image", "images", "img", "Image", "Images", "imgs"])?)?;
    let masks = index_dir(&find(&["mask", "masks", "gt", "GT", "Mask", "Masks", "label", "labels"])?)?;
    let base = dst_root.join(split.dir_name());
    fs::create_dir_all(base.join("image"))?;
    fs::create_dir_all(base.join("mask"))?;
    let mut manifest = String::new();
    let mut n = 0;
    for (id, ipath) in &images {
        let Some(mpath) = masks.get(id) else {
            log::warn!("{}: no mask, skipped", ipath.display());
            continue;
        };
        let ext = ipath
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("png")
            .to_ascii_lowercase();
        fs::copy(ipath, base.join("image").join(format!("{id}.{ext}")))?;
        let (mask, _) = read_mask(mpath)?;
        write_gray(&base.join("mask").join(format!("{id}.png")), &mask.mapv(|v| v * 255))?;
        manifest.push_str(id);
        manifest.push('\n');
        n += 1;
    }
    fs::write(base.join("manifest.txt"), manifest)?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Side of the square every sample is resized to before scaling.
    pub base_size: usize,
    /// Multipliers of `base_size`, one chosen uniformly per sample.
    pub scales: Vec<f64>,
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            base_size: 352,
            scales: vec![0.75, 1.0, 1.25],
            crop_size: 256,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn scaled_side(&self, scale: f64) -> usize {
        ((self.base_size as f64 * scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("augmentation scales must be a nonempty list of positive values"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob must lie in [0, 1]"));
        }
        let min_side = self.scales.iter().map(|&s| self.scaled_side(s)).min().unwrap_or(0);
        if self.crop_size == 0 || self.crop_size > min_side {
            return Err(Error::config(format!(
                "crop_size {} exceeds the smallest scaled side {min_side}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// The geometric transform applied to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub scaled: (usize, usize),
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop: usize,
    pub flipped: bool,
}

/// Deterministic generator for sample `index` of `epoch`, independent of
/// iteration order or worker count.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Bilinear resize of a `(C, H, W)` image.
pub fn resize_image(img: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let to_mat = |v: Vec<f64>, r: usize, k: usize| Array2::from_shape_vec((r, k), v).expect("matrix size").mapv(|x| x as f32);
    let rows = to_mat(bilinear_matrix(h, oh), oh, h);
    let cols = to_mat(bilinear_matrix(w, ow), ow, w);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let plane = rows.dot(&img.index_axis(Axis(0), ch)).dot(&cols.t());
        out.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    out
}

/// Nearest-neighbour resize with pixel-center sampling.
pub fn resize_nearest(m: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = m.dim();
    if (h, w) == (oh, ow) {
        return m.clone();
    }
    let src = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Array2::from_shape_fn((oh, ow), |(i, j)| m[[src(i, h, oh), src(j, w, ow)]])
}

/// Re-applies a logged transform to a mask-like array.
pub fn apply_to_mask(m: &Array2<u8>, t: &Transform) -> Array2<u8> {
    let r = resize_nearest(m, t.scaled.0, t.scaled.1);
    let mut c = r
        .slice(s![t.crop_top..t.crop_top + t.crop, t.crop_left..t.crop_left + t.crop])
        .to_owned();
    if t.flipped {
        c.invert_axis(Axis(1));
    }
    c.as_standard_layout().to_owned()
}

pub fn apply_to_image(img: &Array3<f32>, t: &Transform) -> Array3<f32> {
    let r = resize_image(img, t.scaled.0, t.scaled.1);
    let mut c = r
        .slice(s![.., t.crop_top..t.crop_top + t.crop, t.crop_left..t.crop_left + t.crop])
        .to_owned();
    if t.flipped {
        c.invert_axis(Axis(2));
    }
    c.as_standard_layout().to_owned()
}

pub fn apply_transform(r: &SampleRecord, t: &Transform) -> SampleRecord {
    SampleRecord {
        id: r.id.clone(),
        image: apply_to_image(&r.image, t),
        mask: apply_to_mask(&r.mask, t),
        edge: apply_to_mask(&r.edge, t),
    }
}

/// Random scale, crop and horizontal flip, applied identically to image,
/// mask and edge. Returns the transform so it can be logged or replayed.
pub fn augment<R: Rng>(r: &SampleRecord, cfg: &AugmentationConfig, rng: &mut R) -> Result<(SampleRecord, Transform)> {
    cfg.validate()?;
    let scale = cfg.scales[rng.gen_range(0..cfg.scales.len())];
    let side = cfg.scaled_side(scale);
    let t = Transform {
        scaled: (side, side),
        crop_top: rng.gen_range(0..=side - cfg.crop_size),
        crop_left: rng.gen_range(0..=side - cfg.crop_size),
        crop: cfg.crop_size,
        flipped: rng.gen_bool(cfg.hflip_prob),
    };
    Ok((apply_transform(r, &t), t))
}

/// Resizes a sample to `(h, w)` without randomness (evaluation path).
pub fn resize_record(r: &SampleRecord, h: usize, w: usize) -> SampleRecord {
    SampleRecord {
        id: r.id.clone(),
        image: resize_image(&r.image, h, w),
        mask: resize_nearest(&r.mask, h, w),
        edge: resize_nearest(&r.edge, h, w),
    }
}

/// Standardized `(B, 3, H, W)` image tensor.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for img in images {
        let d = img.dim();
        if *dims.get_or_insert(d) != d {
            return Err(Error::input("images in a batch must share one size"));
        }
        for (c, plane) in img.axis_iter(Axis(0)).enumerate() {
            data.extend(plane.iter().map(|&v| (v - PIXEL_MEAN[c]) / PIXEL_STD[c]));
        }
        b += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::input("empty batch"))?;
    Ok(Tensor::from_vec(data, (b, c, h, w), device)?.to_dtype(dtype)?)
}

/// `(B, 1, H, W)` tensor of `{0, 1}` values.
pub fn mask_batch<'a>(masks: impl IntoIterator<Item = &'a Array2<u8>>, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for m in masks {
        if *dims.get_or_insert(m.dim()) != m.dim() {
            return Err(Error::input("masks in a batch must share one size"));
        }
        data.extend(m.iter().map(|&v| v as f32));
        b += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::input("empty batch"))?;
    Ok(Tensor::from_vec(data, (b, 1, h, w), device)?.to_dtype(dtype)?)
}

pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub edges: Tensor,
}

pub fn collate(records: &[SampleRecord], device: &Device, dtype: DType) -> Result<Batch> {
    Ok(Batch {
        images: image_batch(records.iter().map(|r| &r.image), device, dtype)?,
        masks: mask_batch(records.iter().map(|r| &r.mask), device, dtype)?,
        edges: mask_batch(records.iter().map(|r| &r.edge), device, dtype)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Brightness factor of the reflected content.
    pub reflection_gain: f32,
    pub frame_width: usize,
    pub edge_radius: usize,
    /// Framed panels holding unrelated, unreflected content.
    pub decoys: usize,
}

impl SyntheticConfig {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            size,
            seed,
            reflection_gain: 0.8,
            frame_width: 2,
            edge_radius: DEFAULT_EDGE_RADIUS,
            decoys: 1,
        }
    }
}

fn paint_background<R: Rng>(img: &mut Array3<f32>, rng: &mut R) {
    let (_, h, w) = img.dim();
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.6));
    let grad: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
    for c in 0..3 {
        for i in 0..h {
            let v = base[c] + grad[c] * i as f32 / h as f32;
            img.slice_mut(s![c, i, ..]).fill(v);
        }
    }
    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.75));
        let cy = rng.gen_range(0..h) as f32;
        let cx = rng.gen_range(0..w) as f32;
        let ry = rng.gen_range(h as f32 / 16.0..h as f32 / 4.0);
        let rx = rng.gen_range(w as f32 / 16.0..w as f32 / 4.0);
        let disc = rng.gen_bool(0.5);
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f32 - cy) / ry;
                let dx = (j as f32 - cx) / rx;
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        img[[c, i, j]] = color[c];
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
}

fn draw_frame(img: &mut Array3<f32>, (top, left, h, w): (usize, usize, usize, usize), f: usize, level: f32) {
    img.slice_mut(s![.., top - f..top + h + f, left - f..left + w + f]).fill(level);
}

/// Draws a framed panel of fresh scene content clear of `avoid`
/// (top, left, h, w). Gives up silently when no free spot is found.
fn place_decoy<R: Rng>(img: &mut Array3<f32>, avoid: (usize, usize, usize, usize), f: usize, rng: &mut R) {
    let (_, size, _) = img.dim();
    for _ in 0..100 {
        let h = rng.gen_range(size / 5..=size / 3);
        let w = rng.gen_range(size / 5..=size / 3);
        let top = rng.gen_range(f..=size - f - h);
        let left = rng.gen_range(f..=size - f - w);
        let (at, al, ah, aw) = avoid;
        let apart = top + h + f <= at || at + ah + f <= top || left + w + f <= al || al + aw + f <= left;
        if !apart {
            continue;
        }
        let mut panel = Array3::<f32>::zeros((3, h, w));
        paint_background(&mut panel, rng);
        draw_frame(img, (top, left, h, w), f, rng.gen_range(0.92..1.0));
        img.slice_mut(s![.., top..top + h, left..left + w]).assign(&panel);
        return;
    }
}

/// One procedural scene with a framed mirror reflecting another region.
pub fn synthetic_scene(cfg: &SyntheticConfig, index: usize) -> Result<SampleRecord> {
    let size = cfg.size;
    if size < 32 {
        return Err(Error::config(format!("synthetic size must be at least 32, got {size}")));
    }
    let mut rng = sample_rng(cfg.seed, u32::MAX as u64, index as u64);
    let mut img = Array3::<f32>::zeros((3, size, size));
    paint_background(&mut img, &mut rng);
    let f = cfg.frame_width;
    let mut placed = None;
    for _ in 0..100 {
        let mh = rng.gen_range(size / 4..=size / 2);
        let mw = rng.gen_range(size / 4..=size / 2);
        if mh + 2 * f > size || mw + 2 * f > size {
            continue;
        }
        let top = rng.gen_range(f..=size - f - mh);
        let left = rng.gen_range(f..=size - f - mw);
        let st = rng.gen_range(0..=size - mh);
        let sl = rng.gen_range(0..=size - mw);
        placed = Some((top, left, mh, mw, st, sl));
        break;
    }
    let (top, left, mh, mw, st, sl) =
        placed.ok_or_else(|| Error::Dataset(format!("scene {index}: mirror does not fit in {size}x{size}")))?;
    for _ in 0..cfg.decoys {
        place_decoy(&mut img, (top - f, left - f, mh + 2 * f, mw + 2 * f), f, &mut rng);
    }
    let mut reflection = img.slice(s![.., st..st + mh, sl..sl + mw]).to_owned();
    reflection.invert_axis(Axis(2));
    reflection.mapv_inplace(|v| v * cfg.reflection_gain);
    draw_frame(&mut img, (top, left, mh, mw), f, rng.gen_range(0.92..1.0));
    img.slice_mut(s![.., top..top + mh, left..left + mw]).assign(&reflection);
    let mut mask = Array2::<u8>::zeros((size, size));
    mask.slice_mut(s![top..top + mh, left..left + mw]).fill(1);
    SampleRecord::new(format!("synth_{index:05}"), img, mask, cfg.edge_radius)
}

/// `n` scenes; scene `i` depends only on the seed and `i`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    generate_with(&SyntheticConfig::new(n, size, seed))
}

pub fn generate_with(cfg: &SyntheticConfig) -> Result<Vec<SampleRecord>> {
    if cfg.n == 0 {
        return Err(Error::config("synthetic dataset needs n >= 1"));
    }
    (0..cfg.n).map(|i| synthetic_scene(cfg, i)).collect()
}
