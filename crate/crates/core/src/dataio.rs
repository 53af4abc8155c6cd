//! Group datasets on disk, the two-group sampler, augmentation, and the
//! synthetic shape-group generator.
//!
//! Layout: `root/images/<group>/<name>.{jpg,jpeg,png}` with masks at
//! `root/gt/<group>/<name>.png` (8-bit, 0/255). Groups are sorted by name and
//! the sort position is the class index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{AugmentPolicy, ColorMode, RunConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{binarize_mask, resize_bilinear, resize_mask, GroupBatch, Image, ImageGroup};

const IMAGE_EXTS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Debug)]
pub struct GroupDataset {
    pub root: PathBuf,
    pub groups: Vec<ImageGroup>,
    pub class_names: Vec<String>,
}

impl GroupDataset {
    pub fn n_images(&self) -> usize {
        self.groups.iter().map(ImageGroup::len).sum()
    }
}

pub fn load_image(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

pub fn load_mask(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let raw = Image::new(h as usize, w as usize, 1, g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())?;
    binarize_mask(&raw).map_err(|e| Error::Ingest { path: path.to_path_buf(), message: e.to_string() })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, img: &Image<f32>) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let out = RgbImage::from_raw(img.width as u32, img.height as u32, buf).ok_or_else(|| Error::contract("rgb buffer size"))?;
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a single-channel map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, img: &Image<f32>) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let out = GrayImage::from_raw(img.width as u32, img.height as u32, buf).ok_or_else(|| Error::contract("gray buffer size"))?;
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Image files of one directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    classes: &'a [String],
    groups: BTreeMap<&'a str, &'a [String]>,
}

/// Loads a class-grouped dataset and writes `dataset.json` next to it.
pub fn load_group_dataset(root: &Path) -> Result<GroupDataset> {
    let img_root = root.join("images");
    let gt_root = root.join("gt");
    let dirs = sorted_dirs(&img_root).map_err(|e| Error::Data(format!("cannot list {}: {e}", img_root.display())))?;
    if dirs.len() < 2 {
        return Err(Error::Data(format!("{} holds {} groups; at least 2 are needed", img_root.display(), dirs.len())));
    }
    let mut groups = Vec::with_capacity(dirs.len());
    for (class_index, dir) in dirs.iter().enumerate() {
        let gid = dir_name(dir);
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("group {gid} has no images")));
        }
        let mut missing = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut names = Vec::new();
        for f in &files {
            let name = stem(f);
            let gt = gt_root.join(&gid).join(format!("{name}.png"));
            if !gt.is_file() {
                missing.push(name);
                continue;
            }
            let img = load_image(f)?;
            let mask = load_mask(&gt)?;
            if (mask.height, mask.width) != (img.height, img.width) {
                return Err(Error::Ingest {
                    path: gt,
                    message: format!("mask is {}x{}, image is {}x{}", mask.height, mask.width, img.height, img.width),
                });
            }
            images.push(img);
            masks.push(mask);
            names.push(name);
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("group {gid}: no ground truth for {}", missing.join(", "))));
        }
        groups.push(ImageGroup::new(gid, class_index, images, masks, names)?);
    }
    let class_names: Vec<String> = groups.iter().map(|g| g.group_id.clone()).collect();
    let manifest = DatasetManifest {
        classes: &class_names,
        groups: groups.iter().map(|g| (g.group_id.as_str(), g.names.as_slice())).collect(),
    };
    let path = root.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(GroupDataset { root: root.to_path_buf(), groups, class_names })
}

/// Images per group in a pair batch.
pub fn pair_batch_size(a: usize, b: usize, max: usize) -> usize {
    a.min(b).min(max)
}

/// `N x 3 x S x S` stack of images resized to `side`.
pub fn stack_images<T: Scalar>(images: &[Image<f32>], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * 3 * side * side);
    for img in images {
        let r = resize_bilinear(img, side, side)?;
        data.extend(r.to_planar().into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 3, side, side], data)
}

/// `N x 1 x S x S` stack of masks resized to `side` and re-binarized.
pub fn stack_masks<T: Scalar>(masks: &[Image<f32>], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(masks.len() * side * side);
    for m in masks {
        let r = resize_mask(m, side, side)?;
        data.extend(r.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![masks.len(), 1, side, side], data)
}

/// Draws two distinct groups, `N = min(|A|, |B|, max_group_batch)` images
/// from each without replacement, augments and resizes them.
pub fn sample_pair_batch<T: Scalar>(ds: &GroupDataset, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<GroupBatch<T>> {
    let g = ds.groups.len();
    if g < 2 {
        return Err(Error::Data("pair sampling needs at least 2 groups".into()));
    }
    let a = rng.random_range(0..g);
    let mut b = rng.random_range(0..g - 1);
    if b >= a {
        b += 1;
    }
    let (ga, gb) = (&ds.groups[a], &ds.groups[b]);
    let n = pair_batch_size(ga.len(), gb.len(), cfg.max_group_batch);
    let mut draw = |group: &ImageGroup| -> Result<(Tensor<T>, Tensor<T>)> {
        let picks = sample(rng, group.len(), n).into_vec();
        let mut imgs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in picks {
            let (im, m) = augment(&group.images[i], &group.gt_masks[i], &cfg.augment, rng)?;
            imgs.push(im);
            masks.push(m);
        }
        Ok((stack_images(&imgs, cfg.image_size)?, stack_masks(&masks, cfg.image_size)?))
    };
    let (xa, ma) = draw(ga)?;
    let (xb, mb) = draw(gb)?;
    GroupBatch::new(xa, xb, ma, mb, ga.class_index, gb.class_index)
}

pub fn hflip(img: &Image<f32>) -> Image<f32> {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Rotation by `degrees` counter-clockwise about the image center with
/// bilinear sampling; uncovered pixels become 0.
pub fn rotate(img: &Image<f32>, degrees: f64) -> Image<f32> {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = Image::filled(h, w, img.channels, 0.0);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: the source of output pixel (x, y). Image rows grow
            // downwards, so a visual counter-clockwise turn uses this sign.
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let sx = if (sx - sx.round()).abs() < 1e-9 { sx.round() } else { sx };
            let sy = if (sy - sy.round()).abs() < 1e-9 { sy.round() } else { sy };
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..img.channels {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn jitter(img: &Image<f32>, brightness: f32, contrast: f32, saturation: f32) -> Image<f32> {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let px = out.height * out.width;
    let mean = out.data.chunks(3).map(|p| gray(p[0], p[1], p[2])).sum::<f32>() / px as f32;
    for v in out.data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for p in out.data.chunks_mut(3) {
        let g = gray(p[0], p[1], p[2]);
        for v in p.iter_mut() {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
pub fn equalize(img: &Image<f32>) -> Image<f32> {
    let mut out = img.clone();
    let px = img.height * img.width;
    for ch in 0..img.channels {
        let mut hist = [0usize; 256];
        for p in 0..px {
            hist[to_u8(img.data[p * img.channels + ch]) as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let first = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if px == first {
            continue;
        }
        for p in 0..px {
            let level = to_u8(img.data[p * img.channels + ch]) as usize;
            out.data[p * img.channels + ch] = (cdf[level] - first) as f32 / (px - first) as f32;
        }
    }
    out
}

/// Shared geometric transform for image and mask, photometric changes on the
/// image only. The mask is re-binarized after resampling.
pub fn augment(
    img: &Image<f32>,
    mask: &Image<f32>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Image<f32>, Image<f32>)> {
    let (mut im, mut m) = (img.clone(), mask.clone());
    if policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob) {
        im = hflip(&im);
        m = hflip(&m);
    }
    if policy.rotation_deg > 0.0 {
        let deg = rng.random_range(-policy.rotation_deg..=policy.rotation_deg);
        im = rotate(&im, deg);
        m = binarize_mask(&rotate(&m, deg))?;
    }
    match policy.color_mode {
        ColorMode::Jitter => {
            let mut factor = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) as f32 } else { 1.0 };
            let (b, c, s) = (factor(policy.brightness), factor(policy.contrast), factor(policy.saturation));
            if (b, c, s) != (1.0, 1.0, 1.0) {
                im = jitter(&im, b, c, s);
            }
        }
        ColorMode::Histogram => {
            if rng.random_bool(0.5) {
                im = equalize(&im);
            }
        }
    }
    Ok((im, m))
}

/// Splits off the last `per_group` images of every group.
pub fn split_holdout(ds: &GroupDataset, per_group: usize) -> Result<(GroupDataset, GroupDataset)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for g in &ds.groups {
        if per_group >= g.len() {
            return Err(Error::Data(format!(
                "group {} has {} images; cannot hold out {per_group}",
                g.group_id,
                g.len()
            )));
        }
        let cut = g.len() - per_group;
        let part = |r: std::ops::Range<usize>| {
            ImageGroup::new(
                g.group_id.clone(),
                g.class_index,
                g.images[r.clone()].to_vec(),
                g.gt_masks[r.clone()].to_vec(),
                g.names[r].to_vec(),
            )
        };
        train.push(part(0..cut)?);
        if per_group > 0 {
            held.push(part(cut..g.len())?);
        }
    }
    let mk = |groups| GroupDataset { root: ds.root.clone(), groups, class_names: ds.class_names.clone() };
    Ok((mk(train), mk(held)))
}

// Synthetic groups.

/// Shapes available to the generator.
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "ring"];
/// Saturated object colors.
pub const PALETTE: [(&str, [f32; 3]); 7] = [
    ("red", [0.90, 0.12, 0.12]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.15, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("orange", [0.95, 0.50, 0.05]),
];
/// Distinct (shape, color) identities.
pub const MAX_IDENTITIES: usize = SHAPES.len() * PALETTE.len();

/// Identity of group `g`: shape `g mod 4`, color `g mod 7` (distinct for `g < 28`).
pub fn identity(g: usize) -> (usize, usize) {
    (g % SHAPES.len(), g % PALETTE.len())
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: usize,
    cx: f64,
    cy: f64,
    r: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let d = (dx * dx + dy * dy).sqrt();
        match self.shape {
            0 => d <= self.r,
            1 => u.abs() <= 0.8 * self.r && v.abs() <= 0.8 * self.r,
            2 => {
                // Equilateral triangle inscribed in the circle of radius r.
                let r = self.r;
                v >= -0.5 * r && (3f64.sqrt() * u + v) <= r && (-(3f64.sqrt()) * u + v) <= r
            }
            _ => d <= self.r && d >= 0.5 * self.r,
        }
    }
}

fn place(rng: &mut ChaCha8Rng, shape: usize, side: f64) -> Placed {
    let r = rng.random_range(0.14..0.24) * side;
    Placed {
        shape,
        cx: rng.random_range(r..side - r),
        cy: rng.random_range(r..side - r),
        r,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn paint(img: &mut Image<f32>, mask: Option<&mut Image<f32>>, obj: &Placed, color: [f32; 3]) {
    let mut mask = mask;
    for y in 0..img.height {
        for x in 0..img.width {
            if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    img.set(y, x, c, v);
                }
                if let Some(m) = mask.as_deref_mut() {
                    m.set(y, x, 0, 1.0);
                }
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, side: usize) -> Image<f32> {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.30..0.60));
    let (fx, fy) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut img = Image::filled(side, side, 3, 0.0);
    for y in 0..side {
        for x in 0..side {
            let wave = 0.08 * ((fx * x as f64 + fy * y as f64 + phase).sin()) as f32;
            for (c, &b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.04..0.04);
                img.set(y, x, c, (b + wave + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Group directory name for synthetic group `g`.
pub fn synthetic_group_name(g: usize) -> String {
    let (s, c) = identity(g);
    format!("g{g:02}_{}_{}", PALETTE[c].0, SHAPES[s])
}

/// Writes a synthetic dataset under `out` and loads it back.
///
/// Each image holds its group's object drawn last over 1 to 3 distractors
/// whose identities belong to other groups; only the group's object is marked.
pub fn generate_synthetic(out: &Path, n_groups: usize, per_group: usize, side: usize, rng: &mut ChaCha8Rng) -> Result<GroupDataset> {
    if n_groups < 2 {
        return Err(Error::Data("synthetic data needs at least 2 groups".into()));
    }
    if n_groups > MAX_IDENTITIES {
        return Err(Error::Data(format!("only {MAX_IDENTITIES} shape/color identities exist, {n_groups} groups requested")));
    }
    if per_group == 0 || side < 16 {
        return Err(Error::Data("need at least one image per group and a side of 16 or more".into()));
    }
    for g in 0..n_groups {
        let name = synthetic_group_name(g);
        let idir = out.join("images").join(&name);
        let gdir = out.join("gt").join(&name);
        fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
        fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        let (shape, color) = identity(g);
        for i in 0..per_group {
            let mut img = background(rng, side);
            let mut mask = Image::filled(side, side, 1, 0.0f32);
            let n_distract = rng.random_range(1..=3);
            for _ in 0..n_distract {
                let mut other = rng.random_range(0..n_groups - 1);
                if other >= g {
                    other += 1;
                }
                let (os, oc) = identity(other);
                let obj = place(rng, os, side as f64);
                paint(&mut img, None, &obj, PALETTE[oc].1);
            }
            let target = place(rng, shape, side as f64);
            paint(&mut img, Some(&mut mask), &target, PALETTE[color].1);
            let stem = format!("{i:03}");
            save_rgb_png(&idir.join(format!("{stem}.png")), &img)?;
            save_gray_png(&gdir.join(format!("{stem}.png")), &mask)?;
        }
    }
    load_group_dataset(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_group(id: &str, class: usize, n: usize, side: usize) -> ImageGroup {
        let imgs = (0..n).map(|i| Image::filled(side, side, 3, i as f32 / n as f32)).collect();
        let masks = (0..n).map(|_| Image::filled(side, side, 1, 1.0)).collect();
        let names = (0..n).map(|i| format!("{i}")).collect();
        ImageGroup::new(id, class, imgs, masks, names).unwrap()
    }

    fn dataset(sizes: &[usize]) -> GroupDataset {
        GroupDataset {
            root: PathBuf::new(),
            groups: sizes.iter().enumerate().map(|(i, &n)| tiny_group(&format!("g{i}"), i, n, 8)).collect(),
            class_names: (0..sizes.len()).map(|i| format!("g{i}")).collect(),
        }
    }

    fn write_fixture(root: &Path, groups: &[(&str, &[&str])], skip_gt: Option<&str>) {
        for (g, names) in groups {
            fs::create_dir_all(root.join("images").join(g)).unwrap();
            fs::create_dir_all(root.join("gt").join(g)).unwrap();
            for n in *names {
                let img = Image::filled(6, 5, 3, 0.5f32);
                save_rgb_png(&root.join("images").join(g).join(format!("{n}.png")), &img).unwrap();
                if skip_gt != Some(*n) {
                    let mut m = Image::filled(6, 5, 1, 0.0f32);
                    m.set(2, 2, 0, 0.8);
                    save_gray_png(&root.join("gt").join(g).join(format!("{n}.png")), &m).unwrap();
                }
            }
        }
    }

    #[test]
    fn loads_sorted_groups() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("zebra", &["a", "b", "c"]), ("apple", &["x", "y", "z"])], None);
        let ds = load_group_dataset(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["apple", "zebra"]);
        assert_eq!(ds.groups[1].class_index, 1);
        assert_eq!(ds.n_images(), 6);
        // anti-aliased 0.8 (stored as 204) binarizes to 1
        assert_eq!(ds.groups[0].gt_masks[0].get(2, 2, 0), 1.0);
        assert!(dir.path().join("dataset.json").is_file());
        let again = load_group_dataset(dir.path()).unwrap();
        assert_eq!(again.class_names, ds.class_names);
    }

    #[test]
    fn missing_mask_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("a", &["one", "two"]), ("b", &["three"])], Some("two"));
        let err = load_group_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("two"), "{err}");
    }

    #[test]
    fn empty_group_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("a", &["one"]), ("b", &["two"])], None);
        fs::create_dir_all(dir.path().join("images/c")).unwrap();
        assert!(load_group_dataset(dir.path()).is_err());
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(pair_batch_size(40, 50, 32), 32);
        assert_eq!(pair_batch_size(10, 50, 32), 10);
        assert_eq!(pair_batch_size(1, 1, 32), 1);
        for a in 1..=40 {
            for b in 1..=40 {
                assert_eq!(pair_batch_size(a, b, 32), a.min(b).min(32));
            }
        }
    }

    #[test]
    fn sampler_sizes_and_distinct_classes() {
        let ds = dataset(&[3, 5, 2, 4]);
        let cfg = RunConfig { image_size: 32, augment: AugmentPolicy::off(), ..RunConfig::toy() };
        let mut r = rng(1);
        for _ in 0..200 {
            let b: GroupBatch<f32> = sample_pair_batch(&ds, &cfg, &mut r).unwrap();
            assert_ne!(b.class_a, b.class_b);
            let want = pair_batch_size(ds.groups[b.class_a].len(), ds.groups[b.class_b].len(), 32);
            assert_eq!(b.n(), want);
            assert_eq!(b.side(), 32);
        }
        assert!(sample_pair_batch::<f32>(&dataset(&[3]), &cfg, &mut r).is_err());
    }

    #[test]
    fn sampler_draws_without_replacement() {
        let ds = dataset(&[6, 6]);
        let cfg = RunConfig { image_size: 8, augment: AugmentPolicy::off(), ..RunConfig::toy() };
        let mut r = rng(2);
        let b: GroupBatch<f64> = sample_pair_batch(&ds, &cfg, &mut r).unwrap();
        let mut levels: Vec<i64> = (0..6).map(|i| (b.group_a.data()[i * 3 * 64] * 600.0).round() as i64).collect();
        levels.sort();
        levels.dedup();
        assert_eq!(levels.len(), 6);
    }

    #[test]
    fn augment_off_is_identity() {
        let mut r = rng(3);
        let img = background(&mut r, 16);
        let mut m = Image::filled(16, 16, 1, 0.0f32);
        m.set(3, 4, 0, 1.0);
        let (a, b) = augment(&img, &m, &AugmentPolicy::off(), &mut r).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, m);
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = background(&mut rng(4), 9);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let n = 8;
        let mut left = Image::filled(n, n, 1, 0.0f32);
        for y in 0..n {
            for x in 0..n / 2 {
                left.set(y, x, 0, 1.0);
            }
        }
        let rot = binarize_mask(&rotate(&left, 90.0)).unwrap();
        // Counter-clockwise: output (y, x) reads input (x, n - 1 - y).
        for y in 0..n {
            for x in 0..n {
                assert_eq!(rot.get(y, x, 0), left.get(x, n - 1 - y, 0), "({y},{x})");
            }
        }
        // Left half turns into the bottom half.
        assert!((0..n).all(|x| rot.get(n - 1, x, 0) == 1.0 && rot.get(0, x, 0) == 0.0));
    }

    #[test]
    fn augmentation_preserves_binarity_and_range() {
        let mut r = rng(5);
        let policy = AugmentPolicy { rotation_deg: 30.0, brightness: 0.5, contrast: 0.5, saturation: 0.5, ..AugmentPolicy::default() };
        let hist = AugmentPolicy { color_mode: ColorMode::Histogram, ..policy.clone() };
        for i in 0..20 {
            let img = background(&mut r, 20);
            let mut m = Image::filled(20, 20, 1, 0.0f32);
            paint(&mut Image::filled(20, 20, 3, 0.0), Some(&mut m), &place(&mut r, i % 4, 20.0), [1.0; 3]);
            let p = if i % 2 == 0 { &policy } else { &hist };
            let (a, b) = augment(&img, &m, p, &mut r).unwrap();
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(b.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn holdout_takes_the_tail() {
        let ds = dataset(&[5, 4]);
        let (train, held) = split_holdout(&ds, 2).unwrap();
        assert_eq!(train.groups[0].names, vec!["0", "1", "2"]);
        assert_eq!(held.groups[1].names, vec!["2", "3"]);
        assert!(split_holdout(&ds, 4).is_err());
        let (all, none) = split_holdout(&ds, 0).unwrap();
        assert_eq!(all.n_images(), 9);
        assert!(none.groups.is_empty());
    }

    #[test]
    fn identities_are_distinct() {
        let mut seen: Vec<(usize, usize)> = (0..MAX_IDENTITIES).map(identity).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), MAX_IDENTITIES);
    }

    #[test]
    fn synthetic_contract() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), 2, 4, 32, &mut rng(6)).unwrap();
        assert_eq!(ds.n_images(), 8);
        for g in &ds.groups {
            let (_, color) = identity(g.class_index);
            let rgb = PALETTE[color].1;
            for (img, m) in g.images.iter().zip(&g.gt_masks) {
                assert!(m.data.contains(&1.0));
                // Every marked pixel carries the target color (to 8-bit precision).
                for y in 0..32 {
                    for x in 0..32 {
                        if m.get(y, x, 0) == 1.0 {
                            for c in 0..3 {
                                assert!((img.get(y, x, c) - rgb[c]).abs() < 0.003);
                            }
                        }
                    }
                }
            }
        }
        assert!(generate_synthetic(dir.path(), 29, 1, 32, &mut rng(6)).is_err());
        assert!(generate_synthetic(dir.path(), 1, 1, 32, &mut rng(6)).is_err());
    }

    #[test]
    fn synthetic_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(a.path(), 3, 2, 32, &mut rng(7)).unwrap();
        generate_synthetic(b.path(), 3, 2, 32, &mut rng(7)).unwrap();
        for g in 0..3 {
            let name = synthetic_group_name(g);
            for sub in ["images", "gt"] {
                for i in 0..2 {
                    let rel = format!("{sub}/{name}/{i:03}.png");
                    assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
                }
            }
        }
    }
}
