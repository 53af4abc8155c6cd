//! Saliency evaluation: MAE, S-measure, max F-measure and max E-measure, plus
//! dataset aggregation and a directory-pair evaluator.
//!
//! Threshold sweeps run on the 8-bit quantized prediction: level `j` in
//! `0..=255` marks pixels with `q >= j` as foreground. Ground truth is binary
//! (values above 0.5 are foreground).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{list_images, load_image, load_mask, stem};
use crate::error::{Error, Result};
use crate::types::{resize_bilinear, Image};

pub const LEVELS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;

pub type Curve = [f64; LEVELS];

fn check_pair(pred: &Image<f32>, gt: &Image<f32>) -> Result<()> {
    if pred.channels != 1 || gt.channels != 1 {
        return Err(Error::contract("metrics take single-channel maps"));
    }
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn fg(gt: &Image<f32>) -> Vec<bool> {
    gt.data.iter().map(|&v| v > 0.5).collect()
}

pub fn mae(pred: &Image<f32>, gt: &Image<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let g = fg(gt);
    let sum: f64 = pred.data.iter().zip(&g).map(|(&p, &t)| (p as f64 - if t { 1.0 } else { 0.0 }).abs()).sum();
    Ok(sum / pred.data.len() as f64)
}

/// Per-level pixel counts `(tp, fp)`: foreground predictions at level `j`
/// that hit ground-truth foreground and background respectively.
fn cumulative_hits(pred: &Image<f32>, g: &[bool]) -> ([usize; LEVELS], [usize; LEVELS]) {
    let (mut hf, mut hb) = ([0usize; LEVELS], [0usize; LEVELS]);
    for (&p, &t) in pred.data.iter().zip(g) {
        let q = quantize(p) as usize;
        if t {
            hf[q] += 1;
        } else {
            hb[q] += 1;
        }
    }
    for j in (0..LEVELS - 1).rev() {
        hf[j] += hf[j + 1];
        hb[j] += hb[j + 1];
    }
    (hf, hb)
}

/// Precision and recall at every level; `None` when the ground truth is empty.
pub fn pr_curve(pred: &Image<f32>, gt: &Image<f32>) -> Result<Option<(Curve, Curve)>> {
    check_pair(pred, gt)?;
    let g = fg(gt);
    let positives = g.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let (tp, fp) = cumulative_hits(pred, &g);
    let (mut p, mut r) = ([0.0; LEVELS], [0.0; LEVELS]);
    for j in 0..LEVELS {
        let predicted = tp[j] + fp[j];
        p[j] = if predicted == 0 { 0.0 } else { tp[j] as f64 / predicted as f64 };
        r[j] = tp[j] as f64 / positives as f64;
    }
    Ok(Some((p, r)))
}

pub fn f_beta(p: f64, r: f64) -> f64 {
    let den = BETA2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * p * r / den
    }
}

/// Maximum F-measure over levels; `None` for an empty ground truth.
pub fn f_measure_max(pred: &Image<f32>, gt: &Image<f32>) -> Result<Option<f64>> {
    Ok(pr_curve(pred, gt)?.map(|(p, r)| p.iter().zip(&r).map(|(&p, &r)| f_beta(p, r)).fold(0.0, f64::max)))
}

/// Enhanced-alignment score at every level.
///
/// Scores are pixel means (sum divided by W·H). An all-background ground
/// truth scores the fraction of predicted background, an all-foreground one
/// the fraction of predicted foreground.
pub fn e_curve(pred: &Image<f32>, gt: &Image<f32>) -> Result<Curve> {
    check_pair(pred, gt)?;
    let g = fg(gt);
    let n = g.len();
    let positives = g.iter().filter(|&&t| t).count();
    let (tp, fp) = cumulative_hits(pred, &g);
    let nf = n as f64;
    let mut out = [0.0; LEVELS];
    for j in 0..LEVELS {
        let pred_fg = tp[j] + fp[j];
        let sum = if positives == 0 {
            (n - pred_fg) as f64
        } else if positives == n {
            pred_fg as f64
        } else {
            let mu_p = pred_fg as f64 / nf;
            let mu_g = positives as f64 / nf;
            let fn_ = positives - tp[j];
            let tn = n - positives - fp[j];
            // (prediction value, gt value, pixel count) for the four cases.
            [(1.0, 1.0, tp[j]), (1.0, 0.0, fp[j]), (0.0, 1.0, fn_), (0.0, 0.0, tn)]
                .iter()
                .map(|&(pv, gv, count): &(f64, f64, usize)| {
                    if count == 0 {
                        return 0.0;
                    }
                    let (a, b) = (pv - mu_p, gv - mu_g);
                    // b != 0 because the ground truth is not constant.
                    let xi = 2.0 * a * b / (a * a + b * b);
                    (1.0 + xi) * (1.0 + xi) / 4.0 * count as f64
                })
                .sum()
        };
        out[j] = sum / nf;
    }
    Ok(out)
}

pub fn e_measure_max(pred: &Image<f32>, gt: &Image<f32>) -> Result<f64> {
    Ok(e_curve(pred, gt)?.iter().copied().fold(0.0, f64::max))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma)
}

/// Structural similarity of one block (unbiased moments, no sliding window).
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.iter().sum::<f64>() / nf;
    let y = gt.iter().sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x);
            sy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        sx /= nf - 1.0;
        sy /= nf - 1.0;
        sxy /= nf - 1.0;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if beta == 0.0 {
        if alpha == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        alpha / beta
    }
}

/// Foreground centroid as 1-based split coordinates `(x, y)`; rounding is
/// half-to-even. An empty ground truth splits at the image center.
fn centroid(g: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0usize);
    for (i, &t) in g.iter().enumerate() {
        if t {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            cnt += 1;
        }
    }
    if cnt == 0 {
        return ((w as f64 / 2.0).round_ties_even() as usize + 1, (h as f64 / 2.0).round_ties_even() as usize + 1);
    }
    let c = cnt as f64;
    ((sx / c).round_ties_even() as usize + 1, (sy / c).round_ties_even() as usize + 1)
}

/// S-measure with weight `alpha` between the object-aware and region-aware
/// terms; the result is clamped at 0.
pub fn s_measure(pred: &Image<f32>, gt: &Image<f32>, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let g = fg(gt);
    let p: Vec<f64> = pred.data.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect();
    let n = g.len() as f64;
    let positives = g.iter().filter(|&&t| t).count();
    let mean_p = p.iter().sum::<f64>() / n;
    if positives == 0 {
        return Ok(1.0 - mean_p);
    }
    if positives == g.len() {
        return Ok(mean_p);
    }

    let u = positives as f64 / n;
    let fg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &t)| t).map(|(&v, _)| v).collect();
    let bg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &t)| !t).map(|(&v, _)| 1.0 - v).collect();
    let (o_fg, o_bg) = (object_score(&fg_vals), object_score(&bg_vals));
    // Written as o_bg + u·(o_fg − o_bg) so equal parts combine exactly.
    let s_object = o_bg + u * (o_fg - o_bg);

    let (cx, cy) = centroid(&g, h, w);
    let gf: Vec<f64> = g.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let block = |y0: usize, y1: usize, x0: usize, x1: usize| {
        let mut bp = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut bg = Vec::with_capacity(bp.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                bp.push(p[y * w + x]);
                bg.push(gf[y * w + x]);
            }
        }
        block_ssim(&bp, &bg)
    };
    let area = n;
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let s1 = block(0, cy, 0, cx);
    let s2 = block(0, cy, cx, w);
    let s3 = block(cy, h, 0, cx);
    let s4 = block(cy, h, cx, w);
    // w4 = 1 − w1 − w2 − w3, folded in so equal parts combine exactly.
    let s_region = s4 + w1 * (s1 - s4) + w2 * (s2 - s4) + w3 * (s3 - s4);

    Ok((alpha * s_object + (1.0 - alpha) * s_region).max(0.0))
}

/// Everything needed to aggregate one image into a dataset score.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub mae: f64,
    pub s_alpha: f64,
    pub e_curve: Box<Curve>,
    /// Absent for an empty ground truth.
    pub pr: Option<Box<(Curve, Curve)>>,
}

impl ImageScores {
    /// Scores `pred` against `gt`, resizing the prediction to the ground
    /// truth's resolution first.
    pub fn compute(pred: &Image<f32>, gt: &Image<f32>) -> Result<Self> {
        let resized;
        let pred = if (pred.height, pred.width) != (gt.height, gt.width) {
            resized = resize_bilinear(pred, gt.height, gt.width)?;
            &resized
        } else {
            pred
        };
        Ok(Self {
            mae: mae(pred, gt)?,
            s_alpha: s_measure(pred, gt, S_ALPHA)?,
            e_curve: Box::new(e_curve(pred, gt)?),
            pr: pr_curve(pred, gt)?.map(Box::new),
        })
    }
}

/// How F and E are maximized across a set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxMode {
    /// Average per-level precision/recall (or E) over images, then take the max.
    #[default]
    Dataset,
    /// Take each image's max, then average.
    PerImage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub e_max: f64,
    pub s_alpha: f64,
    pub f_max: f64,
    pub mae: f64,
    pub n_images: usize,
}

pub fn aggregate(items: &[&ImageScores], mode: MaxMode) -> Scores {
    let n = items.len();
    if n == 0 {
        return Scores::default();
    }
    let nf = n as f64;
    let mae = items.iter().map(|s| s.mae).sum::<f64>() / nf;
    let s_alpha = items.iter().map(|s| s.s_alpha).sum::<f64>() / nf;
    let with_gt: Vec<&(Curve, Curve)> = items.iter().filter_map(|s| s.pr.as_deref()).collect();
    let (e_max, f_max) = match mode {
        MaxMode::Dataset => {
            let mut e = [0.0; LEVELS];
            for s in items {
                for (acc, v) in e.iter_mut().zip(s.e_curve.iter()) {
                    *acc += v;
                }
            }
            let e_max = e.iter().map(|v| v / nf).fold(0.0, f64::max);
            let f_max = if with_gt.is_empty() {
                0.0
            } else {
                let m = with_gt.len() as f64;
                (0..LEVELS)
                    .map(|j| {
                        let p = with_gt.iter().map(|c| c.0[j]).sum::<f64>() / m;
                        let r = with_gt.iter().map(|c| c.1[j]).sum::<f64>() / m;
                        f_beta(p, r)
                    })
                    .fold(0.0, f64::max)
            };
            (e_max, f_max)
        }
        MaxMode::PerImage => {
            let e_max = items.iter().map(|s| s.e_curve.iter().copied().fold(0.0, f64::max)).sum::<f64>() / nf;
            let f_max = if with_gt.is_empty() {
                0.0
            } else {
                with_gt
                    .iter()
                    .map(|c| c.0.iter().zip(&c.1).map(|(&p, &r)| f_beta(p, r)).fold(0.0, f64::max))
                    .sum::<f64>()
                    / with_gt.len() as f64
            };
            (e_max, f_max)
        }
    };
    Scores { e_max, s_alpha, f_max, mae, n_images: n }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub e_max: f64,
    pub s_alpha: f64,
    pub f_max: f64,
    pub mae: f64,
    pub n_images: usize,
    pub per_group: BTreeMap<String, Scores>,
    /// `group/stem` of images whose ground truth has no foreground; they are
    /// left out of the F aggregation.
    pub empty_gt: Vec<String>,
    /// Files present in only one of the two trees.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    /// Builds a report from `(group, stem, scores)` triples.
    pub fn from_scores(items: &[(String, String, ImageScores)], mode: MaxMode) -> Self {
        let all: Vec<&ImageScores> = items.iter().map(|(_, _, s)| s).collect();
        let total = aggregate(&all, mode);
        let mut groups: BTreeMap<&str, Vec<&ImageScores>> = BTreeMap::new();
        for (g, _, s) in items {
            groups.entry(g.as_str()).or_default().push(s);
        }
        Self {
            e_max: total.e_max,
            s_alpha: total.s_alpha,
            f_max: total.f_max,
            mae: total.mae,
            n_images: total.n_images,
            per_group: groups.into_iter().map(|(g, v)| (g.to_string(), aggregate(&v, mode))).collect(),
            empty_gt: items.iter().filter(|(_, _, s)| s.pr.is_none()).map(|(g, n, _)| format!("{g}/{n}")).collect(),
            unmatched: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,n_images,e_max,s_alpha,f_max,mae\n");
        for (g, s) in &self.per_group {
            let _ = writeln!(out, "{g},{},{:.6},{:.6},{:.6},{:.6}", s.n_images, s.e_max, s.s_alpha, s.f_max, s.mae);
        }
        let _ = writeln!(out, "ALL,{},{:.6},{:.6},{:.6},{:.6}", self.n_images, self.e_max, self.s_alpha, self.f_max, self.mae);
        out
    }
}

fn group_dirs(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    Ok(rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

/// Scores `pred_root/<group>/<stem>.png` against `gt_root/<group>/<stem>.png`.
///
/// A dataset root (one holding `gt/`) is accepted for `gt_root`. Files found
/// in only one tree are listed in `unmatched`; an empty intersection is an
/// error.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path, mode: MaxMode) -> Result<EvalReport> {
    let gt_root = if gt_root.join("gt").is_dir() { gt_root.join("gt") } else { gt_root.to_path_buf() };
    let pred_groups = group_dirs(pred_root)?;
    let gt_groups = group_dirs(&gt_root)?;
    let mut unmatched = Vec::new();
    let mut items = Vec::new();
    for g in pred_groups.keys().filter(|g| !gt_groups.contains_key(*g)) {
        unmatched.push(format!("{g}/ (prediction only)"));
    }
    for (g, gdir) in &gt_groups {
        let Some(pdir) = pred_groups.get(g) else {
            unmatched.push(format!("{g}/ (ground truth only)"));
            continue;
        };
        let by_stem = |files: Vec<PathBuf>| files.into_iter().map(|p| (stem(&p), p)).collect::<BTreeMap<_, _>>();
        let gts = by_stem(list_images(gdir)?);
        let preds = by_stem(list_images(pdir)?);
        for s in preds.keys().filter(|s| !gts.contains_key(*s)) {
            unmatched.push(format!("{g}/{s} (prediction only)"));
        }
        for (s, gpath) in &gts {
            let Some(ppath) = preds.get(s) else {
                unmatched.push(format!("{g}/{s} (ground truth only)"));
                continue;
            };
            let gt = load_mask(gpath)?;
            let pred = gray(&load_image(ppath)?);
            items.push((g.clone(), s.clone(), ImageScores::compute(&pred, &gt)?));
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!(
            "no prediction in {} matches a ground-truth map in {}",
            pred_root.display(),
            gt_root.display()
        )));
    }
    let mut report = EvalReport::from_scores(&items, mode);
    report.unmatched = unmatched;
    Ok(report)
}

/// First channel of a decoded map (saved maps are gray, so all channels agree).
fn gray(img: &Image<f32>) -> Image<f32> {
    let data = img.data.chunks(img.channels).map(|p| p[0]).collect();
    Image { height: img.height, width: img.width, channels: 1, data }
}
