//! Training objectives: hybrid BCE + IoU saliency loss, focal loss on the
//! collaboration maps, the group symmetric triplet loss over sub-group
//! centroids, and cross-entropy on the two classification heads.
//!
//! Every tape op returns a `[1]`-shaped scalar and carries a hand-derived
//! gradient; value-level wrappers run the same code on an inference tape.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::TripletForm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{FeatureStack, SaliencyMaps};

/// Probability clamp for logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing added to soft intersection and union.
pub const IOU_EPS: f64 = 1.0;

/// Unweighted components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub bce: f64,
    pub iou: f64,
    pub gcm: f64,
    pub gst: f64,
    pub cls: f64,
    pub total: f64,
    /// The triplet term was skipped because a group had fewer than two images.
    pub gst_skipped: bool,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 5] {
        [self.bce, self.iou, self.gcm, self.gst, self.cls]
    }
}

/// Weighted sum of `(bce, iou, gcm, gst, cls)`.
pub fn total_loss(components: [f64; 5], lambdas: [f64; 5]) -> LossBundle {
    let total = components.iter().zip(&lambdas).map(|(c, l)| c * l).sum();
    let [bce, iou, gcm, gst, cls] = components;
    LossBundle { bce, iou, gcm, gst, cls, total, gst_skipped: false }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("{what}: prediction {:?} vs target {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::from_f64_lossy(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

// Gradients below are evaluated at the clamped probability and passed
// straight through the clamp.

/// Pixel-mean binary cross-entropy.
pub fn bce<'t, T: Scalar>(pred: Var<'t, T>, gt: &Tensor<T>) -> Var<'t, T> {
    let p = pred.value();
    assert_eq!(p.shape(), gt.shape(), "bce shapes");
    let inv = T::one() / T::from_usize(p.len()).unwrap();
    let mut acc = T::zero();
    for (&q, &y) in p.data().iter().zip(gt.data()) {
        let q = clamp_prob(q);
        acc -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
    }
    let gt = gt.clone();
    pred.tape().custom("bce", &[pred], Tensor::scalar(acc * inv), move |g, _| {
        let s = g.data()[0] * inv;
        let d = p.zip_map(&gt, |q, y| {
            let q = clamp_prob(q);
            s * ((q - y) / (q * (T::one() - q)))
        });
        vec![Some(d)]
    })
}

/// `1 - mean_n (sum min(y, p) + eps) / (sum max(y, p) + eps)` over images.
pub fn iou<'t, T: Scalar>(pred: Var<'t, T>, gt: &Tensor<T>) -> Var<'t, T> {
    let p = pred.value();
    assert_eq!(p.shape(), gt.shape(), "iou shapes");
    let n = p.shape()[0];
    let per = p.len() / n;
    let eps = T::from_f64_lossy(IOU_EPS);
    let mut inter = vec![eps; n];
    let mut union = vec![eps; n];
    for i in 0..n {
        for (&q, &y) in p.data()[i * per..(i + 1) * per].iter().zip(&gt.data()[i * per..(i + 1) * per]) {
            inter[i] += q.min(y);
            union[i] += q.max(y);
        }
    }
    let nn = T::from_usize(n).unwrap();
    let ratio: T = inter.iter().zip(&union).map(|(&a, &b)| a / b).sum();
    let out = Tensor::scalar(T::one() - ratio / nn);
    let gt = gt.clone();
    pred.tape().custom("iou", &[pred], out, move |g, _| {
        let s = g.data()[0] / nn;
        let mut d = Tensor::zeros(p.shape());
        for i in 0..n {
            let (a, b) = (inter[i], union[i]);
            // d(a/b) = da/b - a db / b^2
            for j in i * per..(i + 1) * per {
                let (q, y) = (p.data()[j], gt.data()[j]);
                let da = if q < y { T::one() } else { T::zero() };
                let db = if q > y { T::one() } else { T::zero() };
                d.data_mut()[j] = -s * (da / b - a * db / (b * b));
            }
        }
        vec![Some(d)]
    })
}

/// Focal parameters; `alpha` scales every pixel uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focal {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Mean binary focal loss `-alpha (1 - p_t)^gamma ln p_t`.
pub fn focal<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>, params: Focal) -> Var<'t, T> {
    let p = pred.value();
    assert_eq!(p.shape(), target.shape(), "focal shapes");
    let inv = T::one() / T::from_usize(p.len()).unwrap();
    let gamma = T::from_f64_lossy(params.gamma);
    let alpha = T::from_f64_lossy(params.alpha);
    // The modulating factor sees the unclamped p_t so an exact hit costs
    // exactly zero; only the logarithm needs the clamp.
    let pt_of = |q: T, y: T| {
        let q = q.max(T::zero()).min(T::one());
        y * q + (T::one() - y) * (T::one() - q)
    };
    let mut acc = T::zero();
    for (&q, &y) in p.data().iter().zip(target.data()) {
        let pt = pt_of(q, y);
        acc -= alpha * (T::one() - pt).powf(gamma) * clamp_prob(pt).ln();
    }
    let target = target.clone();
    pred.tape().custom("focal", &[pred], Tensor::scalar(acc * inv), move |g, _| {
        let s = g.data()[0] * inv;
        let d = p.zip_map(&target, |q, y| {
            let pt = pt_of(q, y);
            let (one_m, pc) = (T::one() - pt, clamp_prob(pt));
            let mut dpt = -one_m.powf(gamma) / pc;
            if gamma != T::zero() && one_m > T::zero() {
                dpt += gamma * one_m.powf(gamma - T::one()) * pc.ln();
            }
            // dp_t/dp = 2y - 1
            s * alpha * dpt * (y + y - T::one())
        });
        vec![Some(d)]
    })
}

/// Mean cross-entropy of `logits (N, K)` against integer labels.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let z = logits.value();
    if z.rank() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::contract(format!("logits {:?} vs {} labels", z.shape(), labels.len())));
    }
    let (n, k) = (z.shape()[0], z.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut acc = T::zero();
    for i in 0..n {
        let row = &z.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = row.iter().map(|&v| (v - m).exp()).sum();
        acc += s.ln() + m - row[labels[i]];
        for j in 0..k {
            probs.data_mut()[i * k + j] = (row[j] - m).exp() / s;
        }
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let labels = labels.to_vec();
    Ok(logits.tape().custom("cross_entropy", &[logits], Tensor::scalar(acc * inv), move |g, _| {
        let s = g.data()[0] * inv;
        let mut d = probs.scale(s);
        for (i, &l) in labels.iter().enumerate() {
            d.data_mut()[i * k + l] -= s;
        }
        vec![Some(d)]
    }))
}

fn diff_norm<T: Scalar>(a: &[T], b: &[T]) -> (Vec<T>, T) {
    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let r = d.iter().map(|&v| v * v).sum::<T>().sqrt();
    (d, r)
}

/// `max(0, |a - p| - |p - n| + margin)` on vectors of equal length.
pub fn triplet<'t, T: Scalar>(a: Var<'t, T>, p: Var<'t, T>, n: Var<'t, T>, margin: f64) -> Var<'t, T> {
    let (av, pv, nv) = (a.value(), p.value(), n.value());
    assert!(av.len() == pv.len() && pv.len() == nv.len(), "triplet operands differ in length");
    let (d1, r1) = diff_norm(av.data(), pv.data());
    let (d2, r2) = diff_norm(pv.data(), nv.data());
    let raw = r1 - r2 + T::from_f64_lossy(margin);
    let active = raw > T::zero();
    let out = Tensor::scalar(if active { raw } else { T::zero() });
    let shape = av.shape().to_vec();
    a.tape().custom("triplet", &[a, p, n], out, move |g, _| {
        let s = if active { g.data()[0] } else { T::zero() };
        let unit = |d: &[T], r: T| -> Vec<T> {
            if r > T::zero() {
                d.iter().map(|&v| s * v / r).collect()
            } else {
                vec![T::zero(); d.len()]
            }
        };
        let (u1, u2) = (unit(&d1, r1), unit(&d2, r2));
        let ga = u1.clone();
        let gp: Vec<T> = u1.iter().zip(&u2).map(|(&x, &y)| -x - y).collect();
        let gn = u2;
        [ga, gp, gn]
            .into_iter()
            .map(|v| Some(Tensor::new(shape.clone(), v).expect("triplet grad shape")))
            .collect()
    })
}

/// `v / max(|v|, 1e-12)`.
pub fn l2_normalize<'t, T: Scalar>(v: Var<'t, T>) -> Var<'t, T> {
    let x = v.value();
    let r = x.l2_norm().max(T::from_f64_lossy(1e-12));
    let y = x.scale(T::one() / r);
    let yy = y.clone();
    v.tape().custom("l2_normalize", &[v], y, move |g, _| {
        let dot: T = g.data().iter().zip(yy.data()).map(|(&a, &b)| a * b).sum();
        vec![Some(g.zip_map(&yy, |gv, yv| (gv - yv * dot) / r))]
    })
}

/// Sub-group centroids `(e_A, e_B)` of per-image pooled features `(N, C)`,
/// split into `[0, ceil(N/2))` and `[ceil(N/2), N)`. `None` when `N < 2`.
pub fn subgroup_centroids<'t, T: Scalar>(pooled: Var<'t, T>) -> Option<(Var<'t, T>, Var<'t, T>)> {
    let n = pooled.shape()[0];
    if n < 2 {
        return None;
    }
    let half = n.div_ceil(2);
    Some((pooled.mean_rows(0, half), pooled.mean_rows(half, n)))
}

/// Group symmetric triplet loss on the masked re-encoded features of both
/// groups stacked as `(2N, C, H, W)`. `None` when a group has one image.
pub fn gst<'t, T: Scalar>(f_r: Var<'t, T>, form: TripletForm, margin: f64, normalize: bool) -> Option<Var<'t, T>> {
    let rows = f_r.shape()[0];
    debug_assert!(rows.is_multiple_of(2), "two equal groups expected");
    let n = rows / 2;
    let pooled = f_r.gap();
    let (e1a, e1b) = subgroup_centroids(pooled.slice_rows(0, n))?;
    let (e2a, e2b) = subgroup_centroids(pooled.slice_rows(n, rows))?;
    let prep = |e: Var<'t, T>| if normalize { l2_normalize(e) } else { e };
    let (e1a, e1b, e2a, e2b) = (prep(e1a), prep(e1b), prep(e2a), prep(e2b));
    let first = triplet(e1a, e1b, e2a, margin);
    let second = match form {
        TripletForm::Symmetric => triplet(e2b, e2a, e1b, margin),
        TripletForm::Literal => triplet(e1b, e2b, e2a, margin),
    };
    Some(first.add(second))
}

/// Classification loss: cross-entropy of both heads against shared labels.
pub fn classification<'t, T: Scalar>(acm: Var<'t, T>, racm: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    Ok(cross_entropy(racm, labels)?.add(cross_entropy(acm, labels)?))
}

// Value-level API.

pub fn bce_loss<T: Scalar>(pred: &SaliencyMaps<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("bce", &pred.data, gt)?;
    let tape = Tape::inference();
    Ok(bce(tape.constant(pred.data.clone()), gt).item())
}

pub fn iou_loss<T: Scalar>(pred: &SaliencyMaps<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("iou", &pred.data, gt)?;
    let tape = Tape::inference();
    Ok(iou(tape.constant(pred.data.clone()), gt).item())
}

/// `(bce, iou)`, unweighted.
pub fn hybrid_saliency_loss<T: Scalar>(pred: &SaliencyMaps<T>, gt: &Tensor<T>) -> Result<(T, T)> {
    Ok((bce_loss(pred, gt)?, iou_loss(pred, gt)?))
}

pub fn focal_loss<T: Scalar>(pred: &SaliencyMaps<T>, target: &Tensor<T>, params: Focal) -> Result<T> {
    same_shape("focal", &pred.data, target)?;
    let tape = Tape::inference();
    Ok(focal(tape.constant(pred.data.clone()), target, params).item())
}

/// Sub-group centroids of both groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupEmbeddings<T> {
    pub e_1a: Vec<T>,
    pub e_1b: Vec<T>,
    pub e_2a: Vec<T>,
    pub e_2b: Vec<T>,
}

/// Centroids of the two halves of one group's pooled features.
pub fn subgroup_embed<T: Scalar>(f_r: &FeatureStack<T>) -> Result<(Vec<T>, Vec<T>)> {
    let n = f_r.data.shape()[0];
    if n < 2 {
        return Err(Error::contract(format!("sub-group split needs at least 2 images, got {n}")));
    }
    let tape = Tape::inference();
    let pooled = tape.constant(f_r.data.clone()).gap();
    let (a, b) = subgroup_centroids(pooled).expect("n >= 2");
    Ok((a.value().data().to_vec(), b.value().data().to_vec()))
}

pub fn triplet_term<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: f64) -> T {
    let tape = Tape::inference();
    let v = |x: &[T]| tape.constant(Tensor::new(vec![x.len()], x.to_vec()).expect("vector"));
    triplet(v(a), v(p), v(n), margin).item()
}

pub fn gst_loss<T: Scalar>(emb: &SubgroupEmbeddings<T>, margin: f64, form: TripletForm) -> T {
    let first = triplet_term(&emb.e_1a, &emb.e_1b, &emb.e_2a, margin);
    first
        + match form {
            TripletForm::Symmetric => triplet_term(&emb.e_2b, &emb.e_2a, &emb.e_1b, margin),
            TripletForm::Literal => triplet_term(&emb.e_1b, &emb.e_2b, &emb.e_2a, margin),
        }
}

pub fn classification_loss<T: Scalar>(acm: &Tensor<T>, racm: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let tape = Tape::inference();
    Ok(classification(tape.constant(acm.clone()), tape.constant(racm.clone()), labels)?.item())
}
