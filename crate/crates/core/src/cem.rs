//! Confidence enhancement: twin probability/threshold heads joined by a
//! steep differentiable step `M = 1 / (1 + exp(-k (P - T)))`.

use rand::Rng;

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::types::{FeatureStack, SaliencyMaps};

/// Default steepness.
pub const DEFAULT_K: f64 = 300.0;
/// Steepness used to recompute a step whose loss came out non-finite.
pub const FALLBACK_K: f64 = 50.0;

/// `conv3x3 + BN + ReLU`, `conv1x1 -> 1`, sigmoid, upsample to the image side.
#[derive(Clone, Debug)]
pub struct CemBranch {
    pub hidden: ConvBnRelu,
    pub out: Conv2d,
}

impl CemBranch {
    /// The output projection starts at zero, so `P = T` and `M = 0.5`: a
    /// fresh model sits where the steep binarization has its largest slope
    /// instead of in a saturated tail.
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize, mid: usize) -> Self {
        let hidden = ConvBnRelu::new(store, rng, &format!("{name}.hidden"), in_ch, mid, 3, 1, false);
        let out = Conv2d::new(store, rng, &format!("{name}.out"), mid, 1, 1, 1, true);
        store.value_mut(out.weight).data_mut().fill(T::zero());
        Self { hidden, out }
    }

    fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: Var<'t, T>, side: usize) -> Var<'t, T> {
        self.out
            .forward(ctx, self.hidden.forward(ctx, f))
            .sigmoid()
            .resize(side, side)
    }
}

/// Probability and threshold branches.
#[derive(Clone, Debug)]
pub struct Cem {
    pub prob: CemBranch,
    pub thresh: CemBranch,
}

impl Cem {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize) -> Self {
        let mid = (in_ch / 2).max(1);
        Self {
            prob: CemBranch::new(store, rng, &format!("{name}.prob"), in_ch, mid),
            thresh: CemBranch::new(store, rng, &format!("{name}.thresh"), in_ch, mid),
        }
    }

    pub fn param_count(&self) -> usize {
        self.prob.param_count() + self.thresh.param_count()
    }

    /// `(P, T)` at `side x side`.
    pub fn branches<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f_d: Var<'t, T>, side: usize) -> (Var<'t, T>, Var<'t, T>) {
        (self.prob.forward(ctx, f_d, side), self.thresh.forward(ctx, f_d, side))
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f_d: Var<'t, T>, side: usize, k: f64) -> Var<'t, T> {
        let (p, t) = self.branches(ctx, f_d, side);
        binarize(p, t, k)
    }
}

/// Tape-level differentiable binarization.
pub fn binarize<'t, T: Scalar>(p: Var<'t, T>, t: Var<'t, T>, k: f64) -> Var<'t, T> {
    let kk = T::from_f64_lossy(k);
    let out = p.value().zip_map(&t.value(), |a, b| sigmoid(kk * (a - b)));
    let m = out.clone();
    p.tape().custom("binarize", &[p, t], out, move |grad, _| {
        let d = grad.zip_map(&m, |g, v| g * kk * v * (T::one() - v));
        vec![Some(d.clone()), Some(d.scale(-T::one()))]
    })
}

/// Value-level differentiable binarization.
pub fn differentiable_binarize<T: Scalar>(p: &SaliencyMaps<T>, t: &SaliencyMaps<T>, k: f64) -> Result<SaliencyMaps<T>> {
    if p.data.shape() != t.data.shape() {
        return Err(Error::contract(format!(
            "probability {:?} and threshold {:?} maps differ in shape",
            p.data.shape(),
            t.data.shape()
        )));
    }
    if !(k > 0.0) {
        return Err(Error::contract("steepness must be positive"));
    }
    let tape = Tape::inference();
    let m = binarize(tape.constant(p.data.clone()), tape.constant(t.data.clone()), k);
    SaliencyMaps::new((*m.value()).clone())
}

/// Runs both branches outside a training graph.
pub fn cem_branches<T: Scalar>(
    store: &ParamStore<T>,
    cem: &Cem,
    f_d: &FeatureStack<T>,
    side: usize,
    train: bool,
) -> Result<(SaliencyMaps<T>, SaliencyMaps<T>)> {
    if f_d.data.shape()[1] != cem.prob.hidden.conv.in_ch {
        return Err(Error::contract("decoder feature width does not match the enhancement heads"));
    }
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, train);
    let (p, t) = cem.branches(&ctx, tape.constant(f_d.data.clone()), side);
    Ok((SaliencyMaps::new((*p.value()).clone())?, SaliencyMaps::new((*t.value()).clone())?))
}

/// Decision after evaluating a loss at steepness `k_current`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Steepness {
    pub k: f64,
    /// The step must be recomputed with `k` before updating.
    pub recompute: bool,
}

/// Falls back to `k_fallback` when the loss is not finite.
pub fn steepness_fallback<T: Scalar>(loss_value: T, k_current: f64, k_fallback: f64) -> Steepness {
    if loss_value.is_finite() {
        Steepness { k: k_current, recompute: false }
    } else {
        Steepness { k: k_fallback, recompute: true }
    }
}
