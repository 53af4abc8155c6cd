//! Group affinity: all-pairs pixel affinity within one group, reduced to a
//! per-pixel attention map and pooled into the group consensus.
//!
//! Pipeline for a group feature `F (N x C x H x W)`:
//!
//! 1. `S = theta(F)^T phi(F)` over every pixel pair of the group (`NHW x NHW`).
//! 2. For each row, the maximum inside each source image's `HW` block (`NHW x N`).
//! 3. Mean over the `N` maxima, scale, softmax (jointly over `NHW` by default).
//! 4. `E = mean_{n,h,w}(F * A)`, a `1 x C x 1 x 1` consensus.
//! 5. `F_out = F * E` per channel (depth-wise correlation with a 1x1 kernel).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::AttentionNorm;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::types::{Consensus, FeatureStack};

/// Output width of the two embedding convolutions.
pub const EMBED_DIM: usize = 512;

/// Attention over every pixel of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityAttention<T> {
    /// `N x 1 x H x W` normalized attention.
    pub per_pixel: Tensor<T>,
    /// `N*H*W` averaged maxima before normalization.
    pub raw_vector: Tensor<T>,
}

/// Weights of the two 3x3 embedding functions (no bias).
#[derive(Clone, Debug)]
pub struct EmbeddingPair<T> {
    /// `512 x C x 3 x 3`
    pub theta: Tensor<T>,
    pub phi: Tensor<T>,
}

impl<T: Scalar> EmbeddingPair<T> {
    pub fn new(theta: Tensor<T>, phi: Tensor<T>) -> Result<Self> {
        for (name, w) in [("theta", &theta), ("phi", &phi)] {
            if w.rank() != 4 || w.shape()[0] != EMBED_DIM || w.shape()[2..] != [3, 3] {
                return Err(Error::contract(format!("{name} must be {EMBED_DIM} x C x 3 x 3, got {:?}", w.shape())));
            }
        }
        if theta.shape() != phi.shape() {
            return Err(Error::contract("theta and phi must share a shape"));
        }
        Ok(Self { theta, phi })
    }

    /// Fan-in scaled random weights.
    pub fn random<R: Rng>(rng: &mut R, in_ch: usize) -> Self {
        let mut store = ParamStore::new();
        let t = Conv2d::new(&mut store, rng, "theta", in_ch, EMBED_DIM, 3, 1, false);
        let p = Conv2d::new(&mut store, rng, "phi", in_ch, EMBED_DIM, 3, 1, false);
        Self {
            theta: store.get(t.weight).value.clone(),
            phi: store.get(p.weight).value.clone(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingPair<U> {
        EmbeddingPair {
            theta: self.theta.cast(),
            phi: self.phi.cast(),
        }
    }
}

const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };

/// Affinity settings shared by the layer and the value-level functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityOptions {
    pub norm: AttentionNorm,
    pub scale: f64,
}

impl Default for AffinityOptions {
    fn default() -> Self {
        Self {
            norm: AttentionNorm::Joint,
            scale: 1.0,
        }
    }
}

/// Affinity reduction on already-embedded features. Returns `(A_F, A_S)`.
pub fn attend<'t, T: Scalar>(
    theta_f: Var<'t, T>,
    phi_f: Var<'t, T>,
    opts: AffinityOptions,
) -> (Var<'t, T>, Var<'t, T>) {
    let s = theta_f.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let q = theta_f.pixel_rows();
    let k = phi_f.pixel_rows();
    let raw = q.matmul_nt(k).block_max(hw).mean_cols();
    let segment = match opts.norm {
        AttentionNorm::Joint => n * hw,
        AttentionNorm::PerImage => hw,
    };
    let att = raw.scale(lit(opts.scale)).softmax_segments(segment).reshape(&[n, 1, h, w]);
    (raw, att)
}

/// `E = mean over (n, h, w) of F * A`.
pub fn consensus_of<'t, T: Scalar>(f: Var<'t, T>, att: Var<'t, T>) -> Var<'t, T> {
    f.mul(att).mean_nhw()
}

/// Per-channel product with a `1 x C x 1 x 1` consensus.
pub fn correlate<'t, T: Scalar>(f: Var<'t, T>, e: Var<'t, T>) -> Var<'t, T> {
    let (fc, ec) = (f.shape()[1], e.shape()[1]);
    assert_eq!(fc, ec, "depth-wise correlation channel mismatch: {fc} vs {ec}");
    f.mul(e)
}

/// The trainable module: two embedding convolutions plus the fixed reduction.
#[derive(Clone, Debug)]
pub struct Gam {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub opts: AffinityOptions,
}

/// What one group contributes: attention, consensus and conditioned features.
pub struct GamOutput<'t, T> {
    pub attention: Var<'t, T>,
    pub consensus: Var<'t, T>,
    pub features: Var<'t, T>,
}

impl Gam {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize, opts: AffinityOptions) -> Self {
        Self {
            theta: Conv2d::new(store, rng, &format!("{name}.theta"), in_ch, EMBED_DIM, 3, 1, false),
            phi: Conv2d::new(store, rng, &format!("{name}.phi"), in_ch, EMBED_DIM, 3, 1, false),
            opts,
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.param_count() + self.phi.param_count()
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: Var<'t, T>) -> GamOutput<'t, T> {
        let (_, attention) = attend(self.theta.forward(ctx, f), self.phi.forward(ctx, f), self.opts);
        let consensus = consensus_of(f, attention);
        GamOutput {
            attention,
            consensus,
            features: correlate(f, consensus),
        }
    }
}

fn check_pair<T: Scalar>(f: &Tensor<T>, emb: &EmbeddingPair<T>) -> Result<()> {
    if f.rank() != 4 {
        return Err(Error::contract(format!("features must be rank 4, got {:?}", f.shape())));
    }
    if f.shape()[1] != emb.in_channels() {
        return Err(Error::contract(format!(
            "feature channels {} differ from embedding input {}",
            f.shape()[1],
            emb.in_channels()
        )));
    }
    Ok(())
}

/// `HW x HW` inner products between embedded pixels of two `C x H x W` features.
pub fn pairwise_affinity<T: Scalar>(f_n: &Tensor<T>, f_m: &Tensor<T>, emb: &EmbeddingPair<T>) -> Result<Tensor<T>> {
    if f_n.shape() != f_m.shape() || f_n.rank() != 3 {
        return Err(Error::contract(format!(
            "pairwise affinity needs two equal C x H x W features, got {:?} and {:?}",
            f_n.shape(),
            f_m.shape()
        )));
    }
    let s = f_n.shape();
    let as4 = |t: &Tensor<T>| t.clone().reshaped(&[1, s[0], s[1], s[2]]).unwrap();
    let (fa, fb) = (as4(f_n), as4(f_m));
    check_pair(&fa, emb)?;
    let tape = Tape::inference();
    let q = tape.constant(fa).conv2d(tape.constant(emb.theta.clone()), None, SAME3);
    let k = tape.constant(fb).conv2d(tape.constant(emb.phi.clone()), None, SAME3);
    Ok((*q.pixel_rows().matmul_nt(k.pixel_rows()).value()).clone())
}

/// Group-wide affinity attention for one feature stack.
pub fn group_affinity_attention<T: Scalar>(
    f: &FeatureStack<T>,
    emb: &EmbeddingPair<T>,
    opts: AffinityOptions,
) -> Result<AffinityAttention<T>> {
    check_pair(&f.data, emb)?;
    if f.data.is_empty() {
        return Err(Error::contract("group affinity over zero pixels"));
    }
    let tape = Tape::inference();
    let x = tape.constant(f.data.clone());
    let (raw, att) = attend(
        x.conv2d(tape.constant(emb.theta.clone()), None, SAME3),
        x.conv2d(tape.constant(emb.phi.clone()), None, SAME3),
        opts,
    );
    let per_pixel = (*att.value()).clone();
    let raw_vector = (*raw.value()).clone();
    Ok(AffinityAttention { per_pixel, raw_vector })
}

/// Attention-weighted mean of a feature stack.
pub fn attention_consensus<T: Scalar>(f: &FeatureStack<T>, a: &AffinityAttention<T>) -> Result<Consensus<T>> {
    let (n, _, h, w) = f.data.dims4();
    if a.per_pixel.shape() != [n, 1, h, w] {
        return Err(Error::contract(format!(
            "attention {:?} does not match features {:?}",
            a.per_pixel.shape(),
            f.data.shape()
        )));
    }
    let tape = Tape::inference();
    let e = consensus_of(tape.constant(f.data.clone()), tape.constant(a.per_pixel.clone()));
    Consensus::new((*e.value()).clone())
}

/// Per-channel product of features with a consensus.
pub fn depthwise_correlate<T: Scalar>(f: &FeatureStack<T>, e: &Consensus<T>) -> Result<FeatureStack<T>> {
    if f.data.shape()[1] != e.channels() {
        return Err(Error::contract(format!(
            "channel mismatch: features {} vs consensus {}",
            f.data.shape()[1],
            e.channels()
        )));
    }
    let tape = Tape::inference();
    let out = correlate(tape.constant(f.data.clone()), tape.constant(e.data.clone()));
    FeatureStack::new((*out.value()).clone(), f.stride)
}
