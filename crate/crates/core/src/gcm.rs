//! Group collaboration: cross-multiplying each group's features with both
//! consensus vectors. Same-group products are supervised with the ground
//! truth, cross-group products with all-zero maps.
//!
//! The prediction head only exists in training; inference never builds it.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gam::correlate;
use crate::nn::{Conv2d, ConvBnRelu, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{Consensus, FeatureStack, SaliencyMaps};

/// Maps predicted from same-group (`m_plus`) and cross-group (`m_minus`) products.
#[derive(Clone, Debug, PartialEq)]
pub struct CollabMaps<T> {
    pub m_plus: SaliencyMaps<T>,
    pub m_minus: SaliencyMaps<T>,
}

/// Tape-level cross multiplication.
///
/// Returns `(F+, F-)` with `F+ = [F1*E1; F2*E2]` and `F- = [F1*E2; F2*E1]`
/// stacked along the batch axis.
pub fn cross<'t, T: Scalar>(
    f1: Var<'t, T>,
    f2: Var<'t, T>,
    e1: Var<'t, T>,
    e2: Var<'t, T>,
) -> (Var<'t, T>, Var<'t, T>) {
    let plus = Var::concat_rows(&[correlate(f1, e1), correlate(f2, e2)]);
    let minus = Var::concat_rows(&[correlate(f1, e2), correlate(f2, e1)]);
    (plus, minus)
}

/// Value-level cross multiplication over validated types.
pub fn cross_collaborate<T: Scalar>(
    f1: &FeatureStack<T>,
    f2: &FeatureStack<T>,
    e1: &Consensus<T>,
    e2: &Consensus<T>,
) -> Result<(FeatureStack<T>, FeatureStack<T>)> {
    let c = f1.data.shape()[1];
    if f2.data.shape()[1..] != f1.data.shape()[1..] || e1.channels() != c || e2.channels() != c {
        return Err(Error::contract(format!(
            "cross collaboration shapes disagree: {:?}, {:?}, E {} / {}",
            f1.data.shape(),
            f2.data.shape(),
            e1.channels(),
            e2.channels()
        )));
    }
    let tape = Tape::inference();
    let (p, m) = cross(
        tape.constant(f1.data.clone()),
        tape.constant(f2.data.clone()),
        tape.constant(e1.data.clone()),
        tape.constant(e2.data.clone()),
    );
    Ok((
        FeatureStack::new((*p.value()).clone(), f1.stride)?,
        FeatureStack::new((*m.value()).clone(), f1.stride)?,
    ))
}

/// Supervision for `(M+, M-)`: the ground truth and all-zero maps.
pub fn gcm_targets<T: Scalar>(gt: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (gt.clone(), Tensor::zeros(gt.shape()))
}

/// `conv3x3(C -> C/4) + BN + ReLU`, `conv1x1(C/4 -> 1)`, sigmoid, upsample.
#[derive(Clone, Debug)]
pub struct GcmHead {
    pub hidden: ConvBnRelu,
    pub out: Conv2d,
}

impl GcmHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize) -> Self {
        let mid = (in_ch / 4).max(1);
        Self {
            hidden: ConvBnRelu::new(store, rng, &format!("{name}.hidden"), in_ch, mid, 3, 1, false),
            out: Conv2d::new(store, rng, &format!("{name}.out"), mid, 1, 1, 1, true),
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: Var<'t, T>, side: usize) -> Var<'t, T> {
        self.out
            .forward(ctx, self.hidden.forward(ctx, f))
            .sigmoid()
            .resize(side, side)
    }
}

/// Runs a head on a feature stack outside any training graph.
pub fn gcm_predict<T: Scalar>(
    store: &ParamStore<T>,
    head: &GcmHead,
    f: &FeatureStack<T>,
    side: usize,
    train: bool,
) -> Result<SaliencyMaps<T>> {
    if f.data.shape()[1] != head.hidden.conv.in_ch {
        return Err(Error::contract(format!(
            "head expects {} channels, got {}",
            head.hidden.conv.in_ch,
            f.data.shape()[1]
        )));
    }
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, train);
    let m = head.forward(&ctx, tape.constant(f.data.clone()), side);
    SaliencyMaps::new((*m.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, shape: &[usize]) -> FeatureStack<f64> {
        FeatureStack::new(Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)), 32).unwrap()
    }

    fn random_consensus(rng: &mut ChaCha8Rng, c: usize) -> Consensus<f64> {
        Consensus::new(Tensor::from_fn(&[1, c, 1, 1], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn equal_consensus_gives_equal_products() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (f1, f2) = (random_stack(&mut r, &[2, 3, 2, 2]), random_stack(&mut r, &[2, 3, 2, 2]));
        let e = random_consensus(&mut r, 3);
        let (p, m) = cross_collaborate(&f1, &f2, &e, &e).unwrap();
        assert_eq!(p.data, m.data);
    }

    #[test]
    fn selector_consensus() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (f1, f2) = (random_stack(&mut r, &[2, 3, 2, 2]), random_stack(&mut r, &[2, 3, 2, 2]));
        let ones = Consensus::new(Tensor::ones(&[1, 3, 1, 1])).unwrap();
        let zeros = Consensus::new(Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        let (p, m) = cross_collaborate(&f1, &f2, &ones, &zeros).unwrap();
        assert_eq!(p.data.slice_rows(0, 2), f1.data);
        assert!(p.data.slice_rows(2, 4).data().iter().all(|&v| v == 0.0));
        assert!(m.data.slice_rows(0, 2).data().iter().all(|&v| v == 0.0));
        assert_eq!(m.data.slice_rows(2, 4), f2.data);
    }

    #[test]
    fn quadrants_match_channel_product_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (f1, f2) = (random_stack(&mut r, &[2, 3, 2, 2]), random_stack(&mut r, &[2, 3, 2, 2]));
        let (e1, e2) = (random_consensus(&mut r, 3), random_consensus(&mut r, 3));
        let (p, m) = cross_collaborate(&f1, &f2, &e1, &e2).unwrap();
        let oracle = |f: &FeatureStack<f64>, e: &Consensus<f64>| -> Vec<f64> {
            let mut out = Vec::new();
            for n in 0..2 {
                for c in 0..3 {
                    for q in 0..4 {
                        out.push(f.data.data()[(n * 3 + c) * 4 + q] * e.data.data()[c]);
                    }
                }
            }
            out
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6);
        assert!(close(&p.data.data()[..24], &oracle(&f1, &e1)));
        assert!(close(&p.data.data()[24..], &oracle(&f2, &e2)));
        assert!(close(&m.data.data()[..24], &oracle(&f1, &e2)));
        assert!(close(&m.data.data()[24..], &oracle(&f2, &e1)));
    }

    #[test]
    fn swapping_groups_swaps_halves() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (f1, f2) = (random_stack(&mut r, &[2, 3, 2, 2]), random_stack(&mut r, &[2, 3, 2, 2]));
        let (e1, e2) = (random_consensus(&mut r, 3), random_consensus(&mut r, 3));
        let (p, m) = cross_collaborate(&f1, &f2, &e1, &e2).unwrap();
        let (ps, ms) = cross_collaborate(&f2, &f1, &e2, &e1).unwrap();
        assert_eq!(p.data.slice_rows(0, 2), ps.data.slice_rows(2, 4));
        assert_eq!(p.data.slice_rows(2, 4), ps.data.slice_rows(0, 2));
        assert_eq!(m.data.slice_rows(0, 2), ms.data.slice_rows(2, 4));
        assert_eq!(m.data.slice_rows(2, 4), ms.data.slice_rows(0, 2));
    }

    #[test]
    fn targets() {
        let gt = Tensor::<f32>::ones(&[2, 1, 4, 4]);
        let (tp, tm) = gcm_targets(&gt);
        assert_eq!(tp, gt);
        assert_eq!(tm.sum(), 0.0);
        let empty = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let (tp, tm) = gcm_targets(&empty);
        assert_eq!(tp.sum() + tm.sum(), 0.0);
    }

    fn zeroed_head(c: usize) -> (ParamStore<f64>, GcmHead) {
        let mut store = ParamStore::new();
        let head = GcmHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "gcm", c);
        for i in 0..store.len() {
            if store.get(i).trainable {
                store.value_mut(i).data_mut().fill(0.0);
            }
        }
        (store, head)
    }

    #[test]
    fn zero_head_predicts_half() {
        let (store, head) = zeroed_head(8);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let f = random_stack(&mut r, &[3, 8, 2, 2]);
        for train in [false, true] {
            let m = gcm_predict(&store, &head, &f, 64, train).unwrap();
            assert_eq!(m.data.shape(), &[3, 1, 64, 64]);
            assert!(m.data.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn fixed_weights_match_direct_convolution() {
        // C = 2 gives a single hidden channel.
        let (mut store, head) = zeroed_head(2);
        let w3: Vec<f64> = (0..18).map(|i| 0.05 * i as f64 - 0.4).collect();
        store.value_mut(head.hidden.conv.weight).data_mut().copy_from_slice(&w3);
        store.value_mut(head.hidden.bn.gamma).data_mut()[0] = 1.5;
        store.value_mut(head.hidden.bn.beta).data_mut()[0] = 0.1;
        store.value_mut(head.out.weight).data_mut()[0] = 0.8;
        store.value_mut(head.out.bias.unwrap()).data_mut()[0] = -0.2;
        let x: Vec<f64> = vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.4, -1.2];
        let f = FeatureStack::new(Tensor::new(vec![1, 2, 2, 2], x.clone()).unwrap(), 32).unwrap();
        let m = gcm_predict(&store, &head, &f, 2, false).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..2).contains(&iy) && (0..2).contains(&ix) {
                                acc += x[c * 4 + iy as usize * 2 + ix as usize] * w3[c * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
                // eval-mode batch norm with running mean 0 and variance 1
                let h = (1.5 * acc / (1.0 + BN_EPS).sqrt() + 0.1).max(0.0);
                let want = 1.0 / (1.0 + (-(0.8 * h - 0.2)).exp());
                assert!((m.data.data()[oy * 2 + ox] - want).abs() <= 1e-5);
            }
        }
    }
}
