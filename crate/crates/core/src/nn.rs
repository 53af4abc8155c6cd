//! Parameter storage and the basic layers (convolution, batch norm, linear).

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// A named tensor owned by a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for running statistics that the optimizer must not touch.
    pub trainable: bool,
}

/// Flat, ordered collection of every tensor a model owns.
///
/// Names follow `module.submodule.param` and are the checkpoint keys.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> &ParamEntry<T> {
        &self.entries[index]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| e.trainable).map(|(i, _)| i)
    }
}

/// Forward-pass context: tape, parameters and mode.
pub struct Ctx<'t, T> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
    pub train: bool,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

/// Batch statistics observed by a train-mode batch norm, applied after the pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, index: usize) -> Var<'t, T> {
        self.tape.param(index, &self.store.get(index).value)
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        self.bn_updates.take()
    }
}

/// Applies running-statistic updates with the given momentum.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: T) {
    let keep = T::one() - momentum;
    for u in updates {
        for (r, &m) in store.value_mut(u.mean_index).data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in store.value_mut(u.var_index).data_mut().iter_mut().zip(&u.var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| lit(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true));
        Self {
            weight,
            bias,
            geom: ConvGeom { stride, pad: kernel / 2 },
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let b = self.bias.map(|i| ctx.param(i));
        x.conv2d(ctx.param(self.weight), b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let xv = x.value();
        let (n, c, h, w) = xv.dims4();
        let count = n * h * w;
        let eps: T = lit(BN_EPS);
        let batch_stats = ctx.train && count > 1;
        let (mean, var) = if batch_stats {
            let (mean, var) = kernels::channel_stats(&xv);
            let corr = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                mean_index: self.running_mean,
                var_index: self.running_var,
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * corr).collect(),
            });
            (mean, var)
        } else {
            (
                ctx.store.get(self.running_mean).value.data().to_vec(),
                ctx.store.get(self.running_var).value.data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = gamma.value();
        let b = beta.value();
        let out = kernels::channel_affine(&xv, &mean, &inv_std, g.data(), b.data());
        let plane = h * w;
        ctx.tape.custom("batch_norm", &[x, gamma, beta], out, move |grad, needs| {
            let mut gx = needs[0].then(|| Tensor::zeros(&[n, c, h, w]));
            let mut gg = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for bi in 0..n {
                    let off = (bi * c + ch) * plane;
                    for p in off..off + plane {
                        let xhat = (xv.data()[p] - m) * is;
                        sum_g += grad.data()[p];
                        sum_gx += grad.data()[p] * xhat;
                    }
                }
                gg.data_mut()[ch] = sum_gx;
                gb.data_mut()[ch] = sum_g;
                if let Some(gx) = gx.as_mut() {
                    let gam = g.data()[ch];
                    for bi in 0..n {
                        let off = (bi * c + ch) * plane;
                        for p in off..off + plane {
                            gx.data_mut()[p] = if batch_stats {
                                let xhat = (xv.data()[p] - m) * is;
                                gam * is * (grad.data()[p] - sum_g / cnt - xhat * sum_gx / cnt)
                            } else {
                                gam * is * grad.data()[p]
                            };
                        }
                    }
                }
            }
            vec![gx, Some(gg), Some(gb)]
        })
    }
}

/// Convolution followed by batch norm and a rectifier.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        conv_bias: bool,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, conv_bias);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        Self { conv, bn }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_fn(&[out_dim, in_dim], |_| lit(rng.random_range(-bound..bound))),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(ctx.param(self.weight), ctx.param(self.bias))
    }
}
