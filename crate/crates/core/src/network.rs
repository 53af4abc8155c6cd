//! The assembled model: shared encoder, group affinity on the deepest
//! features, cross-group collaboration heads (training only), a top-down
//! decoder with 1x1 laterals, confidence enhancement, and the two
//! classification heads.
//!
//! Both groups of a batch travel through every layer as one stacked batch of
//! `2N` images; group `a` occupies rows `[0, N)` and group `b` rows `[N, 2N)`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cem::Cem;
use crate::config::{Backbone, RunConfig};
use crate::error::{Error, Result};
use crate::gam::{AffinityOptions, Gam, EMBED_DIM};
use crate::gcm::{self, CollabMaps, GcmHead};
use crate::nn::{Conv2d, ConvBnRelu, Ctx, Linear, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::types::{FeatureStack, GroupBatch, SaliencyMaps};

/// Channel width of the decoder and its laterals.
pub const DECODER_WIDTH: usize = 64;
/// Strides of the four encoder stages.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// One encoder layer: 3x3 convolution + BN + ReLU, or 2x2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, stride: usize, bias: bool },
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: Backbone,
    pub stage_channels: [usize; 4],
}

impl EncoderSpec {
    pub fn tiny() -> Self {
        Self { name: Backbone::Tiny, stage_channels: [32, 64, 128, 256] }
    }

    pub fn vgg16bn() -> Self {
        Self { name: Backbone::Vgg16Bn, stage_channels: [128, 256, 512, 512] }
    }

    pub fn for_backbone(b: Backbone) -> Self {
        match b {
            Backbone::Tiny => Self::tiny(),
            Backbone::Vgg16Bn => Self::vgg16bn(),
        }
    }

    /// Layers of each stage; stage `i` ends at stride `STAGE_STRIDES[i]`.
    pub fn stages(&self) -> Vec<Vec<LayerSpec>> {
        let conv = |in_ch, out_ch, stride, bias| LayerSpec::Conv { in_ch, out_ch, stride, bias };
        match self.name {
            Backbone::Tiny => {
                let c = self.stage_channels;
                vec![
                    vec![conv(3, c[0], 2, false), conv(c[0], c[0], 2, false)],
                    vec![conv(c[0], c[1], 2, false), conv(c[1], c[1], 1, false)],
                    vec![conv(c[1], c[2], 2, false), conv(c[2], c[2], 1, false)],
                    vec![conv(c[2], c[3], 2, false), conv(c[3], c[3], 1, false)],
                ]
            }
            Backbone::Vgg16Bn => {
                let block = |widths: &[(usize, usize)]| {
                    let mut v: Vec<LayerSpec> = widths.iter().map(|&(i, o)| conv(i, o, 1, true)).collect();
                    v.push(LayerSpec::Pool);
                    v
                };
                let mut s0 = block(&[(3, 64), (64, 64)]);
                s0.extend(block(&[(64, 128), (128, 128)]));
                vec![
                    s0,
                    block(&[(128, 256), (256, 256), (256, 256)]),
                    block(&[(256, 512), (512, 512), (512, 512)]),
                    block(&[(512, 512), (512, 512), (512, 512)]),
                ]
            }
        }
    }

    /// Trainable scalars: conv weights and biases plus BN scale and shift.
    pub fn n_params(&self) -> usize {
        self.stages()
            .iter()
            .flatten()
            .map(|l| match *l {
                LayerSpec::Conv { in_ch, out_ch, bias, .. } => conv_params(in_ch, out_ch, 3, bias) + 2 * out_ch,
                LayerSpec::Pool => 0,
            })
            .sum()
    }
}

fn conv_params(in_ch: usize, out_ch: usize, k: usize, bias: bool) -> usize {
    k * k * in_ch * out_ch + if bias { out_ch } else { 0 }
}

#[derive(Clone, Debug)]
enum EncLayer {
    Cbr(ConvBnRelu),
    Pool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    stages: Vec<Vec<EncLayer>>,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, spec: EncoderSpec) -> Self {
        let stages = spec
            .stages()
            .iter()
            .enumerate()
            .map(|(s, layers)| {
                let mut j = 0;
                layers
                    .iter()
                    .map(|l| match *l {
                        LayerSpec::Conv { in_ch, out_ch, stride, bias } => {
                            j += 1;
                            let name = format!("encoder.stage{}.conv{}", s + 1, j);
                            EncLayer::Cbr(ConvBnRelu::new(store, rng, &name, in_ch, out_ch, 3, stride, bias))
                        }
                        LayerSpec::Pool => EncLayer::Pool,
                    })
                    .collect()
            })
            .collect();
        Self { spec, stages }
    }

    /// Convolution blocks in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &ConvBnRelu> {
        self.stages.iter().flatten().filter_map(|l| match l {
            EncLayer::Cbr(c) => Some(c),
            EncLayer::Pool => None,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> [Var<'t, T>; 4] {
        let mut cur = x;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for layer in stage {
                cur = match layer {
                    EncLayer::Cbr(c) => c.forward(ctx, cur),
                    EncLayer::Pool => cur.max_pool2(),
                };
            }
            outs.push(cur);
        }
        [outs[0], outs[1], outs[2], outs[3]]
    }
}

/// Top-down pathway: a 1x1 projection of the collaborated deepest features,
/// then for strides 16, 8, 4: upsample x2, add a 1x1 lateral, conv3x3+BN+ReLU.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub top: Conv2d,
    /// Laterals for strides 4, 8, 16.
    pub laterals: Vec<Conv2d>,
    /// Fusion blocks for strides 4, 8, 16.
    pub blocks: Vec<ConvBnRelu>,
    pub width: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        stage_channels: [usize; 4],
        width: usize,
    ) -> Self {
        let top = Conv2d::new(store, rng, &format!("{name}.top"), stage_channels[3], width, 1, 1, true);
        let laterals = (0..3)
            .map(|i| Conv2d::new(store, rng, &format!("{name}.lateral{}", i + 1), stage_channels[i], width, 1, 1, true))
            .collect();
        let blocks = (0..3)
            .map(|i| ConvBnRelu::new(store, rng, &format!("{name}.fuse{}", i + 1), width, width, 3, 1, false))
            .collect();
        Self { top, laterals, blocks, width }
    }

    pub fn param_count(&self) -> usize {
        self.top.param_count()
            + self.laterals.iter().map(Conv2d::param_count).sum::<usize>()
            + self.blocks.iter().map(ConvBnRelu::param_count).sum::<usize>()
    }

    /// `laterals` are the stride-4, 8 and 16 encoder features.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, laterals: &[Var<'t, T>], collab: Var<'t, T>) -> Var<'t, T> {
        let mut p = self.top.forward(ctx, collab);
        for i in (0..3).rev() {
            let s = p.shape();
            let up = p.resize(s[2] * 2, s[3] * 2);
            p = self.blocks[i].forward(ctx, up.add(self.laterals[i].forward(ctx, laterals[i])));
        }
        p
    }
}

/// Global average pooling followed by one linear layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, deep: Var<'t, T>) -> Var<'t, T> {
        self.linear.forward(ctx, deep.gap())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Training-only graph nodes.
pub struct TrainVars<'t, T> {
    pub m_plus: Var<'t, T>,
    pub m_minus: Var<'t, T>,
    pub logits_acm: Var<'t, T>,
    pub logits_racm: Var<'t, T>,
    /// Deepest features of the masked re-encoding.
    pub f_r: Var<'t, T>,
}

pub struct ForwardVars<'t, T> {
    pub maps: Var<'t, T>,
    pub train: Option<TrainVars<'t, T>>,
}

/// Detached results of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    pub maps: SaliencyMaps<T>,
    pub collab: Option<CollabMaps<T>>,
    pub logits_acm: Option<Tensor<T>>,
    pub logits_racm: Option<Tensor<T>>,
    pub features_masked: Option<FeatureStack<T>>,
}

#[derive(Clone, Debug)]
pub struct CoSodNet<T> {
    pub config: RunConfig,
    pub n_classes: usize,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub gam: Gam,
    pub gcm_head: GcmHead,
    pub decoder: Decoder,
    pub cem: Cem,
    pub classifier: ClassifierHead,
}

impl<T: Scalar> CoSodNet<T> {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: &RunConfig, n_classes: usize) -> Result<Self> {
        if config.image_size == 0 || !config.image_size.is_multiple_of(32) {
            return Err(Error::config("image_size", "must be a positive multiple of 32"));
        }
        if n_classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {n_classes}")));
        }
        let spec = EncoderSpec::for_backbone(config.backbone);
        let c = spec.stage_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, spec);
        let opts = AffinityOptions { norm: config.attention_norm, scale: config.affinity_scale() };
        let gam = Gam::new(&mut store, &mut rng, "gam", c[3], opts);
        let gcm_head = GcmHead::new(&mut store, &mut rng, "gcm", c[3]);
        let decoder = Decoder::new(&mut store, &mut rng, "decoder", c, DECODER_WIDTH);
        let cem = Cem::new(&mut store, &mut rng, "cem", DECODER_WIDTH);
        let classifier = ClassifierHead { linear: Linear::new(&mut store, &mut rng, "classifier", c[3], n_classes) };
        Ok(Self {
            config: config.clone(),
            n_classes,
            store,
            encoder,
            gam,
            gcm_head,
            decoder,
            cem,
            classifier,
        })
    }

    /// Closed-form count of trainable scalars for a backbone and class count.
    pub fn analytic_param_count(backbone: Backbone, n_classes: usize) -> usize {
        let spec = EncoderSpec::for_backbone(backbone);
        let c = spec.stage_channels;
        let d = DECODER_WIDTH;
        let cbr = |i, o, bias| conv_params(i, o, 3, bias) + 2 * o;
        let gam = 2 * conv_params(c[3], EMBED_DIM, 3, false);
        let q = (c[3] / 4).max(1);
        let gcm = cbr(c[3], q, false) + conv_params(q, 1, 1, true);
        let dec = conv_params(c[3], d, 1, true)
            + (0..3).map(|i| conv_params(c[i], d, 1, true)).sum::<usize>()
            + 3 * cbr(d, d, false);
        let h = (d / 2).max(1);
        let cem = 2 * (cbr(d, h, false) + conv_params(h, 1, 1, true));
        let cls = c[3] * n_classes + n_classes;
        spec.n_params() + gam + gcm + dec + cem + cls
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Parameter indices owned by the encoder.
    pub fn encoder_params(&self) -> Vec<usize> {
        self.store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with("encoder."))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn side(&self) -> usize {
        self.config.image_size
    }

    /// Channel standardization of `N x 3 x S x S` images in `[0, 1]`.
    pub fn normalize(&self, images: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = images.dims4();
        let (mean, std) = (self.config.norm_mean, self.config.norm_std);
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / (h * w)) % c;
            *v = (*v - lit::<T>(mean[ch])) / lit::<T>(std[ch]);
        }
        out
    }

    /// The full two-group pass. In [`Mode::Infer`] only the final maps are
    /// built: no collaboration head, no classifiers and no second encoder pass.
    pub fn siamese<'t>(&self, ctx: &Ctx<'t, T>, batch: &GroupBatch<T>, mode: Mode, k: f64) -> ForwardVars<'t, T> {
        let n = batch.n();
        let side = batch.side();
        let x = Tensor::concat_rows(&[&self.normalize(&batch.group_a), &self.normalize(&batch.group_b)])
            .expect("validated batch");
        let x = ctx.tape.constant(x);
        let feats = self.encoder.forward(ctx, x);
        let deep = feats[3];
        let (f1, f2) = (deep.slice_rows(0, n), deep.slice_rows(n, 2 * n));
        let g1 = self.gam.forward(ctx, f1);
        let g2 = self.gam.forward(ctx, f2);
        let collab = Var::concat_rows(&[g1.features, g2.features]);
        let f_d = self.decoder.forward(ctx, &feats[..3], collab);
        let maps = self.cem.forward(ctx, f_d, side, k);
        if mode == Mode::Infer {
            return ForwardVars { maps, train: None };
        }
        let (f_plus, f_minus) = gcm::cross(f1, f2, g1.consensus, g2.consensus);
        let m_plus = self.gcm_head.forward(ctx, f_plus, side);
        let m_minus = self.gcm_head.forward(ctx, f_minus, side);
        let logits_acm = self.classifier.forward(ctx, deep);
        let (logits_racm, f_r) = self.reencode(ctx, x, maps);
        ForwardVars {
            maps,
            train: Some(TrainVars { m_plus, m_minus, logits_acm, logits_racm, f_r }),
        }
    }

    /// Masks normalized inputs with `maps` and runs them through the same
    /// encoder; returns the classifier logits and the deepest features.
    pub fn reencode<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, maps: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let masked = x.mul(maps);
        let f_r = self.encoder.forward(ctx, masked)[3];
        (self.classifier.forward(ctx, f_r), f_r)
    }

    fn check_batch(&self, batch: &GroupBatch<T>) -> Result<()> {
        if !batch.side().is_multiple_of(32) {
            return Err(Error::contract(format!("side {} is not a multiple of 32", batch.side())));
        }
        Ok(())
    }

    /// Detached forward pass. Train mode uses batch statistics but leaves
    /// running statistics untouched.
    pub fn forward(&self, batch: &GroupBatch<T>, mode: Mode) -> Result<ForwardOutputs<T>> {
        self.check_batch(batch)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, mode == Mode::Train);
        let out = self.siamese(&ctx, batch, mode, self.config.db_k);
        let val = |v: Var<'_, T>| (*v.value()).clone();
        let maps = SaliencyMaps::new(val(out.maps))?;
        let Some(tv) = out.train else {
            return Ok(ForwardOutputs { maps, collab: None, logits_acm: None, logits_racm: None, features_masked: None });
        };
        Ok(ForwardOutputs {
            maps,
            collab: Some(CollabMaps {
                m_plus: SaliencyMaps::new(val(tv.m_plus))?,
                m_minus: SaliencyMaps::new(val(tv.m_minus))?,
            }),
            logits_acm: Some(val(tv.logits_acm)),
            logits_racm: Some(val(tv.logits_racm)),
            features_masked: Some(FeatureStack::new(val(tv.f_r), 32)?),
        })
    }

    /// Saliency maps for one group, paired with itself.
    pub fn predict_group(&self, images: &Tensor<T>) -> Result<SaliencyMaps<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let batch = GroupBatch::duplicated(images.clone(), 0)?;
        let out = self.forward(&batch, Mode::Infer)?;
        SaliencyMaps::new(out.maps.data.slice_rows(0, n))
    }

    /// Inference-mode encoder features at strides 4, 8, 16 and 32.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Vec<FeatureStack<T>>> {
        let (_, c, h, w) = images.dims4();
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(format!("encoder input must be N x 3 x S x S with S % 32 == 0, got {:?}", images.shape())));
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        let feats = self.encoder.forward(&ctx, tape.constant(self.normalize(images)));
        feats
            .iter()
            .zip(STAGE_STRIDES)
            .map(|(f, s)| FeatureStack::new((*f.value()).clone(), s))
            .collect()
    }

    /// Inference-mode decoder on given laterals (strides 4, 8, 16) and collaborated features.
    pub fn decode(&self, laterals: &[FeatureStack<T>], collab: &FeatureStack<T>) -> Result<FeatureStack<T>> {
        if laterals.len() != 3 {
            return Err(Error::contract("decoder takes three laterals"));
        }
        let (n, _, h, w) = collab.data.dims4();
        for (i, l) in laterals.iter().enumerate() {
            let f = 1 << (3 - i);
            let (ln, lc, lh, lw) = l.data.dims4();
            if ln != n || lc != self.decoder.laterals[i].in_ch || lh != h * f || lw != w * f {
                return Err(Error::contract(format!("lateral {i} has shape {:?}", l.data.shape())));
            }
        }
        if collab.data.shape()[1] != self.decoder.top.in_ch {
            return Err(Error::contract("collaborated features have the wrong width"));
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        let lats: Vec<Var<'_, T>> = laterals.iter().map(|l| tape.constant(l.data.clone())).collect();
        let out = self.decoder.forward(&ctx, &lats, tape.constant(collab.data.clone()));
        FeatureStack::new((*out.value()).clone(), 4)
    }

    /// Inference-mode classifier logits on unmasked images.
    pub fn acm_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.encode(images)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        Ok((*self.classifier.forward(&ctx, tape.constant(feats[3].data.clone())).value()).clone())
    }

    /// Inference-mode masked re-encoding of images in `[0, 1]`.
    pub fn mask_and_reencode(&self, images: &Tensor<T>, maps: &SaliencyMaps<T>) -> Result<(Tensor<T>, FeatureStack<T>)> {
        let (n, _, h, w) = images.dims4();
        if maps.data.shape() != [n, 1, h, w] {
            return Err(Error::contract(format!("maps {:?} do not match images {:?}", maps.data.shape(), images.shape())));
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        let x = tape.constant(self.normalize(images));
        let (logits, f_r) = self.reencode(&ctx, x, tape.constant(maps.data.clone()));
        Ok(((*logits.value()).clone(), FeatureStack::new((*f_r.value()).clone(), 32)?))
    }

    /// External-to-internal name pairs for VGG-16-BN feature weights laid out
    /// as `features.<i>.{weight,bias,running_mean,running_var}`.
    pub fn vgg16bn_manifest(&self) -> Result<Vec<(String, String)>> {
        if self.encoder.spec.name != Backbone::Vgg16Bn {
            return Err(Error::contract("weight import needs the vgg16bn-compatible encoder"));
        }
        let mut pairs = Vec::new();
        let mut idx = 0;
        let mut blocks = self.encoder.blocks();
        for layer in self.encoder.spec.stages().iter().flatten() {
            match layer {
                LayerSpec::Pool => idx += 1,
                LayerSpec::Conv { .. } => {
                    let b = blocks.next().expect("block per conv");
                    let conv = &self.store.get(b.conv.weight).name;
                    let base = conv.trim_end_matches(".weight").trim_end_matches(".conv");
                    pairs.push((format!("features.{idx}.weight"), format!("{base}.conv.weight")));
                    pairs.push((format!("features.{idx}.bias"), format!("{base}.conv.bias")));
                    for (ext, int) in [("weight", "weight"), ("bias", "bias"), ("running_mean", "running_mean"), ("running_var", "running_var")] {
                        pairs.push((format!("features.{}.{ext}", idx + 1), format!("{base}.bn.{int}")));
                    }
                    // conv, bn, relu
                    idx += 3;
                }
            }
        }
        Ok(pairs)
    }

    /// Copies named tensors into the store following `manifest`. Every
    /// external name must be present with a matching shape.
    pub fn import_weights(&mut self, manifest: &[(String, String)], source: &HashMap<String, Tensor<T>>) -> Result<usize> {
        for (ext, int) in manifest {
            let src = source.get(ext).ok_or_else(|| Error::Checkpoint(format!("import source lacks {ext}")))?;
            let i = self
                .store
                .index_of(int)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {int}")))?;
            if src.shape() != self.store.get(i).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{ext} has shape {:?}, {int} expects {:?}",
                    src.shape(),
                    self.store.get(i).value.shape()
                )));
            }
        }
        for (ext, int) in manifest {
            let i = self.store.index_of(int).expect("checked");
            *self.store.value_mut(i) = source[ext].clone();
        }
        Ok(manifest.len())
    }
}

/// Position-weighted sum, used as a cheap fingerprint of a tensor.
pub fn checksum<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.to_f64().unwrap() * (1.0 + (i % 7) as f64))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BN_EPS;
    use rand::Rng;

    fn toy(seed: u64) -> RunConfig {
        RunConfig { seed, image_size: 32, ..RunConfig::toy() }
    }

    fn images(seed: u64, n: usize, s: usize) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, s, s], |_| r.random_range(0.0..1.0))
    }

    fn batch(seed: u64, n: usize, s: usize) -> GroupBatch<f64> {
        let a = images(seed, n, s);
        let b = images(seed + 1, n, s);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
        let gt = |r: &mut ChaCha8Rng| Tensor::from_fn(&[n, 1, s, s], |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
        let (ga, gb) = (gt(&mut r), gt(&mut r));
        GroupBatch::new(a, b, ga, gb, 0, 1).unwrap()
    }

    #[test]
    fn analytic_parameter_counts() {
        for bb in [Backbone::Tiny, Backbone::Vgg16Bn] {
            let cfg = RunConfig { backbone: bb, image_size: 32, ..RunConfig::toy() };
            let net = CoSodNet::<f32>::new(&cfg, 5).unwrap();
            assert_eq!(net.param_count(), CoSodNet::<f32>::analytic_param_count(bb, 5), "{bb:?}");
            let enc: usize = net.encoder_params().iter().filter(|&&i| net.store.get(i).trainable).map(|&i| net.store.get(i).value.len()).sum();
            assert_eq!(enc, EncoderSpec::for_backbone(bb).n_params());
        }
        // 3x3 convs of the tiny stages plus two BN affine vectors each.
        let tiny = 9 * (3 * 32 + 32 * 32 + 32 * 64 + 64 * 64 + 64 * 128 + 128 * 128 + 128 * 256 + 256 * 256)
            + 2 * (32 + 32 + 64 + 64 + 128 + 128 + 256 + 256);
        assert_eq!(EncoderSpec::tiny().n_params(), tiny);
    }

    #[test]
    fn encoder_strides_and_channels() {
        let net = CoSodNet::<f64>::new(&toy(0), 3).unwrap();
        let f = net.encode(&images(1, 2, 64)).unwrap();
        let sizes: Vec<(usize, usize)> = f.iter().map(|s| (s.data.shape()[1], s.data.shape()[2])).collect();
        assert_eq!(sizes, vec![(32, 16), (64, 8), (128, 4), (256, 2)]);
        assert!(net.encode(&images(1, 1, 48)).is_err());
        let vgg = CoSodNet::<f32>::new(&RunConfig { backbone: Backbone::Vgg16Bn, image_size: 32, ..RunConfig::toy() }, 2).unwrap();
        let f = vgg.encode(&images(1, 1, 32).cast()).unwrap();
        let sizes: Vec<(usize, usize)> = f.iter().map(|s| (s.data.shape()[1], s.data.shape()[2])).collect();
        assert_eq!(sizes, vec![(128, 8), (256, 4), (512, 2), (512, 1)]);
    }

    #[test]
    fn duplicated_images_give_duplicated_features() {
        let net = CoSodNet::<f64>::new(&toy(1), 3).unwrap();
        let one = images(3, 1, 32);
        let two = Tensor::concat_rows(&[&one, &one]).unwrap();
        for f in net.encode(&two).unwrap() {
            assert_eq!(f.data.slice_rows(0, 1), f.data.slice_rows(1, 2));
        }
    }

    #[test]
    fn golden_encoder_checksum() {
        let net = CoSodNet::<f64>::new(&toy(7), 3).unwrap();
        let f = net.encode(&images(11, 1, 32)).unwrap();
        let sum = checksum(&f[3].data);
        let again = checksum(&CoSodNet::<f64>::new(&toy(7), 3).unwrap().encode(&images(11, 1, 32)).unwrap()[3].data);
        assert_eq!(sum.to_bits(), again.to_bits());
        // Recorded after the first verified run; the bound absorbs kernel
        // summation-order differences between CPUs.
        let golden = GOLDEN_ENCODER_CHECKSUM;
        assert!((sum - golden).abs() <= 1e-6 * golden.abs().max(1.0), "checksum {sum:.12}");
    }

    const GOLDEN_ENCODER_CHECKSUM: f64 = 61.842897490099;

    fn zero_trainables(net: &mut CoSodNet<f64>) {
        for i in 0..net.store.len() {
            if net.store.get(i).trainable {
                net.store.value_mut(i).data_mut().fill(0.0);
            }
        }
    }

    fn lateral_stacks(net: &CoSodNet<f64>, n: usize, h: usize, seed: u64) -> (Vec<FeatureStack<f64>>, FeatureStack<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c = net.encoder.spec.stage_channels;
        let mut mk = |ch: usize, side: usize, stride: usize| {
            FeatureStack::new(Tensor::from_fn(&[n, ch, side, side], |_| r.random_range(-1.0..1.0)), stride).unwrap()
        };
        let lats = vec![mk(c[0], h * 8, 4), mk(c[1], h * 4, 8), mk(c[2], h * 2, 16)];
        let top = mk(c[3], h, 32);
        (lats, top)
    }

    #[test]
    fn zero_parameters_give_zero_decoder_output() {
        let mut net = CoSodNet::<f64>::new(&toy(2), 3).unwrap();
        zero_trainables(&mut net);
        let (lats, top) = lateral_stacks(&net, 2, 1, 5);
        let out = net.decode(&lats, &top).unwrap();
        assert_eq!(out.data.shape(), &[2, DECODER_WIDTH, 8, 8]);
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_laterals_leave_a_pure_top_down_stack() {
        let mut net = CoSodNet::<f64>::new(&toy(3), 3).unwrap();
        for l in net.decoder.laterals.clone() {
            net.store.value_mut(l.weight).data_mut().fill(0.0);
            net.store.value_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        let (lats, top) = lateral_stacks(&net, 1, 1, 6);
        let (other, _) = lateral_stacks(&net, 1, 1, 99);
        assert_eq!(net.decode(&lats, &top).unwrap(), net.decode(&other, &top).unwrap());
    }

    fn upsample2_oracle(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (2 * h, 2 * w);
        let coord = |o: usize, n: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        };
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, w);
                let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
                let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
                out[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
        out
    }

    fn conv3_oracle(x: &[Vec<f64>], w: &[f64], cin: usize, cout: usize, h: usize) -> Vec<Vec<f64>> {
        (0..cout)
            .map(|o| {
                let mut plane = vec![0.0; h * h];
                for y in 0..h {
                    for xx in 0..h {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h {
                                        acc += x[c][iy as usize * h + ix as usize] * w[((o * cin + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        plane[y * h + xx] = acc;
                    }
                }
                plane
            })
            .collect()
    }

    #[test]
    fn decoder_matches_loop_oracle() {
        // A narrow decoder over 4-channel stages: output 1 x 2 x 8 x 8.
        let spec = EncoderSpec { name: Backbone::Tiny, stage_channels: [4, 4, 4, 4] };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dec = Decoder::new(&mut store, &mut rng, "d", spec.stage_channels, 2);
        for i in 0..store.len() {
            let e = store.get(i);
            if e.name.ends_with("running_mean") || e.name.ends_with("running_var") {
                continue;
            }
            let len = e.value.len();
            let vals: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.value_mut(i).data_mut().copy_from_slice(&vals);
        }
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let mut mk = |side: usize| Tensor::from_fn(&[1, 4, side, side], |_| r.random_range(-1.0..1.0));
        let (l1, l2, l3, top) = (mk(8), mk(4), mk(2), mk(1));
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        let lats = [tape.constant(l1.clone()), tape.constant(l2.clone()), tape.constant(l3.clone())];
        let got = dec.forward(&ctx, &lats, tape.constant(top.clone()));
        let got = got.value();
        assert_eq!(got.shape(), &[1, 2, 8, 8]);

        let val = |i: usize| store.get(i).value.data().to_vec();
        let planes = |t: &Tensor<f64>, side: usize| -> Vec<Vec<f64>> {
            (0..4).map(|c| t.data()[c * side * side..(c + 1) * side * side].to_vec()).collect()
        };
        let conv1 = |x: &[Vec<f64>], conv: &Conv2d| -> Vec<Vec<f64>> {
            let (w, b) = (val(conv.weight), val(conv.bias.unwrap()));
            (0..conv.out_ch)
                .map(|o| {
                    (0..x[0].len())
                        .map(|p| b[o] + (0..conv.in_ch).map(|c| w[o * conv.in_ch + c] * x[c][p]).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let mut p = conv1(&planes(&top, 1), &dec.top);
        let mut side = 1;
        let lat_t = [&l1, &l2, &l3];
        for i in (0..3).rev() {
            let up: Vec<Vec<f64>> = p.iter().map(|pl| upsample2_oracle(pl, side, side)).collect();
            side *= 2;
            let lat = conv1(&planes(lat_t[i], side), &dec.laterals[i]);
            let sum: Vec<Vec<f64>> = up.iter().zip(&lat).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
            let blk = &dec.blocks[i];
            let conv = conv3_oracle(&sum, &val(blk.conv.weight), 2, 2, side);
            let (g, b) = (val(blk.bn.gamma), val(blk.bn.beta));
            let (rm, rv) = (val(blk.bn.running_mean), val(blk.bn.running_var));
            p = conv
                .iter()
                .enumerate()
                .map(|(c, pl)| pl.iter().map(|&v| (g[c] * (v - rm[c]) / (rv[c] + BN_EPS).sqrt() + b[c]).max(0.0)).collect())
                .collect();
        }
        let want: Vec<f64> = p.concat();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn infer_output_shape_and_range() {
        let net = CoSodNet::<f64>::new(&toy(4), 3).unwrap();
        let out = net.forward(&batch(1, 1, 32), Mode::Infer).unwrap();
        assert_eq!(out.maps.data.shape(), &[2, 1, 32, 32]);
        assert!(out.maps.data.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.collab.is_none() && out.logits_acm.is_none());
    }

    #[test]
    fn identical_groups_give_identical_halves() {
        let net = CoSodNet::<f64>::new(&toy(5), 3).unwrap();
        let imgs = images(8, 2, 32);
        for mode in [Mode::Infer, Mode::Train] {
            let b = GroupBatch::duplicated(imgs.clone(), 0).unwrap();
            let out = net.forward(&b, mode).unwrap();
            assert_eq!(out.maps.data.slice_rows(0, 2), out.maps.data.slice_rows(2, 4));
        }
    }

    #[test]
    fn train_outputs_follow_the_contract() {
        let net = CoSodNet::<f64>::new(&toy(6), 3).unwrap();
        let out = net.forward(&batch(2, 2, 32), Mode::Train).unwrap();
        let c = out.collab.unwrap();
        assert_eq!(c.m_plus.data.shape(), &[4, 1, 32, 32]);
        assert_eq!(c.m_minus.data.shape(), &[4, 1, 32, 32]);
        assert_eq!(out.logits_acm.unwrap().shape(), &[4, 3]);
        assert_eq!(out.logits_racm.unwrap().shape(), &[4, 3]);
        assert_eq!(out.features_masked.unwrap().data.shape(), &[4, 256, 1, 1]);
    }

    #[test]
    fn unequal_groups_rejected() {
        let a = images(1, 2, 32);
        let b = images(2, 3, 32);
        let gt = |n| Tensor::zeros(&[n, 1, 32, 32]);
        assert!(GroupBatch::new(a, b, gt(2), gt(3), 0, 1).is_err());
    }

    #[test]
    fn inference_graph_audit() {
        let net = CoSodNet::<f64>::new(&toy(7), 3).unwrap();
        let b = batch(3, 2, 32);
        let count = |mode| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &net.store, mode == Mode::Train);
            let _ = net.siamese(&ctx, &b, mode, 300.0);
            let used = tape.used_params();
            let enc = net.encoder.blocks().next().unwrap().conv.weight;
            (tape.op_count("conv2d"), tape.op_count("linear_bias"), used, tape.param_consumers(enc))
        };
        let enc_convs = net.encoder.blocks().count();
        let (convs, linears, used, consumers) = count(Mode::Infer);
        // encoder + GAM theta/phi per group + decoder (top, 3 laterals, 3 fusions) + 2 CEM branches x 2
        assert_eq!(convs, enc_convs + 4 + 7 + 4);
        assert_eq!(linears, 0);
        assert_eq!(consumers, 1);
        let head: Vec<usize> = (0..net.store.len()).filter(|&i| net.store.get(i).name.starts_with("gcm.") || net.store.get(i).name.starts_with("classifier.")).collect();
        assert!(head.iter().all(|i| !used.contains(i)));
        let (convs, linears, _, consumers) = count(Mode::Train);
        assert_eq!(convs, 2 * enc_convs + 4 + 7 + 4 + 4);
        assert_eq!(linears, 2);
        // the masked pass reuses the same encoder parameter leaves
        assert_eq!(consumers, 2);
    }

    #[test]
    fn permuting_within_groups_permutes_maps() {
        let net = CoSodNet::<f64>::new(&toy(8), 3).unwrap();
        let b = batch(4, 3, 32);
        let perm = [2usize, 0, 1];
        let pick = |t: &Tensor<f64>| {
            let parts: Vec<Tensor<f64>> = perm.iter().map(|&i| t.slice_rows(i, i + 1)).collect();
            Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()).unwrap()
        };
        let pb = GroupBatch::new(pick(&b.group_a), pick(&b.group_b), pick(&b.gt_a), pick(&b.gt_b), 0, 1).unwrap();
        for mode in [Mode::Infer, Mode::Train] {
            let m = net.forward(&b, mode).unwrap().maps.data;
            let pm = net.forward(&pb, mode).unwrap().maps.data;
            for (j, &i) in perm.iter().enumerate() {
                for off in [0, 3] {
                    let a = m.slice_rows(off + i, off + i + 1);
                    let p = pm.slice_rows(off + j, off + j + 1);
                    let diff = a.data().iter().zip(p.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(diff <= 1e-6, "{mode:?} row {j}: {diff}");
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let b = batch(5, 2, 32);
        let run = || CoSodNet::<f32>::new(&toy(9), 3).unwrap().forward(&GroupBatch::new(
            b.group_a.cast(), b.group_b.cast(), b.gt_a.cast(), b.gt_b.cast(), 0, 1).unwrap(), Mode::Train).unwrap().maps.data;
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identity_mask_matches_plain_classifier() {
        let net = CoSodNet::<f64>::new(&toy(10), 3).unwrap();
        let imgs = images(6, 2, 32);
        let ones = SaliencyMaps::new(Tensor::ones(&[2, 1, 32, 32])).unwrap();
        let (racm, _) = net.mask_and_reencode(&imgs, &ones).unwrap();
        assert_eq!(racm, net.acm_logits(&imgs).unwrap());
    }

    #[test]
    fn zero_mask_encodes_black_in_normalized_space() {
        let net = CoSodNet::<f64>::new(&toy(11), 3).unwrap();
        let imgs = images(7, 2, 32);
        let zeros = SaliencyMaps::new(Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        let (_, f_r) = net.mask_and_reencode(&imgs, &zeros).unwrap();
        let (_, f_r2) = net.mask_and_reencode(&images(8, 2, 32), &zeros).unwrap();
        assert_eq!(f_r, f_r2);
        // The masked input is exactly zero, so both rows coincide as well.
        assert_eq!(f_r.data.slice_rows(0, 1), f_r.data.slice_rows(1, 2));
    }

    #[test]
    fn masked_input_is_an_elementwise_product() {
        let net = CoSodNet::<f64>::new(&toy(12), 3).unwrap();
        let imgs = images(9, 2, 32);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let m = Tensor::from_fn(&[2, 1, 32, 32], |_| r.random_range(0.0..1.0));
        let tape = Tape::<f64>::inference();
        let x = net.normalize(&imgs);
        let got = tape.constant(x.clone()).mul(tape.constant(m.clone()));
        let got = got.value();
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..32 * 32 {
                    let want = x.data()[(n * 3 + c) * 1024 + p] * m.data()[n * 1024 + p];
                    assert!((got.data()[(n * 3 + c) * 1024 + p] - want).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn vgg_import_round_trip() {
        let cfg = RunConfig { backbone: Backbone::Vgg16Bn, image_size: 32, ..RunConfig::toy() };
        let mut net = CoSodNet::<f32>::new(&cfg, 2).unwrap();
        let manifest = net.vgg16bn_manifest().unwrap();
        // 13 conv layers, each with conv weight/bias and four BN tensors
        assert_eq!(manifest.len(), 13 * 6);
        assert_eq!(manifest[0], ("features.0.weight".to_string(), "encoder.stage1.conv1.conv.weight".to_string()));
        assert!(manifest.iter().any(|(e, i)| e == "features.41.running_var" && i == "encoder.stage4.conv3.bn.running_var"));
        let source: HashMap<String, Tensor<f32>> = manifest
            .iter()
            .map(|(e, i)| {
                let shape = net.store.get(net.store.index_of(i).unwrap()).value.shape().to_vec();
                (e.clone(), Tensor::full(&shape, 0.125))
            })
            .collect();
        assert_eq!(net.import_weights(&manifest, &source).unwrap(), 78);
        assert!(net.encoder_params().iter().all(|&i| net.store.get(i).value.data().iter().all(|&v| v == 0.125)));
        let mut bad = source.clone();
        bad.remove("features.0.weight");
        assert!(net.import_weights(&manifest, &bad).is_err());
        assert!(CoSodNet::<f32>::new(&toy(0), 2).unwrap().vgg16bn_manifest().is_err());
    }
}
