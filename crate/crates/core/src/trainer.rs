//! Optimization: Adam, the single training step with its non-finite loss
//! fallback, and the epoch loop with held-out evaluation and checkpoints.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{LrSchedule, RunConfig};
use crate::dataio::{sample_pair_batch, split_holdout, stack_images, GroupDataset};
use crate::error::{Error, Result};
use crate::gcm::gcm_targets;
use crate::losses::{self, Focal, LossBundle};
use crate::metrics::{EvalReport, ImageScores, MaxMode};
use crate::network::{CoSodNet, Mode};
use crate::nn::{apply_bn_updates, BnUpdate, Ctx};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::types::{GroupBatch, Image};

/// Adam with bias correction. Moments exist only for trainable entries.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &CoSodNet<T>) -> Self {
        let cfg = &net.config;
        let mut m = vec![None; net.store.len()];
        for i in net.store.trainable_indices() {
            m[i] = Some(Tensor::zeros(net.store.get(i).value.shape()));
        }
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, t: 0, v: m.clone(), m }
    }

    /// One update with gradients indexed like the parameter store.
    pub fn update(&mut self, net: &mut CoSodNet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let (step, bc2s, eps) = (lit::<T>(lr / bc1), lit::<T>(bc2.sqrt()), lit::<T>(self.eps));
        for i in 0..grads.len() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else { continue };
            let g = match &grads[i] {
                Some(g) => g.data(),
                None => &[][..],
            };
            let p = net.store.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.get(j).copied().unwrap_or_else(T::zero);
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + c1 * gj;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + c2 * gj * gj;
                p[j] -= step * m.data()[j] / (v.data()[j].sqrt() / bc2s + eps);
            }
        }
    }
}

/// Serialized position of the sampling RNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.seed.as_slice().try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Best held-out S-measure so far; `-1` before the first evaluation.
    pub best_metric: f64,
    pub k_current: f64,
    pub adam_t: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub bce: f64,
    pub iou: f64,
    pub gcm: f64,
    pub gst: f64,
    pub cls: f64,
}

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub components: Components,
    pub total: f64,
    pub k_used: f64,
    pub lr: f64,
    /// The first attempt was non-finite and the step was recomputed at the
    /// fallback steepness.
    pub recomputed: bool,
    pub gst_skipped: bool,
}

impl StepLog {
    pub fn bundle(&self) -> LossBundle {
        let c = &self.components;
        LossBundle { bce: c.bce, iou: c.iou, gcm: c.gcm, gst: c.gst, cls: c.cls, total: self.total, gst_skipped: self.gst_skipped }
    }
}

/// State dumped when even the fallback steepness yields a non-finite loss.
/// Non-finite numbers serialize as JSON `null`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: u64,
    pub inputs_hash: String,
    pub components: Components,
    pub param_norms: BTreeMap<String, f64>,
}

struct Attempt<T> {
    bundle: LossBundle,
    grads: Vec<Option<Tensor<T>>>,
    bn: Vec<BnUpdate<T>>,
}

pub fn batch_labels<T>(batch: &GroupBatch<T>) -> Vec<usize>
where
    T: Scalar,
{
    let n = batch.n();
    std::iter::repeat_n(batch.class_a, n).chain(std::iter::repeat_n(batch.class_b, n)).collect()
}

fn hash_batch<T: Scalar>(batch: &GroupBatch<T>) -> String {
    let mut h = DefaultHasher::new();
    for t in [&batch.group_a, &batch.group_b, &batch.gt_a, &batch.gt_b] {
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
        }
    }
    (batch.class_a, batch.class_b).hash(&mut h);
    format!("{:016x}", h.finish())
}

pub struct Trainer<T> {
    pub net: CoSodNet<T>,
    pub adam: Adam<T>,
    pub state: TrainState,
    /// Planned number of steps; the cosine schedule decays over it.
    pub total_steps: u64,
    /// Fault injection: the first loss evaluation of this step is treated as
    /// non-finite.
    pub inject_nan_at: Option<u64>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh trainer; the sampling RNG is seeded from `seed + 1` so it is
    /// independent of parameter initialization.
    pub fn new(net: CoSodNet<T>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(net.config.seed.wrapping_add(1));
        let state = TrainState {
            step: 0,
            epoch: 0,
            best_metric: -1.0,
            k_current: net.config.db_k,
            adam_t: 0,
            rng: RngState::capture(&rng),
        };
        Self { adam: Adam::new(&net), net, state, total_steps: 0, inject_nan_at: None }
    }

    pub fn config(&self) -> &RunConfig {
        &self.net.config
    }

    pub fn lr(&self) -> f64 {
        let cfg = self.config();
        match cfg.lr_schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::Cosine => {
                if self.total_steps == 0 {
                    return cfg.lr;
                }
                let frac = (self.state.step as f64 / self.total_steps as f64).min(1.0);
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn attempt(&self, batch: &GroupBatch<T>, k: f64, poison: bool) -> Result<Attempt<T>> {
        let cfg = self.config();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.net.store, true);
        let out = self.net.siamese(&ctx, batch, Mode::Train, k);
        let tv = out.train.ok_or_else(|| Error::contract("train pass lacks auxiliary outputs"))?;
        let gt = Tensor::concat_rows(&[&batch.gt_a, &batch.gt_b])?;
        let l_bce = losses::bce(out.maps, &gt);
        let l_iou = losses::iou(out.maps, &gt);
        let (t_plus, t_minus) = gcm_targets(&gt);
        let l_gcm = losses::focal(
            Var::concat_rows(&[tv.m_plus, tv.m_minus]),
            &Tensor::concat_rows(&[&t_plus, &t_minus])?,
            Focal { gamma: cfg.focal_gamma, alpha: cfg.focal_alpha },
        );
        let l_gst = losses::gst(tv.f_r, cfg.triplet_form, cfg.gst_margin, cfg.gst_l2_normalize);
        let l_cls = losses::classification(tv.logits_acm, tv.logits_racm, &batch_labels(batch))?;

        let lam = cfg.lambdas;
        let mut terms = vec![(l_bce, lit(lam[0])), (l_iou, lit(lam[1])), (l_gcm, lit(lam[2]))];
        if let Some(g) = l_gst {
            terms.push((g, lit(lam[3])));
        }
        terms.push((l_cls, lit(lam[4])));
        let total = Var::weighted_sum(&terms);

        let f = |v: Var<'_, T>| v.item().to_f64().unwrap_or(f64::NAN);
        let mut bundle = losses::total_loss(
            [f(l_bce), f(l_iou), f(l_gcm), l_gst.map(f).unwrap_or(0.0), f(l_cls)],
            lam,
        );
        bundle.total = f(total);
        bundle.gst_skipped = l_gst.is_none();
        if poison {
            bundle.total = f64::NAN;
        }
        if !bundle.total.is_finite() {
            return Ok(Attempt { bundle, grads: Vec::new(), bn: Vec::new() });
        }
        let grads = tape.backward(total);
        let per_param = (0..self.net.store.len())
            .map(|i| if self.net.store.get(i).trainable { grads.param(i).cloned() } else { None })
            .collect();
        Ok(Attempt { bundle, grads: per_param, bn: ctx.take_bn_updates() })
    }

    pub fn diagnostic(&self, batch: &GroupBatch<T>, bundle: &LossBundle) -> Diagnostic {
        Diagnostic {
            step: self.state.step,
            inputs_hash: hash_batch(batch),
            components: components(bundle),
            param_norms: self.net.store.entries().iter().map(|e| (e.name.clone(), e.value.l2_norm().to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Forward, loss, backward and one Adam update.
    ///
    /// A non-finite total is recomputed once at the fallback steepness; the
    /// steepness returns to its configured value for the next step. A second
    /// non-finite total is an error carrying a [`Diagnostic`] as JSON.
    pub fn step(&mut self, batch: &GroupBatch<T>) -> Result<StepLog> {
        let cfg = self.config().clone();
        let poison = self.inject_nan_at == Some(self.state.step);
        let mut k_used = self.state.k_current;
        let mut attempt = self.attempt(batch, k_used, poison)?;
        let mut recomputed = false;
        if !attempt.bundle.total.is_finite() {
            recomputed = true;
            k_used = cfg.db_k_fallback;
            self.state.k_current = k_used;
            attempt = self.attempt(batch, k_used, false)?;
            if !attempt.bundle.total.is_finite() {
                let d = self.diagnostic(batch, &attempt.bundle);
                self.state.k_current = cfg.db_k;
                return Err(Error::NonFinite(serde_json::to_string(&d)?));
            }
        }
        let mut grads = attempt.grads;
        if let Some(limit) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data().iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let s = lit::<T>(limit / norm);
                for g in grads.iter_mut().flatten() {
                    g.scale(s);
                }
            }
        }
        let lr = self.lr();
        self.adam.update(&mut self.net, &grads, lr);
        apply_bn_updates(&mut self.net.store, &attempt.bn, lit(cfg.bn_momentum));
        self.state.k_current = cfg.db_k;
        self.state.adam_t = self.adam.t;
        let log = StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            components: components(&attempt.bundle),
            total: attempt.bundle.total,
            k_used,
            lr,
            recomputed,
            gst_skipped: attempt.bundle.gst_skipped,
        };
        self.state.step += 1;
        Ok(log)
    }

    /// Checkpoint with optimizer moments and trainer state for resuming.
    pub fn to_checkpoint(&self, metrics: BTreeMap<String, f64>) -> Result<Checkpoint<T>> {
        let mut ck = self.net.to_checkpoint(self.state.epoch, metrics);
        for (i, e) in self.net.store.entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.adam.m[i], &self.adam.v[i]) {
                ck.tensors.push((format!("adam.m.{}", e.name), m.clone()));
                ck.tensors.push((format!("adam.v.{}", e.name), v.clone()));
            }
        }
        ck.manifest.train_state = Some(serde_json::to_value(&self.state)?);
        Ok(ck)
    }

    /// Restores model, optimizer and trainer state.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let net = CoSodNet::from_checkpoint(ck)?;
        let mut tr = Self::new(net);
        let state = ck
            .manifest
            .train_state
            .clone()
            .ok_or_else(|| Error::Checkpoint("no trainer state; not a resumable checkpoint".into()))?;
        tr.state = serde_json::from_value(state)?;
        tr.adam.t = tr.state.adam_t;
        for i in 0..tr.net.store.len() {
            if tr.adam.m[i].is_none() {
                continue;
            }
            let name = &tr.net.store.get(i).name;
            let get = |k: &str| {
                ck.get(&format!("adam.{k}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks adam.{k}.{name}")))
            };
            tr.adam.m[i] = Some(get("m")?);
            tr.adam.v[i] = Some(get("v")?);
        }
        Ok(tr)
    }
}

fn components(b: &LossBundle) -> Components {
    Components { bce: b.bce, iou: b.iou, gcm: b.gcm, gst: b.gst, cls: b.cls }
}

/// Scores every held-out group with the group paired with itself; maps are
/// resized back to each image's own resolution.
pub fn evaluate_groups<T: Scalar>(net: &CoSodNet<T>, ds: &GroupDataset) -> Result<EvalReport> {
    let side = net.side();
    let mut items = Vec::new();
    for g in &ds.groups {
        let x = stack_images::<T>(&g.images, side)?;
        let maps = net.predict_group(&x)?;
        for (i, gt) in g.gt_masks.iter().enumerate() {
            let m: Image<f32> = maps.image(i).cast();
            items.push((g.group_id.clone(), g.names[i].clone(), ImageScores::compute(&m, gt)?));
        }
    }
    if items.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    Ok(EvalReport::from_scores(&items, MaxMode::Dataset))
}

fn report_metrics(r: &EvalReport) -> BTreeMap<String, f64> {
    [("e_max", r.e_max), ("s_alpha", r.s_alpha), ("f_max", r.f_max), ("mae", r.mae)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// One periodic evaluation, as written to `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub e_max: f64,
    pub s_alpha: f64,
    pub f_max: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Output directory for `log.jsonl`, `eval.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to resume from (must carry trainer state).
    pub resume: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub trainer: Trainer<T>,
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalRecord>,
    pub last: Option<PathBuf>,
    pub best: Option<PathBuf>,
}

impl<T> std::fmt::Debug for Trainer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("state", &self.state).finish_non_exhaustive()
    }
}

fn append_json<S: Serialize>(w: &mut Option<BufWriter<File>>, v: &S) -> Result<()> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("log", e))?;
    }
    Ok(())
}

fn open_log(dir: &Path, name: &str, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(f))
}

/// Trains for `cfg.epochs` epochs of `#groups` pair draws each.
///
/// The last `holdout_per_group` images of every group are withheld and scored
/// every `eval_every` epochs and after the final epoch; the best checkpoint by
/// held-out S-measure is kept next to the last one. With no held-out split the
/// final model doubles as the best. `epochs = 0` writes the initial
/// checkpoint only.
pub fn train_loop<T: Scalar>(cfg: &RunConfig, ds: &GroupDataset, opts: &LoopOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.groups.len() < 2 {
        return Err(Error::Data("training needs at least 2 groups".into()));
    }
    let (train_ds, held) = split_holdout(ds, cfg.holdout_per_group)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let mut tr = Trainer::from_checkpoint(&ck)?;
            tr.net.config.epochs = cfg.epochs;
            tr
        }
        None => Trainer::new(CoSodNet::new(cfg, ds.class_names.len())?),
    };
    let per_epoch = train_ds.groups.len() as u64;
    trainer.total_steps = per_epoch * cfg.epochs as u64;

    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let appending = opts.resume.is_some();
    let mut log = dir.map(|d| open_log(d, "log.jsonl", appending)).transpose()?;
    let mut eval_log = dir.map(|d| open_log(d, "eval.jsonl", appending)).transpose()?;
    let last_path = dir.map(|d| d.join("last.ckpt"));
    let best_path = dir.map(|d| d.join("best.ckpt"));

    let mut rng = trainer.state.rng.restore()?;
    let mut logs = Vec::new();
    let mut evals = Vec::new();
    let mut best_written = false;

    if cfg.epochs == 0 {
        if let Some(p) = &last_path {
            trainer.to_checkpoint(BTreeMap::new())?.save(p)?;
        }
        return Ok(TrainOutcome { trainer, logs, evals, last: last_path, best: None });
    }

    while trainer.state.epoch < cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let batch: GroupBatch<T> = sample_pair_batch(&train_ds, cfg, &mut rng)?;
            let entry = match trainer.step(&batch) {
                Ok(e) => e,
                Err(Error::NonFinite(diag)) => {
                    if let Some(d) = dir {
                        let p = d.join("diagnostic.json");
                        fs::write(&p, &diag).map_err(|e| Error::io(&p, e))?;
                    }
                    return Err(Error::NonFinite(diag));
                }
                Err(e) => return Err(e),
            };
            epoch_loss += entry.total;
            append_json(&mut log, &entry)?;
            logs.push(entry);
        }
        trainer.state.epoch += 1;
        trainer.state.rng = RngState::capture(&rng);
        let epoch = trainer.state.epoch;
        let final_epoch = epoch == cfg.epochs;
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        let mut metrics = BTreeMap::new();
        if !held.groups.is_empty() && (due || final_epoch) {
            let rep = evaluate_groups(&trainer.net, &held)?;
            metrics = report_metrics(&rep);
            let rec = EvalRecord {
                epoch,
                step: trainer.state.step,
                e_max: rep.e_max,
                s_alpha: rep.s_alpha,
                f_max: rep.f_max,
                mae: rep.mae,
            };
            append_json(&mut eval_log, &rec)?;
            if rep.s_alpha > trainer.state.best_metric {
                trainer.state.best_metric = rep.s_alpha;
                if let Some(p) = &best_path {
                    trainer.net.to_checkpoint(epoch, metrics.clone()).save(p)?;
                    best_written = true;
                }
            }
            evals.push(rec);
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch}/{}: mean loss {:.4}{}",
                cfg.epochs,
                epoch_loss / per_epoch as f64,
                metrics.get("s_alpha").map(|s| format!(", held-out S {s:.4}")).unwrap_or_default()
            );
        }
        if let Some(p) = &last_path {
            trainer.to_checkpoint(metrics)?.save(p)?;
        }
    }
    if let (Some(p), false) = (&best_path, best_written || p_exists(best_path.as_deref())) {
        trainer.net.to_checkpoint(trainer.state.epoch, BTreeMap::new()).save(p)?;
    }
    Ok(TrainOutcome { trainer, logs, evals, last: last_path, best: best_path })
}

fn p_exists(p: Option<&Path>) -> bool {
    p.is_some_and(Path::exists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AugmentPolicy, Backbone};
    use crate::dataio::generate_synthetic;
    use rand::Rng;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            image_size: 32,
            backbone: Backbone::Tiny,
            augment: AugmentPolicy::off(),
            seed: 5,
            ..RunConfig::toy()
        }
    }

    fn random_batch<T: Scalar>(seed: u64, n: usize, side: usize) -> GroupBatch<T> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Tensor::from_fn(&[n, 3, side, side], |_| T::from_f64_lossy(r.random_range(0.0..1.0)));
        let (a, b) = (img(), img());
        let mask = |off: usize| {
            Tensor::from_fn(&[n, 1, side, side], |i| {
                let (y, x) = ((i / side) % side, i % side);
                if (y + off) % side < side / 2 && x < side / 2 { T::one() } else { T::zero() }
            })
        };
        GroupBatch::new(a, b, mask(0), mask(side / 4), 0, 1).unwrap()
    }

    fn trainable_snapshot<T: Scalar>(net: &CoSodNet<T>) -> Vec<Tensor<T>> {
        net.store.trainable_indices().map(|i| net.store.get(i).value.clone()).collect()
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // Two hand-computed Adam steps on a single weight.
        let (b1, b2, eps, lr) = (0.9f64, 0.99f64, 1e-8, 0.1);
        let (mut p, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for (t, g) in [(1, 0.5f64), (2, -0.25)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut net = CoSodNet::<f64>::new(&tiny_cfg(), 2).unwrap();
        let idx = net.store.trainable_indices().next().unwrap();
        net.store.value_mut(idx).data_mut()[0] = 1.0;
        let mut adam = Adam::new(&net);
        for g in [0.5, -0.25] {
            let mut grads = vec![None; net.store.len()];
            let mut t = Tensor::zeros(net.store.get(idx).value.shape());
            t.data_mut()[0] = g;
            grads[idx] = Some(t);
            adam.update(&mut net, &grads, lr);
        }
        assert!((net.store.get(idx).value.data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        // Validation rejects zero weights, so this drives the step directly.
        let cfg = RunConfig { lambdas: [0.0; 5], ..tiny_cfg() };
        let mut tr = Trainer::new(CoSodNet::<f64>::new(&cfg, 2).unwrap());
        let before = trainable_snapshot(&tr.net);
        let log = tr.step(&random_batch(1, 2, 32)).unwrap();
        assert_eq!(log.total, 0.0);
        assert_eq!(trainable_snapshot(&tr.net), before);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut tr = Trainer::new(CoSodNet::<f32>::new(&tiny_cfg(), 2).unwrap());
            let logs: Vec<f64> = (0..2).map(|s| tr.step(&random_batch(s, 2, 32)).unwrap().total).collect();
            (logs, trainable_snapshot(&tr.net))
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn injected_nan_recomputes_once_then_restores() {
        let mut tr = Trainer::new(CoSodNet::<f32>::new(&tiny_cfg(), 2).unwrap());
        tr.inject_nan_at = Some(1);
        let logs: Vec<StepLog> = (0..3).map(|s| tr.step(&random_batch(s, 2, 32)).unwrap()).collect();
        assert_eq!(logs.iter().filter(|l| l.recomputed).count(), 1);
        assert!(logs[1].recomputed);
        assert_eq!(logs[1].k_used, 50.0);
        assert!(logs[1].total.is_finite());
        assert_eq!((logs[0].k_used, logs[2].k_used), (300.0, 300.0));
        assert_eq!(tr.state.k_current, 300.0);
    }

    #[test]
    fn persistent_non_finite_loss_aborts_with_diagnostic() {
        let mut tr = Trainer::new(CoSodNet::<f32>::new(&tiny_cfg(), 2).unwrap());
        let mut batch = random_batch::<f32>(0, 2, 32);
        // Activations swallow a NaN input (ReLU is a max), a NaN target cannot be.
        batch.gt_a.data_mut()[0] = f32::NAN;
        let err = tr.step(&batch).unwrap_err();
        let Error::NonFinite(text) = err else { panic!("wrong error {err}") };
        let d: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(d["inputs_hash"].as_str().unwrap().len(), 16);
        assert!(d["param_norms"]["gam.theta.weight"].as_f64().unwrap() > 0.0);
        // Non-finite components serialize as null.
        assert!(d["components"]["bce"].is_null());
        assert_eq!(tr.state.k_current, 300.0);
    }

    #[test]
    fn single_image_groups_skip_the_triplet_term() {
        let mut tr = Trainer::new(CoSodNet::<f32>::new(&tiny_cfg(), 2).unwrap());
        let log = tr.step(&random_batch(3, 1, 32)).unwrap();
        assert!(log.gst_skipped);
        assert_eq!(log.components.gst, 0.0);
    }

    #[test]
    fn loss_weights_put_components_on_one_scale() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), 4, 4, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let cfg = tiny_cfg();
        let tr = Trainer::new(CoSodNet::<f32>::new(&cfg, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_pair_batch::<f32>(&ds, &cfg, &mut rng).unwrap();
        let b = tr.attempt(&batch, cfg.db_k, false).unwrap().bundle;
        let weighted: Vec<f64> = b.components().iter().zip(cfg.lambdas).map(|(c, l)| c * l).collect();
        let (lo, hi) = weighted.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
        assert!(lo > 0.0 && hi / lo <= 100.0, "{weighted:?}");
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let _: u64 = r.random();
        let mut back = RngState::capture(&r).restore().unwrap();
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let cfg = RunConfig { lr_schedule: LrSchedule::Cosine, ..tiny_cfg() };
        let mut tr = Trainer::new(CoSodNet::<f32>::new(&cfg, 2).unwrap());
        tr.total_steps = 10;
        assert_eq!(tr.lr(), cfg.lr);
        tr.state.step = 5;
        assert!((tr.lr() - cfg.lr / 2.0).abs() < 1e-15);
        tr.state.step = 10;
        assert!(tr.lr().abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let data = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(data.path(), 2, 3, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = RunConfig { epochs: 0, holdout_per_group: 1, ..tiny_cfg() };
        let opts = LoopOptions { out_dir: Some(out.path().to_path_buf()), ..Default::default() };
        let res = train_loop::<f32>(&cfg, &ds, &opts).unwrap();
        assert!(res.logs.is_empty());
        let ck = Checkpoint::<f32>::load(&out.path().join("last.ckpt")).unwrap();
        let fresh = CoSodNet::<f32>::new(&cfg, 2).unwrap();
        assert_eq!(ck.get("gam.theta.weight"), Some(&fresh.store.get(fresh.store.index_of("gam.theta.weight").unwrap()).value));
        assert!(!out.path().join("best.ckpt").exists());
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let data = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(data.path(), 2, 3, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = RunConfig { epochs: 2, holdout_per_group: 1, eval_every: 1, ..tiny_cfg() };

        let full_dir = tempfile::tempdir().unwrap();
        let opts = LoopOptions { out_dir: Some(full_dir.path().to_path_buf()), ..Default::default() };
        let full = train_loop::<f32>(&cfg, &ds, &opts).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let opts = LoopOptions { out_dir: Some(part_dir.path().to_path_buf()), ..Default::default() };
        train_loop::<f32>(&RunConfig { epochs: 1, ..cfg.clone() }, &ds, &opts).unwrap();
        let opts = LoopOptions {
            out_dir: Some(part_dir.path().to_path_buf()),
            resume: Some(part_dir.path().join("last.ckpt")),
            ..Default::default()
        };
        let resumed = train_loop::<f32>(&cfg, &ds, &opts).unwrap();

        assert_eq!(resumed.trainer.state, full.trainer.state);
        assert_eq!(trainable_snapshot(&resumed.trainer.net), trainable_snapshot(&full.trainer.net));
        let a = fs::read(full_dir.path().join("last.ckpt")).unwrap();
        let b = fs::read(part_dir.path().join("last.ckpt")).unwrap();
        assert_eq!(a, b);
        let lines = fs::read_to_string(part_dir.path().join("log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        assert!(part_dir.path().join("best.ckpt").exists());
    }
}
