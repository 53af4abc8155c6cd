//! Run configuration, JSON (de)serialization, validation and dotted-path
//! overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "vgg16bn-compatible")]
    Vgg16Bn,
}

/// How the group affinity vector is normalized into attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// One softmax over all `N*H*W` positions of the group.
    Joint,
    /// An independent softmax over each image's `H*W` positions.
    PerImage,
}

/// Which index pattern the two triplet terms of the group triplet loss use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletForm {
    /// `(1A, 1B, 2A) + (2B, 2A, 1B)`: each group supplies the positive pair once.
    Symmetric,
    /// `(1A, 1B, 2A) + (1B, 2B, 2A)` exactly as the index pattern is often written.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Jitter,
    Histogram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    /// Symmetric jitter ranges, e.g. `0.1` means a factor in `[0.9, 1.1]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub color_mode: ColorMode,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            rotation_deg: 15.0,
            color_mode: ColorMode::Jitter,
        }
    }
}

impl AugmentPolicy {
    pub fn off() -> Self {
        Self {
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            rotation_deg: 0.0,
            color_mode: ColorMode::Jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub image_size: usize,
    pub backbone: Backbone,
    /// Weights of (bce, iou, gcm, gst, cls).
    pub lambdas: [f64; 5],
    pub db_k: f64,
    pub db_k_fallback: f64,
    pub gst_margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub max_group_batch: usize,
    pub seed: u64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub attention_norm: AttentionNorm,
    /// Multiplier on affinities before the softmax; `None` means `1/sqrt(512)`.
    pub affinity_scale: Option<f64>,
    pub triplet_form: TripletForm,
    pub gst_l2_normalize: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub bn_momentum: f64,
    pub augment: AugmentPolicy,
    pub lr_schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    /// Images per group withheld for periodic evaluation.
    pub holdout_per_group: usize,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            backbone: Backbone::Vgg16Bn,
            lambdas: [30.0, 0.5, 250.0, 3.0, 3.0],
            db_k: 300.0,
            db_k_fallback: 50.0,
            gst_margin: 1.0,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            epochs: 320,
            max_group_batch: 32,
            seed: 0,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            attention_norm: AttentionNorm::Joint,
            affinity_scale: None,
            triplet_form: TripletForm::Symmetric,
            gst_l2_normalize: false,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            bn_momentum: 0.1,
            augment: AugmentPolicy::default(),
            lr_schedule: LrSchedule::Constant,
            grad_clip: None,
            holdout_per_group: 0,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    /// Desk-scale settings: tiny encoder at 64 px.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            backbone: Backbone::Tiny,
            epochs: 30,
            holdout_per_group: 3,
            eval_every: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad("image_size", "must be a positive multiple of 32");
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config(format!("lambdas[{i}]"), format!("must be > 0, got {l}")));
            }
        }
        if !(self.db_k_fallback > 0.0) {
            return bad("db_k_fallback", "must be > 0");
        }
        if !(self.db_k > self.db_k_fallback) {
            return bad("db_k", "must exceed db_k_fallback");
        }
        if !(self.gst_margin > 0.0) {
            return bad("gst_margin", "must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(f, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be > 0");
        }
        if self.max_group_batch == 0 {
            return bad("max_group_batch", "must be >= 1");
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return bad("norm_std", "entries must be > 0");
        }
        if matches!(self.affinity_scale, Some(s) if !(s > 0.0 && s.is_finite())) {
            return bad("affinity_scale", "must be positive when set");
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal_alpha", "need gamma >= 0 and alpha in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return bad("augment.hflip_prob", "must lie in [0, 1]");
        }
        for (f, v) in [
            ("augment.brightness", self.augment.brightness),
            ("augment.contrast", self.augment.contrast),
            ("augment.saturation", self.augment.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(f, "must lie in [0, 1)");
            }
        }
        if !(self.augment.rotation_deg >= 0.0 && self.augment.rotation_deg <= 180.0) {
            return bad("augment.rotation_deg", "must lie in [0, 180]");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip", "must be > 0 when set");
        }
        Ok(())
    }

    pub fn affinity_scale(&self) -> f64 {
        self.affinity_scale.unwrap_or(1.0 / (512f64).sqrt())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `dotted.path=value` overrides. Unknown paths are rejected;
    /// values parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for key in path.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(key)
                        .ok_or_else(|| Error::config(path, "unknown key"))?,
                    Value::Array(items) => {
                        let idx: usize = key.parse().map_err(|_| Error::config(path, "expected an index"))?;
                        items.get_mut(idx).ok_or_else(|| Error::config(path, "index out of range"))?
                    }
                    _ => return Err(Error::config(path, "unknown key")),
                };
            }
            *slot = value;
        }
        Self::from_value(root)
    }
}
