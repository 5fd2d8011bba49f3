//! Run configuration: defaults, overlaid by a dotted-key TOML file, overlaid
//! by `key=value` overrides. Every key is validated against the schema
//! below and unknown keys are rejected.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{Misalignment, SynthConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Backbone + MDUP/CMDUP + MUF with three supervised branches.
    Full,
    /// Backbone with a 1×1 projection over concatenated RGB/event search
    /// features; one supervised branch.
    Baseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("model.variant must be full|baseline, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub elim_blocks: Vec<usize>,
    pub keep_ratio: f64,
    pub template_size: usize,
    pub search_size: usize,
    pub uncert_heads: usize,
    pub logvar_clamp: f64,
    pub sample_at_eval: bool,
    pub head_channels: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 192,
            depth: 6,
            heads: 3,
            patch_size: 16,
            mlp_ratio: 4.0,
            elim_blocks: vec![2, 4],
            keep_ratio: 0.7,
            template_size: 96,
            search_size: 192,
            uncert_heads: 3,
            logvar_clamp: 10.0,
            sample_at_eval: false,
            head_channels: 64,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("backbone.dim {} must be a positive multiple of backbone.heads {}", self.dim, self.heads));
        }
        if self.uncert_heads == 0 || self.dim % self.uncert_heads != 0 {
            return bad(format!("uncert.heads {} must divide backbone.dim {}", self.uncert_heads, self.dim));
        }
        if self.patch_size == 0
            || self.template_size % self.patch_size != 0
            || self.search_size % self.patch_size != 0
            || self.template_size == 0
            || self.search_size == 0
        {
            return bad(format!(
                "patch side {} must divide template {} and search {}",
                self.patch_size, self.template_size, self.search_size
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("backbone.keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if let Some(b) = self.elim_blocks.iter().find(|&&b| b >= self.depth.max(1)) {
            if self.depth > 0 {
                return bad(format!("backbone.elim_blocks entry {b} >= depth {}", self.depth));
            }
        }
        if !(self.mlp_ratio > 0.0) || !(self.logvar_clamp > 0.0) || self.head_channels == 0 {
            return bad("mlp_ratio, logvar_clamp and head.channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub alpha_kl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_iou: 2.0, lambda_l1: 5.0, alpha_kl: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub max_gap: usize,
    /// Search-centre jitter as a fraction of the target size.
    pub center_jitter: f64,
    /// Maximum multiplicative scale jitter (≥ 1).
    pub scale_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { template_factor: 2.0, search_factor: 4.0, max_gap: 50, center_jitter: 0.25, scale_jitter: 1.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 5e-6,
            lr_other: 5e-5,
            weight_decay: 1e-4,
            lr_decay_factor: 0.2,
            lr_decay_epoch: 50,
            epochs: 1,
            steps_per_epoch: 200,
            batch_size: 8,
            seed: 0,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_other > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay_factor {} outside (0, 1]", self.lr_decay_factor)));
        }
        if !(self.weight_decay >= 0.0) || self.batch_size == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("weight_decay >= 0, batch_size > 0 and grad_clip > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub window_penalty: bool,
    pub window_weight: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { window_penalty: true, window_weight: 0.49 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub synth: SynthConfig,
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("{key}: expected a boolean, got {v}")))
}

fn as_list(key: &str, v: &toml::Value) -> Result<Vec<toml::Value>> {
    match v {
        toml::Value::Array(a) => Ok(a.clone()),
        toml::Value::String(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| parse_scalar(p.trim()))
            .collect(),
        _ => Err(Error::Config(format!("{key}: expected a list, got {v}"))),
    }
}

fn parse_scalar(text: &str) -> Result<toml::Value> {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("parsed key")),
        Err(_) => Ok(toml::Value::String(text.to_string())),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Every key the schema accepts.
    pub const KEYS: &'static [&'static str] = &[
        "backbone.depth",
        "backbone.dim",
        "backbone.heads",
        "backbone.patch_size",
        "backbone.mlp_ratio",
        "backbone.elim_blocks",
        "backbone.keep_ratio",
        "model.variant",
        "model.template_size",
        "model.search_size",
        "uncert.heads",
        "uncert.logvar_clamp",
        "uncert.sample_at_eval",
        "head.channels",
        "head.window_penalty",
        "head.window_weight",
        "loss.lambda_iou",
        "loss.lambda_l1",
        "loss.alpha_kl",
        "data.template_factor",
        "data.search_factor",
        "data.max_gap",
        "data.center_jitter",
        "data.scale_jitter",
        "train.lr_backbone",
        "train.lr_other",
        "train.weight_decay",
        "train.lr_decay_factor",
        "train.lr_decay_epoch",
        "train.epochs",
        "train.steps_per_epoch",
        "train.batch_size",
        "train.seed",
        "train.grad_clip",
        "synth.n_frames",
        "synth.width",
        "synth.height",
        "synth.event_width",
        "synth.event_height",
        "synth.object_w",
        "synth.object_h",
        "synth.speed",
        "synth.event_threshold",
        "synth.misalign",
        "synth.noise",
        "synth.frame_interval_us",
        "synth.subframes",
    ];

    /// Keys that change the network's parameters or forward computation.
    const MODEL_PREFIXES: &'static [&'static str] = &["backbone.", "model.", "uncert.", "head.channels"];

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let m = &mut self.model;
        match key {
            "backbone.depth" => m.depth = as_usize(key, v)?,
            "backbone.dim" => m.dim = as_usize(key, v)?,
            "backbone.heads" => m.heads = as_usize(key, v)?,
            "backbone.patch_size" => m.patch_size = as_usize(key, v)?,
            "backbone.mlp_ratio" => m.mlp_ratio = as_f64(key, v)?,
            "backbone.elim_blocks" => {
                m.elim_blocks = as_list(key, v)?.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?
            }
            "backbone.keep_ratio" => m.keep_ratio = as_f64(key, v)?,
            "model.variant" => {
                m.variant = v.as_str().ok_or_else(|| Error::Config(format!("{key}: expected a string")))?.parse()?
            }
            "model.template_size" => m.template_size = as_usize(key, v)?,
            "model.search_size" => m.search_size = as_usize(key, v)?,
            "uncert.heads" => m.uncert_heads = as_usize(key, v)?,
            "uncert.logvar_clamp" => m.logvar_clamp = as_f64(key, v)?,
            "uncert.sample_at_eval" => m.sample_at_eval = as_bool(key, v)?,
            "head.channels" => m.head_channels = as_usize(key, v)?,
            "head.window_penalty" => self.track.window_penalty = as_bool(key, v)?,
            "head.window_weight" => self.track.window_weight = as_f64(key, v)?,
            "loss.lambda_iou" => self.loss.lambda_iou = as_f64(key, v)?,
            "loss.lambda_l1" => self.loss.lambda_l1 = as_f64(key, v)?,
            "loss.alpha_kl" => self.loss.alpha_kl = as_f64(key, v)?,
            "data.template_factor" => self.data.template_factor = as_f64(key, v)?,
            "data.search_factor" => self.data.search_factor = as_f64(key, v)?,
            "data.max_gap" => self.data.max_gap = as_usize(key, v)?,
            "data.center_jitter" => self.data.center_jitter = as_f64(key, v)?,
            "data.scale_jitter" => self.data.scale_jitter = as_f64(key, v)?,
            "train.lr_backbone" => self.train.lr_backbone = as_f64(key, v)?,
            "train.lr_other" => self.train.lr_other = as_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = as_f64(key, v)?,
            "train.lr_decay_epoch" => self.train.lr_decay_epoch = as_usize(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.seed" => self.train.seed = as_usize(key, v)? as u64,
            "train.grad_clip" => self.train.grad_clip = as_f64(key, v)?,
            "synth.n_frames" => self.synth.n_frames = as_usize(key, v)?,
            "synth.width" => self.synth.width = as_usize(key, v)? as u32,
            "synth.height" => self.synth.height = as_usize(key, v)? as u32,
            "synth.event_width" => self.synth.event_width = as_usize(key, v)? as u32,
            "synth.event_height" => self.synth.event_height = as_usize(key, v)? as u32,
            "synth.object_w" => self.synth.object_w = as_f64(key, v)?,
            "synth.object_h" => self.synth.object_h = as_f64(key, v)?,
            "synth.speed" => self.synth.speed = as_f64(key, v)?,
            "synth.event_threshold" => self.synth.event_threshold = as_f64(key, v)?,
            "synth.misalign" => {
                let parts = as_list(key, v)?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("{key}: expected dx,dy,dt")));
                }
                let dt = as_f64(key, &parts[2])?;
                self.synth.misalignment =
                    Misalignment { dx: as_f64(key, &parts[0])?, dy: as_f64(key, &parts[1])?, dt: dt.round() as i64 };
            }
            "synth.noise" => self.synth.noise = as_f64(key, v)?,
            "synth.frame_interval_us" => self.synth.frame_interval_us = as_usize(key, v)? as u64,
            "synth.subframes" => self.synth.subframes = as_usize(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Overlays a TOML document (nested tables or dotted keys).
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for (k, v) in entries {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = parse_scalar(v.trim())?;
        self.set(k.trim(), &value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.template_factor >= 1.0 && self.data.search_factor >= 1.0) {
            return Err(Error::Config("crop context factors must be >= 1".into()));
        }
        if !(self.data.scale_jitter >= 1.0) || !(self.data.center_jitter >= 0.0) {
            return Err(Error::Config("data.scale_jitter >= 1 and data.center_jitter >= 0 required".into()));
        }
        Ok(())
    }

    /// `(key, canonical value)` for every schema key, in schema order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let f = |v: f64| format!("{v:?}");
        Self::KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "backbone.depth" => m.depth.to_string(),
                    "backbone.dim" => m.dim.to_string(),
                    "backbone.heads" => m.heads.to_string(),
                    "backbone.patch_size" => m.patch_size.to_string(),
                    "backbone.mlp_ratio" => f(m.mlp_ratio),
                    "backbone.elim_blocks" => {
                        format!("[{}]", m.elim_blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(", "))
                    }
                    "backbone.keep_ratio" => f(m.keep_ratio),
                    "model.variant" => format!("{:?}", m.variant.as_str()),
                    "model.template_size" => m.template_size.to_string(),
                    "model.search_size" => m.search_size.to_string(),
                    "uncert.heads" => m.uncert_heads.to_string(),
                    "uncert.logvar_clamp" => f(m.logvar_clamp),
                    "uncert.sample_at_eval" => m.sample_at_eval.to_string(),
                    "head.channels" => m.head_channels.to_string(),
                    "head.window_penalty" => self.track.window_penalty.to_string(),
                    "head.window_weight" => f(self.track.window_weight),
                    "loss.lambda_iou" => f(self.loss.lambda_iou),
                    "loss.lambda_l1" => f(self.loss.lambda_l1),
                    "loss.alpha_kl" => f(self.loss.alpha_kl),
                    "data.template_factor" => f(self.data.template_factor),
                    "data.search_factor" => f(self.data.search_factor),
                    "data.max_gap" => self.data.max_gap.to_string(),
                    "data.center_jitter" => f(self.data.center_jitter),
                    "data.scale_jitter" => f(self.data.scale_jitter),
                    "train.lr_backbone" => f(self.train.lr_backbone),
                    "train.lr_other" => f(self.train.lr_other),
                    "train.weight_decay" => f(self.train.weight_decay),
                    "train.lr_decay_factor" => f(self.train.lr_decay_factor),
                    "train.lr_decay_epoch" => self.train.lr_decay_epoch.to_string(),
                    "train.epochs" => self.train.epochs.to_string(),
                    "train.steps_per_epoch" => self.train.steps_per_epoch.to_string(),
                    "train.batch_size" => self.train.batch_size.to_string(),
                    "train.seed" => self.train.seed.to_string(),
                    "train.grad_clip" => f(self.train.grad_clip),
                    "synth.n_frames" => self.synth.n_frames.to_string(),
                    "synth.width" => self.synth.width.to_string(),
                    "synth.height" => self.synth.height.to_string(),
                    "synth.event_width" => self.synth.event_width.to_string(),
                    "synth.event_height" => self.synth.event_height.to_string(),
                    "synth.object_w" => f(self.synth.object_w),
                    "synth.object_h" => f(self.synth.object_h),
                    "synth.speed" => f(self.synth.speed),
                    "synth.event_threshold" => f(self.synth.event_threshold),
                    "synth.misalign" => {
                        let a = &self.synth.misalignment;
                        format!("[{}, {}, {}]", f(a.dx), f(a.dy), a.dt)
                    }
                    "synth.noise" => f(self.synth.noise),
                    "synth.frame_interval_us" => self.synth.frame_interval_us.to_string(),
                    "synth.subframes" => self.synth.subframes.to_string(),
                    _ => unreachable!("key list and printer out of sync"),
                };
                (k.to_string(), v)
            })
            .collect()
    }

    /// Dotted-key TOML that [`RunConfig::apply_toml`] reads back to `self`.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn digest(entries: impl Iterator<Item = (String, String)>) -> String {
        let mut h = Sha256::new();
        for (k, v) in entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let bytes = h.finalize();
        bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn config_hash(&self) -> String {
        Self::digest(self.entries().into_iter())
    }

    /// Hash over the architecture keys only; checkpoints compare this.
    pub fn model_hash(&self) -> String {
        Self::digest(self.entries().into_iter().filter(|(k, _)| Self::MODEL_PREFIXES.iter().any(|p| k.starts_with(p))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.loss.lambda_iou, c.loss.lambda_l1, c.loss.alpha_kl), (2.0, 5.0, 0.001));
        assert_eq!((c.train.lr_backbone, c.train.lr_other), (5e-6, 5e-5));
        assert_eq!((c.train.weight_decay, c.train.lr_decay_factor, c.train.lr_decay_epoch), (1e-4, 0.2, 50));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_toml("[backbone]\ndepth = 2\nelim_blocks = [1]\n[model]\nvariant = \"baseline\"\n").unwrap();
        c.apply_override("train.lr_other=0.001").unwrap();
        c.apply_override("synth.misalign=8,4,0").unwrap();
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.model.variant, Variant::Baseline);
        assert_eq!(c.synth.misalignment, Misalignment { dx: 8.0, dy: 4.0, dt: 0 });
        let mut back = RunConfig::default();
        back.apply_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("backbone.width=3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_toml("[train]\nbatch_size = \"x\"\n"), Err(Error::Config(_))));
        c.apply_override("backbone.keep_ratio=1.5").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn model_hash_ignores_training_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.apply_override("train.seed=9").unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.apply_override("backbone.dim=96").unwrap();
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
