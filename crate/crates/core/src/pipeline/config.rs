//! Flat `key=value` pipeline configuration with dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::clusterer::ClustererConfig;
use crate::data::{AugConfig, KnownClasses};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::representation::{LossWeights, ProjectionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    /// `instance_id,path,class_id` CSV at `data.path`.
    Index,
    /// `root/<class>/<file>` tree at `data.path`.
    Directory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub n_classes: usize,
    pub parts_min: usize,
    pub parts_max: usize,
    pub instances_per_class: usize,
    pub seed: u64,
    pub known: KnownClasses,
    pub labeled_fraction: f64,
    /// Use this split file instead of building one.
    pub split_path: Option<PathBuf>,
    /// Cluster count for evaluation; 0 means the number of classes.
    pub eval_k: usize,
    pub aug: AugConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            n_classes: 10,
            parts_min: 2,
            parts_max: 8,
            instances_per_class: 100,
            seed: 0,
            known: KnownClasses::Fraction(0.5),
            labeled_fraction: 0.5,
            split_path: None,
            eval_k: 0,
            aug: AugConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    /// Multiplier on `lr` for unfrozen backbone parameters.
    pub backbone_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: Algorithm::Sgd,
            lr: 0.1,
            backbone_lr_scale: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            epochs: 30,
            batch_size: 64,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        name_of(PRECISIONS, self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Worker threads for per-sample forward/backward passes; 0 = available cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub clusterer: ClustererConfig,
    pub decoder: DecoderConfig,
    pub projection: ProjectionConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}


fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn enum_value<V: Copy>(key: &str, value: &str, table: &[(&str, V)]) -> Result<V> {
    table
        .iter()
        .find(|(name, _)| *name == value.trim())
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key} must be one of {}, got {value:?}", names.join("|")))
        })
}

const ALGORITHMS: &[(&str, Algorithm)] = &[("sgd", Algorithm::Sgd), ("adam", Algorithm::Adam)];
const SCHEDULES: &[(&str, Schedule)] = &[("constant", Schedule::Constant), ("cosine", Schedule::Cosine)];
const PRECISIONS: &[(&str, Precision)] = &[("f32", Precision::F32), ("f64", Precision::F64)];
const DATA_KINDS: &[(&str, DataKind)] = &[
    ("synthetic", DataKind::Synthetic),
    ("index", DataKind::Index),
    ("dir", DataKind::Directory),
];

fn name_of<V: Copy + PartialEq>(table: &[(&'static str, V)], v: V) -> &'static str {
    table.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("table covers every variant")
}

impl PipelineConfig {
    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        let b = &mut self.backbone;
        let c = &mut self.clusterer;
        let d = &mut self.data;
        let o = &mut self.optim;
        match k {
            "seed" => self.seed = parse(k, v)?,
            "backbone.kind" => b.kind = v.parse()?,
            "backbone.input_size" => b.input_size = parse(k, v)?,
            "backbone.patch_size" => b.patch_size = parse(k, v)?,
            "backbone.feat_dim" => b.feat_dim = parse(k, v)?,
            "backbone.trainable_depth" => b.trainable_depth = parse(k, v)?,
            "backbone.depth" => b.depth = parse(k, v)?,
            "backbone.heads" => b.heads = parse(k, v)?,
            "backbone.mlp_ratio" => b.mlp_ratio = parse(k, v)?,
            "backbone.weights_path" => b.weights_path = opt_path(v),
            "backbone.palette_size" => b.palette_size = parse(k, v)?,
            "backbone.noise_std" => b.noise_std = parse(k, v)?,
            "backbone.embed_scale" => b.embed_scale = parse(k, v)?,
            "backbone.pos_scale" => b.pos_scale = parse(k, v)?,
            "backbone.palette_seed" => b.palette_seed = parse(k, v)?,
            "clusterer.k_max" => c.k_max = parse(k, v)?,
            "clusterer.d_slot" => c.d_slot = parse(k, v)?,
            "clusterer.iterations" => c.iterations = parse(k, v)?,
            "clusterer.gumbel_temperature" => c.gumbel_temperature = parse(k, v)?,
            "clusterer.selection_mode" => c.selection_mode = v.parse()?,
            "clusterer.sparsity_weight" => c.sparsity_weight = parse(k, v)?,
            "clusterer.sparsity_warmup" => c.sparsity_warmup = parse(k, v)?,
            "clusterer.mlp_hidden" => c.mlp_hidden = parse(k, v)?,
            "clusterer.scorer_hidden" => c.scorer_hidden = parse(k, v)?,
            "decoder.layers" => self.decoder.layers = parse(k, v)?,
            "decoder.hidden" => self.decoder.hidden = parse(k, v)?,
            "decoder.pos_std" => self.decoder.pos_std = parse(k, v)?,
            "projection.hidden" => self.projection.hidden = parse(k, v)?,
            "projection.out_dim" => self.projection.out_dim = parse(k, v)?,
            "projection.layers" => self.projection.layers = parse(k, v)?,
            "loss.lambda_u" => self.loss.lambda_u = parse(k, v)?,
            "loss.lambda_s" => self.loss.lambda_s = parse(k, v)?,
            "loss.lambda_rec" => self.loss.lambda_rec = parse(k, v)?,
            "loss.temperature_u" => self.loss.temperature_u = parse(k, v)?,
            "loss.temperature_s" => self.loss.temperature_s = parse(k, v)?,
            "data.kind" => d.kind = enum_value(k, v, DATA_KINDS)?,
            "data.path" => d.path = opt_path(v),
            "data.n_classes" => d.n_classes = parse(k, v)?,
            "data.parts_min" => d.parts_min = parse(k, v)?,
            "data.parts_max" => d.parts_max = parse(k, v)?,
            "data.instances_per_class" => d.instances_per_class = parse(k, v)?,
            "data.seed" => d.seed = parse(k, v)?,
            "data.known" => d.known = v.parse().map_err(|e: Error| Error::Config(format!("data.known: {e}")))?,
            "data.labeled_fraction" => d.labeled_fraction = parse(k, v)?,
            "data.split_path" => d.split_path = opt_path(v),
            "data.eval_k" => d.eval_k = parse(k, v)?,
            "aug.crop_scale_min" => d.aug.crop_scale.0 = parse(k, v)?,
            "aug.crop_scale_max" => d.aug.crop_scale.1 = parse(k, v)?,
            "aug.crop_ratio_min" => d.aug.crop_ratio.0 = parse(k, v)?,
            "aug.crop_ratio_max" => d.aug.crop_ratio.1 = parse(k, v)?,
            "aug.flip_prob" => d.aug.flip_prob = parse(k, v)?,
            "aug.brightness" => d.aug.brightness = parse(k, v)?,
            "aug.contrast" => d.aug.contrast = parse(k, v)?,
            "aug.saturation" => d.aug.saturation = parse(k, v)?,
            "aug.max_shift" => d.aug.max_shift = parse(k, v)?,
            "aug.resample_noise" => d.aug.resample_noise = parse(k, v)?,
            "optim.algorithm" => o.algorithm = enum_value(k, v, ALGORITHMS)?,
            "optim.lr" => o.lr = parse(k, v)?,
            "optim.backbone_lr_scale" => o.backbone_lr_scale = parse(k, v)?,
            "optim.momentum" => o.momentum = parse(k, v)?,
            "optim.weight_decay" => o.weight_decay = parse(k, v)?,
            "optim.schedule" => o.schedule = enum_value(k, v, SCHEDULES)?,
            "optim.epochs" => o.epochs = parse(k, v)?,
            "optim.batch_size" => o.batch_size = parse(k, v)?,
            "optim.grad_clip" => o.grad_clip = parse(k, v)?,
            "run.out_dir" => self.run.out_dir = PathBuf::from(v),
            "run.precision" => self.run.precision = enum_value(k, v, PRECISIONS)?,
            "run.threads" => self.run.threads = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let c = &self.clusterer;
        let d = &self.data;
        let o = &self.optim;
        vec![
            ("seed", self.seed.to_string()),
            ("backbone.kind", b.kind.to_string()),
            ("backbone.input_size", b.input_size.to_string()),
            ("backbone.patch_size", b.patch_size.to_string()),
            ("backbone.feat_dim", b.feat_dim.to_string()),
            ("backbone.trainable_depth", b.trainable_depth.to_string()),
            ("backbone.depth", b.depth.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.mlp_ratio", b.mlp_ratio.to_string()),
            ("backbone.weights_path", show_path(&b.weights_path)),
            ("backbone.palette_size", b.palette_size.to_string()),
            ("backbone.noise_std", b.noise_std.to_string()),
            ("backbone.embed_scale", b.embed_scale.to_string()),
            ("backbone.pos_scale", b.pos_scale.to_string()),
            ("backbone.palette_seed", b.palette_seed.to_string()),
            ("clusterer.k_max", c.k_max.to_string()),
            ("clusterer.d_slot", c.d_slot.to_string()),
            ("clusterer.iterations", c.iterations.to_string()),
            ("clusterer.gumbel_temperature", c.gumbel_temperature.to_string()),
            ("clusterer.selection_mode", c.selection_mode.to_string()),
            ("clusterer.sparsity_weight", c.sparsity_weight.to_string()),
            ("clusterer.sparsity_warmup", c.sparsity_warmup.to_string()),
            ("clusterer.mlp_hidden", c.mlp_hidden.to_string()),
            ("clusterer.scorer_hidden", c.scorer_hidden.to_string()),
            ("decoder.layers", self.decoder.layers.to_string()),
            ("decoder.hidden", self.decoder.hidden.to_string()),
            ("decoder.pos_std", self.decoder.pos_std.to_string()),
            ("projection.hidden", self.projection.hidden.to_string()),
            ("projection.out_dim", self.projection.out_dim.to_string()),
            ("projection.layers", self.projection.layers.to_string()),
            ("loss.lambda_u", self.loss.lambda_u.to_string()),
            ("loss.lambda_s", self.loss.lambda_s.to_string()),
            ("loss.lambda_rec", self.loss.lambda_rec.to_string()),
            ("loss.temperature_u", self.loss.temperature_u.to_string()),
            ("loss.temperature_s", self.loss.temperature_s.to_string()),
            ("data.kind", name_of(DATA_KINDS, d.kind).to_string()),
            ("data.path", show_path(&d.path)),
            ("data.n_classes", d.n_classes.to_string()),
            ("data.parts_min", d.parts_min.to_string()),
            ("data.parts_max", d.parts_max.to_string()),
            ("data.instances_per_class", d.instances_per_class.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.known", d.known.to_string()),
            ("data.labeled_fraction", d.labeled_fraction.to_string()),
            ("data.split_path", show_path(&d.split_path)),
            ("data.eval_k", d.eval_k.to_string()),
            ("aug.crop_scale_min", d.aug.crop_scale.0.to_string()),
            ("aug.crop_scale_max", d.aug.crop_scale.1.to_string()),
            ("aug.crop_ratio_min", d.aug.crop_ratio.0.to_string()),
            ("aug.crop_ratio_max", d.aug.crop_ratio.1.to_string()),
            ("aug.flip_prob", d.aug.flip_prob.to_string()),
            ("aug.brightness", d.aug.brightness.to_string()),
            ("aug.contrast", d.aug.contrast.to_string()),
            ("aug.saturation", d.aug.saturation.to_string()),
            ("aug.max_shift", d.aug.max_shift.to_string()),
            ("aug.resample_noise", d.aug.resample_noise.to_string()),
            ("optim.algorithm", name_of(ALGORITHMS, o.algorithm).to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.backbone_lr_scale", o.backbone_lr_scale.to_string()),
            ("optim.momentum", o.momentum.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.schedule", name_of(SCHEDULES, o.schedule).to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.batch_size", o.batch_size.to_string()),
            ("optim.grad_clip", o.grad_clip.to_string()),
            ("run.out_dir", self.run.out_dir.display().to_string()),
            ("run.precision", name_of(PRECISIONS, self.run.precision).to_string()),
            ("run.threads", self.run.threads.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("config line {}", n + 1), format!("expected key=value, got {line:?}"))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative data paths are relative to the config file
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [
            &mut cfg.data.path,
            &mut cfg.data.split_path,
            &mut cfg.backbone.weights_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides such as the CLI's `--set` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.clusterer.validate()?;
        self.decoder.validate()?;
        self.projection.validate()?;
        self.loss.validate()?;
        self.data.aug.validate()?;
        if self.optim.epochs == 0 {
            return Err(Error::Config("optim.epochs must be at least 1".into()));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::Config("optim.batch_size must be at least 2".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.backbone_lr_scale >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config("optim.momentum must be in [0, 1)".into()));
        }
        if !(self.data.labeled_fraction > 0.0 && self.data.labeled_fraction < 1.0) {
            return Err(Error::Config("data.labeled_fraction must be in (0, 1)".into()));
        }
        if self.data.kind != DataKind::Synthetic && self.data.path.is_none() && self.data.split_path.is_none() {
            return Err(Error::Config("data.path is required for image data".into()));
        }
        if self.data.kind == DataKind::Synthetic && self.backbone.kind != BackboneKind::Synthetic {
            return Err(Error::Config("synthetic data needs backbone.kind=synthetic".into()));
        }
        if self.data.kind != DataKind::Synthetic && self.backbone.kind == BackboneKind::Synthetic {
            return Err(Error::Config("image data needs backbone.kind=pretrained-vit".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_overrides(&[
            "clusterer.k_max=7",
            "data.known=first:3",
            "backbone.weights_path=/w/vit.safetensors",
            "loss.lambda_u=0.25",
            "optim.algorithm=adam",
        ])
        .unwrap();
        let back = PipelineConfig::parse(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_kv()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn default_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.clusterer.k_max, 50);
        assert_eq!(cfg.clusterer.d_slot, 64);
        assert_eq!(cfg.decoder.layers, 4);
        assert_eq!(cfg.decoder.hidden, 128);
        assert_eq!((cfg.loss.lambda_u, cfg.loss.lambda_s, cfg.loss.lambda_rec), (0.6, 0.3, 0.1));
        assert_eq!(cfg.backbone.trainable_depth, 1);
    }

    #[test]
    fn unknown_key_and_bad_value_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        assert!(matches!(cfg.set("clusterer.kmax", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("clusterer.k_max", "three"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_overrides(&["novalue"]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("seed 3"), Err(Error::Parse { .. })));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = PipelineConfig::parse("# header\n\nseed=4 # trailing\noptim.epochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.optim.epochs, 2);
    }

    #[test]
    fn validation_rules() {
        let mut cfg = PipelineConfig::default();
        cfg.set("backbone.kind", "synthetic").unwrap();
        cfg.set("backbone.input_size", "6").unwrap();
        cfg.set("backbone.patch_size", "1").unwrap();
        cfg.set("backbone.trainable_depth", "0").unwrap();
        cfg.validate().unwrap();
        cfg.set("optim.batch_size", "1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
