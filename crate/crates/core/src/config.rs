//! Flat `key = value` run configuration.
//!
//! Resolution order is defaults, then the file, then command-line overrides;
//! the last assignment of a key wins. `#` starts a comment. The digest is the
//! SHA-256 of the resolved map printed one sorted `key=value` per line, so it
//! does not depend on the order keys were written in. Artifact locations and
//! the execution mode are left out of the digest: they never change results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::category::{CategorySpace, Setting, SplitSize};
use crate::dataset::PixelEncoding;
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SizeBands};
use crate::exec::Exec;
use crate::model::ModelConfig;
use crate::scene::SceneSpec;
use crate::tensor::hex;
use crate::train::{FocalConfig, OptimConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    UsizeList,
    U64List,
    OneOf(&'static [&'static str]),
}

const SETTINGS: &[&str] = &["UC", "RF-UC", "NF-UC", "UO", "UV", "FULL"];

const UNDIGESTED: &[&str] = &["out_dir", "dataset", "checkpoint", "exec"];

/// `(key, default, kind)`, every tunable of a run.
const KEYS: &[(&str, &str, Kind)] = &[
    // model
    ("layers", "4", Kind::Usize),
    ("width", "64", Kind::Usize),
    ("heads", "4", Kind::Usize),
    ("grid", "8", Kind::Usize),
    ("patch_size", "8", Kind::Usize),
    ("mlp_ratio", "4", Kind::Usize),
    ("adapter_dim", "16", Kind::Usize),
    ("adapter_heads", "4", Kind::Usize),
    ("kernels", "1,3,5", Kind::UsizeList),
    ("num_queries", "4", Kind::Usize),
    ("roi_size", "3", Kind::Usize),
    ("roi_samples", "2", Kind::Usize),
    ("det_dim", "32", Kind::Usize),
    ("text_dim", "32", Kind::Usize),
    ("use_la", "true", Kind::Bool),
    ("use_ia", "true", Kind::Bool),
    ("patches_see_ho", "true", Kind::Bool),
    ("ln_eps", "1e-5", Kind::F64),
    ("init_seed", "0", Kind::U64),
    ("frozen_seed", "0", Kind::U64),
    // scenes
    ("n_objects", "4", Kind::Usize),
    ("n_verbs", "4", Kind::Usize),
    ("max_humans", "2", Kind::Usize),
    ("max_objects", "3", Kind::Usize),
    ("cue_scale", "0.5", Kind::F64),
    ("interact_prob", "0.85", Kind::F64),
    ("train_scenes", "400", Kind::Usize),
    ("val_scenes", "50", Kind::Usize),
    ("test_scenes", "150", Kind::Usize),
    ("data_seed", "0", Kind::U64),
    ("pixel_encoding", "raw", Kind::OneOf(&["hex", "raw"])),
    // detector
    ("box_jitter", "0.01", Kind::F64),
    ("class_flip", "0.0", Kind::F64),
    ("miss", "0.0", Kind::F64),
    ("feature_noise", "0.1", Kind::F64),
    ("embed_seed", "0", Kind::U64),
    // split
    ("setting", "UC", Kind::OneOf(SETTINGS)),
    ("unseen_count", "3", Kind::Usize),
    ("split_seed", "0", Kind::U64),
    // training
    ("epochs", "6", Kind::Usize),
    ("lr", "3e-3", Kind::F64),
    ("weight_decay", "1e-4", Kind::F64),
    ("beta1", "0.9", Kind::F64),
    ("beta2", "0.999", Kind::F64),
    ("adam_eps", "1e-8", Kind::F64),
    ("focal_alpha", "0.25", Kind::F64),
    ("focal_gamma", "2.0", Kind::F64),
    ("iou_threshold", "0.5", Kind::F64),
    ("train_seed", "0", Kind::U64),
    // evaluation
    ("lambda", "1.0", Kind::F64),
    ("small_band", "0.01", Kind::F64),
    ("large_band", "0.09", Kind::F64),
    // gradient check
    ("gradcheck_eps", "1e-5", Kind::F64),
    ("gradcheck_max_entries", "6", Kind::Usize),
    ("gradcheck_seed", "0", Kind::U64),
    // ablation
    ("ablate_seeds", "0,1,2", Kind::U64List),
    // execution and paths
    ("exec", "parallel", Kind::OneOf(&["parallel", "sequential"])),
    ("out_dir", "runs", Kind::Text),
    ("dataset", "", Kind::Text),
    ("checkpoint", "", Kind::Text),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(_, _, kind)| kind)
}

fn check(kind: Kind, value: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| Err(format!("`{value}` is not {what}"));
    let list_ok = |parse: &dyn Fn(&str) -> bool| value.split(',').all(|p| parse(p.trim()));
    match kind {
        Kind::Usize if value.parse::<usize>().is_err() => bad("a non-negative integer"),
        Kind::U64 if value.parse::<u64>().is_err() => bad("a non-negative integer"),
        Kind::F64 if !value.parse::<f64>().is_ok_and(f64::is_finite) => bad("a finite number"),
        Kind::Bool if value != "true" && value != "false" => bad("`true` or `false`"),
        Kind::UsizeList if value.is_empty() || !list_ok(&|p| p.parse::<usize>().is_ok()) => {
            bad("a comma-separated list of integers")
        }
        Kind::U64List if value.is_empty() || !list_ok(&|p| p.parse::<u64>().is_ok()) => {
            bad("a comma-separated list of integers")
        }
        Kind::OneOf(opts) if !opts.iter().any(|o| o.eq_ignore_ascii_case(value)) => {
            bad(&format!("one of {}", opts.join(", ")))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `text` (a config file body), then each `key=value`
    /// override in order.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set_at(k.trim(), v.trim(), i + 1)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                message: format!("override `{o}` is not `key=value`"),
            })?;
            cfg.set_at(k.trim(), v.trim(), 0)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, overrides)
    }

    /// Line 0 stands for the command line.
    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        check(kind, value).map_err(|m| Error::Config {
            line,
            message: format!("{key}: {m}"),
        })?;
        let value = match kind {
            Kind::OneOf(_) => value.to_ascii_lowercase(),
            Kind::UsizeList | Kind::U64List => value.split(',').map(str::trim).collect::<Vec<_>>().join(","),
            _ => value.to_string(),
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, 0)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> T {
        self.values[key]
            .parse()
            .unwrap_or_else(|_| panic!("`{key}` was validated on assignment"))
    }

    fn usize(&self, key: &str) -> usize {
        self.parsed(key)
    }

    fn u64(&self, key: &str) -> u64 {
        self.parsed(key)
    }

    fn f64(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    fn bool(&self, key: &str) -> bool {
        self.parsed(key)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Vec<T> {
        self.values[key].split(',').map(|p| p.parse().ok().expect("validated list")).collect()
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| !UNDIGESTED.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            layers: self.usize("layers"),
            width: self.usize("width"),
            heads: self.usize("heads"),
            grid: self.usize("grid"),
            patch_size: self.usize("patch_size"),
            mlp_ratio: self.usize("mlp_ratio"),
            adapter_dim: self.usize("adapter_dim"),
            adapter_heads: self.usize("adapter_heads"),
            kernels: self.list("kernels"),
            num_queries: self.usize("num_queries"),
            roi_size: self.usize("roi_size"),
            roi_samples: self.usize("roi_samples"),
            det_dim: self.usize("det_dim"),
            text_dim: self.usize("text_dim"),
            use_la: self.bool("use_la"),
            use_ia: self.bool("use_ia"),
            patches_see_ho: self.bool("patches_see_ho"),
            ln_eps: self.f64("ln_eps"),
            init_seed: self.u64("init_seed"),
            frozen_seed: self.u64("frozen_seed"),
        }
    }

    pub fn space(&self) -> Result<CategorySpace> {
        CategorySpace::toy(self.usize("n_objects"), self.usize("n_verbs"))
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::new(self.space()?)?;
        spec.image_size = self.usize("grid") * self.usize("patch_size");
        spec.patch_size = self.usize("patch_size");
        spec.max_humans = self.usize("max_humans");
        spec.max_objects = self.usize("max_objects");
        spec.cue_scale = self.f64("cue_scale");
        spec.interact_prob = self.f64("interact_prob");
        spec.validate()?;
        Ok(spec)
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            box_jitter: self.f64("box_jitter"),
            class_flip: self.f64("class_flip"),
            miss: self.f64("miss"),
            feature_dim: self.usize("det_dim"),
            feature_noise: self.f64("feature_noise"),
            embed_seed: self.u64("embed_seed"),
            num_classes: self.usize("n_objects"),
        }
    }

    pub fn setting(&self) -> Setting {
        self.values["setting"].parse().expect("validated setting")
    }

    pub fn split_size(&self) -> SplitSize {
        SplitSize::Count(self.usize("unseen_count"))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.usize("epochs"),
            seed: self.u64("train_seed"),
            optim: OptimConfig {
                lr: self.f64("lr"),
                weight_decay: self.f64("weight_decay"),
                beta1: self.f64("beta1"),
                beta2: self.f64("beta2"),
                eps: self.f64("adam_eps"),
            },
            focal: FocalConfig {
                alpha: self.f64("focal_alpha"),
                gamma: self.f64("focal_gamma"),
                iou_threshold: self.f64("iou_threshold"),
            },
            eval: self.eval(),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            lambda: self.f64("lambda"),
            iou_threshold: self.f64("iou_threshold"),
            bands: SizeBands {
                small_below: self.f64("small_band"),
                large_from: self.f64("large_band"),
            },
        }
    }

    pub fn exec(&self) -> Exec {
        match self.values["exec"].as_str() {
            "sequential" => Exec::Sequential,
            _ => Exec::Parallel,
        }
    }

    pub fn pixel_encoding(&self) -> PixelEncoding {
        match self.values["pixel_encoding"].as_str() {
            "hex" => PixelEncoding::Hex,
            _ => PixelEncoding::Raw,
        }
    }

    pub fn seeds(&self, key: &str) -> Vec<u64> {
        self.list(key)
    }

    pub fn count(&self, key: &str) -> usize {
        self.usize(key)
    }

    pub fn number(&self, key: &str) -> f64 {
        self.f64(key)
    }

    pub fn seed(&self, key: &str) -> u64 {
        self.u64(key)
    }

    /// Empty path values mean "not set".
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}
