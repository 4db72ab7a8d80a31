//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. List values are
//! comma separated; shapes are written `3x16x16`. Command-line overrides use
//! the same keys.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use lutmoe::data::DatasetFormat;
use lutmoe::graph::Granularity;
use lutmoe::retrain::TrainConfig;
use lutmoe::Variant;

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "arch",
    "variants",
    "experts",
    "moe_ratio",
    "granularity",
    "multipliers",
    "classes",
    "input",
    "dataset",
    "dataset_format",
    "synthetic_classes",
    "synthetic_samples",
    "synthetic_shape",
    "synthetic_noise",
    "eval_samples",
    "pretrain_epochs",
    "pretrain_lr",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "momentum",
    "retrain",
    "checkpoint",
    "seed",
    "out",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub arch: String,
    pub variants: Vec<Variant>,
    pub experts: usize,
    pub moe_ratio: Option<f64>,
    pub granularity: Option<Granularity>,
    /// Builtin multiplier names or table file paths.
    pub multipliers: Vec<String>,
    pub classes: Option<usize>,
    pub input: Option<Vec<usize>>,
    /// `synthetic` or a dataset path.
    pub dataset: String,
    /// `None` picks the format from the path.
    pub dataset_format: Option<DatasetFormat>,
    pub synthetic_classes: usize,
    pub synthetic_samples: usize,
    pub synthetic_shape: Vec<usize>,
    pub synthetic_noise: f32,
    pub eval_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    pub train: TrainConfig,
    pub retrain: bool,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: "toy_cnn".into(),
            variants: vec![Variant::Dense],
            experts: lutmoe::moe::DEFAULT_EXPERTS,
            moe_ratio: None,
            granularity: None,
            multipliers: vec![lutmoe::axmul::EXACT_NAME.into()],
            classes: None,
            input: None,
            dataset: "synthetic".into(),
            dataset_format: None,
            synthetic_classes: 10,
            synthetic_samples: 1200,
            synthetic_shape: vec![3, 16, 16],
            synthetic_noise: 1.0,
            eval_samples: 200,
            pretrain_epochs: 10,
            pretrain_lr: 0.05,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 32,
                ..TrainConfig::default()
            },
            retrain: false,
            checkpoint: None,
            seed: 0,
            out: None,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> String {
    format!("{key} = {value:?}: expected {what}")
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

pub fn parse_shape(v: &str) -> std::result::Result<Vec<usize>, String> {
    let dims: Vec<usize> = v
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("shape", v, "dimensions like 3x16x16"))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(bad("shape", v, "non-zero dimensions"));
    }
    Ok(dims)
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" | "auto" => None,
        s => Some(s),
    }
}

impl ExperimentConfig {
    /// Set one key. Errors are plain messages; callers add location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "arch" => self.arch = v.to_string(),
            "variants" | "variant" => {
                self.variants = list(v).iter().map(|s| s.parse::<Variant>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
                if self.variants.is_empty() {
                    return Err(bad(key, v, "at least one variant"));
                }
            }
            "experts" => self.experts = num(key, v, "a positive integer")?,
            "moe_ratio" => self.moe_ratio = optional(v).map(|s| num(key, s, "a ratio")).transpose()?,
            "granularity" => {
                self.granularity = match optional(v) {
                    None => None,
                    Some("sample" | "per_sample") => Some(Granularity::PerSample),
                    Some("token" | "per_token") => Some(Granularity::PerToken),
                    Some(_) => return Err(bad(key, v, "per_sample or per_token")),
                }
            }
            "multipliers" | "multiplier" => self.multipliers = list(v),
            "classes" => self.classes = optional(v).map(|s| num(key, s, "a class count")).transpose()?,
            "input" => self.input = optional(v).map(parse_shape).transpose()?,
            "dataset" => self.dataset = v.to_string(),
            "dataset_format" => {
                self.dataset_format = optional(v).map(|s| s.parse::<DatasetFormat>().map_err(|e| e.to_string())).transpose()?
            }
            "synthetic_classes" => self.synthetic_classes = num(key, v, "a class count")?,
            "synthetic_samples" => self.synthetic_samples = num(key, v, "a sample count")?,
            "synthetic_shape" => self.synthetic_shape = parse_shape(v)?,
            "synthetic_noise" => self.synthetic_noise = num(key, v, "a noise level")?,
            "eval_samples" => self.eval_samples = num(key, v, "a sample count")?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, v, "an epoch count")?,
            "pretrain_lr" => self.pretrain_lr = num(key, v, "a learning rate")?,
            "lr" | "learning_rate" => self.train.learning_rate = num(key, v, "a learning rate")?,
            "weight_decay" => self.train.weight_decay = num(key, v, "a weight decay")?,
            "batch_size" => self.train.batch_size = num(key, v, "a batch size")?,
            "epochs" => self.train.epochs = num(key, v, "an epoch count")?,
            "momentum" => self.train.momentum = num(key, v, "a momentum")?,
            "retrain" => self.retrain = flag(key, v)?,
            "checkpoint" => self.checkpoint = optional(v).map(PathBuf::from),
            "seed" => {
                self.seed = num(key, v, "an unsigned integer")?;
                self.train.seed = self.seed;
            }
            "out" => self.out = optional(v).map(PathBuf::from),
            other => return Err(format!("unknown key {other:?}; known keys: {}", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Parse config text. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k, v).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v).map_err(|m| CliError::Config(format!("override {o:?}: {m}")))?;
        }
        Ok(())
    }

    /// Checks that need no architecture build or data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.experts == 0 {
            return fail("experts must be at least 1".into());
        }
        if let Some(r) = self.moe_ratio {
            if !self.arch.starts_with("vit") {
                return fail(format!("moe_ratio applies to vit architectures only, not {}", self.arch));
            }
            if !(r > 0.0 && r <= 1.0) {
                return fail(format!("moe_ratio must lie in (0, 1], got {r}"));
            }
        }
        if self.multipliers.is_empty() {
            return fail("no multipliers requested".into());
        }
        if let Some(c) = &self.checkpoint {
            let c = lutmoe::data::resolve_data_path(c);
            if !c.exists() {
                return Err(CliError::io(c, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        if self.dataset != "synthetic" {
            let p = lutmoe::data::resolve_data_path(Path::new(&self.dataset));
            if !p.exists() {
                return Err(CliError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 over the semantic fields; the output path is excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_line_numbers() {
        let cfg = ExperimentConfig::parse("# sweep\narch = toy_mlp\nvariants = dense, soft\n\nlr=0.2\n", "t").unwrap();
        assert_eq!(cfg.arch, "toy_mlp");
        assert_eq!(cfg.variants, vec![Variant::Dense, Variant::Soft]);
        assert_eq!(cfg.train.learning_rate, 0.2);
        let err = ExperimentConfig::parse("arch = toy_cnn\nbogus = 1\n", "t").unwrap_err();
        assert!(matches!(err, CliError::ConfigLine { line: 2, .. }), "{err}");
        let err = ExperimentConfig::parse("experts = many\n", "t").unwrap_err();
        assert!(matches!(err, CliError::ConfigLine { line: 1, .. }));
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = Some("elsewhere.csv".into());
        assert_eq!(a.hash(), b.hash());
        for (k, v) in [("seed", "1"), ("lr", "0.3"), ("variants", "hard"), ("multipliers", "trunc2"), ("retrain", "true")] {
            let mut c = a.clone();
            c.set(k, v).unwrap();
            assert_ne!(a.hash(), c.hash(), "{k}");
        }
        let mut d = a.clone();
        d.set("lr", "0.050").unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn ratio_is_vit_only() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("moe_ratio", "0.25").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("arch", "vit_small_spec").unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["seed=3", "seed=4"]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        assert!(cfg.apply_overrides(&["nokey"]).is_err());
    }
}
