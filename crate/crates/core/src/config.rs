//! Run configuration: `key = value` lines, `#` comments, command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_cifar10, load_mnist, ImageDataset};
use crate::error::{AibError, Result};
use crate::model::{ConvBlock, ModelConfig};
use crate::objective::Objective;
use crate::train::TrainConfig;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "AIB_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Every setting of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    /// Classes to keep, relabelled in this order; empty keeps all.
    pub classes: Vec<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub beta: f64,
    pub lambda_q: f64,
    pub lambda_c: f64,
    pub latent_dim: usize,
    pub anchors: usize,
    pub att_samples: usize,
    pub z_samples: usize,
    pub backbone: Vec<ConvBlock>,
    pub encoder: Vec<ConvBlock>,
}

/// Recognized keys, in the order the effective configuration is written.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset",
    "data_dir",
    "classes",
    "train_per_class",
    "test_per_class",
    "out_dir",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "lr_step",
    "lr_factor",
    "augment",
    "objective",
    "eval_batch_size",
    "beta",
    "lambda_q",
    "lambda_c",
    "latent_dim",
    "anchors",
    "att_samples",
    "z_samples",
    "backbone",
    "encoder",
];

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(2, [1, 28, 28]);
        RunConfig {
            seed: 0,
            dataset: None,
            data_dir: None,
            classes: Vec::new(),
            train_per_class: None,
            test_per_class: None,
            out_dir: None,
            train: TrainConfig::default(),
            beta: m.beta,
            lambda_q: m.lambda_q,
            lambda_c: m.lambda_c,
            latent_dim: m.latent_dim,
            anchors: m.anchors,
            att_samples: m.att_samples,
            z_samples: m.z_samples,
            backbone: m.backbone,
            encoder: m.encoder,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

fn parse_opt_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value.is_empty() || value == "all" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

/// `32:pool,64:pool` style block lists; an empty value is an empty list.
pub fn parse_blocks(value: &str) -> std::result::Result<Vec<ConvBlock>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (ch, pool) = match item.split_once(':') {
                Some((ch, "pool")) => (ch, true),
                Some((_, other)) => return Err(format!("unknown block option `{other}` in `{item}`")),
                None => (item, false),
            };
            let channels: usize = ch.trim().parse().map_err(|_| format!("bad channel count in `{item}`"))?;
            Ok(ConvBlock { channels, pool })
        })
        .collect()
}

pub fn format_blocks(blocks: &[ConvBlock]) -> String {
    blocks
        .iter()
        .map(|b| {
            if b.pool {
                format!("{}:pool", b.channels)
            } else {
                b.channels.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses a configuration file's text on top of the defaults. `origin`
    /// names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AibError::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|m| AibError::Config(format!("{origin}:{}: {m}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AibError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| AibError::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
            .map_err(|m| AibError::Config(format!("override `{assignment}`: {m}")))
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => {
                self.dataset = Some(match value {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => return Err(format!("unknown dataset `{value}` (expected mnist or cifar10)")),
                })
            }
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "classes" => {
                self.classes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "train_per_class" => self.train_per_class = parse_opt_num(key, value)?,
            "test_per_class" => self.test_per_class = parse_opt_num(key, value)?,
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "lr" => self.train.base_lr = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "lr_step" => self.train.lr_step_epochs = parse_num(key, value)?,
            "lr_factor" => self.train.lr_factor = parse_num(key, value)?,
            "augment" => self.train.augment = parse_bool(key, value)?,
            "objective" => {
                self.train.objective = match value {
                    "full" => Objective::Full,
                    "cross-entropy-only" => Objective::CrossEntropyOnly,
                    _ => return Err(format!("unknown objective `{value}` (expected full or cross-entropy-only)")),
                }
            }
            "eval_batch_size" => self.train.eval_batch_size = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "lambda_q" => self.lambda_q = parse_num(key, value)?,
            "lambda_c" => self.lambda_c = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "anchors" => self.anchors = parse_num(key, value)?,
            "att_samples" => self.att_samples = parse_num(key, value)?,
            "z_samples" => self.z_samples = parse_num(key, value)?,
            "backbone" => self.backbone = parse_blocks(value)?,
            "encoder" => self.encoder = parse_blocks(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Fills `data_dir` from the environment when unset, then checks that the
    /// keys a training run needs are present and the numbers are sane.
    pub fn finalize(&mut self, needs_out_dir: bool) -> Result<()> {
        if self.data_dir.is_none() {
            self.data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
        let mut missing = Vec::new();
        if self.dataset.is_none() {
            missing.push("dataset");
        }
        if self.data_dir.is_none() {
            missing.push("data_dir");
        }
        if needs_out_dir && self.out_dir.is_none() {
            missing.push("out_dir");
        }
        if !missing.is_empty() {
            return Err(AibError::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_batch_size == 0 || t.lr_step_epochs == 0 {
            return Err(AibError::Config(
                "epochs, batch_size, eval_batch_size and lr_step must be at least 1".into(),
            ));
        }
        if !(t.base_lr > 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) || !(t.lr_factor > 0.0)
        {
            return Err(AibError::Config(
                "lr and lr_factor must be positive, momentum in [0, 1), weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Loads the configured dataset and applies the class and per-class
    /// selection. The test split is standardized with the training statistics.
    pub fn load_data(&self) -> Result<(ImageDataset, ImageDataset)> {
        let dir = self
            .data_dir
            .as_deref()
            .ok_or_else(|| AibError::Config("missing required keys: data_dir".into()))?;
        let (train, test) = match self.dataset {
            Some(DatasetKind::Mnist) => load_mnist(dir)?,
            Some(DatasetKind::Cifar10) => load_cifar10(dir)?,
            None => return Err(AibError::Config("missing required keys: dataset".into())),
        };
        if self.classes.is_empty() && self.train_per_class.is_none() && self.test_per_class.is_none() {
            return Ok((train, test));
        }
        let classes: Vec<usize> = if self.classes.is_empty() {
            (0..train.num_classes()).collect()
        } else {
            self.classes.clone()
        };
        let train = train.subset(&classes, self.train_per_class)?;
        let test = test
            .subset(&classes, self.test_per_class)?
            .with_normalization(train.normalization().clone());
        Ok((train, test))
    }

    /// The architecture for a dataset with the given class count and image shape.
    pub fn model_config(&self, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(num_classes, input_shape);
        m.beta = self.beta;
        m.lambda_q = self.lambda_q;
        m.lambda_c = self.lambda_c;
        m.latent_dim = self.latent_dim;
        m.anchors = self.anchors;
        m.att_samples = self.att_samples;
        m.z_samples = self.z_samples;
        m.backbone = self.backbone.clone();
        m.encoder = self.encoder.clone();
        m.validate()?;
        Ok(m)
    }

    /// The effective configuration as parseable text, one line per key.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |n| n.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.dataset.map(|d| d.name().to_string()).unwrap_or_default(),
            path(&self.data_dir),
            self.classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            opt(self.train_per_class),
            opt(self.test_per_class),
            path(&self.out_dir),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.base_lr.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.lr_step_epochs.to_string(),
            t.lr_factor.to_string(),
            t.augment.to_string(),
            match t.objective {
                Objective::Full => "full".into(),
                Objective::CrossEntropyOnly => "cross-entropy-only".into(),
            },
            t.eval_batch_size.to_string(),
            self.beta.to_string(),
            self.lambda_q.to_string(),
            self.lambda_c.to_string(),
            self.latent_dim.to_string(),
            self.anchors.to_string(),
            self.att_samples.to_string(),
            self.z_samples.to_string(),
            format_blocks(&self.backbone),
            format_blocks(&self.encoder),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# toy run\nseed = 7\ndataset = mnist # digits\nclasses = 0, 1\nbackbone = 8:pool,16\n\nlr=0.05\n";
        let mut cfg = RunConfig::parse(text, "run.cfg").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset, Some(DatasetKind::Mnist));
        assert_eq!(cfg.classes, vec![0, 1]);
        assert_eq!(cfg.train.base_lr, 0.05);
        assert_eq!(
            cfg.backbone,
            vec![ConvBlock { channels: 8, pool: true }, ConvBlock { channels: 16, pool: false }]
        );
        cfg.apply_override("epochs=3").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 0.1\n", "a.cfg").unwrap_err();
        assert!(err.to_string().contains("a.cfg:2"), "{err}");
        assert!(err.to_string().contains("learning_rate"));
        let err = RunConfig::parse("seed 1\n", "a.cfg").unwrap_err();
        assert!(err.to_string().contains("a.cfg:1"));
        let err = RunConfig::parse("epochs = many\n", "a.cfg").unwrap_err();
        assert!(matches!(err, AibError::Config(_)));
    }

    #[test]
    fn missing_keys_are_named() {
        let mut cfg = RunConfig::default();
        cfg.data_dir = Some("/data".into());
        let err = cfg.finalize(true).unwrap_err().to_string();
        assert!(err.contains("dataset") && err.contains("out_dir"), "{err}");
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::parse("dataset = cifar10\ntrain_per_class = 10\nencoder = 4:pool\n", "x").unwrap();
        cfg.data_dir = Some("/tmp/d".into());
        cfg.train.objective = Objective::CrossEntropyOnly;
        let again = RunConfig::parse(&cfg.to_text(), "y").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn model_config_is_validated() {
        let mut cfg = RunConfig::default();
        cfg.anchors = 0;
        assert!(cfg.model_config(2, [1, 28, 28]).is_err());
    }
}
