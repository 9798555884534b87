//! Flat `key = value` run configuration. `#` starts a comment; unknown keys
//! are rejected. Command-line `--set key=value` pairs are applied on top of
//! the file, which is applied on top of the defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::TrainConfig;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

pub const KEYS: [&str; 23] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "decay_every",
    "seed",
    "clip_norm",
    "init_from_teacher",
    "redegrade",
    "visual",
    "semantic",
    "logits",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "tau_semantic",
    "tau_logits",
    "alpha",
    "beam_k",
    "threshold_r",
    "train_data",
    "test_data",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

enum SetError {
    UnknownKey,
    BadValue(String),
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), SetError> {
        let t = &mut self.train;
        let w = &mut t.weights;
        let r: std::result::Result<(), String> = (|| {
            match key {
                "epochs" => t.epochs = parse(key, value)?,
                "batch_size" => t.batch_size = parse(key, value)?,
                "learning_rate" => t.learning_rate = parse(key, value)?,
                "lr_decay" => t.lr_decay = parse(key, value)?,
                "decay_every" => t.decay_every = parse(key, value)?,
                "seed" => t.seed = parse(key, value)?,
                "clip_norm" => {
                    let c: f64 = parse(key, value)?;
                    t.clip_norm = (c > 0.0).then_some(c);
                }
                "init_from_teacher" => t.init_from_teacher = parse_bool(key, value)?,
                "redegrade" => t.redegrade = parse_bool(key, value)?,
                "visual" => t.visual = parse_bool(key, value)?,
                "semantic" => t.semantic = parse_bool(key, value)?,
                "logits" => t.logits = parse_bool(key, value)?,
                "lambda1" => w.lambda1 = parse(key, value)?,
                "lambda2" => w.lambda2 = parse(key, value)?,
                "lambda3" => w.lambda3 = parse(key, value)?,
                "lambda4" => w.lambda4 = parse(key, value)?,
                "tau_semantic" => w.tau_semantic = parse(key, value)?,
                "tau_logits" => w.tau_logits = parse(key, value)?,
                "alpha" => w.alpha = parse(key, value)?,
                "beam_k" => w.beam_k = parse(key, value)?,
                "threshold_r" => w.threshold_r = parse(key, value)?,
                "train_data" => self.train_data = (!value.is_empty()).then(|| PathBuf::from(value)),
                "test_data" => self.test_data = (!value.is_empty()).then(|| PathBuf::from(value)),
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        match r {
            Ok(()) => Ok(()),
            Err(m) if m.is_empty() => Err(SetError::UnknownKey),
            Err(m) => Err(SetError::BadValue(m)),
        }
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            match self.set(key, value.trim()) {
                Ok(()) => {}
                Err(SetError::UnknownKey) => {
                    return Err(Error::Config(format!("unknown key {key:?} at line {}", i + 1)))
                }
                Err(SetError::BadValue(message)) => return Err(Error::Parse { line: i + 1, message }),
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        let key = key.trim();
        match self.set(key, value.trim()) {
            Ok(()) => Ok(()),
            Err(SetError::UnknownKey) => Err(Error::Config(format!("unknown key {key:?}"))),
            Err(SetError::BadValue(m)) => Err(Error::Config(m)),
        }
    }

    /// Defaults, then `file`, then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        let w = &t.weights;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: [String; 23] = [
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.lr_decay.to_string(),
            t.decay_every.to_string(),
            t.seed.to_string(),
            t.clip_norm.unwrap_or(0.0).to_string(),
            t.init_from_teacher.to_string(),
            t.redegrade.to_string(),
            t.visual.to_string(),
            t.semantic.to_string(),
            t.logits.to_string(),
            w.lambda1.to_string(),
            w.lambda2.to_string(),
            w.lambda3.to_string(),
            w.lambda4.to_string(),
            w.tau_semantic.to_string(),
            w.tau_logits.to_string(),
            w.alpha.to_string(),
            w.beam_k.to_string(),
            w.threshold_r.to_string(),
            path(&self.train_data),
            path(&self.test_data),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
