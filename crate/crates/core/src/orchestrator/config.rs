use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datagen::ContextKind;
use crate::diffuser::DiffuserConfig;
use crate::error::{Error, Result};
use crate::losses::{Distance, LossConfig};
use crate::numerics::AdamConfig;

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSource {
    Generated(ContextKind),
    /// A directory of `agent_<id>_<split>.csv` files.
    Files(PathBuf),
}

impl std::fmt::Display for ContextSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContextSource::Generated(k) => write!(f, "{k}"),
            ContextSource::Files(p) => write!(f, "data:{}", p.display()),
        }
    }
}

impl std::str::FromStr for ContextSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("data:") {
            Some(path) if !path.is_empty() => Ok(ContextSource::Files(PathBuf::from(path))),
            Some(_) => Err(Error::config("context", "`data:` needs a directory")),
            None => s.parse().map(ContextSource::Generated),
        }
    }
}

/// Hyperparameters and I/O settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub context: ContextSource,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub beta: f64,
    pub tau: f64,
    pub window: usize,
    pub batch: usize,
    pub cluster_period: usize,
    pub cluster_samples: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            context: ContextSource::Generated(ContextKind::Simple),
            epochs: 5,
            lr: 1e-3,
            lambda: 0.9,
            temperature: 0.1,
            beta: 2.0,
            tau: 0.97,
            window: 10,
            batch: 50,
            cluster_period: 2,
            cluster_samples: 20,
            seed: 42,
            out_dir: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 13] = [
    "context",
    "epochs",
    "lr",
    "lambda",
    "temperature",
    "beta",
    "tau",
    "window",
    "batch",
    "cluster_period",
    "cluster_samples",
    "seed",
    "out_dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not {what}")))
}

impl RunConfig {
    pub fn for_context(kind: ContextKind) -> Self {
        Self {
            context: ContextSource::Generated(kind),
            ..Self::default()
        }
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim().trim_matches('"');
        match key {
            "context" => self.context = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value, "a non-negative integer")?,
            "lr" => self.lr = parse_value(key, value, "a number")?,
            "lambda" => self.lambda = parse_value(key, value, "a number")?,
            "temperature" => self.temperature = parse_value(key, value, "a number")?,
            "beta" => self.beta = parse_value(key, value, "a number")?,
            "tau" => self.tau = parse_value(key, value, "a number")?,
            "window" => self.window = parse_value(key, value, "a positive integer")?,
            "batch" => self.batch = parse_value(key, value, "a positive integer")?,
            "cluster_period" => {
                self.cluster_period = parse_value(key, value, "a positive integer")?
            }
            "cluster_samples" => {
                self.cluster_samples = parse_value(key, value, "a positive integer")?
            }
            "seed" => self.seed = parse_value(key, value, "an unsigned 64-bit integer")?,
            "out_dir" => {
                self.out_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => {
                return Err(Error::config(
                    other,
                    format!("unknown key (expected one of {})", CONFIG_KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value)
    }

    /// Applies a config document over `self`.
    ///
    /// Accepts flat `key = value` lines (`#` comments, optional `[section]`
    /// headers are ignored) or a JSON object, possibly nested one level.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        if text.trim_start().starts_with('{') {
            let doc: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| Error::config("config", format!("invalid JSON document: {e}")))?;
            return self.apply_json(&doc);
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected key=value", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    fn apply_json(&mut self, doc: &serde_json::Value) -> Result<()> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::config("config", "JSON config must be an object"))?;
        for (key, value) in obj {
            match value {
                serde_json::Value::Object(_) => self.apply_json(value)?,
                serde_json::Value::String(s) => self.set(key, s)?,
                serde_json::Value::Null => self.set(key, "")?,
                other => self.set(key, &other.to_string())?,
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "context = {}", self.context);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "temperature = {}", self.temperature);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "window = {}", self.window);
        let _ = writeln!(out, "batch = {}", self.batch);
        let _ = writeln!(out, "cluster_period = {}", self.cluster_period);
        let _ = writeln!(out, "cluster_samples = {}", self.cluster_samples);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "out_dir = {}",
            self.out_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::config(
                "beta",
                format!("{} must be at least 1", self.beta),
            ));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::config(
                "tau",
                format!("{} is outside [-1, 1]", self.tau),
            ));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.batch < 2 {
            return Err(Error::config(
                "batch",
                "must be at least 2 for the contrastive term",
            ));
        }
        if self.cluster_period == 0 {
            return Err(Error::config("cluster_period", "must be at least 1"));
        }
        if self.cluster_samples == 0 {
            return Err(Error::config("cluster_samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            temperature: self.temperature,
            distance: Distance::SquaredErrorMean,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn diffuser_config(&self) -> DiffuserConfig {
        DiffuserConfig {
            tau: self.tau,
            beta: self.beta,
            cluster_period: self.cluster_period,
            cluster_samples: self.cluster_samples,
        }
    }
}
