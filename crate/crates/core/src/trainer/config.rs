//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::{ContrastiveConfig, Variant};
use crate::synthdata::Suite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    Missing(String),
    #[error("unknown config key `{0}`")]
    Unknown(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    Invalid { key: String, value: String, reason: String },
}

/// Which domains act as sources. `All` means every domain except the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceSet {
    All,
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub suite: Suite,
    pub variant: Variant,
    pub tau: f64,
    pub rho: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub mem_capacity: usize,
    pub proj_dim: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// When false the confidence gate never opens, so the target
    /// cross-entropy vanishes while pseudo-labels still feed the banks.
    pub target_loss: bool,
    pub samples_per_domain: usize,
    pub target: usize,
    pub sources: SourceSet,
    pub log_interval: usize,
    pub cluster_pool: usize,
    /// Record wall-clock time in metrics; off keeps metrics files reproducible.
    pub timing: bool,
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "suite",
        "variant",
        "tau",
        "rho",
        "alpha",
        "lambda",
        "lr",
        "sgd_momentum",
        "batch_size",
        "epochs",
        "warmup_epochs",
        "mem_capacity",
        "proj_dim",
        "kmeans_iters",
        "seed",
        "target_loss",
        "samples_per_domain",
        "target",
        "sources",
        "log_interval",
        "cluster_pool",
        "timing",
    ];

    pub fn defaults(suite: Suite) -> Self {
        TrainConfig {
            suite,
            variant: Variant::Tcl,
            tau: 0.05,
            rho: 0.95,
            alpha: 0.99,
            lambda: 0.05,
            lr: 0.01,
            sgd_momentum: 0.9,
            batch_size: 32,
            epochs: 60,
            warmup_epochs: 5,
            mem_capacity: 512,
            proj_dim: 32,
            kmeans_iters: 10,
            seed: 0,
            target_loss: true,
            samples_per_domain: match suite {
                Suite::Blobs3 => 320,
                Suite::Digits5 => 1000,
            },
            target: suite.default_target(),
            sources: SourceSet::All,
            log_interval: 10,
            cluster_pool: 2048,
            timing: false,
        }
    }

    /// Parses a complete config: every key in [`Self::KEYS`] must appear once.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax(n + 1));
            }
            if !Self::KEYS.contains(&k) {
                return Err(ConfigError::Unknown(k.to_string()));
            }
            if pairs.iter().any(|(pk, _)| pk == k) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        for key in Self::KEYS {
            if !pairs.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::Missing(key.to_string()));
            }
        }
        // Suite first: it decides nothing else here, but keeps errors stable.
        let suite_value = &pairs.iter().find(|(k, _)| k == "suite").unwrap().1;
        let suite = Suite::parse(suite_value).ok_or_else(|| invalid("suite", suite_value, "unknown suite"))?;
        let mut cfg = Self::defaults(suite);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| invalid(key, value, &e.to_string()))
        }
        match key {
            "suite" => {
                self.suite = Suite::parse(value).ok_or_else(|| invalid(key, value, "unknown suite"))?
            }
            "variant" => {
                self.variant = Variant::parse(value).ok_or_else(|| invalid(key, value, "unknown variant"))?
            }
            "tau" => self.tau = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "sgd_momentum" => self.sgd_momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "mem_capacity" => self.mem_capacity = num(key, value)?,
            "proj_dim" => self.proj_dim = num(key, value)?,
            "kmeans_iters" => self.kmeans_iters = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "target_loss" => self.target_loss = num(key, value)?,
            "samples_per_domain" => self.samples_per_domain = num(key, value)?,
            "target" => self.target = num(key, value)?,
            "sources" => {
                self.sources = if value.eq_ignore_ascii_case("all") {
                    SourceSet::All
                } else {
                    SourceSet::List(
                        value.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?,
                    )
                }
            }
            "log_interval" => self.log_interval = num(key, value)?,
            "cluster_pool" => self.cluster_pool = num(key, value)?,
            "timing" => self.timing = num(key, value)?,
            _ => return Err(ConfigError::Unknown(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, value: String, reason: &str| Err(invalid(key, &value, reason));
        if let Err(e) = self.contrastive().validate() {
            let key = match e {
                crate::losses::LossError::InvalidTau(_) => "tau",
                crate::losses::LossError::InvalidRho(_) => "rho",
                _ => "lambda",
            };
            return fail(key, self.get(key), &e.to_string());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail("alpha", self.get("alpha"), "must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", self.get("lr"), "must be positive");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("sgd_momentum", self.get("sgd_momentum"), "must lie in [0, 1)");
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("proj_dim", self.proj_dim),
            ("log_interval", self.log_interval),
            ("cluster_pool", self.cluster_pool),
        ] {
            if v == 0 {
                return fail(key, v.to_string(), "must be positive");
            }
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs", self.get("warmup_epochs"), "must be smaller than epochs");
        }
        if self.samples_per_domain < self.batch_size {
            return fail("samples_per_domain", self.get("samples_per_domain"), "fewer samples than one batch");
        }
        let domains = self.suite.domain_count();
        if self.target >= domains {
            return fail("target", self.get("target"), &format!("suite has {domains} domains"));
        }
        let sources = self.source_domains();
        if sources.is_empty() {
            return fail("sources", self.get("sources"), "no source domain");
        }
        let combined = if self.variant == Variant::TclSourceCombine { sources.len() } else { 1 };
        if self.mem_capacity < self.batch_size * combined {
            return fail("mem_capacity", self.get("mem_capacity"), "smaller than one enqueued batch");
        }
        for (i, &s) in sources.iter().enumerate() {
            if s >= domains || s == self.target || sources[..i].contains(&s) {
                return fail("sources", self.get("sources"), "sources must be distinct non-target domains");
            }
        }
        Ok(())
    }

    pub fn source_domains(&self) -> Vec<usize> {
        match &self.sources {
            SourceSet::All => (0..self.suite.domain_count()).filter(|&d| d != self.target).collect(),
            SourceSet::List(v) => v.clone(),
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig { tau: self.tau, rho: self.rho, lambda: self.lambda, variant: self.variant }
    }

    /// λ ramped linearly from 0 at epoch 0 to its full value at `warmup_epochs`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch >= self.warmup_epochs {
            self.lambda
        } else {
            self.lambda * epoch as f64 / self.warmup_epochs as f64
        }
    }

    /// Text form of one field, as accepted by [`Self::set`].
    pub fn get(&self, key: &str) -> String {
        match key {
            "suite" => self.suite.name().to_string(),
            "variant" => self.variant.name().to_string(),
            "tau" => self.tau.to_string(),
            "rho" => self.rho.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "mem_capacity" => self.mem_capacity.to_string(),
            "proj_dim" => self.proj_dim.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "seed" => self.seed.to_string(),
            "target_loss" => self.target_loss.to_string(),
            "samples_per_domain" => self.samples_per_domain.to_string(),
            "target" => self.target.to_string(),
            "sources" => match &self.sources {
                SourceSet::All => "all".to_string(),
                SourceSet::List(v) => v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            },
            "log_interval" => self.log_interval.to_string(),
            "cluster_pool" => self.cluster_pool.to_string(),
            "timing" => self.timing.to_string(),
            _ => String::new(),
        }
    }

    /// Complete config text; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), value: value.to_string(), reason: reason.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::defaults(Suite::Digits5);
        cfg.sources = SourceSet::List(vec![0, 3]);
        cfg.lambda = 0.1 + 0.2;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = TrainConfig::defaults(Suite::Blobs3)
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("rho"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(TrainConfig::parse(&text), Err(ConfigError::Missing("rho".into())));
    }

    #[test]
    fn comments_unknown_keys_and_bad_values() {
        let base = TrainConfig::defaults(Suite::Blobs3).to_text();
        let commented = format!("# header\n{}", base.replace("tau = 0.05", "tau = 0.05  # temperature"));
        assert!(TrainConfig::parse(&commented).is_ok());
        let unknown = format!("{base}colour = blue\n");
        assert_eq!(TrainConfig::parse(&unknown), Err(ConfigError::Unknown("colour".into())));
        let bad = base.replace("rho = 0.95", "rho = 1.5");
        assert!(matches!(TrainConfig::parse(&bad), Err(ConfigError::Invalid { key, .. }) if key == "rho"));
        let warm = base.replace("warmup_epochs = 5", "warmup_epochs = 60");
        assert!(matches!(TrainConfig::parse(&warm), Err(ConfigError::Invalid { key, .. }) if key == "warmup_epochs"));
    }

    #[test]
    fn lambda_ramp() {
        let mut cfg = TrainConfig::defaults(Suite::Blobs3);
        cfg.lambda = 0.3;
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert!((cfg.lambda_at(2) - 0.12).abs() < 1e-15);
        assert_eq!(cfg.lambda_at(5), 0.3);
        assert_eq!(cfg.lambda_at(59), 0.3);
    }

    #[test]
    fn default_sources_exclude_target() {
        let cfg = TrainConfig::defaults(Suite::Digits5);
        assert_eq!(cfg.source_domains(), vec![0, 1, 3, 4]);
    }
}
