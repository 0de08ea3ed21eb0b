//! Adaptation settings from flags and `key = value` files.
//!
//! Precedence per key: command-line flag, then config file, then the
//! library default. `SFUDA_SEED` counts as the seed flag; an explicit
//! `--seed` wins over it.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use sfuda_core::mvcl::{AttentionMode, LossWeights};
use sfuda_core::pipeline::{Ablation, AdaptConfig, LambdaSchedule};
use sfuda_core::rsm::EntropyScale;

use crate::CliError;

/// Three comma-separated loss weights, unchecked until the config is validated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights(pub [f64; 3]);

impl FromStr for Weights {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated weights, got {s:?}"));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
        }
        Ok(Weights(out))
    }
}

impl Weights {
    fn loss_weights(self) -> LossWeights {
        let [con, ce, clu] = self.0;
        LossWeights { con, ce, clu }
    }
}

/// Entropy history length: a count, or `all`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window(pub Option<usize>);

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Window(None));
        }
        s.parse()
            .map(|n| Window(Some(n)))
            .map_err(|_| format!("expected a count or \"all\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum ScaleArg {
    Minmax,
    MaxEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum AttentionArg {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum AblationArg {
    Base,
    Pa,
    PaPla,
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Base => Ablation::BASE,
            AblationArg::Pa => Ablation::PA,
            AblationArg::PaPla => Ablation::PA_PLA,
            AblationArg::Full => Ablation::FULL,
        }
    }
}

/// Adaptation flags. Every field is optional so that unset flags fall
/// through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct AdaptArgs {
    /// Plain-text `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SFUDA_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Loss weights `con,ce,clu`. Alone it fixes the weights for every
    /// epoch; with `--lambda-end` it is the start of a linear schedule.
    #[arg(long)]
    pub lambda: Option<Weights>,
    #[arg(long)]
    pub lambda_end: Option<Weights>,
    /// Number of recent epoch thresholds combined by attention.
    #[arg(long)]
    pub rho: Option<usize>,
    /// Entropy rows considered for η: a count or `all`.
    #[arg(long)]
    pub rsm_window: Option<Window>,
    #[arg(long)]
    pub entropy_quantile: Option<f64>,
    #[arg(long, value_enum)]
    pub entropy_scale: Option<ScaleArg>,
    /// Divide the weighted threshold by the window length.
    #[arg(long)]
    pub strict_threshold: Option<bool>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
    #[arg(long)]
    pub kmeans_max_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, hide = true)]
    pub fixed_eta: Option<f64>,
}

#[cfg(test)]
/// Keys accepted in config files, in flag spelling with `_` for `-`.
const KEYS: [&str; 19] = [
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "tau",
    "lambda",
    "lambda_end",
    "rho",
    "rsm_window",
    "entropy_quantile",
    "entropy_scale",
    "strict_threshold",
    "attention",
    "kmeans_restarts",
    "kmeans_max_iters",
    "ablation",
    "fixed_eta",
    "config",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

fn parse_enum<T: ValueEnum>(key: &str, value: &str) -> Result<T, String> {
    T::from_str(value, true).map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl AdaptArgs {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "epochs" => self.epochs = Some(parse(key, value)?),
            "batch_size" => self.batch_size = Some(parse(key, value)?),
            "lr" => self.lr = Some(parse(key, value)?),
            "momentum" => self.momentum = Some(parse(key, value)?),
            "tau" => self.tau = Some(parse(key, value)?),
            "lambda" => self.lambda = Some(parse(key, value)?),
            "lambda_end" => self.lambda_end = Some(parse(key, value)?),
            "rho" => self.rho = Some(parse(key, value)?),
            "rsm_window" => self.rsm_window = Some(parse(key, value)?),
            "entropy_quantile" => self.entropy_quantile = Some(parse(key, value)?),
            "entropy_scale" => self.entropy_scale = Some(parse_enum(key, value)?),
            "strict_threshold" => self.strict_threshold = Some(parse(key, value)?),
            "attention" => self.attention = Some(parse_enum(key, value)?),
            "kmeans_restarts" => self.kmeans_restarts = Some(parse(key, value)?),
            "kmeans_max_iters" => self.kmeans_max_iters = Some(parse(key, value)?),
            "ablation" => self.ablation = Some(parse_enum(key, value)?),
            "fixed_eta" => self.fixed_eta = Some(parse(key, value)?),
            "config" => return Err("config files cannot include other config files".into()),
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Parses config-file text. Blank lines and `#` comments are skipped.
    pub fn from_config_text(text: &str) -> Result<Self, String> {
        let mut out = AdaptArgs::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let key = key.trim().replace('-', "_");
            out.set(&key, value.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(out)
    }

    /// Fills every unset field from `lower`.
    fn or(self, lower: AdaptArgs) -> AdaptArgs {
        AdaptArgs {
            config: self.config.or(lower.config),
            seed: self.seed.or(lower.seed),
            epochs: self.epochs.or(lower.epochs),
            batch_size: self.batch_size.or(lower.batch_size),
            lr: self.lr.or(lower.lr),
            momentum: self.momentum.or(lower.momentum),
            tau: self.tau.or(lower.tau),
            lambda: self.lambda.or(lower.lambda),
            lambda_end: self.lambda_end.or(lower.lambda_end),
            rho: self.rho.or(lower.rho),
            rsm_window: self.rsm_window.or(lower.rsm_window),
            entropy_quantile: self.entropy_quantile.or(lower.entropy_quantile),
            entropy_scale: self.entropy_scale.or(lower.entropy_scale),
            strict_threshold: self.strict_threshold.or(lower.strict_threshold),
            attention: self.attention.or(lower.attention),
            kmeans_restarts: self.kmeans_restarts.or(lower.kmeans_restarts),
            kmeans_max_iters: self.kmeans_max_iters.or(lower.kmeans_max_iters),
            ablation: self.ablation.or(lower.ablation),
            fixed_eta: self.fixed_eta.or(lower.fixed_eta),
        }
    }

    /// Resolves flags over the config file over defaults and validates the result.
    pub fn resolve(&self) -> Result<AdaptConfig, CliError> {
        let merged = match &self.config {
            Some(path) => self.clone().or(load_config(path)?),
            None => self.clone(),
        };
        let cfg = merged.apply(AdaptConfig::default());
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    fn apply(self, mut cfg: AdaptConfig) -> AdaptConfig {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        take!(
            seed,
            epochs,
            batch_size,
            lr,
            momentum,
            tau,
            rho,
            entropy_quantile,
            kmeans_restarts,
            kmeans_max_iters
        );
        if let Some(Window(w)) = self.rsm_window {
            cfg.rsm_window = w;
        }
        if let Some(s) = self.entropy_scale {
            cfg.entropy_scale = match s {
                ScaleArg::Minmax => EntropyScale::ClassMinMax,
                ScaleArg::MaxEntropy => EntropyScale::MaxEntropy,
            };
        }
        if let Some(s) = self.strict_threshold {
            cfg.strict_threshold = s;
        }
        if let Some(a) = self.attention {
            cfg.attention_mode = match a {
                AttentionArg::Additive => AttentionMode::Additive,
                AttentionArg::Multiplicative => AttentionMode::Multiplicative,
            };
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a.into();
        }
        if self.fixed_eta.is_some() {
            cfg.fixed_eta = self.fixed_eta;
        }
        cfg.lambda = match (self.lambda, self.lambda_end) {
            (Some(start), Some(end)) => LambdaSchedule::Linear {
                start: start.loss_weights(),
                end: end.loss_weights(),
            },
            (Some(w), None) => LambdaSchedule::Constant(w.loss_weights()),
            (None, Some(end)) => match cfg.lambda {
                LambdaSchedule::Linear { start, .. } | LambdaSchedule::Constant(start) => {
                    LambdaSchedule::Linear {
                        start,
                        end: end.loss_weights(),
                    }
                }
            },
            (None, None) => cfg.lambda,
        };
        cfg
    }
}

fn load_config(path: &Path) -> Result<AdaptArgs, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    AdaptArgs::from_config_text(&text)
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}
