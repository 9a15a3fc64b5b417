//! Run configuration: flat `key = value` lines with dotted keys.
//!
//! ```text
//! method = inverse-q
//! lr = 2.0
//! contrast.alpha = 1.4
//! env.pattern = 3 5
//! prompts = 1; 2; harm:4 6
//! ```
//!
//! `#` starts a comment. Unknown keys, duplicate keys, type mismatches and
//! constraint violations are errors naming the offending key.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::BenchParams;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_K, DEFAULT_SIGMA};
use crate::numeric::format_float;
use crate::trainers::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Pattern,
    Count,
    Likelihood,
    Constant,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Pattern => "pattern",
            EnvKind::Count => "count",
            EnvKind::Likelihood => "likelihood",
            EnvKind::Constant => "constant",
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern" => Ok(EnvKind::Pattern),
            "count" => Ok(EnvKind::Count),
            "likelihood" => Ok(EnvKind::Likelihood),
            "constant" => Ok(EnvKind::Constant),
            other => Err(Error::input(format!("unknown env kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Tabular,
    Neural,
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(PolicyKind::Tabular),
            "neural" => Ok(PolicyKind::Neural),
            other => Err(Error::input(format!("unknown policy kind `{other}`"))),
        }
    }
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Tabular => "tabular",
            PolicyKind::Neural => "neural",
        }
    }
}

/// Where the trained policy starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyInit {
    /// A copy of the weak policy.
    Weak,
    /// Fresh random parameters of `policy.kind`.
    Random,
}

impl FromStr for PolicyInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(PolicyInit::Weak),
            "random" => Ok(PolicyInit::Random),
            other => Err(Error::input(format!("unknown policy init `{other}`"))),
        }
    }
}

impl PolicyInit {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyInit::Weak => "weak",
            PolicyInit::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub label: Option<String>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env_kind: EnvKind,
    pub vocab_size: usize,
    pub eos: u32,
    pub pattern: Vec<u32>,
    pub count_token: u32,
    pub target_ckpt: Option<PathBuf>,
    pub constant: f64,
    pub prompts: Vec<PromptSpec>,
    pub pi_w_ckpt: Option<PathBuf>,
    pub pi_l_ckpt: Option<PathBuf>,
    pub bench_seed: u64,
    pub bench_noise: f64,
    pub bench_eos_logit: f64,
    pub bench_lead_boost: f64,
    pub bench_follow_boost: f64,
    pub policy_init: PolicyInit,
    pub policy_kind: PolicyKind,
    pub policy_window: usize,
    pub policy_hidden: usize,
    pub policy_init_scale: f64,
    pub sigma: f64,
    pub elo_k: f64,
    pub elo_passes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchParams::default();
        RunConfig {
            train: TrainConfig {
                horizon: bench.horizon,
                ..TrainConfig::default()
            },
            env_kind: EnvKind::Pattern,
            vocab_size: bench.vocab_size,
            eos: bench.eos,
            pattern: bench.pattern.clone(),
            count_token: 1,
            target_ckpt: None,
            constant: 0.0,
            prompts: bench
                .prompts
                .iter()
                .map(|t| PromptSpec {
                    label: None,
                    tokens: t.clone(),
                })
                .collect(),
            pi_w_ckpt: None,
            pi_l_ckpt: None,
            bench_seed: 0,
            bench_noise: bench.noise,
            bench_eos_logit: bench.eos_logit,
            bench_lead_boost: bench.lead_boost,
            bench_follow_boost: bench.follow_boost,
            policy_init: PolicyInit::Weak,
            policy_kind: PolicyKind::Tabular,
            policy_window: 1,
            policy_hidden: 16,
            policy_init_scale: 0.1,
            sigma: DEFAULT_SIGMA,
            elo_k: DEFAULT_K,
            elo_passes: 3,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("expected {what}, got `{raw}`")))
}

fn parse_tokens(key: &str, raw: &str) -> Result<Vec<u32>> {
    raw.split_whitespace()
        .map(|t| parse_value(key, t, "a token id"))
        .collect()
}

fn parse_prompts(key: &str, raw: &str) -> Result<Vec<PromptSpec>> {
    raw.split(';')
        .map(|item| {
            let item = item.trim();
            let (label, toks) = match item.split_once(':') {
                Some((l, t)) => (Some(l.trim().to_string()), t),
                None => (None, item),
            };
            if label.as_deref() == Some("") {
                return Err(Error::config(key, "empty prompt label"));
            }
            Ok(PromptSpec {
                label,
                tokens: parse_tokens(key, toks)?,
            })
        })
        .collect()
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    if raw.is_empty() {
        None
    } else {
        Some(PathBuf::from(raw))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::input(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "duplicate key"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "method" => t.method = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "seed" => t.seed = parse_value(key, v, "an unsigned integer")?,
            "epochs" => t.epochs = parse_value(key, v, "an unsigned integer")?,
            "samples_per_epoch" => t.samples_per_epoch = parse_value(key, v, "an unsigned integer")?,
            "lr" => t.lr = parse_value(key, v, "a number")?,
            "beta" => t.beta = parse_value(key, v, "a number")?,
            "horizon" => t.horizon = parse_value(key, v, "an unsigned integer")?,
            "contrast.alpha" => t.alpha = parse_value(key, v, "a number")?,
            "contrast.pi_w_ckpt" => self.pi_w_ckpt = opt_path(v),
            "contrast.pi_l_ckpt" => self.pi_l_ckpt = opt_path(v),
            "env.kind" => self.env_kind = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "env.vocab" => self.vocab_size = parse_value(key, v, "an unsigned integer")?,
            "env.eos" => self.eos = parse_value(key, v, "a token id")?,
            "env.pattern" => self.pattern = parse_tokens(key, v)?,
            "env.count_token" => self.count_token = parse_value(key, v, "a token id")?,
            "env.target_ckpt" => self.target_ckpt = opt_path(v),
            "env.constant" => self.constant = parse_value(key, v, "a number")?,
            "prompts" => self.prompts = parse_prompts(key, v)?,
            "bench.seed" => self.bench_seed = parse_value(key, v, "an unsigned integer")?,
            "bench.noise" => self.bench_noise = parse_value(key, v, "a number")?,
            "bench.eos_logit" => self.bench_eos_logit = parse_value(key, v, "a number")?,
            "bench.lead_boost" => self.bench_lead_boost = parse_value(key, v, "a number")?,
            "bench.follow_boost" => self.bench_follow_boost = parse_value(key, v, "a number")?,
            "policy.init" => self.policy_init = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "policy.kind" => self.policy_kind = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "policy.window" => self.policy_window = parse_value(key, v, "an unsigned integer")?,
            "policy.hidden" => self.policy_hidden = parse_value(key, v, "an unsigned integer")?,
            "policy.init_scale" => self.policy_init_scale = parse_value(key, v, "a number")?,
            "eval.samples" => t.eval_samples = parse_value(key, v, "an unsigned integer")?,
            "eval.winrate_samples" => t.winrate_samples = parse_value(key, v, "an unsigned integer")?,
            "eval.sigma" => self.sigma = parse_value(key, v, "a number")?,
            "eval.elo_k" => self.elo_k = parse_value(key, v, "a number")?,
            "eval.elo_passes" => self.elo_passes = parse_value(key, v, "an unsigned integer")?,
            "ppo.clip" => t.ppo_clip = parse_value(key, v, "a number")?,
            "ppo.update_steps" => t.ppo_update_steps = parse_value(key, v, "an unsigned integer")?,
            "dpo.pairs_per_epoch" => t.dpo_pairs_per_epoch = parse_value(key, v, "an unsigned integer")?,
            "log.wall_time" => t.record_wall_time = parse_value(key, v, "true or false")?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let check = |ok: bool, key: &str, detail: &str| if ok { Ok(()) } else { Err(Error::config(key, detail)) };
        check(self.vocab_size >= 2, "env.vocab", "must be >= 2")?;
        check(
            (self.eos as usize) < self.vocab_size,
            "env.eos",
            "must be a token id below env.vocab",
        )?;
        let valid = |t: u32| (t as usize) < self.vocab_size;
        check(!self.pattern.is_empty(), "env.pattern", "must not be empty")?;
        check(
            self.pattern.iter().all(|&t| valid(t) && t != self.eos),
            "env.pattern",
            "tokens must be valid and not eos",
        )?;
        check(valid(self.count_token), "env.count_token", "must be a valid token id")?;
        check(self.constant.is_finite(), "env.constant", "must be finite")?;
        check(
            self.env_kind != EnvKind::Likelihood || self.target_ckpt.is_some(),
            "env.target_ckpt",
            "required when env.kind = likelihood",
        )?;
        check(!self.prompts.is_empty(), "prompts", "must list at least one prompt")?;
        for p in &self.prompts {
            check(p.tokens.iter().all(|&t| valid(t)), "prompts", "token id out of range")?;
            check(
                p.tokens.len() < self.train.horizon,
                "prompts",
                "every prompt must be shorter than horizon",
            )?;
        }
        check(
            self.bench_noise >= 0.0 && self.bench_noise.is_finite(),
            "bench.noise",
            "must be >= 0",
        )?;
        check(self.policy_hidden >= 1, "policy.hidden", "must be >= 1")?;
        check(self.policy_window <= 6, "policy.window", "must be <= 6")?;
        check(self.policy_init_scale >= 0.0, "policy.init_scale", "must be >= 0")?;
        check(
            self.sigma >= 0.0 && self.sigma.is_finite(),
            "eval.sigma",
            "must be >= 0",
        )?;
        check(self.elo_k > 0.0 && self.elo_k.is_finite(), "eval.elo_k", "must be > 0")?;
        check(self.elo_passes >= 1, "eval.elo_passes", "must be >= 1")?;
        Ok(())
    }

    /// Every key with its effective value; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let prompts = self
            .prompts
            .iter()
            .map(|p| match &p.label {
                Some(l) => format!("{l}:{}", join_tokens(&p.tokens)),
                None => join_tokens(&p.tokens),
            })
            .collect::<Vec<_>>()
            .join("; ");
        let f = format_float;
        let lines = [
            ("method", t.method.to_string()),
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("samples_per_epoch", t.samples_per_epoch.to_string()),
            ("lr", f(t.lr)),
            ("beta", f(t.beta)),
            ("horizon", t.horizon.to_string()),
            ("contrast.alpha", f(t.alpha)),
            ("contrast.pi_w_ckpt", path(&self.pi_w_ckpt)),
            ("contrast.pi_l_ckpt", path(&self.pi_l_ckpt)),
            ("env.kind", self.env_kind.as_str().to_string()),
            ("env.vocab", self.vocab_size.to_string()),
            ("env.eos", self.eos.to_string()),
            ("env.pattern", join_tokens(&self.pattern)),
            ("env.count_token", self.count_token.to_string()),
            ("env.target_ckpt", path(&self.target_ckpt)),
            ("env.constant", f(self.constant)),
            ("prompts", prompts),
            ("bench.seed", self.bench_seed.to_string()),
            ("bench.noise", f(self.bench_noise)),
            ("bench.eos_logit", f(self.bench_eos_logit)),
            ("bench.lead_boost", f(self.bench_lead_boost)),
            ("bench.follow_boost", f(self.bench_follow_boost)),
            ("policy.init", self.policy_init.as_str().to_string()),
            ("policy.kind", self.policy_kind.as_str().to_string()),
            ("policy.window", self.policy_window.to_string()),
            ("policy.hidden", self.policy_hidden.to_string()),
            ("policy.init_scale", f(self.policy_init_scale)),
            ("eval.samples", t.eval_samples.to_string()),
            ("eval.winrate_samples", t.winrate_samples.to_string()),
            ("eval.sigma", f(self.sigma)),
            ("eval.elo_k", f(self.elo_k)),
            ("eval.elo_passes", self.elo_passes.to_string()),
            ("ppo.clip", f(t.ppo_clip)),
            ("ppo.update_steps", t.ppo_update_steps.to_string()),
            ("dpo.pairs_per_epoch", t.dpo_pairs_per_epoch.to_string()),
            ("log.wall_time", t.record_wall_time.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn bench_params(&self) -> BenchParams {
        BenchParams {
            vocab_size: self.vocab_size,
            eos: self.eos,
            pattern: self.pattern.clone(),
            horizon: self.train.horizon,
            prompts: self.prompts.iter().map(|p| p.tokens.clone()).collect(),
            noise: self.bench_noise,
            eos_logit: self.bench_eos_logit,
            lead_boost: self.bench_lead_boost,
            follow_boost: self.bench_follow_boost,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.train.method = method;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse("env.kind = pattern\nmethod = ppo\n").unwrap();
        assert_eq!(cfg.train.method, Method::Ppo);
        assert_eq!(cfg.train.epochs, 15);
        assert_eq!(cfg.train.samples_per_epoch, 500);
        assert_eq!(cfg.train.alpha, 1.4);
        assert_eq!(cfg.sigma, 10.0);
    }

    #[test]
    fn constraint_errors_name_the_key() {
        assert_eq!(key_of(RunConfig::parse("lr = 0").unwrap_err()), "lr");
        assert_eq!(key_of(RunConfig::parse("beta = -1").unwrap_err()), "beta");
        assert_eq!(
            key_of(RunConfig::parse("samples_per_epoch = 0").unwrap_err()),
            "samples_per_epoch"
        );
        assert_eq!(key_of(RunConfig::parse("env.colour = red").unwrap_err()), "env.colour");
        assert_eq!(key_of(RunConfig::parse("epochs = many").unwrap_err()), "epochs");
        assert_eq!(key_of(RunConfig::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
        assert_eq!(
            key_of(RunConfig::parse("env.pattern = 0 3").unwrap_err()),
            "env.pattern"
        );
        assert_eq!(
            key_of(RunConfig::parse("env.kind = likelihood").unwrap_err()),
            "env.target_ckpt"
        );
    }

    #[test]
    fn epochs_zero_is_allowed() {
        assert_eq!(RunConfig::parse("epochs = 0").unwrap().train.epochs, 0);
    }

    #[test]
    fn text_round_trip() {
        let src = "method = dpo\nlr = 0.3\nprompts = a:1 2; 4\ncontrast.pi_w_ckpt = w.ckpt # comment\n";
        let cfg = RunConfig::parse(src).unwrap();
        assert_eq!(cfg.prompts[0].label.as_deref(), Some("a"));
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }
}
