//! Optimizers: Inverse-Q* (reward imitation toward a fixed next-token
//! estimate), a token-level PPO baseline and a DPO baseline.
//!
//! All three share the per-epoch evaluation in [`evaluate_epoch`], so the
//! epoch-0 row is identical across methods for the same initial policy and seed.

mod dpo;
mod inverse_q;
mod ppo;

pub use dpo::{dpo_loss, dpo_mean_margin, dpo_train, sample_preference_pairs, PairBatch, PreferencePair};
pub use inverse_q::{annotate, inverse_q_loss, inverse_q_train, inverse_q_train_contrastive, TargetedTrajectory};
pub use ppo::{ppo_surrogate, ppo_train, token_returns, PpoSample, RunningBaseline};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde_json::Value;

use crate::env::{PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::eval::winrate;
use crate::numeric::format_float;
use crate::policy::{sample, ConditionalPolicy, ParametricPolicy};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    InverseQ,
    Ppo,
    Dpo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::InverseQ => "inverse-q",
            Method::Ppo => "ppo",
            Method::Dpo => "dpo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-q" | "inverse_q" => Ok(Method::InverseQ),
            "ppo" => Ok(Method::Ppo),
            "dpo" => Ok(Method::Dpo),
            other => Err(Error::input(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Contrast weight of the next-token estimate.
    pub alpha: f64,
    /// KL weight.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Rollouts per epoch for the oracle reward and KL estimates.
    pub eval_samples: usize,
    /// Matches per epoch for the win rate against the initial policy.
    pub winrate_samples: usize,
    pub ppo_clip: f64,
    pub ppo_update_steps: usize,
    pub dpo_pairs_per_epoch: usize,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::InverseQ,
            alpha: 1.4,
            beta: 0.1,
            lr: 1e-2,
            epochs: 15,
            samples_per_epoch: 500,
            horizon: 10,
            seed: 0,
            eval_samples: 1000,
            winrate_samples: 1000,
            ppo_clip: 0.2,
            ppo_update_steps: 1,
            dpo_pairs_per_epoch: 250,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, detail: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, detail))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        check(self.beta > 0.0 && self.beta.is_finite(), "beta", "must be > 0")?;
        check(self.alpha.is_finite(), "contrast.alpha", "must be finite")?;
        check(self.samples_per_epoch >= 1, "samples_per_epoch", "must be >= 1")?;
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(self.eval_samples >= 1, "eval.samples", "must be >= 1")?;
        check(self.winrate_samples >= 1, "eval.winrate_samples", "must be >= 1")?;
        check(self.ppo_clip > 0.0, "ppo.clip", "must be > 0")?;
        check(self.ppo_update_steps >= 1, "ppo.update_steps", "must be >= 1")?;
        check(self.dpo_pairs_per_epoch >= 1, "dpo.pairs_per_epoch", "must be >= 1")?;
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Normalized loss of the epoch's update batch; absent for epoch 0.
    pub mean_loss: Option<f64>,
    /// Unnormalized loss sum, for methods where it differs.
    pub raw_loss: Option<f64>,
    pub mean_oracle_reward: f64,
    pub kl_to_ref: f64,
    pub winrate_vs_init: f64,
    pub wall_seconds: f64,
}

fn json_number(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format_float(v),
        _ => "null".to_string(),
    }
}

impl MetricsRow {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"mean_loss\":{},\"raw_loss\":{},\"mean_oracle_reward\":{},\"kl_to_ref\":{},\"winrate_vs_init\":{},\"wall_seconds\":{}}}",
            self.epoch,
            json_number(self.mean_loss),
            json_number(self.raw_loss),
            json_number(Some(self.mean_oracle_reward)),
            json_number(Some(self.kl_to_ref)),
            json_number(Some(self.winrate_vs_init)),
            json_number(Some(self.wall_seconds)),
        )
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::input(format!("bad metrics line: {e}")))?;
        let num = |key: &str| -> Result<Option<f64>> {
            match v.get(key) {
                Some(Value::Null) => Ok(None),
                Some(x) => x
                    .as_f64()
                    .map(Some)
                    .ok_or_else(|| Error::input(format!("metrics field `{key}` is not a number"))),
                None => Err(Error::input(format!("metrics line lacks `{key}`"))),
            }
        };
        let req = |key: &str| -> Result<f64> { num(key)?.ok_or_else(|| Error::input(format!("`{key}` is null"))) };
        Ok(MetricsRow {
            epoch: req("epoch")? as usize,
            mean_loss: num("mean_loss")?,
            raw_loss: num("raw_loss")?,
            mean_oracle_reward: req("mean_oracle_reward")?,
            kl_to_ref: req("kl_to_ref")?,
            winrate_vs_init: req("winrate_vs_init")?,
            wall_seconds: req("wall_seconds")?,
        })
    }
}

/// Final policy, one metrics row per epoch (starting at 0) and a parameter
/// snapshot per epoch (index = epoch).
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub policy: P,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<P>,
}

/// Normalized loss, its unnormalized sum and the gradient of the normalized loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub raw_loss: f64,
    pub grad: Vec<f64>,
}

/// Oracle reward and KL are estimated on a fixed set of rollout seeds, so
/// successive epochs are compared on common random numbers.
pub fn evaluate_epoch<P, I, R>(
    cfg: &TrainConfig,
    spec: &RewardSpec,
    prompts: &PromptSet,
    policy: &P,
    init: &I,
    reference: &R,
) -> Result<(f64, f64, f64)>
where
    P: ConditionalPolicy + ?Sized,
    I: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    let n = cfg.eval_samples;
    let mut reward_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..n {
        let prompt = &prompts.cycle(i).tokens;
        let traj = sample(
            policy,
            prompt,
            cfg.horizon,
            derive_seed(cfg.seed, Stream::EvalReward, i as u64),
        )?;
        reward_sum += spec.terminal_reward(&traj)?;
        let lp: f64 = traj.logprobs.as_ref().map(|l| l.iter().sum()).unwrap_or(0.0);
        kl_sum += lp - reference.sequence_logprob(prompt, &traj.response)?;
    }
    let wr = winrate(
        policy,
        init,
        prompts,
        spec,
        cfg.horizon,
        cfg.winrate_samples,
        derive_seed(cfg.seed, Stream::HeldOut, 0),
    )?;
    Ok((reward_sum / n as f64, kl_sum / n as f64, wr.win))
}

pub(crate) struct EpochLogger {
    start: Instant,
    record_wall_time: bool,
}

impl EpochLogger {
    pub(crate) fn new(cfg: &TrainConfig) -> Self {
        EpochLogger {
            start: Instant::now(),
            record_wall_time: cfg.record_wall_time,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn row<P, I, R>(
        &self,
        cfg: &TrainConfig,
        spec: &RewardSpec,
        prompts: &PromptSet,
        epoch: usize,
        loss: Option<&LossAndGrad>,
        policy: &P,
        init: &I,
        reference: &R,
    ) -> Result<MetricsRow>
    where
        P: ConditionalPolicy + ?Sized,
        I: ConditionalPolicy + ?Sized,
        R: ConditionalPolicy + ?Sized,
    {
        let (mean_oracle_reward, kl_to_ref, winrate_vs_init) =
            evaluate_epoch(cfg, spec, prompts, policy, init, reference)?;
        Ok(MetricsRow {
            epoch,
            mean_loss: loss.map(|l| l.loss),
            raw_loss: loss.map(|l| l.raw_loss),
            mean_oracle_reward,
            kl_to_ref,
            winrate_vs_init,
            wall_seconds: if self.record_wall_time {
                self.start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }
}

pub(crate) fn check_finite(epoch: usize, loss: &LossAndGrad) -> Result<()> {
    if !loss.loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("loss is {}", loss.loss),
        });
    }
    if loss.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            detail: "gradient has non-finite entries".into(),
        });
    }
    Ok(())
}

pub(crate) fn check_params<P: ParametricPolicy + ?Sized>(epoch: usize, policy: &P) -> Result<()> {
    if policy.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            detail: "parameters became non-finite after the update".into(),
        });
    }
    Ok(())
}

/// `theta <- theta - lr * grad`.
pub fn gradient_step<P: ParametricPolicy + ?Sized>(policy: &mut P, grad: &[f64], lr: f64) {
    for (p, g) in policy.params_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_line_round_trips() {
        let row = MetricsRow {
            epoch: 3,
            mean_loss: Some(0.125),
            raw_loss: None,
            mean_oracle_reward: 1.0 / 3.0,
            kl_to_ref: -1e-5,
            winrate_vs_init: 0.5,
            wall_seconds: 0.0,
        };
        let line = row.to_json_line();
        assert!(line.contains("\"raw_loss\":null"));
        assert_eq!(MetricsRow::from_json_line(&line).unwrap(), row);
    }

    #[test]
    fn validation_names_the_key() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lr"),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig {
            samples_per_epoch: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_names() {
        for m in [Method::InverseQ, Method::Ppo, Method::Dpo] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("sft".parse::<Method>().is_err());
    }
}
