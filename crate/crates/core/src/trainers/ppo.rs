use std::collections::HashMap;

use super::{check_finite, check_params, gradient_step, EpochLogger, LossAndGrad, TrainConfig, TrainOutcome};
use crate::env::{shaped_token_reward, PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::policy::{accumulate_logprob_grad, sample, ConditionalPolicy, ParametricPolicy, Token, Trajectory};
use crate::rng::{derive_seed2, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub trajectory: Trajectory,
    /// Log-probabilities under the policy that generated the trajectory.
    pub old_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Reward-to-go at every position: shaped token reward plus the entropy
/// bonus `-beta * log pi_old(y_t)`, so the per-trajectory total is
/// `r(x, y) - beta * log(pi_old(y) / pi_ref(y))`.
pub fn token_returns<R: ConditionalPolicy + ?Sized>(
    spec: &RewardSpec,
    pi_ref: &R,
    trajectory: &Trajectory,
    old_logprobs: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    if old_logprobs.len() != trajectory.len() {
        return Err(Error::input("logprob list does not match the response length"));
    }
    let rewards: Vec<f64> = (0..trajectory.len())
        .map(|t| shaped_token_reward(spec, pi_ref, trajectory, t, beta).map(|r| r - beta * old_logprobs[t]))
        .collect::<Result<_>>()?;
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        returns[t] = acc;
    }
    Ok(returns)
}

/// Running mean of returns keyed by (position, policy context window).
#[derive(Debug, Clone, Default)]
pub struct RunningBaseline {
    stats: HashMap<(usize, Vec<Token>), (f64, u64)>,
}

impl RunningBaseline {
    fn key(trajectory: &Trajectory, t: usize, window: usize) -> (usize, Vec<Token>) {
        let ctx = trajectory.context_at(t);
        let start = ctx.len().saturating_sub(window);
        (t, ctx[start..].to_vec())
    }

    /// Advantages for a batch, then folds the batch into the running means.
    /// Keys not seen in earlier epochs use the mean of this batch.
    pub fn advantages(&mut self, batch: &[(Trajectory, Vec<f64>)], window: usize) -> Vec<Vec<f64>> {
        let mut batch_stats: HashMap<(usize, Vec<Token>), (f64, u64)> = HashMap::new();
        for (traj, returns) in batch {
            for (t, &g) in returns.iter().enumerate() {
                let e = batch_stats.entry(Self::key(traj, t, window)).or_insert((0.0, 0));
                e.0 += g;
                e.1 += 1;
            }
        }
        let advantages = batch
            .iter()
            .map(|(traj, returns)| {
                returns
                    .iter()
                    .enumerate()
                    .map(|(t, &g)| {
                        let key = Self::key(traj, t, window);
                        let (sum, n) = self
                            .stats
                            .get(&key)
                            .copied()
                            .filter(|&(_, n)| n > 0)
                            .unwrap_or_else(|| batch_stats[&key]);
                        g - sum / n as f64
                    })
                    .collect()
            })
            .collect();
        // Fold in sorted key order so float accumulation is reproducible.
        let mut keys: Vec<_> = batch_stats.into_iter().collect();
        keys.sort_by(|a, b| a.0.cmp(&b.0));
        for (key, (sum, n)) in keys {
            let e = self.stats.entry(key).or_insert((0.0, 0));
            e.0 += sum;
            e.1 += n;
        }
        advantages
    }
}

/// Clipped surrogate `-(1/N) sum min(rho A, clip(rho, 1-eps, 1+eps) A)` and its gradient.
pub fn ppo_surrogate<P: ParametricPolicy + ?Sized>(policy: &P, batch: &[PpoSample], clip: f64) -> Result<LossAndGrad> {
    let count: usize = batch.iter().map(|s| s.trajectory.len()).sum();
    if count == 0 {
        return Err(Error::input("ppo surrogate needs at least one sampled token"));
    }
    let norm = 1.0 / count as f64;
    let mut objective = 0.0;
    let mut grad = vec![0.0; policy.num_params()];
    for s in batch {
        let traj = &s.trajectory;
        let mut ctx = traj.prompt.clone();
        for (t, &tok) in traj.response.iter().enumerate() {
            let adv = s.advantages[t];
            let ratio = (policy.log_probs(&ctx)[tok.index()] - s.old_logprobs[t]).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            objective += unclipped.min(clipped);
            // the gradient flows only through the unclipped branch
            if unclipped <= clipped && adv != 0.0 {
                accumulate_logprob_grad(policy, &ctx, tok, -adv * ratio * norm, &mut grad);
            }
            ctx.push(tok);
        }
    }
    Ok(LossAndGrad {
        loss: -objective * norm,
        raw_loss: -objective,
        grad,
    })
}

/// Token-level PPO with Monte-Carlo returns and a running-mean baseline.
pub fn ppo_train<P, R>(
    cfg: &TrainConfig,
    spec: &RewardSpec,
    prompts: &PromptSet,
    pi_ref: &R,
    pi_init: P,
) -> Result<TrainOutcome<P>>
where
    P: ParametricPolicy + Clone,
    R: ConditionalPolicy + ?Sized,
{
    cfg.validate()?;
    let logger = EpochLogger::new(cfg);
    let init = pi_init.clone();
    let mut policy = pi_init;
    let mut metrics = vec![logger.row(cfg, spec, prompts, 0, None, &policy, &init, pi_ref)?];
    let mut checkpoints = vec![policy.clone()];
    let mut baseline = RunningBaseline::default();
    let window = policy.window();

    let m = cfg.samples_per_epoch;
    for epoch in 1..=cfg.epochs {
        let rollouts = (0..m)
            .map(|i| {
                let prompt = &prompts.cycle((epoch - 1) * m + i).tokens;
                let seed = derive_seed2(cfg.seed, Stream::TrainSample, epoch as u64, i as u64);
                let traj = sample(&policy, prompt, cfg.horizon, seed)?;
                let old = traj.logprobs.clone().unwrap_or_default();
                let returns = token_returns(spec, pi_ref, &traj, &old, cfg.beta)?;
                Ok((traj, returns))
            })
            .collect::<Result<Vec<_>>>()?;
        let advantages = baseline.advantages(&rollouts, window);
        let batch: Vec<PpoSample> = rollouts
            .into_iter()
            .zip(advantages)
            .map(|((trajectory, _), advantages)| PpoSample {
                old_logprobs: trajectory.logprobs.clone().unwrap_or_default(),
                trajectory,
                advantages,
            })
            .collect();
        let mut first_loss = None;
        for _ in 0..cfg.ppo_update_steps {
            let loss = ppo_surrogate(&policy, &batch, cfg.ppo_clip)?;
            check_finite(epoch, &loss)?;
            gradient_step(&mut policy, &loss.grad, cfg.lr);
            check_params(epoch, &policy)?;
            first_loss.get_or_insert(loss);
        }
        metrics.push(logger.row(cfg, spec, prompts, epoch, first_loss.as_ref(), &policy, &init, pi_ref)?);
        checkpoints.push(policy.clone());
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoints,
    })
}
