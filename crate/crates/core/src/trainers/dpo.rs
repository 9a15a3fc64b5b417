use super::{check_finite, check_params, gradient_step, EpochLogger, LossAndGrad, TrainConfig, TrainOutcome};
use crate::env::{PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::estimator::implicit_reward;
use crate::numeric::{log_sigmoid, sigmoid};
use crate::policy::{accumulate_logprob_grad, sample, ConditionalPolicy, ParametricPolicy, Token};
use crate::rng::{derive_seed2, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<PreferencePair>,
    /// Pairs dropped because both draws tied twice.
    pub skipped: usize,
}

/// Two responses per prompt from `pi_ref`, labeled by the reward oracle.
/// A tie is resampled once, then skipped.
pub fn sample_preference_pairs<R: ConditionalPolicy + ?Sized>(
    pi_ref: &R,
    spec: &RewardSpec,
    prompts: &PromptSet,
    horizon: usize,
    n: usize,
    seed: u64,
    round: u64,
) -> Result<PairBatch> {
    let mut pairs = Vec::with_capacity(n);
    let mut skipped = 0;
    for i in 0..n {
        let prompt = &prompts.cycle(round as usize * n + i).tokens;
        let mut labeled = None;
        for attempt in 0..2u64 {
            let base = 4 * i as u64 + 2 * attempt;
            let a = sample(
                pi_ref,
                prompt,
                horizon,
                derive_seed2(seed, Stream::PreferencePair, round, base),
            )?;
            let b = sample(
                pi_ref,
                prompt,
                horizon,
                derive_seed2(seed, Stream::PreferencePair, round, base + 1),
            )?;
            let (ra, rb) = (spec.terminal_reward(&a)?, spec.terminal_reward(&b)?);
            if ra != rb {
                labeled = Some(if ra > rb { (a, b) } else { (b, a) });
                break;
            }
        }
        match labeled {
            Some((chosen, rejected)) => pairs.push(PreferencePair {
                prompt: prompt.clone(),
                chosen: chosen.response,
                rejected: rejected.response,
            }),
            None => skipped += 1,
        }
    }
    Ok(PairBatch { pairs, skipped })
}

fn margin<P, R>(pi: &P, pi_ref: &R, pair: &PreferencePair, beta: f64) -> Result<f64>
where
    P: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    Ok(implicit_reward(pi, pi_ref, &pair.prompt, &pair.chosen, beta)?
        - implicit_reward(pi, pi_ref, &pair.prompt, &pair.rejected, beta)?)
}

/// Mean of `-log sigmoid(r_hat(chosen) - r_hat(rejected))` over the pairs,
/// where `r_hat` is the implicit reward `beta * log(pi / pi_ref)`.
pub fn dpo_loss<P, R>(pi: &P, pi_ref: &R, pairs: &[PreferencePair], beta: f64) -> Result<LossAndGrad>
where
    P: ParametricPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::input("dpo loss needs at least one pair"));
    }
    let norm = 1.0 / pairs.len() as f64;
    let mut raw = 0.0;
    let mut grad = vec![0.0; pi.num_params()];
    for pair in pairs {
        let z = margin(pi, pi_ref, pair, beta)?;
        raw -= log_sigmoid(z);
        // d/dz [-log sigmoid(z)] = -(1 - sigmoid(z)) = -sigmoid(-z)
        let scale = -sigmoid(-z) * beta * norm;
        for (response, sign) in [(&pair.chosen, 1.0), (&pair.rejected, -1.0)] {
            let mut ctx = pair.prompt.clone();
            for &tok in response {
                accumulate_logprob_grad(pi, &ctx, tok, sign * scale, &mut grad);
                ctx.push(tok);
            }
        }
    }
    Ok(LossAndGrad {
        loss: raw * norm,
        raw_loss: raw,
        grad,
    })
}

/// Mean implicit-reward margin between chosen and rejected responses.
pub fn dpo_mean_margin<P, R>(pi: &P, pi_ref: &R, pairs: &[PreferencePair], beta: f64) -> Result<f64>
where
    P: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::input("no pairs"));
    }
    let total = pairs.iter().map(|p| margin(pi, pi_ref, p, beta)).sum::<Result<f64>>()?;
    Ok(total / pairs.len() as f64)
}

/// Offline DPO on fresh oracle-labeled pairs from `pi_ref` every epoch.
pub fn dpo_train<P, R>(
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

    for epoch in 1..=cfg.epochs {
        let batch = sample_preference_pairs(
            pi_ref,
            spec,
            prompts,
            cfg.horizon,
            cfg.dpo_pairs_per_epoch,
            cfg.seed,
            epoch as u64,
        )?;
        let loss = if batch.pairs.is_empty() {
            None
        } else {
            let loss = dpo_loss(&policy, pi_ref, &batch.pairs, cfg.beta)?;
            check_finite(epoch, &loss)?;
            gradient_step(&mut policy, &loss.grad, cfg.lr);
            check_params(epoch, &policy)?;
            Some(loss)
        };
        metrics.push(logger.row(cfg, spec, prompts, epoch, loss.as_ref(), &policy, &init, pi_ref)?);
        checkpoints.push(policy.clone());
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{tokens, TabularPolicy, Vocab};
    use crate::rng::rng_from_seed;

    #[test]
    fn identical_responses_give_ln2() {
        let vocab = Vocab::new(3, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let pi = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let pi_ref = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let y = tokens(&[1, 2, 0]);
        let pair = PreferencePair {
            prompt: tokens(&[1]),
            chosen: y.clone(),
            rejected: y,
        };
        let loss = dpo_loss(&pi, &pi_ref, &[pair], 0.1).unwrap();
        assert!((loss.loss - 2f64.ln()).abs() < 1e-15);
        assert!(loss.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn pairs_are_ordered_by_reward() {
        let vocab = Vocab::new(3, 0).unwrap();
        let spec = RewardSpec::Count { token: Token(1) };
        let pi_ref = TabularPolicy::random(vocab, 1, 0.5, &mut rng_from_seed(4));
        let prompts = PromptSet::unlabeled(&vocab, 5, vec![tokens(&[1]), tokens(&[2])]).unwrap();
        let batch = sample_preference_pairs(&pi_ref, &spec, &prompts, 5, 50, 9, 1).unwrap();
        assert_eq!(batch.pairs.len() + batch.skipped, 50);
        for p in &batch.pairs {
            assert!(spec.evaluate(&p.prompt, &p.chosen) > spec.evaluate(&p.prompt, &p.rejected));
        }
    }

    #[test]
    fn constant_reward_skips_every_pair() {
        let vocab = Vocab::new(3, 0).unwrap();
        let spec = RewardSpec::Constant { value: 1.0 };
        let pi_ref = TabularPolicy::uniform(vocab, 1);
        let prompts = PromptSet::unlabeled(&vocab, 5, vec![tokens(&[1])]).unwrap();
        let batch = sample_preference_pairs(&pi_ref, &spec, &prompts, 5, 10, 0, 1).unwrap();
        assert!(batch.pairs.is_empty());
        assert_eq!(batch.skipped, 10);
    }
}
