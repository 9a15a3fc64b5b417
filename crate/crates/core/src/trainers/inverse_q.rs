use super::{check_finite, check_params, gradient_step, EpochLogger, LossAndGrad, TrainConfig, TrainOutcome};
use crate::env::{PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::estimator::ContrastivePolicy;
use crate::policy::{accumulate_logprob_grad, sample, ConditionalPolicy, ParametricPolicy, Trajectory};
use crate::rng::{derive_seed2, Stream};

/// A sampled trajectory with the estimate's log-probability of every emitted
/// token, frozen at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetedTrajectory {
    pub trajectory: Trajectory,
    pub target_logprobs: Vec<f64>,
}

pub fn annotate<H: ConditionalPolicy + ?Sized>(pi_hat: &H, trajectory: Trajectory) -> TargetedTrajectory {
    let mut ctx = trajectory.prompt.clone();
    let target_logprobs = trajectory
        .response
        .iter()
        .map(|&tok| {
            let lp = pi_hat.log_probs(&ctx)[tok.index()];
            ctx.push(tok);
            lp
        })
        .collect();
    TargetedTrajectory {
        trajectory,
        target_logprobs,
    }
}

/// Squared log-ratio between the estimate and the current policy over every
/// sampled token, divided by the token count.
pub fn inverse_q_loss<P: ParametricPolicy + ?Sized>(pi_theta: &P, batch: &[TargetedTrajectory]) -> Result<LossAndGrad> {
    let count: usize = batch.iter().map(|s| s.trajectory.len()).sum();
    if count == 0 {
        return Err(Error::input("inverse-q loss needs at least one sampled token"));
    }
    let norm = 1.0 / count as f64;
    let mut raw = 0.0;
    let mut grad = vec![0.0; pi_theta.num_params()];
    for sample in batch {
        let traj = &sample.trajectory;
        let mut ctx = traj.prompt.clone();
        for (&tok, &target) in traj.response.iter().zip(&sample.target_logprobs) {
            let current = pi_theta.log_probs(&ctx)[tok.index()];
            let diff = current - target;
            raw += diff * diff;
            if diff != 0.0 {
                accumulate_logprob_grad(pi_theta, &ctx, tok, 2.0 * diff * norm, &mut grad);
            }
            ctx.push(tok);
        }
    }
    Ok(LossAndGrad {
        loss: raw * norm,
        raw_loss: raw,
        grad,
    })
}

/// Reward imitation: each epoch samples from the current policy, scores every
/// token under the fixed estimate `pi_hat` and takes one gradient step.
///
/// Prompts are drawn round-robin over the prompt set. The KL column of the
/// metrics is measured against `pi_init`.
pub fn inverse_q_train<P, H>(
    cfg: &TrainConfig,
    spec: &RewardSpec,
    prompts: &PromptSet,
    pi_hat: &H,
    pi_init: P,
) -> Result<TrainOutcome<P>>
where
    P: ParametricPolicy + Clone,
    H: ConditionalPolicy + ?Sized,
{
    cfg.validate()?;
    let logger = EpochLogger::new(cfg);
    let init = pi_init.clone();
    let mut policy = pi_init;
    let mut metrics = vec![logger.row(cfg, spec, prompts, 0, None, &policy, &init, &init)?];
    let mut checkpoints = vec![policy.clone()];

    let m = cfg.samples_per_epoch;
    for epoch in 1..=cfg.epochs {
        let batch = (0..m)
            .map(|i| {
                let prompt = &prompts.cycle((epoch - 1) * m + i).tokens;
                let seed = derive_seed2(cfg.seed, Stream::TrainSample, epoch as u64, i as u64);
                sample(&policy, prompt, cfg.horizon, seed).map(|t| annotate(pi_hat, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = inverse_q_loss(&policy, &batch)?;
        check_finite(epoch, &loss)?;
        gradient_step(&mut policy, &loss.grad, cfg.lr);
        check_params(epoch, &policy)?;
        metrics.push(logger.row(cfg, spec, prompts, epoch, Some(&loss), &policy, &init, &init)?);
        checkpoints.push(policy.clone());
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoints,
    })
}

/// [`inverse_q_train`] with the contrastive estimate built from `pi_w`, `pi_l` and `cfg.alpha`.
pub fn inverse_q_train_contrastive<P, W, L>(
    cfg: &TrainConfig,
    spec: &RewardSpec,
    prompts: &PromptSet,
    pi_w: &W,
    pi_l: &L,
    pi_init: P,
) -> Result<TrainOutcome<P>>
where
    P: ParametricPolicy + Clone,
    W: ConditionalPolicy,
    L: ConditionalPolicy,
{
    let pi_hat = ContrastivePolicy::new(pi_w, pi_l, cfg.alpha)?;
    inverse_q_train(cfg, spec, prompts, &pi_hat, pi_init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{tokens, NeuralPolicy, TabularPolicy, Token, Vocab};
    use crate::rng::rng_from_seed;

    fn single_token_batch(target: f64) -> Vec<TargetedTrajectory> {
        let traj = Trajectory::new(vec![], vec![Token(0)], Token(1), 3).unwrap();
        vec![TargetedTrajectory {
            trajectory: traj,
            target_logprobs: vec![target],
        }]
    }

    #[test]
    fn single_token_loss_is_ln2_squared() {
        let vocab = Vocab::new(2, 1).unwrap();
        let pi = TabularPolicy::with_all_rows(vocab, 1, &[0.4, 0.6]).unwrap();
        let loss = inverse_q_loss(&pi, &single_token_batch(0.8f64.ln())).unwrap();
        let expected = 2f64.ln().powi(2);
        assert!((loss.loss - expected).abs() < 1e-12);
        assert!((loss.loss - 0.4805).abs() < 1e-4);
        assert_eq!(loss.loss, loss.raw_loss);
    }

    #[test]
    fn empty_batch_is_input_error() {
        let pi = TabularPolicy::uniform(Vocab::new(2, 1).unwrap(), 1);
        assert!(matches!(inverse_q_loss(&pi, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn matching_policy_has_zero_loss_and_gradient() {
        let vocab = Vocab::new(4, 0).unwrap();
        let pi = NeuralPolicy::random(vocab, 2, 4, 0.8, &mut rng_from_seed(1));
        let batch: Vec<_> = (0..20)
            .map(|i| annotate(&pi, sample(&pi, &tokens(&[1]), 5, i).unwrap()))
            .collect();
        let loss = inverse_q_loss(&pi, &batch).unwrap();
        assert_eq!(loss.loss, 0.0);
        assert!(loss.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let vocab = Vocab::new(3, 0).unwrap();
        let mut rng = rng_from_seed(2);
        let pi = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let hat = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let batch: Vec<_> = (0..10)
            .map(|i| annotate(&hat, sample(&pi, &[], 4, i).unwrap()))
            .collect();
        let mut reversed = batch.clone();
        reversed.reverse();
        let a = inverse_q_loss(&pi, &batch).unwrap();
        let b = inverse_q_loss(&pi, &reversed).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn small_step_descends_on_the_same_batch() {
        let vocab = Vocab::new(4, 0).unwrap();
        for seed in 0..5 {
            let mut rng = rng_from_seed(seed);
            let mut pi = NeuralPolicy::random(vocab, 1, 5, 0.5, &mut rng);
            let hat = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
            let batch: Vec<_> = (0..30)
                .map(|i| annotate(&hat, sample(&pi, &tokens(&[2]), 5, i).unwrap()))
                .collect();
            let before = inverse_q_loss(&pi, &batch).unwrap();
            gradient_step(&mut pi, &before.grad, 1e-4);
            let after = inverse_q_loss(&pi, &batch).unwrap();
            assert!(after.loss < before.loss, "seed {seed}");
        }
    }
}
