//! Estimates of the KL-optimal policy.

use std::collections::BTreeMap;

use crate::env::ResponseReward;
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, log_sum_exp};
use crate::policy::{ConditionalPolicy, SequenceDistribution, Token, Vocab};

/// Next-token estimate `softmax(alpha * log pi_w + (1 - alpha) * log pi_l)`.
///
/// With `alpha > 1` this extrapolates past the strong policy away from the weak one.
#[derive(Debug, Clone)]
pub struct ContrastivePolicy<W, L> {
    pub strong: W,
    pub weak: L,
    pub alpha: f64,
}

impl<W: ConditionalPolicy, L: ConditionalPolicy> ContrastivePolicy<W, L> {
    pub fn new(strong: W, weak: L, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::input("contrast alpha must be finite"));
        }
        if strong.vocab() != weak.vocab() {
            return Err(Error::input("strong and weak policies use different vocabularies"));
        }
        if strong.context_window() != weak.context_window() {
            return Err(Error::input("strong and weak policies use different context windows"));
        }
        Ok(ContrastivePolicy { strong, weak, alpha })
    }
}

impl<W: ConditionalPolicy, L: ConditionalPolicy> ConditionalPolicy for ContrastivePolicy<W, L> {
    fn vocab(&self) -> Vocab {
        self.strong.vocab()
    }

    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        let lw = self.strong.log_probs(context);
        let ll = self.weak.log_probs(context);
        let mixed: Vec<f64> = lw
            .iter()
            .zip(&ll)
            .map(|(w, l)| self.alpha * w + (1.0 - self.alpha) * l)
            .collect();
        log_softmax(&mixed)
    }

    fn context_window(&self) -> Option<usize> {
        self.strong.context_window()
    }
}

/// Probability row of the contrastive estimate at `context`.
pub fn contrastive_estimate<W: ConditionalPolicy, L: ConditionalPolicy>(
    config: &ContrastivePolicy<W, L>,
    context: &[Token],
) -> Vec<f64> {
    config.probs(context)
}

/// The closed-form optimum together with its log partition function.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    pub distribution: SequenceDistribution,
    pub log_partition: f64,
}

impl OptimalPolicy {
    pub fn partition(&self) -> f64 {
        self.log_partition.exp()
    }
}

/// `pi*(y) = pi_ref(y) exp(r(y) / beta) / Z` over the full response universe.
pub fn closed_form_optimal<P: ConditionalPolicy + ?Sized>(
    pi_ref: &P,
    reward: &dyn ResponseReward,
    prompt: &[Token],
    beta: f64,
    horizon: usize,
) -> Result<OptimalPolicy> {
    if !(beta > 0.0) {
        return Err(Error::input(format!("beta must be > 0, got {beta}")));
    }
    let reference = SequenceDistribution::from_policy(pi_ref, prompt, horizon);
    // log weights: log pi_ref(y) + r(y)/beta
    let entries: Vec<(Vec<Token>, f64)> = reference
        .iter()
        .map(|(y, p)| {
            let lw = if p > 0.0 {
                p.ln() + reward.reward(y) / beta
            } else {
                f64::NEG_INFINITY
            };
            (y.clone(), lw)
        })
        .collect();
    let log_weights: Vec<f64> = entries.iter().map(|(_, lw)| *lw).collect();
    let log_partition = log_sum_exp(&log_weights);
    if !log_partition.is_finite() {
        return Err(Error::Domain("partition function is not finite".into()));
    }
    let probs: BTreeMap<Vec<Token>, f64> = entries
        .into_iter()
        .map(|(y, lw)| (y, (lw - log_partition).exp()))
        .collect();
    let distribution = SequenceDistribution::new(pi_ref.vocab(), horizon, probs)?;
    Ok(OptimalPolicy {
        distribution,
        log_partition,
    })
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`, omitting the partition offset.
pub fn implicit_reward<P, R>(pi: &P, pi_ref: &R, prompt: &[Token], response: &[Token], beta: f64) -> Result<f64>
where
    P: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    Ok(beta * (pi.sequence_logprob(prompt, response)? - pi_ref.sequence_logprob(prompt, response)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RewardSpec;
    use crate::policy::{enumerate_responses, tokens, TabularPolicy};
    use crate::rng::rng_from_seed;

    fn row_policy(probs: &[f64]) -> TabularPolicy {
        let vocab = Vocab::new(probs.len(), (probs.len() - 1) as u32).unwrap();
        TabularPolicy::with_all_rows(vocab, 1, probs).unwrap()
    }

    #[test]
    fn alpha_one_is_strong_policy() {
        let vocab = Vocab::new(4, 0).unwrap();
        let mut rng = rng_from_seed(2);
        let w = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let l = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let c = ContrastivePolicy::new(&w, &l, 1.0).unwrap();
        for ctx in [vec![], tokens(&[2])] {
            let est = contrastive_estimate(&c, &ctx);
            for (a, b) in est.iter().zip(w.probs(&ctx)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn equal_policies_collapse_for_any_alpha() {
        let vocab = Vocab::new(3, 0).unwrap();
        let w = TabularPolicy::random(vocab, 1, 1.0, &mut rng_from_seed(9));
        for alpha in [1.0, 1.3, 2.0, 5.0] {
            let c = ContrastivePolicy::new(&w, &w, alpha).unwrap();
            for (a, b) in contrastive_estimate(&c, &[]).iter().zip(w.probs(&[])) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_contrast_example() {
        let w = row_policy(&[0.8, 0.2]);
        let l = row_policy(&[0.5, 0.5]);
        let c = ContrastivePolicy::new(&w, &l, 1.5).unwrap();
        let est = contrastive_estimate(&c, &[]);
        // weak row is uniform, so the estimate is proportional to pi_w^1.5
        let (a, b) = (0.8f64.powf(1.5), 0.2f64.powf(1.5));
        assert!((est[0] - a / (a + b)).abs() < 1e-12);
        assert!((est[0] - 0.8889).abs() < 1e-4);
        assert!((est[1] - 0.1111).abs() < 1e-4);
    }

    #[test]
    fn mismatched_policies_rejected() {
        let a = TabularPolicy::uniform(Vocab::new(3, 0).unwrap(), 1);
        let b = TabularPolicy::uniform(Vocab::new(4, 0).unwrap(), 1);
        assert!(ContrastivePolicy::new(&a, &b, 1.2).is_err());
        let c = TabularPolicy::uniform(Vocab::new(3, 0).unwrap(), 2);
        assert!(ContrastivePolicy::new(&a, &c, 1.2).is_err());
        assert!(ContrastivePolicy::new(&a, &a, f64::NAN).is_err());
    }

    #[test]
    fn constant_reward_leaves_reference_unchanged() {
        let vocab = Vocab::new(3, 0).unwrap();
        let pi_ref = TabularPolicy::random(vocab, 2, 1.0, &mut rng_from_seed(6));
        let spec = RewardSpec::Constant { value: 0.7 };
        let prompt = tokens(&[1]);
        let opt = closed_form_optimal(&pi_ref, &spec.bind(&prompt), &prompt, 0.5, 3).unwrap();
        let reference = SequenceDistribution::from_policy(&pi_ref, &prompt, 3);
        assert!(opt.distribution.total_variation(&reference).unwrap() < 1e-14);
        assert!((opt.partition() - (0.7f64 / 0.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn huge_beta_stays_near_reference() {
        let vocab = Vocab::new(3, 0).unwrap();
        let pi_ref = TabularPolicy::random(vocab, 1, 1.0, &mut rng_from_seed(7));
        let spec = RewardSpec::pattern(&vocab, tokens(&[1, 2])).unwrap();
        let opt = closed_form_optimal(&pi_ref, &spec.bind(&[]), &[], 1e6, 3).unwrap();
        let reference = SequenceDistribution::from_policy(&pi_ref, &[], 3);
        assert!(opt.distribution.total_variation(&reference).unwrap() <= 1e-3);
    }

    #[test]
    fn matches_weighted_enumeration_oracle() {
        let vocab = Vocab::new(2, 1).unwrap();
        let spec = RewardSpec::pattern(&vocab, tokens(&[0, 0])).unwrap();
        let prompt = tokens(&[0]);
        let pi_ref = TabularPolicy::random(vocab, 1, 1.0, &mut rng_from_seed(12));
        let beta = 0.5;
        let opt = closed_form_optimal(&pi_ref, &spec.bind(&prompt), &prompt, beta, 2).unwrap();
        // independent: products of conditionals, weights, normalisation
        let universe = enumerate_responses(&vocab, 2);
        let weights: Vec<f64> = universe
            .iter()
            .map(|y| {
                let mut ctx = prompt.clone();
                let mut p = 1.0;
                for &t in y {
                    p *= pi_ref.probs(&ctx)[t.index()];
                    ctx.push(t);
                }
                p * (spec.evaluate(&prompt, y) / beta).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        for (y, w) in universe.iter().zip(&weights) {
            assert!((opt.distribution.prob(y) - w / z).abs() < 1e-12);
        }
        assert!((opt.partition() - z).abs() < 1e-12 * z);
    }

    #[test]
    fn beta_must_be_positive() {
        let vocab = Vocab::new(2, 1).unwrap();
        let pi_ref = TabularPolicy::uniform(vocab, 1);
        let spec = RewardSpec::Constant { value: 0.0 };
        assert!(closed_form_optimal(&pi_ref, &spec.bind(&[]), &[], 0.0, 2).is_err());
    }

    #[test]
    fn implicit_reward_basics() {
        let vocab = Vocab::new(3, 0).unwrap();
        let mut rng = rng_from_seed(3);
        let pi = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let pi_ref = TabularPolicy::random(vocab, 1, 1.0, &mut rng);
        let y = tokens(&[1, 2, 0]);
        assert_eq!(implicit_reward(&pi_ref, &pi_ref, &[], &y, 0.3).unwrap(), 0.0);
        let r1 = implicit_reward(&pi, &pi_ref, &[], &y, 0.3).unwrap();
        let r2 = implicit_reward(&pi, &pi_ref, &[], &y, 0.6).unwrap();
        assert!((r2 - 2.0 * r1).abs() < 1e-14);
    }

    #[test]
    fn implicit_reward_of_optimum_is_reward_minus_constant() {
        let vocab = Vocab::new(3, 0).unwrap();
        let pi_ref = TabularPolicy::random(vocab, 2, 1.0, &mut rng_from_seed(13));
        let spec = RewardSpec::pattern(&vocab, tokens(&[2, 1])).unwrap();
        let prompt = tokens(&[1]);
        let beta = 0.4;
        let opt = closed_form_optimal(&pi_ref, &spec.bind(&prompt), &prompt, beta, 3).unwrap();
        let star = opt.distribution.conditionals(&prompt);
        let offset = -beta * opt.log_partition;
        for y in enumerate_responses(&vocab, 3) {
            let ir = implicit_reward(&star, &pi_ref, &prompt, &y, beta).unwrap();
            assert!((ir - spec.evaluate(&prompt, &y) - offset).abs() < 1e-10);
        }
    }
}
