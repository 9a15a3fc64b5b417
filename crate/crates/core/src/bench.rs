//! Synthetic pattern benchmark: a weak base policy, a stronger policy that
//! prefers the rewarded pattern, and everything needed to score a run.

use crate::env::{pattern_hit_probability, pattern_optimal_expected_reward, PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::policy::{ConditionalPolicy, TabularPolicy, Token, Vocab};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchParams {
    pub vocab_size: usize,
    pub eos: u32,
    pub pattern: Vec<u32>,
    pub horizon: usize,
    pub prompts: Vec<Vec<u32>>,
    /// Standard deviation of the base policy's random logits.
    pub noise: f64,
    pub eos_logit: f64,
    /// Logit bonus of the strong policy for the first pattern token, in every context.
    pub lead_boost: f64,
    /// Logit bonus for each later pattern token right after its predecessor.
    pub follow_boost: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            vocab_size: 8,
            eos: 0,
            pattern: vec![3, 5],
            horizon: 10,
            prompts: vec![vec![1], vec![2], vec![4], vec![6], vec![7]],
            noise: 0.5,
            eos_logit: -1.0,
            lead_boost: 1.0,
            follow_boost: 2.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatternBenchmark {
    pub vocab: Vocab,
    pub pattern: Vec<Token>,
    pub spec: RewardSpec,
    pub prompts: PromptSet,
    pub horizon: usize,
    /// Stronger policy.
    pub pi_w: TabularPolicy,
    /// Base policy; also the reference and the initial policy.
    pub pi_l: TabularPolicy,
}

impl PatternBenchmark {
    pub fn build(params: &BenchParams, seed: u64) -> Result<Self> {
        let vocab = Vocab::new(params.vocab_size, params.eos)?;
        let pattern: Vec<Token> = params.pattern.iter().map(|&t| Token(t)).collect();
        let spec = RewardSpec::pattern(&vocab, pattern.clone())?;
        let prompts = PromptSet::unlabeled(
            &vocab,
            params.horizon,
            params
                .prompts
                .iter()
                .map(|p| p.iter().map(|&t| Token(t)).collect())
                .collect(),
        )?;
        let v = vocab.size();
        let mut rng = rng_from_seed(derive_seed(seed, Stream::Instance, 0));
        let mut logits: Vec<f64> = (0..TabularPolicy::num_rows(&vocab, 1) * v)
            .map(|_| params.noise * standard_normal(&mut rng))
            .collect();
        for row in logits.chunks_mut(v) {
            row[vocab.eos().index()] = params.eos_logit;
        }
        let pi_l = TabularPolicy::from_logits(vocab, 1, logits)?;
        let mut pi_w = pi_l.clone();
        for ctx in 0..=v {
            let ctx_token = if ctx == v { None } else { Some(Token(ctx as u32)) };
            if ctx_token == Some(vocab.eos()) {
                continue;
            }
            let context: Vec<Token> = ctx_token.into_iter().collect();
            let row = pi_w.row_mut(&context);
            row[pattern[0].index()] += params.lead_boost;
            for pair in pattern.windows(2) {
                if ctx_token == Some(pair[0]) {
                    row[pair[1].index()] += params.follow_boost;
                }
            }
        }
        Ok(PatternBenchmark {
            vocab,
            pattern,
            spec,
            prompts,
            horizon: params.horizon,
            pi_w,
            pi_l,
        })
    }

    /// Exact expected pattern reward of `policy`, averaged over the prompts.
    pub fn expected_reward<P: ConditionalPolicy + ?Sized>(&self, policy: &P) -> Result<f64> {
        let total = self
            .prompts
            .iter()
            .map(|p| pattern_hit_probability(policy, &p.tokens, &self.pattern, self.horizon))
            .sum::<Result<f64>>()?;
        Ok(total / self.prompts.len() as f64)
    }

    /// Expected reward of the KL-optimal policy against `pi_ref`, averaged over the prompts.
    pub fn optimal_expected_reward<P: ConditionalPolicy + ?Sized>(&self, pi_ref: &P, beta: f64) -> Result<f64> {
        if !(beta > 0.0) {
            return Err(Error::input("beta must be > 0"));
        }
        let total = self
            .prompts
            .iter()
            .map(|p| {
                pattern_hit_probability(pi_ref, &p.tokens, &self.pattern, self.horizon)
                    .map(|h| pattern_optimal_expected_reward(h, beta))
            })
            .sum::<Result<f64>>()?;
        Ok(total / self.prompts.len() as f64)
    }
}

/// Fraction of the initial-to-optimal reward gap closed by `final_reward`.
pub fn gap_closed(initial: f64, final_reward: f64, optimum: f64) -> f64 {
    (final_reward - initial) / (optimum - initial)
}

/// First epoch whose reward reaches `initial + fraction * (final - initial)`.
pub fn convergence_epoch(rewards: &[f64], fraction: f64) -> Option<usize> {
    let (first, last) = (*rewards.first()?, *rewards.last()?);
    let level = first + fraction * (last - first);
    rewards
        .iter()
        .position(|&r| if last >= first { r >= level } else { r <= level })
}
