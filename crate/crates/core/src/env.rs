//! Synthetic reward environments.
//!
//! A [`RewardSpec`] is the ground-truth judge: a deterministic terminal reward
//! over complete responses. Everything that would involve human or model
//! feedback elsewhere is answered by it here.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::policy::{AnyPolicy, ConditionalPolicy, SequenceDistribution, Token, Trajectory, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// 1.0 if `target` occurs as a contiguous run inside the response, else 0.0.
    Pattern { target: Vec<Token> },
    /// Sequence log-likelihood of the response under a fixed target policy.
    Likelihood { target: Box<AnyPolicy> },
    /// Fraction of response tokens equal to `token`.
    Count { token: Token },
    /// The same reward for every response.
    Constant { value: f64 },
}

pub const PATTERN_BONUS: f64 = 1.0;

impl RewardSpec {
    pub fn pattern(vocab: &Vocab, target: Vec<Token>) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::input("pattern target must be nonempty"));
        }
        for &t in &target {
            vocab.check(t)?;
            if t == vocab.eos() {
                return Err(Error::input("pattern target may not contain eos"));
            }
        }
        Ok(RewardSpec::Pattern { target })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RewardSpec::Pattern { .. } => "pattern",
            RewardSpec::Likelihood { .. } => "likelihood",
            RewardSpec::Count { .. } => "count",
            RewardSpec::Constant { .. } => "constant",
        }
    }

    /// Reward of a response assumed to be terminated.
    pub fn evaluate(&self, prompt: &[Token], response: &[Token]) -> f64 {
        match self {
            RewardSpec::Pattern { target } => {
                if contains_run(response, target) {
                    PATTERN_BONUS
                } else {
                    0.0
                }
            }
            RewardSpec::Likelihood { target } => target.sequence_logprob(prompt, response).unwrap_or(f64::NEG_INFINITY),
            RewardSpec::Count { token } => {
                if response.is_empty() {
                    0.0
                } else {
                    response.iter().filter(|&&t| t == *token).count() as f64 / response.len() as f64
                }
            }
            RewardSpec::Constant { value } => *value,
        }
    }

    pub fn terminal_reward(&self, trajectory: &Trajectory) -> Result<f64> {
        if !trajectory.is_terminated() {
            return Err(Error::input("terminal reward requested for an unterminated response"));
        }
        Ok(self.evaluate(&trajectory.prompt, &trajectory.response))
    }

    pub fn bind<'a>(&'a self, prompt: &'a [Token]) -> BoundReward<'a> {
        BoundReward { spec: self, prompt }
    }
}

fn contains_run(haystack: &[Token], needle: &[Token]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// A reward over responses for one fixed prompt.
pub trait ResponseReward {
    fn reward(&self, response: &[Token]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReward<'a> {
    spec: &'a RewardSpec,
    prompt: &'a [Token],
}

impl ResponseReward for BoundReward<'_> {
    fn reward(&self, response: &[Token]) -> f64 {
        self.spec.evaluate(self.prompt, response)
    }
}

/// An explicit reward per response; missing responses score 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTable(pub BTreeMap<Vec<Token>, f64>);

impl ResponseReward for RewardTable {
    fn reward(&self, response: &[Token]) -> f64 {
        self.0.get(response).copied().unwrap_or(0.0)
    }
}

impl<F: Fn(&[Token]) -> f64> ResponseReward for F {
    fn reward(&self, response: &[Token]) -> f64 {
        self(response)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    /// Optional category tag carried through to win-rate reports.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn new(vocab: &Vocab, horizon: usize, prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::input("prompt set is empty"));
        }
        for p in &prompts {
            for &t in &p.tokens {
                vocab.check(t)?;
            }
            if p.tokens.len() >= horizon {
                return Err(Error::input(format!(
                    "prompt of length {} is not shorter than horizon {horizon}",
                    p.tokens.len()
                )));
            }
        }
        Ok(PromptSet { prompts })
    }

    pub fn unlabeled(vocab: &Vocab, horizon: usize, prompts: Vec<Vec<Token>>) -> Result<Self> {
        Self::new(
            vocab,
            horizon,
            prompts
                .into_iter()
                .map(|tokens| Prompt { tokens, label: None })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Round-robin access: prompt `i mod len`.
    pub fn cycle(&self, i: usize) -> &Prompt {
        &self.prompts[i % self.prompts.len()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter()
    }
}

/// `beta * log pi_ref(y_t | y_<t)`, plus the terminal reward at the final
/// position of a terminated trajectory.
pub fn shaped_token_reward<P: ConditionalPolicy + ?Sized>(
    spec: &RewardSpec,
    pi_ref: &P,
    trajectory: &Trajectory,
    t: usize,
    beta: f64,
) -> Result<f64> {
    if t >= trajectory.len() {
        return Err(Error::input(format!(
            "position {t} outside response of length {}",
            trajectory.len()
        )));
    }
    let ctx = trajectory.context_at(t);
    let mut r = beta * pi_ref.logprob(&ctx, trajectory.response[t])?;
    if t + 1 == trajectory.len() && trajectory.is_terminated() {
        r += spec.terminal_reward(trajectory)?;
    }
    Ok(r)
}

/// Bradley-Terry probability that a response with reward `r_w` is preferred over one with `r_l`.
pub fn preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// `E_pi[r] - beta * KL(pi || pi_ref)` over the enumerated response universe.
pub fn exact_value(
    pi: &SequenceDistribution,
    pi_ref: &SequenceDistribution,
    reward: &dyn ResponseReward,
    beta: f64,
) -> Result<f64> {
    let kl = pi.kl(pi_ref)?;
    let expected = pi.expectation(|y| reward.reward(y));
    Ok(expected - beta * kl)
}

/// Probability that a rollout of `policy` from `prompt` contains `pattern`
/// as a contiguous run, by dynamic programming over (window, match state).
///
/// Requires a policy whose distribution depends on a bounded window.
pub fn pattern_hit_probability<P: ConditionalPolicy + ?Sized>(
    policy: &P,
    prompt: &[Token],
    pattern: &[Token],
    horizon: usize,
) -> Result<f64> {
    let window = policy
        .context_window()
        .ok_or_else(|| Error::input("pattern DP needs a policy with a bounded context window"))?;
    if pattern.is_empty() {
        return Err(Error::input("empty pattern"));
    }
    let vocab = policy.vocab();
    let automaton = MatchAutomaton::new(pattern, vocab.size());
    let mut memo = HashMap::new();
    let start: Vec<Token> = prompt[prompt.len().saturating_sub(window)..].to_vec();
    Ok(hit_from(
        policy, &vocab, &automaton, window, start, 0, horizon, &mut memo,
    ))
}

#[allow(clippy::too_many_arguments)]
fn hit_from<P: ConditionalPolicy + ?Sized>(
    policy: &P,
    vocab: &Vocab,
    automaton: &MatchAutomaton,
    window: usize,
    recent: Vec<Token>,
    state: usize,
    remaining: usize,
    memo: &mut HashMap<(Vec<Token>, usize, usize), f64>,
) -> f64 {
    if state == automaton.len() {
        return 1.0;
    }
    if remaining == 0 {
        return 0.0;
    }
    let key = (recent, state, remaining);
    if let Some(&p) = memo.get(&key) {
        return p;
    }
    let (recent, _, _) = &key;
    let probs = policy.probs(recent);
    let mut total = 0.0;
    for tok in vocab.tokens() {
        let p = probs[tok.index()];
        if p == 0.0 {
            continue;
        }
        if tok == vocab.eos() {
            continue;
        }
        let next_state = automaton.step(state, tok);
        let mut next = recent.clone();
        next.push(tok);
        if next.len() > window {
            next.remove(0);
        }
        total += p * hit_from(policy, vocab, automaton, window, next, next_state, remaining - 1, memo);
    }
    memo.insert(key, total);
    total
}

/// KMP automaton: state = length of the longest pattern prefix ending here.
struct MatchAutomaton {
    pattern: Vec<Token>,
    failure: Vec<usize>,
    vocab_size: usize,
}

impl MatchAutomaton {
    fn new(pattern: &[Token], vocab_size: usize) -> Self {
        let mut failure = vec![0; pattern.len()];
        let mut k = 0;
        for i in 1..pattern.len() {
            while k > 0 && pattern[i] != pattern[k] {
                k = failure[k - 1];
            }
            if pattern[i] == pattern[k] {
                k += 1;
            }
            failure[i] = k;
        }
        MatchAutomaton {
            pattern: pattern.to_vec(),
            failure,
            vocab_size,
        }
    }

    fn len(&self) -> usize {
        self.pattern.len()
    }

    fn step(&self, mut state: usize, tok: Token) -> usize {
        debug_assert!(tok.index() < self.vocab_size);
        loop {
            if self.pattern[state] == tok {
                return state + 1;
            }
            if state == 0 {
                return 0;
            }
            state = self.failure[state - 1];
        }
    }
}

/// Expected pattern reward of the KL-optimal policy given the reference hit
/// probability: the optimum reweights hits by `exp(bonus / beta)`.
pub fn pattern_optimal_expected_reward(hit_probability: f64, beta: f64) -> f64 {
    let p = hit_probability;
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return PATTERN_BONUS;
    }
    // p e^{b/beta} / (1 - p + p e^{b/beta}) written without overflow
    PATTERN_BONUS / (1.0 + (1.0 - p) / p * (-PATTERN_BONUS / beta).exp())
}
