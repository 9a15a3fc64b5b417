use std::collections::{BTreeMap, HashMap};

use super::{ConditionalPolicy, Token, Vocab};
use crate::error::{Error, Result};
use crate::numeric::floored_ln;

/// Every terminated response: eos-terminated of length <= horizon, plus
/// eos-free responses of exactly `horizon` tokens.
pub fn enumerate_responses(vocab: &Vocab, horizon: usize) -> Vec<Vec<Token>> {
    fn walk(vocab: &Vocab, horizon: usize, prefix: &mut Vec<Token>, out: &mut Vec<Vec<Token>>) {
        for tok in vocab.tokens() {
            prefix.push(tok);
            if tok == vocab.eos() || prefix.len() == horizon {
                out.push(prefix.clone());
            } else {
                walk(vocab, horizon, prefix, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if horizon > 0 {
        walk(vocab, horizon, &mut Vec::new(), &mut out);
    }
    out
}

/// An explicit distribution over the terminated-response universe.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    vocab: Vocab,
    horizon: usize,
    probs: BTreeMap<Vec<Token>, f64>,
}

const NORMALIZATION_TOL: f64 = 1e-12;

impl SequenceDistribution {
    /// Validates nonnegativity and normalization (within 1e-12).
    pub fn new(vocab: Vocab, horizon: usize, probs: BTreeMap<Vec<Token>, f64>) -> Result<Self> {
        if let Some((y, p)) = probs.iter().find(|(_, &p)| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::input(format!("invalid probability {p} for response {y:?}")));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(SequenceDistribution { vocab, horizon, probs })
    }

    /// Exhaustive rollout of a conditional policy from `prompt`.
    pub fn from_policy<P: ConditionalPolicy + ?Sized>(policy: &P, prompt: &[Token], horizon: usize) -> Self {
        let vocab = policy.vocab();
        let mut probs = BTreeMap::new();
        let mut history = prompt.to_vec();
        rollout(policy, &vocab, horizon, prompt.len(), &mut history, 0.0, &mut probs);
        SequenceDistribution { vocab, horizon, probs }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prob(&self, response: &[Token]) -> f64 {
        self.probs.get(response).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Token>, f64)> {
        self.probs.iter().map(|(y, &p)| (y, p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn same_support(&self, other: &SequenceDistribution) -> bool {
        self.probs.len() == other.probs.len() && self.probs.keys().zip(other.probs.keys()).all(|(a, b)| a == b)
    }

    fn check_support(&self, other: &SequenceDistribution) -> Result<()> {
        if self.same_support(other) {
            Ok(())
        } else {
            Err(Error::input("sequence distributions are over different response sets"))
        }
    }

    pub fn total_variation(&self, other: &SequenceDistribution) -> Result<f64> {
        self.check_support(other)?;
        Ok(0.5 * self.iter().map(|(y, p)| (p - other.prob(y)).abs()).sum::<f64>())
    }

    /// `KL(self || other)`; a domain error if `self` puts mass where `other` has none.
    pub fn kl(&self, other: &SequenceDistribution) -> Result<f64> {
        self.check_support(other)?;
        let mut total = 0.0;
        for (y, p) in self.iter() {
            if p == 0.0 {
                continue;
            }
            let q = other.prob(y);
            if q == 0.0 {
                return Err(Error::Domain(format!("absolute continuity violated at response {y:?}")));
            }
            total += p * (p.ln() - q.ln());
        }
        Ok(total)
    }

    pub fn expectation(&self, f: impl Fn(&[Token]) -> f64) -> f64 {
        self.iter().map(|(y, p)| if p == 0.0 { 0.0 } else { p * f(y) }).sum()
    }

    /// Next-token conditionals of this distribution at every reachable prefix.
    pub fn conditionals(&self, prompt: &[Token]) -> PrefixConditionals {
        let v = self.vocab.size();
        // mass[prefix] = probability that the response starts with `prefix`
        let mut mass: HashMap<Vec<Token>, f64> = HashMap::new();
        for (y, p) in self.iter() {
            for end in 0..=y.len() {
                *mass.entry(y[..end].to_vec()).or_insert(0.0) += p;
            }
        }
        let mut rows = HashMap::new();
        for (prefix, &m) in &mass {
            if prefix.len() >= self.horizon || prefix.last() == Some(&self.vocab.eos()) {
                continue;
            }
            let row: Vec<f64> = if m > 0.0 {
                self.vocab
                    .tokens()
                    .map(|t| {
                        let mut ext = prefix.clone();
                        ext.push(t);
                        floored_ln(mass.get(&ext).copied().unwrap_or(0.0) / m)
                    })
                    .collect()
            } else {
                vec![-(v as f64).ln(); v]
            };
            rows.insert(prefix.clone(), row);
        }
        PrefixConditionals {
            vocab: self.vocab,
            prompt: prompt.to_vec(),
            rows,
        }
    }
}

fn rollout<P: ConditionalPolicy + ?Sized>(
    policy: &P,
    vocab: &Vocab,
    horizon: usize,
    prompt_len: usize,
    history: &mut Vec<Token>,
    logp: f64,
    out: &mut BTreeMap<Vec<Token>, f64>,
) {
    if horizon == 0 {
        return;
    }
    let row = policy.log_probs(history);
    for tok in vocab.tokens() {
        let lp = logp + row[tok.index()];
        history.push(tok);
        if tok == vocab.eos() || history.len() - prompt_len == horizon {
            out.insert(history[prompt_len..].to_vec(), lp.exp());
        } else {
            rollout(policy, vocab, horizon, prompt_len, history, lp, out);
        }
        history.pop();
    }
}

/// Trajectory-level mixture `(1 - delta) * b + delta * a`.
pub fn mixture_sequence_distribution(
    dist_a: &SequenceDistribution,
    dist_b: &SequenceDistribution,
    delta: f64,
) -> Result<SequenceDistribution> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::input(format!("delta {delta} outside [0, 1]")));
    }
    dist_a.check_support(dist_b)?;
    let probs = dist_b
        .iter()
        .map(|(y, pb)| (y.clone(), (1.0 - delta) * pb + delta * dist_a.prob(y)))
        .collect();
    Ok(SequenceDistribution {
        vocab: dist_b.vocab,
        horizon: dist_b.horizon,
        probs,
    })
}

/// Per-prefix next-token rows derived from a [`SequenceDistribution`] for one prompt.
///
/// Contexts passed to [`ConditionalPolicy::log_probs`] must start with the
/// prompt; prefixes outside the table (zero mass, past the horizon) get a
/// uniform row.
#[derive(Debug, Clone)]
pub struct PrefixConditionals {
    vocab: Vocab,
    prompt: Vec<Token>,
    rows: HashMap<Vec<Token>, Vec<f64>>,
}

impl PrefixConditionals {
    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }
}

impl ConditionalPolicy for PrefixConditionals {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        let v = self.vocab.size();
        let uniform = || vec![-(v as f64).ln(); v];
        match context.strip_prefix(self.prompt.as_slice()) {
            Some(prefix) => self.rows.get(prefix).cloned().unwrap_or_else(uniform),
            None => uniform(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{tokens, TabularPolicy};
    use crate::rng::rng_from_seed;

    fn two_point(a: f64) -> SequenceDistribution {
        // V = 2, eos = 1, horizon 1: universe {[0], [1]}
        let vocab = Vocab::new(2, 1).unwrap();
        let probs = [(tokens(&[0]), a), (tokens(&[1]), 1.0 - a)].into_iter().collect();
        SequenceDistribution::new(vocab, 1, probs).unwrap()
    }

    #[test]
    fn universe_size() {
        // V=3 (one eos), horizon 3: 1 + 2 + 4 eos-terminated, 8 eos-free
        let vocab = Vocab::new(3, 0).unwrap();
        assert_eq!(enumerate_responses(&vocab, 3).len(), 1 + 2 + 4 + 8);
        assert!(enumerate_responses(&vocab, 0).is_empty());
    }

    #[test]
    fn rollout_normalizes_and_matches_sequence_logprob() {
        let vocab = Vocab::new(3, 1).unwrap();
        let policy = TabularPolicy::random(vocab, 2, 1.5, &mut rng_from_seed(8));
        let prompt = tokens(&[2]);
        let dist = SequenceDistribution::from_policy(&policy, &prompt, 3);
        assert_eq!(dist.len(), enumerate_responses(&vocab, 3).len());
        let total: f64 = enumerate_responses(&vocab, 3)
            .iter()
            .map(|y| policy.sequence_logprob(&prompt, y).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
        for (y, p) in dist.iter() {
            let lp = policy.sequence_logprob(&prompt, y).unwrap();
            assert!((p - lp.exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn mixture_endpoints_and_mean() {
        let a = two_point(0.8);
        let b = two_point(0.4);
        assert_eq!(mixture_sequence_distribution(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mixture_sequence_distribution(&a, &b, 0.0).unwrap(), b);
        let mid = mixture_sequence_distribution(&a, &b, 0.5).unwrap();
        assert!((mid.prob(&tokens(&[0])) - 0.6).abs() < 1e-15);
        assert!((mid.prob(&tokens(&[1])) - 0.4).abs() < 1e-15);
        assert!(mixture_sequence_distribution(&a, &b, 1.5).is_err());
    }

    #[test]
    fn mixture_rejects_mismatched_support() {
        let vocab = Vocab::new(2, 1).unwrap();
        let p = TabularPolicy::uniform(vocab, 1);
        let short = SequenceDistribution::from_policy(&p, &[], 1);
        let long = SequenceDistribution::from_policy(&p, &[], 2);
        assert!(matches!(
            mixture_sequence_distribution(&short, &long, 0.5),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn constructor_validates() {
        let vocab = Vocab::new(2, 1).unwrap();
        let bad: BTreeMap<_, _> = [(tokens(&[0]), 0.7), (tokens(&[1]), 0.7)].into_iter().collect();
        assert!(SequenceDistribution::new(vocab, 1, bad).is_err());
        let neg: BTreeMap<_, _> = [(tokens(&[0]), 1.5), (tokens(&[1]), -0.5)].into_iter().collect();
        assert!(SequenceDistribution::new(vocab, 1, neg).is_err());
    }

    #[test]
    fn conditionals_reproduce_the_distribution() {
        let vocab = Vocab::new(3, 0).unwrap();
        let policy = TabularPolicy::random(vocab, 1, 1.0, &mut rng_from_seed(21));
        let prompt = tokens(&[1, 2]);
        let dist = SequenceDistribution::from_policy(&policy, &prompt, 3);
        // Reweight so the conditionals are no longer window-1 Markov.
        let probs: BTreeMap<_, _> = {
            let raw: Vec<(Vec<Token>, f64)> = dist
                .iter()
                .map(|(y, p)| (y.clone(), p * (1.0 + y.len() as f64)))
                .collect();
            let z: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(y, w)| (y, w / z)).collect()
        };
        let target = SequenceDistribution::new(vocab, 3, probs).unwrap();
        let cond = target.conditionals(&prompt);
        let back = SequenceDistribution::from_policy(&cond, &prompt, 3);
        assert!(back.total_variation(&target).unwrap() < 1e-14);
    }

    #[test]
    fn kl_detects_missing_support() {
        let a = two_point(0.5);
        let b = two_point(1.0);
        assert!(matches!(a.kl(&b), Err(Error::Domain(_))));
        assert!(b.kl(&a).unwrap() > 0.0);
        assert_eq!(a.kl(&a).unwrap(), 0.0);
    }
}
