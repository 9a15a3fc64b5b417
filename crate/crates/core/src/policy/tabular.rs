use rand::Rng;

use super::{window_symbols, ConditionalPolicy, ParametricPolicy, Token, Vocab};
use crate::error::{Error, Result};
use crate::numeric::{floored_ln, log_softmax};
use crate::rng::standard_normal;

/// One row of `V` logits for every context of `k` symbols drawn from `V + 1`
/// (tokens plus the start symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    window: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn num_rows(vocab: &Vocab, window: usize) -> usize {
        (vocab.size() + 1).pow(window as u32)
    }

    pub fn uniform(vocab: Vocab, window: usize) -> Self {
        let len = Self::num_rows(&vocab, window) * vocab.size();
        TabularPolicy {
            vocab,
            window,
            logits: vec![0.0; len],
        }
    }

    pub fn from_logits(vocab: Vocab, window: usize, logits: Vec<f64>) -> Result<Self> {
        let expected = Self::num_rows(&vocab, window) * vocab.size();
        if logits.len() != expected {
            return Err(Error::input(format!(
                "tabular policy with V={} k={} needs {expected} logits, got {}",
                vocab.size(),
                window,
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::input("tabular logits must be finite"));
        }
        Ok(TabularPolicy { vocab, window, logits })
    }

    /// Gaussian logits with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, window: usize, scale: f64, rng: &mut R) -> Self {
        let len = Self::num_rows(&vocab, window) * vocab.size();
        let logits = (0..len).map(|_| scale * standard_normal(rng)).collect();
        TabularPolicy { vocab, window, logits }
    }

    /// Sets the row for `context` from a probability vector (log floor applies).
    pub fn set_row_probs(&mut self, context: &[Token], probs: &[f64]) -> Result<()> {
        if probs.len() != self.vocab.size() {
            return Err(Error::input("probability row has wrong length"));
        }
        let row: Vec<f64> = probs.iter().map(|&p| floored_ln(p)).collect();
        self.row_mut(context).copy_from_slice(&row);
        Ok(())
    }

    /// Sets the same probability row for every context.
    pub fn with_all_rows(vocab: Vocab, window: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != vocab.size() {
            return Err(Error::input("probability row has wrong length"));
        }
        let row: Vec<f64> = probs.iter().map(|&p| floored_ln(p)).collect();
        let logits = row
            .iter()
            .copied()
            .cycle()
            .take(Self::num_rows(&vocab, window) * vocab.size())
            .collect();
        Ok(TabularPolicy { vocab, window, logits })
    }

    pub fn row_index(&self, context: &[Token]) -> usize {
        let base = self.vocab.size() + 1;
        window_symbols(&self.vocab, context, self.window)
            .into_iter()
            .fold(0, |acc, s| acc * base + s)
    }

    pub fn row(&self, context: &[Token]) -> &[f64] {
        let v = self.vocab.size();
        let start = self.row_index(context) * v;
        &self.logits[start..start + v]
    }

    pub fn row_mut(&mut self, context: &[Token]) -> &mut [f64] {
        let v = self.vocab.size();
        let start = self.row_index(context) * v;
        &mut self.logits[start..start + v]
    }
}

impl ConditionalPolicy for TabularPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        log_softmax(self.row(context))
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.window)
    }
}

impl ParametricPolicy for TabularPolicy {
    fn window(&self) -> usize {
        self.window
    }

    fn logits(&self, context: &[Token]) -> Vec<f64> {
        self.row(context).to_vec()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn backprop_logits(&self, context: &[Token], upstream: &[f64], grad: &mut [f64]) {
        let v = self.vocab.size();
        let start = self.row_index(context) * v;
        for (g, u) in grad[start..start + v].iter_mut().zip(upstream) {
            *g += u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tokens;
    use crate::rng::rng_from_seed;

    #[test]
    fn uniform_logprob_is_ln_quarter() {
        let p = TabularPolicy::uniform(Vocab::new(4, 3).unwrap(), 2);
        for ctx in [vec![], tokens(&[1]), tokens(&[0, 2, 1])] {
            for t in 0..4 {
                let lp = p.logprob(&ctx, Token(t)).unwrap();
                assert!((lp - (0.25f64).ln()).abs() < 1e-15);
            }
        }
        assert!((p.logprob(&[], Token(0)).unwrap() + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn softmax_of_two_zero_zero_zero() {
        let vocab = Vocab::new(4, 3).unwrap();
        let mut p = TabularPolicy::uniform(vocab, 0);
        p.row_mut(&[]).copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        let e2 = 2f64.exp();
        let oracle = (e2 / (e2 + 3.0)).ln();
        let lp = p.logprob(&[], Token(0)).unwrap();
        assert!((lp - oracle).abs() < 1e-15);
        assert!((lp + 0.3407).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let p = TabularPolicy::uniform(Vocab::new(4, 3).unwrap(), 1);
        assert!(matches!(p.logprob(&[], Token(4)), Err(Error::Input(_))));
    }

    #[test]
    fn rows_normalize_for_random_logits() {
        let vocab = Vocab::new(5, 0).unwrap();
        let p = TabularPolicy::random(vocab, 2, 3.0, &mut rng_from_seed(3));
        for ctx in [vec![], tokens(&[4]), tokens(&[1, 2]), tokens(&[3, 3, 3])] {
            let total: f64 = p.probs(&ctx).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounds() {
        let vocab = Vocab::new(4, 3).unwrap();
        let uniform = TabularPolicy::uniform(vocab, 1);
        assert!((uniform.entropy(&[]) - 4f64.ln()).abs() < 1e-12);
        let one_hot = TabularPolicy::with_all_rows(vocab, 1, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(one_hot.entropy(&[]).abs() < 1e-12);
        let two = TabularPolicy::with_all_rows(Vocab::new(2, 1).unwrap(), 0, &[0.8, 0.2]).unwrap();
        assert!((two.entropy(&[]) - 0.5004).abs() < 1e-4);
    }

    #[test]
    fn row_indexing_distinguishes_padding() {
        let vocab = Vocab::new(3, 0).unwrap();
        let p = TabularPolicy::uniform(vocab, 2);
        let a = p.row_index(&tokens(&[1]));
        let b = p.row_index(&tokens(&[0, 1]));
        assert_ne!(a, b);
        assert_eq!(p.row_index(&tokens(&[2, 0, 1])), b);
        assert_eq!(TabularPolicy::num_rows(&vocab, 2), 16);
    }
}
