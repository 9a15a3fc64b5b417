use rand::Rng;

use super::{window_symbols, ConditionalPolicy, ParametricPolicy, Token, Vocab};
use crate::error::{Error, Result};
use crate::numeric::log_softmax;
use crate::rng::standard_normal;

/// One-hot context encoding -> tanh hidden layer -> V logits.
///
/// Parameter layout (row-major): `W1[h][k(V+1)]`, `b1[h]`, `W2[V][h]`, `b2[V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPolicy {
    vocab: Vocab,
    window: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct Forward {
    active: Vec<usize>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl NeuralPolicy {
    pub fn param_count(vocab: &Vocab, window: usize, hidden: usize) -> usize {
        let input = window * (vocab.size() + 1);
        hidden * input + hidden + vocab.size() * hidden + vocab.size()
    }

    pub fn zeros(vocab: Vocab, window: usize, hidden: usize) -> Self {
        NeuralPolicy {
            vocab,
            window,
            hidden,
            params: vec![0.0; Self::param_count(&vocab, window, hidden)],
        }
    }

    pub fn from_params(vocab: Vocab, window: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(&vocab, window, hidden);
        if params.len() != expected {
            return Err(Error::input(format!(
                "neural policy with V={} k={window} h={hidden} needs {expected} parameters, got {}",
                vocab.size(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::input("neural parameters must be finite"));
        }
        Ok(NeuralPolicy {
            vocab,
            window,
            hidden,
            params,
        })
    }

    pub fn random<R: Rng + ?Sized>(vocab: Vocab, window: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let n = Self::param_count(&vocab, window, hidden);
        let params = (0..n).map(|_| scale * standard_normal(rng)).collect();
        NeuralPolicy {
            vocab,
            window,
            hidden,
            params,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn input_width(&self) -> usize {
        self.window * (self.vocab.size() + 1)
    }

    // Offsets into the flat parameter array.
    fn b1_offset(&self) -> usize {
        self.hidden * self.input_width()
    }
    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }
    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.vocab.size() * self.hidden
    }

    fn forward(&self, context: &[Token]) -> Forward {
        let width = self.input_width();
        let stride = self.vocab.size() + 1;
        let active: Vec<usize> = window_symbols(&self.vocab, context, self.window)
            .into_iter()
            .enumerate()
            .map(|(slot, sym)| slot * stride + sym)
            .collect();
        let b1 = self.b1_offset();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.params[j * width..(j + 1) * width];
                let pre = self.params[b1 + j] + active.iter().map(|&i| row[i]).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let w2 = self.w2_offset();
        let b2 = self.b2_offset();
        let logits = (0..self.vocab.size())
            .map(|o| {
                let row = &self.params[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                self.params[b2 + o] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Forward { active, hidden, logits }
    }
}

impl ConditionalPolicy for NeuralPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        log_softmax(&self.forward(context).logits)
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.window)
    }
}

impl ParametricPolicy for NeuralPolicy {
    fn window(&self) -> usize {
        self.window
    }

    fn logits(&self, context: &[Token]) -> Vec<f64> {
        self.forward(context).logits
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backprop_logits(&self, context: &[Token], upstream: &[f64], grad: &mut [f64]) {
        let fwd = self.forward(context);
        let h = self.hidden;
        let width = self.input_width();
        let (w2, b2, b1) = (self.w2_offset(), self.b2_offset(), self.b1_offset());

        let mut d_hidden = vec![0.0; h];
        for (o, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            grad[b2 + o] += u;
            let row = w2 + o * h;
            for j in 0..h {
                grad[row + j] += u * fwd.hidden[j];
                d_hidden[j] += u * self.params[row + j];
            }
        }
        for j in 0..h {
            let d_pre = d_hidden[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            grad[b1 + j] += d_pre;
            for &i in &fwd.active {
                grad[j * width + i] += d_pre;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{accumulate_logprob_grad, tokens};
    use crate::rng::rng_from_seed;

    #[test]
    fn parameter_count_is_fixed_by_dims() {
        let vocab = Vocab::new(4, 0).unwrap();
        // W1: 3 x 10, b1: 3, W2: 4 x 3, b2: 4
        assert_eq!(NeuralPolicy::param_count(&vocab, 2, 3), 30 + 3 + 12 + 4);
        assert!(NeuralPolicy::from_params(vocab, 2, 3, vec![0.0; 10]).is_err());
    }

    #[test]
    fn rows_normalize() {
        let vocab = Vocab::new(5, 4).unwrap();
        let p = NeuralPolicy::random(vocab, 2, 6, 1.5, &mut rng_from_seed(11));
        for ctx in [vec![], tokens(&[0]), tokens(&[3, 1, 2])] {
            let s: f64 = p.probs(&ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_gradient_is_onehot_minus_softmax_at_output_bias() {
        let vocab = Vocab::new(4, 0).unwrap();
        let p = NeuralPolicy::random(vocab, 1, 3, 0.7, &mut rng_from_seed(5));
        let ctx = tokens(&[2]);
        let mut grad = vec![0.0; p.num_params()];
        accumulate_logprob_grad(&p, &ctx, Token(1), 1.0, &mut grad);
        let probs = p.probs(&ctx);
        let b2 = p.b2_offset();
        for o in 0..4 {
            let expected = if o == 1 { 1.0 } else { 0.0 } - probs[o];
            assert!((grad[b2 + o] - expected).abs() < 1e-12);
        }
    }
}
