//! Autoregressive token policies over a finite vocabulary.
//!
//! Two traits split the surface: [`ConditionalPolicy`] is anything that can
//! produce a next-token distribution for a history (trainable policies, the
//! contrastive estimate, conditionals of an enumerated distribution), and
//! [`ParametricPolicy`] adds a flat parameter vector plus backpropagation
//! through the logits.

mod neural;
mod sequence;
mod tabular;
mod trajectory;

pub use neural::NeuralPolicy;
pub use sequence::{enumerate_responses, mixture_sequence_distribution, PrefixConditionals, SequenceDistribution};
pub use tabular::TabularPolicy;
pub use trajectory::{sample, sample_with_rng, Termination, Trajectory};

use std::fmt;

use crate::error::{Error, Result};
use crate::numeric::{entropy_of, softmax};

/// A token id. Valid ids for a vocabulary of size `V` are `0..V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience for building token lists from raw ids.
pub fn tokens(ids: &[u32]) -> Vec<Token> {
    ids.iter().copied().map(Token).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::input(format!("vocab size must be >= 2, got {size}")));
        }
        if eos as usize >= size {
            return Err(Error::input(format!("eos {eos} outside vocab of size {size}")));
        }
        Ok(Vocab { size, eos: Token(eos) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    /// Padding symbol used only inside context encodings; equals `size`.
    pub fn start_symbol(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.size
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::input(format!(
                "token {} out of range for vocab of size {}",
                token.0, self.size
            )))
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.size as u32).map(Token)
    }
}

/// The last `window` symbols of `context`, left-padded with the start symbol.
pub(crate) fn window_symbols(vocab: &Vocab, context: &[Token], window: usize) -> Vec<usize> {
    let mut symbols = vec![vocab.start_symbol(); window];
    let take = context.len().min(window);
    for (slot, tok) in symbols[window - take..]
        .iter_mut()
        .zip(&context[context.len() - take..])
    {
        *slot = tok.index();
    }
    symbols
}

/// A next-token distribution conditioned on the full history (prompt + response so far).
pub trait ConditionalPolicy {
    fn vocab(&self) -> Vocab;

    /// Log-probabilities over the vocabulary, floored at `ln(1e-300)`.
    fn log_probs(&self, context: &[Token]) -> Vec<f64>;

    /// Number of trailing tokens the distribution depends on; `None` means the full history.
    fn context_window(&self) -> Option<usize> {
        None
    }

    fn probs(&self, context: &[Token]) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    fn logprob(&self, context: &[Token], token: Token) -> Result<f64> {
        self.vocab().check(token)?;
        Ok(self.log_probs(context)[token.index()])
    }

    fn entropy(&self, context: &[Token]) -> f64 {
        entropy_of(&self.probs(context))
    }

    /// Chain-rule log-probability of `response` given `prompt`; an empty response gives 0.
    fn sequence_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let vocab = self.vocab();
        let mut history = prompt.to_vec();
        let mut total = 0.0;
        for &tok in response {
            vocab.check(tok)?;
            total += self.log_probs(&history)[tok.index()];
            history.push(tok);
        }
        Ok(total)
    }
}

impl<T: ConditionalPolicy + ?Sized> ConditionalPolicy for &T {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        (**self).log_probs(context)
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
}

/// A policy with a flat parameter vector whose logits can be differentiated.
pub trait ParametricPolicy: ConditionalPolicy {
    fn window(&self) -> usize;

    fn logits(&self, context: &[Token]) -> Vec<f64>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Accumulates into `grad` the gradient of `sum_j upstream[j] * logit_j(context)`.
    fn backprop_logits(&self, context: &[Token], upstream: &[f64], grad: &mut [f64]);

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Adds `scale * d log pi(token | context) / d theta` into `grad`.
pub fn accumulate_logprob_grad<P: ParametricPolicy + ?Sized>(
    policy: &P,
    context: &[Token],
    token: Token,
    scale: f64,
    grad: &mut [f64],
) {
    let probs = softmax(&policy.logits(context));
    let upstream: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| scale * (f64::from(u8::from(j == token.index())) - p))
        .collect();
    policy.backprop_logits(context, &upstream, grad);
}

/// Gradient of `sequence_logprob` with respect to the parameters.
pub fn grad_sequence_logprob<P: ParametricPolicy + ?Sized>(
    policy: &P,
    prompt: &[Token],
    response: &[Token],
) -> Result<Vec<f64>> {
    let vocab = policy.vocab();
    let mut grad = vec![0.0; policy.num_params()];
    let mut history = prompt.to_vec();
    for &tok in response {
        vocab.check(tok)?;
        accumulate_logprob_grad(policy, &history, tok, 1.0, &mut grad);
        history.push(tok);
    }
    Ok(grad)
}

/// Either policy variant; this is what checkpoints load into.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

impl From<TabularPolicy> for AnyPolicy {
    fn from(p: TabularPolicy) -> Self {
        AnyPolicy::Tabular(p)
    }
}

impl From<NeuralPolicy> for AnyPolicy {
    fn from(p: NeuralPolicy) -> Self {
        AnyPolicy::Neural(p)
    }
}

impl ConditionalPolicy for AnyPolicy {
    fn vocab(&self) -> Vocab {
        match self {
            AnyPolicy::Tabular(p) => p.vocab(),
            AnyPolicy::Neural(p) => p.vocab(),
        }
    }

    fn log_probs(&self, context: &[Token]) -> Vec<f64> {
        match self {
            AnyPolicy::Tabular(p) => p.log_probs(context),
            AnyPolicy::Neural(p) => p.log_probs(context),
        }
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.window())
    }
}

impl ParametricPolicy for AnyPolicy {
    fn window(&self) -> usize {
        match self {
            AnyPolicy::Tabular(p) => p.window(),
            AnyPolicy::Neural(p) => p.window(),
        }
    }

    fn logits(&self, context: &[Token]) -> Vec<f64> {
        match self {
            AnyPolicy::Tabular(p) => p.logits(context),
            AnyPolicy::Neural(p) => p.logits(context),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            AnyPolicy::Tabular(p) => p.params(),
            AnyPolicy::Neural(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            AnyPolicy::Tabular(p) => p.params_mut(),
            AnyPolicy::Neural(p) => p.params_mut(),
        }
    }

    fn backprop_logits(&self, context: &[Token], upstream: &[f64], grad: &mut [f64]) {
        match self {
            AnyPolicy::Tabular(p) => p.backprop_logits(context, upstream, grad),
            AnyPolicy::Neural(p) => p.backprop_logits(context, upstream, grad),
        }
    }
}
