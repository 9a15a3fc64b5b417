use rand::Rng;

use super::{ConditionalPolicy, Token};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Still a prefix; more tokens may follow.
    Open,
    /// Last response token is eos.
    Eos,
    /// Forced stop at the horizon without emitting eos.
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub termination: Termination,
    /// Per-token log-probabilities under the generating policy.
    pub logprobs: Option<Vec<f64>>,
}

impl Trajectory {
    /// Builds a trajectory, classifying termination from `eos` and `horizon`.
    pub fn new(prompt: Vec<Token>, response: Vec<Token>, eos: Token, horizon: usize) -> Result<Self> {
        if response.len() > horizon {
            return Err(Error::input(format!(
                "response length {} exceeds horizon {horizon}",
                response.len()
            )));
        }
        if let Some(pos) = response.iter().position(|&t| t == eos) {
            if pos + 1 != response.len() {
                return Err(Error::input("eos may only appear as the final response token"));
            }
        }
        let termination = if response.last() == Some(&eos) {
            Termination::Eos
        } else if response.len() == horizon {
            Termination::Horizon
        } else {
            Termination::Open
        };
        Ok(Trajectory {
            prompt,
            response,
            termination,
            logprobs: None,
        })
    }

    pub fn is_terminated(&self) -> bool {
        self.termination != Termination::Open
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Prompt followed by the first `t` response tokens: the state before emitting token `t`.
    pub fn context_at(&self, t: usize) -> Vec<Token> {
        let mut ctx = self.prompt.clone();
        ctx.extend_from_slice(&self.response[..t]);
        ctx
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_with_rng<P, R>(policy: &P, prompt: &[Token], horizon: usize, rng: &mut R) -> Trajectory
where
    P: ConditionalPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let eos = policy.vocab().eos();
    let mut history = prompt.to_vec();
    let mut response = Vec::with_capacity(horizon);
    let mut logprobs = Vec::with_capacity(horizon);
    let mut termination = Termination::Horizon;
    while response.len() < horizon {
        let lp = policy.log_probs(&history);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let tok = Token(draw(&probs, rng) as u32);
        response.push(tok);
        logprobs.push(lp[tok.index()]);
        history.push(tok);
        if tok == eos {
            termination = Termination::Eos;
            break;
        }
    }
    Trajectory {
        prompt: prompt.to_vec(),
        response,
        termination,
        logprobs: Some(logprobs),
    }
}

/// Samples a terminated trajectory; `horizon` must be at least 1.
pub fn sample<P: ConditionalPolicy + ?Sized>(
    policy: &P,
    prompt: &[Token],
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::input("horizon must be >= 1"));
    }
    Ok(sample_with_rng(policy, prompt, horizon, &mut rng_from_seed(seed)))
}
