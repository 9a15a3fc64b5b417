//! Token-level credit assignment from an estimated optimal policy, and the
//! numerical checks for value consistency and reward imitation.

use rand::Rng;

use crate::env::{exact_value, ResponseReward};
use crate::error::{Error, Result};
use crate::numeric::LOG_FLOOR;
use crate::policy::{
    mixture_sequence_distribution, sample_with_rng, ConditionalPolicy, SequenceDistribution, Token, Trajectory,
};

/// Per-token credits `c_t` and running prefix values `V_t = sum_{i<=t} c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditProfile {
    pub tokens: Vec<Token>,
    pub credits: Vec<f64>,
    pub prefix_values: Vec<f64>,
    pub beta: f64,
}

impl CreditProfile {
    pub fn total(&self) -> f64 {
        self.prefix_values.last().copied().unwrap_or(0.0)
    }

    /// Position of the largest credit, if any.
    pub fn argmax(&self) -> Option<usize> {
        self.credits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

fn log_ratios<S, R>(pi_star: &S, pi_ref: &R, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    let vocab = pi_star.vocab();
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(response.len());
    for &tok in response {
        vocab.check(tok)?;
        let ls = pi_star.log_probs(&ctx)[tok.index()];
        let lr = pi_ref.log_probs(&ctx)[tok.index()];
        out.push(ls - lr);
        ctx.push(tok);
    }
    Ok(out)
}

/// `beta * sum_i log(pi*(y_i | y_<i) / pi_ref(y_i | y_<i))` over the prefix.
pub fn prefix_value<S, R>(pi_star: &S, pi_ref: &R, prompt: &[Token], prefix: &[Token], beta: f64) -> Result<f64>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    Ok(beta * log_ratios(pi_star, pi_ref, prompt, prefix)?.iter().sum::<f64>())
}

pub fn token_credit<S, R>(pi_star: &S, pi_ref: &R, trajectory: &Trajectory, beta: f64) -> Result<CreditProfile>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    let credits: Vec<f64> = log_ratios(pi_star, pi_ref, &trajectory.prompt, &trajectory.response)?
        .into_iter()
        .map(|r| beta * r)
        .collect();
    let prefix_values = credits
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    Ok(CreditProfile {
        tokens: trajectory.response.clone(),
        credits,
        prefix_values,
        beta,
    })
}

fn is_terminated_prefix(prefix: &[Token], eos: Token, horizon: usize) -> bool {
    prefix.last() == Some(&eos) || prefix.len() >= horizon
}

/// `|V(prefix) - beta * log E_{pi_ref}[exp(V(full) / beta)]`, the expectation
/// taken exactly over every continuation of `prefix`.
pub fn verify_value_consistency<S, R>(
    pi_star: &S,
    pi_ref: &R,
    prompt: &[Token],
    prefix: &[Token],
    beta: f64,
    horizon: usize,
) -> Result<f64>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    let vocab = pi_star.vocab();
    if prefix.len() > horizon {
        return Err(Error::input("prefix longer than horizon"));
    }
    if let Some(pos) = prefix.iter().position(|&t| t == vocab.eos()) {
        if pos + 1 != prefix.len() {
            return Err(Error::input("eos inside prefix"));
        }
    }
    let lhs = prefix_value(pi_star, pi_ref, prompt, prefix, beta)?;

    // (log pi_ref weight of continuation, value of completed sequence)
    let mut leaves: Vec<(f64, f64)> = Vec::new();
    if is_terminated_prefix(prefix, vocab.eos(), horizon) {
        leaves.push((0.0, lhs));
    } else {
        let mut ctx = prompt.to_vec();
        ctx.extend_from_slice(prefix);
        let ctx_len = prompt.len() + prefix.len();
        continuations(
            pi_star,
            pi_ref,
            &mut ctx,
            ctx_len,
            prefix.len(),
            horizon,
            0.0,
            0.0,
            &mut leaves,
        )?;
        for leaf in &mut leaves {
            leaf.1 = lhs + beta * leaf.1;
        }
    }

    let max_value = leaves.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = leaves.iter().map(|&(lw, v)| (lw + (v - max_value) / beta).exp()).sum();
    let rhs = max_value + beta * sum.ln();
    Ok((lhs - rhs).abs())
}

#[allow(clippy::too_many_arguments)]
fn continuations<S, R>(
    pi_star: &S,
    pi_ref: &R,
    ctx: &mut Vec<Token>,
    base_len: usize,
    prefix_len: usize,
    horizon: usize,
    log_weight: f64,
    log_ratio: f64,
    leaves: &mut Vec<(f64, f64)>,
) -> Result<()>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
{
    let vocab = pi_star.vocab();
    let ls = pi_star.log_probs(ctx);
    let lr = pi_ref.log_probs(ctx);
    for tok in vocab.tokens() {
        let (s, r) = (ls[tok.index()], lr[tok.index()]);
        if r <= LOG_FLOOR {
            if s > LOG_FLOOR {
                return Err(Error::Domain(format!(
                    "pi* puts mass on token {tok} where pi_ref has none"
                )));
            }
            continue;
        }
        ctx.push(tok);
        let generated = prefix_len + ctx.len() - base_len;
        if tok == vocab.eos() || generated >= horizon {
            leaves.push((log_weight + r, log_ratio + (s - r)));
        } else {
            continuations(
                pi_star,
                pi_ref,
                ctx,
                base_len,
                prefix_len,
                horizon,
                log_weight + r,
                log_ratio + (s - r),
                leaves,
            )?;
        }
        ctx.pop();
    }
    Ok(())
}

/// The same right-hand side estimated from `n` continuations sampled from `pi_ref`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_value_discrepancy<S, R, G>(
    pi_star: &S,
    pi_ref: &R,
    prompt: &[Token],
    prefix: &[Token],
    beta: f64,
    horizon: usize,
    n: usize,
    rng: &mut G,
) -> Result<f64>
where
    S: ConditionalPolicy + ?Sized,
    R: ConditionalPolicy + ?Sized,
    G: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::input("need at least one sample"));
    }
    let vocab = pi_star.vocab();
    let lhs = prefix_value(pi_star, pi_ref, prompt, prefix, beta)?;
    if is_terminated_prefix(prefix, vocab.eos(), horizon) {
        return Ok(0.0);
    }
    let mut history = prompt.to_vec();
    history.extend_from_slice(prefix);
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let cont = sample_with_rng(pi_ref, &history, horizon - prefix.len(), rng);
            prefix_value(pi_star, pi_ref, &history, &cont.response, beta).map(|v| lhs + v)
        })
        .collect::<Result<_>>()?;
    let max_value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().map(|v| ((v - max_value) / beta).exp()).sum::<f64>() / n as f64;
    Ok((lhs - (max_value + beta * mean.ln())).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationRow {
    pub delta: f64,
    pub mixture_value: f64,
    /// `V(pi_b) + delta * (V(pi_a) - V(pi_b))`.
    pub lower_bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationReport {
    pub value_a: f64,
    pub value_b: f64,
    pub rows: Vec<ImitationRow>,
}

pub const IMITATION_TOL: f64 = 1e-9;
pub const DEFAULT_DELTA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

impl ImitationReport {
    pub fn min_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.margin >= -IMITATION_TOL)
    }

    /// Whether every interior mixture is strictly better than `pi_b`.
    pub fn strictly_improves(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| r.delta > 0.0)
            .all(|r| r.mixture_value > self.value_b)
    }
}

/// Checks that mixing toward a superior trajectory distribution never lowers
/// the KL-regularized value below the linear interpolation.
pub fn verify_reward_imitation(
    dist_a: &SequenceDistribution,
    dist_b: &SequenceDistribution,
    dist_ref: &SequenceDistribution,
    reward: &dyn ResponseReward,
    beta: f64,
    delta_grid: &[f64],
) -> Result<ImitationReport> {
    let value_a = exact_value(dist_a, dist_ref, reward, beta)?;
    let value_b = exact_value(dist_b, dist_ref, reward, beta)?;
    if !(value_a > value_b) {
        return Err(Error::Precondition(format!(
            "pi_a is not superior: V(pi_a) = {value_a}, V(pi_b) = {value_b}"
        )));
    }
    let rows = delta_grid
        .iter()
        .map(|&delta| {
            let mix = mixture_sequence_distribution(dist_a, dist_b, delta)?;
            let mixture_value = exact_value(&mix, dist_ref, reward, beta)?;
            let lower_bound = value_b + delta * (value_a - value_b);
            Ok(ImitationRow {
                delta,
                mixture_value,
                lower_bound,
                margin: mixture_value - lower_bound,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImitationReport { value_a, value_b, rows })
}
