//! Randomized oracle suites: the mixture lower bound, value consistency of
//! prefix values, and analytic gradients against finite differences.

use rand::Rng;

use crate::credit::{
    token_credit, verify_reward_imitation, verify_value_consistency, DEFAULT_DELTA_GRID, IMITATION_TOL,
};
use crate::env::RewardTable;
use crate::error::{Error, Result};
use crate::numeric::format_float;
use crate::policy::{
    enumerate_responses, sample, NeuralPolicy, ParametricPolicy, SequenceDistribution, TabularPolicy, Token,
    Trajectory, Vocab,
};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::trainers::{annotate, dpo_loss, inverse_q_loss, LossAndGrad, PreferencePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lemma,
    Telescope,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Lemma, Suite::Telescope, Suite::Gradient];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Lemma => "lemma",
            Suite::Telescope => "telescope",
            Suite::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    /// Instances skipped because a precondition did not hold.
    pub skipped: usize,
    /// Worst observed error (negated margin for the lemma suite).
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let label = match self.suite {
            Suite::Lemma => "min_margin",
            Suite::Telescope => "max_discrepancy",
            Suite::Gradient => "max_rel_error",
        };
        let worst = if self.suite == Suite::Lemma {
            -self.worst
        } else {
            self.worst
        };
        format!(
            "suite={} instances={} checked={} skipped={} {}={} failures={} status={}",
            self.suite.as_str(),
            self.instances,
            self.instances - self.skipped,
            self.skipped,
            label,
            format_float(worst),
            self.failures.len(),
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

pub fn run_suite(suite: Suite, seed: u64, instances: usize) -> Result<SuiteReport> {
    match suite {
        Suite::Lemma => lemma_suite(seed, instances),
        Suite::Telescope => telescope_suite(seed, instances),
        Suite::Gradient => gradient_suite(seed, instances),
    }
}

pub fn default_instances(suite: Suite) -> usize {
    match suite {
        Suite::Lemma => 1000,
        Suite::Telescope => 200,
        Suite::Gradient => 50,
    }
}

/// Random tabular policy whose window covers the whole history, so its
/// sequence distribution is unrestricted.
fn full_history_policy<R: Rng>(vocab: Vocab, horizon: usize, prompt_len: usize, rng: &mut R) -> TabularPolicy {
    let scale = rng.gen_range(0.3..2.5);
    TabularPolicy::random(vocab, (prompt_len + horizon).max(1), scale, rng)
}

fn random_instance_shape<R: Rng>(rng: &mut R) -> Result<(Vocab, usize, Vec<Token>)> {
    let v = rng.gen_range(2..=4);
    let vocab = Vocab::new(v, rng.gen_range(0..v as u32))?;
    let horizon = rng.gen_range(1..=3);
    let prompt = vec![Token(rng.gen_range(0..v as u32))];
    Ok((vocab, horizon, prompt))
}

pub const LEMMA_BETA: f64 = 0.1;

/// Random policies and rewards in [0, 1]; pairs where the first policy is
/// not strictly better are skipped.
pub fn lemma_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Lemma,
        instances,
        skipped: 0,
        worst: f64::NEG_INFINITY,
        failures: Vec::new(),
    };
    for i in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, Stream::Instance, i as u64));
        let (vocab, horizon, prompt) = random_instance_shape(&mut rng)?;
        let [a, b, r] = [0, 1, 2].map(|_| full_history_policy(vocab, horizon, prompt.len(), &mut rng));
        let table = RewardTable(
            enumerate_responses(&vocab, horizon)
                .into_iter()
                .map(|y| (y, rng.gen::<f64>()))
                .collect(),
        );
        let dist = |p: &TabularPolicy| SequenceDistribution::from_policy(p, &prompt, horizon);
        match verify_reward_imitation(&dist(&a), &dist(&b), &dist(&r), &table, LEMMA_BETA, &DEFAULT_DELTA_GRID) {
            Ok(rep) => {
                report.worst = report.worst.max(-rep.min_margin());
                for row in rep.rows.iter().filter(|r| r.margin < -IMITATION_TOL) {
                    report.failures.push(format!(
                        "instance {i}: delta={} margin={}",
                        row.delta,
                        format_float(row.margin)
                    ));
                }
            }
            Err(Error::Precondition(_)) => report.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

pub const CONSISTENCY_TOL: f64 = 1e-9;

fn random_prefix<R: Rng>(vocab: Vocab, horizon: usize, rng: &mut R) -> Vec<Token> {
    let len = rng.gen_range(0..=horizon);
    let mut prefix = Vec::with_capacity(len);
    for _ in 0..len {
        let t = Token(rng.gen_range(0..vocab.size() as u32));
        prefix.push(t);
        if t == vocab.eos() {
            break;
        }
    }
    prefix
}

/// Exhaustive value-consistency check at one random prefix per instance,
/// plus credit telescoping on a sampled trajectory.
pub fn telescope_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Telescope,
        instances,
        skipped: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let beta_choices = [0.05, 0.1, 0.5, 1.0, 2.0];
    for i in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, Stream::Instance, i as u64));
        let (vocab, horizon, prompt) = random_instance_shape(&mut rng)?;
        let star = full_history_policy(vocab, horizon, prompt.len(), &mut rng);
        let reference = full_history_policy(vocab, horizon, prompt.len(), &mut rng);
        let beta = beta_choices[rng.gen_range(0..beta_choices.len())];
        let prefix = random_prefix(vocab, horizon, &mut rng);
        let lhs = crate::credit::prefix_value(&star, &reference, &prompt, &prefix, beta)?;
        let disc = verify_value_consistency(&star, &reference, &prompt, &prefix, beta, horizon)?;
        report.worst = report.worst.max(disc);
        let terminated = prefix.last() == Some(&vocab.eos()) || prefix.len() == horizon;
        if terminated && disc != 0.0 {
            report
                .failures
                .push(format!("instance {i}: terminated prefix has discrepancy {disc:e}"));
        } else if disc > CONSISTENCY_TOL * (1.0 + lhs.abs()) {
            report.failures.push(format!(
                "instance {i}: discrepancy {disc:e} at prefix length {}",
                prefix.len()
            ));
        }

        let traj: Trajectory = sample(&star, &prompt, horizon, rng.gen())?;
        let profile = token_credit(&star, &reference, &traj, beta)?;
        let total = crate::credit::prefix_value(&star, &reference, &prompt, &traj.response, beta)?;
        if (profile.total() - total).abs() > 1e-12 * (1.0 + total.abs()) {
            report.failures.push(format!("instance {i}: credits do not telescope"));
        }
        let terminal = verify_value_consistency(&star, &reference, &prompt, &traj.response, beta, horizon)?;
        if terminal != 0.0 {
            report.failures.push(format!(
                "instance {i}: terminated trajectory has discrepancy {terminal:e}"
            ));
        }
    }
    Ok(report)
}

pub const GRADIENT_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Worst per-coordinate relative error `|a - n| / max(|a|, |n|, 1e-6)` of an
/// analytic gradient against central differences.
pub fn gradient_check<P, F>(policy: &P, analytic: &[f64], loss: F) -> Result<f64>
where
    P: ParametricPolicy + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if analytic.len() != policy.num_params() {
        return Err(Error::input(format!(
            "gradient has {} entries, policy has {} parameters",
            analytic.len(),
            policy.num_params()
        )));
    }
    let mut probe = policy.clone();
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let base = probe.params()[j];
        probe.params_mut()[j] = base + FD_STEP;
        let up = loss(&probe)?;
        probe.params_mut()[j] = base - FD_STEP;
        let down = loss(&probe)?;
        probe.params_mut()[j] = base;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Inverse-Q and DPO losses on random small neural policies.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: Suite::Gradient,
        instances,
        skipped: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for i in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, Stream::Instance, i as u64));
        let v = rng.gen_range(2..=4);
        let vocab = Vocab::new(v, 0)?;
        let window = rng.gen_range(1..=2);
        let hidden = rng.gen_range(2..=5);
        let horizon = rng.gen_range(2..=4);
        let policy = NeuralPolicy::random(vocab, window, hidden, 0.7, &mut rng);
        let target = NeuralPolicy::random(vocab, window, hidden, 0.7, &mut rng);
        let reference = TabularPolicy::random(vocab, window, 1.0, &mut rng);
        let prompt = vec![Token(rng.gen_range(0..v as u32))];

        let batch: Vec<_> = (0..6)
            .map(|_| sample(&policy, &prompt, horizon, rng.gen()).map(|t| annotate(&target, t)))
            .collect::<Result<_>>()?;
        if batch.iter().all(|s| s.trajectory.is_empty()) {
            report.skipped += 1;
            continue;
        }
        let LossAndGrad { grad, .. } = inverse_q_loss(&policy, &batch)?;
        let iq = gradient_check(&policy, &grad, |p| inverse_q_loss(p, &batch).map(|l| l.loss))?;

        let beta = 0.5;
        let pairs: Vec<PreferencePair> = (0..4)
            .map(|_| {
                let a = sample(&reference, &prompt, horizon, rng.gen())?;
                let b = sample(&reference, &prompt, horizon, rng.gen())?;
                Ok(PreferencePair {
                    prompt: prompt.clone(),
                    chosen: a.response,
                    rejected: b.response,
                })
            })
            .collect::<Result<_>>()?;
        let LossAndGrad { grad, .. } = dpo_loss(&policy, &reference, &pairs, beta)?;
        let dpo = gradient_check(&policy, &grad, |p| {
            dpo_loss(p, &reference, &pairs, beta).map(|l| l.loss)
        })?;

        for (name, err) in [("inverse-q", iq), ("dpo", dpo)] {
            report.worst = report.worst.max(err);
            if err > GRADIENT_TOL {
                report
                    .failures
                    .push(format!("instance {i}: {name} relative error {err:e}"));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        for suite in Suite::ALL {
            let rep = run_suite(suite, 11, 20).unwrap();
            assert!(rep.passed(), "{}", rep.summary());
            assert!(rep.summary().contains("status=ok"));
        }
    }

    #[test]
    fn gradient_check_detects_a_wrong_gradient() {
        let vocab = Vocab::new(3, 0).unwrap();
        let p = TabularPolicy::random(vocab, 1, 1.0, &mut rng_from_seed(1));
        let loss = |q: &TabularPolicy| Ok(q.params().iter().map(|x| x * x).sum::<f64>());
        let right: Vec<f64> = p.params().iter().map(|x| 2.0 * x).collect();
        assert!(gradient_check(&p, &right, loss).unwrap() < 1e-6);
        let wrong: Vec<f64> = right.iter().map(|g| 1.1 * g).collect();
        assert!(gradient_check(&p, &wrong, loss).unwrap() > 1e-2);
    }
}
