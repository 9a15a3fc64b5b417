//! Evaluation: oracle-judged win rates, Elo, smoothing, alpha sweeps and
//! standardized reward-increment curves.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::env::{PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::numeric::format_float;
use crate::policy::{sample, ConditionalPolicy, ParametricPolicy};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::trainers::{inverse_q_train_contrastive, MetricsRow, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    fn rate(&self, count: usize) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            count as f64 / self.total() as f64
        }
    }

    pub fn win_rate(&self) -> f64 {
        self.rate(self.wins)
    }

    pub fn lose_rate(&self) -> f64 {
        self.rate(self.losses)
    }

    pub fn tie_rate(&self) -> f64 {
        self.rate(self.ties)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRate {
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
    pub n: usize,
    /// Breakdown by prompt label, for labeled prompt sets.
    pub by_label: BTreeMap<String, Tally>,
}

impl WinRate {
    pub fn net(&self) -> f64 {
        self.win - self.lose
    }
}

/// One response from each policy per prompt instance; the higher terminal reward wins.
pub fn winrate<A, B>(
    policy_a: &A,
    policy_b: &B,
    prompts: &PromptSet,
    spec: &RewardSpec,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<WinRate>
where
    A: ConditionalPolicy + ?Sized,
    B: ConditionalPolicy + ?Sized,
{
    if n == 0 {
        return Err(Error::input("win rate needs n >= 1"));
    }
    let mut overall = Tally::default();
    let mut by_label: BTreeMap<String, Tally> = BTreeMap::new();
    for i in 0..n {
        let prompt = prompts.cycle(i);
        let a = sample(
            policy_a,
            &prompt.tokens,
            horizon,
            derive_seed(seed, Stream::EvalWinrateA, i as u64),
        )?;
        let b = sample(
            policy_b,
            &prompt.tokens,
            horizon,
            derive_seed(seed, Stream::EvalWinrateB, i as u64),
        )?;
        let (ra, rb) = (spec.terminal_reward(&a)?, spec.terminal_reward(&b)?);
        let record = |t: &mut Tally| {
            if ra > rb {
                t.wins += 1;
            } else if rb > ra {
                t.losses += 1;
            } else {
                t.ties += 1;
            }
        };
        record(&mut overall);
        if let Some(label) = &prompt.label {
            record(by_label.entry(label.clone()).or_default());
        }
    }
    Ok(WinRate {
        win: overall.win_rate(),
        lose: overall.lose_rate(),
        tie: overall.tie_rate(),
        n,
        by_label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    AWins,
    BWins,
    Tie,
}

impl Outcome {
    fn score_a(self) -> f64 {
        match self {
            Outcome::AWins => 1.0,
            Outcome::BWins => 0.0,
            Outcome::Tie => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub player_a: String,
    pub player_b: String,
    pub outcome: Outcome,
}

impl MatchRecord {
    pub fn new(player_a: impl Into<String>, player_b: impl Into<String>, outcome: Outcome) -> Result<Self> {
        let (player_a, player_b) = (player_a.into(), player_b.into());
        if player_a == player_b {
            return Err(Error::input(format!("player `{player_a}` cannot play itself")));
        }
        Ok(MatchRecord {
            player_a,
            player_b,
            outcome,
        })
    }
}

pub const INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_K: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RatingTable {
    ratings: BTreeMap<String, f64>,
    k: f64,
}

impl RatingTable {
    pub fn new<S: AsRef<str>>(players: &[S], k: f64) -> Self {
        RatingTable {
            ratings: players
                .iter()
                .map(|p| (p.as_ref().to_string(), INITIAL_RATING))
                .collect(),
            k,
        }
    }

    pub fn rating(&self, player: &str) -> Option<f64> {
        self.ratings.get(player).copied()
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }

    pub fn expected_score(rating_a: f64, rating_b: f64) -> f64 {
        1.0 / (1.0 + 10f64.powf((rating_b - rating_a) / 400.0))
    }

    /// One standard Elo update; unseen players enter at the initial rating.
    pub fn apply(&mut self, record: &MatchRecord) {
        let ra = *self.ratings.entry(record.player_a.clone()).or_insert(INITIAL_RATING);
        let rb = *self.ratings.entry(record.player_b.clone()).or_insert(INITIAL_RATING);
        let delta = self.k * (record.outcome.score_a() - Self::expected_score(ra, rb));
        *self.ratings.get_mut(&record.player_a).unwrap() = ra + delta;
        *self.ratings.get_mut(&record.player_b).unwrap() = rb - delta;
    }

    /// Ratings sorted descending (ties broken by id).
    pub fn sorted(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self.ratings.iter().map(|(k, v)| (k.clone(), *v)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,rating\n");
        for (id, r) in self.sorted() {
            out.push_str(&format!("{id},{}\n", format_float(r)));
        }
        out
    }
}

/// Sequential Elo over `matches`, plus every player's rating after each match.
pub fn elo<S: AsRef<str>>(players: &[S], matches: &[MatchRecord], k: f64) -> (RatingTable, BTreeMap<String, Vec<f64>>) {
    let mut table = RatingTable::new(players, k);
    let mut trajectories: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in matches {
        table.apply(m);
        for (id, r) in &table.ratings {
            trajectories.entry(id.clone()).or_default().push(*r);
        }
    }
    (table, trajectories)
}

/// Every unordered pair once per pass, the whole list shuffled by `seed`.
pub fn round_robin_schedule(players: usize, passes: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut schedule = Vec::new();
    for _ in 0..passes {
        for a in 0..players {
            for b in a + 1..players {
                schedule.push((a, b));
            }
        }
    }
    schedule.shuffle(&mut rng_from_seed(derive_seed(seed, Stream::Schedule, 0)));
    schedule
}

/// Plays the schedule with one oracle-judged response per side per match.
pub fn play_matches(
    players: &[(String, &dyn ConditionalPolicy)],
    schedule: &[(usize, usize)],
    prompts: &PromptSet,
    spec: &RewardSpec,
    horizon: usize,
    seed: u64,
) -> Result<Vec<MatchRecord>> {
    schedule
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let prompt = &prompts.cycle(i).tokens;
            let ya = sample(
                players[a].1,
                prompt,
                horizon,
                derive_seed(seed, Stream::EvalWinrateA, i as u64),
            )?;
            let yb = sample(
                players[b].1,
                prompt,
                horizon,
                derive_seed(seed, Stream::EvalWinrateB, i as u64),
            )?;
            let (ra, rb) = (spec.terminal_reward(&ya)?, spec.terminal_reward(&yb)?);
            let outcome = if ra > rb {
                Outcome::AWins
            } else if rb > ra {
                Outcome::BWins
            } else {
                Outcome::Tie
            };
            MatchRecord::new(players[a].0.clone(), players[b].0.clone(), outcome)
        })
        .collect()
}

pub const DEFAULT_SIGMA: f64 = 10.0;

/// Discrete Gaussian smoothing with the kernel renormalized over the taps
/// that fall inside the series.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::input("cannot smooth an empty series"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::input(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(series.to_vec());
    }
    let n = series.len();
    let weights: Vec<f64> = (0..n)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    Ok((0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (j, x) in series.iter().enumerate() {
                let w = weights[i.abs_diff(j)];
                acc += w * x;
                norm += w;
            }
            acc / norm
        })
        .collect())
}

/// `from, from + step, ..., to` with accumulated rounding removed.
pub fn alpha_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || to < from {
        return Err(Error::input("alpha grid needs step > 0 and to >= from"));
    }
    let count = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub const DEFAULT_ALPHA_GRID: [f64; 6] = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    /// Win rate of the trained policy against the initial policy, or the trainer's error.
    pub result: std::result::Result<SweepResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
    pub final_reward: f64,
}

impl SweepResult {
    pub fn net(&self) -> f64 {
        self.win - self.lose
    }
}

/// One full Inverse-Q* run per alpha with identical seeds.
pub fn alpha_sweep<P, W, L>(
    base: &TrainConfig,
    spec: &RewardSpec,
    prompts: &PromptSet,
    pi_w: &W,
    pi_l: &L,
    pi_init: &P,
    grid: &[f64],
) -> Result<Vec<SweepRow>>
where
    P: ParametricPolicy + Clone,
    W: ConditionalPolicy,
    L: ConditionalPolicy,
{
    if grid.is_empty() {
        return Err(Error::input("alpha grid is empty"));
    }
    Ok(grid
        .iter()
        .map(|&alpha| {
            let cfg = TrainConfig { alpha, ..base.clone() };
            let result = inverse_q_train_contrastive(&cfg, spec, prompts, pi_w, pi_l, pi_init.clone())
                .and_then(|out| {
                    let wr = winrate(
                        &out.policy,
                        pi_init,
                        prompts,
                        spec,
                        cfg.horizon,
                        cfg.winrate_samples,
                        derive_seed(cfg.seed, Stream::HeldOut, 1),
                    )?;
                    Ok(SweepResult {
                        win: wr.win,
                        lose: wr.lose,
                        tie: wr.tie,
                        final_reward: out.metrics.last().map(|m| m.mean_oracle_reward).unwrap_or(f64::NAN),
                    })
                })
                .map_err(|e| e.to_string());
            SweepRow { alpha, result }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,win,lose,tie,win_minus_lose,final_reward,error\n");
    for row in rows {
        match &row.result {
            Ok(r) => out.push_str(&format!(
                "{},{},{},{},{},{},\n",
                format_float(row.alpha),
                format_float(r.win),
                format_float(r.lose),
                format_float(r.tie),
                format_float(r.net()),
                format_float(r.final_reward)
            )),
            Err(e) => out.push_str(&format!("{},,,,,,{}\n", format_float(row.alpha), e.replace(',', ";"))),
        }
    }
    out
}

/// `(reward[e] - reward[0]) / std_e(reward)` per method; all zeros when the
/// standard deviation is below 1e-12.
pub fn reward_increment_curve(metrics: &[&[MetricsRow]]) -> Result<Vec<Vec<f64>>> {
    metrics
        .iter()
        .map(|rows| {
            if rows.is_empty() {
                return Err(Error::input("empty metrics list"));
            }
            let rewards: Vec<f64> = rows.iter().map(|r| r.mean_oracle_reward).collect();
            Ok(standardized_increments(&rewards))
        })
        .collect()
}

pub fn standardized_increments(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - rewards[0]) / std).collect()
}

/// First epoch at which curve `a` moves strictly above curve `b` after being at or below it.
pub fn crossing_epoch(a: &[f64], b: &[f64]) -> Option<usize> {
    (1..a.len().min(b.len())).find(|&e| a[e - 1] <= b[e - 1] && a[e] > b[e])
}

pub fn curves_csv(names: &[&str], curves: &[Vec<f64>]) -> String {
    let mut out = String::from("epoch");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    for e in 0..len {
        out.push_str(&e.to_string());
        for c in curves {
            out.push(',');
            if let Some(v) = c.get(e) {
                out.push_str(&format_float(*v));
            }
        }
        out.push('\n');
    }
    out
}
