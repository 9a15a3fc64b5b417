//! Experiment runners behind the command-line tool. Each writes its
//! artifacts under an output directory together with `effective-config.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::PatternBenchmark;
use crate::checkpoint;
use crate::config::{EnvKind, PolicyInit, PolicyKind, RunConfig};
use crate::credit::{token_credit, CreditProfile};
use crate::env::{Prompt, PromptSet, RewardSpec};
use crate::error::{Error, Result};
use crate::estimator::ContrastivePolicy;
use crate::eval::{
    alpha_sweep, crossing_epoch, curves_csv, elo, gaussian_smooth, play_matches, reward_increment_curve,
    round_robin_schedule, sweep_csv, RatingTable, SweepRow, WinRate,
};
use crate::numeric::format_float;
use crate::policy::{AnyPolicy, ConditionalPolicy, NeuralPolicy, TabularPolicy, Token, Trajectory, Vocab};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::trainers::{dpo_train, inverse_q_train_contrastive, ppo_train, Method, MetricsRow, TrainOutcome};

pub const EFFECTIVE_CONFIG: &str = "effective-config.txt";
pub const METRICS: &str = "metrics.jsonl";

/// Everything a run needs, resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub vocab: Vocab,
    pub spec: RewardSpec,
    pub prompts: PromptSet,
    pub pi_w: AnyPolicy,
    /// Weak policy: reference for the KL term and default starting point.
    pub pi_l: AnyPolicy,
    pub init: AnyPolicy,
}

fn load_matching(path: &Path, vocab: Vocab, key: &str) -> Result<AnyPolicy> {
    let p = checkpoint::load(path)?;
    if p.vocab() != vocab {
        return Err(Error::config(
            key,
            format!("checkpoint {} has a different vocabulary", path.display()),
        ));
    }
    Ok(p)
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    let vocab = Vocab::new(cfg.vocab_size, cfg.eos).map_err(|e| Error::config("env.vocab", e.to_string()))?;
    let prompts = PromptSet::new(
        &vocab,
        cfg.train.horizon,
        cfg.prompts
            .iter()
            .map(|p| Prompt {
                tokens: p.tokens.iter().map(|&t| Token(t)).collect(),
                label: p.label.clone(),
            })
            .collect(),
    )
    .map_err(|e| Error::config("prompts", e.to_string()))?;
    let spec = match cfg.env_kind {
        EnvKind::Pattern => RewardSpec::pattern(&vocab, cfg.pattern.iter().map(|&t| Token(t)).collect())?,
        EnvKind::Count => RewardSpec::Count {
            token: Token(cfg.count_token),
        },
        EnvKind::Constant => RewardSpec::Constant { value: cfg.constant },
        EnvKind::Likelihood => {
            let path = cfg
                .target_ckpt
                .as_ref()
                .ok_or_else(|| Error::config("env.target_ckpt", "missing"))?;
            RewardSpec::Likelihood {
                target: Box::new(load_matching(path, vocab, "env.target_ckpt")?),
            }
        }
    };
    let (pi_w, pi_l) = match (&cfg.pi_w_ckpt, &cfg.pi_l_ckpt) {
        (Some(w), Some(l)) => (
            load_matching(w, vocab, "contrast.pi_w_ckpt")?,
            load_matching(l, vocab, "contrast.pi_l_ckpt")?,
        ),
        (None, None) => {
            let b = PatternBenchmark::build(&cfg.bench_params(), cfg.bench_seed)?;
            (b.pi_w.into(), b.pi_l.into())
        }
        (Some(_), None) => {
            return Err(Error::config(
                "contrast.pi_l_ckpt",
                "must be set together with contrast.pi_w_ckpt",
            ))
        }
        (None, Some(_)) => {
            return Err(Error::config(
                "contrast.pi_w_ckpt",
                "must be set together with contrast.pi_l_ckpt",
            ))
        }
    };
    let init = match cfg.policy_init {
        PolicyInit::Weak => pi_l.clone(),
        PolicyInit::Random => {
            let mut rng = rng_from_seed(derive_seed(cfg.train.seed, Stream::Init, 0));
            match cfg.policy_kind {
                PolicyKind::Tabular => {
                    TabularPolicy::random(vocab, cfg.policy_window, cfg.policy_init_scale, &mut rng).into()
                }
                PolicyKind::Neural => NeuralPolicy::random(
                    vocab,
                    cfg.policy_window,
                    cfg.policy_hidden,
                    cfg.policy_init_scale,
                    &mut rng,
                )
                .into(),
            }
        }
    };
    Ok(Setup {
        vocab,
        spec,
        prompts,
        pi_w,
        pi_l,
        init,
    })
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(EFFECTIVE_CONFIG), cfg.to_text())?;
    Ok(())
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch}.ckpt"))
}

pub fn metrics_text(rows: &[MetricsRow]) -> String {
    rows.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::from_json_line)
        .collect()
}

/// Trains with `cfg.train.method`, writing metrics and one checkpoint per epoch.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome<AnyPolicy>> {
    let s = setup(cfg)?;
    prepare_out(cfg, out)?;
    let t = &cfg.train;
    let outcome = match t.method {
        Method::InverseQ => inverse_q_train_contrastive(t, &s.spec, &s.prompts, &s.pi_w, &s.pi_l, s.init.clone())?,
        Method::Ppo => ppo_train(t, &s.spec, &s.prompts, &s.pi_l, s.init.clone())?,
        Method::Dpo => dpo_train(t, &s.spec, &s.prompts, &s.pi_l, s.init.clone())?,
    };
    fs::write(out.join(METRICS), metrics_text(&outcome.metrics))?;
    for (epoch, p) in outcome.checkpoints.iter().enumerate() {
        checkpoint::save(p, &checkpoint_path(out, epoch))?;
    }
    Ok(outcome)
}

pub fn run_sweep(cfg: &RunConfig, grid: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    let s = setup(cfg)?;
    prepare_out(cfg, out)?;
    let rows = alpha_sweep(&cfg.train, &s.spec, &s.prompts, &s.pi_w, &s.pi_l, &s.init, grid)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

fn winrate_csv(wr: &WinRate) -> String {
    let mut out = String::from("label,win,lose,tie,n\n");
    out.push_str(&format!(
        "all,{},{},{},{}\n",
        format_float(wr.win),
        format_float(wr.lose),
        format_float(wr.tie),
        wr.n
    ));
    for (label, t) in &wr.by_label {
        out.push_str(&format!(
            "{label},{},{},{},{}\n",
            format_float(t.win_rate()),
            format_float(t.lose_rate()),
            format_float(t.tie_rate()),
            t.total()
        ));
    }
    out
}

/// Win rate of policy `a` against `b` (defaults: the strong and weak policies).
pub fn run_winrate(cfg: &RunConfig, a: Option<&Path>, b: Option<&Path>, out: &Path) -> Result<WinRate> {
    let s = setup(cfg)?;
    let load = |p: Option<&Path>, fallback: &AnyPolicy| match p {
        Some(p) => load_matching(p, s.vocab, "checkpoint"),
        None => Ok(fallback.clone()),
    };
    let (pa, pb) = (load(a, &s.pi_w)?, load(b, &s.pi_l)?);
    prepare_out(cfg, out)?;
    let wr = crate::eval::winrate(
        &pa,
        &pb,
        &s.prompts,
        &s.spec,
        cfg.train.horizon,
        cfg.train.winrate_samples,
        derive_seed(cfg.train.seed, Stream::HeldOut, 2),
    )?;
    fs::write(out.join("winrate.csv"), winrate_csv(&wr))?;
    Ok(wr)
}

/// Round-robin Elo among named checkpoints; with none given, among the weak,
/// strong and contrastive policies. Also writes the smoothed rating trajectories.
pub fn run_elo(cfg: &RunConfig, players: &[(String, PathBuf)], out: &Path) -> Result<RatingTable> {
    let s = setup(cfg)?;
    let loaded: Vec<(String, AnyPolicy)> = players
        .iter()
        .map(|(name, path)| load_matching(path, s.vocab, "checkpoint").map(|p| (name.clone(), p)))
        .collect::<Result<_>>()?;
    let contrast = ContrastivePolicy::new(&s.pi_w, &s.pi_l, cfg.train.alpha)?;
    let roster: Vec<(String, &dyn ConditionalPolicy)> = if loaded.is_empty() {
        vec![
            ("weak".to_string(), &s.pi_l as &dyn ConditionalPolicy),
            ("strong".to_string(), &s.pi_w),
            ("contrast".to_string(), &contrast),
        ]
    } else {
        loaded
            .iter()
            .map(|(n, p)| (n.clone(), p as &dyn ConditionalPolicy))
            .collect()
    };
    if roster.len() < 2 {
        return Err(Error::input("elo needs at least two players"));
    }
    prepare_out(cfg, out)?;
    let schedule = round_robin_schedule(roster.len(), cfg.elo_passes, cfg.train.seed);
    let seed = derive_seed(cfg.train.seed, Stream::HeldOut, 3);
    let matches = play_matches(&roster, &schedule, &s.prompts, &s.spec, cfg.train.horizon, seed)?;
    let names: Vec<&str> = roster.iter().map(|(n, _)| n.as_str()).collect();
    let (table, trajectories) = elo(&names, &matches, cfg.elo_k);
    fs::write(out.join("elo.csv"), table.to_csv())?;
    let smoothed = names
        .iter()
        .map(|n| gaussian_smooth(&trajectories[*n], cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    fs::write(
        out.join("elo_curve.csv"),
        curves_csv(&names, &smoothed).replacen("epoch", "match", 1),
    )?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveReport {
    pub names: Vec<String>,
    pub curves: Vec<Vec<f64>>,
    /// Epoch where the first curve overtakes the second, if any.
    pub crossing: Option<usize>,
}

/// Standardized reward-increment curves from `metrics.jsonl` files.
pub fn run_curve(runs: &[(String, PathBuf)], out: &Path) -> Result<CurveReport> {
    let metrics = runs.iter().map(|(_, p)| read_metrics(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[MetricsRow]> = metrics.iter().map(Vec::as_slice).collect();
    let curves = reward_increment_curve(&refs)?;
    fs::create_dir_all(out)?;
    let names: Vec<&str> = runs.iter().map(|(n, _)| n.as_str()).collect();
    fs::write(out.join("curves.csv"), curves_csv(&names, &curves))?;
    let crossing = if curves.len() >= 2 {
        crossing_epoch(&curves[0], &curves[1])
    } else {
        None
    };
    Ok(CurveReport {
        names: names.iter().map(|s| s.to_string()).collect(),
        curves,
        crossing,
    })
}

/// Argmax decoding until eos or the horizon.
pub fn greedy_response<P: ConditionalPolicy + ?Sized>(policy: &P, prompt: &[Token], horizon: usize) -> Vec<Token> {
    let eos = policy.vocab().eos();
    let mut ctx = prompt.to_vec();
    let mut response = Vec::new();
    while response.len() < horizon {
        let row = policy.log_probs(&ctx);
        let best = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
        let tok = Token(best as u32);
        response.push(tok);
        ctx.push(tok);
        if tok == eos {
            break;
        }
    }
    response
}

pub fn credit_json(prompt: &[Token], profile: &CreditProfile) -> String {
    let ints = |ts: &[Token]| ts.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(",");
    let floats = |xs: &[f64]| xs.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(",");
    format!(
        "{{\"prompt\":[{}],\"tokens\":[{}],\"credits\":[{}],\"prefix_values\":[{}],\"beta\":{}}}\n",
        ints(prompt),
        ints(&profile.tokens),
        floats(&profile.credits),
        floats(&profile.prefix_values),
        format_float(profile.beta)
    )
}

/// Token credits of `response` (default: greedy decoding of `pi_star`).
pub fn run_credit(
    star: &Path,
    reference: &Path,
    prompt: &[Token],
    response: Option<&[Token]>,
    beta: f64,
    horizon: usize,
    out: &Path,
) -> Result<CreditProfile> {
    let pi_star = checkpoint::load(star)?;
    let pi_ref = checkpoint::load(reference)?;
    let vocab = pi_star.vocab();
    if pi_ref.vocab() != vocab {
        return Err(Error::input("checkpoints have different vocabularies"));
    }
    for &t in prompt {
        vocab.check(t)?;
    }
    let response = match response {
        Some(r) => r.to_vec(),
        None => greedy_response(&pi_star, prompt, horizon),
    };
    let traj = Trajectory::new(prompt.to_vec(), response, vocab.eos(), horizon)?;
    let profile = token_credit(&pi_star, &pi_ref, &traj, beta)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, credit_json(prompt, &profile))?;
    Ok(profile)
}
