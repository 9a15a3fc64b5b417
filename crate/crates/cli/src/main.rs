use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use iqlab::config::RunConfig;
use iqlab::eval::alpha_grid;
use iqlab::experiment;
use iqlab::policy::Token;
use iqlab::trainers::Method;
use iqlab::verify::{default_instances, run_suite, Suite};
use iqlab::Error;

#[derive(Parser)]
#[command(
    name = "iqlab",
    version,
    about = "Token-level reward imitation experiments on small sequence policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run randomized oracle checks.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per suite (defaults: lemma 1000, telescope 200, gradient 50).
        #[arg(long)]
        instances: Option<usize>,
        /// Optional report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy and write metrics and per-epoch checkpoints.
    Train {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per contrast weight on a grid.
    SweepAlpha {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        from: f64,
        #[arg(long, default_value_t = 1.5)]
        to: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle-judged evaluation.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Per-token credits of a response under an optimal and a reference policy.
    Credit {
        #[arg(long)]
        ckpt_star: PathBuf,
        #[arg(long)]
        ckpt_ref: PathBuf,
        /// Space- or comma-separated token ids.
        #[arg(long, allow_hyphen_values = true)]
        prompt: String,
        /// Response to score; greedy decoding of the optimal policy if omitted.
        #[arg(long)]
        response: Option<String>,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Win/lose/tie rates of policy A against policy B.
    Winrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of A (default: the strong policy).
        #[arg(long)]
        a: Option<PathBuf>,
        /// Checkpoint of B (default: the weak policy).
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Round-robin Elo ratings.
    Elo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `name=path/to.ckpt`, repeatable.
        #[arg(long = "player")]
        players: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standardized reward-increment curves from training runs.
    Curve {
        /// `name=path/to/metrics.jsonl`, repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Lemma,
    Telescope,
    Gradient,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    InverseQ,
    Ppo,
    Dpo,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::InverseQ => Method::InverseQ,
            MethodArg::Ppo => Method::Ppo,
            MethodArg::Dpo => Method::Dpo,
        }
    }
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn load_config(path: Option<&Path>) -> iqlab::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_tokens(raw: &str) -> anyhow::Result<Vec<Token>> {
    raw.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map(Token).map_err(|_| anyhow!("bad token id `{s}`")))
        .collect()
}

fn parse_named(items: &[String]) -> anyhow::Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("expected name=path, got `{s}`"))?;
            if name.is_empty() || name.contains(',') {
                bail!("invalid name in `{s}`");
            }
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Verify {
            suite,
            seed,
            instances,
            out,
        } => {
            let suites: Vec<Suite> = match suite {
                SuiteArg::Lemma => vec![Suite::Lemma],
                SuiteArg::Telescope => vec![Suite::Telescope],
                SuiteArg::Gradient => vec![Suite::Gradient],
                SuiteArg::All => Suite::ALL.to_vec(),
            };
            let mut report = String::new();
            let mut ok = true;
            for s in suites {
                let rep = run_suite(s, seed, instances.unwrap_or_else(|| default_instances(s)))?;
                report.push_str(&rep.summary());
                report.push('\n');
                for f in &rep.failures {
                    report.push_str(&format!("  failure: {f}\n"));
                }
                ok &= rep.passed();
            }
            print!("{report}");
            if let Some(path) = out {
                fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(if ok { Outcome::Ok } else { Outcome::VerificationFailed })
        }
        Command::Train { method, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg = cfg.with_method(m.into());
            }
            let outcome = experiment::run_train(&cfg, &out)?;
            let last = outcome.metrics.last().expect("epoch-0 row");
            println!(
                "method={} epochs={} final_reward={:.4} kl_to_ref={:.4} winrate_vs_init={:.4} out={}",
                cfg.train.method,
                last.epoch,
                last.mean_oracle_reward,
                last.kl_to_ref,
                last.winrate_vs_init,
                out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::SweepAlpha {
            config,
            from,
            to,
            step,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let grid = alpha_grid(from, to, step)?;
            let rows = experiment::run_sweep(&cfg, &grid, &out)?;
            let best = rows
                .iter()
                .filter_map(|r| r.result.as_ref().ok().map(|res| (r.alpha, res.net())))
                .fold(None, |best: Option<(f64, f64)>, x| match best {
                    Some(b) if b.1 >= x.1 => Some(b),
                    _ => Some(x),
                });
            for r in &rows {
                match &r.result {
                    Ok(res) => println!("alpha={:.2} win-lose={:.4}", r.alpha, res.net()),
                    Err(e) => println!("alpha={:.2} error: {e}", r.alpha),
                }
            }
            if let Some((alpha, net)) = best {
                println!("best alpha={alpha:.2} win-lose={net:.4}");
            }
            Ok(Outcome::Ok)
        }
        Command::Eval { what } => match what {
            EvalCommand::Winrate { config, a, b, out } => {
                let cfg = load_config(config.as_deref())?;
                let wr = experiment::run_winrate(&cfg, a.as_deref(), b.as_deref(), &out)?;
                println!("win={:.4} lose={:.4} tie={:.4} n={}", wr.win, wr.lose, wr.tie, wr.n);
                Ok(Outcome::Ok)
            }
            EvalCommand::Elo { config, players, out } => {
                let cfg = load_config(config.as_deref())?;
                let table = experiment::run_elo(&cfg, &parse_named(&players)?, &out)?;
                for (name, rating) in table.sorted() {
                    println!("{name} {rating:.1}");
                }
                Ok(Outcome::Ok)
            }
            EvalCommand::Curve { runs, out } => {
                let rep = experiment::run_curve(&parse_named(&runs)?, &out)?;
                for (name, curve) in rep.names.iter().zip(&rep.curves) {
                    println!("{name} final_increment={:.4}", curve.last().copied().unwrap_or(0.0));
                }
                match rep.crossing {
                    Some(e) => println!("crossing_epoch={e}"),
                    None => println!("crossing_epoch=none"),
                }
                Ok(Outcome::Ok)
            }
        },
        Command::Credit {
            ckpt_star,
            ckpt_ref,
            prompt,
            response,
            beta,
            horizon,
            out,
        } => {
            let prompt = parse_tokens(&prompt)?;
            let response = response.as_deref().map(parse_tokens).transpose()?;
            let profile =
                experiment::run_credit(&ckpt_star, &ckpt_ref, &prompt, response.as_deref(), beta, horizon, &out)?;
            for ((tok, c), v) in profile.tokens.iter().zip(&profile.credits).zip(&profile.prefix_values) {
                println!("{tok}\t{c:+.4}\t{v:+.4}");
            }
            Ok(Outcome::Ok)
        }
    }
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) | Some(Error::Input(_)) => true,
        Some(_) => false,
        None => true,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
