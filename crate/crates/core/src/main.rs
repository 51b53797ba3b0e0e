use anyhow::{bail, Context, Result};
use cde_games::harness::{emit_csv, run_experiment, ExperimentSpec, Sweep};
use cde_games::learning::Scheme;
use cde_games::model::DelayMetric;
use clap::Parser;
use std::path::PathBuf;

/// Monte Carlo experiment runner for the cooperative-data-exchange delay
/// games: sweeps a parameter grid for the selected schemes and writes one
/// CSV row per (scheme, sweep point).
#[derive(Parser, Debug)]
#[command(name = "cde-sim", version)]
struct Args {
    /// Comma-separated schemes: OPT-PMP, OPT-CDE, LC-CDE, LS-PMP, LS-CDE.
    #[arg(long, value_delimiter = ',', required = true)]
    scheme: Vec<String>,

    /// Delay metric: CT, MDD, or SDD.
    #[arg(long)]
    metric: String,

    /// Sweep variable: M (player count) or ratio (P/Q).
    #[arg(long)]
    sweep: String,

    /// Comma-separated sweep grid (integers for M, reals for ratio).
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,

    /// Fixed player count (used by ratio sweeps).
    #[arg(long = "M", default_value_t = 60)]
    players: usize,

    /// Packets per frame.
    #[arg(long = "N", default_value_t = 30)]
    packets: usize,

    /// Mean player-player loss probability (used by M sweeps).
    #[arg(long = "P", default_value_t = 0.1)]
    p_mean: f64,

    /// Mean base-station loss probability.
    #[arg(long = "Q", default_value_t = 0.2)]
    q_mean: f64,

    /// Episodes per sweep point.
    #[arg(long, default_value_t = 100)]
    iters: usize,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Collision punishment length in stages.
    #[arg(long = "V", default_value_t = 2)]
    backoff: usize,

    /// Satisfaction margin of the learning stimulus.
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,

    /// Episode cutoff; 0 selects 50·N.
    #[arg(long = "max-stages", default_value_t = 0)]
    max_stages: usize,

    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(s: &str) -> Result<DelayMetric> {
    Ok(match s.to_ascii_uppercase().as_str() {
        "CT" => DelayMetric::CompletionTime,
        "MDD" => DelayMetric::MaxDelay,
        "SDD" => DelayMetric::SumDelay,
        other => bail!("unknown metric {other:?} (expected CT, MDD, or SDD)"),
    })
}

fn main() -> Result<()> {
    let args = Args::parse();
    let schemes: Vec<Scheme> = args
        .scheme
        .iter()
        .map(|s| Scheme::parse(s).with_context(|| format!("unknown scheme {s:?}")))
        .collect::<Result<_>>()?;
    let metric = parse_metric(&args.metric)?;
    let sweep = match args.sweep.to_ascii_uppercase().as_str() {
        "M" => Sweep::Players(
            args.grid
                .iter()
                .map(|g| g.parse::<usize>().with_context(|| format!("bad M grid value {g:?}")))
                .collect::<Result<_>>()?,
        ),
        "RATIO" => Sweep::RatioPq(
            args.grid
                .iter()
                .map(|g| g.parse::<f64>().with_context(|| format!("bad ratio grid value {g:?}")))
                .collect::<Result<_>>()?,
        ),
        other => bail!("unknown sweep {other:?} (expected M or ratio)"),
    };
    let spec = ExperimentSpec {
        schemes,
        metric,
        sweep,
        players: args.players,
        packets: args.packets,
        p_mean: args.p_mean,
        q_mean: args.q_mean,
        iterations: args.iters,
        seed: args.seed,
        backoff_window: args.backoff,
        epsilon: args.epsilon,
        max_stages: args.max_stages,
    };
    let rows = run_experiment(&spec)?;
    emit_csv(&spec, &rows, &args.out)?;
    eprintln!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
