//! Monte Carlo experiment harness: scheme × parameter sweeps with seeded,
//! bit-reproducible iterations and CSV output.
//!
//! Per-iteration erasure probabilities are redrawn around the configured
//! means (uniform ±0.05, clipped to [0, 0.95]) so the channel varies across
//! iterations while keeping its mean; the band is recorded in the CSV
//! metadata header. Iterations run in parallel on independent sub-streams
//! and are reduced in iteration order, so the output is byte-identical for
//! a fixed (spec, seed).

use crate::learning::{run_episode, EpisodeTrace, Scheme};
use crate::model::{DelayMetric, ErasureMatrix, GameConfig};
use crate::rng::{substream, Purpose};
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("mean probability {0} outside [0, 0.95]")]
    BadMean(f64),
    #[error("empty result table")]
    EmptyTable,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// What the sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Player counts; the player-player mean loss stays fixed.
    Players(Vec<usize>),
    /// P/Q ratios; the player count stays fixed and P = ratio · Q.
    RatioPq(Vec<f64>),
}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub schemes: Vec<Scheme>,
    pub metric: DelayMetric,
    pub sweep: Sweep,
    /// Fixed player count (ratio sweeps).
    pub players: usize,
    pub packets: usize,
    /// Mean player-player loss (player sweeps).
    pub p_mean: f64,
    /// Mean base-station loss.
    pub q_mean: f64,
    pub iterations: usize,
    pub seed: u64,
    pub backoff_window: usize,
    pub epsilon: f64,
    /// 0 selects the default cutoff of 50·packets.
    pub max_stages: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let grid_len = match &self.sweep {
            Sweep::Players(g) => g.len(),
            Sweep::RatioPq(g) => g.len(),
        };
        if grid_len == 0 || self.schemes.is_empty() {
            return Err(HarnessError::EmptyGrid);
        }
        if self.iterations == 0 {
            return Err(HarnessError::NoIterations);
        }
        for &mean in &[self.p_mean, self.q_mean] {
            if !(0.0..=0.95).contains(&mean) {
                return Err(HarnessError::BadMean(mean));
            }
        }
        if let Sweep::RatioPq(grid) = &self.sweep {
            for &r in grid {
                let p = r * self.q_mean;
                if !(0.0..=0.95).contains(&p) {
                    return Err(HarnessError::BadMean(p));
                }
            }
        }
        Ok(())
    }

    pub fn max_stages_for(&self, packets: usize) -> usize {
        if self.max_stages == 0 {
            50 * packets
        } else {
            self.max_stages
        }
    }

    fn points(&self) -> Vec<(f64, usize, f64)> {
        // (sweep value, players, p_mean)
        match &self.sweep {
            Sweep::Players(grid) => {
                grid.iter().map(|&m| (m as f64, m, self.p_mean)).collect()
            }
            Sweep::RatioPq(grid) => {
                grid.iter().map(|&r| (r, self.players, r * self.q_mean)).collect()
            }
        }
    }
}

/// Aggregates over the iterations of one (scheme, sweep point).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scheme: &'static str,
    pub sweep_value: f64,
    pub mean_completion_time: f64,
    pub mean_max_delay: f64,
    pub mean_sum_delay: f64,
    pub mean_collisions: f64,
    pub episodes: usize,
    pub cutoffs: usize,
}

/// Uniform draw of a loss probability around `mean` (±0.05, clipped).
fn draw_probability(mean: f64, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let lo = (mean - 0.05).max(0.0);
    let hi = (mean + 0.05).min(0.95);
    lo + rng.random::<f64>() * (hi - lo)
}

/// The exact per-iteration config the experiment runner uses; exposed so
/// tests and diagnostics can replay a single iteration.
pub fn iteration_config_probe(
    spec: &ExperimentSpec,
    players: usize,
    p_mean: f64,
    point: usize,
    iter: usize,
) -> Result<GameConfig, crate::model::ModelError> {
    iteration_config(spec, players, p_mean, point, iter)
}

pub(crate) fn iteration_config(
    spec: &ExperimentSpec,
    players: usize,
    p_mean: f64,
    point: usize,
    iter: usize,
) -> Result<GameConfig, crate::model::ModelError> {
    let mut rng = substream(spec.seed, &[point as u64, iter as u64, Purpose::ErasureDraw as u64]);
    let mut loss = vec![0.0; players * players];
    for v in loss.iter_mut() {
        *v = draw_probability(p_mean, &mut rng);
    }
    let erasure = ErasureMatrix::new(players, loss)?;
    let bs_erasure: Vec<f64> =
        (0..players).map(|_| draw_probability(spec.q_mean, &mut rng)).collect();
    let episode_seed: u64 = rng.random();
    Ok(GameConfig {
        players,
        packets: spec.packets,
        erasure,
        bs_erasure,
        backoff_window: spec.backoff_window,
        epsilon: spec.epsilon,
        max_stages: spec.max_stages_for(spec.packets),
        seed: episode_seed,
    })
}

fn aggregate(scheme: Scheme, sweep_value: f64, traces: &[EpisodeTrace]) -> ResultRow {
    let n = traces.len() as f64;
    ResultRow {
        scheme: scheme.label(),
        sweep_value,
        mean_completion_time: traces.iter().map(|t| t.completion_time() as f64).sum::<f64>() / n,
        mean_max_delay: traces.iter().map(|t| t.max_delay() as f64).sum::<f64>() / n,
        mean_sum_delay: traces.iter().map(|t| t.sum_delay() as f64).sum::<f64>() / n,
        mean_collisions: traces.iter().map(|t| t.collisions_total as f64).sum::<f64>() / n,
        episodes: traces.len(),
        cutoffs: traces.iter().filter(|t| !t.completed).count(),
    }
}

/// Runs the experiment: one row per (scheme, sweep point), averaged over
/// `iterations` episodes with per-iteration channel draws. Cutoff episodes
/// are counted, never dropped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (point_idx, (sweep_value, players, p_mean)) in spec.points().into_iter().enumerate() {
        let configs: Vec<GameConfig> = (0..spec.iterations)
            .map(|iter| iteration_config(spec, players, p_mean, point_idx, iter))
            .collect::<Result<_, _>>()?;
        for &scheme in &spec.schemes {
            let traces: Vec<EpisodeTrace> = configs
                .par_iter()
                .map(|cfg| run_episode(scheme, spec.metric, cfg, 0))
                .collect();
            rows.push(aggregate(scheme, sweep_value, &traces));
        }
    }
    Ok(rows)
}

/// Six significant digits, deterministic.
fn sig6(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{:.5e}", x)
    }
}

fn metric_name(metric: DelayMetric) -> &'static str {
    match metric {
        DelayMetric::CompletionTime => "CT",
        DelayMetric::MaxDelay => "MDD",
        DelayMetric::SumDelay => "SDD",
    }
}

/// Metadata header lines (each prefixed `#`) recording the full spec.
pub fn metadata_lines(spec: &ExperimentSpec) -> Vec<String> {
    let (sweep_kind, grid) = match &spec.sweep {
        Sweep::Players(g) => {
            ("M", g.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        }
        Sweep::RatioPq(g) => {
            ("ratio", g.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        }
    };
    vec![
        format!("# cde-games {}", env!("CARGO_PKG_VERSION")),
        format!(
            "# schemes: {}",
            spec.schemes.iter().map(|s| s.label()).collect::<Vec<_>>().join(",")
        ),
        format!("# metric: {}", metric_name(spec.metric)),
        format!("# sweep: {sweep_kind}"),
        format!("# grid: {grid}"),
        format!("# players: {}", spec.players),
        format!("# packets: {}", spec.packets),
        format!("# p_mean: {}", spec.p_mean),
        format!("# q_mean: {}", spec.q_mean),
        format!("# iterations: {}", spec.iterations),
        format!("# seed: {}", spec.seed),
        format!("# backoff_window: {}", spec.backoff_window),
        format!("# epsilon: {}", spec.epsilon),
        format!("# max_stages: {}", spec.max_stages_for(spec.packets)),
        "# erasure_draw: uniform mean±0.05 clipped to [0,0.95], redrawn per iteration".to_string(),
        format!(
            "# combination_selection: exhaustive when |Has| <= {}, greedy clique otherwise",
            crate::coding::SelectionPolicy::BUDGETED.exhaustive_budget
        ),
        "# cutoffs: episodes hitting max_stages are averaged as-is and counted".to_string(),
    ]
}

pub const CSV_HEADER: &str = "scheme,sweep_value,mean_completion_time,mean_max_delay,mean_sum_delay,mean_collisions,episodes,cutoffs";

/// Renders the table: metadata, header, one row per line.
pub fn render_csv(spec: &ExperimentSpec, rows: &[ResultRow]) -> Result<String, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyTable);
    }
    let mut out = String::new();
    for line in metadata_lines(spec) {
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scheme,
            r.sweep_value,
            sig6(r.mean_completion_time),
            sig6(r.mean_max_delay),
            sig6(r.mean_sum_delay),
            sig6(r.mean_collisions),
            r.episodes,
            r.cutoffs
        ));
    }
    Ok(out)
}

/// Writes the rendered CSV to `path`.
pub fn emit_csv(
    spec: &ExperimentSpec,
    rows: &[ResultRow],
    path: &Path,
) -> Result<(), HarnessError> {
    let text = render_csv(spec, rows)?;
    let mut file = std::fs::File::create(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(text.as_bytes()).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a rendered CSV back into rows (metadata lines skipped).
pub fn parse_csv(text: &str) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line == CSV_HEADER || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let scheme = Scheme::parse(parts[0]).expect("known scheme").label();
        rows.push(ResultRow {
            scheme,
            sweep_value: parts[1].parse().unwrap(),
            mean_completion_time: parts[2].parse().unwrap(),
            mean_max_delay: parts[3].parse().unwrap(),
            mean_sum_delay: parts[4].parse().unwrap(),
            mean_collisions: parts[5].parse().unwrap(),
            episodes: parts[6].parse().unwrap(),
            cutoffs: parts[7].parse().unwrap(),
        });
    }
    rows
}
