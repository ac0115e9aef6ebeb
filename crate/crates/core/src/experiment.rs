//! Multi-seed experiments and grid sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    comm_summary, convergence_rate, lr_condition, mean_std, theoretical_bound, Bound, CommSummary,
    LrVerdict, TheoryParams,
};
use crate::config::{parse_table, set_key, ConfigError, ExperimentConfig};
use crate::quantizers::compression_parameter;
use crate::seed::{SeedStreams, Stream};
use crate::simulator::{run_simulation, MetricsLog, SimError};
use crate::tasks::{estimate_constants, ConstantEstimates, ProbeRegion, Task, TaskError};

/// Probe points per client used to estimate `L`, `σ²` and `G`.
pub const PROBE_POINTS: usize = 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("task construction failed: {0}")]
    Task(#[from] TaskError),
    #[error("seed {seed}: {source}")]
    Sim { seed: u64, source: SimError },
    #[error("grid key {0} has no values")]
    EmptyGrid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub log: MetricsLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: usize,
    /// Common number of server steps `T` over which `R` is reported.
    pub steps: u64,
    pub uploads: Stat,
    /// Over the runs that reached the target loss.
    pub uploads_to_target: Option<Stat>,
    pub reached_target: usize,
    /// What "target" means for these tasks.
    pub target_metric: String,
    pub mb_uploaded: Stat,
    pub mb_broadcast: Stat,
    pub kb_per_upload: Stat,
    pub kb_per_broadcast: Stat,
    pub final_loss: Stat,
    pub rate: Stat,
    pub tau_max: u64,
    pub delta_c: f64,
    pub delta_s: f64,
    pub constants: ConstantEstimates,
    pub f_star_gap: f64,
    /// False when `f*` was replaced by the smallest observed loss, which makes
    /// the bound optimistic.
    pub f_star_exact: bool,
    pub lr: LrVerdict,
    pub bound: Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub summary: ExperimentSummary,
}

/// Runs every seed of `config` (in parallel) and summarizes them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let task = config.build_task()?;
    let sim = config.sim_config();
    let runs = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            run_simulation(&task, &sim, seed)
                .map(|log| SeedRun { seed, log })
                .map_err(|source| ExperimentError::Sim { seed, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(config, &task, &runs);
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        summary,
    })
}

fn summarize(config: &ExperimentConfig, task: &Task, runs: &[SeedRun]) -> ExperimentSummary {
    let collect =
        |f: &dyn Fn(&SeedRun) -> f64| -> Stat { Stat::of(&runs.iter().map(f).collect::<Vec<_>>()) };
    let comms: Vec<CommSummary> = runs.iter().map(|r| comm_summary(&r.log)).collect();
    let comm_stat = |f: fn(&CommSummary) -> f64| Stat::of(&comms.iter().map(f).collect::<Vec<_>>());

    let steps = runs.iter().map(|r| r.log.steps()).min().unwrap_or(0);
    let t_rows = (steps as usize).max(1);
    let reached: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.log.uploads_to_target.map(|u| u as f64))
        .collect();
    let tau_max = runs
        .iter()
        .flat_map(|r| r.log.updates.iter().map(|u| u.staleness))
        .max()
        .unwrap_or(0);

    let x0 = vec![0.0; task.dim()];
    let initial_loss = task.loss_f64(&x0);
    let optimum = task.optimum();
    let (f_star_gap, f_star_exact) = match &optimum {
        Some(opt) => ((initial_loss - opt.value).max(0.0), true),
        None => {
            let min_seen = runs
                .iter()
                .flat_map(|r| r.log.rows.iter().map(|row| row.loss))
                .fold(initial_loss, f64::min);
            (initial_loss - min_seen, false)
        }
    };

    // probe the ball around x⁰ that holds the final iterates (and x*)
    let mut radius = runs
        .iter()
        .map(|r| r.log.final_model.norm())
        .fold(0.0, f64::max);
    if let Some(opt) = &optimum {
        radius = radius.max(opt.point.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let region = ProbeRegion::ball(task.dim(), 1.1 * radius + 1e-3);
    let seed = config.run.seeds.first().copied().unwrap_or(0);
    let mut rng = SeedStreams::new(seed).rng(Stream::Constants, 0);
    let constants = estimate_constants(task, PROBE_POINTS, &region, &mut rng);

    let delta_c = compression_parameter(&config.quant.client, task.dim());
    let delta_s = compression_parameter(&config.quant.server, task.dim());
    let theory = TheoryParams {
        l: constants.l_hat,
        sigma2: constants.sigma2_hat,
        g: constants.g_hat,
        delta_c,
        delta_s,
        k: config.hp.k,
        t: t_rows as u64,
        tau_max,
        eta_g: config.hp.eta_g,
        eta_l: config.hp.eta_l.clone(),
        f_star_gap,
        server_biased: !config.quant.server.unbiased(),
    };

    ExperimentSummary {
        runs: runs.len(),
        steps,
        uploads: comm_stat(|c| c.uploads as f64),
        uploads_to_target: (!reached.is_empty()).then(|| Stat::of(&reached)),
        reached_target: reached.len(),
        target_metric: "loss".into(),
        mb_uploaded: comm_stat(|c| c.mb_uploaded),
        mb_broadcast: comm_stat(|c| c.mb_broadcast),
        kb_per_upload: comm_stat(|c| c.kb_per_upload),
        kb_per_broadcast: comm_stat(|c| c.kb_per_broadcast),
        final_loss: collect(&|r| r.log.rows.last().map_or(f64::NAN, |row| row.loss)),
        rate: collect(&|r| convergence_rate(&r.log, t_rows).unwrap_or(f64::NAN)),
        tau_max,
        delta_c,
        delta_s,
        constants,
        f_star_gap,
        f_star_exact,
        lr: lr_condition(&theory),
        bound: theoretical_bound(&theory),
    }
}

/// One grid axis: a dotted config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `(key, value)` for each axis, in axis order.
    pub assignment: Vec<(String, String)>,
    pub result: ExperimentResult,
}

/// Runs the cartesian product of `grid` over a base config, first axis slowest.
pub fn sweep(base: &toml::Table, grid: &[GridAxis]) -> Result<Vec<SweepPoint>, ExperimentError> {
    if let Some(axis) = grid.iter().find(|a| a.values.is_empty()) {
        return Err(ExperimentError::EmptyGrid(axis.key.clone()));
    }
    let mut points: Vec<Vec<usize>> = vec![Vec::new()];
    for axis in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                (0..axis.values.len()).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    let configs = points
        .iter()
        .map(|idx| {
            let mut table = base.clone();
            let mut assignment = Vec::new();
            for (axis, &i) in grid.iter().zip(idx) {
                let value = axis.values[i].clone();
                assignment.push((axis.key.clone(), display_value(&value)));
                set_key(&mut table, &axis.key, value)?;
            }
            Ok((assignment, parse_table(table)?))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    configs
        .into_par_iter()
        .map(|(assignment, cfg)| {
            Ok(SweepPoint {
                assignment,
                result: run_experiment(&cfg)?,
            })
        })
        .collect()
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
