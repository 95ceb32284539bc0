//! Command-line driver: `plan`, `baseline`, `report` and `eval`.

use crate::flatness::{FeasibilityLabel, VehicleParams};
use crate::optimizer::{
    finish, initialize, read_history_csv, read_timing_csv, write_history_csv, write_timing_csv,
    FidelityStack, Optimizer, OptimizerConfig, OptimizerError, Problem, RunState,
};
use crate::simdyn::{simulate_tracking, SimConfig};
use crate::stats::mix_seed;
use crate::trajectory::{
    scale_to_feasibility, smoothness, BoundaryConditions, ScalingOptions, SmoothnessWeights,
    TimeAllocation, TrajectoryError, WaypointList,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Stream used to derive the simulator seed from the master seed.
const SIM_SEED_STREAM: u64 = 0x51;
/// Sampling rate of emitted trajectory CSVs.
const TRAJECTORY_CSV_HZ: f64 = 100.0;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE_INIT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    InfeasibleInit(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::InfeasibleInit(_) => EXIT_INFEASIBLE_INIT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::Initialization { .. } => CliError::InfeasibleInit(e.to_string()),
            OptimizerError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
pub enum Fidelity {
    #[default]
    #[serde(rename = "flat+sim")]
    #[value(name = "flat+sim")]
    FlatSim,
    #[serde(rename = "sim-only")]
    #[value(name = "sim-only")]
    SimOnly,
}

/// Waypoints given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WaypointSource {
    Inline(WaypointList),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub waypoints: WaypointSource,
    #[serde(default)]
    pub boundary: BoundaryConditions,
    #[serde(default)]
    pub weights: SmoothnessWeights,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub fidelity: Fidelity,
    /// Simulator settings; its seed is derived from `seed`.
    #[serde(default)]
    pub sim: SimConfig,
    /// Optimizer settings; its seed is `seed`.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_out() -> PathBuf {
    PathBuf::from("mftop-run")
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub fidelity: Option<Fidelity>,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read a config file, inline its waypoint file (resolved relative to the
    /// config's directory), apply overrides and derive per-component seeds.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let WaypointSource::File(rel) = &cfg.waypoints {
            let file = path
                .parent()
                .map_or_else(|| rel.clone(), |dir| dir.join(rel));
            let list =
                WaypointList::from_json_file(&file).map_err(|e| CliError::Config(e.to_string()))?;
            cfg.waypoints = WaypointSource::Inline(list);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(n) = o.iterations {
            self.optimizer.iterations = n;
        }
        if let Some(f) = o.fidelity {
            self.fidelity = f;
        }
        self.optimizer.seed = self.seed;
        self.sim.seed = mix_seed(self.seed, SIM_SEED_STREAM);
        // keep the per-level acquisition entries of the levels in use, top-aligned
        let levels = self.levels();
        let acq = &mut self.optimizer.acquisition;
        if acq.costs.len() > levels && acq.thresholds.len() > levels {
            acq.costs.drain(..acq.costs.len() - levels);
            acq.thresholds.drain(..acq.thresholds.len() - levels);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.waypoint_list()?;
        self.vehicle
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sim
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let acq = &self.optimizer.acquisition;
        if acq.costs.len() != self.levels() || acq.thresholds.len() != self.levels() {
            return Err(CliError::Config(format!(
                "acquisition needs {} costs and thresholds for {:?}, got {} and {}",
                self.levels(),
                self.fidelity,
                acq.costs.len(),
                acq.thresholds.len()
            )));
        }
        acq.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn levels(&self) -> usize {
        match self.fidelity {
            Fidelity::FlatSim => 2,
            Fidelity::SimOnly => 1,
        }
    }

    pub fn waypoint_list(&self) -> Result<&WaypointList> {
        match &self.waypoints {
            WaypointSource::Inline(w) => Ok(w),
            WaypointSource::File(p) => Err(CliError::Config(format!(
                "waypoint file {} was not loaded",
                p.display()
            ))),
        }
    }

    pub fn problem(&self) -> Result<Problem> {
        Ok(Problem {
            waypoints: self.waypoint_list()?.clone(),
            boundary: self.boundary,
            weights: self.weights,
        })
    }

    pub fn stack(&self) -> FidelityStack {
        let costs = &self.optimizer.acquisition.costs;
        match self.fidelity {
            Fidelity::FlatSim => {
                FidelityStack::flat_and_sim(self.vehicle, self.sim, [costs[0], costs[1]])
            }
            Fidelity::SimOnly => FidelityStack::sim_only(self.vehicle, self.sim, costs[0]),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub optimizer: u64,
    pub simulation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "T_star")]
    pub t_star: f64,
    #[serde(rename = "T_baseline")]
    pub t_baseline: f64,
    pub improvement_pct: f64,
    pub best_allocation: Vec<f64>,
    pub baseline_allocation: Vec<f64>,
    pub iterations: usize,
    /// Step evaluations per fidelity level.
    pub evaluations: Vec<usize>,
    pub seeds: Seeds,
    /// Fresh top-level check of the returned trajectory.
    pub final_check: FeasibilityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLevel {
    pub level: usize,
    pub name: String,
    pub eta: f64,
    pub allocation: Vec<f64>,
    pub total_time: f64,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Smoothness-optimal allocation at the default total time.
    pub ratio: Vec<f64>,
    pub levels: Vec<BaselineLevel>,
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Runtime(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_outputs(cfg: &RunConfig, state: &RunState) -> Result<()> {
    write_atomic(&cfg.out.join("checkpoint.json"), state.to_json().as_bytes())?;
    write_atomic(
        &cfg.out.join("history.csv"),
        &csv_bytes(|b| write_history_csv(state, b))?,
    )?;
    write_atomic(
        &cfg.out.join("timing.csv"),
        &csv_bytes(|b| write_timing_csv(state, b))?,
    )
}

/// Run the optimizer and write config, checkpoint, history, timing,
/// trajectory and summary files to `cfg.out`.
pub fn cmd_plan(cfg: &RunConfig, resume: bool) -> Result<Summary> {
    let problem = cfg.problem()?;
    let stack = cfg.stack();
    let optimizer = Optimizer::new(&problem, &stack, &cfg.optimizer)?;
    let checkpoint = cfg.out.join("checkpoint.json");
    let mut state = if resume {
        let saved = std::fs::read_to_string(cfg.out.join("config.json"))
            .map_err(|e| CliError::Config(format!("cannot resume: {e}")))
            .and_then(|s| RunConfig::from_json_str(&s))?;
        let comparable = |c: &RunConfig| RunConfig {
            optimizer: OptimizerConfig {
                iterations: 0,
                ..c.optimizer.clone()
            },
            ..c.clone()
        };
        if comparable(&saved) != comparable(cfg) {
            return Err(CliError::Config(
                "cannot resume: config differs from the saved run beyond the iteration count"
                    .into(),
            ));
        }
        let text = std::fs::read_to_string(&checkpoint)
            .map_err(|e| CliError::Config(format!("cannot resume: {e}")))?;
        let mut state = RunState::from_json(&text)?;
        if let Ok(timing) = std::fs::File::open(cfg.out.join("timing.csv")) {
            read_timing_csv(&mut state, timing)?;
        }
        state
    } else {
        let state = initialize(&problem, &stack, &cfg.optimizer)?;
        create_dir(&cfg.out)?;
        state
    };
    write_atomic(&cfg.out.join("config.json"), cfg.to_json().as_bytes())?;
    write_outputs(cfg, &state)?;
    let mut io_error = None;
    optimizer.run_from(&mut state, |s| {
        if io_error.is_none() {
            io_error = write_outputs(cfg, s).err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    write_outputs(cfg, &state)?;
    let evaluations = (0..stack.len())
        .map(|l| state.history.iter().filter(|r| r.level == l).count())
        .collect();
    let result = finish(&problem, state)?;
    let final_check = stack.levels[stack.top()]
        .oracle
        .evaluate(&result.trajectory)
        .map_err(CliError::Runtime)?;
    let baseline = result.state.baseline_total();
    let summary = Summary {
        t_star: result.best_total,
        t_baseline: baseline,
        improvement_pct: 100.0 * (baseline - result.best_total) / baseline,
        best_allocation: result.best.clone(),
        baseline_allocation: result.state.baseline.clone(),
        iterations: result.state.iteration,
        evaluations,
        seeds: Seeds {
            master: cfg.seed,
            optimizer: cfg.optimizer.seed,
            simulation: cfg.sim.seed,
        },
        final_check,
    };
    write_atomic(
        &cfg.out.join("trajectory.csv"),
        &csv_bytes(|b| result.trajectory.write_csv(TRAJECTORY_CSV_HZ, b))?,
    )?;
    write_atomic(&cfg.out.join("summary.json"), &json_bytes(&summary))?;
    Ok(summary)
}

/// Minimum-snap ratio scaled to each level's feasibility boundary; writes
/// `baseline.json` and one trajectory CSV per level.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<Baseline> {
    let problem = cfg.problem()?;
    let stack = cfg.stack();
    let ratio = problem
        .smooth_ratio()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut levels = Vec::new();
    let mut files = Vec::new();
    for (j, level) in stack.levels.iter().enumerate() {
        let oracle = level.oracle.as_ref();
        let scaled = scale_to_feasibility(
            &problem.waypoints,
            &ratio,
            &problem.boundary,
            &problem.weights,
            &ScalingOptions::default(),
            |t| matches!(oracle.evaluate(t), Ok(FeasibilityLabel::Feasible)),
        )
        .map_err(|e| match e {
            TrajectoryError::Infeasible { .. } => {
                CliError::InfeasibleInit(format!("level {j} ({}): {e}", level.name))
            }
            e => CliError::Runtime(e.to_string()),
        })?;
        files.push((
            format!("baseline_{}.csv", level.name),
            csv_bytes(|b| scaled.trajectory.write_csv(TRAJECTORY_CSV_HZ, b))?,
        ));
        levels.push(BaselineLevel {
            level: j,
            name: level.name.clone(),
            eta: scaled.eta,
            total_time: scaled.allocation.total(),
            allocation: scaled.allocation.as_slice().to_vec(),
            oracle_calls: scaled.oracle_calls,
        });
    }
    let baseline = Baseline {
        ratio: ratio.as_slice().to_vec(),
        levels,
    };
    create_dir(&cfg.out)?;
    for (name, bytes) in files {
        write_atomic(&cfg.out.join(name), &bytes)?;
    }
    write_atomic(&cfg.out.join("baseline.json"), &json_bytes(&baseline))?;
    Ok(baseline)
}

/// Best allocation and its relative time and smoothness after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub iteration: usize,
    pub allocation: Vec<f64>,
    pub total_time: f64,
    pub relative_time: f64,
    /// σ of the allocation rescaled to the baseline total time, over σ of the baseline.
    pub relative_smoothness: f64,
}

/// Smoothness of `allocation` after uniform rescaling to `total`.
pub fn smoothness_at_total(
    problem: &Problem,
    allocation: &[f64],
    total: f64,
) -> std::result::Result<f64, TrajectoryError> {
    let alloc = TimeAllocation::new(allocation.to_vec())?;
    let scaled = alloc.scaled(total / alloc.total())?;
    Ok(smoothness(
        &problem.trajectory(scaled.as_slice())?,
        &problem.weights,
    ))
}

/// Per-iteration report of a finished (or checkpointed) run directory; writes
/// `report.csv` and a gnuplot stub `report.gp`.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let corrupt = |what: &str, e: &dyn std::fmt::Display| {
        CliError::Runtime(format!("corrupt run directory ({what}): {e}"))
    };
    let cfg_text = std::fs::read_to_string(run_dir.join("config.json"))
        .map_err(|e| corrupt("config.json", &e))?;
    let cfg = RunConfig::from_json_str(&cfg_text).map_err(|e| corrupt("config.json", &e))?;
    let problem = cfg.problem()?;
    let state_text = std::fs::read_to_string(run_dir.join("checkpoint.json"))
        .map_err(|e| corrupt("checkpoint.json", &e))?;
    let state = RunState::from_json(&state_text).map_err(|e| corrupt("checkpoint.json", &e))?;
    let history =
        std::fs::File::open(run_dir.join("history.csv")).map_err(|e| corrupt("history.csv", &e))?;
    let rows = read_history_csv(history).map_err(|e| corrupt("history.csv", &e))?;

    let top = state.top();
    let base_total = state.baseline_total();
    let base_sigma = smoothness_at_total(&problem, &state.baseline, base_total)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut best = state.baseline.clone();
    let mut best_total = base_total;
    let mut per_iteration = vec![best.clone()];
    for r in rows.iter().filter(|r| r.level == top) {
        if r.best_total < best_total {
            best_total = r.best_total;
            best = r.allocation.clone();
        }
        per_iteration.push(best.clone());
    }
    let mut report = Vec::with_capacity(per_iteration.len());
    for (iteration, x) in per_iteration.into_iter().enumerate() {
        let total: f64 = x.iter().sum();
        let sigma = smoothness_at_total(&problem, &x, base_total)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        report.push(ReportRow {
            iteration,
            total_time: total,
            relative_time: total / base_total,
            relative_smoothness: sigma / base_sigma,
            allocation: x,
        });
    }
    let bytes = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        let mut header = vec![
            "iteration".to_string(),
            "total_time".into(),
            "relative_time".into(),
            "relative_smoothness".into(),
        ];
        header.extend((0..problem.dim()).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for r in &report {
            let mut row = vec![
                r.iteration.to_string(),
                r.total_time.to_string(),
                r.relative_time.to_string(),
                r.relative_smoothness.to_string(),
            ];
            row.extend(r.allocation.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    write_atomic(&run_dir.join("report.csv"), &bytes)?;
    write_atomic(&run_dir.join("report.gp"), PLOT_STUB.as_bytes())?;
    Ok(report)
}

const PLOT_STUB: &str = "\
# gnuplot -p report.gp
set datafile separator ','
set key autotitle columnhead
set xlabel 'iteration'
set ylabel 'relative to baseline'
plot 'report.csv' using 1:3 with steps title 'time', \\
     '' using 1:4 with steps title 'smoothness cost'
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCheck {
    pub level: usize,
    pub name: String,
    pub label: Option<FeasibilityLabel>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub allocation: Vec<f64>,
    pub total_time: f64,
    pub levels: Vec<LevelCheck>,
}

/// Check one allocation at every level. With `trace`, also write one tracking
/// trace of the simulator to that path.
pub fn cmd_eval(cfg: &RunConfig, allocation: &[f64], trace: Option<&Path>) -> Result<EvalReport> {
    let problem = cfg.problem()?;
    if allocation.len() != problem.dim() {
        return Err(CliError::Config(format!(
            "allocation has {} entries, waypoints need {}",
            allocation.len(),
            problem.dim()
        )));
    }
    let traj = problem
        .trajectory(allocation)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let stack = cfg.stack();
    let levels = stack
        .levels
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let (label, error) = match l.oracle.evaluate(&traj) {
                Ok(label) => (Some(label), None),
                Err(e) => (None, Some(e)),
            };
            LevelCheck {
                level: j,
                name: l.name.clone(),
                label,
                error,
            }
        })
        .collect();
    if let Some(path) = trace {
        let tr = simulate_tracking(&traj, &cfg.vehicle, &cfg.sim, cfg.sim.seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(path, &csv_bytes(|b| tr.write_csv(b))?)?;
    }
    Ok(EvalReport {
        allocation: allocation.to_vec(),
        total_time: allocation.iter().sum(),
        levels,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "mftop",
    version,
    about = "Multi-fidelity time allocation for quadrotor trajectories"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = "MFTOP_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "MFTOP_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub fidelity: Option<Fidelity>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the time allocation.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Minimum-snap baseline against each fidelity level.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-iteration relative time and smoothness of a run directory.
    Report {
        /// Run directory written by `plan`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Check one allocation at every fidelity level.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Segment durations in seconds, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        allocation: Vec<f64>,
        /// Write a simulator tracking trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn load(args: &ConfigArgs, iterations: Option<usize>) -> Result<RunConfig> {
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        iterations,
        fidelity: args.fidelity,
    };
    RunConfig::load(&args.config, &overrides)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

/// Execute a parsed command, printing its JSON result to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan {
            config,
            iterations,
            resume,
        } => print_json(&cmd_plan(&load(&config, iterations)?, resume)?),
        Command::Baseline { config } => print_json(&cmd_baseline(&load(&config, None)?)?),
        Command::Report { run } => {
            let rows = cmd_report(&run)?;
            if let Some(last) = rows.last() {
                println!(
                    "iterations {} relative time {:.4} relative smoothness {:.4}",
                    last.iteration, last.relative_time, last.relative_smoothness
                );
            }
        }
        Command::Eval {
            config,
            allocation,
            trace,
        } => print_json(&cmd_eval(
            &load(&config, None)?,
            &allocation,
            trace.as_deref(),
        )?),
    }
    Ok(())
}
