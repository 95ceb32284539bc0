//! Multi-fidelity search over time allocations: initialization against each
//! fidelity level, then repeated surrogate refits, candidate scoring and
//! single evaluations until the iteration budget is spent.
//!
//! One *step* is one oracle evaluation. One *iteration* ends with an
//! evaluation at the highest fidelity level.

use crate::acquisition::{
    lhs_candidates, perturb_candidates, perturbation_covariance, select_next, AcquisitionError,
    AcquisitionParams, Branch, PerturbationCovariance,
};
use crate::flatness::{
    check_low_fidelity, FeasibilityLabel, VehicleParams, ViolationKind, DEFAULT_CHECK_DT,
};
use crate::simdyn::{check_medium_fidelity, SimConfig};
use crate::stats::mix_seed;
use crate::surrogate::{FidelityDataset, SurrogateConfig, SurrogateError, SurrogateModel};
use crate::trajectory::{
    min_snap, optimize_allocation_ratio, scale_to_feasibility, BoundaryConditions, RatioOptions,
    ScalingOptions, SmoothnessWeights, TimeAllocation, Trajectory, TrajectoryError, WaypointList,
};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("no feasible initial trajectory at level {level} ({name}): {source}")]
    Initialization {
        level: usize,
        name: String,
        source: TrajectoryError,
    },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("reference allocation must be strictly positive")]
    BadReference,
    #[error("checkpoint does not match this problem: {0}")]
    Checkpoint(String),
    #[error("history file: {0}")]
    History(String),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

/// Binary feasibility oracle over trajectories. Implementations must be
/// deterministic.
pub trait FeasibilityOracle {
    fn evaluate(&self, traj: &Trajectory) -> std::result::Result<FeasibilityLabel, String>;
}

/// Motor-speed bounds along the flat-output reference.
#[derive(Debug, Clone)]
pub struct FlatnessOracle {
    pub vehicle: VehicleParams,
    pub dt: f64,
}

impl FlatnessOracle {
    pub fn new(vehicle: VehicleParams) -> Self {
        Self {
            vehicle,
            dt: DEFAULT_CHECK_DT,
        }
    }
}

impl FeasibilityOracle for FlatnessOracle {
    fn evaluate(&self, traj: &Trajectory) -> std::result::Result<FeasibilityLabel, String> {
        check_low_fidelity(traj, &self.vehicle, self.dt.min(traj.total_time()))
            .map_err(|e| e.to_string())
    }
}

/// Tracking-error bounds in closed-loop simulation.
#[derive(Debug, Clone)]
pub struct SimulationOracle {
    pub vehicle: VehicleParams,
    pub config: SimConfig,
}

impl FeasibilityOracle for SimulationOracle {
    fn evaluate(&self, traj: &Trajectory) -> std::result::Result<FeasibilityLabel, String> {
        check_medium_fidelity(traj, &self.vehicle, &self.config).map_err(|e| e.to_string())
    }
}

/// How a level's dataset is seeded before the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum InitMethod {
    /// Evaluate a Latin hypercube in the normalized box `[low, high]^m`.
    Lhs { points: usize, low: f64, high: f64 },
    /// Label uniformly scaled copies of the level's boundary allocation without
    /// evaluating them: half below the boundary, half at or above it.
    Scaling { points: usize },
}

impl InitMethod {
    pub fn lhs() -> Self {
        InitMethod::Lhs {
            points: 400,
            low: 0.6,
            high: 1.4,
        }
    }

    pub fn scaling() -> Self {
        InitMethod::Scaling { points: 20 }
    }
}

pub struct FidelityLevel {
    pub name: String,
    pub oracle: Box<dyn FeasibilityOracle>,
    /// Nominal cost of one evaluation.
    pub cost: f64,
    pub init: InitMethod,
}

/// Oracles ordered from lowest to highest fidelity.
pub struct FidelityStack {
    pub levels: Vec<FidelityLevel>,
}

impl FidelityStack {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn top(&self) -> usize {
        self.levels.len() - 1
    }

    /// Flatness check (LHS init) below the simulator (scaling init).
    pub fn flat_and_sim(vehicle: VehicleParams, sim: SimConfig, costs: [f64; 2]) -> Self {
        Self {
            levels: vec![
                FidelityLevel {
                    name: "flatness".into(),
                    oracle: Box::new(FlatnessOracle::new(vehicle)),
                    cost: costs[0],
                    init: InitMethod::lhs(),
                },
                FidelityLevel {
                    name: "simulation".into(),
                    oracle: Box::new(SimulationOracle {
                        vehicle,
                        config: sim,
                    }),
                    cost: costs[1],
                    init: InitMethod::scaling(),
                },
            ],
        }
    }

    pub fn sim_only(vehicle: VehicleParams, sim: SimConfig, cost: f64) -> Self {
        Self {
            levels: vec![FidelityLevel {
                name: "simulation".into(),
                oracle: Box::new(SimulationOracle {
                    vehicle,
                    config: sim,
                }),
                cost,
                init: InitMethod::scaling(),
            }],
        }
    }
}

/// Waypoints, boundary conditions and smoothness weights: everything needed
/// to turn an allocation into a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub waypoints: WaypointList,
    #[serde(default)]
    pub boundary: BoundaryConditions,
    #[serde(default)]
    pub weights: SmoothnessWeights,
}

impl Problem {
    pub fn new(waypoints: WaypointList) -> Self {
        Self {
            waypoints,
            boundary: BoundaryConditions::default(),
            weights: SmoothnessWeights::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.waypoints.segment_count()
    }

    pub fn trajectory(&self, allocation: &[f64]) -> crate::trajectory::Result<Trajectory> {
        min_snap(
            &self.waypoints,
            &TimeAllocation::new(allocation.to_vec())?,
            &self.boundary,
            &self.weights,
        )
    }

    /// Smoothness-optimal allocation ratio at the waypoints' default total time.
    pub fn smooth_ratio(&self) -> crate::trajectory::Result<TimeAllocation> {
        let total = self.waypoints.default_total_time();
        Ok(optimize_allocation_ratio(
            &self.waypoints,
            total,
            &self.boundary,
            &self.weights,
            &RatioOptions::default(),
        )?
        .allocation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMethod {
    /// LHS for one or two segments, perturbations otherwise.
    Auto,
    Lhs,
    Perturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    /// Lower-fidelity evaluations allowed before the top level is forced.
    /// Defaults to 20 for up to two segments and 50 otherwise.
    pub max_low_fidelity_per_iteration: Option<usize>,
    pub candidate_method: CandidateMethod,
    /// LHS candidate box relative to the incumbent.
    pub candidate_box: [f64; 2],
    pub acquisition: AcquisitionParams,
    pub surrogate: SurrogateConfig,
    /// Steps between refits on fresh inducing points.
    pub full_refit_every: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            max_low_fidelity_per_iteration: None,
            candidate_method: CandidateMethod::Auto,
            candidate_box: [0.75, 1.25],
            acquisition: AcquisitionParams::default(),
            surrogate: SurrogateConfig::default(),
            full_refit_every: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn low_fidelity_cap(&self, dim: usize) -> usize {
        self.max_low_fidelity_per_iteration
            .unwrap_or(if dim <= 2 { 20 } else { 50 })
    }

    fn validate(&self, stack: &FidelityStack) -> Result<()> {
        let bad = |m: String| Err(OptimizerError::InvalidConfig(m));
        if stack.is_empty() {
            return bad("fidelity stack is empty".into());
        }
        if self.acquisition.thresholds.len() != stack.len() {
            return bad(format!(
                "{} thresholds for {} fidelity levels",
                self.acquisition.thresholds.len(),
                stack.len()
            ));
        }
        self.acquisition_params(stack).validate()?;
        if self.max_low_fidelity_per_iteration == Some(0) || self.full_refit_every == 0 {
            return bad("counts must be >= 1".into());
        }
        let [lo, hi] = self.candidate_box;
        if !(lo > 0.0 && lo < hi) {
            return bad("candidate box must satisfy 0 < low < high".into());
        }
        for (j, level) in stack.levels.iter().enumerate() {
            match level.init {
                InitMethod::Lhs { points, low, high }
                    if points == 0 || !(low > 0.0 && low < high) =>
                {
                    return bad(format!(
                        "LHS init of level {j} needs points >= 1 and 0 < low < high"
                    ));
                }
                InitMethod::Scaling { points } if points < 2 => {
                    return bad(format!("scaling init of level {j} needs at least 2 points"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn acquisition_params(&self, stack: &FidelityStack) -> AcquisitionParams {
        AcquisitionParams {
            costs: stack.levels.iter().map(|l| l.cost).collect(),
            ..self.acquisition.clone()
        }
    }
}

/// Element-wise `x / reference`.
pub fn normalize(x: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if reference.len() != x.len() || reference.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(OptimizerError::BadReference);
    }
    Ok(x.iter().zip(reference).map(|(a, r)| a / r).collect())
}

/// Element-wise `x · reference`.
pub fn denormalize(x: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if reference.len() != x.len() || reference.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(OptimizerError::BadReference);
    }
    Ok(x.iter().zip(reference).map(|(a, r)| a * r).collect())
}

/// Scales `η` labeled by the scaling initialization: `n/2` evenly spaced in
/// `[0.80, 0.98]` (infeasible) and the rest evenly spaced in `[1.0, 1.3]` (feasible).
pub fn scaling_grid(points: usize) -> Vec<(f64, bool)> {
    let below = points / 2;
    let above = points - below;
    let spread = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        if n == 1 {
            vec![lo]
        } else {
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        }
    };
    let mut grid: Vec<(f64, bool)> = spread(below, 0.80, 0.98)
        .into_iter()
        .map(|e| (e, false))
        .collect();
    grid.extend(spread(above, 1.0, 1.3).into_iter().map(|e| (e, true)));
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Step,
}

/// One oracle evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub phase: Phase,
    pub step: usize,
    pub iteration: usize,
    pub level: usize,
    pub allocation: Vec<f64>,
    pub normalized: Vec<f64>,
    pub total_time: f64,
    pub feasible: bool,
    pub violation_kind: Option<ViolationKind>,
    pub violation_time: Option<f64>,
    pub violation_margin: Option<f64>,
    pub error: Option<String>,
    pub branch: Branch,
    /// Acquisition fields are empty for initialization records.
    pub score: Option<f64>,
    pub p_tilde: Option<f64>,
    pub latent_mean: Option<f64>,
    pub latent_std: Option<f64>,
    /// Nominal cost of the level.
    pub cost: f64,
    /// Seed of the step's candidate generation.
    pub seed: u64,
    /// Best top-level total time after this evaluation.
    pub best_total: f64,
    /// Not serialized. Restored from the timing CSV on resume.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub dim: usize,
    pub datasets: Vec<FidelityDataset>,
    /// Boundary allocation found at each level during initialization.
    pub initial: Vec<Vec<f64>>,
    /// Top-level baseline (minimum-snap ratio scaled to the top oracle's boundary).
    pub baseline: Vec<f64>,
    pub best: Vec<f64>,
    pub step: usize,
    pub iteration: usize,
    pub low_fidelity_in_iteration: usize,
    /// Best total time at the end of each iteration; entry 0 is the baseline.
    pub best_per_iteration: Vec<f64>,
    pub init_records: Vec<EvaluationRecord>,
    pub history: Vec<EvaluationRecord>,
    pub model: Option<SurrogateModel>,
}

impl RunState {
    pub fn best_total(&self) -> f64 {
        self.best.iter().sum()
    }

    pub fn baseline_total(&self) -> f64 {
        self.baseline.iter().sum()
    }

    pub fn top(&self) -> usize {
        self.datasets.len() - 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| OptimizerError::Checkpoint(e.to_string()))
    }
}

fn label_fields(
    label: &std::result::Result<FeasibilityLabel, String>,
) -> (
    bool,
    Option<ViolationKind>,
    Option<f64>,
    Option<f64>,
    Option<String>,
) {
    match label {
        Ok(FeasibilityLabel::Feasible) => (true, None, None, None, None),
        Ok(FeasibilityLabel::Infeasible(v)) => {
            (false, Some(v.kind), Some(v.time), Some(v.margin), None)
        }
        Err(e) => (
            false,
            Some(ViolationKind::EvaluatorError),
            None,
            None,
            Some(e.clone()),
        ),
    }
}

fn evaluate(
    problem: &Problem,
    oracle: &dyn FeasibilityOracle,
    allocation: &[f64],
) -> std::result::Result<FeasibilityLabel, String> {
    let traj = problem.trajectory(allocation).map_err(|e| e.to_string())?;
    oracle.evaluate(&traj)
}

/// Find each level's boundary allocation and seed its dataset.
pub fn initialize(
    problem: &Problem,
    stack: &FidelityStack,
    config: &OptimizerConfig,
) -> Result<RunState> {
    config.validate(stack)?;
    let dim = problem.dim();
    let ratio = problem.smooth_ratio()?;
    let mut datasets = Vec::with_capacity(stack.len());
    let mut initial = Vec::with_capacity(stack.len());
    let mut init_records = Vec::new();
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
        .map_err(|source| OptimizerError::Initialization {
            level: j,
            name: level.name.clone(),
            source,
        })?;
        let reference = scaled.allocation.as_slice().to_vec();
        let mut data = FidelityDataset::new(j, reference.clone());
        match level.init {
            InitMethod::Lhs { points, low, high } => {
                let seed = mix_seed(config.seed, 0x1000 + j as u64);
                for x in lhs_candidates(&vec![(low, high); dim], points, seed)? {
                    let raw = denormalize(&x, &reference)?;
                    let clock = Instant::now();
                    let label = evaluate(problem, oracle, &raw);
                    let (feasible, kind, time, margin, error) = label_fields(&label);
                    init_records.push(EvaluationRecord {
                        phase: Phase::Init,
                        step: 0,
                        iteration: 0,
                        level: j,
                        total_time: raw.iter().sum(),
                        allocation: raw,
                        normalized: x.clone(),
                        feasible,
                        violation_kind: kind,
                        violation_time: time,
                        violation_margin: margin,
                        error,
                        branch: Branch::None,
                        score: None,
                        p_tilde: None,
                        latent_mean: None,
                        latent_std: None,
                        cost: level.cost,
                        seed,
                        best_total: f64::NAN,
                        wall_seconds: clock.elapsed().as_secs_f64(),
                    });
                    data.push(x, feasible);
                }
            }
            InitMethod::Scaling { points } => {
                for (eta, feasible) in scaling_grid(points) {
                    data.push(vec![eta; dim], feasible);
                }
            }
        }
        datasets.push(data);
        initial.push(reference);
    }
    let baseline = initial.last().expect("non-empty stack").clone();
    let total = baseline.iter().sum();
    for r in &mut init_records {
        r.best_total = total;
    }
    Ok(RunState {
        dim,
        datasets,
        initial,
        best: baseline.clone(),
        baseline,
        step: 0,
        iteration: 0,
        low_fidelity_in_iteration: 0,
        best_per_iteration: vec![total],
        init_records,
        history: Vec::new(),
        model: None,
    })
}

/// Optimizer loop state that is rebuilt rather than checkpointed.
pub struct Optimizer<'a> {
    pub problem: &'a Problem,
    pub stack: &'a FidelityStack,
    pub config: &'a OptimizerConfig,
    params: AcquisitionParams,
    covariance: Option<PerturbationCovariance>,
}

impl<'a> Optimizer<'a> {
    pub fn new(
        problem: &'a Problem,
        stack: &'a FidelityStack,
        config: &'a OptimizerConfig,
    ) -> Result<Self> {
        config.validate(stack)?;
        let dim = problem.dim();
        let use_lhs = match config.candidate_method {
            CandidateMethod::Auto => dim <= 2,
            CandidateMethod::Lhs => true,
            CandidateMethod::Perturb => false,
        };
        let covariance = (!use_lhs).then(|| perturbation_covariance(dim, config.acquisition.gamma));
        Ok(Self {
            problem,
            stack,
            config,
            params: config.acquisition_params(stack),
            covariance,
        })
    }

    fn check_state(&self, state: &RunState) -> Result<()> {
        if state.dim != self.problem.dim() || state.datasets.len() != self.stack.len() {
            return Err(OptimizerError::Checkpoint(format!(
                "state has {} segments and {} levels, problem has {} and {}",
                state.dim,
                state.datasets.len(),
                self.problem.dim(),
                self.stack.len()
            )));
        }
        Ok(())
    }

    /// Refit the surrogate, pick the next allocation and level, evaluate it
    /// and record the outcome.
    pub fn step(&self, state: &mut RunState) -> Result<()> {
        self.check_state(state)?;
        let clock = Instant::now();
        let full = state.step.is_multiple_of(self.config.full_refit_every);
        match &mut state.model {
            Some(model) => model.update(&state.datasets, &self.config.surrogate, full)?,
            None => {
                state.model = Some(crate::surrogate::train(
                    &state.datasets,
                    &self.config.surrogate,
                )?)
            }
        }
        let fitted = clock.elapsed().as_secs_f64();
        let model = state.model.as_ref().expect("trained above");
        let seed = mix_seed(self.config.seed, state.step as u64);
        let candidates = match &self.covariance {
            Some(cov) => perturb_candidates(&state.best, cov, self.params.candidates, seed)?,
            None => {
                let [lo, hi] = self.config.candidate_box;
                let bounds: Vec<(f64, f64)> = state.best.iter().map(|b| (b * lo, b * hi)).collect();
                lhs_candidates(&bounds, self.params.candidates, seed)?
            }
        };
        let top = self.stack.top();
        let cap = self.config.low_fidelity_cap(state.dim);
        let levels: Vec<usize> = if state.low_fidelity_in_iteration >= cap {
            vec![top]
        } else {
            (0..=top).collect()
        };
        let selection = select_next(&candidates, &levels, model, &self.params, &state.best)?;
        let selected = clock.elapsed().as_secs_f64();
        let level = selection.level;
        let x = selection.allocation.clone();
        let label = evaluate(self.problem, self.stack.levels[level].oracle.as_ref(), &x);
        let (feasible, kind, time, margin, error) = label_fields(&label);
        log::debug!(
            "step {}: fit {:.3} s, select {:.3} s, evaluate {:.3} s",
            state.step,
            fitted,
            selected - fitted,
            clock.elapsed().as_secs_f64() - selected
        );
        let normalized = normalize(&x, &state.datasets[level].reference)?;
        state.datasets[level].push(normalized.clone(), feasible);
        let total: f64 = x.iter().sum();
        if level == top {
            if feasible
                && total < state.best_total()
                && selection.scored.p_tilde >= self.params.final_threshold()
            {
                state.best = x.clone();
            }
            state.iteration += 1;
            state.low_fidelity_in_iteration = 0;
            state.best_per_iteration.push(state.best_total());
        } else {
            state.low_fidelity_in_iteration += 1;
        }
        state.history.push(EvaluationRecord {
            phase: Phase::Step,
            step: state.step,
            iteration: if level == top {
                state.iteration - 1
            } else {
                state.iteration
            },
            level,
            allocation: x,
            normalized,
            total_time: total,
            feasible,
            violation_kind: kind,
            violation_time: time,
            violation_margin: margin,
            error,
            branch: selection.branch,
            score: Some(selection.score),
            p_tilde: Some(selection.scored.p_tilde),
            latent_mean: Some(selection.scored.prediction.mean),
            latent_std: Some(selection.scored.prediction.std),
            cost: self.params.costs[level],
            seed,
            best_total: state.best_total(),
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        state.step += 1;
        Ok(())
    }

    /// Step until `config.iterations` iterations are complete, calling
    /// `on_iteration` after each one.
    pub fn run_from(
        &self,
        state: &mut RunState,
        mut on_iteration: impl FnMut(&RunState),
    ) -> Result<()> {
        self.check_state(state)?;
        while state.iteration < self.config.iterations {
            let before = state.iteration;
            self.step(state)?;
            if state.iteration > before {
                log::info!(
                    "iteration {} step {}: best {:.4} s (baseline {:.4} s)",
                    state.iteration,
                    state.step,
                    state.best_total(),
                    state.baseline_total()
                );
                on_iteration(state);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_total: f64,
    pub best: Vec<f64>,
    pub trajectory: Trajectory,
    pub state: RunState,
}

/// Initialize and run the full budget.
pub fn run(
    problem: &Problem,
    stack: &FidelityStack,
    config: &OptimizerConfig,
) -> Result<RunResult> {
    let mut state = initialize(problem, stack, config)?;
    Optimizer::new(problem, stack, config)?.run_from(&mut state, |_| {})?;
    finish(problem, state)
}

pub fn finish(problem: &Problem, state: RunState) -> Result<RunResult> {
    let trajectory = problem.trajectory(&state.best)?;
    Ok(RunResult {
        best_total: state.best_total(),
        best: state.best.clone(),
        trajectory,
        state,
    })
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn kind_str(k: Option<ViolationKind>) -> String {
    k.map(|k| {
        serde_json::to_value(k)
            .expect("enum")
            .as_str()
            .expect("string")
            .to_string()
    })
    .unwrap_or_default()
}

/// History CSV, one row per evaluation (initialization rows first). Wall-clock
/// time is left out so identical runs give identical files.
pub fn write_history_csv<W: Write>(state: &RunState, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "phase",
        "step",
        "iteration",
        "level",
        "branch",
        "total_time",
        "feasible",
        "score",
        "p_tilde",
        "latent_mean",
        "latent_std",
        "cost",
        "seed",
        "best_total",
        "violation_kind",
        "violation_time",
        "violation_margin",
        "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..state.dim).map(|i| format!("x{i}")));
    header.extend((0..state.dim).map(|i| format!("xn{i}")));
    w.write_record(&header)?;
    for r in state.init_records.iter().chain(&state.history) {
        let mut row = vec![
            match r.phase {
                Phase::Init => "init".to_string(),
                Phase::Step => "step".to_string(),
            },
            r.step.to_string(),
            r.iteration.to_string(),
            r.level.to_string(),
            r.branch.as_str().to_string(),
            r.total_time.to_string(),
            r.feasible.to_string(),
            opt_str(r.score),
            opt_str(r.p_tilde),
            opt_str(r.latent_mean),
            opt_str(r.latent_std),
            r.cost.to_string(),
            r.seed.to_string(),
            r.best_total.to_string(),
            kind_str(r.violation_kind),
            opt_str(r.violation_time),
            opt_str(r.violation_margin),
            r.error.clone().unwrap_or_default(),
        ];
        row.extend(r.allocation.iter().map(|v| v.to_string()));
        row.extend(r.normalized.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per evaluation.
pub fn write_timing_csv<W: Write>(state: &RunState, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["phase", "step", "level", "wall_seconds"])?;
    for r in state.init_records.iter().chain(&state.history) {
        let phase = if r.phase == Phase::Init {
            "init"
        } else {
            "step"
        };
        w.write_record([
            phase.to_string(),
            r.step.to_string(),
            r.level.to_string(),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Restore `wall_seconds` of every record from a timing CSV written for the
/// same run. Rows beyond the state's records are ignored.
pub fn read_timing_csv<R: Read>(state: &mut RunState, reader: R) -> Result<()> {
    let mut r = csv::Reader::from_reader(reader);
    let records = state
        .init_records
        .iter_mut()
        .chain(state.history.iter_mut());
    for (row, rec) in r.records().zip(records) {
        let row = row.map_err(|e| OptimizerError::History(e.to_string()))?;
        let secs = row.get(3).and_then(|v| v.parse().ok());
        rec.wall_seconds =
            secs.ok_or_else(|| OptimizerError::History(format!("bad timing row {row:?}")))?;
    }
    Ok(())
}

/// Step rows of a history CSV: `(iteration, level, allocation, best_total)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub iteration: usize,
    pub level: usize,
    pub feasible: bool,
    pub allocation: Vec<f64>,
    pub best_total: f64,
}

pub fn read_history_csv<R: Read>(reader: R) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| OptimizerError::History(e.to_string()))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| OptimizerError::History(format!("missing column {name}")))
    };
    let (phase, step, iteration, level, feasible, best) = (
        col("phase")?,
        col("step")?,
        col("iteration")?,
        col("level")?,
        col("feasible")?,
        col("best_total")?,
    );
    let xs: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x') && !h.starts_with("xn"))
        .map(|(i, _)| i)
        .collect();
    if xs.is_empty() {
        return Err(OptimizerError::History("no allocation columns".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| OptimizerError::History(e.to_string()))?;
        if &rec[phase] != "step" {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| OptimizerError::History(format!("{}: {e}", &rec[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse::<usize>()
                .map_err(|e| OptimizerError::History(format!("{}: {e}", &rec[i])))
        };
        rows.push(HistoryRow {
            step: int(step)?,
            iteration: int(iteration)?,
            level: int(level)?,
            feasible: &rec[feasible] == "true",
            allocation: xs.iter().map(|&i| num(i)).collect::<Result<Vec<f64>>>()?,
            best_total: num(best)?,
        });
    }
    Ok(rows)
}
