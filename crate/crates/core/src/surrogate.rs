//! Multi-fidelity feasibility classifier: one sparse variational GP per
//! fidelity level with a probit likelihood. Level 0 uses a plain RBF kernel;
//! level `j > 0` couples to level `j - 1` through that level's posterior mean
//!
//! ```text
//! k_j(x, x') = k_corr(x, x') · (σ_lin² f(x) f(x') + k_prev(f(x), f(x'))) + k_bias(x, x')
//! ```
//!
//! Inducing outputs are whitened (`u = L v`, `K_zz = L Lᵀ`) and `q(v) = N(m, S)`
//! with `S = L_S L_Sᵀ`. Levels are trained bottom-up; a trained level is frozen
//! while higher levels train on top of it.

use crate::stats::{log_normal_cdf_and_inverse_mills, normal_cdf, GaussHermite};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

const LOG_HYPER_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
const LOG_HYPER_MAX: f64 = 6.907_755_278_982_137;
const LOG_DIAG_MIN: f64 = -15.0;
const LOG_DIAG_MAX: f64 = 5.0;
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("level 0 has no training data")]
    NoData,
    #[error("level {level} is not trained (model has {trained} levels)")]
    UntrainedLevel { level: usize, trained: usize },
    #[error("dataset for level {level} has points of dimension {got}, expected {expected}")]
    DimensionMismatch {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error("dataset at position {position} declares level {level}")]
    LevelOrder { position: usize, level: usize },
    #[error("normalization reference for level {level} must be strictly positive with {expected} entries")]
    BadReference { level: usize, expected: usize },
    #[error("non-finite ELBO at level {level} with log-hyperparameters {log_hyper:?}")]
    NonFiniteElbo { level: usize, log_hyper: Vec<f64> },
    #[error("inducing covariance is not positive definite at level {level}")]
    NotPositiveDefinite { level: usize },
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Allocation in the level's normalized coordinates.
    pub x: Vec<f64>,
    pub feasible: bool,
}

/// Labeled allocations gathered at one fidelity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityDataset {
    pub level: usize,
    /// Raw allocation (seconds) that maps to the all-ones normalized point.
    pub reference: Vec<f64>,
    pub points: Vec<LabeledPoint>,
}

impl FidelityDataset {
    pub fn new(level: usize, reference: Vec<f64>) -> Self {
        Self {
            level,
            reference,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, feasible: bool) {
        self.points.push(LabeledPoint { x, feasible });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    /// SHA-256 over the reference and every point, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.level as u64).to_le_bytes());
        for r in &self.reference {
            h.update(r.to_le_bytes());
        }
        for p in &self.points {
            for v in &p.x {
                h.update(v.to_le_bytes());
            }
            h.update([p.feasible as u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rbf {
    pub variance: f64,
    pub lengthscale: f64,
}

/// `v · exp(-|x - x'|² / 2ℓ²)`.
pub fn rbf_kernel(x: &[f64], x2: &[f64], k: &Rbf) -> f64 {
    k.variance * (-0.5 * sq_dist(x, x2) / (k.lengthscale * k.lengthscale)).exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelHyperparams {
    Base(Rbf),
    /// `corr.variance` stays at 1; the scale is carried by `prev` and `linear_scale`.
    Coupled {
        corr: Rbf,
        prev: Rbf,
        linear_scale: f64,
        bias: Rbf,
    },
}

impl KernelHyperparams {
    fn initial(level: usize, cfg: &SurrogateConfig) -> Self {
        let ell = cfg.initial_lengthscale;
        if level == 0 {
            KernelHyperparams::Base(Rbf {
                variance: 1.0,
                lengthscale: ell,
            })
        } else {
            KernelHyperparams::Coupled {
                corr: Rbf {
                    variance: 1.0,
                    lengthscale: ell,
                },
                prev: Rbf {
                    variance: 1.0,
                    lengthscale: 1.0,
                },
                linear_scale: 1.0,
                bias: Rbf {
                    variance: 0.1,
                    lengthscale: ell,
                },
            }
        }
    }

    fn to_log(self) -> Vec<f64> {
        match self {
            KernelHyperparams::Base(k) => vec![k.variance.ln(), k.lengthscale.ln()],
            KernelHyperparams::Coupled {
                corr,
                prev,
                linear_scale,
                bias,
            } => vec![
                corr.lengthscale.ln(),
                prev.variance.ln(),
                prev.lengthscale.ln(),
                linear_scale.ln(),
                bias.variance.ln(),
                bias.lengthscale.ln(),
            ],
        }
    }

    fn from_log(coupled: bool, p: &[f64]) -> Self {
        let e = |i: usize| p[i].exp();
        if coupled {
            KernelHyperparams::Coupled {
                corr: Rbf {
                    variance: 1.0,
                    lengthscale: e(0),
                },
                prev: Rbf {
                    variance: e(1),
                    lengthscale: e(2),
                },
                linear_scale: e(3),
                bias: Rbf {
                    variance: e(4),
                    lengthscale: e(5),
                },
            }
        } else {
            KernelHyperparams::Base(Rbf {
                variance: e(0),
                lengthscale: e(1),
            })
        }
    }

    /// Kernel between `(x, f)` and `(x2, f2)`; `f` is the lower level's mean
    /// and is ignored by the base kernel. When `grad` is given, accumulates
    /// `weight · ∂k/∂(log-hyperparameter)` into it.
    fn eval(&self, x: &[f64], f: f64, x2: &[f64], f2: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
        let r2 = sq_dist(x, x2);
        match *self {
            KernelHyperparams::Base(k) => {
                let l2 = k.lengthscale * k.lengthscale;
                let val = k.variance * (-0.5 * r2 / l2).exp();
                if let Some((g, w)) = grad {
                    g[0] += w * val;
                    g[1] += w * val * r2 / l2;
                }
                val
            }
            KernelHyperparams::Coupled {
                corr,
                prev,
                linear_scale,
                bias,
            } => {
                let lc2 = corr.lengthscale * corr.lengthscale;
                let kc = (-0.5 * r2 / lc2).exp();
                let df2 = (f - f2) * (f - f2);
                let lp2 = prev.lengthscale * prev.lengthscale;
                let kp = prev.variance * (-0.5 * df2 / lp2).exp();
                let lin = linear_scale * linear_scale * f * f2;
                let lb2 = bias.lengthscale * bias.lengthscale;
                let kb = bias.variance * (-0.5 * r2 / lb2).exp();
                let val = kc * (lin + kp) + kb;
                if let Some((g, w)) = grad {
                    g[0] += w * kc * (lin + kp) * r2 / lc2;
                    g[1] += w * kc * kp;
                    g[2] += w * kc * kp * df2 / lp2;
                    g[3] += w * kc * 2.0 * lin;
                    g[4] += w * kb;
                    g[5] += w * kb * r2 / lb2;
                }
                val
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub max_inducing: usize,
    /// Epoch cap for a fresh fit.
    pub max_epochs: usize,
    /// Epoch cap when warm-starting from a previous fit.
    pub warm_epochs: usize,
    /// Epoch cap for a refit on fresh inducing points that starts from the
    /// previous posterior.
    pub refit_epochs: usize,
    pub quadrature_nodes: usize,
    /// Relative ELBO change that counts as converged.
    pub tolerance: f64,
    pub initial_lengthscale: f64,
    /// Added to `K_zz`, relative to the kernel's prior variance.
    pub jitter: f64,
    pub lbfgs_memory: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            max_inducing: 64,
            max_epochs: 500,
            warm_epochs: 8,
            refit_epochs: 60,
            quadrature_nodes: 20,
            tolerance: 1e-7,
            initial_lengthscale: 0.3,
            jitter: 1e-6,
            lbfgs_memory: 10,
        }
    }
}

/// Trained state of one fidelity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    pub hyper: KernelHyperparams,
    pub reference: Vec<f64>,
    /// Inducing inputs, one per row.
    pub inducing: DMatrix<f64>,
    /// Lower level's posterior mean at the inducing inputs (empty at level 0).
    pub inducing_features: Vec<f64>,
    /// Whitened variational mean.
    pub mean: DVector<f64>,
    /// Lower-triangular factor of the whitened variational covariance.
    pub chol_s: DMatrix<f64>,
    /// Cholesky factor of `K_zz` (with jitter).
    pub chol_kzz: DMatrix<f64>,
    /// `L⁻ᵀ m`, so the posterior mean is `k_z(x)ᵀ α`.
    pub alpha: DVector<f64>,
    pub data_hash: String,
    pub data_len: usize,
    /// ELBO after each accepted optimizer epoch of the latest fit.
    pub elbo_history: Vec<f64>,
}

/// Per-level GP classifiers, trained bottom-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub version: u32,
    pub dim: usize,
    pub levels: Vec<LevelState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub std: f64,
    /// `P(feasible | x) = Φ(μ / √(1 + σ²))`.
    pub probability: f64,
}

impl SurrogateModel {
    pub fn trained_levels(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, level: usize) -> Result<&LevelState> {
        self.levels
            .get(level)
            .ok_or(SurrogateError::UntrainedLevel {
                level,
                trained: self.levels.len(),
            })
    }

    /// Maps a point from `level`'s normalized coordinates into `target`'s.
    fn map_coords(&self, x: &[f64], level: usize, target: usize) -> Vec<f64> {
        let from = &self.levels[level].reference;
        let to = &self.levels[target].reference;
        x.iter()
            .zip(from)
            .zip(to)
            .map(|((v, a), b)| v * a / b)
            .collect()
    }

    /// Posterior latent mean of `level` at `x` (given in that level's coordinates).
    pub fn latent_mean(&self, level: usize, x: &[f64]) -> Result<f64> {
        let state = self.level(level)?;
        let f = self.feature(level, x)?;
        let mut mu = 0.0;
        for (i, a) in state.alpha.iter().enumerate() {
            let z: Vec<f64> = state.inducing.row(i).iter().copied().collect();
            mu += a * state.hyper.eval(
                x,
                f,
                &z,
                state.inducing_features.get(i).copied().unwrap_or(0.0),
                None,
            );
        }
        Ok(mu)
    }

    /// The lower level's mean at `x`, the extra kernel input for `level`.
    fn feature(&self, level: usize, x: &[f64]) -> Result<f64> {
        if level == 0 {
            Ok(0.0)
        } else {
            self.latent_mean(level - 1, &self.map_coords(x, level, level - 1))
        }
    }

    /// Prediction for an allocation in seconds, normalized by the level's reference.
    pub fn predict_raw(&self, allocation: &[f64], level: usize) -> Result<PosteriorPrediction> {
        let state = self.level(level)?;
        if allocation.len() != self.dim {
            return Err(SurrogateError::DimensionMismatch {
                level,
                expected: self.dim,
                got: allocation.len(),
            });
        }
        let x: Vec<f64> = allocation
            .iter()
            .zip(&state.reference)
            .map(|(a, r)| a / r)
            .collect();
        self.predict(&x, level)
    }

    pub fn predict(&self, x: &[f64], level: usize) -> Result<PosteriorPrediction> {
        let state = self.level(level)?;
        if x.len() != self.dim {
            return Err(SurrogateError::DimensionMismatch {
                level,
                expected: self.dim,
                got: x.len(),
            });
        }
        let f = self.feature(level, x)?;
        let m = state.inducing.nrows();
        let kz = DVector::from_fn(m, |i, _| {
            let z: Vec<f64> = state.inducing.row(i).iter().copied().collect();
            state.hyper.eval(
                x,
                f,
                &z,
                state.inducing_features.get(i).copied().unwrap_or(0.0),
                None,
            )
        });
        let kxx = state.hyper.eval(x, f, x, f, None);
        let a = state
            .chol_kzz
            .solve_lower_triangular(&kz)
            .expect("triangular factor");
        let mean = a.dot(&state.mean);
        let sa = state.chol_s.tr_mul(&a);
        let var = (kxx - a.norm_squared() + sa.norm_squared()).max(MIN_VARIANCE);
        let std = var.sqrt();
        let probability =
            normal_cdf(mean / (1.0 + var).sqrt()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        Ok(PosteriorPrediction {
            mean,
            std,
            probability,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: SurrogateModel =
            serde_json::from_str(s).map_err(|e| SurrogateError::Format(e.to_string()))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(SurrogateError::Format(format!(
                "unsupported version {}",
                model.version
            )));
        }
        Ok(model)
    }

    /// Refit after the datasets changed. Unchanged levels whose lower levels
    /// are also unchanged are kept as they are. Changed levels warm-start from
    /// their previous fit unless `full` is set, in which case inducing points
    /// and variational parameters are re-initialized (hyperparameters kept).
    pub fn update(
        &mut self,
        datasets: &[FidelityDataset],
        cfg: &SurrogateConfig,
        full: bool,
    ) -> Result<()> {
        validate(datasets)?;
        let mut dirty = false;
        for (j, data) in datasets.iter().enumerate() {
            if data.is_empty() {
                self.levels.truncate(j);
                break;
            }
            let hash = data.hash();
            let previous = self.levels.get(j).cloned();
            if let Some(prev) = &previous {
                if !dirty && !full && prev.data_hash == hash {
                    continue;
                }
            }
            dirty = true;
            let lower = SurrogateModel {
                version: MODEL_FORMAT_VERSION,
                dim: self.dim,
                levels: self.levels[..j].to_vec(),
            };
            let state = fit_level(&lower, data, j, previous.as_ref(), full, cfg)?;
            match self.levels.get_mut(j) {
                Some(slot) => *slot = state,
                None => self.levels.push(state),
            }
        }
        Ok(())
    }
}

fn validate(datasets: &[FidelityDataset]) -> Result<()> {
    let first = datasets.first().ok_or(SurrogateError::NoData)?;
    if first.is_empty() {
        return Err(SurrogateError::NoData);
    }
    let dim = first.dim();
    for (pos, d) in datasets.iter().enumerate() {
        if d.level != pos {
            return Err(SurrogateError::LevelOrder {
                position: pos,
                level: d.level,
            });
        }
        if d.reference.len() != dim || d.reference.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SurrogateError::BadReference {
                level: pos,
                expected: dim,
            });
        }
        if let Some(p) = d.points.iter().find(|p| p.x.len() != dim) {
            return Err(SurrogateError::DimensionMismatch {
                level: pos,
                expected: dim,
                got: p.x.len(),
            });
        }
    }
    Ok(())
}

/// Fit every level that has data, lowest first.
pub fn train(datasets: &[FidelityDataset], cfg: &SurrogateConfig) -> Result<SurrogateModel> {
    validate(datasets)?;
    let mut model = SurrogateModel {
        version: MODEL_FORMAT_VERSION,
        dim: datasets[0].dim(),
        levels: Vec::new(),
    };
    model.update(datasets, cfg, true)?;
    Ok(model)
}

pub fn predict(model: &SurrogateModel, x: &[f64], level: usize) -> Result<PosteriorPrediction> {
    model.predict(x, level)
}

/// Composite kernel of `level >= 1` evaluated with the model's trained
/// hyperparameters and lower-level mean. Level 0 returns the plain RBF.
pub fn mf_kernel(x: &[f64], x2: &[f64], level: usize, model: &SurrogateModel) -> Result<f64> {
    let state = model.level(level)?;
    let f = model.feature(level, x)?;
    let f2 = model.feature(level, x2)?;
    Ok(state.hyper.eval(x, f, x2, f2, None))
}

/// Deterministic k-means: farthest-point seeding from the point nearest the
/// centroid, then Lloyd iterations. Returns `min(k, n)` centers as rows.
pub fn kmeans(points: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let n = points.len();
    let d = points[0].len();
    if n <= k {
        return DMatrix::from_fn(n, d, |i, j| points[i][j]);
    }
    let centroid: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let first = (0..n)
        .min_by(|&a, &b| sq_dist(&points[a], &centroid).total_cmp(&sq_dist(&points[b], &centroid)))
        .unwrap();
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .unwrap();
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[next]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                for j in 0..d {
                    center[j] = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    DMatrix::from_fn(k, d, |i, j| centers[i][j])
}

/// Training problem of one level with frozen lower levels.
struct LevelProblem {
    coupled: bool,
    n_hyper: usize,
    x: Vec<Vec<f64>>,
    fx: Vec<f64>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
    fz: Vec<f64>,
    gh: GaussHermite,
    jitter: f64,
}

/// Everything the ELBO evaluation produces besides its value and gradient.
struct Evaluation {
    elbo: f64,
    grad: Vec<f64>,
    chol_kzz: DMatrix<f64>,
}

impl LevelProblem {
    fn m(&self) -> usize {
        self.z.len()
    }

    fn n_params(&self) -> usize {
        let m = self.m();
        self.n_hyper + m + m * (m + 1) / 2
    }

    fn pack(&self, hyper: &[f64], mean: &DVector<f64>, chol_s: &DMatrix<f64>) -> Vec<f64> {
        let m = self.m();
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(hyper);
        p.extend(mean.iter());
        for c in 0..m {
            p.push(chol_s[(c, c)].ln());
            for r in c + 1..m {
                p.push(chol_s[(r, c)]);
            }
        }
        p
    }

    fn unpack(&self, p: &[f64]) -> (KernelHyperparams, DVector<f64>, DMatrix<f64>) {
        let m = self.m();
        let hyper = KernelHyperparams::from_log(self.coupled, &p[..self.n_hyper]);
        let mean = DVector::from_column_slice(&p[self.n_hyper..self.n_hyper + m]);
        let mut chol_s = DMatrix::zeros(m, m);
        let mut k = self.n_hyper + m;
        for c in 0..m {
            chol_s[(c, c)] = p[k].exp();
            k += 1;
            for r in c + 1..m {
                chol_s[(r, c)] = p[k];
                k += 1;
            }
        }
        (hyper, mean, chol_s)
    }

    fn project(&self, p: &mut [f64]) {
        for v in &mut p[..self.n_hyper] {
            *v = v.clamp(LOG_HYPER_MIN, LOG_HYPER_MAX);
        }
        let m = self.m();
        let mut k = self.n_hyper + m;
        for c in 0..m {
            p[k] = p[k].clamp(LOG_DIAG_MIN, LOG_DIAG_MAX);
            k += m - c;
        }
    }

    fn prior_variance(hyper: &KernelHyperparams) -> f64 {
        match hyper {
            KernelHyperparams::Base(k) => k.variance,
            KernelHyperparams::Coupled { prev, bias, .. } => prev.variance + bias.variance,
        }
    }

    fn cholesky_kzz(
        &self,
        hyper: &KernelHyperparams,
        kzz: &DMatrix<f64>,
    ) -> Option<(DMatrix<f64>, f64)> {
        let base = self.jitter * Self::prior_variance(hyper).max(1e-12);
        let m = self.m();
        for attempt in 0..6 {
            let jitter = base * 10f64.powi(attempt);
            let mut k = kzz.clone();
            for i in 0..m {
                k[(i, i)] += jitter;
            }
            if let Some(ch) = Cholesky::new(k) {
                return Some((ch.l(), jitter));
            }
        }
        None
    }

    /// ELBO and its gradient with respect to the packed parameters.
    fn evaluate(&self, p: &[f64], with_grad: bool) -> Option<Evaluation> {
        let (hyper, mean, chol_s) = self.unpack(p);
        let m = self.m();
        let n = self.x.len();
        let kzz = DMatrix::from_fn(m, m, |i, j| {
            hyper.eval(&self.z[i], self.fz[i], &self.z[j], self.fz[j], None)
        });
        let kzx = DMatrix::from_fn(m, n, |i, j| {
            hyper.eval(&self.z[i], self.fz[i], &self.x[j], self.fx[j], None)
        });
        let (l, _) = self.cholesky_kzz(&hyper, &kzz)?;
        let linv = l.solve_lower_triangular(&DMatrix::identity(m, m))?;
        // At = L⁻¹ K_zx, column n is a_n
        let at = &linv * &kzx;
        let mu = at.tr_mul(&mean);
        let lsa = chol_s.transpose() * &at;
        let mut ell = 0.0;
        let mut g_mu = DVector::zeros(n);
        let mut g_var = DVector::zeros(n);
        for j in 0..n {
            let kxx = hyper.eval(&self.x[j], self.fx[j], &self.x[j], self.fx[j], None);
            let var = (kxx - at.column(j).norm_squared() + lsa.column(j).norm_squared())
                .max(MIN_VARIANCE);
            let sd = var.sqrt();
            let y = self.y[j];
            let (mut e, mut d1, mut d2) = (0.0, 0.0, 0.0);
            for (z, w) in self.gh.nodes.iter().zip(&self.gh.weights) {
                let t = y * (mu[j] + sd * z);
                let (lc, im) = log_normal_cdf_and_inverse_mills(t);
                e += w * lc;
                d1 += w * y * im;
                d2 += w * -im * (t + im);
            }
            ell += e;
            g_mu[j] = d1;
            g_var[j] = 0.5 * d2;
        }
        let log_det_s: f64 = (0..m).map(|i| 2.0 * chol_s[(i, i)].ln()).sum();
        let kl = 0.5 * (chol_s.norm_squared() + mean.norm_squared() - m as f64 - log_det_s);
        let elbo = ell - kl;
        if !elbo.is_finite() {
            return None;
        }
        if !with_grad {
            return Some(Evaluation {
                elbo,
                grad: Vec::new(),
                chol_kzz: l,
            });
        }

        let mut grad = vec![0.0; self.n_params()];
        // variational mean
        let gm = &at * &g_mu - &mean;
        grad[self.n_hyper..self.n_hyper + m].copy_from_slice(gm.as_slice());
        // variational factor
        let mut at_g = at.clone();
        for j in 0..n {
            at_g.column_mut(j).scale_mut(g_var[j]);
        }
        let weighted = &at_g * at.transpose();
        let gl = (&weighted * &chol_s) * 2.0 - &chol_s;
        let mut k = self.n_hyper + m;
        for c in 0..m {
            let d = chol_s[(c, c)];
            grad[k] = (gl[(c, c)] + 1.0 / d) * d;
            k += 1;
            for r in c + 1..m {
                grad[k] = gl[(r, c)];
                k += 1;
            }
        }
        // kernel hyperparameters through At and diag K_xx
        let s_minus_i = {
            let mut s = &chol_s * chol_s.transpose();
            for i in 0..m {
                s[(i, i)] -= 1.0;
            }
            s
        };
        // bar_at = m g_muᵀ + 2 (S - I) At_g, never formed
        let mut bar_kzx = ((linv.transpose() * &s_minus_i) * &at_g) * 2.0;
        bar_kzx.ger(1.0, &linv.tr_mul(&mean), &g_mu, 1.0);
        let at_gmu = &gm + &mean;
        let mut bar_at_att = (&s_minus_i * &weighted) * 2.0;
        bar_at_att.ger(1.0, &mean, &at_gmu, 1.0);
        let bar_l = -(linv.transpose() * &bar_at_att);
        let mut phi = l.transpose() * bar_l.lower_triangle();
        for c in 0..m {
            for r in 0..c {
                phi[(r, c)] = 0.0;
            }
            phi[(c, c)] *= 0.5;
        }
        let x_mat = linv.transpose() * &phi * &linv;
        let bar_kzz = (&x_mat + x_mat.transpose()) * 0.5;
        let gh = &mut grad[..self.n_hyper];
        for i in 0..m {
            for j in 0..m {
                hyper.eval(
                    &self.z[i],
                    self.fz[i],
                    &self.z[j],
                    self.fz[j],
                    Some((gh, bar_kzz[(i, j)])),
                );
            }
            if let KernelHyperparams::Base(k) = hyper {
                // reuse the cached kernel values
                let inv_l2 = 1.0 / (k.lengthscale * k.lengthscale);
                for j in 0..n {
                    let wv = bar_kzx[(i, j)] * kzx[(i, j)];
                    gh[0] += wv;
                    gh[1] += wv * sq_dist(&self.z[i], &self.x[j]) * inv_l2;
                }
            } else {
                for j in 0..n {
                    hyper.eval(
                        &self.z[i],
                        self.fz[i],
                        &self.x[j],
                        self.fx[j],
                        Some((gh, bar_kzx[(i, j)])),
                    );
                }
            }
        }
        for j in 0..n {
            hyper.eval(
                &self.x[j],
                self.fx[j],
                &self.x[j],
                self.fx[j],
                Some((gh, g_var[j])),
            );
        }
        Some(Evaluation {
            elbo,
            grad,
            chol_kzz: l,
        })
    }
}

/// Limited-memory BFGS ascent with backtracking that only accepts strict
/// ELBO increases, so the per-epoch ELBO trace is monotone.
fn maximize(
    problem: &LevelProblem,
    start: Vec<f64>,
    max_epochs: usize,
    cfg: &SurrogateConfig,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut x = start;
    problem.project(&mut x);
    let mut cur = problem.evaluate(&x, true)?;
    let mut history = vec![cur.elbo];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut stalls = 0;
    for _ in 0..max_epochs {
        // two-loop recursion on the negated objective
        let mut q: Vec<f64> = cur.grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / cur.grad.iter().map(|g| g.abs()).fold(1.0, f64::max),
        };
        for v in &mut q {
            *v *= gamma;
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &cur.grad);
        if !(slope > 0.0) {
            dir = cur.grad.clone();
            slope = dot(&dir, &dir);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            problem.project(&mut trial);
            if let Some(ev) = problem.evaluate(&trial, true) {
                if ev.elbo > cur.elbo && ev.elbo >= cur.elbo + 1e-4 * step * slope {
                    accepted = Some((trial, ev));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next, ev)) = accepted else { break };
        let s: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = cur.grad.iter().zip(&ev.grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > cfg.lbfgs_memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let gain = ev.elbo - cur.elbo;
        x = next;
        cur = ev;
        history.push(cur.elbo);
        if gain <= cfg.tolerance * cur.elbo.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Some((x, history))
}

/// Whitened variational parameters on the problem's inducing inputs that
/// reproduce the previous fit's joint posterior there.
fn project_posterior(
    prev: &LevelState,
    problem: &LevelProblem,
    hyper: &KernelHyperparams,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let m = problem.m();
    let old = prev.inducing.nrows();
    let old_z: Vec<Vec<f64>> = (0..old)
        .map(|i| prev.inducing.row(i).iter().copied().collect())
        .collect();
    let old_f = |i: usize| prev.inducing_features.get(i).copied().unwrap_or(0.0);
    let k_new = DMatrix::from_fn(m, m, |i, j| {
        hyper.eval(
            &problem.z[i],
            problem.fz[i],
            &problem.z[j],
            problem.fz[j],
            None,
        )
    });
    let k_cross = DMatrix::from_fn(m, old, |i, j| {
        prev.hyper
            .eval(&problem.z[i], problem.fz[i], &old_z[j], old_f(j), None)
    });
    let a = prev
        .chol_kzz
        .solve_lower_triangular(&k_cross.transpose())?
        .transpose();
    let mu = &a * &prev.mean;
    let as_ = &a * &prev.chol_s;
    let cov = &k_new - &a * a.transpose() + &as_ * as_.transpose();
    let (l, _) = problem.cholesky_kzz(hyper, &k_new)?;
    let mean = l.solve_lower_triangular(&mu)?;
    let half = l.solve_lower_triangular(&cov)?;
    let mut s = l.solve_lower_triangular(&half.transpose())?;
    s = (&s + s.transpose()) * 0.5;
    for i in 0..m {
        s[(i, i)] += 1e-8;
    }
    let chol_s = Cholesky::new(s)?.l();
    Some((mean, chol_s))
}

fn fit_level(
    lower: &SurrogateModel,
    data: &FidelityDataset,
    level: usize,
    previous: Option<&LevelState>,
    full: bool,
    cfg: &SurrogateConfig,
) -> Result<LevelState> {
    let x: Vec<Vec<f64>> = data.points.iter().map(|p| p.x.clone()).collect();
    let y: Vec<f64> = data
        .points
        .iter()
        .map(|p| if p.feasible { 1.0 } else { -1.0 })
        .collect();
    let features = |pts: &[Vec<f64>]| -> Result<Vec<f64>> {
        if level == 0 {
            return Ok(vec![0.0; pts.len()]);
        }
        let to = &lower.levels[level - 1].reference;
        pts.iter()
            .map(|p| {
                let mapped: Vec<f64> = p
                    .iter()
                    .zip(&data.reference)
                    .zip(to)
                    .map(|((v, a), b)| v * a / b)
                    .collect();
                lower.latent_mean(level - 1, &mapped)
            })
            .collect()
    };
    let fx = features(&x)?;

    let target_m = cfg.max_inducing.min(x.len()).max(1);
    let rows = |z: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..z.nrows())
            .map(|i| z.row(i).iter().copied().collect())
            .collect()
    };
    let warm = previous.filter(|_| !full).and_then(|prev| {
        let pz = rows(&prev.inducing);
        if x.len() > cfg.max_inducing {
            // inducing points summarize the data; keep them between full refits
            (pz.len() == target_m).then_some((pz, prev))
        } else if pz.len() <= x.len() && pz.iter().zip(&x).all(|(a, b)| a == b) {
            // inducing points are the data; the old points form a prefix and the
            // whitened posterior extends by a standard-normal block
            Some((x.clone(), prev))
        } else {
            None
        }
    });
    let reused = warm.is_some();
    let (z, start_hyper, mean, chol_s, epochs) = match warm {
        Some((z, prev)) => {
            let m = z.len();
            let old = prev.mean.len();
            let mut mean = DVector::zeros(m);
            mean.rows_mut(0, old).copy_from(&prev.mean);
            let mut chol_s = DMatrix::identity(m, m);
            chol_s.view_mut((0, 0), (old, old)).copy_from(&prev.chol_s);
            (z, prev.hyper, mean, chol_s, cfg.warm_epochs)
        }
        None => {
            let z = rows(&kmeans(&x, target_m));
            let m = z.len();
            let hyper =
                previous.map_or_else(|| KernelHyperparams::initial(level, cfg), |p| p.hyper);
            (
                z,
                hyper,
                DVector::zeros(m),
                DMatrix::identity(m, m),
                cfg.max_epochs,
            )
        }
    };
    let fz = features(&z)?;
    let coupled = level > 0;
    let start_log = start_hyper.to_log();
    let problem = LevelProblem {
        coupled,
        n_hyper: start_log.len(),
        x,
        fx,
        y,
        z,
        fz,
        gh: GaussHermite::new(cfg.quadrature_nodes),
        jitter: cfg.jitter,
    };
    let (mean, chol_s, epochs) = match previous
        .filter(|_| !reused)
        .and_then(|prev| project_posterior(prev, &problem, &start_hyper))
    {
        Some((mean, chol_s)) => (mean, chol_s, cfg.refit_epochs),
        None => (mean, chol_s, epochs),
    };
    let start = problem.pack(&start_log, &mean, &chol_s);
    let clock = std::time::Instant::now();
    let (params, history) =
        maximize(&problem, start, epochs, cfg).ok_or(SurrogateError::NonFiniteElbo {
            level,
            log_hyper: start_log.clone(),
        })?;
    log::debug!(
        "level {level}: {} points, {} inducing, {} epochs in {:.3} s",
        problem.x.len(),
        problem.m(),
        history.len() - 1,
        clock.elapsed().as_secs_f64()
    );
    let (hyper, mean, chol_s) = problem.unpack(&params);
    let final_eval = problem
        .evaluate(&params, false)
        .ok_or(SurrogateError::NonFiniteElbo {
            level,
            log_hyper: params[..problem.n_hyper].to_vec(),
        })?;
    let l = final_eval.chol_kzz;
    let alpha = l
        .tr_solve_lower_triangular(&mean)
        .ok_or(SurrogateError::NotPositiveDefinite { level })?;
    let m = problem.m();
    let d = data.dim();
    Ok(LevelState {
        hyper,
        reference: data.reference.clone(),
        inducing: DMatrix::from_fn(m, d, |i, j| problem.z[i][j]),
        inducing_features: if coupled {
            problem.fz.clone()
        } else {
            Vec::new()
        },
        mean,
        chol_s,
        chol_kzz: l,
        alpha,
        data_hash: data.hash(),
        data_len: data.len(),
        elbo_history: history,
    })
}
