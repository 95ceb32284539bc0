//! Candidate generation and the cost-aware exploration/exploitation scores
//! that pick the next allocation and fidelity level to evaluate.

use crate::stats::normal_cdf;
use crate::surrogate::{PosteriorPrediction, SurrogateError, SurrogateModel};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("invalid acquisition parameters: {0}")]
    InvalidParams(String),
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("no fidelity level to score")]
    NoLevels,
    #[error("only {accepted} of {draws} perturbations were strictly positive; use a smaller perturbation scale")]
    DegenerateScale { accepted: usize, draws: usize },
    #[error("invalid bounds for dimension {0}")]
    InvalidBounds(usize),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

pub type Result<T> = std::result::Result<T, AcquisitionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionParams {
    /// Nominal cost per evaluation at each level, lowest fidelity first.
    pub costs: Vec<f64>,
    /// Minimum penalized feasibility probability for exploitation, per level.
    pub thresholds: Vec<f64>,
    /// Standard deviations subtracted from the latent mean in `P̃`.
    pub beta: f64,
    /// Confidence the top level must show before a new best is accepted.
    /// Defaults to the top level's threshold.
    pub final_threshold: Option<f64>,
    pub candidates: usize,
    /// Diagonal of the perturbation covariance.
    pub gamma: f64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self {
            costs: vec![1.0, 10.0],
            thresholds: vec![0.1, 0.4],
            beta: 3.0,
            final_threshold: None,
            candidates: 100,
            gamma: 0.2,
        }
    }
}

impl AcquisitionParams {
    pub fn levels(&self) -> usize {
        self.costs.len()
    }

    pub fn final_threshold(&self) -> f64 {
        self.final_threshold
            .unwrap_or_else(|| *self.thresholds.last().expect("validated params"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AcquisitionError::InvalidParams(m.to_string()));
        if self.costs.is_empty() || self.costs.len() != self.thresholds.len() {
            return bad("costs and thresholds need one entry per level");
        }
        if self.costs.iter().any(|c| !(c.is_finite() && *c > 0.0))
            || self.costs.windows(2).any(|w| w[1] < w[0])
        {
            return bad("costs must be positive and non-decreasing in fidelity");
        }
        if self
            .thresholds
            .iter()
            .chain(self.final_threshold.iter())
            .any(|h| !(*h > 0.0 && *h < 1.0))
        {
            return bad("thresholds must lie in (0, 1)");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.candidates == 0 {
            return bad("candidate count must be >= 1");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        Ok(())
    }
}

/// Exploration score `-|μ|/σ · C`: largest (zero) on the decision boundary,
/// and penalized harder at expensive levels.
pub fn alpha_explore(pred: &PosteriorPrediction, cost: f64) -> f64 {
    -pred.mean.abs() / pred.std * cost
}

/// Feasibility probability of the variance-penalized latent `μ - βσ`.
pub fn p_tilde(pred: &PosteriorPrediction, beta: f64) -> f64 {
    normal_cdf((pred.mean - beta * pred.std) / (1.0 + pred.std * pred.std).sqrt())
}

/// Total-time reduction relative to the incumbent, in seconds.
pub fn expected_improvement(x: &[f64], x_best: &[f64]) -> f64 {
    x_best.iter().sum::<f64>() - x.iter().sum::<f64>()
}

/// `EI · P̃` when `P̃` clears the level's threshold, otherwise zero.
pub fn alpha_exploit(improvement: f64, p_tilde: f64, threshold: f64) -> f64 {
    if p_tilde >= threshold {
        improvement * p_tilde
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Exploit,
    Explore,
    /// Chosen outside the acquisition, e.g. initialization data.
    None,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Exploit => "exploit",
            Branch::Explore => "explore",
            Branch::None => "none",
        }
    }
}

/// Scores of one candidate at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub level: usize,
    pub total: f64,
    pub prediction: PosteriorPrediction,
    pub p_tilde: f64,
    pub exploit: f64,
    pub explore: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub allocation: Vec<f64>,
    pub level: usize,
    pub branch: Branch,
    pub score: f64,
    pub scored: Scored,
}

/// Score every candidate at every allowed level. Candidates are allocations
/// in seconds.
pub fn score_candidates(
    candidates: &[Vec<f64>],
    levels: &[usize],
    model: &SurrogateModel,
    params: &AcquisitionParams,
    x_best: &[f64],
) -> Result<Vec<Scored>> {
    let mut out = Vec::with_capacity(candidates.len() * levels.len());
    for (index, x) in candidates.iter().enumerate() {
        let improvement = expected_improvement(x, x_best);
        let total = x.iter().sum();
        for &level in levels {
            let prediction = model.predict_raw(x, level)?;
            let pt = p_tilde(&prediction, params.beta);
            out.push(Scored {
                index,
                level,
                total,
                prediction,
                p_tilde: pt,
                exploit: alpha_exploit(improvement, pt, params.thresholds[level]),
                explore: alpha_explore(&prediction, params.costs[level]),
            });
        }
    }
    Ok(out)
}

/// Pick the argmax of the exploitation score when any is positive, else the
/// argmax of the exploration score. Ties go to the lower level, then the
/// smaller total time, then the earlier candidate.
pub fn select_next(
    candidates: &[Vec<f64>],
    levels: &[usize],
    model: &SurrogateModel,
    params: &AcquisitionParams,
    x_best: &[f64],
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    if levels.is_empty() {
        return Err(AcquisitionError::NoLevels);
    }
    let scored = score_candidates(candidates, levels, model, params, x_best)?;
    let (branch, key): (Branch, fn(&Scored) -> f64) = if scored.iter().any(|s| s.exploit > 0.0) {
        (Branch::Exploit, |s| s.exploit)
    } else {
        (Branch::Explore, |s| s.explore)
    };
    let best = scored
        .iter()
        .min_by(|a, b| {
            key(b)
                .total_cmp(&key(a))
                .then(a.level.cmp(&b.level))
                .then(a.total.total_cmp(&b.total))
                .then(a.index.cmp(&b.index))
        })
        .expect("non-empty");
    Ok(Selection {
        allocation: candidates[best.index].clone(),
        level: best.level,
        branch,
        score: key(best),
        scored: *best,
    })
}

/// Third-order finite differencing with zero padding on both ends: the
/// `(m + 3) × m` full convolution with stencil `(-1, 3, -3, 1)`.
pub fn third_difference_matrix(m: usize) -> DMatrix<f64> {
    let stencil = [-1.0, 3.0, -3.0, 1.0];
    DMatrix::from_fn(m + 3, m, |r, c| {
        if r >= c && r - c < 4 {
            stencil[r - c]
        } else {
            0.0
        }
    })
}

/// Covariance of the multiplicative perturbations used to generate candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCovariance {
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
    /// `trace(AᵀA Σ)`.
    pub objective: f64,
}

/// Smallest `trace(AᵀA Σ)` over `Σ ⪰ 0` with `Σ_ii = γ`: the perturbation
/// covariance with the least expected third-difference energy.
///
/// Solved on the factorization `Σ = V Vᵀ` with rows `|v_i|² = γ` by exact
/// block-coordinate minimization over rows; with as many columns as rows the
/// factorized problem has no spurious local minima.
pub fn perturbation_covariance(m: usize, gamma: f64) -> PerturbationCovariance {
    assert!(m >= 1, "dimension must be >= 1");
    let gamma = gamma.max(1e-12);
    let a = third_difference_matrix(m);
    let c = a.transpose() * &a;
    let r = gamma.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    for i in 0..m {
        let n = v.row(i).norm();
        v.row_mut(i).scale_mut(r / n);
    }
    let objective = |v: &DMatrix<f64>| (&c * v * v.transpose()).trace();
    let mut prev = objective(&v);
    for _ in 0..20_000 {
        for i in 0..m {
            let mut g = DVector::<f64>::zeros(m).transpose();
            for j in 0..m {
                if j != i {
                    g += v.row(j) * c[(i, j)];
                }
            }
            let n = g.norm();
            if n > 0.0 {
                v.set_row(i, &(g * (-r / n)));
            }
        }
        let cur = objective(&v);
        if (prev - cur).abs() <= 1e-15 * prev.abs().max(gamma) {
            break;
        }
        prev = cur;
    }
    let mut sigma = &v * v.transpose();
    sigma = (&sigma + sigma.transpose()) * 0.5;
    for i in 0..m {
        sigma[(i, i)] = gamma;
    }
    let objective = (&c * &sigma).trace();
    PerturbationCovariance {
        sigma,
        gamma,
        objective,
    }
}

/// Symmetric square root factor `B` with `B Bᵀ = Σ`, negative eigenvalues clipped.
fn sqrt_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sigma.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// `n` candidates `x̄ ⊙ (1 + ε)`, `ε ~ N(0, Σ)`, keeping only strictly
/// positive ones, with at most `10 n` draws.
pub fn perturb_candidates(
    x_best: &[f64],
    cov: &PerturbationCovariance,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let m = x_best.len();
    let b = sqrt_factor(&cov.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 10 * n;
    let mut out = Vec::with_capacity(n);
    let mut draws = 0;
    while out.len() < n && draws < cap {
        draws += 1;
        let xi = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = &b * xi;
        let cand: Vec<f64> = x_best
            .iter()
            .zip(eps.iter())
            .map(|(x, e)| x * (1.0 + e))
            .collect();
        if cand.iter().all(|v| *v > 0.0) {
            out.push(cand);
        }
    }
    if out.len() < n {
        return Err(AcquisitionError::DegenerateScale {
            accepted: out.len(),
            draws,
        });
    }
    Ok(out)
}

/// Latin hypercube sample: along every axis each of the `n` equal strata
/// holds exactly one point.
pub fn lhs_candidates(bounds: &[(f64, f64)], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    for (i, (lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(AcquisitionError::InvalidBounds(i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; bounds.len()]; n];
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (p, s) in points.iter_mut().zip(strata) {
            let u: f64 = rng.random();
            p[d] = lo + (hi - lo) * (s as f64 + u) / n as f64;
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pred(mean: f64, std: f64) -> PosteriorPrediction {
        PosteriorPrediction {
            mean,
            std,
            probability: normal_cdf(mean / (1.0 + std * std).sqrt()),
        }
    }

    #[test]
    fn score_reference_values() {
        assert_eq!(alpha_explore(&pred(1.0, 0.5), 1.0), -2.0);
        assert_eq!(alpha_explore(&pred(0.0, 0.5), 7.0), 0.0);
        assert_eq!(
            alpha_explore(&pred(-0.4, 0.5), 2.0),
            2.0 * alpha_explore(&pred(-0.4, 0.5), 1.0)
        );
        assert_relative_eq!(p_tilde(&pred(1.0, 0.5), 3.0), 0.327_360_423, epsilon = 1e-8);
        let p = pred(0.3, 0.8);
        assert_eq!(p_tilde(&p, 0.0), p.probability);
        assert!(p_tilde(&p, 1e6) < 1e-12);
        assert_relative_eq!(
            expected_improvement(&[0.8, 0.9], &[1.0, 1.0]),
            0.3,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            expected_improvement(&[1.2, 1.0], &[1.0, 1.0]),
            -0.2,
            epsilon = 1e-15
        );
        assert_eq!(alpha_exploit(0.3, 0.5, 0.4), 0.15);
        assert_eq!(alpha_exploit(0.3, 0.39, 0.4), 0.0);
    }

    #[test]
    fn difference_matrix_stencil() {
        let a = third_difference_matrix(5);
        assert_eq!(a.shape(), (8, 5));
        assert_eq!(
            a.column(0).as_slice(),
            &[-1.0, 3.0, -3.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
        // cubic sequences have zero interior third differences
        let cubic = DVector::from_fn(5, |i, _| (i as f64).powi(3));
        let d = &a * cubic;
        for r in 3..5 {
            assert_relative_eq!(d[r], -6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_constraints_hold() {
        for m in [1, 2, 3, 5, 10] {
            let cov = perturbation_covariance(m, 0.2);
            for i in 0..m {
                assert_relative_eq!(cov.sigma[(i, i)], 0.2, epsilon = 1e-12);
            }
            assert!(SymmetricEigen::new(cov.sigma.clone()).eigenvalues.min() >= -1e-8);
            let a = third_difference_matrix(m);
            let identity_objective = 0.2 * (a.transpose() * a).trace();
            assert!(cov.objective <= identity_objective + 1e-12);
        }
    }

    #[test]
    fn zero_scale_gives_the_incumbent() {
        let cov = perturbation_covariance(3, 0.0);
        let c = perturb_candidates(&[1.0, 2.0, 3.0], &cov, 5, 1).unwrap();
        for x in c {
            for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
                assert_relative_eq!(*a, b, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn huge_scale_is_rejected() {
        let cov = PerturbationCovariance {
            sigma: DMatrix::identity(6, 6) * 400.0,
            gamma: 400.0,
            objective: 0.0,
        };
        assert!(matches!(
            perturb_candidates(&[1.0; 6], &cov, 50, 3),
            Err(AcquisitionError::DegenerateScale { .. })
        ));
    }

    #[test]
    fn lhs_one_point_per_stratum() {
        let pts = lhs_candidates(&[(0.0, 1.0)], 4, 9).unwrap();
        let mut q: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0).floor() as usize).collect();
        q.sort();
        assert_eq!(q, vec![0, 1, 2, 3]);
        assert_eq!(lhs_candidates(&[(0.0, 1.0)], 4, 9).unwrap(), pts);
        assert!(lhs_candidates(&[(1.0, 1.0)], 4, 9).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(AcquisitionParams::default().validate().is_ok());
        assert_eq!(AcquisitionParams::default().final_threshold(), 0.4);
        let p = AcquisitionParams {
            costs: vec![10.0, 1.0],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = AcquisitionParams {
            thresholds: vec![0.1, 1.0],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
