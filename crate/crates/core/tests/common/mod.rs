//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use mftop::stats::{normal_cdf, GaussHermite};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Exact (non-variational) probit GP classification posterior predictive
/// `P(y* = +1 | x*, data)` at each test point, by tensor Gauss–Hermite
/// quadrature over the whitened latent vector `v` (`f = L v`, `K = L Lᵀ`).
/// The grid is centered and shaped by the Laplace approximation and corrected
/// with importance weights, so the Laplace fit only affects accuracy, not the
/// target.
pub fn gpc_posterior_oracle(
    xs: &[f64],
    labels: &[bool],
    tests: &[f64],
    kernel: impl Fn(f64, f64) -> f64,
    max_nodes: usize,
) -> Vec<f64> {
    let n = xs.len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let mut k = DMatrix::from_fn(n, n, |i, j| kernel(xs[i], xs[j]));
    for i in 0..n {
        k[(i, i)] += 1e-10 * (1.0 + k[(i, i)]);
    }
    let l = Cholesky::new(k).expect("gram positive definite").l();
    let log_lik = |f: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| mftop::stats::log_normal_cdf(y[i] * f[i]))
            .sum()
    };
    let objective = |v: &DVector<f64>| log_lik(&(&l * v)) - 0.5 * v.norm_squared();

    // Laplace mode by damped Newton; the Hessian I + Lᵀ W L is positive definite
    let mut v = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for _ in 0..200 {
        let f = &l * &v;
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let z = y[i] * f[i];
            let im = mftop::stats::inverse_mills(z);
            g[i] = y[i] * im;
            w[i] = im * (z + im);
        }
        let grad = l.transpose() * g - &v;
        let hess = DMatrix::identity(n, n) + l.transpose() * DMatrix::from_diagonal(&w) * &l;
        let step = Cholesky::new(hess).expect("Newton Hessian").solve(&grad);
        let mut t = 1.0;
        let base = objective(&v);
        while objective(&(&v + &step * t)) < base && t > 1e-10 {
            t *= 0.5;
        }
        v += &step * t;
        if step.norm() * t < 1e-12 {
            break;
        }
    }
    let hess = DMatrix::identity(n, n) + l.transpose() * DMatrix::from_diagonal(&w) * &l;
    let cov = Cholesky::new(hess).expect("Laplace precision").inverse();
    let c = Cholesky::new(cov).expect("Laplace covariance SPD").l();

    let per_dim = ((max_nodes as f64).powf(1.0 / n as f64).floor() as usize).clamp(2, 40);
    let gh = GaussHermite::new(per_dim);

    // f* | v ~ N(aᵀ v, k** - |a|²) with a = L⁻¹ k*
    let proj: Vec<DVector<f64>> = tests
        .iter()
        .map(|&t| {
            l.solve_lower_triangular(&DVector::from_fn(n, |i, _| kernel(t, xs[i])))
                .expect("triangular solve")
        })
        .collect();
    let s2: Vec<f64> = tests
        .iter()
        .zip(&proj)
        .map(|(&t, a)| kernel(t, t) - a.norm_squared())
        .collect();

    let total = per_dim.pow(n as u32);
    let mut idx = vec![0usize; n];
    let mut z = DVector::zeros(n);
    let mut log_terms = Vec::with_capacity(total);
    let mut preds = Vec::with_capacity(total);
    for _ in 0..total {
        let mut log_w = 0.0;
        for d in 0..n {
            z[d] = gh.nodes[idx[d]];
            log_w += gh.weights[idx[d]].ln();
        }
        let vz = &v + &c * &z;
        // importance ratio p̃(v)/q(v) up to a constant
        let log_q = -0.5 * z.norm_squared();
        log_terms.push(log_w + objective(&vz) - log_q);
        preds.push(
            proj.iter()
                .zip(&s2)
                .map(|(a, s)| normal_cdf(a.dot(&vz) / (1.0 + s.max(0.0)).sqrt()))
                .collect::<Vec<f64>>(),
        );
        for d in 0..n {
            idx[d] += 1;
            if idx[d] < per_dim {
                break;
            }
            idx[d] = 0;
        }
    }
    let shift = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_terms.iter().map(|l| (l - shift).exp()).collect();
    let norm: f64 = weights.iter().sum();
    (0..tests.len())
        .map(|t| {
            weights
                .iter()
                .zip(&preds)
                .map(|(w, p)| w * p[t])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Euclidean projection onto `{Σ ⪰ 0, Σ_ii = γ}` by Dykstra's alternating
/// projections between the PSD cone (eigenvalue clipping) and the affine
/// fixed-diagonal set.
pub fn project_psd_fixed_diagonal(x: &DMatrix<f64>, gamma: f64, tol: f64) -> DMatrix<f64> {
    let m = x.nrows();
    let mut y = x.clone();
    let mut p = DMatrix::zeros(m, m);
    let mut q = DMatrix::zeros(m, m);
    for _ in 0..100_000 {
        let a_in = &y + &p;
        let eig = nalgebra::SymmetricEigen::new((&a_in + a_in.transpose()) * 0.5);
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let a = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        p = &a_in - &a;
        let b_in = &a + &q;
        let mut b = b_in.clone();
        for i in 0..m {
            b[(i, i)] = gamma;
        }
        q = &b_in - &b;
        let change = (&b - &y).norm();
        y = b;
        if change < tol {
            break;
        }
    }
    y
}

/// Minimum of `trace(C Σ)` over `Σ ⪰ 0, Σ_ii = γ` by projected gradient with
/// the Dykstra projection above, run until iterates move less than `tol`.
pub fn sdp_projection_oracle(c: &DMatrix<f64>, gamma: f64, tol: f64) -> (DMatrix<f64>, f64) {
    let m = c.nrows();
    let mut sigma = DMatrix::identity(m, m) * gamma;
    let step = gamma / c.norm();
    let mut t = step;
    for _ in 0..200_000 {
        let next = project_psd_fixed_diagonal(&(&sigma - c * t), gamma, tol * 1e-2);
        let change = (&next - &sigma).norm();
        sigma = next;
        if change < tol {
            break;
        }
        t = (t * 1.05).min(step * 1e3);
    }
    let obj = (c * &sigma).trace();
    (sigma, obj)
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Smoothness cost by quadrature of the sampled snap and yaw acceleration.
pub fn smoothness_by_quadrature(
    traj: &mftop::trajectory::Trajectory,
    w: &mftop::trajectory::SmoothnessWeights,
) -> f64 {
    traj.segments()
        .iter()
        .map(|seg| {
            simpson(
                |t| {
                    let snap = seg.evaluate(t, 4);
                    let yaw = seg.evaluate(t, 2);
                    w.mu_r() * (snap[0] * snap[0] + snap[1] * snap[1] + snap[2] * snap[2])
                        + w.mu_psi() * yaw[3] * yaw[3]
                },
                0.0,
                seg.duration,
                2000,
            )
        })
        .sum()
}

/// The unique 9th-order polynomial from 0 to 1 on `[0, 1]` with derivatives
/// 1 through 4 zero at both ends.
pub fn rest_to_rest_profile(tau: f64) -> f64 {
    tau.powi(5) * (126.0 + tau * (-420.0 + tau * (540.0 + tau * (-315.0 + tau * 70.0))))
}

/// Random waypoints: `m + 1` points with steps of 0.5–2 m in a random
/// direction, and yaw in `[-1, 1]` rad.
pub fn random_waypoints(rng: &mut impl rand::Rng, m: usize) -> mftop::trajectory::WaypointList {
    use mftop::trajectory::{Waypoint, WaypointList};
    let mut p = [0.0, 0.0, 1.0];
    let mut pts = vec![Waypoint::new(p[0], p[1], p[2], rng.random_range(-1.0..1.0)).unwrap()];
    for _ in 0..m {
        let len = rng.random_range(0.5..2.0);
        let az: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let el: f64 = rng.random_range(-0.5..0.5);
        p = [
            p[0] + len * el.cos() * az.cos(),
            p[1] + len * el.cos() * az.sin(),
            p[2] + len * el.sin(),
        ];
        pts.push(Waypoint::new(p[0], p[1], p[2], rng.random_range(-1.0..1.0)).unwrap());
    }
    WaypointList::new(pts).unwrap()
}

/// Random allocation with each segment 0.5–3 s.
pub fn random_allocation(rng: &mut impl rand::Rng, m: usize) -> mftop::trajectory::TimeAllocation {
    mftop::trajectory::TimeAllocation::new((0..m).map(|_| rng.random_range(0.5..3.0)).collect())
        .unwrap()
}

/// Feasible iff the total time reaches the threshold.
pub struct TotalTimeOracle(pub f64);

impl mftop::optimizer::FeasibilityOracle for TotalTimeOracle {
    fn evaluate(
        &self,
        traj: &mftop::trajectory::Trajectory,
    ) -> Result<mftop::flatness::FeasibilityLabel, String> {
        use mftop::flatness::{FeasibilityLabel, Violation, ViolationKind};
        let t = traj.total_time();
        Ok(if t >= self.0 {
            FeasibilityLabel::Feasible
        } else {
            FeasibilityLabel::Infeasible(Violation {
                time: 0.0,
                margin: self.0 - t,
                kind: ViolationKind::MotorSpeedHigh,
            })
        })
    }
}

/// Feasible iff every segment reaches its own minimum duration.
pub struct SegmentOracle(pub Vec<f64>);

impl mftop::optimizer::FeasibilityOracle for SegmentOracle {
    fn evaluate(
        &self,
        traj: &mftop::trajectory::Trajectory,
    ) -> Result<mftop::flatness::FeasibilityLabel, String> {
        use mftop::flatness::{FeasibilityLabel, Violation, ViolationKind};
        let short = traj
            .durations()
            .as_slice()
            .iter()
            .zip(&self.0)
            .map(|(d, lo)| lo - d)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(if short <= 0.0 {
            FeasibilityLabel::Feasible
        } else {
            FeasibilityLabel::Infeasible(Violation {
                time: 0.0,
                margin: short,
                kind: ViolationKind::MotorSpeedHigh,
            })
        })
    }
}
