//! Worked examples checked against independent reference computations.

mod common;

use common::*;
use mftop::acquisition::{lhs_candidates, perturb_candidates, perturbation_covariance};
use mftop::flatness::{check_low_fidelity, VehicleParams, DEFAULT_CHECK_DT};
use mftop::surrogate::{predict, rbf_kernel, train, FidelityDataset, Rbf, SurrogateConfig};
use mftop::trajectory::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wp(x: f64, y: f64, z: f64, yaw: f64) -> Waypoint {
    Waypoint::new(x, y, z, yaw).unwrap()
}

fn unit_dash() -> WaypointList {
    WaypointList::new(vec![wp(0.0, 0.0, 0.0, 0.0), wp(1.0, 0.0, 0.0, 0.0)]).unwrap()
}

#[test]
fn single_segment_matches_the_closed_form_rest_to_rest_profile() {
    let alloc = TimeAllocation::new(vec![2.0]).unwrap();
    let traj = min_snap(
        &unit_dash(),
        &alloc,
        &BoundaryConditions::rest_to_rest(),
        &SmoothnessWeights::default(),
    )
    .unwrap();
    for i in 0..=100 {
        let t = 2.0 * i as f64 / 100.0;
        let x = traj.sample(t, 0).unwrap()[0];
        assert!(
            (x - rest_to_rest_profile(t / 2.0)).abs() < 1e-9,
            "t={t}: {x}"
        );
    }
    let closed = smoothness(&traj, &SmoothnessWeights::default());
    let quad = smoothness_by_quadrature(&traj, &SmoothnessWeights::default());
    assert!((closed - quad).abs() <= 1e-3 * quad, "{closed} vs {quad}");
    // fourth derivative of the profile, differentiated by hand; d/dt = (1/2) d/dτ
    let profile_snap = |tau: f64| {
        (15120.0 * tau - 151200.0 * tau.powi(2) + 453600.0 * tau.powi(3) - 529200.0 * tau.powi(4)
            + 211680.0 * tau.powi(5))
            / 16.0
    };
    let by_profile = simpson(|t| profile_snap(t / 2.0).powi(2), 0.0, 2.0, 4000);
    assert!(
        (closed - by_profile).abs() <= 1e-3 * by_profile,
        "{closed} vs {by_profile}"
    );
}

#[test]
fn scaling_the_allocation_keeps_the_path() {
    let w = WaypointList::new(vec![
        wp(0.0, 0.0, 1.0, 0.0),
        wp(2.0, 1.0, 1.5, 0.5),
        wp(3.0, -1.0, 1.0, -0.3),
        wp(4.0, 0.0, 2.0, 1.0),
    ])
    .unwrap();
    let x = TimeAllocation::new(vec![1.3, 0.9, 1.7]).unwrap();
    let bc = BoundaryConditions::rest_to_rest();
    let sw = SmoothnessWeights::default();
    let a = min_snap(&w, &x, &bc, &sw).unwrap();
    for eta in [0.5, 1.7, 3.0] {
        let b = min_snap(&w, &x.scaled(eta).unwrap(), &bc, &sw).unwrap();
        for i in 0..100 {
            let t = a.total_time() * i as f64 / 99.0;
            let pa = a.sample(t, 0).unwrap();
            let pb = b.sample((eta * t).min(b.total_time()), 0).unwrap();
            assert!(
                (pa - pb).norm() < 1e-9,
                "eta {eta} t {t}: {}",
                (pa - pb).norm()
            );
        }
    }
}

#[test]
fn optimized_ratio_beats_uniform_and_random_splits() {
    let w = WaypointList::new(vec![
        wp(0.0, 0.0, 1.0, 0.0),
        wp(1.0, 0.0, 1.0, 0.0),
        wp(3.0, 0.0, 1.0, 0.0),
    ])
    .unwrap();
    let bc = BoundaryConditions::rest_to_rest();
    let sw = SmoothnessWeights::default();
    let total = 6.0;
    let sol = optimize_allocation_ratio(&w, total, &bc, &sw, &RatioOptions::default()).unwrap();
    assert!((sol.allocation.total() - total).abs() < 1e-9);
    let sigma = |x: &TimeAllocation| smoothness(&min_snap(&w, x, &bc, &sw).unwrap(), &sw);
    let best = sigma(&sol.allocation);
    assert!(best <= sigma(&TimeAllocation::uniform(2, total).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = rng.random_range(0.05..0.95) * total;
        assert!(best <= sigma(&TimeAllocation::new(vec![a, total - a]).unwrap()) * (1.0 + 1e-12));
    }
}

#[test]
fn threshold_oracle_scaling_finds_five_seconds() {
    let w = unit_dash();
    let x = TimeAllocation::new(vec![1.0]).unwrap();
    let s = scale_to_feasibility(
        &w,
        &x,
        &BoundaryConditions::default(),
        &SmoothnessWeights::default(),
        &ScalingOptions::default(),
        |t| t.total_time() >= 5.0,
    )
    .unwrap();
    assert!((s.eta - 5.0).abs() <= 0.005 * 5.0, "{}", s.eta);
}

#[test]
fn tight_motor_limits_need_a_larger_scale() {
    let w = WaypointList::new(vec![
        wp(0.0, 0.0, 1.0, 0.0),
        wp(2.0, 0.0, 1.0, 0.0),
        wp(2.0, 2.0, 1.0, 0.0),
    ])
    .unwrap();
    let ratio = TimeAllocation::new(vec![1.0, 1.0]).unwrap();
    let eta = |v: VehicleParams| {
        scale_to_feasibility(
            &w,
            &ratio,
            &BoundaryConditions::default(),
            &SmoothnessWeights::default(),
            &ScalingOptions::default(),
            |t| {
                check_low_fidelity(t, &v, DEFAULT_CHECK_DT)
                    .unwrap()
                    .is_feasible()
            },
        )
        .unwrap()
        .eta
    };
    // negligible inertia keeps every rotor's thrust share positive
    let generous = eta(VehicleParams {
        motor_speed_max: 1e6,
        inertia: [1e-9; 3],
        ..Default::default()
    });
    let tight = eta(VehicleParams {
        motor_speed_max: 800.0,
        ..Default::default()
    });
    let lower = ScalingOptions::default().lower;
    assert!((generous - lower).abs() <= 1e-9, "{generous}");
    assert!(tight > generous * 1.5, "{tight} vs {generous}");
}

#[test]
fn snap_agrees_across_interior_joints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_waypoints(&mut rng, 4);
    let x = random_allocation(&mut rng, 4);
    let traj = min_snap(
        &w,
        &x,
        &BoundaryConditions::default(),
        &SmoothnessWeights::default(),
    )
    .unwrap();
    let segs = traj.segments();
    for i in 0..segs.len() - 1 {
        // position only; yaw is continuous through its second derivative
        let left = segs[i].evaluate(segs[i].duration, 4).xyz();
        let right = segs[i + 1].evaluate(0.0, 4).xyz();
        let scale = 1.0 + left.norm();
        assert!(
            (left - right).norm() <= 1e-6 * scale,
            "joint {i}: {left} vs {right}"
        );
    }
}

#[test]
fn lhs_points_are_distinct() {
    let pts = lhs_candidates(&[(0.0, 1.0), (0.0, 1.0)], 400, 9).unwrap();
    let mut min = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            min = min.min(d);
        }
    }
    assert!(min > 0.0);
}

#[test]
fn perturbation_mean_is_zero_within_three_standard_errors() {
    let m = 5;
    let cov = perturbation_covariance(m, 0.01);
    let x = vec![1.0; m];
    let n = 100_000;
    let pts = perturb_candidates(&x, &cov, n, 21).unwrap();
    for d in 0..m {
        let mean = pts.iter().map(|p| p[d] - 1.0).sum::<f64>() / n as f64;
        let se = (cov.sigma[(d, d)] / n as f64).sqrt();
        assert!(
            mean.abs() <= 3.0 * se,
            "coordinate {d}: mean {mean}, se {se}"
        );
    }
}

#[test]
fn rbf_unit_distance_value() {
    let k = rbf_kernel(
        &[0.0, 0.0],
        &[1.0, 0.0],
        &Rbf {
            variance: 1.0,
            lengthscale: 1.0,
        },
    );
    assert!((k - (-0.5f64).exp()).abs() < 1e-15);
}

#[test]
fn five_point_dataset_matches_the_quadrature_posterior() {
    let xs = [0.2, 0.45, 0.6, 0.8, 1.1];
    let labels = [false, false, true, true, true];
    let mut d = FidelityDataset::new(0, vec![1.0]);
    for (x, l) in xs.iter().zip(labels) {
        d.push(vec![*x], l);
    }
    let cfg = SurrogateConfig::default();
    let model = train(&[d], &cfg).unwrap();
    let Some(mftop::surrogate::KernelHyperparams::Base(rbf)) =
        model.levels.first().map(|l| l.hyper)
    else {
        panic!("level 0 uses the base kernel")
    };
    let tests: Vec<f64> = (0..20).map(|i| i as f64 * 0.07).collect();
    let oracle = gpc_posterior_oracle(
        &xs,
        &labels,
        &tests,
        |a, b| rbf_kernel(&[a], &[b], &rbf),
        3_000_000,
    );
    for (t, want) in tests.iter().zip(oracle) {
        let got = predict(&model, &[*t], 0).unwrap().probability;
        assert!(
            (got - want).abs() <= 0.05,
            "x={t}: model {got} oracle {want}"
        );
    }
}

#[test]
fn oracle_handles_a_single_point_in_closed_form() {
    // one point: p(y*|y) has the closed form of a bivariate normal orthant
    // probability; with the test point on the datum it reduces further to
    // E[Φ(f)|y=+1] = P(f* > ε1, f > ε2) / Φ(0) with corr(f* − ε1, f − ε2) = v/(1+v)
    let v = 1.3;
    let got = gpc_posterior_oracle(&[0.0], &[true], &[0.0], |_, _| v, 200)[0];
    let rho = v / (1.0 + v);
    let want = 2.0 * (0.25 + rho.asin() / (2.0 * std::f64::consts::PI));
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn shared_labels_at_the_higher_level_do_not_hurt_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let label = |x: &[f64]| x[0] + 0.7 * x[1] > 1.7;
    let mut low = FidelityDataset::new(0, vec![1.0, 1.0]);
    for _ in 0..120 {
        let x = vec![rng.random_range(0.6..1.4), rng.random_range(0.6..1.4)];
        low.push(x.clone(), label(&x));
    }
    let mut high = FidelityDataset::new(1, vec![1.0, 1.0]);
    let mut alone = FidelityDataset::new(0, vec![1.0, 1.0]);
    for p in low.points.iter().take(15) {
        high.push(p.x.clone(), p.feasible);
        alone.push(p.x.clone(), p.feasible);
    }
    let cfg = SurrogateConfig::default();
    let two = train(&[low.clone(), high], &cfg).unwrap();
    let one = train(&[alone], &cfg).unwrap();
    let test: Vec<Vec<f64>> = (0..200)
        .map(|_| vec![rng.random_range(0.6..1.4), rng.random_range(0.6..1.4)])
        .collect();
    let acc = |level: usize, m: &mftop::surrogate::SurrogateModel| {
        test.iter()
            .filter(|x| (predict(m, x, level).unwrap().probability > 0.5) == label(x))
            .count() as f64
            / test.len() as f64
    };
    let (a2, a1) = (acc(1, &two), acc(0, &one));
    assert!(a2 >= a1, "two-level {a2} vs single {a1}");
}

#[test]
fn sdp_objective_at_four_segments_matches_the_projection_oracle() {
    let m = 4;
    let gamma = 0.2;
    let cov = perturbation_covariance(m, gamma);
    let a = mftop::acquisition::third_difference_matrix(m);
    let c: DMatrix<f64> = a.transpose() * a;
    let (_, oracle) = sdp_projection_oracle(&c, gamma, 1e-10);
    assert!(
        (cov.objective - oracle).abs() <= 0.01 * oracle.abs().max(1e-12),
        "{} vs {oracle}",
        cov.objective
    );
}
