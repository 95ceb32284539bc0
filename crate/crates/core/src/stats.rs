//! Standard-normal helpers and Gauss–Hermite rules shared by the classifier
//! and the acquisition scores.

use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::{PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in relative terms for negative arguments.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Mills ratio `Φ(-x) / φ(x)` for `x >= 5` by continued fraction.
fn mills_ratio_tail(x: f64) -> f64 {
    let mut acc = 0.0;
    for k in (1..=60).rev() {
        acc = k as f64 / (x + acc);
    }
    1.0 / (x + acc)
}

/// `ln Φ(z)`, stable for large negative `z`.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > -5.0 {
        normal_cdf(z).ln()
    } else {
        -0.5 * z * z - LN_SQRT_2PI + mills_ratio_tail(-z).ln()
    }
}

/// `(ln Φ(z), φ(z) / Φ(z))` sharing one tail or erfc evaluation.
pub fn log_normal_cdf_and_inverse_mills(z: f64) -> (f64, f64) {
    if z > -5.0 {
        let c = normal_cdf(z);
        (c.ln(), normal_pdf(z) / c)
    } else {
        let r = mills_ratio_tail(-z);
        (-0.5 * z * z - LN_SQRT_2PI + r.ln(), 1.0 / r)
    }
}

/// Inverse Mills ratio `φ(z) / Φ(z)`, i.e. the derivative of `ln Φ(z)`.
pub fn inverse_mills(z: f64) -> f64 {
    if z > -5.0 {
        normal_pdf(z) / normal_cdf(z)
    } else {
        1.0 / mills_ratio_tail(-z)
    }
}

/// Gauss–Hermite rule for expectations under `N(0, 1)`:
/// `E[g(Z)] ≈ Σ w_i g(z_i)` with `Σ w_i = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch construction from the probabilists' Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss–Hermite rule needs at least one node");
        if n == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![1.0],
            };
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize to kill eigen-solver round-off
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let node = 0.5 * (pairs[j].0 - pairs[i].0);
            let weight = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-node, weight);
            pairs[j] = (node, weight);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[g(X)]` for `X ~ N(mean, var)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut g: F) -> f64 {
        let sd = var.max(0.0).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(mean + sd * z))
            .sum()
    }
}

/// Wrap an angle to `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = (a + PI).rem_euclid(two_pi) - PI;
    if r >= PI {
        r -= two_pi;
    }
    r
}

/// SplitMix64 finalizer, used to derive independent 64-bit seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cdf_reference_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.0), 0.841_344_746_068_542_9, epsilon = 1e-14);
        assert_relative_eq!(
            normal_cdf(-0.4472135955),
            0.327_360_423_009_289_1,
            epsilon = 1e-9
        );
    }

    #[test]
    fn log_cdf_is_continuous_at_switch() {
        let a = log_normal_cdf(-5.0 + 1e-9);
        let b = log_normal_cdf(-5.0 - 1e-9);
        assert!((a - b).abs() < 1e-7);
        let a = inverse_mills(-5.0 + 1e-9);
        let b = inverse_mills(-5.0 - 1e-9);
        assert!((a - b).abs() < 1e-7);
        // far tail: ln Φ(z) ~ -z²/2
        let z = -40.0;
        assert!((log_normal_cdf(z) + 0.5 * z * z).abs() < 10.0);
        assert!((inverse_mills(z) + z).abs() < 0.1);
    }

    #[test]
    fn fused_log_cdf_matches_separate_calls() {
        for z in [-30.0, -5.5, -5.0, -1.2, 0.0, 2.5, 9.0] {
            let (lc, im) = log_normal_cdf_and_inverse_mills(z);
            assert_eq!(lc, log_normal_cdf(z));
            assert_eq!(im, inverse_mills(z));
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let gh = GaussHermite::new(20);
        assert_relative_eq!(gh.expect(0.0, 1.0, |_| 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(gh.expect(0.0, 1.0, |x| x * x), 1.0, epsilon = 1e-10);
        assert_relative_eq!(gh.expect(0.0, 1.0, |x| x.powi(4)), 3.0, epsilon = 1e-9);
        assert_relative_eq!(gh.expect(1.5, 4.0, |x| x), 1.5, epsilon = 1e-10);
        // E[Φ(X)] = Φ(μ/√(1+s²))
        let want = normal_cdf(0.7 / (1.0f64 + 2.0).sqrt());
        assert_relative_eq!(gh.expect(0.7, 2.0, normal_cdf), want, epsilon = 1e-6);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(PI), -PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), -PI);
        assert_relative_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn seed_mixing_differs_by_stream() {
        assert_ne!(mix_seed(7, 0), mix_seed(7, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
