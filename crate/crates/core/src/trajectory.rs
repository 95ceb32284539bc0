//! Piecewise-polynomial minimum-snap trajectories.
//!
//! Each segment carries a 9th-order polynomial per position axis and a
//! 5th-order polynomial for yaw, stored in segment-normalized time
//! `τ = t / T_i ∈ [0, 1]`. The optimization variables are the derivatives at
//! the knots (orders 0–4 for position, 0–2 for yaw); sharing them between
//! adjacent segments makes continuity hold by construction, and the fixed
//! waypoint values and boundary derivatives are eliminated so the remaining
//! problem is an unconstrained QP solved with a dense Cholesky factorization.

use crate::stats::wrap_angle;
use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// Coefficients per position axis (9th order).
pub const POSITION_COEFFS: usize = 10;
/// Coefficients for yaw (5th order).
pub const YAW_COEFFS: usize = 6;
/// Highest position derivative kept continuous.
pub const POSITION_CONTINUITY: usize = 4;
/// Highest yaw derivative kept continuous.
pub const YAW_CONTINUITY: usize = 2;
/// Segments shorter than this are rejected before the QP is assembled.
pub const MIN_SEGMENT_DURATION: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("need at least two waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint {0} has a non-finite component")]
    NonFiniteWaypoint(usize),
    #[error("time allocation must be finite and strictly positive")]
    InvalidAllocation,
    #[error("allocation has {got} segments but the waypoints define {expected}")]
    AllocationLength { expected: usize, got: usize },
    #[error("segment {segment} has degenerate duration {duration} s")]
    DegenerateAllocation { segment: usize, duration: f64 },
    #[error("time {t} s is outside [0, {total}] s")]
    OutOfRange { t: f64, total: f64 },
    #[error("derivative order {order} exceeds the continuity class {max}")]
    OrderOutOfRange { order: usize, max: usize },
    #[error("smoothness weights must be non-negative and not both zero")]
    InvalidWeights,
    #[error("total time must be finite and positive")]
    InvalidTotalTime,
    #[error("no feasible scaling found up to eta = {upper}")]
    Infeasible { upper: f64 },
    #[error("waypoint input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// A prescribed position (m) and yaw (rad, wrapped to `[-π, π)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WaypointRecord", into = "WaypointRecord")]
pub struct Waypoint {
    pub position: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct WaypointRecord {
    x: f64,
    y: f64,
    z: f64,
    #[serde(default)]
    yaw: f64,
}

impl TryFrom<WaypointRecord> for Waypoint {
    type Error = TrajectoryError;
    fn try_from(r: WaypointRecord) -> Result<Self> {
        Waypoint::new(r.x, r.y, r.z, r.yaw).ok_or(TrajectoryError::NonFiniteWaypoint(0))
    }
}

impl From<Waypoint> for WaypointRecord {
    fn from(w: Waypoint) -> Self {
        WaypointRecord {
            x: w.position.x,
            y: w.position.y,
            z: w.position.z,
            yaw: w.yaw,
        }
    }
}

impl Waypoint {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Option<Self> {
        if [x, y, z, yaw].iter().all(|v| v.is_finite()) {
            Some(Self {
                position: Vector3::new(x, y, z),
                yaw: wrap_angle(yaw),
            })
        } else {
            None
        }
    }
}

/// Ordered list of `m + 1` waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Waypoint>", into = "Vec<Waypoint>")]
pub struct WaypointList {
    waypoints: Vec<Waypoint>,
}

impl TryFrom<Vec<Waypoint>> for WaypointList {
    type Error = TrajectoryError;
    fn try_from(v: Vec<Waypoint>) -> Result<Self> {
        WaypointList::new(v)
    }
}

impl From<WaypointList> for Vec<Waypoint> {
    fn from(w: WaypointList) -> Self {
        w.waypoints
    }
}

impl WaypointList {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(TrajectoryError::TooFewWaypoints(waypoints.len()));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !w.position.iter().all(|v| v.is_finite()) || !w.yaw.is_finite() {
                return Err(TrajectoryError::NonFiniteWaypoint(i));
            }
        }
        Ok(Self { waypoints })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| TrajectoryError::Input(e.to_string()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| TrajectoryError::Input(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("waypoints serialize")
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Number of segments `m`.
    pub fn segment_count(&self) -> usize {
        self.waypoints.len() - 1
    }

    /// Segment indices whose two end waypoints coincide. Allowed, but usually
    /// a mistake in the input.
    pub fn repeated_segments(&self) -> Vec<usize> {
        self.waypoints
            .windows(2)
            .enumerate()
            .filter(|(_, w)| (w[0].position - w[1].position).norm() < 1e-12 && w[0].yaw == w[1].yaw)
            .map(|(i, _)| i)
            .collect()
    }

    /// Straight-line length through all waypoints.
    pub fn path_length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }

    /// Yaw values unwrapped so consecutive waypoints take the short way round.
    fn unwrapped_yaw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.waypoints.len());
        out.push(self.waypoints[0].yaw);
        for w in self.waypoints.windows(2) {
            let prev = *out.last().unwrap();
            out.push(prev + wrap_angle(w[1].yaw - w[0].yaw));
        }
        out
    }

    /// Generous starting total time: twice the straight-line length flown at 1 m/s.
    pub fn default_total_time(&self) -> f64 {
        let len = self.path_length();
        if len > 1e-9 {
            2.0 * len
        } else {
            self.segment_count() as f64
        }
    }
}

/// Per-segment durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeAllocation(Vec<f64>);

impl TryFrom<Vec<f64>> for TimeAllocation {
    type Error = TrajectoryError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeAllocation::new(v)
    }
}

impl From<TimeAllocation> for Vec<f64> {
    fn from(a: TimeAllocation) -> Self {
        a.0
    }
}

impl TimeAllocation {
    pub fn new(durations: Vec<f64>) -> Result<Self> {
        if durations.is_empty() || !durations.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(TrajectoryError::InvalidAllocation);
        }
        Ok(Self(durations))
    }

    pub fn uniform(m: usize, total: f64) -> Result<Self> {
        Self::new(vec![total / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, eta: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|d| d * eta).collect())
    }
}

/// Whether a boundary derivative is pinned to zero or left to the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeConstraint {
    Zero,
    Free,
}

/// Boundary derivatives at one end: position orders 1–4 and yaw orders 1–2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointConstraint {
    pub position: [DerivativeConstraint; POSITION_CONTINUITY],
    pub yaw: [DerivativeConstraint; YAW_CONTINUITY],
}

impl EndpointConstraint {
    pub fn at_rest() -> Self {
        Self {
            position: [DerivativeConstraint::Zero; POSITION_CONTINUITY],
            yaw: [DerivativeConstraint::Zero; YAW_CONTINUITY],
        }
    }

    pub fn free() -> Self {
        Self {
            position: [DerivativeConstraint::Free; POSITION_CONTINUITY],
            yaw: [DerivativeConstraint::Free; YAW_CONTINUITY],
        }
    }

    /// Pin the listed derivative orders (1-based) to zero, leave the rest free.
    pub fn from_orders(position: &[usize], yaw: &[usize]) -> Result<Self> {
        let mut c = Self::free();
        for &o in position {
            if o == 0 || o > POSITION_CONTINUITY {
                return Err(TrajectoryError::OrderOutOfRange {
                    order: o,
                    max: POSITION_CONTINUITY,
                });
            }
            c.position[o - 1] = DerivativeConstraint::Zero;
        }
        for &o in yaw {
            if o == 0 || o > YAW_CONTINUITY {
                return Err(TrajectoryError::OrderOutOfRange {
                    order: o,
                    max: YAW_CONTINUITY,
                });
            }
            c.yaw[o - 1] = DerivativeConstraint::Zero;
        }
        Ok(c)
    }

    fn orders(arr: &[DerivativeConstraint]) -> Vec<usize> {
        arr.iter()
            .enumerate()
            .filter(|(_, c)| **c == DerivativeConstraint::Zero)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EndpointRecord {
    #[serde(default)]
    position_zero: Vec<usize>,
    #[serde(default)]
    yaw_zero: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundaryRecord {
    start: EndpointRecord,
    end: EndpointRecord,
}

/// Derivative constraints at `t = 0` and `t = T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BoundaryRecord", into = "BoundaryRecord")]
pub struct BoundaryConditions {
    pub start: EndpointConstraint,
    pub end: EndpointConstraint,
}

impl TryFrom<BoundaryRecord> for BoundaryConditions {
    type Error = TrajectoryError;
    fn try_from(r: BoundaryRecord) -> Result<Self> {
        Ok(Self {
            start: EndpointConstraint::from_orders(&r.start.position_zero, &r.start.yaw_zero)?,
            end: EndpointConstraint::from_orders(&r.end.position_zero, &r.end.yaw_zero)?,
        })
    }
}

impl From<BoundaryConditions> for BoundaryRecord {
    fn from(b: BoundaryConditions) -> Self {
        let rec = |c: &EndpointConstraint| EndpointRecord {
            position_zero: EndpointConstraint::orders(&c.position),
            yaw_zero: EndpointConstraint::orders(&c.yaw),
        };
        BoundaryRecord {
            start: rec(&b.start),
            end: rec(&b.end),
        }
    }
}

impl Default for BoundaryConditions {
    fn default() -> Self {
        Self::rest_to_rest()
    }
}

impl BoundaryConditions {
    /// All boundary derivatives pinned to zero at both ends.
    pub fn rest_to_rest() -> Self {
        Self {
            start: EndpointConstraint::at_rest(),
            end: EndpointConstraint::at_rest(),
        }
    }

    /// Velocity, acceleration, jerk and yaw rate pinned to zero at the start
    /// only; everything else free.
    pub fn start_at_rest() -> Self {
        Self {
            start: EndpointConstraint::from_orders(&[1, 2, 3], &[1]).unwrap(),
            end: EndpointConstraint::free(),
        }
    }

    /// Velocity, acceleration, jerk and yaw rate pinned to zero at both ends.
    pub fn stop_to_stop() -> Self {
        let c = EndpointConstraint::from_orders(&[1, 2, 3], &[1]).unwrap();
        Self { start: c, end: c }
    }

    /// True when every boundary derivative is pinned to zero.
    pub fn is_rest_to_rest(&self) -> bool {
        *self == Self::rest_to_rest()
    }
}

/// Weights on integrated squared snap and squared yaw acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct SmoothnessWeights {
    mu_r: f64,
    mu_psi: f64,
}

impl TryFrom<(f64, f64)> for SmoothnessWeights {
    type Error = TrajectoryError;
    fn try_from(v: (f64, f64)) -> Result<Self> {
        SmoothnessWeights::new(v.0, v.1)
    }
}

impl From<SmoothnessWeights> for (f64, f64) {
    fn from(w: SmoothnessWeights) -> Self {
        (w.mu_r, w.mu_psi)
    }
}

impl Default for SmoothnessWeights {
    fn default() -> Self {
        Self {
            mu_r: 1.0,
            mu_psi: 1.0,
        }
    }
}

impl SmoothnessWeights {
    pub fn new(mu_r: f64, mu_psi: f64) -> Result<Self> {
        let ok = mu_r.is_finite() && mu_psi.is_finite() && mu_r >= 0.0 && mu_psi >= 0.0;
        if !ok || (mu_r == 0.0 && mu_psi == 0.0) {
            return Err(TrajectoryError::InvalidWeights);
        }
        Ok(Self { mu_r, mu_psi })
    }

    pub fn mu_r(&self) -> f64 {
        self.mu_r
    }

    pub fn mu_psi(&self) -> f64 {
        self.mu_psi
    }
}

/// One segment; coefficients are in normalized time `τ = t / duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialSegment {
    pub duration: f64,
    pub position: [[f64; POSITION_COEFFS]; 3],
    pub yaw: [f64; YAW_COEFFS],
}

/// `k! / (k - r)!`, zero when `r > k`.
fn falling(k: usize, r: usize) -> f64 {
    if r > k {
        return 0.0;
    }
    (0..r).map(|j| (k - j) as f64).product()
}

/// Evaluate the `order`-th derivative w.r.t. τ of `Σ c_k τ^k` by Horner's rule.
fn poly_derivative(coeffs: &[f64], order: usize, tau: f64) -> f64 {
    let n = coeffs.len();
    if order >= n {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in (order..n).rev() {
        acc = acc * tau + coeffs[k] * falling(k, order);
    }
    acc
}

impl PolynomialSegment {
    /// Derivative of the given order at local time `t ∈ [0, duration]`.
    pub fn evaluate(&self, t: f64, order: usize) -> Vector4<f64> {
        let tau = t / self.duration;
        let scale = self.duration.powi(-(order as i32));
        Vector4::new(
            poly_derivative(&self.position[0], order, tau) * scale,
            poly_derivative(&self.position[1], order, tau) * scale,
            poly_derivative(&self.position[2], order, tau) * scale,
            poly_derivative(&self.yaw, order, tau) * scale,
        )
    }

    /// Closed-form `(∫‖snap‖², ∫ψ̈²)` over the segment.
    fn cost_terms(&self) -> (f64, f64) {
        let snap = self
            .position
            .iter()
            .map(|c| quad_form(&basis(POSITION_COEFFS).cost, c))
            .sum::<f64>()
            * self.duration.powi(-7);
        let yaw = quad_form(&basis(YAW_COEFFS).cost, &self.yaw) * self.duration.powi(-3);
        (snap, yaw)
    }
}

fn quad_form(m: &DMatrix<f64>, c: &[f64]) -> f64 {
    let v = DVector::from_column_slice(c);
    v.dot(&(m * &v))
}

/// Unit-interval matrices for a polynomial of `n = 2k` coefficients whose
/// cost is the integrated square of derivative `k - 1` (snap for 10
/// coefficients, yaw acceleration for 6).
struct PolyBasis {
    /// Number of derivatives fixed per endpoint.
    k: usize,
    /// Maps endpoint derivatives (start orders 0..k, end orders 0..k) to coefficients.
    endpoint_to_coeffs: DMatrix<f64>,
    /// `∫₀¹ (d^s p / dτ^s)² dτ` as a quadratic form in coefficients.
    cost: DMatrix<f64>,
    /// Cost as a quadratic form in endpoint derivatives.
    endpoint_cost: DMatrix<f64>,
}

impl PolyBasis {
    fn new(n: usize) -> Self {
        let k = n / 2;
        let s = k - 1;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for r in 0..k {
            a[(r, r)] = falling(r, r);
            for c in r..n {
                a[(k + r, c)] = falling(c, r);
            }
        }
        let b = a.try_inverse().expect("endpoint matrix is invertible");
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in s..n {
            for j in s..n {
                q[(i, j)] = falling(i, s) * falling(j, s) / (i + j + 1 - 2 * s) as f64;
            }
        }
        let endpoint_cost = b.transpose() * &q * &b;
        Self {
            k,
            endpoint_to_coeffs: b,
            cost: q,
            endpoint_cost,
        }
    }
}

fn basis(n: usize) -> &'static PolyBasis {
    static POS: OnceLock<PolyBasis> = OnceLock::new();
    static YAW: OnceLock<PolyBasis> = OnceLock::new();
    match n {
        POSITION_COEFFS => POS.get_or_init(|| PolyBasis::new(POSITION_COEFFS)),
        YAW_COEFFS => YAW.get_or_init(|| PolyBasis::new(YAW_COEFFS)),
        _ => unreachable!("unsupported polynomial size {n}"),
    }
}

/// Knot-derivative QP for one family of axes sharing the same structure.
///
/// Variables are `d̂[knot * k + r] = T_ref^r · d^r p / dt^r` at each knot;
/// rescaling by the mean duration keeps the system well conditioned.
struct KnotProblem<'a> {
    basis: &'a PolyBasis,
    ratios: Vec<f64>,
    fixed: Vec<bool>,
}

impl<'a> KnotProblem<'a> {
    fn new(
        basis: &'a PolyBasis,
        durations: &[f64],
        start: &[DerivativeConstraint],
        end: &[DerivativeConstraint],
    ) -> Self {
        let m = durations.len();
        let t_ref = durations.iter().sum::<f64>() / m as f64;
        let k = basis.k;
        let mut fixed = vec![false; (m + 1) * k];
        for knot in 0..=m {
            fixed[knot * k] = true;
        }
        for r in 1..k {
            fixed[r] = start[r - 1] == DerivativeConstraint::Zero;
            fixed[m * k + r] = end[r - 1] == DerivativeConstraint::Zero;
        }
        Self {
            basis,
            ratios: durations.iter().map(|d| d / t_ref).collect(),
            fixed,
        }
    }

    fn segment_scale(&self, seg: usize) -> Vec<f64> {
        let k = self.basis.k;
        let rho = self.ratios[seg];
        (0..2 * k).map(|i| rho.powi((i % k) as i32)).collect()
    }

    /// Global quadratic form `R` such that the cost is `d̂ᵀ R d̂` (up to a constant factor).
    fn hessian(&self) -> DMatrix<f64> {
        let k = self.basis.k;
        let m = self.ratios.len();
        let n = (m + 1) * k;
        let s = (k - 1) as i32;
        let mut r = DMatrix::<f64>::zeros(n, n);
        for seg in 0..m {
            let scale = self.segment_scale(seg);
            let w = self.ratios[seg].powi(1 - 2 * s);
            for i in 0..2 * k {
                let gi = seg * k + i;
                for j in 0..2 * k {
                    let gj = seg * k + j;
                    r[(gi, gj)] += w * scale[i] * scale[j] * self.basis.endpoint_cost[(i, j)];
                }
            }
        }
        r
    }

    /// Solve for the free knot derivatives of several axes at once.
    /// `values[axis][knot]` are the waypoint values of each axis.
    fn solve(&self, values: &[Vec<f64>]) -> Option<Vec<DVector<f64>>> {
        let k = self.basis.k;
        let r = self.hessian();
        let free: Vec<usize> = (0..self.fixed.len()).filter(|i| !self.fixed[*i]).collect();
        let fixed: Vec<usize> = (0..self.fixed.len()).filter(|i| self.fixed[*i]).collect();
        let rff = r.select_rows(&free).select_columns(&free);
        let rfp = r.select_rows(&free).select_columns(&fixed);
        let chol = if free.is_empty() {
            None
        } else {
            Some(rff.cholesky()?)
        };
        let mut out = Vec::with_capacity(values.len());
        for vals in values {
            let mut d = DVector::<f64>::zeros(self.fixed.len());
            for (knot, v) in vals.iter().enumerate() {
                d[knot * k] = *v;
            }
            if let Some(chol) = &chol {
                let dp = DVector::from_iterator(fixed.len(), fixed.iter().map(|&i| d[i]));
                let rhs = -(&rfp * dp);
                let df = chol.solve(&rhs);
                if df.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                for (idx, &i) in free.iter().enumerate() {
                    d[i] = df[idx];
                }
            }
            out.push(d);
        }
        Some(out)
    }

    fn coefficients(&self, d: &DVector<f64>, seg: usize) -> DVector<f64> {
        let k = self.basis.k;
        let scale = self.segment_scale(seg);
        let local = DVector::from_iterator(2 * k, (0..2 * k).map(|i| d[seg * k + i] * scale[i]));
        &self.basis.endpoint_to_coeffs * local
    }
}

/// Piecewise-polynomial map from time to position and yaw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    segments: Vec<PolynomialSegment>,
    durations: TimeAllocation,
}

impl Trajectory {
    fn from_segments(segments: Vec<PolynomialSegment>, durations: TimeAllocation) -> Self {
        Self {
            segments,
            durations,
        }
    }

    pub fn segments(&self) -> &[PolynomialSegment] {
        &self.segments
    }

    pub fn durations(&self) -> &TimeAllocation {
        &self.durations
    }

    pub fn total_time(&self) -> f64 {
        self.durations.total()
    }

    /// Start time of every segment.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.durations
            .as_slice()
            .iter()
            .map(|d| {
                let s = acc;
                acc += d;
                s
            })
            .collect()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let total = self.total_time();
        let tol = 1e-9 * total.max(1.0);
        if !(t >= -tol && t <= total + tol) {
            return Err(TrajectoryError::OutOfRange { t, total });
        }
        let t = t.clamp(0.0, total);
        let last = self.segments.len() - 1;
        let mut start = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            if i == last || t < start + seg.duration {
                return Ok((i, (t - start).clamp(0.0, seg.duration)));
            }
            start += seg.duration;
        }
        unreachable!("trajectory has at least one segment")
    }

    /// `(x, y, z, yaw)` derivative of the given order at time `t`.
    /// Yaw is continuous (unwrapped) along the trajectory.
    pub fn sample(&self, t: f64, order: usize) -> Result<Vector4<f64>> {
        if order > POSITION_CONTINUITY {
            return Err(TrajectoryError::OrderOutOfRange {
                order,
                max: POSITION_CONTINUITY,
            });
        }
        let (seg, local) = self.locate(t)?;
        Ok(self.segments[seg].evaluate(local, order))
    }

    /// Orders 0 through 4 at time `t`.
    pub fn sample_all(&self, t: f64) -> Result<[Vector4<f64>; 5]> {
        let (seg, local) = self.locate(t)?;
        let s = &self.segments[seg];
        Ok(std::array::from_fn(|order| s.evaluate(local, order)))
    }

    /// Write a CSV with time, position/yaw and their derivatives up to order 4.
    pub fn write_csv<W: Write>(&self, rate_hz: f64, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        let names = ["x", "y", "z", "yaw"];
        for order in 0..=POSITION_CONTINUITY {
            for n in names {
                header.push(if order == 0 {
                    n.to_string()
                } else {
                    format!("{n}_d{order}")
                });
            }
        }
        w.write_record(&header)?;
        let total = self.total_time();
        let n = ((total * rate_hz).ceil() as usize).max(1);
        for i in 0..=n {
            let t = (i as f64 / rate_hz).min(total);
            let all = self.sample_all(t).expect("grid time inside trajectory");
            let mut row = vec![format!("{t:.6}")];
            for v in all.iter() {
                row.extend(v.iter().map(|x| format!("{x:.9e}")));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_allocation(waypoints: &WaypointList, allocation: &TimeAllocation) -> Result<()> {
    let m = waypoints.segment_count();
    if allocation.len() != m {
        return Err(TrajectoryError::AllocationLength {
            expected: m,
            got: allocation.len(),
        });
    }
    for (i, d) in allocation.as_slice().iter().enumerate() {
        if *d < MIN_SEGMENT_DURATION {
            return Err(TrajectoryError::DegenerateAllocation {
                segment: i,
                duration: *d,
            });
        }
    }
    Ok(())
}

fn shortest_segment(allocation: &TimeAllocation) -> (usize, f64) {
    allocation
        .as_slice()
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// Minimum-snap trajectory through the waypoints with the given segment durations.
///
/// Each axis is minimized independently, so the minimizer does not depend on
/// the (positive) weights; they only scale the reported smoothness.
pub fn min_snap(
    waypoints: &WaypointList,
    allocation: &TimeAllocation,
    bc: &BoundaryConditions,
    _weights: &SmoothnessWeights,
) -> Result<Trajectory> {
    check_allocation(waypoints, allocation)?;
    let durations = allocation.as_slice();
    let m = durations.len();
    let degenerate = || {
        let (segment, duration) = shortest_segment(allocation);
        TrajectoryError::DegenerateAllocation { segment, duration }
    };

    let pos_basis = basis(POSITION_COEFFS);
    let pos_problem = KnotProblem::new(pos_basis, durations, &bc.start.position, &bc.end.position);
    let pos_values: Vec<Vec<f64>> = (0..3)
        .map(|axis| {
            waypoints
                .waypoints()
                .iter()
                .map(|w| w.position[axis])
                .collect()
        })
        .collect();
    let pos = pos_problem.solve(&pos_values).ok_or_else(degenerate)?;

    let yaw_basis = basis(YAW_COEFFS);
    let yaw_problem = KnotProblem::new(yaw_basis, durations, &bc.start.yaw, &bc.end.yaw);
    let yaw = yaw_problem
        .solve(&[waypoints.unwrapped_yaw()])
        .ok_or_else(degenerate)?;

    let segments = (0..m)
        .map(|seg| {
            let mut position = [[0.0; POSITION_COEFFS]; 3];
            for (axis, d) in pos.iter().enumerate() {
                let c = pos_problem.coefficients(d, seg);
                position[axis].copy_from_slice(c.as_slice());
            }
            let mut yaw_c = [0.0; YAW_COEFFS];
            yaw_c.copy_from_slice(yaw_problem.coefficients(&yaw[0], seg).as_slice());
            PolynomialSegment {
                duration: durations[seg],
                position,
                yaw: yaw_c,
            }
        })
        .collect();
    Ok(Trajectory::from_segments(segments, allocation.clone()))
}

/// `μ_r ∫‖d⁴p_r/dt⁴‖² dt + μ_ψ ∫(d²p_ψ/dt²)² dt`, in closed form.
pub fn smoothness(traj: &Trajectory, weights: &SmoothnessWeights) -> f64 {
    traj.segments
        .iter()
        .map(|s| {
            let (snap, yaw) = s.cost_terms();
            weights.mu_r * snap + weights.mu_psi * yaw
        })
        .sum()
}

/// Result of the ratio optimization over the simplex `{x > 0, Σx = T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSolution {
    pub allocation: TimeAllocation,
    pub smoothness: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the stopping test passed.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioOptions {
    pub max_iterations: usize,
    pub step_tol: f64,
}

impl Default for RatioOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tol: 1e-10,
        }
    }
}

/// Euclidean projection onto `{w : w_i ≥ floor, Σ w_i = 1}`.
fn project_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let budget = 1.0 - floor * n as f64;
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - budget) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    shifted
        .iter()
        .map(|x| (x - theta).max(0.0) + floor)
        .collect()
}

/// Smoothness-minimizing split of `total_time` across segments, by projected
/// gradient descent on `ln σ` with central-difference gradients, starting
/// from the uniform split.
pub fn optimize_allocation_ratio(
    waypoints: &WaypointList,
    total_time: f64,
    bc: &BoundaryConditions,
    weights: &SmoothnessWeights,
    options: &RatioOptions,
) -> Result<RatioSolution> {
    if !(total_time.is_finite() && total_time > 0.0) {
        return Err(TrajectoryError::InvalidTotalTime);
    }
    let m = waypoints.segment_count();
    let uniform = TimeAllocation::uniform(m, total_time)?;
    let eval = |w: &[f64]| -> Result<f64> {
        let alloc = TimeAllocation::new(w.iter().map(|r| r * total_time).collect())?;
        Ok(smoothness(
            &min_snap(waypoints, &alloc, bc, weights)?,
            weights,
        ))
    };
    let sigma0 = eval(&vec![1.0 / m as f64; m])?;
    if m == 1 || sigma0 <= 0.0 {
        return Ok(RatioSolution {
            allocation: uniform,
            smoothness: sigma0,
            iterations: 0,
            converged: true,
        });
    }

    let floor = (2.0 * MIN_SEGMENT_DURATION / total_time)
        .max(1e-6)
        .min(0.5 / m as f64);
    let objective = |w: &[f64]| -> f64 {
        match eval(w) {
            Ok(s) if s > 0.0 => s.ln(),
            _ => f64::INFINITY,
        }
    };
    let mut w = vec![1.0 / m as f64; m];
    let mut f = sigma0.ln();
    let mut step = 0.05;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let mut grad = vec![0.0; m];
        for i in 0..m {
            let h = 1e-6 * w[i].max(1e-3);
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] = (wm[i] - h).max(floor * 0.5);
            grad[i] = (objective(&wp) - objective(&wm)) / (wp[i] - wm[i]);
        }
        let mean = grad.iter().sum::<f64>() / m as f64;
        for g in grad.iter_mut() {
            *g -= mean;
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !gnorm.is_finite() || gnorm < 1e-12 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let trial: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(wi, gi)| wi - step * gi / gnorm)
                .collect();
            let trial = project_simplex(&trial, floor);
            let decrease: f64 = grad
                .iter()
                .zip(w.iter().zip(&trial))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            let ft = objective(&trial);
            if ft <= f - 1e-4 * decrease && ft < f {
                let moved = w
                    .iter()
                    .zip(&trial)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                w = trial;
                f = ft;
                step *= 2.0;
                accepted = true;
                if moved < options.step_tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "allocation ratio search hit the {} iteration cap",
            options.max_iterations
        );
    }
    let allocation = TimeAllocation::new(w.iter().map(|r| r * total_time).collect())?;
    let smoothness = eval(&w)?;
    Ok(RatioSolution {
        allocation,
        smoothness,
        iterations,
        converged,
    })
}

/// Bracket and tolerance for the uniform time-scaling search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingOptions {
    pub lower: f64,
    pub upper: f64,
    pub rel_tol: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            lower: 0.1,
            upper: 20.0,
            rel_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaledTrajectory {
    pub eta: f64,
    pub allocation: TimeAllocation,
    pub trajectory: Trajectory,
    pub oracle_calls: usize,
}

/// Smallest `η` in the bracket such that `χ(ηx)` passes `oracle`, by
/// geometric bisection. Assumes feasibility is monotone in `η`.
pub fn scale_to_feasibility<F>(
    waypoints: &WaypointList,
    allocation: &TimeAllocation,
    bc: &BoundaryConditions,
    weights: &SmoothnessWeights,
    options: &ScalingOptions,
    mut oracle: F,
) -> Result<ScaledTrajectory>
where
    F: FnMut(&Trajectory) -> bool,
{
    let mut calls = 0;
    let mut check = |eta: f64| -> Option<Trajectory> {
        let alloc = allocation.scaled(eta).ok()?;
        let traj = min_snap(waypoints, &alloc, bc, weights).ok()?;
        calls += 1;
        oracle(&traj).then_some(traj)
    };
    let (mut lo, mut hi) = (options.lower, options.upper);
    let Some(mut best) = check(hi) else {
        return Err(TrajectoryError::Infeasible { upper: hi });
    };
    if let Some(t) = check(lo) {
        best = t;
        hi = lo;
    } else {
        while hi / lo - 1.0 > options.rel_tol {
            let mid = (lo * hi).sqrt();
            match check(mid) {
                Some(t) => {
                    best = t;
                    hi = mid;
                }
                None => lo = mid,
            }
        }
    }
    Ok(ScaledTrajectory {
        eta: hi,
        allocation: best.durations().clone(),
        trajectory: best,
        oracle_calls: calls,
    })
}
