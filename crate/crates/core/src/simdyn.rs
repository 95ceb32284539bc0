//! Rigid-body quadrotor simulation with motor lag, drag and noise, flown by
//! a cascaded tracking controller. Feasibility is judged on the tracking
//! error against the reference trajectory.

use crate::flatness::{
    attitude_from_thrust_direction, flat_to_state, FeasibilityLabel, FlatOutputs, FlatnessError,
    Mixer, VehicleParams, Violation, ViolationKind,
};
use crate::stats::{mix_seed, wrap_angle};
use crate::trajectory::Trajectory;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vehicle(#[from] FlatnessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// m
    pub position_std: f64,
    /// m/s
    pub velocity_std: f64,
    /// rad, per body axis
    pub attitude_std: f64,
    /// rad/s
    pub rate_std: f64,
    /// Relative per-motor thrust noise, redrawn every step.
    pub thrust_std: f64,
    /// First-order motor speed lag, s.
    pub motor_time_constant: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position_std: 0.005,
            velocity_std: 0.01,
            attitude_std: 0.005,
            rate_std: 0.01,
            thrust_std: 0.02,
            motor_time_constant: 0.03,
        }
    }
}

impl NoiseConfig {
    /// No stochastic terms; the motor lag is kept.
    pub fn noiseless() -> Self {
        Self {
            position_std: 0.0,
            velocity_std: 0.0,
            attitude_std: 0.0,
            rate_std: 0.0,
            thrust_std: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingErrorBounds {
    /// m
    pub max_position_error: f64,
    /// rad
    pub max_yaw_error: f64,
}

impl Default for TrackingErrorBounds {
    fn default() -> Self {
        Self {
            max_position_error: 0.2,
            max_yaw_error: 15f64.to_radians(),
        }
    }
}

/// Per-axis gains of the position, attitude and body-rate loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// 1/s²
    pub position: [f64; 3],
    /// 1/s
    pub velocity: [f64; 3],
    /// 1/s
    pub attitude: [f64; 3],
    /// 1/s
    pub rate: [f64; 3],
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            position: [9.0, 9.0, 12.0],
            velocity: [6.0, 6.0, 7.0],
            attitude: [10.0, 10.0, 5.0],
            rate: [25.0, 25.0, 12.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Integration and control step, s.
    pub dt: f64,
    pub noise: NoiseConfig,
    pub repetitions: usize,
    pub seed: u64,
    pub error_bounds: TrackingErrorBounds,
    pub gains: ControllerGains,
    /// Linear drag, N·s/m.
    pub drag_coeff: f64,
    /// Runs whose position norm exceeds this are aborted, m.
    pub position_cap: f64,
    /// Runs whose speed exceeds this are aborted, m/s.
    pub speed_cap: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.002,
            noise: NoiseConfig::default(),
            repetitions: 3,
            seed: 0,
            error_bounds: TrackingErrorBounds::default(),
            gains: ControllerGains::default(),
            drag_coeff: 0.1,
            position_cap: 100.0,
            speed_cap: 50.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::InvalidConfig(what.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1");
        }
        let n = &self.noise;
        for (name, v) in [
            ("position_std", n.position_std),
            ("velocity_std", n.velocity_std),
            ("attitude_std", n.attitude_std),
            ("rate_std", n.rate_std),
            ("thrust_std", n.thrust_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("noise.{name} must be >= 0"));
            }
        }
        if !(n.motor_time_constant.is_finite() && n.motor_time_constant > 0.0) {
            return bad("noise.motor_time_constant must be > 0");
        }
        let b = &self.error_bounds;
        if !(b.max_position_error >= 0.0 && b.max_yaw_error >= 0.0) {
            return bad("error bounds must be >= 0");
        }
        let g = &self.gains;
        if g.position
            .iter()
            .chain(&g.velocity)
            .chain(&g.attitude)
            .chain(&g.rate)
            .any(|k| !(k.is_finite() && *k >= 0.0))
        {
            return bad("controller gains must be finite and >= 0");
        }
        if !(self.drag_coeff.is_finite() && self.drag_coeff >= 0.0) {
            return bad("drag_coeff must be >= 0");
        }
        if !(self.position_cap > 0.0 && self.speed_cap > 0.0) {
            return bad("divergence caps must be > 0");
        }
        Ok(())
    }
}

/// Reference and simulated position/yaw at every control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingTrace {
    pub time: Vec<f64>,
    pub reference_position: Vec<Vector3<f64>>,
    pub position: Vec<Vector3<f64>>,
    pub reference_yaw: Vec<f64>,
    pub yaw: Vec<f64>,
    pub position_error: Vec<f64>,
    pub yaw_error: Vec<f64>,
    /// Infinite when the run diverged.
    pub max_position_error: f64,
    /// Infinite when the run diverged.
    pub max_yaw_error: f64,
    /// Set when the run was aborted; the trace stops at the abort time.
    pub diverged: bool,
}

impl TrackingTrace {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// First violation of `bounds`, with the worst excess as margin.
    pub fn violation(&self, bounds: &TrackingErrorBounds) -> Option<Violation> {
        let first = self
            .position_error
            .iter()
            .zip(&self.yaw_error)
            .position(|(p, y)| *p > bounds.max_position_error || *y > bounds.max_yaw_error);
        if self.diverged {
            let time = first.map_or(*self.time.last().unwrap_or(&0.0), |i| self.time[i]);
            return Some(Violation {
                time,
                margin: f64::INFINITY,
                kind: ViolationKind::Diverged,
            });
        }
        let i = first?;
        let (margin, kind) = if self.max_position_error > bounds.max_position_error {
            (
                self.max_position_error - bounds.max_position_error,
                ViolationKind::PositionError,
            )
        } else {
            (
                self.max_yaw_error - bounds.max_yaw_error,
                ViolationKind::YawError,
            )
        };
        Some(Violation {
            time: self.time[i],
            margin,
            kind,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "t", "ref_x", "ref_y", "ref_z", "ref_yaw", "sim_x", "sim_y", "sim_z", "sim_yaw",
            "pos_err", "yaw_err",
        ])?;
        for i in 0..self.len() {
            let r = self.reference_position[i];
            let p = self.position[i];
            let row = [
                self.time[i],
                r.x,
                r.y,
                r.z,
                self.reference_yaw[i],
                p.x,
                p.y,
                p.z,
                self.yaw[i],
                self.position_error[i],
                self.yaw_error[i],
            ];
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct State {
    p: Vector3<f64>,
    v: Vector3<f64>,
    q: Quaternion<f64>,
    w: Vector3<f64>,
    /// Rotor speeds, rad/s.
    u: Vector4<f64>,
}

impl State {
    fn axpy(&self, h: f64, d: &State) -> State {
        State {
            p: self.p + d.p * h,
            v: self.v + d.v * h,
            q: self.q + d.q * h,
            w: self.w + d.w * h,
            u: self.u + d.u * h,
        }
    }

    fn rotation(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.q)
            .to_rotation_matrix()
            .into_inner()
    }
}

struct Plant {
    mass: f64,
    gravity: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    thrust_coeff: f64,
    drag: f64,
    motor_tau: f64,
    mixer: Mixer,
}

impl Plant {
    fn derivative(&self, s: &State, u_cmd: &Vector4<f64>, thrust_scale: &Vector4<f64>) -> State {
        let rotor_thrust = s.u.component_mul(&s.u).component_mul(thrust_scale) * self.thrust_coeff;
        let wrench = self.mixer.wrench(&rotor_thrust);
        let r = UnitQuaternion::from_quaternion(s.q);
        let body_z = r * Vector3::z();
        let acc = body_z * (wrench[0] / self.mass)
            - Vector3::z() * self.gravity
            - s.v * (self.drag / self.mass);
        let torque = Vector3::new(wrench[1], wrench[2], wrench[3]);
        let dw = self.inertia_inv * (torque - s.w.cross(&(self.inertia * s.w)));
        let dq = s.q * Quaternion::from_imag(s.w) * 0.5;
        State {
            p: s.v,
            v: acc,
            q: dq,
            w: dw,
            u: (u_cmd - s.u) / self.motor_tau,
        }
    }

    fn rk4(&self, s: &State, u_cmd: &Vector4<f64>, scale: &Vector4<f64>, h: f64) -> State {
        let k1 = self.derivative(s, u_cmd, scale);
        let k2 = self.derivative(&s.axpy(0.5 * h, &k1), u_cmd, scale);
        let k3 = self.derivative(&s.axpy(0.5 * h, &k2), u_cmd, scale);
        let k4 = self.derivative(&s.axpy(h, &k3), u_cmd, scale);
        let mut next = State {
            p: s.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (h / 6.0),
            v: s.v + (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * (h / 6.0),
            q: s.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (h / 6.0),
            w: s.w + (k1.w + k2.w * 2.0 + k3.w * 2.0 + k4.w) * (h / 6.0),
            u: s.u + (k1.u + k2.u * 2.0 + k3.u * 2.0 + k4.u) * (h / 6.0),
        };
        next.q = next.q.normalize();
        next
    }
}

/// Reference quantities the controller consumes at one instant.
struct Reference {
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    acceleration: Vector3<f64>,
    yaw: f64,
    rotation: Option<Matrix3<f64>>,
    angular_velocity: Vector3<f64>,
    angular_acceleration: Vector3<f64>,
}

impl Reference {
    fn at(traj: &Trajectory, t: f64, vehicle: &VehicleParams) -> Self {
        let flat = FlatOutputs::from_trajectory(traj, t).expect("time inside trajectory");
        let mut r = Reference {
            position: flat.position[0],
            velocity: flat.position[1],
            acceleration: flat.position[2],
            yaw: flat.yaw[0],
            rotation: None,
            angular_velocity: Vector3::zeros(),
            angular_acceleration: Vector3::zeros(),
        };
        if let Ok(state) = flat_to_state(&flat, vehicle) {
            r.rotation = Some(state.rotation);
            r.angular_velocity = state.angular_velocity;
            r.angular_acceleration = state.angular_acceleration;
        }
        r
    }
}

struct Controller<'a> {
    gains: &'a ControllerGains,
    vehicle: &'a VehicleParams,
    inertia: Matrix3<f64>,
    mixer: Mixer,
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

impl Controller<'_> {
    /// Rotor speed commands from measured state and reference.
    fn command(
        &self,
        p: &Vector3<f64>,
        v: &Vector3<f64>,
        r: &Matrix3<f64>,
        w: &Vector3<f64>,
        reference: &Reference,
    ) -> Vector4<f64> {
        let g = &self.gains;
        let kp = Vector3::from(g.position);
        let kv = Vector3::from(g.velocity);
        let acc = reference.acceleration
            + kp.component_mul(&(reference.position - p))
            + kv.component_mul(&(reference.velocity - v))
            + Vector3::z() * self.vehicle.gravity;
        let body_z = r.column(2).into_owned();
        let thrust = (self.vehicle.mass * acc.dot(&body_z)).max(0.0);
        let desired = if acc.norm() > 1e-6 {
            attitude_from_thrust_direction(
                acc,
                Vector3::zeros(),
                Vector3::zeros(),
                [reference.yaw, 0.0, 0.0],
            )
            .map(|x| x.0)
        } else {
            None
        };
        let desired = desired.or(reference.rotation).unwrap_or(*r);
        let e_r = vee(&(desired.transpose() * r - r.transpose() * desired)) * 0.5;
        let w_ff = r.transpose() * desired * reference.angular_velocity;
        let w_des = w_ff - Vector3::from(g.attitude).component_mul(&e_r);
        let dw = Vector3::from(g.rate).component_mul(&(w_des - w)) + reference.angular_acceleration;
        let torque = self.inertia * dw + w.cross(&(self.inertia * w));
        let kf = self.vehicle.thrust_coeff;
        let lo = kf * self.vehicle.motor_speed_min.powi(2);
        let hi = kf * self.vehicle.motor_speed_max.powi(2);
        self.mixer
            .saturated_rotor_thrusts(thrust, &torque, lo, hi)
            .map(|f| (f / kf).sqrt())
    }
}

fn heading(r: &Matrix3<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

fn gaussian3(rng: &mut ChaCha8Rng, std: f64) -> Vector3<f64> {
    let mut draw = || rng.sample::<f64, _>(StandardNormal) * std;
    Vector3::new(draw(), draw(), draw())
}

/// Fly `traj` once with the noise stream of `seed`.
pub fn simulate_tracking(
    traj: &Trajectory,
    vehicle: &VehicleParams,
    cfg: &SimConfig,
    seed: u64,
) -> Result<TrackingTrace, SimError> {
    vehicle.validate()?;
    cfg.validate()?;
    let total = traj.total_time();
    let steps = ((total / cfg.dt) - 1e-9).ceil().max(0.0) as usize;
    let mixer = Mixer::new(vehicle);
    let inertia = vehicle.inertia_matrix();
    let plant = Plant {
        mass: vehicle.mass,
        gravity: vehicle.gravity,
        inertia,
        inertia_inv: inertia.try_inverse().expect("validated inertia"),
        thrust_coeff: vehicle.thrust_coeff,
        drag: cfg.drag_coeff,
        motor_tau: cfg.noise.motor_time_constant,
        mixer,
    };
    let controller = Controller {
        gains: &cfg.gains,
        vehicle,
        inertia,
        mixer,
    };
    let noise = &cfg.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let start = Reference::at(traj, 0.0, vehicle);
    let start_rotation = start.rotation.unwrap_or_else(Matrix3::identity);
    let start_speeds = flat_to_state(
        &FlatOutputs::from_trajectory(traj, 0.0).expect("t = 0"),
        vehicle,
    )
    .map(|s| s.motors.squared_speeds.map(|x| x.max(0.0).sqrt()))
    .unwrap_or([vehicle.hover_speed(); 4]);
    let mut state = State {
        p: start.position,
        v: start.velocity,
        q: *UnitQuaternion::from_matrix(&start_rotation).quaternion(),
        w: start.angular_velocity,
        u: Vector4::from(start_speeds),
    };

    let mut trace = TrackingTrace {
        time: Vec::with_capacity(steps + 1),
        reference_position: Vec::with_capacity(steps + 1),
        position: Vec::with_capacity(steps + 1),
        reference_yaw: Vec::with_capacity(steps + 1),
        yaw: Vec::with_capacity(steps + 1),
        position_error: Vec::with_capacity(steps + 1),
        yaw_error: Vec::with_capacity(steps + 1),
        max_position_error: 0.0,
        max_yaw_error: 0.0,
        diverged: false,
    };
    let mut reference = start;
    for k in 0..=steps {
        let t = if k == steps { total } else { k as f64 * cfg.dt };
        if k > 0 {
            reference = Reference::at(traj, t, vehicle);
        }
        let rotation = state.rotation();
        let finite = state
            .p
            .iter()
            .chain(state.v.iter())
            .chain(state.w.iter())
            .all(|x| x.is_finite());
        if !finite || state.p.norm() > cfg.position_cap || state.v.norm() > cfg.speed_cap {
            trace.diverged = true;
            trace.max_position_error = f64::INFINITY;
            trace.max_yaw_error = f64::INFINITY;
            break;
        }
        let yaw = heading(&rotation);
        let pos_err = (state.p - reference.position).norm();
        let yaw_err = wrap_angle(yaw - reference.yaw).abs();
        trace.time.push(t);
        trace.reference_position.push(reference.position);
        trace.position.push(state.p);
        trace.reference_yaw.push(reference.yaw);
        trace.yaw.push(yaw);
        trace.position_error.push(pos_err);
        trace.yaw_error.push(yaw_err);
        trace.max_position_error = trace.max_position_error.max(pos_err);
        trace.max_yaw_error = trace.max_yaw_error.max(yaw_err);
        if k == steps {
            break;
        }

        let p_m = state.p + gaussian3(&mut rng, noise.position_std);
        let v_m = state.v + gaussian3(&mut rng, noise.velocity_std);
        let r_m = rotation * Rotation3::new(gaussian3(&mut rng, noise.attitude_std)).into_inner();
        let w_m = state.w + gaussian3(&mut rng, noise.rate_std);
        let scale = Vector4::from_fn(|_, _| {
            (1.0 + rng.sample::<f64, _>(StandardNormal) * noise.thrust_std).max(0.0)
        });
        let u_cmd = controller.command(&p_m, &v_m, &r_m, &w_m, &reference);
        let h = if k + 1 == steps { total - t } else { cfg.dt };
        state = plant.rk4(&state, &u_cmd, &scale, h);
    }
    Ok(trace)
}

/// Medium-fidelity check: feasible iff every repetition keeps the tracking
/// error within bounds. Repetition `i` uses seed `mix_seed(cfg.seed, i)`.
pub fn check_medium_fidelity(
    traj: &Trajectory,
    vehicle: &VehicleParams,
    cfg: &SimConfig,
) -> Result<FeasibilityLabel, SimError> {
    for rep in 0..cfg.repetitions {
        let trace = simulate_tracking(traj, vehicle, cfg, mix_seed(cfg.seed, rep as u64))?;
        if let Some(v) = trace.violation(&cfg.error_bounds) {
            return Ok(FeasibilityLabel::Infeasible(v));
        }
    }
    Ok(FeasibilityLabel::Feasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{
        min_snap, BoundaryConditions, SmoothnessWeights, TimeAllocation, Waypoint, WaypointList,
    };

    fn dash(duration: f64) -> Trajectory {
        let w = WaypointList::new(vec![
            Waypoint::new(0.0, 0.0, 1.0, 0.0).unwrap(),
            Waypoint::new(1.0, 0.0, 1.0, 0.0).unwrap(),
        ])
        .unwrap();
        min_snap(
            &w,
            &TimeAllocation::new(vec![duration]).unwrap(),
            &BoundaryConditions::default(),
            &SmoothnessWeights::default(),
        )
        .unwrap()
    }

    fn hover() -> Trajectory {
        let p = Waypoint::new(0.0, 0.0, 1.0, 0.4).unwrap();
        let w = WaypointList::new(vec![p, p]).unwrap();
        min_snap(
            &w,
            &TimeAllocation::new(vec![2.0]).unwrap(),
            &BoundaryConditions::default(),
            &SmoothnessWeights::default(),
        )
        .unwrap()
    }

    fn quiet() -> SimConfig {
        SimConfig {
            noise: NoiseConfig::noiseless(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn noiseless_hover_holds_position() {
        let trace = simulate_tracking(&hover(), &VehicleParams::default(), &quiet(), 1).unwrap();
        assert!(
            trace.max_position_error < 0.01,
            "{}",
            trace.max_position_error
        );
        assert!(trace.max_yaw_error < 1e-3);
    }

    #[test]
    fn trace_length_is_ceil_plus_one() {
        let mut cfg = quiet();
        cfg.dt = 0.003;
        let trace = simulate_tracking(&dash(1.0), &VehicleParams::default(), &cfg, 0).unwrap();
        assert_eq!(trace.len(), (1.0f64 / 0.003).ceil() as usize + 1);
        assert_eq!(*trace.time.last().unwrap(), 1.0);
        cfg.dt = 0.002;
        let trace = simulate_tracking(&dash(1.0), &VehicleParams::default(), &cfg, 0).unwrap();
        assert_eq!(trace.len(), 501);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = SimConfig::default();
        let a = simulate_tracking(&dash(2.0), &VehicleParams::default(), &cfg, 42).unwrap();
        let b = simulate_tracking(&dash(2.0), &VehicleParams::default(), &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_tracking(&dash(2.0), &VehicleParams::default(), &cfg, 43).unwrap();
        assert_ne!(a.position, c.position);
    }

    #[test]
    fn gentle_dash_is_feasible() {
        let trace = simulate_tracking(&dash(5.0), &VehicleParams::default(), &quiet(), 0).unwrap();
        assert!(
            trace.max_position_error < 0.2,
            "{}",
            trace.max_position_error
        );
        let mut cfg = SimConfig::default();
        cfg.repetitions = 1;
        assert!(
            check_medium_fidelity(&hover(), &VehicleParams::default(), &cfg)
                .unwrap()
                .is_feasible()
        );
    }

    #[test]
    fn zero_bound_fails_noisy_run() {
        let mut cfg = SimConfig::default();
        cfg.error_bounds.max_position_error = 0.0;
        let label = check_medium_fidelity(&hover(), &VehicleParams::default(), &cfg).unwrap();
        assert_eq!(
            label.violation().unwrap().kind,
            ViolationKind::PositionError
        );
    }

    #[test]
    fn aggressive_dash_fails_and_slower_passes() {
        let cfg = SimConfig::default();
        let vehicle = VehicleParams::default();
        let fast = check_medium_fidelity(&dash(0.4), &vehicle, &cfg).unwrap();
        assert!(!fast.is_feasible());
        assert!(check_medium_fidelity(&dash(0.8), &vehicle, &cfg)
            .unwrap()
            .is_feasible());
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let mut cfg = quiet();
        cfg.speed_cap = 0.5;
        let trace = simulate_tracking(&dash(1.0), &VehicleParams::default(), &cfg, 0).unwrap();
        assert!(trace.diverged);
        assert!(trace.max_position_error.is_infinite());
        let label = check_medium_fidelity(&dash(1.0), &VehicleParams::default(), &cfg).unwrap();
        assert_eq!(label.violation().unwrap().kind, ViolationKind::Diverged);
    }

    #[test]
    fn zero_noise_repetitions_coincide() {
        let cfg = quiet();
        let a =
            simulate_tracking(&dash(1.5), &VehicleParams::default(), &cfg, mix_seed(5, 0)).unwrap();
        let b =
            simulate_tracking(&dash(1.5), &VehicleParams::default(), &cfg, mix_seed(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let trace = simulate_tracking(&dash(0.2), &VehicleParams::default(), &quiet(), 0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), trace.len() + 1);
        assert!(text.starts_with("t,ref_x"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::default();
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.noise.motor_time_constant = 0.0;
        assert!(cfg.validate().is_err());
        let cfg: SimConfig = serde_json::from_str(r#"{"repetitions": 5}"#).unwrap();
        assert_eq!(cfg.dt, 0.002);
    }
}
