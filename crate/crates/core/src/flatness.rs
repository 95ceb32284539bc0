//! Differential-flatness map from position/yaw derivatives to reference
//! motor speeds, and the actuator-bound feasibility check built on it.

use crate::trajectory::Trajectory;
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlatnessError {
    #[error("vehicle parameter `{0}` must be finite and strictly positive")]
    InvalidParam(&'static str),
    #[error("motor speed bounds must satisfy 0 <= min < max")]
    InvalidSpeedBounds,
    #[error("attitude undefined: net specific force {specific_force:.3e} m/s² at acceleration {acceleration:?}")]
    Singularity {
        specific_force: f64,
        acceleration: [f64; 3],
    },
    #[error("check step must satisfy 0 < dt <= T (dt = {dt}, T = {total})")]
    InvalidStep { dt: f64, total: f64 },
}

/// Rigid-body and actuator constants of the quadrotor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the body inertia, kg·m².
    pub inertia: [f64; 3],
    /// Center to rotor distance, m.
    pub arm_length: f64,
    /// Thrust per squared rotor speed, N/(rad/s)².
    pub thrust_coeff: f64,
    /// Reaction torque per squared rotor speed, N·m/(rad/s)².
    pub torque_coeff: f64,
    /// rad/s
    pub motor_speed_min: f64,
    /// rad/s
    pub motor_speed_max: f64,
    /// m/s²
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.005, 0.005, 0.009],
            arm_length: 0.15,
            thrust_coeff: 1e-5,
            torque_coeff: 1e-7,
            motor_speed_min: 0.0,
            motor_speed_max: 1200.0,
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), FlatnessError> {
        let positive = [
            ("mass", self.mass),
            ("inertia[0]", self.inertia[0]),
            ("inertia[1]", self.inertia[1]),
            ("inertia[2]", self.inertia[2]),
            ("arm_length", self.arm_length),
            ("thrust_coeff", self.thrust_coeff),
            ("torque_coeff", self.torque_coeff),
            ("motor_speed_max", self.motor_speed_max),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(FlatnessError::InvalidParam(name));
            }
        }
        if !(self.motor_speed_min >= 0.0 && self.motor_speed_min < self.motor_speed_max) {
            return Err(FlatnessError::InvalidSpeedBounds);
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    /// Rotor speed that holds the vehicle in hover, `√(mg / 4k_f)`.
    pub fn hover_speed(&self) -> f64 {
        (self.mass * self.gravity / (4.0 * self.thrust_coeff)).sqrt()
    }
}

/// Position derivatives of orders 0–4 and yaw derivatives of orders 0–2 at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatOutputs {
    pub position: [Vector3<f64>; 5],
    pub yaw: [f64; 3],
}

impl FlatOutputs {
    pub fn hover(position: Vector3<f64>, yaw: f64) -> Self {
        let mut p = [Vector3::zeros(); 5];
        p[0] = position;
        Self {
            position: p,
            yaw: [yaw, 0.0, 0.0],
        }
    }

    pub fn from_trajectory(traj: &Trajectory, t: f64) -> crate::trajectory::Result<Self> {
        let all = traj.sample_all(t)?;
        Ok(Self {
            position: std::array::from_fn(|k| all[k].xyz()),
            yaw: [all[0].w, all[1].w, all[2].w],
        })
    }
}

/// Per-motor squared speeds. Negative entries mean the requested wrench
/// needs reversed thrust; they are reported, not clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorCommand {
    pub squared_speeds: [f64; 4],
}

impl MotorCommand {
    /// Sign-preserving square root of the squared speeds, rad/s.
    pub fn speeds(&self) -> [f64; 4] {
        self.squared_speeds.map(|s| s.signum() * s.abs().sqrt())
    }
}

/// Full reference state and inputs implied by the flat outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub yaw: f64,
    /// Body-to-world rotation, columns are the body axes.
    pub rotation: Matrix3<f64>,
    /// Collective thrust, N.
    pub thrust: f64,
    /// Body-frame angular velocity, rad/s.
    pub angular_velocity: Vector3<f64>,
    /// Body-frame angular acceleration, rad/s².
    pub angular_acceleration: Vector3<f64>,
    /// Body-frame torque, N·m.
    pub torque: Vector3<f64>,
    pub motors: MotorCommand,
}

/// "X" rotor layout: rotors at 45° between the body axes, diagonal pairs
/// spinning the same way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixer {
    /// Maps per-rotor thrust to `[f, τx, τy, τz]`.
    allocation: Matrix4<f64>,
    inverse: Matrix4<f64>,
    thrust_coeff: f64,
}

impl Mixer {
    pub fn new(params: &VehicleParams) -> Self {
        let d = params.arm_length / std::f64::consts::SQRT_2;
        let kappa = params.torque_coeff / params.thrust_coeff;
        // rotor (x, y, spin)
        let rotors = [(d, -d, 1.0), (-d, d, 1.0), (d, d, -1.0), (-d, -d, -1.0)];
        let mut allocation = Matrix4::zeros();
        for (i, (x, y, spin)) in rotors.iter().enumerate() {
            allocation[(0, i)] = 1.0;
            allocation[(1, i)] = *y;
            allocation[(2, i)] = -*x;
            allocation[(3, i)] = kappa * *spin;
        }
        let inverse = allocation.try_inverse().expect("X mixer is invertible");
        Self {
            allocation,
            inverse,
            thrust_coeff: params.thrust_coeff,
        }
    }

    /// Per-rotor thrust (N) for a collective thrust and body torque.
    pub fn rotor_thrusts(&self, thrust: f64, torque: &Vector3<f64>) -> Vector4<f64> {
        self.inverse * Vector4::new(thrust, torque.x, torque.y, torque.z)
    }

    pub fn squared_speeds(&self, thrust: f64, torque: &Vector3<f64>) -> MotorCommand {
        let f = self.rotor_thrusts(thrust, torque);
        MotorCommand {
            squared_speeds: std::array::from_fn(|i| f[i] / self.thrust_coeff),
        }
    }

    /// Rotor thrusts within `[lo, hi]` that keep the requested torque when
    /// possible by shifting collective thrust, otherwise shrink the torque.
    pub fn saturated_rotor_thrusts(
        &self,
        thrust: f64,
        torque: &Vector3<f64>,
        lo: f64,
        hi: f64,
    ) -> Vector4<f64> {
        let collective = self.inverse.column(0).into_owned();
        let mut from_torque = self.rotor_thrusts(0.0, torque);
        let span = from_torque.max() - from_torque.min();
        // every rotor gets the same share of collective thrust
        let share = collective[0];
        if span > hi - lo {
            from_torque *= (hi - lo) / span;
        }
        let f_lo = (0..4)
            .map(|i| (lo - from_torque[i]) / share)
            .fold(f64::NEG_INFINITY, f64::max);
        let f_hi = (0..4)
            .map(|i| (hi - from_torque[i]) / share)
            .fold(f64::INFINITY, f64::min);
        let f = thrust.clamp(f_lo, f_hi.max(f_lo));
        (collective * f + from_torque).map(|x| x.clamp(lo, hi))
    }

    /// `[f, τx, τy, τz]` produced by per-rotor thrusts.
    pub fn wrench(&self, rotor_thrusts: &Vector4<f64>) -> Vector4<f64> {
        self.allocation * rotor_thrusts
    }
}

/// Unit vector `v/|v|` with its first two time derivatives.
fn normalize_with_rates(
    v: Vector3<f64>,
    dv: Vector3<f64>,
    ddv: Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = v.norm();
    let u = v / n;
    let dn = u.dot(&dv);
    let du = (dv - u * dn) / n;
    let ddn = du.dot(&dv) + u.dot(&ddv);
    let ddu = (ddv - du * (2.0 * dn) - u * ddn) / n;
    (u, du, ddu)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Attitude, body rates and angular acceleration from the thrust direction
/// (with two derivatives) and yaw (with two derivatives). Exact, no numeric
/// differentiation.
pub fn attitude_from_thrust_direction(
    force: Vector3<f64>,
    dforce: Vector3<f64>,
    ddforce: Vector3<f64>,
    yaw: [f64; 3],
) -> Option<(Matrix3<f64>, Vector3<f64>, Vector3<f64>)> {
    let (z, dz, ddz) = normalize_with_rates(force, dforce, ddforce);
    let (s, c) = yaw[0].sin_cos();
    let xc = Vector3::new(c, s, 0.0);
    let dxc = Vector3::new(-s, c, 0.0) * yaw[1];
    let ddxc = Vector3::new(-s, c, 0.0) * yaw[2] - Vector3::new(c, s, 0.0) * yaw[1] * yaw[1];
    let w = z.cross(&xc);
    if w.norm() < 1e-9 {
        return None;
    }
    let dw = dz.cross(&xc) + z.cross(&dxc);
    let ddw = ddz.cross(&xc) + dz.cross(&dxc) * 2.0 + z.cross(&ddxc);
    let (y, dy, ddy) = normalize_with_rates(w, dw, ddw);
    let x = y.cross(&z);
    let dx = dy.cross(&z) + y.cross(&dz);
    let ddx = ddy.cross(&z) + dy.cross(&dz) * 2.0 + y.cross(&ddz);
    let r = Matrix3::from_columns(&[x, y, z]);
    let dr = Matrix3::from_columns(&[dx, dy, dz]);
    let ddr = Matrix3::from_columns(&[ddx, ddy, ddz]);
    let omega = vee(&(r.transpose() * dr));
    let domega = vee(&(dr.transpose() * dr + r.transpose() * ddr));
    Some((r, omega, domega))
}

/// Full reference state (attitude, rates, thrust, torques, motor speeds)
/// from the flat outputs.
pub fn flat_to_state(
    flat: &FlatOutputs,
    params: &VehicleParams,
) -> Result<ReferenceState, FlatnessError> {
    let g = Vector3::new(0.0, 0.0, params.gravity);
    let force = flat.position[2] + g;
    let norm = force.norm();
    let singular = || FlatnessError::Singularity {
        specific_force: norm,
        acceleration: flat.position[2].into(),
    };
    if !(norm > 1e-6 * params.gravity) {
        return Err(singular());
    }
    let (rotation, omega, domega) =
        attitude_from_thrust_direction(force, flat.position[3], flat.position[4], flat.yaw)
            .ok_or_else(singular)?;
    let thrust = params.mass * norm;
    let j = params.inertia_matrix();
    let torque = j * domega + omega.cross(&(j * omega));
    let motors = Mixer::new(params).squared_speeds(thrust, &torque);
    Ok(ReferenceState {
        position: flat.position[0],
        velocity: flat.position[1],
        acceleration: flat.position[2],
        yaw: flat.yaw[0],
        rotation,
        thrust,
        angular_velocity: omega,
        angular_acceleration: domega,
        torque,
        motors,
    })
}

/// Reference squared motor speeds for the flat outputs.
pub fn flat_to_inputs(
    flat: &FlatOutputs,
    params: &VehicleParams,
) -> Result<MotorCommand, FlatnessError> {
    Ok(flat_to_state(flat, params)?.motors)
}

/// Why an evaluation was labeled infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MotorSpeedHigh,
    MotorSpeedLow,
    Singularity,
    PositionError,
    YawError,
    Diverged,
    EvaluatorError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// First time a bound was exceeded, s.
    pub time: f64,
    /// Worst excess beyond the bound over the horizon, in the bound's units
    /// (rad/s, m or rad).
    pub margin: f64,
    /// Kind of the worst excess.
    pub kind: ViolationKind,
}

/// Binary feasibility outcome; the detail only exists for infeasible results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum FeasibilityLabel {
    Feasible,
    Infeasible(Violation),
}

impl FeasibilityLabel {
    pub fn is_feasible(&self) -> bool {
        matches!(self, FeasibilityLabel::Feasible)
    }

    pub fn violation(&self) -> Option<&Violation> {
        match self {
            FeasibilityLabel::Feasible => None,
            FeasibilityLabel::Infeasible(v) => Some(v),
        }
    }
}

/// Check grid `0, dt, 2dt, …` with `T` appended when it is not a multiple of `dt`.
pub fn check_grid(total: f64, dt: f64) -> Vec<f64> {
    let n = (total / dt + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).min(total)).collect();
    if total - grid[n] > 1e-12 {
        grid.push(total);
    }
    grid
}

/// Default grid step for the low-fidelity check, s.
pub const DEFAULT_CHECK_DT: f64 = 0.01;

/// Low-fidelity check: feasible iff every reference motor speed stays in
/// `[u_min, u_max]` at every grid time.
pub fn check_low_fidelity(
    traj: &Trajectory,
    params: &VehicleParams,
    dt: f64,
) -> Result<FeasibilityLabel, FlatnessError> {
    params.validate()?;
    let total = traj.total_time();
    if !(dt > 0.0 && dt <= total) {
        return Err(FlatnessError::InvalidStep { dt, total });
    }
    let lo2 = params.motor_speed_min * params.motor_speed_min;
    let hi2 = params.motor_speed_max * params.motor_speed_max;
    let mut worst: Option<Violation> = None;
    for t in check_grid(total, dt) {
        let flat = FlatOutputs::from_trajectory(traj, t).expect("grid inside trajectory");
        let motors = match flat_to_inputs(&flat, params) {
            Ok(m) => m,
            Err(_) => {
                let time = worst.map_or(t, |w| w.time);
                return Ok(FeasibilityLabel::Infeasible(Violation {
                    time,
                    margin: f64::INFINITY,
                    kind: ViolationKind::Singularity,
                }));
            }
        };
        for (sq, speed) in motors.squared_speeds.iter().zip(motors.speeds()) {
            let excess = if *sq > hi2 {
                Some((
                    speed - params.motor_speed_max,
                    ViolationKind::MotorSpeedHigh,
                ))
            } else if *sq < lo2 {
                Some((params.motor_speed_min - speed, ViolationKind::MotorSpeedLow))
            } else {
                None
            };
            if let Some((margin, kind)) = excess {
                match &mut worst {
                    None => {
                        worst = Some(Violation {
                            time: t,
                            margin,
                            kind,
                        })
                    }
                    Some(w) if margin > w.margin => {
                        w.margin = margin;
                        w.kind = kind;
                    }
                    Some(_) => {}
                }
            }
        }
    }
    if let Some(v) = worst {
        return Ok(FeasibilityLabel::Infeasible(v));
    }
    Ok(FeasibilityLabel::Feasible)
}
