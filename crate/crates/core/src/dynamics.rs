//! Longitudinal double-integrator vehicle model and the time-to-collision
//! safety function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longitudinal position (m) and velocity (m/s) of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: f64,
    pub velocity: f64,
}

impl VehicleState {
    pub const fn new(position: f64, velocity: f64) -> Self {
        Self { position, velocity }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.velocity.is_finite()
    }

    /// State reached after `steps` steps of constant-velocity motion.
    pub fn coast(&self, steps: usize, dt: f64) -> Self {
        Self::new(self.position + self.velocity * dt * steps as f64, self.velocity)
    }
}

/// Longitudinal acceleration in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub acceleration: f64,
}

impl ControlInput {
    pub const fn new(acceleration: f64) -> Self {
        Self { acceleration }
    }
}

/// State and input box together with the discretization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub dt: f64,
}

impl Bounds {
    pub fn new(v_min: f64, v_max: f64, u_min: f64, u_max: f64, dt: f64) -> Result<Self> {
        let b = Self { v_min, v_max, u_min, u_max, dt };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.v_min, self.v_max, self.u_min, self.u_max, self.dt];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("bounds"));
        }
        if self.v_min >= self.v_max {
            return Err(Error::InvalidBounds(format!(
                "v_min {} must be below v_max {}",
                self.v_min, self.v_max
            )));
        }
        if !(self.u_min < 0.0 && 0.0 < self.u_max) {
            return Err(Error::InvalidBounds(format!(
                "need u_min < 0 < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidBounds(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn clamp_velocity(&self, v: f64) -> f64 {
        v.clamp(self.v_min, self.v_max)
    }

    pub fn contains_control(&self, u: f64) -> bool {
        (self.u_min..=self.u_max).contains(&u)
    }

    /// The scenario bounds: speed in [3, 10] m/s, acceleration in [-3, 2] m/s², dt = 1 s.
    pub fn scenario() -> Self {
        Self { v_min: 3.0, v_max: 10.0, u_min: -3.0, u_max: 2.0, dt: 1.0 }
    }
}

/// One step of the double integrator. Position follows the exact kinematics,
/// velocity saturates at the bounds.
pub fn step(s: VehicleState, u: ControlInput, b: &Bounds) -> Result<VehicleState> {
    if !s.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    let a = u.acceleration;
    if !a.is_finite() {
        return Err(Error::NonFinite("control input"));
    }
    if !b.contains_control(a) {
        return Err(Error::ControlOutOfBounds { value: a, min: b.u_min, max: b.u_max });
    }
    Ok(step_unchecked(s, a, b))
}

#[inline]
pub(crate) fn step_unchecked(s: VehicleState, a: f64, b: &Bounds) -> VehicleState {
    let dt = b.dt;
    VehicleState {
        position: s.position + s.velocity * dt + 0.5 * a * dt * dt,
        velocity: b.clamp_velocity(s.velocity + a * dt),
    }
}

/// Free distance between the two vehicles.
pub fn gap(ego: &VehicleState, lead: &VehicleState, vehicle_length: f64) -> f64 {
    lead.position - ego.position - vehicle_length
}

/// Time to collision: infinite when the leader is not slower, otherwise the
/// gap over the closing speed. A negative gap is a collision.
pub fn ttc(ego: &VehicleState, lead: &VehicleState, vehicle_length: f64) -> Result<f64> {
    if !ego.is_finite() || !lead.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    let d = gap(ego, lead, vehicle_length);
    if d < 0.0 {
        return Err(Error::Collision { gap: d });
    }
    if lead.velocity >= ego.velocity {
        Ok(f64::INFINITY)
    } else {
        Ok(d / (ego.velocity - lead.velocity))
    }
}
