//! System state, actuation limits, and agent dynamics.
//!
//! The robot is a kinematic unicycle with state `(x, y, heading, speed)`;
//! humans are holonomic integrators with state `(position, velocity)`. The
//! full system state additionally carries one importance weight per joint
//! prediction sample. Both dynamics use forward Euler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};

/// Simplex tolerance used by [`WeightVector`] validation.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    /// Radians, kept in `(-pi, pi]`.
    pub heading: f64,
    /// Last commanded linear velocity.
    pub speed: f64,
}

impl RobotState {
    pub fn new(position: Vec2, heading: f64, speed: f64) -> Result<Self> {
        let s = Self {
            position,
            heading: wrap_angle(heading),
            speed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.position.is_finite() && self.heading.is_finite() && self.speed.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "non-finite robot state {self:?}"
            )))
        }
    }

    /// World-frame velocity implied by heading and speed.
    pub fn velocity(&self) -> Vec2 {
        self.speed * Vec2::from_angle(self.heading)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

impl RobotAction {
    pub const ZERO: Self = Self {
        linear_velocity: 0.0,
        angular_velocity: 0.0,
    };

    pub fn new(linear_velocity: f64, angular_velocity: f64) -> Self {
        Self {
            linear_velocity,
            angular_velocity,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.linear_velocity.is_finite() && self.angular_velocity.is_finite()
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.linear_velocity, self.angular_velocity]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl HumanState {
    pub fn new(position: Vec2, velocity: Vec2) -> Result<Self> {
        let s = Self { position, velocity };
        if position.is_finite() && velocity.is_finite() {
            Ok(s)
        } else {
            Err(Error::InvalidState(format!("non-finite human state {s:?}")))
        }
    }
}

/// Importance weights over joint prediction samples; always on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::DimensionMismatch(
                "weight vector must be non-empty".into(),
            ));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    /// Validates that `weights` already lies on the simplex.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::DimensionMismatch(
                "weight vector must be non-empty".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidState(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidState(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    /// Scales non-negative finite entries onto the simplex.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidState(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidState("weights sum to zero".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / sum).collect()))
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

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| w * w.ln())
            .sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Robot, humans, and sample weights at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub robot: RobotState,
    pub humans: Vec<HumanState>,
    pub weights: WeightVector,
}

impl SystemState {
    pub fn num_humans(&self) -> usize {
        self.humans.len()
    }

    /// Position of agent `index`: 0 is the robot, `1..=N` the humans.
    pub fn position_of(&self, index: usize) -> Result<Vec2> {
        match index {
            0 => Ok(self.robot.position),
            j if j <= self.humans.len() => Ok(self.humans[j - 1].position),
            _ => Err(Error::IndexOutOfRange {
                index,
                len: self.humans.len() + 1,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActuationLimits {
    pub action_min: RobotAction,
    pub action_max: RobotAction,
    /// Bounds on `u_t - u_{t-1}` per planning step.
    pub rate_min: RobotAction,
    pub rate_max: RobotAction,
}

impl Default for ActuationLimits {
    fn default() -> Self {
        Self {
            action_min: RobotAction::new(0.0, -1.5),
            action_max: RobotAction::new(1.0, 1.5),
            rate_min: RobotAction::new(-0.25, -0.75),
            rate_max: RobotAction::new(0.25, 0.75),
        }
    }
}

impl ActuationLimits {
    pub fn validate(&self) -> Result<()> {
        let ok = self.action_min.linear_velocity <= self.action_max.linear_velocity
            && self.action_min.angular_velocity <= self.action_max.angular_velocity
            && self.rate_min.linear_velocity <= self.rate_max.linear_velocity
            && self.rate_min.angular_velocity <= self.rate_max.angular_velocity
            && self.action_min.is_finite()
            && self.action_max.is_finite()
            && self.rate_min.is_finite()
            && self.rate_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "inconsistent actuation limits {self:?}"
            )))
        }
    }

    /// Clamps `action` into the box and into the rate window around `previous`.
    pub fn clamp(&self, action: RobotAction, previous: RobotAction) -> RobotAction {
        let lo_v = self
            .action_min
            .linear_velocity
            .max(previous.linear_velocity + self.rate_min.linear_velocity);
        let hi_v = self
            .action_max
            .linear_velocity
            .min(previous.linear_velocity + self.rate_max.linear_velocity);
        let lo_w = self
            .action_min
            .angular_velocity
            .max(previous.angular_velocity + self.rate_min.angular_velocity);
        let hi_w = self
            .action_max
            .angular_velocity
            .min(previous.angular_velocity + self.rate_max.angular_velocity);
        RobotAction::new(
            action.linear_velocity.max(lo_v).min(hi_v),
            action.angular_velocity.max(lo_w).min(hi_w),
        )
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidState(format!(
            "time step must be positive, got {dt}"
        )))
    }
}

/// Forward-Euler unicycle step; the new speed is the commanded linear velocity.
pub fn unicycle_step(state: &RobotState, action: &RobotAction, dt: f64) -> Result<RobotState> {
    check_dt(dt)?;
    state.validate()?;
    if !action.is_finite() {
        return Err(Error::InvalidState(format!("non-finite action {action:?}")));
    }
    let displacement = (dt * action.linear_velocity) * Vec2::from_angle(state.heading);
    Ok(RobotState {
        position: state.position + displacement,
        heading: wrap_angle(state.heading + dt * action.angular_velocity),
        speed: action.linear_velocity,
    })
}

/// Forward-Euler integrator step for a holonomic agent.
pub fn integrator_step(state: &HumanState, velocity: Vec2, dt: f64) -> Result<HumanState> {
    check_dt(dt)?;
    HumanState::new(state.position, state.velocity)?;
    if !velocity.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite velocity {velocity:?}"
        )));
    }
    HumanState::new(state.position + dt * velocity, velocity)
}
