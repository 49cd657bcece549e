//! Simulation environments used as the ground-truth transition law.
//!
//! The learned models never see these equations; they only see sampled
//! transitions. Evaluation-time perturbations (friction scaling, velocity
//! drift, reward noise) apply here and only here.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{CoreError, Result};

/// Test-time model mismatch. The identity perturbation leaves the
/// dynamics and cost streams bit-identical to the unperturbed simulator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PerturbationSpec {
    /// multiplies the simulator's friction/damping term
    pub friction_factor: f64,
    /// constant bias added to every velocity derivative
    pub drift: f64,
    /// std of Gaussian noise added to observed costs
    pub reward_noise_sigma: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            friction_factor: 1.0,
            drift: 0.0,
            reward_noise_sigma: 0.0,
        }
    }
}

impl PerturbationSpec {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.friction_factor.is_finite() && self.friction_factor >= 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "friction_factor",
                value: self.friction_factor,
            });
        }
        if !self.drift.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "drift",
                value: self.drift,
            });
        }
        if !(self.reward_noise_sigma.is_finite() && self.reward_noise_sigma >= 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "reward_noise_sigma",
                value: self.reward_noise_sigma,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Planar double integrator with viscous friction and circular obstacles.
///
/// State is [px, py, vx, vy], action [ax, ay] clamped to ±u_max:
/// ```text
/// p' = p + dt v + w_p,   v' = friction·v + dt u + drift + w_v
/// ```
/// Stage cost is evaluated at the next state: squared goal distance plus a
/// squared hinge on obstacle clearance inside radius + margin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMassSpec {
    pub dt: f64,
    pub friction: f64,
    pub u_max: f64,
    pub start: [f64; 4],
    pub start_spread: f64,
    pub goal: [f64; 2],
    /// per-dimension process noise std, [pos, pos, vel, vel]
    pub process_noise: [f64; 4],
    pub obstacles: Vec<Obstacle>,
    pub obstacle_margin: f64,
    pub obstacle_weight: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        Self {
            dt: 0.05,
            friction: 0.92,
            u_max: 1.0,
            start: [-0.5, 0.0, 0.0, 0.0],
            start_spread: 0.02,
            goal: [0.5, 0.0],
            process_noise: [0.01, 0.01, 0.08, 0.08],
            obstacles: vec![Obstacle {
                center: [0.0, 0.04],
                radius: 0.05,
            }],
            obstacle_margin: 0.1,
            obstacle_weight: 60.0,
        }
    }
}

/// Pendulum with angle measured from upright (0 = upright, ±π = hanging).
/// Semi-implicit Euler keeps unforced, undamped energy drift bounded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumSpec {
    pub dt: f64,
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub u_max: f64,
    pub start: [f64; 2],
    pub start_spread: f64,
    pub process_noise: [f64; 2],
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            dt: 0.02,
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
            u_max: 4.0,
            start: [PI - 0.3, 0.0],
            start_spread: 0.05,
            process_noise: [0.0, 0.02],
        }
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    PointMass {
        spec: PointMassSpec,
        perturb: PerturbationSpec,
    },
    Pendulum {
        spec: PendulumSpec,
        perturb: PerturbationSpec,
    },
}

pub struct StepOutcome {
    pub next: DVector<f64>,
    pub cost: f64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Wrap into [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI);
    if r < 0.0 {
        r += 2.0 * PI;
    }
    r - PI
}

impl Env {
    pub fn point_mass(spec: PointMassSpec, perturb: PerturbationSpec) -> Result<Self> {
        perturb.validate()?;
        if !(spec.dt > 0.0) || !(spec.u_max > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "dt/u_max",
                value: spec.dt,
            });
        }
        Ok(Self::PointMass { spec, perturb })
    }

    pub fn pendulum(spec: PendulumSpec, perturb: PerturbationSpec) -> Result<Self> {
        perturb.validate()?;
        if !(spec.dt > 0.0) || !(spec.mass > 0.0) || !(spec.length > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "dt/mass/length",
                value: spec.dt,
            });
        }
        Ok(Self::Pendulum { spec, perturb })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::PointMass { .. } => 4,
            Env::Pendulum { .. } => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::PointMass { .. } => 2,
            Env::Pendulum { .. } => 1,
        }
    }

    /// Feature/candidate box over states.
    /// Box the agent actually operates in; feature centers are laid out
    /// inside it, so a loose box starves the models of local resolution.
    pub fn state_box(&self) -> Vec<[f64; 2]> {
        match self {
            Env::PointMass { .. } => vec![[-0.8, 0.8], [-0.8, 0.8], [-1.5, 1.5], [-1.5, 1.5]],
            Env::Pendulum { .. } => vec![[-PI, PI], [-8.0, 8.0]],
        }
    }

    /// Per-dimension RBF lengthscales for the stacked model input
    /// [state; action]. Position dims are fine: the stage cost carries
    /// obstacle-sized structure there. Velocity and action dims are smooth
    /// and only need coverage.
    pub fn feature_scales(&self) -> Vec<f64> {
        match self {
            Env::PointMass { spec, .. } => {
                let ua = 0.75 * spec.u_max;
                vec![0.15, 0.15, 1.0, 1.0, ua, ua]
            }
            Env::Pendulum { spec, .. } => vec![0.7, 2.5, 0.75 * spec.u_max],
        }
    }

    pub fn action_box(&self) -> Vec<[f64; 2]> {
        let m = match self {
            Env::PointMass { spec, .. } => spec.u_max,
            Env::Pendulum { spec, .. } => spec.u_max,
        };
        vec![[-m, m]; self.action_dim()]
    }

    /// Full-state goal; velocities at the goal are zero.
    pub fn goal_state(&self) -> DVector<f64> {
        match self {
            Env::PointMass { spec, .. } => {
                DVector::from_row_slice(&[spec.goal[0], spec.goal[1], 0.0, 0.0])
            }
            Env::Pendulum { .. } => DVector::zeros(2),
        }
    }

    pub fn reset(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let (start, spread): (&[f64], f64) = match self {
            Env::PointMass { spec, .. } => (&spec.start, spec.start_spread),
            Env::Pendulum { spec, .. } => (&spec.start, spec.start_spread),
        };
        DVector::from_fn(start.len(), |i, _| {
            start[i] + spread * rng.random_range(-1.0..1.0)
        })
    }

    /// Distance to the goal in task coordinates (position plane, or wrapped
    /// angle for the pendulum).
    pub fn goal_distance(&self, x: &DVector<f64>) -> f64 {
        match self {
            Env::PointMass { spec, .. } => {
                ((x[0] - spec.goal[0]).powi(2) + (x[1] - spec.goal[1]).powi(2)).sqrt()
            }
            Env::Pendulum { .. } => wrap_angle(x[0]).abs(),
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Env::PointMass { spec, .. } => spec.dt,
            Env::Pendulum { spec, .. } => spec.dt,
        }
    }

    /// State with the position block advanced `seconds` under the state's
    /// own velocity. The explicit-Euler position update lags the action by a
    /// step, so any position-dependent cost evaluated at the raw next state
    /// cannot tell candidate actions apart; evaluated at the projection it
    /// prices where each candidate's velocity is carrying the agent.
    pub fn project(&self, x: &DVector<f64>, seconds: f64) -> DVector<f64> {
        let mut p = x.clone();
        match self {
            Env::PointMass { .. } => {
                p[0] = x[0] + seconds * x[2];
                p[1] = x[1] + seconds * x[3];
            }
            Env::Pendulum { .. } => {
                p[0] = wrap_angle(x[0] + seconds * x[1]);
            }
        }
        p
    }

    /// Distance from the nearest obstacle center; infinity when obstacle-free.
    pub fn min_obstacle_center_distance(&self, x: &DVector<f64>) -> f64 {
        match self {
            Env::PointMass { spec, .. } => spec
                .obstacles
                .iter()
                .map(|o| ((x[0] - o.center[0]).powi(2) + (x[1] - o.center[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min),
            Env::Pendulum { .. } => f64::INFINITY,
        }
    }

    fn clamp_action(&self, u: &DVector<f64>) -> DVector<f64> {
        let m = match self {
            Env::PointMass { spec, .. } => spec.u_max,
            Env::Pendulum { spec, .. } => spec.u_max,
        };
        u.map(|v| v.clamp(-m, m))
    }

    /// Stage cost of being at `x`, before reward noise.
    pub fn clean_cost(&self, x: &DVector<f64>) -> f64 {
        match self {
            Env::PointMass { spec, .. } => {
                let d = self.goal_distance(x);
                let mut c = d * d;
                for o in &spec.obstacles {
                    let dc = ((x[0] - o.center[0]).powi(2) + (x[1] - o.center[1]).powi(2)).sqrt();
                    let pen = (o.radius + spec.obstacle_margin - dc).max(0.0);
                    c += spec.obstacle_weight * pen * pen;
                }
                c
            }
            Env::Pendulum { .. } => {
                let th = wrap_angle(x[0]);
                th * th + 0.1 * x[1] * x[1]
            }
        }
    }

    /// One transition. Noise draw order is fixed (state dims, then reward
    /// noise only if its sigma is positive) so the identity perturbation
    /// reproduces the unperturbed stream exactly.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if x.len() != self.state_dim() || u.len() != self.action_dim() {
            return Err(CoreError::DimensionMismatch {
                context: "env step",
                expected: self.state_dim() + self.action_dim(),
                got: x.len() + u.len(),
            });
        }
        let uc = self.clamp_action(u);
        let mut next = match self {
            Env::PointMass { spec, perturb } => {
                let fric = spec.friction * perturb.friction_factor;
                let mut n = DVector::zeros(4);
                n[0] = x[0] + spec.dt * x[2];
                n[1] = x[1] + spec.dt * x[3];
                n[2] = fric * x[2] + spec.dt * uc[0] + perturb.drift;
                n[3] = fric * x[3] + spec.dt * uc[1] + perturb.drift;
                for i in 0..4 {
                    n[i] += spec.process_noise[i] * gauss(rng);
                }
                n
            }
            Env::Pendulum { spec, perturb } => {
                let ml2 = spec.mass * spec.length * spec.length;
                let acc = (spec.gravity / spec.length) * x[0].sin()
                    - (spec.damping * perturb.friction_factor / ml2) * x[1]
                    + uc[0] / ml2;
                let mut w = x[1] + spec.dt * acc + perturb.drift;
                w += spec.process_noise[1] * gauss(rng);
                let mut th = x[0] + spec.dt * w;
                th += spec.process_noise[0] * gauss(rng);
                DVector::from_row_slice(&[th, w])
            }
        };
        for v in next.iter_mut() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { context: "env state" });
            }
        }
        let mut cost = self.clean_cost(&next);
        let sigma = match self {
            Env::PointMass { perturb, .. } | Env::Pendulum { perturb, .. } => {
                perturb.reward_noise_sigma
            }
        };
        if sigma > 0.0 {
            cost += sigma * gauss(rng);
        }
        Ok(StepOutcome { next, cost })
    }

    pub fn perturbation(&self) -> &PerturbationSpec {
        match self {
            Env::PointMass { perturb, .. } | Env::Pendulum { perturb, .. } => perturb,
        }
    }

    /// Same simulator with a different perturbation.
    pub fn with_perturbation(&self, perturb: PerturbationSpec) -> Result<Self> {
        match self {
            Env::PointMass { spec, .. } => Env::point_mass(spec.clone(), perturb),
            Env::Pendulum { spec, .. } => Env::pendulum(spec.clone(), perturb),
        }
    }
}
