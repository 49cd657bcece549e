//! Flat TOML experiment configuration.
//!
//! Every key is top-level and scalar (or a short array), so configs diff
//! cleanly. Unknown keys are rejected by name. Absent keys take the
//! defaults below; env-shape keys (`dt`, `friction`, ...) override the
//! environment's own defaults only when present.

use serde::{Deserialize, Serialize};

use crate::ambiguity::{AlphaBracket, AmbiguitySpec};
use crate::envs::{Env, Obstacle, PendulumSpec, PerturbationSpec, PointMassSpec};
use crate::error::{CoreError, Result};
use crate::policy::{HorizonSettings, SelectMode, StepSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass,
    Pendulum,
}

/// Scalar applied to every dimension, or an explicit per-dimension array.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl ScalarOrVec {
    pub fn resolve(&self, dim: usize, name: &'static str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(s) => Ok(vec![*s; dim]),
            ScalarOrVec::PerDim(v) if v.len() == dim => Ok(v.clone()),
            ScalarOrVec::PerDim(v) => {
                let _ = name;
                Err(CoreError::DimensionMismatch {
                    context: "process_noise",
                    expected: dim,
                    got: v.len(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub episodes: usize,
    pub max_steps: usize,
    pub horizon: usize,
    /// explicit seed list wins over (n_seeds, base_seed)
    pub seeds: Vec<u64>,
    pub n_seeds: usize,
    pub base_seed: u64,

    // robustness
    pub rho: f64,
    pub pmax_epsilon: f64,
    pub sigma_cost: f64,
    pub delta_cost: f64,
    pub mc_samples: usize,
    pub alpha_bracket: [f64; 2],

    // policy
    pub n_candidates: usize,
    pub select_mode: SelectMode,
    pub action_box: Option<Vec<[f64; 2]>>,
    pub branch_actions: usize,
    pub branch_samples: usize,

    // goal encoding
    pub goal_sigma: f64,
    pub goal_speed_gain: f64,
    pub goal_speed_cap: f64,
    pub cost_shaping_weight: f64,
    /// seconds of velocity projection when pricing sampled next states
    /// (None = one env timestep)
    pub cost_lookahead: Option<f64>,

    // models
    pub rbf_count: usize,
    /// multiplier on the env's per-dim feature lengthscales (None = 1)
    pub bandwidth: Option<f64>,
    pub var_floor: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps_per_episode: usize,
    pub buffer_capacity: usize,

    // success metrics
    pub success_distance: f64,
    pub collision_distance: f64,
    pub n_eval_rollouts: usize,

    // environment overrides (None keeps the env default)
    pub dt: Option<f64>,
    pub friction: Option<f64>,
    pub u_max: Option<f64>,
    pub process_noise: Option<ScalarOrVec>,
    pub start: Option<Vec<f64>>,
    pub start_spread: Option<f64>,
    pub goal: Option<Vec<f64>>,
    pub obstacle_center: Option<Vec<f64>>,
    pub obstacle_radius: Option<f64>,
    pub obstacle_margin: Option<f64>,
    pub obstacle_weight: Option<f64>,
    pub gravity: Option<f64>,
    pub damping: Option<f64>,
    pub mass: Option<f64>,
    pub length: Option<f64>,

    // evaluation-time perturbation
    pub eval_friction_factor: f64,
    pub eval_drift: f64,
    pub eval_reward_noise_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::PointMass,
            episodes: 30,
            max_steps: 1000,
            horizon: 1,
            seeds: Vec::new(),
            n_seeds: 1,
            base_seed: 0,
            rho: 1.0,
            pmax_epsilon: 0.5,
            sigma_cost: 1.0,
            delta_cost: 0.0,
            mc_samples: 256,
            alpha_bracket: [1e-3, 1e3],
            n_candidates: 64,
            select_mode: SelectMode::Sample,
            action_box: None,
            branch_actions: 8,
            branch_samples: 8,
            goal_sigma: 0.1,
            goal_speed_gain: 1.0,
            goal_speed_cap: 1.0,
            cost_shaping_weight: 1.0,
            cost_lookahead: None,
            rbf_count: 64,
            bandwidth: None,
            var_floor: 1e-8,
            lr: 1e-2,
            batch_size: 128,
            train_steps_per_episode: 50,
            buffer_capacity: 100_000,
            success_distance: 0.05,
            collision_distance: 0.07,
            n_eval_rollouts: 20,
            dt: None,
            friction: None,
            u_max: None,
            process_noise: None,
            start: None,
            start_spread: None,
            goal: None,
            obstacle_center: None,
            obstacle_radius: None,
            obstacle_margin: None,
            obstacle_weight: None,
            gravity: None,
            damping: None,
            mass: None,
            length: None,
            eval_friction_factor: 1.0,
            eval_drift: 0.0,
            eval_reward_noise_sigma: 0.0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(cfg_err("episodes must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(cfg_err("horizon must be >= 1"));
        }
        if self.max_steps == 0 {
            return Err(cfg_err("max_steps must be >= 1"));
        }
        if self.resolved_seeds().is_empty() {
            return Err(cfg_err("no seeds: set `seeds` or n_seeds >= 1"));
        }
        if self.n_candidates == 0 {
            return Err(cfg_err("n_candidates must be >= 1"));
        }
        if self.mc_samples == 0 {
            return Err(cfg_err("mc_samples must be >= 1"));
        }
        if !(self.alpha_bracket[0] > 0.0 && self.alpha_bracket[1] > self.alpha_bracket[0]) {
            return Err(cfg_err("alpha_bracket must satisfy 0 < lo < hi"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(cfg_err("batch_size and buffer_capacity must be >= 1"));
        }
        if !(self.goal_sigma > 0.0) {
            return Err(cfg_err("goal_sigma must be > 0"));
        }
        if let Some(l) = self.cost_lookahead {
            if !(l > 0.0) {
                return Err(cfg_err("cost_lookahead must be > 0 seconds"));
            }
        }
        if self.rbf_count == 0 {
            return Err(cfg_err("rbf_count must be >= 1"));
        }
        self.ambiguity_template().validate()?;
        self.eval_perturbation().validate()?;
        if let Some(b) = &self.action_box {
            if b.is_empty() || b.iter().any(|p| !(p[1] > p[0])) {
                return Err(cfg_err("action_box entries must satisfy min < max"));
            }
        }
        Ok(())
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            self.seeds.clone()
        } else {
            (0..self.n_seeds as u64).map(|i| self.base_seed + i).collect()
        }
    }

    pub fn eval_perturbation(&self) -> PerturbationSpec {
        PerturbationSpec {
            friction_factor: self.eval_friction_factor,
            drift: self.eval_drift,
            reward_noise_sigma: self.eval_reward_noise_sigma,
        }
    }

    /// Radius template; η_dyn is filled per candidate by the policy.
    pub fn ambiguity_template(&self) -> AmbiguitySpec {
        AmbiguitySpec {
            eta_dyn: 0.0,
            delta_cost: self.delta_cost,
            sigma_cost: self.sigma_cost,
            rho: self.rho,
        }
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            epsilon: self.pmax_epsilon,
            ambiguity: self.ambiguity_template(),
            mc_count: self.mc_samples,
            bracket: AlphaBracket {
                lo: self.alpha_bracket[0],
                hi: self.alpha_bracket[1],
            },
            n_candidates: self.n_candidates,
            select_mode: self.select_mode,
        }
    }

    pub fn horizon_settings(&self) -> HorizonSettings {
        HorizonSettings {
            horizon: self.horizon,
            branch_actions: self.branch_actions,
            branch_samples: self.branch_samples,
        }
    }

    /// Build the simulator with overrides applied.
    pub fn build_env(&self, perturb: PerturbationSpec) -> Result<Env> {
        match self.env {
            EnvKind::PointMass => {
                let mut spec = PointMassSpec::default();
                if let Some(v) = self.dt {
                    spec.dt = v;
                }
                if let Some(v) = self.friction {
                    spec.friction = v;
                }
                if let Some(v) = self.u_max {
                    spec.u_max = v;
                }
                if let Some(v) = &self.process_noise {
                    let n = v.resolve(4, "process_noise")?;
                    spec.process_noise = [n[0], n[1], n[2], n[3]];
                }
                if let Some(v) = &self.start {
                    if v.len() != 4 {
                        return Err(cfg_err("point_mass start needs 4 entries"));
                    }
                    spec.start = [v[0], v[1], v[2], v[3]];
                }
                if let Some(v) = self.start_spread {
                    spec.start_spread = v;
                }
                if let Some(v) = &self.goal {
                    if v.len() != 2 {
                        return Err(cfg_err("point_mass goal needs 2 entries"));
                    }
                    spec.goal = [v[0], v[1]];
                }
                if let Some(v) = &self.obstacle_center {
                    if v.len() != 2 {
                        return Err(cfg_err("obstacle_center needs 2 entries"));
                    }
                    spec.obstacles = vec![Obstacle {
                        center: [v[0], v[1]],
                        radius: self.obstacle_radius.unwrap_or(0.05),
                    }];
                } else if let Some(r) = self.obstacle_radius {
                    for o in &mut spec.obstacles {
                        o.radius = r;
                    }
                }
                if let Some(v) = self.obstacle_margin {
                    spec.obstacle_margin = v;
                }
                if let Some(v) = self.obstacle_weight {
                    spec.obstacle_weight = v;
                }
                Env::point_mass(spec, perturb)
            }
            EnvKind::Pendulum => {
                let mut spec = PendulumSpec::default();
                if let Some(v) = self.dt {
                    spec.dt = v;
                }
                if let Some(v) = self.u_max {
                    spec.u_max = v;
                }
                if let Some(v) = self.gravity {
                    spec.gravity = v;
                }
                if let Some(v) = self.damping {
                    spec.damping = v;
                }
                if let Some(v) = self.mass {
                    spec.mass = v;
                }
                if let Some(v) = self.length {
                    spec.length = v;
                }
                if let Some(v) = &self.process_noise {
                    let n = v.resolve(2, "process_noise")?;
                    spec.process_noise = [n[0], n[1]];
                }
                if let Some(v) = &self.start {
                    if v.len() != 2 {
                        return Err(cfg_err("pendulum start needs 2 entries"));
                    }
                    spec.start = [v[0], v[1]];
                }
                if let Some(v) = self.start_spread {
                    spec.start_spread = v;
                }
                Env::pendulum(spec, perturb)
            }
        }
    }

    /// Candidate/action box: explicit config override, else the env's.
    pub fn resolve_action_box(&self, env: &Env) -> Result<Vec<[f64; 2]>> {
        match &self.action_box {
            Some(b) => {
                if b.len() != env.action_dim() {
                    return Err(CoreError::DimensionMismatch {
                        context: "action_box",
                        expected: env.action_dim(),
                        got: b.len(),
                    });
                }
                Ok(b.clone())
            }
            None => Ok(env.action_box()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.episodes, 30);
        assert_eq!(cfg.n_candidates, 64);
        assert_eq!(cfg.resolved_seeds(), vec![0]);
        assert!((cfg.rho - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_toml_str("frobnicate = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frobnicate"), "got: {msg}");
    }

    #[test]
    fn explicit_seed_list_wins() {
        let cfg = RunConfig::from_toml_str("seeds = [5, 9]\nn_seeds = 7\n").unwrap();
        assert_eq!(cfg.resolved_seeds(), vec![5, 9]);
    }

    #[test]
    fn scalar_process_noise_broadcasts() {
        let cfg = RunConfig::from_toml_str("process_noise = 0.02\n").unwrap();
        let env = cfg.build_env(PerturbationSpec::default()).unwrap();
        match env {
            Env::PointMass { spec, .. } => assert_eq!(spec.process_noise, [0.02; 4]),
            _ => panic!("wrong env"),
        }
    }

    #[test]
    fn per_dim_process_noise_must_match_dims() {
        let cfg = RunConfig::from_toml_str("process_noise = [0.1, 0.2]\n").unwrap();
        assert!(cfg.build_env(PerturbationSpec::default()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("episodes = 0\n").is_err());
        assert!(RunConfig::from_toml_str("alpha_bracket = [1.0, 0.5]\n").is_err());
        assert!(RunConfig::from_toml_str("rho = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("select_mode = \"best\"\n").is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::from_toml_str("env = \"pendulum\"\nrho = 2.5\nseeds = [3]\n").unwrap();
        let s = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.env, EnvKind::Pendulum);
        assert!((back.rho - 2.5).abs() < 1e-15);
        assert_eq!(back.resolved_seeds(), vec![3]);
    }

    #[test]
    fn eval_perturbation_keys_map_through() {
        let cfg = RunConfig::from_toml_str(
            "eval_friction_factor = 0.8\neval_drift = 0.05\n",
        )
        .unwrap();
        let p = cfg.eval_perturbation();
        assert!((p.friction_factor - 0.8).abs() < 1e-15);
        assert!((p.drift - 0.05).abs() < 1e-15);
        assert!(!p.is_identity());
    }
}
