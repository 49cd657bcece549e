//! Episode orchestration: warm-up collection, greedy robust control,
//! between-episode model updates, and frozen-model evaluation.
//!
//! Per-seed runs are fully deterministic: every random stream is derived
//! from the seed plus a frozen role tag, so reruns reproduce records
//! byte for byte and independent seeds can execute in parallel.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::envs::{Env, PerturbationSpec};
use crate::error::{CoreError, Result};
use crate::exec;
use crate::gaussian::GaussianKernel;
use crate::models::{CostModel, NominalModel};
use crate::policy::{greedy_step, soft_cost_to_go, EvalContext, StepSettings};
use crate::replay::{Provenance, ReplayBuffer, Transition};
use crate::rng::{
    chacha, derive, derive2, derive3, TAG_ENV, TAG_EVAL, TAG_FEATURES_COST, TAG_FEATURES_DYN,
    TAG_MINIBATCH, TAG_ROLLOUT, TAG_SELECT, TAG_STEP, TAG_WARMUP,
};

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub dynamics: NominalModel,
    pub cost: CostModel,
}

/// One training episode's metrics. `ret` is −(sum of stage costs); output
/// headers state this sign convention.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub total_cost: f64,
    pub min_distance: f64,
    pub success: bool,
    pub steps: usize,
    pub mean_c_tilde: f64,
    pub mean_eta: f64,
    pub holdout_nll: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub episode: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    /// set when an episode aborted; training stops at that episode
    pub failure: Option<FailureRecord>,
    pub models: TrainedModels,
    pub buffer: ReplayBuffer,
    pub greedy_steps: u64,
    /// inner dual solves, counting dropped candidates
    pub candidate_solves: u64,
    pub env_steps: u64,
}

/// One frozen-model evaluation rollout. `success` means the goal threshold
/// was reached; `collision_free` is the separate safety metric (clearance
/// from every obstacle center stayed at or above the configured threshold).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub rollout: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub total_cost: f64,
    pub min_distance: f64,
    pub goal_reached: bool,
    pub collision_free: bool,
    pub success: bool,
    pub steps: usize,
    pub mean_c_tilde: f64,
    pub mean_eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: Vec<RolloutRecord>,
    pub success_rate: f64,
    /// fraction that reached the goal AND kept obstacle clearance throughout
    pub safe_success_rate: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
}

/// Goal kernel for the divergence term η: a one-step reachable target, not
/// the literal goal state. The velocity block is a capped proportional
/// approach field v* pointing at the goal (v* → 0 at the goal, recovering
/// the goal state there); the position block advances the current position
/// one dt under v*. Putting the absolute goal position into a one-step
/// kernel instead makes η's candidate-dependence degenerate (the explicit
/// Euler position update ignores the action) while the huge mismatch, scaled
/// by the nominal's tiny position precision, drowns the velocity signal and
/// inflates the dual radius past any useful ball. Covariance goal_sigma·I.
pub fn goal_kernel(env: &Env, x: &DVector<f64>, cfg: &RunConfig) -> Result<GaussianKernel> {
    let mut mean = env.goal_state();
    let dt = env.dt();
    match env {
        Env::PointMass { .. } => {
            let dx = mean[0] - x[0];
            let dy = mean[1] - x[1];
            let dist = (dx * dx + dy * dy).sqrt();
            let (mut vx, mut vy) = (0.0, 0.0);
            if dist > 1e-12 {
                let speed = (cfg.goal_speed_gain * dist).min(cfg.goal_speed_cap);
                vx = speed * dx / dist;
                vy = speed * dy / dist;
            }
            mean[0] = x[0] + dt * vx;
            mean[1] = x[1] + dt * vy;
            mean[2] = vx;
            mean[3] = vy;
        }
        Env::Pendulum { .. } => {
            let th = crate::envs::wrap_angle(x[0]);
            let mut w = 0.0;
            if th.abs() > 1e-12 {
                let speed = (cfg.goal_speed_gain * th.abs()).min(cfg.goal_speed_cap);
                w = -th.signum() * speed;
            }
            mean[0] = crate::envs::wrap_angle(th + dt * w);
            mean[1] = w;
        }
    }
    GaussianKernel::isotropic(mean, cfg.goal_sigma)
}

struct EpisodeScratch {
    total_cost: f64,
    min_distance: f64,
    goal_reached: bool,
    collision_free: bool,
    steps: usize,
    c_tildes: Vec<f64>,
    etas: Vec<f64>,
    solves: u64,
    dropped: u64,
}

enum ActionMode<'r> {
    /// uniform actions, model never consulted
    Warmup(&'r mut ChaCha8Rng),
    /// robust greedy decisions; step seeds come from the closure
    Greedy {
        step_seed: &'r dyn Fn(usize) -> u64,
        select_rng: &'r mut ChaCha8Rng,
    },
}

#[allow(clippy::too_many_arguments)]
fn episode(
    env: &Env,
    cfg: &RunConfig,
    settings: &StepSettings,
    action_box: &[[f64; 2]],
    models: &TrainedModels,
    mut mode: ActionMode<'_>,
    env_rng: &mut ChaCha8Rng,
    mut sink: Option<(&mut ReplayBuffer, Provenance)>,
    mut trace: Option<&mut Vec<DVector<f64>>>,
) -> Result<EpisodeScratch> {
    let mut x = env.reset(env_rng);
    if let Some(t) = trace.as_mut() {
        t.push(x.clone());
    }
    let mut s = EpisodeScratch {
        total_cost: 0.0,
        min_distance: env.goal_distance(&x),
        goal_reached: false,
        collision_free: env.min_obstacle_center_distance(&x) >= cfg.collision_distance,
        steps: 0,
        c_tildes: Vec::new(),
        etas: Vec::new(),
        solves: 0,
        dropped: 0,
    };
    let zero_u = DVector::zeros(env.action_dim());
    let shaping = cfg.cost_shaping_weight;
    let lookahead = cfg.cost_lookahead.unwrap_or_else(|| env.dt());
    let hs = cfg.horizon_settings();
    for step in 0..cfg.max_steps {
        let u = match &mut mode {
            ActionMode::Warmup(rng) => DVector::from_fn(action_box.len(), |j, _| {
                rng.random_range(action_box[j][0]..action_box[j][1])
            }),
            ActionMode::Greedy {
                step_seed,
                select_rng,
            } => {
                let seed = step_seed(step);
                let goal = goal_kernel(env, &x, cfg)?;
                let base = |xn: &DVector<f64>| -> f64 {
                    // Price the sampled state where its velocity carries it;
                    // at the raw next state position is action-independent.
                    let xp = env.project(xn, lookahead);
                    let d = env.goal_distance(&xp);
                    models.cost.predict_mean(&xp, &zero_u) + shaping * d * d
                };
                let ctg: Box<dyn Fn(&DVector<f64>) -> f64 + Sync + '_> = if cfg.horizon <= 1 {
                    Box::new(base)
                } else {
                    Box::new(move |xn: &DVector<f64>| {
                        soft_cost_to_go(
                            xn,
                            cfg.horizon - 1,
                            &models.dynamics,
                            &base,
                            action_box,
                            &hs,
                            seed,
                        )
                        .unwrap_or(f64::NAN)
                    })
                };
                let ctx = EvalContext {
                    model: &models.dynamics,
                    goal: &goal,
                    cost_to_go: &*ctg,
                    action_cost: None,
                    prior_logweight: None,
                };
                let (a, diag) = greedy_step(&x, action_box, &ctx, settings, seed, select_rng)?;
                s.c_tildes.push(diag.mean_c_tilde());
                s.etas.push(diag.mean_eta());
                s.solves += (diag.outcomes.len() + diag.dropped) as u64;
                s.dropped += diag.dropped as u64;
                a
            }
        };
        let out = env.step(&x, &u, env_rng)?;
        if let Some((buf, prov)) = sink.as_mut() {
            buf.push(
                Transition {
                    x: x.clone(),
                    u: u.clone(),
                    x_next: out.next.clone(),
                    cost: out.cost,
                },
                *prov,
            );
        }
        if let Some(t) = trace.as_mut() {
            t.push(out.next.clone());
        }
        s.total_cost += out.cost;
        s.steps = step + 1;
        let d = env.goal_distance(&out.next);
        s.min_distance = s.min_distance.min(d);
        if env.min_obstacle_center_distance(&out.next) < cfg.collision_distance {
            s.collision_free = false;
        }
        x = out.next;
        if d < cfg.success_distance {
            s.goal_reached = true;
            break;
        }
    }
    Ok(s)
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn gather(
    buffer: &ReplayBuffer,
    idx: &[usize],
) -> (Vec<(DVector<f64>, DVector<f64>)>, Vec<DVector<f64>>, Vec<f64>) {
    let mut pairs = Vec::with_capacity(idx.len());
    let mut nexts = Vec::with_capacity(idx.len());
    let mut costs = Vec::with_capacity(idx.len());
    for &i in idx {
        let t = buffer.get(i);
        pairs.push((t.x.clone(), t.u.clone()));
        nexts.push(t.x_next.clone());
        costs.push(t.cost);
    }
    (pairs, nexts, costs)
}

/// Train one seed: episode 0 collects uniform warm-up data, later episodes
/// run the robust greedy controller; both models take minibatch gradient
/// steps between episodes. An episode error ends this seed's run with a
/// failure record; completed episodes are kept.
pub fn run_training_seed(cfg: &RunConfig, seed: u64) -> Result<TrainOutput> {
    cfg.validate()?;
    let env = cfg.build_env(PerturbationSpec::default())?;
    let action_box = cfg.resolve_action_box(&env)?;
    let state_box = env.state_box();
    // config bandwidth multiplies the env's per-dim lengthscale profile
    let mult = cfg.bandwidth.unwrap_or(1.0);
    let scales: Vec<f64> = env.feature_scales().iter().map(|s| mult * s).collect();
    let mut models = TrainedModels {
        dynamics: NominalModel::new(
            derive(seed, TAG_FEATURES_DYN),
            &state_box,
            &action_box,
            cfg.rbf_count,
            &scales,
            cfg.var_floor,
        )?,
        cost: CostModel::new(
            derive(seed, TAG_FEATURES_COST),
            &state_box,
            &action_box,
            cfg.rbf_count,
            &scales,
            cfg.var_floor,
        )?,
    };
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let settings = cfg.step_settings();
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut failure = None;
    let mut greedy_steps = 0u64;
    let mut candidate_solves = 0u64;
    let mut env_steps = 0u64;
    for ep in 0..cfg.episodes {
        let mut env_rng = chacha(derive2(seed, TAG_ENV, ep as u64));
        let scratch = if ep == 0 {
            let mut wrng = chacha(derive(seed, TAG_WARMUP));
            episode(
                &env,
                cfg,
                &settings,
                &action_box,
                &models,
                ActionMode::Warmup(&mut wrng),
                &mut env_rng,
                Some((&mut buffer, Provenance::Training)),
                None,
            )
        } else {
            let mut select_rng = chacha(derive2(seed, TAG_SELECT, ep as u64));
            let step_seed = |s: usize| derive3(seed, TAG_STEP, ep as u64, s as u64);
            episode(
                &env,
                cfg,
                &settings,
                &action_box,
                &models,
                ActionMode::Greedy {
                    step_seed: &step_seed,
                    select_rng: &mut select_rng,
                },
                &mut env_rng,
                Some((&mut buffer, Provenance::Training)),
                None,
            )
        };
        let s = match scratch {
            Ok(s) => s,
            Err(e) => {
                failure = Some(FailureRecord {
                    episode: ep,
                    message: e.to_string(),
                });
                break;
            }
        };
        env_steps += s.steps as u64;
        if ep > 0 {
            greedy_steps += s.steps as u64;
        }
        candidate_solves += s.solves;

        let updated = (|| -> Result<Option<f64>> {
            let mut mb = chacha(derive2(seed, TAG_MINIBATCH, ep as u64));
            for _ in 0..cfg.train_steps_per_episode {
                let idx = buffer.sample_minibatch(cfg.batch_size, &mut mb);
                if idx.is_empty() {
                    break;
                }
                let (pairs, nexts, costs) = gather(&buffer, &idx);
                models.dynamics.train_step(&pairs, &nexts, cfg.lr)?;
                models.cost.train_step(&pairs, &costs, cfg.lr)?;
            }
            let hold = buffer.holdout_indices();
            if hold.is_empty() {
                Ok(None)
            } else {
                let (pairs, nexts, _) = gather(&buffer, &hold);
                Ok(Some(models.dynamics.nll(&pairs, &nexts)?))
            }
        })();
        let holdout_nll = match updated {
            Ok(h) => h,
            Err(e) => {
                failure = Some(FailureRecord {
                    episode: ep,
                    message: e.to_string(),
                });
                break;
            }
        };
        records.push(EpisodeRecord {
            episode: ep,
            ret: -s.total_cost,
            total_cost: s.total_cost,
            min_distance: s.min_distance,
            success: s.goal_reached,
            steps: s.steps,
            mean_c_tilde: mean_or_zero(&s.c_tildes),
            mean_eta: mean_or_zero(&s.etas),
            holdout_nll,
        });
    }
    Ok(TrainOutput {
        seed,
        records,
        failure,
        models,
        buffer,
        greedy_steps,
        candidate_solves,
        env_steps,
    })
}

/// All configured seeds, as independent workers.
pub fn run_training(cfg: &RunConfig) -> Result<Vec<TrainOutput>> {
    cfg.validate()?;
    let seeds = cfg.resolved_seeds();
    let outs = exec::map_range(seeds.len(), |i| run_training_seed(cfg, seeds[i]));
    outs.into_iter().collect()
}

/// Frozen-model rollouts on a (possibly perturbed) simulator. Transitions
/// are appended to `buffer` with evaluation provenance when one is given;
/// the minibatch sampler never returns them, so the models stay isolated
/// from perturbed data.
pub fn run_evaluation(
    cfg: &RunConfig,
    models: &TrainedModels,
    seed: u64,
    n_rollouts: usize,
    perturb: PerturbationSpec,
    buffer: Option<&mut ReplayBuffer>,
) -> Result<EvalSummary> {
    Ok(eval_inner(cfg, models, seed, n_rollouts, perturb, buffer, false)?.0)
}

/// As [`run_evaluation`], additionally returning every rollout's visited
/// states (start state included).
pub fn run_evaluation_traced(
    cfg: &RunConfig,
    models: &TrainedModels,
    seed: u64,
    n_rollouts: usize,
    perturb: PerturbationSpec,
) -> Result<(EvalSummary, Vec<Vec<DVector<f64>>>)> {
    eval_inner(cfg, models, seed, n_rollouts, perturb, None, true)
}

fn eval_inner(
    cfg: &RunConfig,
    models: &TrainedModels,
    seed: u64,
    n_rollouts: usize,
    perturb: PerturbationSpec,
    mut buffer: Option<&mut ReplayBuffer>,
    traced: bool,
) -> Result<(EvalSummary, Vec<Vec<DVector<f64>>>)> {
    if n_rollouts == 0 {
        return Err(CoreError::Empty { what: "rollouts" });
    }
    cfg.validate()?;
    let env = cfg.build_env(perturb)?;
    let action_box = cfg.resolve_action_box(&env)?;
    let settings = cfg.step_settings();
    let mut records = Vec::with_capacity(n_rollouts);
    let mut traces = Vec::new();
    for r in 0..n_rollouts {
        let mut env_rng = chacha(derive3(seed, TAG_EVAL, r as u64, 0));
        let mut select_rng = chacha(derive3(seed, TAG_EVAL, r as u64, 1));
        let step_seed = |s: usize| derive3(seed, TAG_ROLLOUT, r as u64, s as u64);
        let mut trace = Vec::new();
        let s = episode(
            &env,
            cfg,
            &settings,
            &action_box,
            models,
            ActionMode::Greedy {
                step_seed: &step_seed,
                select_rng: &mut select_rng,
            },
            &mut env_rng,
            buffer.as_deref_mut().map(|b| (b, Provenance::Evaluation)),
            traced.then_some(&mut trace),
        )?;
        if traced {
            traces.push(trace);
        }
        records.push(RolloutRecord {
            rollout: r,
            ret: -s.total_cost,
            total_cost: s.total_cost,
            min_distance: s.min_distance,
            goal_reached: s.goal_reached,
            collision_free: s.collision_free,
            success: s.goal_reached,
            steps: s.steps,
            mean_c_tilde: mean_or_zero(&s.c_tildes),
            mean_eta: mean_or_zero(&s.etas),
        });
    }
    let n = records.len() as f64;
    let success_rate = records.iter().filter(|r| r.success).count() as f64 / n;
    let safe_success_rate = records
        .iter()
        .filter(|r| r.goal_reached && r.collision_free)
        .count() as f64
        / n;
    let mean_cost = records.iter().map(|r| r.total_cost).sum::<f64>() / n;
    let std_cost = if records.len() < 2 {
        0.0
    } else {
        (records
            .iter()
            .map(|r| (r.total_cost - mean_cost).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    };
    Ok((
        EvalSummary {
            records,
            success_rate,
            safe_success_rate,
            mean_cost,
            std_cost,
        },
        traces,
    ))
}
