//! Gibbs-form robust action selection.
//!
//! Each decision step draws a fresh batch of uniform candidate actions,
//! prices every candidate (goal-divergence term η plus robust stage value
//! c̃ against the maximally diffusive kernel), and samples from
//!
//! ```text
//! π(u_i) ∝ exp(prior_lw_i − action_cost_i − η_i − c̃_i)
//! ```
//!
//! The greedy controller leaves prior and action cost at zero, so the
//! exponent reduces to −η − c̃. Candidate evaluations are independent and
//! run through [`crate::exec::map_range`], with per-candidate Monte Carlo
//! seeds derived up front so the parallel and sequential lanes agree
//! bit-for-bit.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{
    cost_of_ambiguity_for, AlphaBracket, AmbiguityCost, AmbiguitySpec, McSettings,
};
use crate::error::{CoreError, Result};
use crate::exec;
use crate::gaussian::{kl_gaussian, GaussianKernel};
use crate::models::NominalModel;
use crate::pmax::build_pmax;
use crate::rng::{chacha, derive, derive2, TAG_CANDIDATES, TAG_HORIZON, TAG_MC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Sample,
    Argmax,
}

/// A priced candidate batch. probs[i] ∝ exp(logits[i]).
#[derive(Debug, Clone)]
pub struct ActionCandidateSet {
    pub actions: Vec<DVector<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Stable softmax; rejects empty or non-finite input.
pub fn gibbs_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(CoreError::Empty { what: "logits" });
    }
    let mut m = f64::NEG_INFINITY;
    for &l in logits {
        if !l.is_finite() {
            return Err(CoreError::NonFinite { context: "logits" });
        }
        m = m.max(l);
    }
    let w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.iter().map(|&x| x / s).collect())
}

pub fn gibbs_policy(
    actions: Vec<DVector<f64>>,
    etas: &[f64],
    c_tildes: &[f64],
    action_costs: &[f64],
    prior_logweights: &[f64],
) -> Result<ActionCandidateSet> {
    let n = actions.len();
    if n == 0 {
        return Err(CoreError::Empty { what: "candidates" });
    }
    if etas.len() != n || c_tildes.len() != n || action_costs.len() != n || prior_logweights.len() != n
    {
        return Err(CoreError::DimensionMismatch {
            context: "gibbs_policy",
            expected: n,
            got: etas.len(),
        });
    }
    let logits: Vec<f64> = (0..n)
        .map(|i| prior_logweights[i] - action_costs[i] - etas[i] - c_tildes[i])
        .collect();
    let probs = gibbs_weights(&logits)?;
    Ok(ActionCandidateSet {
        actions,
        logits,
        probs,
    })
}

/// Pick a candidate index: Gibbs sampling, or argmax over logits with ties
/// going to the lowest index.
pub fn select(set: &ActionCandidateSet, mode: SelectMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        SelectMode::Argmax => {
            let mut best = 0;
            for i in 1..set.logits.len() {
                if set.logits[i] > set.logits[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for (i, &p) in set.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            set.probs.len() - 1
        }
    }
}

/// Per-step knobs shared by every candidate. `ambiguity.eta_dyn` is a
/// template slot; it is overwritten per candidate with the goal divergence.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub epsilon: f64,
    pub ambiguity: AmbiguitySpec,
    pub mc_count: usize,
    pub bracket: AlphaBracket,
    pub n_candidates: usize,
    pub select_mode: SelectMode,
}

/// Everything a candidate evaluation reads. `cost_to_go` prices a sampled
/// next state; `action_cost` and `prior_logweight` are the optional Eq.-5
/// extras (both zero on the greedy path).
pub struct EvalContext<'a> {
    pub model: &'a NominalModel,
    pub goal: &'a GaussianKernel,
    pub cost_to_go: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync),
    pub action_cost: Option<&'a (dyn Fn(&DVector<f64>) -> f64 + Sync)>,
    pub prior_logweight: Option<&'a (dyn Fn(&DVector<f64>) -> f64 + Sync)>,
}

#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub action: DVector<f64>,
    /// unscaled goal divergence KL(goal ‖ p̄)
    pub eta_dyn: f64,
    /// logit contribution ϱ·η_dyn
    pub eta: f64,
    pub ambiguity: AmbiguityCost,
    pub action_cost: f64,
    pub prior_logweight: f64,
}

pub struct StepDiagnostics {
    pub set: ActionCandidateSet,
    pub outcomes: Vec<CandidateOutcome>,
    pub chosen: usize,
    pub dropped: usize,
}

impl StepDiagnostics {
    pub fn mean_eta(&self) -> f64 {
        self.outcomes.iter().map(|o| o.eta).sum::<f64>() / self.outcomes.len() as f64
    }

    pub fn mean_c_tilde(&self) -> f64 {
        self.outcomes.iter().map(|o| o.ambiguity.c_tilde).sum::<f64>()
            / self.outcomes.len() as f64
    }

    pub fn any_bracket_edge(&self) -> bool {
        self.outcomes.iter().any(|o| o.ambiguity.at_bracket_edge)
    }
}

/// Draw the candidate batch for one step: uniform over the action box,
/// candidate-major then dimension-minor draw order.
pub fn draw_candidates(
    n: usize,
    action_box: &[[f64; 2]],
    step_seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(CoreError::Empty { what: "candidates" });
    }
    if action_box.is_empty() {
        return Err(CoreError::Empty { what: "action box" });
    }
    let mut rng = chacha(derive(step_seed, TAG_CANDIDATES));
    let d = action_box.len();
    Ok((0..n)
        .map(|_| DVector::from_fn(d, |j, _| rng.random_range(action_box[j][0]..action_box[j][1])))
        .collect())
}

/// Price a fixed candidate batch. A candidate whose evaluation fails is
/// dropped; an all-failed batch surfaces the first error.
pub fn evaluate_candidates(
    x: &DVector<f64>,
    actions: Vec<DVector<f64>>,
    ctx: &EvalContext<'_>,
    settings: &StepSettings,
    step_seed: u64,
) -> Result<(ActionCandidateSet, Vec<CandidateOutcome>, usize)> {
    if actions.is_empty() {
        return Err(CoreError::Empty { what: "candidates" });
    }
    settings.ambiguity.validate()?;
    let n = actions.len();
    let results: Vec<Result<CandidateOutcome>> = exec::map_range(n, |i| {
        let u = &actions[i];
        let nominal = ctx.model.predict_kernel(x, u)?;
        let eta_dyn = kl_gaussian(ctx.goal, &nominal)?;
        let generative = build_pmax(&nominal, settings.epsilon)?;
        let spec = AmbiguitySpec {
            eta_dyn,
            ..settings.ambiguity
        };
        let mc = McSettings {
            count: settings.mc_count,
            seed: derive2(step_seed, TAG_MC, i as u64),
        };
        let ambiguity = cost_of_ambiguity_for(
            &spec,
            &nominal,
            &generative.kernel,
            ctx.cost_to_go,
            mc,
            settings.bracket,
        )?;
        let action_cost = ctx.action_cost.map_or(0.0, |f| f(u));
        let prior_logweight = ctx.prior_logweight.map_or(0.0, |f| f(u));
        Ok(CandidateOutcome {
            action: u.clone(),
            eta_dyn,
            eta: settings.ambiguity.rho * eta_dyn,
            ambiguity,
            action_cost,
            prior_logweight,
        })
    });
    let mut outcomes = Vec::with_capacity(n);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if outcomes.is_empty() {
        return Err(first_err.expect("empty batch handled above"));
    }
    let dropped = n - outcomes.len();
    let set = gibbs_policy(
        outcomes.iter().map(|o| o.action.clone()).collect(),
        &outcomes.iter().map(|o| o.eta).collect::<Vec<_>>(),
        &outcomes.iter().map(|o| o.ambiguity.c_tilde).collect::<Vec<_>>(),
        &outcomes.iter().map(|o| o.action_cost).collect::<Vec<_>>(),
        &outcomes.iter().map(|o| o.prior_logweight).collect::<Vec<_>>(),
    )?;
    Ok((set, outcomes, dropped))
}

/// One greedy decision: draw candidates, price them, select.
/// `select_rng` advances by at most one draw (sampling mode only).
pub fn greedy_step(
    x: &DVector<f64>,
    action_box: &[[f64; 2]],
    ctx: &EvalContext<'_>,
    settings: &StepSettings,
    step_seed: u64,
    select_rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, StepDiagnostics)> {
    let actions = draw_candidates(settings.n_candidates, action_box, step_seed)?;
    let (set, outcomes, dropped) = evaluate_candidates(x, actions, ctx, settings, step_seed)?;
    let chosen = select(&set, settings.select_mode, select_rng);
    let action = set.actions[chosen].clone();
    Ok((
        action,
        StepDiagnostics {
            set,
            outcomes,
            chosen,
            dropped,
        },
    ))
}

/// Multi-step lookahead settings for the scenario-tree recursion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HorizonSettings {
    /// total decision horizon N; depth N means N−1 recursive expansions
    pub horizon: usize,
    pub branch_actions: usize,
    pub branch_samples: usize,
}

impl Default for HorizonSettings {
    fn default() -> Self {
        Self {
            horizon: 1,
            branch_actions: 8,
            branch_samples: 8,
        }
    }
}

/// Soft (free-energy) cost-to-go by backward induction over a sampled
/// scenario tree:
///
/// ```text
/// V_0(x) = c̄(x)
/// V_d(x) = c̄(x) − ln (1/A) Σ_a exp(−mean_s V_{d−1}(x'_{a,s}))
/// ```
///
/// Depth 0 evaluates `base_cost` directly and consumes no randomness, so a
/// horizon-1 controller is bit-identical with lookahead disabled.
pub fn soft_cost_to_go(
    x: &DVector<f64>,
    depth: usize,
    model: &NominalModel,
    base_cost: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    action_box: &[[f64; 2]],
    hs: &HorizonSettings,
    seed: u64,
) -> Result<f64> {
    let base = base_cost(x);
    if depth == 0 {
        return Ok(base);
    }
    if hs.branch_actions == 0 || hs.branch_samples == 0 {
        return Err(CoreError::Empty { what: "scenario tree" });
    }
    let mut rng = chacha(derive(seed, TAG_HORIZON));
    let d = action_box.len();
    let mut q = Vec::with_capacity(hs.branch_actions);
    for a in 0..hs.branch_actions {
        let u = DVector::from_fn(d, |j, _| rng.random_range(action_box[j][0]..action_box[j][1]));
        let kernel = model.predict_kernel(x, &u)?;
        let samples = kernel.sample(
            hs.branch_samples,
            derive2(seed, TAG_HORIZON, a as u64 + 1),
        );
        let mut acc = 0.0;
        for (s, xn) in samples.iter().enumerate() {
            let child = derive2(derive2(seed, TAG_HORIZON, a as u64 + 1), 0x9e, s as u64);
            acc += soft_cost_to_go(xn, depth - 1, model, base_cost, action_box, hs, child)?;
        }
        q.push(acc / hs.branch_samples as f64);
    }
    let m = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let lse: f64 = q.iter().map(|&v| (-(v - m)).exp()).sum::<f64>() / hs.branch_actions as f64;
    let soft = m - lse.ln();
    if !soft.is_finite() {
        return Err(CoreError::NonFinite {
            context: "soft cost-to-go",
        });
    }
    Ok(base + soft)
}
