//! Learned Gaussian regressors for dynamics and cost.
//!
//! Both models share one architecture: affine-plus-RBF features with fixed
//! random centers, a linear readout per output dimension, and a learned
//! state-independent diagonal log-variance. Training minimizes the exact
//! Gaussian negative log-likelihood by plain gradient descent with analytic
//! gradients:
//!
//! ```text
//! nll = (1/B) Σ_b Σ_d [ ln 2π + ln v_d + e_bd²/v_d ] / 2,   e = y - Wφ(z),
//! v_d = var_floor + exp(ℓ_d)
//! ∂nll/∂W_df = -(1/B) Σ_b e_bd φ_bf / v_d
//! ∂nll/∂ℓ_d  = (exp(ℓ_d)/2) (1/v_d - mean_b e_bd² / v_d²)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gaussian::GaussianKernel;
use crate::rng::chacha;

const LN_2PI: f64 = 1.8378770664093453;

/// Affine + RBF feature map over a box. Centers are drawn once at
/// construction and frozen; the map length is 1 + input_dim + rbf_count.
///
/// Each RBF uses per-dimension lengthscales: exp(-Σ_j ((z_j-c_j)/ℓ_j)² / 2).
/// One isotropic width cannot serve a mixed input; fine structure lives in
/// a low-dimensional slice (stage cost over position), while the remaining
/// dimensions only need coverage, and a single width either blurs the slice
/// or kills every activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub input_dim: usize,
    /// rbf_count x input_dim, row per center.
    centers: DMatrix<f64>,
    lengthscales: DVector<f64>,
}

impl FeatureMap {
    pub fn new(
        seed: u64,
        input_box: &[[f64; 2]],
        rbf_count: usize,
        lengthscales: &[f64],
    ) -> Result<Self> {
        let d = input_box.len();
        if d == 0 {
            return Err(CoreError::Empty { what: "input box" });
        }
        for b in input_box {
            if !(b[0].is_finite() && b[1] > b[0]) {
                return Err(CoreError::InvalidParameter {
                    name: "input_box",
                    value: b[0],
                });
            }
        }
        if lengthscales.len() != d {
            return Err(CoreError::DimensionMismatch {
                context: "feature lengthscales",
                expected: d,
                got: lengthscales.len(),
            });
        }
        for &l in lengthscales {
            if !(l > 0.0 && l.is_finite()) {
                return Err(CoreError::InvalidParameter {
                    name: "lengthscale",
                    value: l,
                });
            }
        }
        let mut rng = chacha(seed);
        let centers = DMatrix::from_fn(rbf_count, d, |_, j| {
            rng.random_range(input_box[j][0]..input_box[j][1])
        });
        Ok(Self {
            input_dim: d,
            centers,
            lengthscales: DVector::from_row_slice(lengthscales),
        })
    }

    /// Uniform fallback: ℓ_j = scale times the box side, every dimension.
    pub fn box_scaled(
        seed: u64,
        input_box: &[[f64; 2]],
        rbf_count: usize,
        scale: f64,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "scale",
                value: scale,
            });
        }
        let ls: Vec<f64> = input_box.iter().map(|b| scale * (b[1] - b[0])).collect();
        Self::new(seed, input_box, rbf_count, &ls)
    }

    pub fn len(&self) -> usize {
        1 + self.input_dim + self.centers.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rbf_count(&self) -> usize {
        self.centers.nrows()
    }

    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(z.len(), self.input_dim);
        let mut out = DVector::zeros(self.len());
        out[0] = 1.0;
        for i in 0..self.input_dim {
            out[1 + i] = z[i];
        }
        for k in 0..self.centers.nrows() {
            let mut d2 = 0.0;
            for j in 0..self.input_dim {
                let d = (z[j] - self.centers[(k, j)]) / self.lengthscales[j];
                d2 += d * d;
            }
            out[1 + self.input_dim + k] = (-0.5 * d2).exp();
        }
        out
    }
}

/// Diagonal-covariance Gaussian regressor y | z ~ N(Wφ(z), diag(v)).
#[derive(Debug, Clone)]
pub struct GaussianRegressor {
    feat: FeatureMap,
    /// out_dim x feature_len readout.
    weights: DMatrix<f64>,
    /// per-output log variance parameters; v = var_floor + exp(log_var)
    log_var: DVector<f64>,
    var_floor: f64,
}

pub struct NllGradients {
    pub loss: f64,
    pub weights: DMatrix<f64>,
    pub log_var: DVector<f64>,
}

impl GaussianRegressor {
    pub fn new(feat: FeatureMap, out_dim: usize, var_floor: f64) -> Result<Self> {
        if out_dim == 0 {
            return Err(CoreError::Empty { what: "output" });
        }
        if !(var_floor >= 0.0) || !var_floor.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "var_floor",
                value: var_floor,
            });
        }
        let f = feat.len();
        Ok(Self {
            feat,
            weights: DMatrix::zeros(out_dim, f),
            log_var: DVector::zeros(out_dim),
            var_floor,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feat
    }

    pub fn variances(&self) -> DVector<f64> {
        self.log_var.map(|l| self.var_floor + l.exp())
    }

    pub fn predict(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let phi = self.feat.eval(z);
        (&self.weights * phi, self.variances())
    }

    fn design(&self, zs: &[DVector<f64>]) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(zs.len(), self.feat.len());
        for (b, z) in zs.iter().enumerate() {
            phi.set_row(b, &self.feat.eval(z).transpose());
        }
        phi
    }

    /// Mean NLL and its gradients on a batch.
    pub fn nll_gradients(&self, zs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<NllGradients> {
        if zs.is_empty() || zs.len() != ys.len() {
            return Err(CoreError::Empty { what: "batch" });
        }
        let b = zs.len() as f64;
        let out = self.out_dim();
        let phi = self.design(zs);
        let mut y = DMatrix::zeros(zs.len(), out);
        for (i, yv) in ys.iter().enumerate() {
            if yv.len() != out {
                return Err(CoreError::DimensionMismatch {
                    context: "nll targets",
                    expected: out,
                    got: yv.len(),
                });
            }
            y.set_row(i, &yv.transpose());
        }
        let v = self.variances();
        let err = y - &phi * self.weights.transpose();
        let mut loss = 0.0;
        let mut mean_sq = DVector::zeros(out);
        for d in 0..out {
            let col = err.column(d);
            let m2 = col.iter().map(|e| e * e).sum::<f64>() / b;
            mean_sq[d] = m2;
            loss += 0.5 * (LN_2PI + v[d].ln() + m2 / v[d]);
        }
        let mut scaled = err.clone();
        for d in 0..out {
            let inv = 1.0 / v[d];
            scaled.column_mut(d).scale_mut(inv);
        }
        let grad_w = -(scaled.transpose() * &phi) / b;
        let grad_lv = DVector::from_fn(out, |d, _| {
            0.5 * self.log_var[d].exp() * (1.0 / v[d] - mean_sq[d] / (v[d] * v[d]))
        });
        if !loss.is_finite() {
            return Err(CoreError::NonFinite { context: "nll" });
        }
        Ok(NllGradients {
            loss,
            weights: grad_w,
            log_var: grad_lv,
        })
    }

    pub fn nll(&self, zs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<f64> {
        Ok(self.nll_gradients(zs, ys)?.loss)
    }

    /// One descent step on the batch NLL; returns the pre-step loss.
    ///
    /// The weight update follows the variance-preconditioned direction
    /// v_d · ∂nll/∂W_df = −mean_b e_bd φ_bf (the least-squares gradient), so
    /// a collapsing variance cannot inflate the step. The log-variance step
    /// is the exact NLL gradient under a ±0.25 trust clamp, with the
    /// parameter boxed to [-30, 15]; without the clamp a single large
    /// residual batch overflows exp(ℓ).
    pub fn train_step(&mut self, zs: &[DVector<f64>], ys: &[DVector<f64>], lr: f64) -> Result<f64> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "lr",
                value: lr,
            });
        }
        let g = self.nll_gradients(zs, ys)?;
        let v = self.variances();
        for d in 0..self.out_dim() {
            for f in 0..self.weights.ncols() {
                self.weights[(d, f)] -= lr * v[d] * g.weights[(d, f)];
            }
            let step = (lr * g.log_var[d]).clamp(-0.25, 0.25);
            self.log_var[d] = (self.log_var[d] - step).clamp(-30.0, 15.0);
        }
        Ok(g.loss)
    }

    pub fn parameters(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.weights, &self.log_var)
    }

    pub fn set_parameters(&mut self, weights: DMatrix<f64>, log_var: DVector<f64>) -> Result<()> {
        if weights.shape() != self.weights.shape() || log_var.len() != self.log_var.len() {
            return Err(CoreError::DimensionMismatch {
                context: "set_parameters",
                expected: self.weights.ncols(),
                got: weights.ncols(),
            });
        }
        self.weights = weights;
        self.log_var = log_var;
        Ok(())
    }
}

/// Versioned flat checkpoint payload shared by both model kinds.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub input_dim: usize,
    pub out_dim: usize,
    pub rbf_count: usize,
    pub lengthscales: Vec<f64>,
    pub var_floor: f64,
    /// row-major rbf_count x input_dim
    pub centers: Vec<f64>,
    /// row-major out_dim x feature_len
    pub weights: Vec<f64>,
    pub log_var: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl GaussianRegressor {
    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let c = &self.feat.centers;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            input_dim: self.feat.input_dim,
            out_dim: self.out_dim(),
            rbf_count: c.nrows(),
            lengthscales: self.feat.lengthscales.iter().copied().collect(),
            var_floor: self.var_floor,
            centers: c.transpose().iter().copied().collect(),
            weights: self.weights.transpose().iter().copied().collect(),
            log_var: self.log_var.iter().copied().collect(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported version {} (expected {})",
                cp.version, CHECKPOINT_VERSION
            )));
        }
        let flen = 1 + cp.input_dim + cp.rbf_count;
        if cp.centers.len() != cp.rbf_count * cp.input_dim
            || cp.weights.len() != cp.out_dim * flen
            || cp.log_var.len() != cp.out_dim
            || cp.lengthscales.len() != cp.input_dim
        {
            return Err(CoreError::Checkpoint("inconsistent dimensions".into()));
        }
        let feat = FeatureMap {
            input_dim: cp.input_dim,
            centers: DMatrix::from_row_slice(cp.rbf_count, cp.input_dim, &cp.centers),
            lengthscales: DVector::from_row_slice(&cp.lengthscales),
        };
        Ok(Self {
            feat,
            weights: DMatrix::from_row_slice(cp.out_dim, flen, &cp.weights),
            log_var: DVector::from_row_slice(&cp.log_var),
            var_floor: cp.var_floor,
        })
    }
}

/// Learned one-step dynamics kernel p̄(x' | x, u) over z = [x; u].
#[derive(Debug, Clone)]
pub struct NominalModel {
    reg: GaussianRegressor,
    state_dim: usize,
    action_dim: usize,
}

impl NominalModel {
    /// `lengthscales` spans the stacked input [state; action].
    pub fn new(
        seed: u64,
        state_box: &[[f64; 2]],
        action_box: &[[f64; 2]],
        rbf_count: usize,
        lengthscales: &[f64],
        var_floor: f64,
    ) -> Result<Self> {
        let mut input_box: Vec<[f64; 2]> = state_box.to_vec();
        input_box.extend_from_slice(action_box);
        let feat = FeatureMap::new(seed, &input_box, rbf_count, lengthscales)?;
        Ok(Self {
            reg: GaussianRegressor::new(feat, state_box.len(), var_floor)?,
            state_dim: state_box.len(),
            action_dim: action_box.len(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn regressor(&self) -> &GaussianRegressor {
        &self.reg
    }

    pub fn regressor_mut(&mut self) -> &mut GaussianRegressor {
        &mut self.reg
    }

    fn stack(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.state_dim + self.action_dim);
        z.rows_mut(0, self.state_dim).copy_from(x);
        z.rows_mut(self.state_dim, self.action_dim).copy_from(u);
        z
    }

    pub fn predict_kernel(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<GaussianKernel> {
        if x.len() != self.state_dim || u.len() != self.action_dim {
            return Err(CoreError::DimensionMismatch {
                context: "predict_kernel",
                expected: self.state_dim + self.action_dim,
                got: x.len() + u.len(),
            });
        }
        let (mean, var) = self.reg.predict(&self.stack(x, u));
        GaussianKernel::diagonal(mean, var)
    }

    pub fn train_step(
        &mut self,
        xs: &[(DVector<f64>, DVector<f64>)],
        next: &[DVector<f64>],
        lr: f64,
    ) -> Result<f64> {
        let zs: Vec<DVector<f64>> = xs.iter().map(|(x, u)| self.stack(x, u)).collect();
        self.reg.train_step(&zs, next, lr)
    }

    pub fn nll(
        &self,
        xs: &[(DVector<f64>, DVector<f64>)],
        next: &[DVector<f64>],
    ) -> Result<f64> {
        let zs: Vec<DVector<f64>> = xs.iter().map(|(x, u)| self.stack(x, u)).collect();
        self.reg.nll(&zs, next)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.reg.to_checkpoint("dynamics")
    }

    /// The split is recoverable: out_dim is the state, the rest the action.
    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.kind != "dynamics" {
            return Err(CoreError::Checkpoint(format!(
                "expected a dynamics checkpoint, found kind {:?}",
                cp.kind
            )));
        }
        if cp.input_dim <= cp.out_dim {
            return Err(CoreError::Checkpoint(
                "dynamics checkpoint has no action dimensions".into(),
            ));
        }
        Ok(Self {
            reg: GaussianRegressor::from_checkpoint(cp)?,
            state_dim: cp.out_dim,
            action_dim: cp.input_dim - cp.out_dim,
        })
    }
}

/// Learned scalar stage-cost model c(x, u) with Gaussian noise.
#[derive(Debug, Clone)]
pub struct CostModel {
    reg: GaussianRegressor,
    state_dim: usize,
    action_dim: usize,
}

impl CostModel {
    /// `lengthscales` spans the stacked input [state; action].
    pub fn new(
        seed: u64,
        state_box: &[[f64; 2]],
        action_box: &[[f64; 2]],
        rbf_count: usize,
        lengthscales: &[f64],
        var_floor: f64,
    ) -> Result<Self> {
        let mut input_box: Vec<[f64; 2]> = state_box.to_vec();
        input_box.extend_from_slice(action_box);
        let feat = FeatureMap::new(seed, &input_box, rbf_count, lengthscales)?;
        Ok(Self {
            reg: GaussianRegressor::new(feat, 1, var_floor)?,
            state_dim: state_box.len(),
            action_dim: action_box.len(),
        })
    }

    pub fn regressor(&self) -> &GaussianRegressor {
        &self.reg
    }

    pub fn regressor_mut(&mut self) -> &mut GaussianRegressor {
        &mut self.reg
    }

    fn stack(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.state_dim + self.action_dim);
        z.rows_mut(0, self.state_dim).copy_from(x);
        z.rows_mut(self.state_dim, self.action_dim).copy_from(u);
        z
    }

    pub fn predict_mean(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.reg.predict(&self.stack(x, u)).0[0]
    }

    pub fn train_step(
        &mut self,
        xs: &[(DVector<f64>, DVector<f64>)],
        costs: &[f64],
        lr: f64,
    ) -> Result<f64> {
        let zs: Vec<DVector<f64>> = xs.iter().map(|(x, u)| self.stack(x, u)).collect();
        let ys: Vec<DVector<f64>> = costs.iter().map(|&c| DVector::from_element(1, c)).collect();
        self.reg.train_step(&zs, &ys, lr)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.reg.to_checkpoint("cost")
    }

    /// The scalar output hides the state/action split, so the caller
    /// supplies the state dimension.
    pub fn from_checkpoint(cp: &Checkpoint, state_dim: usize) -> Result<Self> {
        if cp.kind != "cost" {
            return Err(CoreError::Checkpoint(format!(
                "expected a cost checkpoint, found kind {:?}",
                cp.kind
            )));
        }
        if cp.out_dim != 1 || cp.input_dim <= state_dim {
            return Err(CoreError::Checkpoint(
                "cost checkpoint dimensions are inconsistent".into(),
            ));
        }
        Ok(Self {
            reg: GaussianRegressor::from_checkpoint(cp)?,
            state_dim,
            action_dim: cp.input_dim - state_dim,
        })
    }
}
