//! Gaussian kernels: construction, densities, entropy, sampling, and KL.
//!
//! Every covariance is floored (`COV_FLOOR` added to the diagonal) before
//! Cholesky factorization, and the factor plus log-determinant are cached at
//! construction, so the downstream operations are cheap and never refactor.
//!
//! Closed forms used throughout:
//!
//! ```text
//! H(N(μ, Σ))            = (n/2)(1 + ln 2π) + (1/2) ln det Σ
//! ln N(x; μ, Σ)         = -(n/2) ln 2π - (1/2) ln det Σ - (1/2)|L⁻¹(x-μ)|²
//! D_KL(N₀ || N₁)        = (1/2)[tr(Σ₁⁻¹Σ₀) + (μ₁-μ₀)ᵀΣ₁⁻¹(μ₁-μ₀) - n
//!                          + ln det Σ₁ - ln det Σ₀]
//! ```
//!
//! The learned models emit diagonal covariances, so a componentwise fast
//! path covers the control loop; the full-matrix path stays for tests and
//! general inputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::chacha;

pub const COV_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.8378770664093453;

/// Covariance storage. `Diagonal` holds variances, `Full` a dense SPD matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Cov {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone)]
enum Factor {
    /// Componentwise standard deviations of the floored variances.
    Diagonal(DVector<f64>),
    /// Lower Cholesky factor of the floored covariance.
    Full(DMatrix<f64>),
}

/// A Gaussian transition kernel N(mean, cov) with cached factorization.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    mean: DVector<f64>,
    cov: Cov,
    factor: Factor,
    log_det: f64,
}

impl GaussianKernel {
    /// Diagonal-covariance kernel from per-dimension variances.
    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(CoreError::DimensionMismatch {
                context: "GaussianKernel::diagonal",
                expected: mean.len(),
                got: variances.len(),
            });
        }
        if mean.len() == 0 {
            return Err(CoreError::Empty { what: "mean" });
        }
        if !mean.iter().all(|v| v.is_finite()) || !variances.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "GaussianKernel::diagonal",
            });
        }
        if variances.iter().any(|&v| v < 0.0) {
            return Err(CoreError::NotPositiveDefinite);
        }
        let floored = variances.map(|v| v + COV_FLOOR);
        let log_det = floored.iter().map(|v| v.ln()).sum();
        let sd = floored.map(f64::sqrt);
        Ok(Self {
            mean,
            cov: Cov::Diagonal(floored),
            factor: Factor::Diagonal(sd),
            log_det,
        })
    }

    /// Full-covariance kernel. Rejects asymmetric or non-positive-definite
    /// input; the floor is added to the diagonal before factorization.
    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(CoreError::DimensionMismatch {
                context: "GaussianKernel::full",
                expected: n,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        if n == 0 {
            return Err(CoreError::Empty { what: "mean" });
        }
        if !mean.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "GaussianKernel::full",
            });
        }
        let scale = cov.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(CoreError::NotSymmetric);
                }
            }
        }
        let mut floored = cov;
        for i in 0..n {
            floored[(i, i)] += COV_FLOOR;
        }
        let chol = nalgebra::linalg::Cholesky::new(floored.clone())
            .ok_or(CoreError::NotPositiveDefinite)?;
        let l = chol.l();
        let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov: Cov::Full(floored),
            factor: Factor::Full(l),
            log_det,
        })
    }

    /// Isotropic kernel N(mean, var * I).
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::diagonal(mean, DVector::from_element(n, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Cov {
        &self.cov
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.cov, Cov::Diagonal(_))
    }

    /// Per-dimension variances (floored). Diagonal kernels only.
    pub fn variances(&self) -> Option<&DVector<f64>> {
        match &self.cov {
            Cov::Diagonal(v) => Some(v),
            Cov::Full(_) => None,
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Same mean, covariance multiplied by `factor` > 0. The floor is not
    /// reapplied, so scaling by exactly 1.0 reproduces the kernel bit-for-bit.
    pub fn scale_cov(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "factor",
                value: factor,
            });
        }
        let n = self.dim() as f64;
        match (&self.cov, &self.factor) {
            (Cov::Diagonal(v), Factor::Diagonal(sd)) => Ok(Self {
                mean: self.mean.clone(),
                cov: Cov::Diagonal(v * factor),
                factor: Factor::Diagonal(sd * factor.sqrt()),
                log_det: self.log_det + n * factor.ln(),
            }),
            (Cov::Full(c), Factor::Full(l)) => Ok(Self {
                mean: self.mean.clone(),
                cov: Cov::Full(c * factor),
                factor: Factor::Full(l * factor.sqrt()),
                log_det: self.log_det + n * factor.ln(),
            }),
            _ => unreachable!("cov and factor variants always match"),
        }
    }

    pub fn entropy(&self) -> f64 {
        let n = self.dim() as f64;
        0.5 * n * (1.0 + LN_2PI) + 0.5 * self.log_det
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "log_density",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let n = self.dim() as f64;
        let quad = match &self.factor {
            Factor::Diagonal(sd) => {
                let mut q = 0.0;
                for i in 0..x.len() {
                    let z = (x[i] - self.mean[i]) / sd[i];
                    q += z * z;
                }
                q
            }
            Factor::Full(l) => {
                let diff = x - &self.mean;
                let y = l
                    .solve_lower_triangular(&diff)
                    .ok_or(CoreError::NotPositiveDefinite)?;
                y.norm_squared()
            }
        };
        Ok(-0.5 * n * LN_2PI - 0.5 * self.log_det - 0.5 * quad)
    }

    /// Draw `count` samples with a ChaCha stream from `seed`. The draw order
    /// is fixed (sample-major, dimension-minor), so results are reproducible.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = chacha(seed);
        let n = self.dim();
        (0..count)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                match &self.factor {
                    Factor::Diagonal(sd) => &self.mean + z.component_mul(sd),
                    Factor::Full(l) => &self.mean + l * z,
                }
            })
            .collect()
    }

}

/// D_KL(p || q) in nats. Componentwise when both kernels are diagonal;
/// mixed pairs are promoted to the full-matrix path.
pub fn kl_gaussian(p: &GaussianKernel, q: &GaussianKernel) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "kl_gaussian",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let n = p.dim() as f64;
    match (&p.cov, &q.cov) {
        (Cov::Diagonal(vp), Cov::Diagonal(vq)) => {
            let mut acc = 0.0;
            for i in 0..vp.len() {
                let md = q.mean[i] - p.mean[i];
                acc += vp[i] / vq[i] + md * md / vq[i] + (vq[i] / vp[i]).ln();
            }
            Ok(0.5 * (acc - n))
        }
        _ => {
            let lq = match &q.factor {
                Factor::Full(l) => l.clone(),
                Factor::Diagonal(sd) => DMatrix::from_diagonal(sd),
            };
            // tr(Σq⁻¹ Σp) = |Lq⁻¹ Lp|_F² with Σp = Lp Lpᵀ
            let lp = match &p.factor {
                Factor::Full(l) => l.clone(),
                Factor::Diagonal(sd) => DMatrix::from_diagonal(sd),
            };
            let y = lq
                .solve_lower_triangular(&lp)
                .ok_or(CoreError::NotPositiveDefinite)?;
            let trace = y.iter().map(|v| v * v).sum::<f64>();
            let diff = &q.mean - &p.mean;
            let z = lq
                .solve_lower_triangular(&diff)
                .ok_or(CoreError::NotPositiveDefinite)?;
            let quad = z.norm_squared();
            Ok(0.5 * (trace + quad - n + q.log_det - p.log_det))
        }
    }
}

/// Sample covariance helper used by the sampling tests.
pub fn empirical_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = DVector::zeros(n);
    for s in samples {
        mean += s;
    }
    mean /= m;
    let mut cov = DMatrix::zeros(n, n);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= m - 1.0;
    (mean, cov)
}
