//! Maximally diffusive reference kernels.
//!
//! Subject to a KL trust region of radius ε around a nominal N(μ, Σ), the
//! entropy-maximizing Gaussian keeps the mean and inflates the covariance to
//! λΣ, where the inflation factor solves
//!
//! ```text
//! D_KL(N(μ, λΣ) || N(μ, Σ)) = (n/2)(λ - 1 - ln λ) = ε,   λ ≥ 1.
//! ```
//!
//! The left side is zero at λ = 1 and strictly increasing beyond it, so the
//! root is found by bisection on the residual. The entropy gained over the
//! nominal is (n/2) ln λ, and the reverse divergence
//! D_KL(N(μ,Σ) || N(μ,λΣ)) = (n/2)(1/λ - 1 + ln λ) is the ambiguity-free
//! limit the dual tests compare against.

use crate::error::{CoreError, Result};
use crate::gaussian::{kl_gaussian, GaussianKernel};

/// Absolute tolerance on the defining residual (n/2)(λ - 1 - ln λ) - ε.
pub const ROOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PmaxResult {
    pub kernel: GaussianKernel,
    pub lambda: f64,
    /// KL of the built kernel from the nominal, recomputed from the kernels.
    pub achieved_kl: f64,
}

fn residual(lambda: f64, dim: usize, epsilon: f64) -> f64 {
    0.5 * dim as f64 * (lambda - 1.0 - lambda.ln()) - epsilon
}

/// Solve (n/2)(λ - 1 - ln λ) = ε for λ ≥ 1. ε = 0 returns exactly 1.
pub fn solve_lambda(epsilon: f64, dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(CoreError::InvalidParameter {
            name: "dim",
            value: 0.0,
        });
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(CoreError::InvalidParameter {
            name: "epsilon",
            value: epsilon,
        });
    }
    if epsilon == 0.0 {
        return Ok(1.0);
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    while residual(hi, dim, epsilon) < 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(CoreError::NonFinite {
                context: "solve_lambda bracket",
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid, dim, epsilon);
        if r.abs() <= 0.5 * ROOT_TOL {
            return Ok(mid);
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Entropy-maximizing kernel inside the ε-ball around `nominal`: same mean,
/// covariance λΣ. With ε = 0 the result is the nominal, bit for bit.
pub fn build_pmax(nominal: &GaussianKernel, epsilon: f64) -> Result<PmaxResult> {
    let lambda = solve_lambda(epsilon, nominal.dim())?;
    let kernel = nominal.scale_cov(lambda)?;
    let achieved_kl = kl_gaussian(&kernel, nominal)?;
    Ok(PmaxResult {
        kernel,
        lambda,
        achieved_kl,
    })
}

/// D_KL(nominal || p_max) = (n/2)(1/λ - 1 + ln λ) for λ ≥ 1.
pub fn nominal_to_pmax_kl(lambda: f64, dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(CoreError::InvalidParameter {
            name: "dim",
            value: 0.0,
        });
    }
    if !lambda.is_finite() || lambda < 1.0 {
        return Err(CoreError::InvalidParameter {
            name: "lambda",
            value: lambda,
        });
    }
    Ok(0.5 * dim as f64 * (1.0 / lambda - 1.0 + lambda.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn lambda_frozen_value_for_half_nat_in_2d() {
        // bisection oracle root of λ - 1 - ln λ = 0.5
        let lam = solve_lambda(0.5, 2).unwrap();
        assert!((lam - 2.3576766739458987).abs() < 1e-9, "lam = {lam}");
        assert!(residual(lam, 2, 0.5).abs() <= ROOT_TOL);
    }

    #[test]
    fn lambda_is_exactly_one_at_zero_radius() {
        assert_eq!(solve_lambda(0.0, 3).unwrap(), 1.0);
    }

    #[test]
    fn lambda_residuals_small_on_random_inputs() {
        use rand::Rng;
        let mut rng = crate::rng::chacha(5);
        for _ in 0..500 {
            let n = rng.random_range(1..=16usize);
            let eps = rng.random_range(0.0..10.0);
            let lam = solve_lambda(eps, n).unwrap();
            assert!(lam >= 1.0);
            assert!(residual(lam, n, eps).abs() <= ROOT_TOL, "eps={eps} n={n}");
        }
    }

    #[test]
    fn lambda_increases_with_radius() {
        let mut prev = 1.0;
        for k in 1..=40 {
            let eps = 0.05 * k as f64;
            let lam = solve_lambda(eps, 3).unwrap();
            assert!(lam > prev);
            prev = lam;
        }
    }

    #[test]
    fn pmax_kernel_hits_the_radius_and_keeps_the_mean() {
        let nominal = GaussianKernel::diagonal(
            DVector::from_row_slice(&[0.2, -0.4]),
            DVector::from_row_slice(&[0.9, 1.4]),
        )
        .unwrap();
        let r = build_pmax(&nominal, 0.5).unwrap();
        assert!((r.achieved_kl - 0.5).abs() < 1e-9);
        assert_eq!(r.kernel.mean(), nominal.mean());
        // entropy gain (n/2) ln λ
        let gain = r.kernel.entropy() - nominal.entropy();
        assert!((gain - 1.0 * r.lambda.ln()).abs() < 1e-10);
    }

    #[test]
    fn pmax_at_zero_radius_is_the_nominal() {
        let nominal = GaussianKernel::diagonal(
            DVector::from_row_slice(&[0.0, 0.0]),
            DVector::from_row_slice(&[0.3, 0.7]),
        )
        .unwrap();
        let r = build_pmax(&nominal, 0.0).unwrap();
        assert_eq!(r.lambda, 1.0);
        assert_eq!(
            r.kernel.variances().unwrap(),
            nominal.variances().unwrap()
        );
        assert_eq!(r.achieved_kl, 0.0);
    }

    #[test]
    fn reverse_kl_matches_kernel_computation() {
        let nominal = GaussianKernel::diagonal(
            DVector::from_row_slice(&[0.5, 0.1, -0.2]),
            DVector::from_row_slice(&[0.6, 1.1, 0.4]),
        )
        .unwrap();
        let r = build_pmax(&nominal, 0.8).unwrap();
        let direct = kl_gaussian(&nominal, &r.kernel).unwrap();
        let closed = nominal_to_pmax_kl(r.lambda, 3).unwrap();
        assert!((direct - closed).abs() < 1e-10);
    }

    #[test]
    fn rejects_contraction_and_bad_parameters() {
        assert!(nominal_to_pmax_kl(0.9, 2).is_err());
        assert!(solve_lambda(-0.1, 2).is_err());
        assert!(solve_lambda(f64::NAN, 2).is_err());
        assert!(solve_lambda(1.0, 0).is_err());
    }

    #[test]
    fn brute_force_grid_never_beats_pmax_in_1d() {
        // grid over variances; entropy max under the KL constraint
        let nominal =
            GaussianKernel::diagonal(DVector::from_element(1, 0.3), DVector::from_element(1, 0.7))
                .unwrap();
        let eps = 0.5;
        let r = build_pmax(&nominal, eps).unwrap();
        let v0 = nominal.variances().unwrap()[0];
        let mut best = f64::NEG_INFINITY;
        let grid = 10_000;
        for i in 0..grid {
            let v = v0 * (0.2 + 6.0 * i as f64 / grid as f64);
            let cand =
                GaussianKernel::diagonal(nominal.mean().clone(), DVector::from_element(1, v))
                    .unwrap();
            if kl_gaussian(&cand, &nominal).unwrap() <= eps {
                best = best.max(cand.entropy());
            }
        }
        // allowance: entropy spacing of adjacent grid points near the optimum
        let step = 0.5 * (6.0 / grid as f64) / 0.2;
        assert!(best <= r.kernel.entropy() + step);
        assert!(best > r.kernel.entropy() - 0.01);
    }
}
