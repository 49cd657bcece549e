//! Release gates for the controller stack. Every test checks one shipping
//! claim end to end and prints a single PASS line with the measured margin;
//! a failure message carries the same numbers. The point-mass gates train
//! real models, so the full target takes a few minutes:
//!
//! ```text
//! cargo test -p drfc-cli --test acceptance -- --test-threads=1 --nocapture
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use drfc_cli::commands;
use drfc_core::ambiguity::{
    augmented_kl_check, augmented_radius, cost_of_ambiguity, AlphaBracket, AmbiguitySpec,
    DualBatch, McSettings,
};
use drfc_core::config::RunConfig;
use drfc_core::envs::PerturbationSpec;
use drfc_core::gaussian::{kl_gaussian, GaussianKernel};
use drfc_core::models::{GaussianRegressor, NominalModel};
use drfc_core::nalgebra::{DMatrix, DVector};
use drfc_core::pmax::{build_pmax, nominal_to_pmax_kl, solve_lambda};
use drfc_core::policy::{
    draw_candidates, evaluate_candidates, gibbs_policy, EvalContext, SelectMode, StepSettings,
};
use drfc_core::rng::{chacha, derive2, TAG_MC};
use drfc_core::run;
use rand::Rng;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn diffusion_residual(lambda: f64, dim: usize, epsilon: f64) -> f64 {
    0.5 * dim as f64 * (lambda - 1.0 - lambda.ln()) - epsilon
}

/// Random diagonal kernel with O(1) scales.
fn random_diag(rng: &mut impl Rng, dim: usize) -> GaussianKernel {
    let mean = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
    let vars = DVector::from_fn(dim, |_, _| rng.random_range(0.05..2.0));
    GaussianKernel::diagonal(mean, vars).unwrap()
}

/// Random full-covariance kernel: AAᵀ + 0.1 I keeps it well conditioned.
fn random_full(rng: &mut impl Rng, dim: usize) -> GaussianKernel {
    let mean = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.7..0.7));
    let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1;
    GaussianKernel::full(mean, cov).unwrap()
}

/// One-sided sign-test tail: P[Binomial(n, 1/2) >= wins].
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut coeff = vec![1.0f64; n + 1];
    for k in 1..=n {
        coeff[k] = coeff[k - 1] * (n - k + 1) as f64 / k as f64;
    }
    let scale = 0.5f64.powi(n as i32);
    (wins..=n).map(|k| coeff[k] * scale).sum()
}

#[test]
fn a01_diffusion_budget_root() {
    let t0 = Instant::now();
    let mut rng = chacha(0xa1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=16usize);
        let epsilon = if rng.random_bool(0.2) {
            // heavy tail exercises the bracket expansion
            10f64.powf(rng.random_range(-8.0..2.0))
        } else {
            rng.random_range(0.0..50.0)
        };
        let lambda = solve_lambda(epsilon, dim).unwrap();
        assert!(lambda >= 1.0, "lambda {lambda} < 1 at eps={epsilon} dim={dim}");
        let resid = diffusion_residual(lambda, dim, epsilon).abs();
        worst = worst.max(resid);
        assert!(
            resid <= 1e-10,
            "residual {resid:.3e} > 1e-10 at eps={epsilon} dim={dim}"
        );
    }
    for dim in 1..=16 {
        assert_eq!(solve_lambda(0.0, dim).unwrap(), 1.0, "zero budget must give 1");
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 1.0, "root-finding took {dt:.3}s, budget 1s");
    println!("PASS diffusion budget root: worst residual {worst:.2e}, {dt:.3}s");
}

#[test]
fn a02_max_entropy_kernel() {
    let t0 = Instant::now();
    let mut rng = chacha(0xa2);
    let mut worst_kl = 0.0f64;
    let mut worst_gain = 0.0f64;
    for i in 0..200 {
        let dim = rng.random_range(1..=4usize);
        let nominal = if i % 4 == 0 {
            random_full(&mut rng, dim)
        } else {
            random_diag(&mut rng, dim)
        };
        let epsilon = 10f64.powf(rng.random_range(-6.0..0.7));
        let pm = build_pmax(&nominal, epsilon).unwrap();
        let kl = kl_gaussian(&pm.kernel, &nominal).unwrap();
        worst_kl = worst_kl.max((kl - epsilon).abs());
        assert!(
            (kl - epsilon).abs() <= 1e-8,
            "achieved KL {kl} vs budget {epsilon} (dim {dim})"
        );
        let gain = pm.kernel.entropy() - nominal.entropy();
        let expect = 0.5 * dim as f64 * pm.lambda.ln();
        worst_gain = worst_gain.max((gain - expect).abs());
        assert!(
            (gain - expect).abs() <= 1e-10,
            "entropy gain {gain} vs (n/2)ln lambda {expect}"
        );
    }

    // dim-1 oracle: grid over variances, entropy maximized subject to the
    // same KL budget, must never beat the closed form beyond grid resolution
    const GRID: usize = 10_000;
    for _ in 0..50 {
        let mu = rng.random_range(-1.0..1.0);
        let sigma2 = rng.random_range(0.05..2.0);
        let epsilon = 10f64.powf(rng.random_range(-4.0..0.7));
        let nominal =
            GaussianKernel::diagonal(DVector::from_element(1, mu), DVector::from_element(1, sigma2))
                .unwrap();
        let pm = build_pmax(&nominal, epsilon).unwrap();
        let lo = sigma2 * 0.3;
        let hi = sigma2 * pm.lambda * 3.0;
        let step = (hi / lo).powf(1.0 / (GRID - 1) as f64);
        let mut best = f64::NEG_INFINITY;
        let mut v = lo;
        for _ in 0..GRID {
            let r = v / sigma2;
            let kl = 0.5 * (r - 1.0 - r.ln());
            if kl <= epsilon {
                best = best.max(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln());
            }
            v *= step;
        }
        let slack = 0.5 * step.ln();
        assert!(
            best <= pm.kernel.entropy() + slack,
            "grid oracle beat the kernel: {best} > {} + {slack:.2e}",
            pm.kernel.entropy()
        );
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 10.0, "max-entropy checks took {dt:.3}s, budget 10s");
    println!(
        "PASS max-entropy kernel: worst KL gap {worst_kl:.2e}, worst gain gap {worst_gain:.2e}, {dt:.3}s"
    );
}

#[test]
fn a03_gaussian_kl_vs_monte_carlo() {
    const SAMPLES: usize = 100_000;
    let mut rng = chacha(0xa3);
    let mut worst_z = 0.0f64;
    for i in 0..100 {
        let dim = (i % 4) + 1;
        let (p, q) = if i % 3 == 0 {
            (random_full(&mut rng, dim), random_full(&mut rng, dim))
        } else {
            (random_diag(&mut rng, dim), random_diag(&mut rng, dim))
        };
        let closed = kl_gaussian(&p, &q).unwrap();
        let xs = p.sample(SAMPLES, 0xa30 + i as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for x in &xs {
            let l = p.log_density(x).unwrap() - q.log_density(x).unwrap();
            sum += l;
            sum_sq += l * l;
        }
        let mean = sum / SAMPLES as f64;
        let var = (sum_sq / SAMPLES as f64 - mean * mean).max(0.0);
        let se = (var / SAMPLES as f64).sqrt();
        let z = (closed - mean).abs() / se.max(1e-12);
        worst_z = worst_z.max(z);
        assert!(
            z <= 3.0,
            "pair {i} (dim {dim}): closed {closed:.6} vs MC {mean:.6} (se {se:.2e}, z {z:.2})"
        );
    }
    println!("PASS Gaussian KL vs Monte Carlo: worst |z| {worst_z:.2} over 100 pairs");
}

/// Smooth bounded stage cost for dual instances.
fn bounded_cost(w: DVector<f64>) -> impl Fn(&DVector<f64>) -> f64 + Sync {
    move |x: &DVector<f64>| (w.dot(x)).tanh() * 0.8
}

#[test]
fn a04_dual_shape_and_zero_radius_limit() {
    let mut rng = chacha(0xa4);

    // midpoint convexity in alpha on a shared sample batch
    let mut worst_gap = 0.0f64;
    for i in 0..50 {
        let dim = rng.random_range(1..=3usize);
        let nominal = random_diag(&mut rng, dim);
        let pm = build_pmax(&nominal, rng.random_range(0.05..2.0)).unwrap();
        let w = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let cost = bounded_cost(w);
        let eta = rng.random_range(0.0..3.0);
        let mc = McSettings {
            count: 512,
            seed: 0xa40 + i as u64,
        };
        let batch = DualBatch::build(&nominal, &pm.kernel, &cost, mc).unwrap();
        let a1 = 10f64.powf(rng.random_range(-3.0..3.0));
        let a2 = 10f64.powf(rng.random_range(-3.0..3.0));
        let mid = 0.5 * (a1 + a2);
        let lhs = batch.value(mid, eta);
        let rhs = 0.5 * (batch.value(a1, eta) + batch.value(a2, eta));
        // bootstrap the midpoint-gap statistic over the shared batch
        let mut boots = Vec::with_capacity(100);
        let mut brng = chacha(0xa4b0 + i as u64);
        for _ in 0..100 {
            let idx: Vec<usize> = (0..512).map(|_| brng.random_range(0..512usize)).collect();
            let sub = batch.resample(&idx).unwrap();
            boots.push(0.5 * (sub.value(a1, eta) + sub.value(a2, eta)) - sub.value(mid, eta));
        }
        let bm = boots.iter().sum::<f64>() / boots.len() as f64;
        let bv = boots.iter().map(|g| (g - bm) * (g - bm)).sum::<f64>() / (boots.len() - 1) as f64;
        let se = bv.sqrt();
        let gap = lhs - rhs;
        worst_gap = worst_gap.max(gap);
        assert!(
            gap <= 3.0 * se + 1e-12,
            "instance {i}: midpoint value {lhs} above chord {rhs} by {gap:.3e} (3se {:.3e})",
            3.0 * se
        );
    }

    // robust stage value is non-decreasing in the radius
    for i in 0..50 {
        let dim = rng.random_range(1..=3usize);
        let nominal = random_diag(&mut rng, dim);
        let pm = build_pmax(&nominal, rng.random_range(0.05..2.0)).unwrap();
        let w = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let cost = bounded_cost(w);
        let mc = McSettings {
            count: 512,
            seed: 0xa4e0 + i as u64,
        };
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=10 {
            let eta = 0.3 * k as f64;
            let out = cost_of_ambiguity(&nominal, &pm.kernel, &cost, eta, mc, AlphaBracket::default())
                .unwrap();
            assert!(
                out.c_tilde >= prev - 1e-8 * (1.0 + prev.abs()),
                "instance {i}: c~ fell from {prev} to {} at eta {eta}",
                out.c_tilde
            );
            prev = out.c_tilde;
        }
    }

    // zero radius collapses to the fixed reference divergence plus mean cost
    let mut worst_zero = 0.0f64;
    for i in 0..20 {
        let dim = rng.random_range(1..=3usize);
        let nominal = random_diag(&mut rng, dim);
        let epsilon = rng.random_range(0.05..0.5);
        let pm = build_pmax(&nominal, epsilon).unwrap();
        let w = DVector::from_fn(dim, |_, _| rng.random_range(-0.2..0.2));
        let b = rng.random_range(-0.3..0.3);
        let wc = w.clone();
        let cost = move |x: &DVector<f64>| wc.dot(x) + b;
        let mc = McSettings {
            count: 20_000,
            seed: 0xa4f0 + i as u64,
        };
        let out =
            cost_of_ambiguity(&nominal, &pm.kernel, &cost, 0.0, mc, AlphaBracket::default()).unwrap();
        let reference = nominal_to_pmax_kl(pm.lambda, dim).unwrap() + w.dot(nominal.mean()) + b;
        let gap = (out.c_tilde - reference).abs();
        worst_zero = worst_zero.max(gap);
        assert!(
            gap <= 2e-2,
            "instance {i}: zero-radius value {} vs closed form {reference} (gap {gap:.3e})",
            out.c_tilde
        );
    }
    println!(
        "PASS dual shape: worst convexity gap {worst_gap:.2e}, zero-radius gap {worst_zero:.2e}"
    );
}

#[test]
fn a05_joint_ball_feasibility() {
    let mut rng = chacha(0xa5);
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let dim = rng.random_range(1..=4usize);
        let nominal = random_diag(&mut rng, dim);
        let spec = AmbiguitySpec {
            eta_dyn: rng.random_range(0.01..2.0),
            delta_cost: if rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            },
            sigma_cost: rng.random_range(0.05..2.0),
            rho: rng.random_range(0.1..5.0),
        };
        let dyn_budget = spec.rho * spec.eta_dyn;
        let t = rng.random_range(0.0..=1.0) * dyn_budget;
        // mean shift along a random direction hits KL target t exactly
        let dir = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0) + 1e-9);
        let vars = nominal.variances().unwrap();
        let q: f64 = (0..dim).map(|j| dir[j] * dir[j] / (2.0 * vars[j])).sum();
        let shift = (t / q).sqrt();
        let truth = GaussianKernel::diagonal(nominal.mean() + dir * shift, vars.clone()).unwrap();
        let gap = rng.random_range(-1.0..1.0) * spec.delta_cost;
        let report = augmented_kl_check(&spec, &truth, &nominal, gap).unwrap();
        if !report.feasible {
            violations += 1;
        }
    }
    assert_eq!(violations, 0, "{violations} in-ball draws graded infeasible");

    // both bounds active: the augmented divergence must sit on the boundary
    let mut worst_corner = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..=4usize);
        let nominal = random_diag(&mut rng, dim);
        let spec = AmbiguitySpec {
            eta_dyn: rng.random_range(0.1..2.0),
            delta_cost: rng.random_range(0.1..1.0),
            sigma_cost: rng.random_range(0.2..2.0),
            rho: rng.random_range(0.2..5.0),
        };
        let t = spec.rho * spec.eta_dyn;
        let dir = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0) + 1e-9);
        let vars = nominal.variances().unwrap();
        let q: f64 = (0..dim).map(|j| dir[j] * dir[j] / (2.0 * vars[j])).sum();
        let truth =
            GaussianKernel::diagonal(nominal.mean() + dir * (t / q).sqrt(), vars.clone()).unwrap();
        let report = augmented_kl_check(&spec, &truth, &nominal, spec.delta_cost).unwrap();
        let radius = augmented_radius(&spec).unwrap();
        let err = (report.kl_augmented - radius).abs();
        worst_corner = worst_corner.max(err);
        assert!(
            err <= 1e-12,
            "corner gap {err:.3e}: augmented {} vs radius {radius}",
            report.kl_augmented
        );
        assert!(report.feasible, "boundary point graded infeasible");
    }
    println!("PASS joint ball feasibility: 0/10000 violations, corner gap {worst_corner:.2e}");
}

#[test]
fn a06_plain_free_energy_recovery() {
    let mut rng = chacha(0xa6);
    for i in 0..10 {
        let state_dim = rng.random_range(1..=3usize);
        let action_dim = rng.random_range(1..=2usize);
        let state_box: Vec<[f64; 2]> = (0..state_dim).map(|_| [-1.5, 1.5]).collect();
        let action_box: Vec<[f64; 2]> = (0..action_dim).map(|_| [-1.0, 1.0]).collect();
        let ls = vec![0.8; state_dim + action_dim];
        let mut model =
            NominalModel::new(0xa60 + i as u64, &state_box, &action_box, 8, &ls, 1e-6).unwrap();
        let (w0, l0) = model.regressor().parameters();
        let w = DMatrix::from_fn(w0.nrows(), w0.ncols(), |_, _| rng.random_range(-0.3..0.3));
        let lv = DVector::from_fn(l0.len(), |_, _| rng.random_range(-3.0..-0.5));
        model.regressor_mut().set_parameters(w, lv).unwrap();

        let goal = GaussianKernel::isotropic(
            DVector::from_fn(state_dim, |_, _| rng.random_range(-0.5..0.5)),
            0.05,
        )
        .unwrap();
        let cost = |x: &DVector<f64>| x.norm_squared();
        let ctx = EvalContext {
            model: &model,
            goal: &goal,
            cost_to_go: &cost,
            action_cost: None,
            prior_logweight: None,
        };
        let settings = StepSettings {
            epsilon: 0.0,
            ambiguity: AmbiguitySpec {
                eta_dyn: 0.0,
                delta_cost: 0.0,
                sigma_cost: 1.0,
                rho: 0.0,
            },
            mc_count: 64,
            bracket: AlphaBracket::default(),
            n_candidates: 12,
            select_mode: SelectMode::Argmax,
        };
        let x = DVector::from_fn(state_dim, |_, _| rng.random_range(-1.0..1.0));
        let step_seed = 0xa6f0 + i as u64;
        let actions = draw_candidates(settings.n_candidates, &action_box, step_seed).unwrap();
        let (set, _, dropped) =
            evaluate_candidates(&x, actions.clone(), &ctx, &settings, step_seed).unwrap();
        assert_eq!(dropped, 0);

        // reference: ambiguity-free free energy, nominal as its own target
        let mut c_tildes = Vec::with_capacity(actions.len());
        for (k, u) in actions.iter().enumerate() {
            let nominal = model.predict_kernel(&x, u).unwrap();
            let mc = McSettings {
                count: settings.mc_count,
                seed: derive2(step_seed, TAG_MC, k as u64),
            };
            let plain =
                cost_of_ambiguity(&nominal, &nominal, &cost, 0.0, mc, settings.bracket).unwrap();
            c_tildes.push(plain.c_tilde);
        }
        let zeros = vec![0.0; actions.len()];
        let reference = gibbs_policy(actions, &zeros, &c_tildes, &zeros, &zeros).unwrap();
        for (k, (a, b)) in set.logits.iter().zip(&reference.logits).enumerate() {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "instance {i} candidate {k}: {a} vs {b}"
            );
        }
        for (a, b) in set.probs.iter().zip(&reference.probs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    println!("PASS plain free-energy recovery: logits bitwise equal on 10 instances");
}

#[test]
fn a07_nll_gradients_match_finite_differences() {
    let mut rng = chacha(0xa7);
    let mut worst_rel = 0.0f64;
    for i in 0..20 {
        let in_dim = rng.random_range(1..=3usize);
        let out_dim = rng.random_range(1..=3usize);
        let rbf = rng.random_range(4..=10usize);
        let input_box: Vec<[f64; 2]> = (0..in_dim).map(|_| [-2.0, 2.0]).collect();
        let ls = vec![rng.random_range(0.4..1.5); in_dim];
        let feat =
            drfc_core::models::FeatureMap::new(0xa70 + i as u64, &input_box, rbf, &ls).unwrap();
        let mut reg = GaussianRegressor::new(feat, out_dim, 1e-8).unwrap();
        let (w0, l0) = reg.parameters();
        let (rows, cols) = (w0.nrows(), w0.ncols());
        let w = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5));
        let lv = DVector::from_fn(l0.len(), |_, _| rng.random_range(-2.5..0.5));
        reg.set_parameters(w, lv).unwrap();

        let batch = rng.random_range(8..=32usize);
        let zs: Vec<DVector<f64>> = (0..batch)
            .map(|_| DVector::from_fn(in_dim, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let ys: Vec<DVector<f64>> = (0..batch)
            .map(|_| DVector::from_fn(out_dim, |_, _| rng.random_range(-1.5..1.5)))
            .collect();
        let g = reg.nll_gradients(&zs, &ys).unwrap();

        let mut check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-8 {
                let rel = (analytic - fd).abs() / denom;
                worst_rel = worst_rel.max(rel);
                assert!(
                    rel <= 1e-5,
                    "model {i} {what}: analytic {analytic:.9e} vs fd {fd:.9e} (rel {rel:.2e})"
                );
            } else {
                assert!((analytic - fd).abs() <= 1e-10, "model {i} {what} near zero");
            }
        };

        let (w_ref, lv_ref) = reg.parameters();
        let (w_ref, lv_ref) = (w_ref.clone(), lv_ref.clone());
        for r in 0..rows {
            for c in 0..cols {
                let h = 1e-5 * (1.0 + w_ref[(r, c)].abs());
                let mut wp = w_ref.clone();
                wp[(r, c)] += h;
                let mut wm = w_ref.clone();
                wm[(r, c)] -= h;
                let mut probe = reg.clone();
                probe.set_parameters(wp, lv_ref.clone()).unwrap();
                let fp = probe.nll(&zs, &ys).unwrap();
                probe.set_parameters(wm, lv_ref.clone()).unwrap();
                let fm = probe.nll(&zs, &ys).unwrap();
                check(g.weights[(r, c)], (fp - fm) / (2.0 * h), "weight");
            }
        }
        for d in 0..lv_ref.len() {
            let h = 1e-5 * (1.0 + lv_ref[d].abs());
            let mut lp = lv_ref.clone();
            lp[d] += h;
            let mut lm = lv_ref.clone();
            lm[d] -= h;
            let mut probe = reg.clone();
            probe.set_parameters(w_ref.clone(), lp).unwrap();
            let fp = probe.nll(&zs, &ys).unwrap();
            probe.set_parameters(w_ref.clone(), lm).unwrap();
            let fm = probe.nll(&zs, &ys).unwrap();
            check(g.log_var[d], (fp - fm) / (2.0 * h), "log-variance");
        }
    }
    println!("PASS model gradients: worst relative error {worst_rel:.2e} over 20 models");
}

#[test]
fn a08_point_mass_robustness() {
    let t0 = Instant::now();
    let text = std::fs::read_to_string(repo_file("experiments/point_mass.toml")).unwrap();
    let cfg = RunConfig::from_toml_str(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.rho, 1.0, "shipped config must train at rho 1");

    // nominal-condition bar: one training run, twenty clean rollouts
    let seed = cfg.resolved_seeds()[0];
    let out = run::run_training_seed(&cfg, seed).unwrap();
    assert!(out.failure.is_none(), "training aborted: {:?}", out.failure);
    let clean = run::run_evaluation(&cfg, &out.models, seed, 20, PerturbationSpec::default(), None)
        .unwrap();
    assert!(
        clean.success_rate >= 0.80,
        "clean success {:.2} below 0.80",
        clean.success_rate
    );

    // robustness bar: paired seeds under the shipped perturbation
    let mut cfg_robust = cfg.clone();
    cfg_robust.seeds = vec![];
    cfg_robust.n_seeds = 20;
    let mut cfg_base = cfg_robust.clone();
    cfg_base.rho = 0.0;
    let perturb = cfg.eval_perturbation();

    let robust_outs = run::run_training(&cfg_robust).unwrap();
    let base_outs = run::run_training(&cfg_base).unwrap();
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut robust_mean = 0.0;
    let mut base_mean = 0.0;
    for (r, b) in robust_outs.iter().zip(&base_outs) {
        assert_eq!(r.seed, b.seed);
        let er = run::run_evaluation(&cfg_robust, &r.models, r.seed, 20, perturb, None).unwrap();
        let eb = run::run_evaluation(&cfg_base, &b.models, b.seed, 20, perturb, None).unwrap();
        robust_mean += er.success_rate / 20.0;
        base_mean += eb.success_rate / 20.0;
        if er.success_rate > eb.success_rate {
            wins += 1;
        } else if er.success_rate < eb.success_rate {
            losses += 1;
        }
    }
    let n = wins + losses;
    assert!(n > 0, "all 20 seed pairs tied; no robustness signal");
    let p = sign_test_p(wins, n);
    assert!(
        p < 0.1,
        "sign test p {p:.4} (wins {wins}, losses {losses}); perturbed means robust {robust_mean:.2} vs baseline {base_mean:.2}"
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 600.0, "end-to-end gate took {dt:.0}s, budget 600s");
    println!(
        "PASS point-mass robustness: clean {:.2}, perturbed {robust_mean:.2} vs {base_mean:.2}, sign test p {p:.1e} ({wins}W/{losses}L), {dt:.0}s",
        clean.success_rate
    );
}

#[test]
fn a09_conservatism_sweep_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    commands::sweep(&repo_file("experiments/sweep_rho.toml"), Some(&out_dir), false)
        .map_err(|e| e.to_string())
        .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("sweep_summary.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    let get = |row: &serde_json::Value, key: &str| row[key].as_f64().unwrap();

    let (mut best_rho, mut best_cost) = (f64::NAN, f64::INFINITY);
    for row in rows {
        let c = get(row, "normalized_cost");
        if c < best_cost {
            best_cost = c;
            best_rho = get(row, "rho");
        }
    }
    assert!(
        [0.5, 1.0, 5.0].contains(&best_rho),
        "cost minimum at rho {best_rho} (cost {best_cost:.3}); expected a moderate setting"
    );

    let rate_at = |rho: f64| {
        rows.iter()
            .find(|r| get(r, "rho") == rho)
            .map(|r| get(r, "safe_success_rate"))
            .unwrap()
    };
    let (s100, s1000, s2000) = (rate_at(100.0), rate_at(1000.0), rate_at(2000.0));
    assert!(
        s100 >= s1000 && s1000 >= s2000,
        "success must degrade monotonically at extreme conservatism: {s100} / {s1000} / {s2000}"
    );
    println!(
        "PASS conservatism sweep: cost minimum {best_cost:.3} at rho {best_rho}, extreme tail {s100:.2} >= {s1000:.2} >= {s2000:.2}"
    );
}

#[test]
fn a10_rerun_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.toml");
    std::fs::write(
        &cfg_path,
        "env = \"point_mass\"\nepisodes = 8\nmax_steps = 60\nn_seeds = 2\nrho = 1.0\n\
         mc_samples = 16\nn_candidates = 8\nrbf_count = 32\nn_eval_rollouts = 4\n",
    )
    .unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    commands::train(&cfg_path, Some(&dir_a)).map_err(|e| e.to_string()).unwrap();
    commands::train(&cfg_path, Some(&dir_b)).map_err(|e| e.to_string()).unwrap();

    let mut names: Vec<String> = std::fs::read_dir(&dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(
        names.iter().any(|n| n == "manifest.json"),
        "run dir is missing its manifest"
    );
    let mut compared = 0usize;
    for name in &names {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared += 1;
    }
    println!("PASS rerun determinism: {compared} files byte-identical across re-runs");
}
