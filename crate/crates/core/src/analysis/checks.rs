//! Self-contained analysis runs with pass/fail verdicts, as emitted by
//! `glue analyze`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    bias_slope, fit_cost_model, grad_theta_norm, mc_estimator_moments, mc_variance, measure_costs, quartic,
    quartic_grad, variance_bound, McVariance,
};
use crate::baselines::learn_alpha_fullgrad;
use crate::blend::ExpertBank;
use crate::error::Result;
use crate::nn::{init_params, Activation, ArchSpec, Batch, Matrix, ParamVector};
use crate::zo::{learn_alpha_glue, OptimConfig, SpsaConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub inputs: serde_json::Value,
    pub outputs: serde_json::Value,
    pub checks: Vec<Check>,
}

impl AnalysisReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, pass: bool, detail: serde_json::Value) -> Check {
    Check {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// A small random bank: `K` perturbations of one shared MLP, a random
/// labelled batch and a random `β`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub bank: ExpertBank,
    pub batch: Batch,
    pub beta: Vec<f64>,
}

pub fn random_instance(seed: u64, k: usize) -> Result<Instance> {
    let arch = ArchSpec::mlp(&[6, 8, 3], Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_params(&arch, rng.random());
    let experts = (0..k)
        .map(|_| {
            ParamVector::new(
                base.as_slice()
                    .iter()
                    .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect();
    let bank = ExpertBank::from_params(arch, experts)?;
    let b = 16;
    let inputs = Matrix::new(b, 6, (0..b * 6).map(|_| rng.sample(StandardNormal)).collect())?;
    let labels = (0..b).map(|_| rng.random_range(0..3)).collect();
    let beta = (0..k).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Instance {
        bank,
        batch: Batch::classification(inputs, labels)?,
        beta,
    })
}

/// Fixed linear objective `gᵀx` with equal-magnitude alternating-sign
/// coefficients.
pub fn linear_gradient(k: usize) -> Vec<f64> {
    (0..k).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

/// Monte-Carlo moments of the estimator on the linear objective.
pub fn linear_moments(k: usize, m: usize, n_samples: usize, seed: u64) -> Result<McVariance> {
    let g = linear_gradient(k);
    let spsa = SpsaConfig {
        m,
        seed,
        ..SpsaConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = vec![0.0; k];
    let gc = g.clone();
    mc_estimator_moments(&x, &g, &spsa, n_samples, &mut rng, move |z| {
        Ok(z.iter().zip(&gc).map(|(a, b)| a * b).sum())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheckConfig {
    pub k: usize,
    pub m: usize,
    pub mu: f64,
    pub instances: usize,
    pub mc_samples: usize,
    pub linear_samples: usize,
    pub slack: f64,
    pub seed: u64,
}

impl Default for VarianceCheckConfig {
    fn default() -> Self {
        Self {
            k: 4,
            m: 1,
            mu: 1e-3,
            instances: 20,
            mc_samples: 2000,
            linear_samples: 100_000,
            slack: 1.1,
            seed: 0,
        }
    }
}

/// Linear-objective moment identities and the MSE bound on random MLPs.
pub fn variance_checks(cfg: &VarianceCheckConfig) -> Result<AnalysisReport> {
    let lin = linear_moments(cfg.k, 1, cfg.linear_samples, cfg.seed)?;
    let kf = cfg.k as f64;
    let mean_rel: Vec<f64> = lin
        .empirical_mean
        .iter()
        .zip(&lin.exact_grad)
        .map(|(e, g)| ((e - g / kf) / (g / kf)).abs())
        .collect();
    let mse_target = (kf - 1.0) / kf * lin.grad_norm_sq;
    let mse_rel = (lin.empirical_mse - mse_target).abs() / mse_target;

    let mut rows = Vec::with_capacity(cfg.instances);
    let mut within = 0;
    for i in 0..cfg.instances {
        let inst = random_instance(cfg.seed.wrapping_add(1000 + i as u64), cfg.k)?;
        let spsa = SpsaConfig {
            mu: cfg.mu,
            m: cfg.m,
            seed: cfg.seed.wrapping_add(i as u64),
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spsa.seed);
        let mc = mc_variance(&inst.bank, &inst.beta, &inst.batch, &spsa, cfg.mc_samples, &mut rng)?;
        let sigma = inst.bank.sigma_max();
        let gnorm = grad_theta_norm(&inst.bank, &inst.beta, &inst.batch)?;
        let bound = variance_bound(cfg.k, cfg.m, sigma, gnorm, cfg.mu)?.bound;
        let ok = mc.empirical_mse <= cfg.slack * bound;
        within += ok as usize;
        rows.push(json!({
            "instance": i,
            "empirical_mse": mc.empirical_mse,
            "bound": bound,
            "sigma_max": sigma,
            "grad_theta_norm": gnorm,
            "within": ok,
        }));
    }
    let fraction = within as f64 / cfg.instances.max(1) as f64;
    Ok(AnalysisReport {
        inputs: serde_json::to_value(cfg)?,
        outputs: json!({
            "linear": {
                "empirical_mean": lin.empirical_mean,
                "expected_mean": lin.exact_grad.iter().map(|g| g / kf).collect::<Vec<_>>(),
                "empirical_mse": lin.empirical_mse,
                "expected_mse": mse_target,
            },
            "instances": rows,
            "fraction_within_bound": fraction,
        }),
        checks: vec![
            check(
                "linear_mean_is_g_over_k",
                mean_rel.iter().all(|r| *r <= 0.02),
                json!({ "relative_error": mean_rel, "tolerance": 0.02 }),
            ),
            check(
                "linear_mse_is_(k-1)/k",
                mse_rel <= 0.03,
                json!({ "relative_error": mse_rel, "tolerance": 0.03 }),
            ),
            check(
                "mse_within_bound",
                fraction >= 0.95,
                json!({ "fraction": fraction, "required": 0.95, "slack": cfg.slack }),
            ),
        ],
    })
}

/// Quadratic exactness and the `μ²` bias order on the quartic.
pub fn bias_checks(mus: &[f64]) -> Result<AnalysisReport> {
    let x = [1.0];
    let u = [1.0];
    let quart = bias_slope(&x, &u, quartic_grad(&x)[0], mus, quartic)?;
    let slope = quart.slope.unwrap_or(f64::NAN);
    let ratios: Vec<f64> = mus
        .iter()
        .map(|&mu| {
            let err = |m: f64| {
                let d = ((1.0 + m).powi(4) - (1.0 - m).powi(4)) / (2.0 * m);
                (d - 4.0).abs()
            };
            err(mu) / err(mu / 2.0)
        })
        .collect();
    // L(z) = z₀² + 3z₀z₁ + 2z₁² − z₁ at (0.3, −0.7): ∇ = (2·0.3 − 2.1, 0.9 − 2.8 − 1).
    let quad = |z: &[f64]| z[0] * z[0] + 3.0 * z[0] * z[1] + 2.0 * z[1] * z[1] - z[1];
    let qx = [0.3, -0.7];
    let qg = [2.0 * 0.3 + 3.0 * -0.7, 3.0 * 0.3 + 4.0 * -0.7 - 1.0];
    let qu = [0.6, 0.8];
    let quad_fit = bias_slope(&qx, &qu, qg[0] * qu[0] + qg[1] * qu[1], &[1e-1, 1e-2, 1e-3], quad)?;
    let quad_max = quad_fit.errors.iter().cloned().fold(0.0, f64::max);
    Ok(AnalysisReport {
        inputs: json!({ "mus": mus, "quartic_point": x, "direction": u }),
        outputs: json!({
            "quartic": quart,
            "halving_ratios": ratios,
            "quadratic": quad_fit,
        }),
        checks: vec![
            check(
                "quartic_slope_in_[1.8,2.2]",
                (1.8..=2.2).contains(&slope),
                json!({ "slope": slope }),
            ),
            check(
                "halving_ratio_in_[3.5,4.5]",
                ratios.iter().all(|r| (3.5..=4.5).contains(r)),
                json!({ "ratios": ratios }),
            ),
            check(
                "quadratic_exact",
                quad_fit.exact && quad_max <= 1e-12,
                json!({ "max_error": quad_max }),
            ),
        ],
    })
}

/// Fit the cost model from timings on `bank`/`batch` and compare the gap
/// sign with measured per-step times of both learning loops.
pub fn cost_checks(bank: &ExpertBank, data: &Batch, optim: &OptimConfig, reps: usize) -> Result<AnalysisReport> {
    let batch = data.select(&(0..optim.batch_size.min(data.len())).collect::<Vec<_>>());
    let observations = measure_costs(bank, &batch, reps)?;
    let model = fit_cost_model(&observations)?;
    let breakdown = model.breakdown();
    let glue = learn_alpha_glue(bank, data, &SpsaConfig::default(), optim, 0, None)?;
    let full = learn_alpha_fullgrad(bank, data, optim, 0, None)?;
    let glue_ms = glue.report.ms_per_step("learn_alpha").unwrap_or(f64::NAN);
    let full_ms = full.report.ms_per_step("learn_alpha").unwrap_or(f64::NAN);
    let measured_gap = full_ms - glue_ms;
    Ok(AnalysisReport {
        inputs: json!({ "arch": bank.arch(), "k": bank.k(), "batch_size": batch.len(), "reps": reps, "steps": optim.steps }),
        outputs: json!({
            "observations": observations,
            "fitted": model,
            "predicted": breakdown,
            "measured_ms_per_step": { "glue": glue_ms, "full_grad": full_ms },
            "glue_counters": glue.report.counters,
            "full_grad_counters": full.report.counters,
        }),
        checks: vec![
            check(
                "gap_sign_matches_measurement",
                breakdown.gap.signum() == measured_gap.signum(),
                json!({ "predicted_gap_s": breakdown.gap, "measured_gap_ms": measured_gap }),
            ),
            check(
                "glue_has_no_backward",
                glue.report.counters.backwards == 0
                    && glue.report.counters.forwards == 2 * glue.report.steps.len() as u64,
                json!(glue.report.counters),
            ),
        ],
    })
}
