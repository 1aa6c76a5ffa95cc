//! Per-step cost model and Monte-Carlo checks of the two-point estimator.

pub mod checks;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::grad_beta_full;
use crate::blend::{softmax_map, ExpertBank};
use crate::counters::Counters;
use crate::error::{GlueError, Result};
use crate::nn::{dot, grad_params, Batch, LossKind};
use crate::zo::{two_point_estimate, BlendEvaluator, SpsaConfig};

/// Per-step cost ingredients. `gamma` is the backward/forward cost ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub forward: f64,
    pub gamma: f64,
    pub c_mix: f64,
    pub d_alpha: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            forward: 1.0,
            gamma: 2.0,
            c_mix: 0.0,
            d_alpha: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub t_full: f64,
    pub t_spsa: f64,
    /// `T_full − T_spsa = (γ − 1)F − C_mix + D_α`.
    pub gap: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.forward, self.c_mix, self.d_alpha]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && self.gamma >= 1.0
            && self.gamma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GlueError::Config(format!("invalid cost model {self:?}")))
        }
    }

    /// `T_full = (1+γ)F + C_mix + D_α`, `T_spsa = 2(F + C_mix)`.
    pub fn breakdown(&self) -> CostBreakdown {
        let t_full = (1.0 + self.gamma) * self.forward + self.c_mix + self.d_alpha;
        let t_spsa = 2.0 * (self.forward + self.c_mix);
        CostBreakdown {
            t_full,
            t_spsa,
            gap: (self.gamma - 1.0) * self.forward - self.c_mix + self.d_alpha,
        }
    }

    /// Blend cost at which one SPSA pair costs exactly one full-gradient step.
    pub fn break_even_c_mix(&self) -> f64 {
        (self.gamma - 1.0) * self.forward + self.d_alpha
    }

    /// One SPSA pair is cheaper than a full-gradient step.
    pub fn spsa_cheaper(&self) -> bool {
        self.c_mix < self.break_even_c_mix()
    }
}

pub fn cost_model(cm: &CostModel) -> Result<CostBreakdown> {
    cm.validate()?;
    Ok(cm.breakdown())
}

/// A timing observation: `time ≈ a·F + b·B + c·C_mix + d·D_α`, where
/// `B = γF` is the backward cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostObservation {
    pub forwards: f64,
    pub backwards: f64,
    pub blends: f64,
    pub inner_product_sweeps: f64,
    pub seconds: f64,
}

/// Least-squares fit of `(F, B, C_mix, D_α)` to timing observations;
/// `γ = B/F`.
pub fn fit_cost_model(observations: &[CostObservation]) -> Result<CostModel> {
    if observations.len() < 4 {
        return Err(GlueError::Config("need at least four timing observations".into()));
    }
    let mut ata = [[0.0; 4]; 4];
    let mut atb = [0.0; 4];
    for o in observations {
        let row = [o.forwards, o.backwards, o.blends, o.inner_product_sweeps];
        for i in 0..4 {
            atb[i] += row[i] * o.seconds;
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let x = solve4(ata, atb).ok_or_else(|| GlueError::Numeric("cost observations are rank deficient".into()))?;
    let forward = x[0].max(0.0);
    let backward = x[1].max(0.0);
    Ok(CostModel {
        forward,
        gamma: if forward > 0.0 {
            (backward / forward).max(1.0)
        } else {
            1.0
        },
        c_mix: x[2].max(0.0),
        d_alpha: x[3].max(0.0),
    })
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col];
        for row in col + 1..4 {
            let f = a[row][col] / pivot_row[col];
            for (v, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Time isolated operations and both per-step recipes on `batch`, each
/// repeated `reps` times, and return the observations.
pub fn measure_costs(bank: &ExpertBank, batch: &Batch, reps: usize) -> Result<Vec<CostObservation>> {
    let kind = LossKind::for_arch(bank.arch());
    let alpha = vec![1.0 / bank.k() as f64; bank.k()];
    let mut c = Counters::new();
    let theta = bank.blend(&alpha, &mut c)?;
    let mut buf = vec![0.0; bank.p()];
    let reps = reps.max(1);
    let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
        f()?;
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        Ok(t.elapsed().as_secs_f64() / reps as f64)
    };
    let obs = |f, b, m, d, seconds| CostObservation {
        forwards: f,
        backwards: b,
        blends: m,
        inner_product_sweeps: d,
        seconds,
    };
    let t_fwd = time(&mut || crate::nn::forward(bank.arch(), &theta, &batch.inputs, &mut c).map(|_| ()))?;
    let t_grad = time(&mut || grad_params(bank.arch(), &theta, batch, kind, &mut c).map(|_| ()))?;
    let t_mix = time(&mut || bank.blend_into(&alpha, &mut buf, &mut c))?;
    let t_dot = time(&mut || bank.project(&theta, &mut c).map(|_| ()))?;
    let mut eval = BlendEvaluator::new(bank, kind);
    let t_spsa = time(&mut || {
        eval.loss_at_alpha(&alpha, batch, &mut c)?;
        eval.loss_at_alpha(&alpha, batch, &mut c).map(|_| ())
    })?;
    let t_full = time(&mut || crate::baselines::grad_alpha_full(bank, &alpha, batch, kind, &mut c).map(|_| ()))?;
    Ok(vec![
        obs(1.0, 0.0, 0.0, 0.0, t_fwd),
        obs(1.0, 1.0, 0.0, 0.0, t_grad),
        obs(0.0, 0.0, 1.0, 0.0, t_mix),
        obs(0.0, 0.0, 0.0, 1.0, t_dot),
        obs(2.0, 0.0, 2.0, 0.0, t_spsa),
        obs(1.0, 1.0, 1.0, 1.0, t_full),
    ])
}

/// Leading term of the MSE bound, `((K−1)/(mK))·σ_max(Θ)²·‖∇θL‖²`, and the
/// `μ²` scale of the unmodelled remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBound {
    pub bound: f64,
    pub mu_squared: f64,
}

pub fn variance_bound(k: usize, m: usize, sigma_max: f64, grad_theta_norm: f64, mu: f64) -> Result<VarianceBound> {
    if k == 0 || m == 0 {
        return Err(GlueError::Config("K and m must be at least 1".into()));
    }
    let (k, m) = (k as f64, m as f64);
    Ok(VarianceBound {
        bound: (k - 1.0) / (m * k) * sigma_max * sigma_max * grad_theta_norm * grad_theta_norm,
        mu_squared: mu * mu,
    })
}

/// Closed-form `E‖ḡ − g‖²` of the `m`-direction unit-direction estimator
/// on a linear objective.
///
/// With scale `s` (1, or `K` under dimension scaling) the estimate has mean
/// `(s/K)·g` and total variance `s²(K−1)/(mK²)·‖g‖²`, so the MSE is their
/// sum with the squared bias `(1 − s/K)²‖g‖²`. For `m = 1, s = 1` this is
/// `((K−1)/K)·‖g‖²`.
pub fn estimator_mse_closed_form(k: usize, m: usize, dimension_scaling: bool, grad_norm_sq: f64) -> f64 {
    let (kf, mf) = (k as f64, m as f64);
    let s = if dimension_scaling { kf } else { 1.0 };
    let variance = s * s * (kf - 1.0) / (mf * kf * kf);
    let bias = (1.0 - s / kf).powi(2);
    (variance + bias) * grad_norm_sq
}

/// Monte-Carlo moments of the two-point estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McVariance {
    pub n_samples: usize,
    pub empirical_mean: Vec<f64>,
    /// Mean of `‖ĝ − g‖²`.
    pub empirical_mse: f64,
    pub exact_grad: Vec<f64>,
    pub grad_norm_sq: f64,
    /// `((K−1)/(mK))·‖g‖²`.
    pub reference_mse: f64,
    /// Closed form for the configured estimator, see
    /// [`estimator_mse_closed_form`].
    pub closed_form_mse: f64,
}

/// Draw `n_samples` independent estimates at `x` and compare them with the
/// exact gradient `g`.
pub fn mc_estimator_moments<R, F>(
    x: &[f64],
    g: &[f64],
    spsa: &SpsaConfig,
    n_samples: usize,
    rng: &mut R,
    mut objective: F,
) -> Result<McVariance>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
{
    if n_samples < 1000 {
        return Err(GlueError::Config("need at least 1000 Monte-Carlo samples".into()));
    }
    if g.len() != x.len() {
        return Err(GlueError::Shape("gradient length differs from point".into()));
    }
    let k = x.len();
    let mut mean = vec![0.0; k];
    let mut mse = 0.0;
    for _ in 0..n_samples {
        let est = two_point_estimate(x, spsa, rng, &mut objective)?;
        for (m, e) in mean.iter_mut().zip(&est.grad) {
            *m += e;
        }
        mse += est.grad.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let n = n_samples as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    let grad_norm_sq = dot(g, g);
    let (kf, mf) = (k as f64, spsa.m as f64);
    Ok(McVariance {
        n_samples,
        empirical_mean: mean,
        empirical_mse: mse / n,
        exact_grad: g.to_vec(),
        grad_norm_sq,
        reference_mse: (kf - 1.0) / (mf * kf) * grad_norm_sq,
        closed_form_mse: estimator_mse_closed_form(k, spsa.m, spsa.dimension_scaling, grad_norm_sq),
    })
}

/// Monte-Carlo MSE of the β-space estimator on a real bank, against the
/// exact β-gradient from backpropagation.
pub fn mc_variance<R: Rng + ?Sized>(
    bank: &ExpertBank,
    beta: &[f64],
    batch: &Batch,
    spsa: &SpsaConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<McVariance> {
    let kind = LossKind::for_arch(bank.arch());
    let mut counters = Counters::new();
    let alpha = softmax_map(beta)?;
    let g = grad_beta_full(bank, &alpha, batch, kind, &mut counters)?;
    let mut eval = BlendEvaluator::new(bank, kind);
    mc_estimator_moments(beta, &g, spsa, n_samples, rng, |b| {
        eval.loss_at_beta(b, batch, &mut counters)
    })
}

/// `‖∇θL‖` at `θ(softmax(β))`.
pub fn grad_theta_norm(bank: &ExpertBank, beta: &[f64], batch: &Batch) -> Result<f64> {
    let mut c = Counters::new();
    let theta = bank.blend(&softmax_map(beta)?, &mut c)?;
    let g = grad_params(bank.arch(), &theta, batch, LossKind::for_arch(bank.arch()), &mut c)?;
    Ok(g.norm())
}

/// Bias of the symmetric difference as a function of `μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFit {
    pub mus: Vec<f64>,
    /// `|d(μ) − gᵀu|` per `μ`.
    pub errors: Vec<f64>,
    /// Log-log least-squares slope; `None` when the difference is exact.
    pub slope: Option<f64>,
    pub exact: bool,
}

/// Fit the order of the symmetric-difference bias along a fixed direction.
///
/// `directional` is the exact `gᵀu`. Errors all below `1e-12` are reported
/// as exact with no slope.
pub fn bias_slope<F>(x: &[f64], u: &[f64], directional: f64, mus: &[f64], mut objective: F) -> Result<BiasFit>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut distinct = mus.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || distinct.iter().any(|&m| m <= 0.0) {
        return Err(GlueError::Config("need at least three distinct positive radii".into()));
    }
    if (distinct[distinct.len() - 1] / distinct[0]).log10() < 2.0 - 1e-9 {
        return Err(GlueError::Config("radii must span at least two decades".into()));
    }
    let mut errors = Vec::with_capacity(mus.len());
    for &mu in mus {
        let plus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + mu * b).collect();
        let minus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - mu * b).collect();
        let d = crate::zo::directional_diff(objective(&plus), objective(&minus), mu)?;
        errors.push((d - directional).abs());
    }
    if errors.iter().all(|&e| e < 1e-12) {
        return Ok(BiasFit {
            mus: mus.to_vec(),
            errors,
            slope: None,
            exact: true,
        });
    }
    let pts: Vec<(f64, f64)> = mus
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(m, e)| (m.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(GlueError::Numeric("too few non-zero errors to fit a slope".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(BiasFit {
        mus: mus.to_vec(),
        errors,
        slope: Some(sxy / sxx),
        exact: false,
    })
}

/// `L(z) = Σ zᵢ⁴`, the canonical objective with a non-zero third derivative.
pub fn quartic(z: &[f64]) -> f64 {
    z.iter().map(|v| v.powi(4)).sum()
}

pub fn quartic_grad(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| 4.0 * v.powi(3)).collect()
}
