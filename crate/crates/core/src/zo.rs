//! Forward-only mixture learning with two-point SPSA.
//!
//! Probes are taken in the unconstrained `β` space and mapped to the simplex
//! through softmax, so every probed blend stays inside the experts' convex
//! hull. Nothing in this module runs a backward pass.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::blend::{softmax_map, ExpertBank, MixtureState};
use crate::counters::Counters;
use crate::error::{GlueError, Result};
use crate::nn::{forward, loss_eval, Batch, Dataset, LossKind, MinibatchStream, ParamVector};
use crate::report::{RunReport, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionDistribution {
    /// I.i.d. standard normal entries, normalized to unit length.
    #[default]
    GaussianSphere,
    /// Entries `±1/√K`.
    RademacherNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpsaConfig {
    /// Perturbation radius.
    pub mu: f64,
    /// Directions averaged per step.
    pub m: usize,
    pub distribution: DirectionDistribution,
    pub seed: u64,
    /// Multiply the estimate by `K`, which makes the unit-sphere estimator
    /// unbiased for linear objectives.
    pub dimension_scaling: bool,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        Self {
            mu: 1e-2,
            m: 1,
            distribution: DirectionDistribution::GaussianSphere,
            seed: 0,
            dimension_scaling: false,
        }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(GlueError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.m == 0 {
            return Err(GlueError::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stop once the validation loss has not improved by `min_delta` for
/// `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            eval_every: 25,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

/// Optimizer settings for the mixture coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub plateau: Option<PlateauConfig>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::mixture_default();
        Self {
            eta: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            steps: 500,
            batch_size: 64,
            plateau: None,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(GlueError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Random unit direction in `R^K`.
pub fn sample_direction<R: Rng + ?Sized>(
    k: usize,
    rng: &mut R,
    distribution: DirectionDistribution,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(GlueError::Config("direction dimension must be positive".into()));
    }
    match distribution {
        DirectionDistribution::GaussianSphere => loop {
            let mut u: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                u.iter_mut().for_each(|v| *v /= norm);
                return Ok(u);
            }
        },
        DirectionDistribution::RademacherNormalized => {
            let s = 1.0 / (k as f64).sqrt();
            Ok((0..k).map(|_| if rng.random::<bool>() { s } else { -s }).collect())
        }
    }
}

/// `d = (L₊ − L₋) / (2μ)`.
pub fn directional_diff(loss_plus: f64, loss_minus: f64, mu: f64) -> Result<f64> {
    if mu <= 0.0 || mu.is_nan() {
        return Err(GlueError::Config(format!("mu must be positive, got {mu}")));
    }
    Ok((loss_plus - loss_minus) / (2.0 * mu))
}

/// Result of one averaged two-point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub grad: Vec<f64>,
    /// Mean of all probed losses; a free training-loss readout.
    pub mean_probe_loss: f64,
}

/// Two-point estimate `(1/m) Σᵣ dᵣ uᵣ` of the gradient of `objective` at
/// `x`, optionally scaled by `K = x.len()`.
///
/// `objective` is called exactly `2m` times.
pub fn two_point_estimate<R, F>(x: &[f64], spsa: &SpsaConfig, rng: &mut R, mut objective: F) -> Result<Estimate>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
{
    spsa.validate()?;
    let k = x.len();
    let mut grad = vec![0.0; k];
    let mut probe = vec![0.0; k];
    let mut loss_sum = 0.0;
    for _ in 0..spsa.m {
        let u = sample_direction(k, rng, spsa.distribution)?;
        for i in 0..k {
            probe[i] = x[i] + spsa.mu * u[i];
        }
        let plus = objective(&probe)?;
        for i in 0..k {
            probe[i] = x[i] - spsa.mu * u[i];
        }
        let minus = objective(&probe)?;
        let d = directional_diff(plus, minus, spsa.mu)?;
        for i in 0..k {
            grad[i] += d * u[i];
        }
        loss_sum += plus + minus;
    }
    let scale = if spsa.dimension_scaling { k as f64 } else { 1.0 } / spsa.m as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(Estimate {
        grad,
        mean_probe_loss: loss_sum / (2 * spsa.m) as f64,
    })
}

/// Loss of blended models on a batch, reusing one parameter buffer across
/// probes.
pub struct BlendEvaluator<'a> {
    bank: &'a ExpertBank,
    kind: LossKind,
    buffer: ParamVector,
}

impl<'a> BlendEvaluator<'a> {
    pub fn new(bank: &'a ExpertBank, kind: LossKind) -> Self {
        Self {
            bank,
            kind,
            buffer: ParamVector::zeros(bank.p()),
        }
    }

    pub fn loss_at_alpha(&mut self, alpha: &[f64], batch: &Batch, counters: &mut Counters) -> Result<f64> {
        self.bank.blend_into(alpha, self.buffer.as_mut_slice(), counters)?;
        let preds = forward(self.bank.arch(), &self.buffer, &batch.inputs, counters)?;
        loss_eval(&preds, &batch.targets, self.kind)
    }

    pub fn loss_at_beta(&mut self, beta: &[f64], batch: &Batch, counters: &mut Counters) -> Result<f64> {
        let alpha = softmax_map(beta)?;
        self.loss_at_alpha(&alpha, batch, counters)
    }
}

/// `(L₊, L₋)` at `softmax(β ± μu)` on one shared minibatch: two blends,
/// two forwards, no backward.
#[allow(clippy::too_many_arguments)]
pub fn two_point_eval(
    bank: &ExpertBank,
    beta: &[f64],
    u: &[f64],
    mu: f64,
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<(f64, f64)> {
    if u.len() != beta.len() {
        return Err(GlueError::Shape("direction and beta lengths differ".into()));
    }
    let mut eval = BlendEvaluator::new(bank, kind);
    let plus: Vec<f64> = beta.iter().zip(u).map(|(b, u)| b + mu * u).collect();
    let minus: Vec<f64> = beta.iter().zip(u).map(|(b, u)| b - mu * u).collect();
    let lp = eval.loss_at_beta(&plus, batch, counters)?;
    let lm = eval.loss_at_beta(&minus, batch, counters)?;
    Ok((lp, lm))
}

/// SPSA estimate of `∇_β L(softmax(β))` on a batch; `2m` forward passes.
pub fn estimate_gradient<R: Rng + ?Sized>(
    bank: &ExpertBank,
    beta: &[f64],
    batch: &Batch,
    spsa: &SpsaConfig,
    kind: LossKind,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<Estimate> {
    if beta.len() != bank.k() {
        return Err(GlueError::Shape("beta length must equal K".into()));
    }
    let mut eval = BlendEvaluator::new(bank, kind);
    two_point_estimate(beta, spsa, rng, |b| eval.loss_at_beta(b, batch, counters))
}

/// One GLUE update: estimate, then Adam on `β`. Returns the estimate.
#[allow(clippy::too_many_arguments)]
pub fn spsa_step<R: Rng + ?Sized>(
    state: &mut MixtureState,
    bank: &ExpertBank,
    batch: &Batch,
    spsa: &SpsaConfig,
    optim: &OptimConfig,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<Estimate> {
    let kind = LossKind::for_arch(bank.arch());
    let est = estimate_gradient(bank, state.beta(), batch, spsa, kind, rng, counters)?;
    state.apply_adam(&optim.adam(), &est.grad)?;
    Ok(est)
}

/// Learned mixture and its blended prior.
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub alpha: Vec<f64>,
    pub theta: ParamVector,
    pub state: MixtureState,
    pub report: RunReport,
}

/// Shared minibatch loop for the learned-mixture configurations.
///
/// `gradient(state, batch, counters)` returns `(train_loss, ∇_β surrogate)`.
/// Starts from uniform `α`, draws minibatches from fixed-seed shuffled
/// epochs and never resets the Adam moments.
pub(crate) fn mixture_loop<G>(
    bank: &ExpertBank,
    data: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    validation: Option<&Dataset>,
    phase: &str,
    mut gradient: G,
) -> Result<LearnOutcome>
where
    G: FnMut(&MixtureState, &Batch, &mut Counters) -> Result<(f64, Vec<f64>)>,
{
    if data.is_empty() {
        return Err(GlueError::Config("target training set is empty".into()));
    }
    optim.validate()?;
    let mut state = MixtureState::uniform(bank.k())?;
    let mut report = RunReport::default();
    let mut counters = Counters::new();
    let mut stream = MinibatchStream::new(data.len(), optim.batch_size, seed)?;
    let kind = LossKind::for_arch(bank.arch());
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let started = Instant::now();

    for _ in 0..optim.steps {
        let batch = data.select(&stream.next_indices());
        let (loss, grad_beta) = gradient(&state, &batch, &mut counters)?;
        state.apply_adam(&optim.adam(), &grad_beta)?;
        report.steps.push(StepRecord {
            step: state.step(),
            train_loss: loss,
            alpha: state.alpha().to_vec(),
            counters,
        });

        if let (Some(plateau), Some(val)) = (optim.plateau, validation) {
            if plateau.eval_every > 0 && state.step() % plateau.eval_every as u64 == 0 {
                // Validation probes are bookkeeping, not part of the learning cost.
                let mut scratch = Counters::new();
                let val_loss = BlendEvaluator::new(bank, kind).loss_at_alpha(state.alpha(), val, &mut scratch)?;
                if val_loss < best_val - plateau.min_delta {
                    best_val = val_loss;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= plateau.patience {
                        report.stopped_early_at = Some(state.step());
                        break;
                    }
                }
            }
        }
    }
    report
        .wall_ms
        .insert(phase.to_string(), started.elapsed().as_secs_f64() * 1e3);
    report.counters = counters;

    let alpha = state.alpha().to_vec();
    // The final blend is bookkeeping and is not counted against the run.
    let theta = bank.blend(&alpha, &mut Counters::new())?;
    Ok(LearnOutcome {
        alpha,
        theta,
        state,
        report,
    })
}

/// GLUE: learn `α` by two-point SPSA on `β`, starting from uniform `α`.
///
/// Minibatches follow `seed`; directions follow `spsa.seed`. Uses exactly
/// `2·m` forward passes and no backward pass per step.
pub fn learn_alpha_glue(
    bank: &ExpertBank,
    target_train_set: &Dataset,
    spsa: &SpsaConfig,
    optim: &OptimConfig,
    seed: u64,
    validation: Option<&Dataset>,
) -> Result<LearnOutcome> {
    spsa.validate()?;
    let kind = LossKind::for_arch(bank.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(spsa.seed);
    let mut eval = BlendEvaluator::new(bank, kind);
    let mut outcome = mixture_loop(
        bank,
        target_train_set,
        optim,
        seed,
        validation,
        "learn_alpha",
        |state, batch, counters| {
            let est = two_point_estimate(state.beta(), spsa, &mut rng, |b| eval.loss_at_beta(b, batch, counters))?;
            Ok((est.mean_probe_loss, est.grad))
        },
    )?;
    outcome.report.config = serde_json::json!({
        "method": "glue",
        "spsa": spsa,
        "optim": optim,
        "seed": seed,
    });
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ArchSpec, Matrix};

    #[test]
    fn one_dimensional_directions_are_plus_or_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dist in [
            DirectionDistribution::GaussianSphere,
            DirectionDistribution::RademacherNormalized,
        ] {
            for _ in 0..20 {
                let u = sample_direction(1, &mut rng, dist).unwrap();
                assert!(u[0] == 1.0 || u[0] == -1.0, "{u:?}");
            }
        }
    }

    #[test]
    fn rademacher_entries_are_half_for_k4() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = sample_direction(4, &mut rng, DirectionDistribution::RademacherNormalized).unwrap();
            assert!(u.iter().all(|&v| v == 0.5 || v == -0.5));
        }
    }

    #[test]
    fn zero_dimension_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_direction(0, &mut rng, DirectionDistribution::GaussianSphere),
            Err(GlueError::Config(_))
        ));
    }

    #[test]
    fn directional_diff_examples() {
        assert!((directional_diff(1.2, 1.0, 0.1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(directional_diff(0.7, 0.7, 0.3).unwrap(), 0.0);
        assert!(matches!(directional_diff(1.0, 0.0, 0.0), Err(GlueError::Config(_))));
        assert!(matches!(directional_diff(1.0, 0.0, -1.0), Err(GlueError::Config(_))));
    }

    #[test]
    fn quadratic_directional_diff_is_exact() {
        // L(z) = ‖z‖² at z = (1, 0) along u = (1, 0).
        let f = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>();
        let mu: f64 = 0.01;
        let d = directional_diff(f(&[1.0 + mu, 0.0]), f(&[1.0 - mu, 0.0]), mu).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_linear_estimate_is_exact() {
        let spsa = SpsaConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let est = two_point_estimate(&[0.4], &spsa, &mut rng, |x| Ok(3.0 * x[0])).unwrap();
            assert!((est.grad[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_called_two_m_times() {
        let spsa = SpsaConfig {
            m: 7,
            ..SpsaConfig::default()
        };
        let mut calls = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        two_point_estimate(&[0.0; 3], &spsa, &mut rng, |_| {
            calls += 1;
            Ok(0.0)
        })
        .unwrap();
        assert_eq!(calls, 14);
    }

    fn identical_bank() -> (ExpertBank, Batch) {
        let arch = ArchSpec::mlp(&[2, 3, 2], Activation::Tanh).unwrap();
        let theta = crate::nn::init_params(&arch, 4);
        let bank = ExpertBank::from_params(arch, vec![theta.clone(), theta.clone(), theta]).unwrap();
        let batch = Batch::classification(
            Matrix::new(3, 2, vec![0.1, 0.2, -0.3, 0.9, 1.0, -1.0]).unwrap(),
            vec![0, 1, 1],
        )
        .unwrap();
        (bank, batch)
    }

    #[test]
    fn identical_experts_give_equal_probe_losses() {
        let (bank, batch) = identical_bank();
        let mut c = Counters::new();
        let (lp, lm) = two_point_eval(
            &bank,
            &[0.1, -0.4, 0.0],
            &[0.6, 0.0, 0.8],
            0.05,
            &batch,
            LossKind::CrossEntropy,
            &mut c,
        )
        .unwrap();
        assert!((lp - lm).abs() < 1e-15);
        assert_eq!((c.forwards, c.backwards, c.blends), (2, 0, 2));
    }

    #[test]
    fn identical_experts_leave_state_unchanged() {
        let (bank, batch) = identical_bank();
        let mut state = MixtureState::uniform(3).unwrap();
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = Counters::new();
        let est = spsa_step(
            &mut state,
            &bank,
            &batch,
            &SpsaConfig::default(),
            &OptimConfig::default(),
            &mut rng,
            &mut c,
        )
        .unwrap();
        // Blends of identical experts can differ in the last ulp, so the
        // estimate is zero only up to rounding over 2μ.
        assert!(est.grad.iter().all(|g| g.abs() < 1e-12));
        assert!(state
            .beta()
            .iter()
            .zip(before.beta())
            .all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(c.backwards, 0);
    }

    #[test]
    fn single_expert_mixture_is_the_point_simplex() {
        let arch = ArchSpec::mlp(&[2, 2], Activation::Relu).unwrap();
        let bank = ExpertBank::from_params(arch.clone(), vec![crate::nn::init_params(&arch, 1)]).unwrap();
        let data = Batch::classification(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0, 1]).unwrap();
        let out = learn_alpha_glue(
            &bank,
            &data,
            &SpsaConfig::default(),
            &OptimConfig {
                steps: 10,
                ..OptimConfig::default()
            },
            1,
            None,
        )
        .unwrap();
        assert_eq!(out.alpha, vec![1.0]);
    }

    #[test]
    fn empty_target_set_is_config_error() {
        let (bank, _) = identical_bank();
        let empty = Batch::classification(Matrix::zeros(0, 2), vec![]).unwrap();
        let err = learn_alpha_glue(&bank, &empty, &SpsaConfig::default(), &OptimConfig::default(), 1, None);
        assert!(matches!(err, Err(GlueError::Config(_))));
    }
}
