//! Reference ways to pick the mixture: data-size weighting, proxy-accuracy
//! weighting, and full-gradient learning through backpropagation.

use crate::blend::{softmax_pullback, ExpertBank};
use crate::counters::Counters;
use crate::error::{GlueError, Result};
use crate::harness::evaluate::evaluate;
use crate::nn::{loss_and_grad, Batch, Dataset, LossKind};
use crate::zo::{mixture_loop, LearnOutcome, OptimConfig};

/// `αᵢ = nᵢ / Σⱼ nⱼ` from each expert's training-set size.
pub fn alpha_data_size(bank: &ExpertBank) -> Result<Vec<f64>> {
    let sizes = bank
        .meta()
        .iter()
        .enumerate()
        .map(|(i, m)| match m.train_size {
            Some(n) if n > 0 => Ok(n as f64),
            _ => Err(GlueError::Config(format!(
                "expert {i} has no positive training-set size"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_weights(&sizes))
}

fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mixture from per-expert accuracies, `αᵢ = Accᵢ / Σⱼ Accⱼ`.
///
/// Returns `(alpha, fell_back)`; all-zero accuracies fall back to uniform.
pub fn alpha_from_accuracies(acc: &[f64]) -> Result<(Vec<f64>, bool)> {
    if acc.is_empty() {
        return Err(GlueError::Config("no accuracies".into()));
    }
    if acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(GlueError::Config(format!("accuracies must lie in [0, 1]: {acc:?}")));
    }
    if acc.iter().all(|&a| a == 0.0) {
        return Ok((vec![1.0 / acc.len() as f64; acc.len()], true));
    }
    Ok((normalize_weights(acc), false))
}

/// Proxy-accuracy weighting result.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyWeights {
    pub alpha: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Every expert scored zero and the weights fell back to uniform.
    pub fell_back: bool,
}

/// Evaluate every expert on the proxy set (one forward sweep each) and
/// weight proportionally to accuracy.
pub fn alpha_proxy_accuracy(bank: &ExpertBank, proxy_set: &Dataset) -> Result<ProxyWeights> {
    if proxy_set.is_empty() {
        return Err(GlueError::Config("proxy set is empty".into()));
    }
    let accuracies = bank
        .experts()
        .iter()
        .map(|e| evaluate(bank.arch(), e, proxy_set).map(|m| m.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let (alpha, fell_back) = alpha_from_accuracies(&accuracies)?;
    Ok(ProxyWeights {
        alpha,
        accuracies,
        fell_back,
    })
}

/// Exact `∇_α L = [⟨∇θL, θ₁⟩, …, ⟨∇θL, θ_K⟩]` at `θ(α)`, with the loss.
///
/// One blend, one forward, one backward and `K` inner products.
pub fn loss_and_grad_alpha(
    bank: &ExpertBank,
    alpha: &[f64],
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<(f64, Vec<f64>)> {
    let theta = bank.blend(alpha, counters)?;
    let (loss, grad_theta) = loss_and_grad(bank.arch(), &theta, batch, kind, counters)?;
    Ok((loss, bank.project(&grad_theta, counters)?))
}

pub fn grad_alpha_full(
    bank: &ExpertBank,
    alpha: &[f64],
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<Vec<f64>> {
    loss_and_grad_alpha(bank, alpha, batch, kind, counters).map(|(_, g)| g)
}

/// Exact `∇_β L(softmax(β))` via backprop and the softmax pullback.
pub fn grad_beta_full(
    bank: &ExpertBank,
    alpha: &[f64],
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<Vec<f64>> {
    let g = grad_alpha_full(bank, alpha, batch, kind, counters)?;
    Ok(softmax_pullback(alpha, &g))
}

/// Learn `α` with exact gradients: same loop, initialization, Adam settings
/// and minibatch schedule as GLUE; one forward and one backward per step.
pub fn learn_alpha_fullgrad(
    bank: &ExpertBank,
    target_train_set: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    validation: Option<&Dataset>,
) -> Result<LearnOutcome> {
    let kind = LossKind::for_arch(bank.arch());
    let mut outcome = mixture_loop(
        bank,
        target_train_set,
        optim,
        seed,
        validation,
        "learn_alpha",
        |state, batch, counters| {
            let (loss, g) = loss_and_grad_alpha(bank, state.alpha(), batch, kind, counters)?;
            Ok((loss, softmax_pullback(state.alpha(), &g)))
        },
    )?;
    outcome.report.config = serde_json::json!({
        "method": "full_grad",
        "optim": optim,
        "seed": seed,
    });
    Ok(outcome)
}
