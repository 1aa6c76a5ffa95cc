//! Expert bank, parameter blending and the softmax reparameterization.

use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{ensure_finite, GlueError, Result};
use crate::nn::{dot, ArchSpec, ParamVector};

/// Per-expert metadata used by the heuristic baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExpertMeta {
    /// Size of the expert's training split.
    pub train_size: Option<u64>,
    /// Accuracy on the target-domain proxy set, when measured.
    pub proxy_accuracy: Option<f64>,
}

/// `K` same-architecture experts. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    arch: ArchSpec,
    experts: Vec<ParamVector>,
    meta: Vec<ExpertMeta>,
}

impl ExpertBank {
    pub fn new(arch: ArchSpec, experts: Vec<ParamVector>, meta: Vec<ExpertMeta>) -> Result<Self> {
        arch.validate()?;
        if experts.is_empty() {
            return Err(GlueError::Config("expert bank needs at least one expert".into()));
        }
        if meta.len() != experts.len() {
            return Err(GlueError::Shape(format!(
                "{} experts but {} metadata entries",
                experts.len(),
                meta.len()
            )));
        }
        for (i, e) in experts.iter().enumerate() {
            arch.check_params(e)
                .map_err(|err| GlueError::Shape(format!("expert {i}: {err}")))?;
            ensure_finite(e.as_slice(), &format!("expert {i}"))?;
        }
        Ok(Self { arch, experts, meta })
    }

    /// Bank without metadata.
    pub fn from_params(arch: ArchSpec, experts: Vec<ParamVector>) -> Result<Self> {
        let meta = vec![ExpertMeta::default(); experts.len()];
        Self::new(arch, experts, meta)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn experts(&self) -> &[ParamVector] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &ParamVector {
        &self.experts[i]
    }

    pub fn meta(&self) -> &[ExpertMeta] {
        &self.meta
    }

    pub fn with_meta(mut self, meta: Vec<ExpertMeta>) -> Result<Self> {
        if meta.len() != self.experts.len() {
            return Err(GlueError::Shape("metadata length must equal K".into()));
        }
        self.meta = meta;
        Ok(self)
    }

    /// Number of experts `K`.
    pub fn k(&self) -> usize {
        self.experts.len()
    }

    /// Parameter dimension `P`.
    pub fn p(&self) -> usize {
        self.arch.param_count()
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.k() {
            return Err(GlueError::Shape(format!(
                "mixture has {} coefficients, bank has {} experts",
                alpha.len(),
                self.k()
            )));
        }
        ensure_finite(alpha, "alpha")
    }

    /// `θ(α) = Σ αᵢ θᵢ` written into a caller-owned buffer of length `P`.
    pub fn blend_into(&self, alpha: &[f64], out: &mut [f64], counters: &mut Counters) -> Result<()> {
        self.check_alpha(alpha)?;
        if out.len() != self.p() {
            return Err(GlueError::Shape("blend buffer length must equal P".into()));
        }
        counters.blends += 1;
        out.fill(0.0);
        for (a, theta) in alpha.iter().zip(&self.experts) {
            if *a == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(theta.as_slice()) {
                *o += a * t;
            }
        }
        Ok(())
    }

    /// `θ(α) = Σ αᵢ θᵢ`.
    pub fn blend(&self, alpha: &[f64], counters: &mut Counters) -> Result<ParamVector> {
        let mut out = vec![0.0; self.p()];
        self.blend_into(alpha, &mut out, counters)?;
        Ok(ParamVector::new(out))
    }

    /// `[⟨v, θ₁⟩, …, ⟨v, θ_K⟩] = Θᵀ v`. Counts `K` inner products.
    pub fn project(&self, v: &ParamVector, counters: &mut Counters) -> Result<Vec<f64>> {
        self.arch.check_params(v)?;
        counters.inner_products += self.k() as u64;
        Ok(self.experts.iter().map(|e| e.dot(v)).collect())
    }

    /// `K × K` Gram matrix `ΘᵀΘ`, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.k();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = self.experts[i].dot(&self.experts[j]);
                g[i * k + j] = v;
                g[j * k + i] = v;
            }
        }
        g
    }

    /// Largest singular value of `Θ = [θ₁ … θ_K]`.
    ///
    /// Power iteration on the Gram matrix; stops at relative change `1e-8`
    /// or after 1000 iterations.
    pub fn sigma_max(&self) -> f64 {
        let k = self.k();
        let gram = self.gram();
        let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
        if trace == 0.0 {
            return 0.0;
        }
        // Start from the diagonal so the iterate cannot be orthogonal to the
        // top eigenvector of a PSD matrix with a positive trace.
        let mut v: Vec<f64> = (0..k).map(|i| gram[i * k + i].sqrt() + 1.0 / (i + 1) as f64).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w: Vec<f64> = (0..k).map(|i| dot(&gram[i * k..(i + 1) * k], &v)).collect();
            let next = dot(&v, &w);
            let norm = normalize(&mut w);
            if norm == 0.0 {
                break;
            }
            v = w;
            let converged = (next - lambda).abs() <= 1e-8 * next.abs().max(f64::MIN_POSITIVE);
            lambda = next;
            if converged {
                break;
            }
        }
        // Rayleigh quotient at the final iterate.
        let gv: Vec<f64> = (0..k).map(|i| dot(&gram[i * k..(i + 1) * k], &v)).collect();
        dot(&v, &gv).max(0.0).sqrt()
    }

    /// Per-coordinate `(min, max)` over experts: the convex-hull envelope.
    pub fn envelope(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.experts[0].as_slice().to_vec();
        let mut hi = lo.clone();
        for e in &self.experts[1..] {
            for (p, &v) in e.as_slice().iter().enumerate() {
                lo[p] = lo[p].min(v);
                hi[p] = hi[p].max(v);
            }
        }
        (lo, hi)
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `αᵢ = exp(βᵢ − max β) / Σⱼ exp(βⱼ − max β)`.
pub fn softmax_map(beta: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(beta, "beta")?;
    if beta.is_empty() {
        return Err(GlueError::Shape("empty coefficient vector".into()));
    }
    let max = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = beta.iter().map(|b| (b - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Chain rule through softmax: `∂L/∂βᵢ = αᵢ (∂L/∂αᵢ − ⟨α, ∂L/∂α⟩)`.
pub fn softmax_pullback(alpha: &[f64], grad_alpha: &[f64]) -> Vec<f64> {
    let mean = dot(alpha, grad_alpha);
    alpha.iter().zip(grad_alpha).map(|(a, g)| a * (g - mean)).collect()
}

/// Optimizer state for the mixture: `β` is the source of truth and `α` is
/// always recomputed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    pub(crate) opt_m1: Vec<f64>,
    pub(crate) opt_m2: Vec<f64>,
    step: u64,
}

impl MixtureState {
    /// `β = 0`, hence `α = (1/K)·1`.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_beta(vec![0.0; k])
    }

    pub fn from_beta(beta: Vec<f64>) -> Result<Self> {
        let alpha = softmax_map(&beta)?;
        let k = beta.len();
        Ok(Self {
            beta,
            alpha,
            opt_m1: vec![0.0; k],
            opt_m2: vec![0.0; k],
            step: 0,
        })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// Adam step on `β` with the given surrogate gradient, then refresh `α`.
    pub(crate) fn apply_adam(&mut self, cfg: &crate::adam::AdamConfig, grad_beta: &[f64]) -> Result<()> {
        ensure_finite(grad_beta, "beta gradient")?;
        self.step += 1;
        crate::adam::adam_update(
            cfg,
            &mut self.beta,
            grad_beta,
            &mut self.opt_m1,
            &mut self.opt_m2,
            self.step,
        );
        self.alpha = softmax_map(&self.beta)?;
        Ok(())
    }
}
