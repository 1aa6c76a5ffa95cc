//! C ABI over `glue-core`.
//!
//! Every entry point returns a [`GlueStatus`]. On failure the message is
//! available from [`glue_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they are reported as [`GlueStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use glue_core::analysis::{cost_model, variance_bound, CostModel};
use glue_core::baselines::{alpha_data_size, alpha_proxy_accuracy, learn_alpha_fullgrad};
use glue_core::harness::{evaluate, load_checkpoint};
use glue_core::nn::Activation;
use glue_core::{
    learn_alpha_glue, softmax_map, ArchSpec, Batch, Counters, ErrorClass, ExpertBank, ExpertMeta, GlueError, Matrix,
    OptimConfig, ParamVector, SpsaConfig,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlueStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlueActivation {
    Relu = 0,
    Tanh = 1,
}

/// How the mixture coefficients are determined.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlueMethod {
    /// Proportional to each expert's training-set size.
    DataSize = 1,
    /// Proportional to accuracy on the given set.
    Proxy = 2,
    /// Adam on exact gradients.
    FullGrad = 3,
    /// Adam on two-point SPSA estimates.
    Glue = 4,
}

/// Settings for the learned methods. Ignored by the heuristics.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlueLearnOptions {
    pub mu: f64,
    pub directions: usize,
    pub dimension_scaling: bool,
    pub direction_seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Minibatch order.
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GlueCounters {
    pub forwards: u64,
    pub backwards: u64,
    pub blends: u64,
    pub inner_products: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlueCostBreakdown {
    pub t_full: f64,
    pub t_spsa: f64,
    pub gap: f64,
}

/// `K` experts sharing one architecture.
pub struct GlueBank(ExpertBank);

/// Labelled classification data.
pub struct GlueDataset(Batch);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Null(&'static str),
    Core(GlueError),
}

impl From<GlueError> for Failure {
    fn from(e: GlueError) -> Self {
        Failure::Core(e)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GlueStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GlueStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GlueStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Config => GlueStatus::Config,
                ErrorClass::Data => GlueStatus::Data,
                ErrorClass::Numeric => GlueStatus::Numeric,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GlueStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn deref<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or(Failure::Null(what))
}

unsafe fn write<T>(ptr: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    ptr.write(value);
    Ok(())
}

fn product(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| GlueError::Config(format!("array length {a} x {b} overflows")).into())
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(GlueError::Shape(format!("{what}: length {got}, expected {want}")).into())
    }
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn glue_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Defaults matching the command-line tool.
#[no_mangle]
pub extern "C" fn glue_learn_options_default() -> GlueLearnOptions {
    let spsa = SpsaConfig::default();
    let optim = OptimConfig::default();
    GlueLearnOptions {
        mu: spsa.mu,
        directions: spsa.m,
        dimension_scaling: spsa.dimension_scaling,
        direction_seed: spsa.seed,
        learning_rate: optim.eta,
        steps: optim.steps,
        batch_size: optim.batch_size,
        seed: 0,
    }
}

/// Build a bank from `k` flat parameter vectors stored back to back in
/// `params` (`k * param_count` values). `train_sizes` may be null.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_new(
    layer_sizes: *const usize,
    n_layers: usize,
    activation: GlueActivation,
    params: *const f64,
    k: usize,
    train_sizes: *const u64,
    out: *mut *mut GlueBank,
) -> GlueStatus {
    guard(|| {
        let sizes = slice(layer_sizes, n_layers, "layer_sizes")?;
        let act = match activation {
            GlueActivation::Relu => Activation::Relu,
            GlueActivation::Tanh => Activation::Tanh,
        };
        let arch = ArchSpec::mlp(sizes, act)?;
        let p = arch.param_count();
        let flat = slice(params, product(k, p)?, "params")?;
        let sizes = if train_sizes.is_null() {
            vec![None; k]
        } else {
            slice(train_sizes, k, "train_sizes")?.iter().map(|&n| Some(n)).collect()
        };
        let experts = flat.chunks(p).map(|c| ParamVector::new(c.to_vec())).collect();
        let meta = sizes
            .into_iter()
            .map(|train_size| ExpertMeta {
                train_size,
                proxy_accuracy: None,
            })
            .collect();
        let bank = ExpertBank::new(arch, experts, meta)?;
        write(out, Box::into_raw(Box::new(GlueBank(bank))), "out")
    })
}

/// Build a bank from `k` checkpoint files. Training-set sizes come from the
/// checkpoint metadata.
///
/// # Safety
/// `paths` must hold `k` NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_from_checkpoints(
    paths: *const *const c_char,
    k: usize,
    out: *mut *mut GlueBank,
) -> GlueStatus {
    guard(|| {
        let mut arch = None;
        let mut experts = Vec::with_capacity(k);
        let mut meta = Vec::with_capacity(k);
        for &p in slice(paths, k, "paths")? {
            let path = deref(p, "path")?;
            let path = CStr::from_ptr(path)
                .to_str()
                .map_err(|_| GlueError::Config("checkpoint path is not UTF-8".into()))?;
            let ckpt = load_checkpoint(Path::new(path))?;
            if arch.get_or_insert_with(|| ckpt.arch.clone()) != &ckpt.arch {
                return Err(GlueError::Shape(format!("{path}: architecture differs from the first checkpoint")).into());
            }
            experts.push(ckpt.params);
            meta.push(ExpertMeta {
                train_size: ckpt.meta.train_size,
                proxy_accuracy: ckpt.meta.proxy_accuracy,
            });
        }
        let arch = arch.ok_or_else(|| GlueError::Config("no checkpoints given".into()))?;
        let bank = ExpertBank::new(arch, experts, meta)?;
        write(out, Box::into_raw(Box::new(GlueBank(bank))), "out")
    })
}

/// # Safety
/// `bank` must come from a `glue_bank_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_free(bank: *mut GlueBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of experts, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_k(bank: *const GlueBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.k())
}

/// Parameters per expert, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_param_count(bank: *const GlueBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.p())
}

/// `theta = sum_i alpha_i theta_i`. `alpha` has `k` entries on the simplex;
/// `theta_out` has room for `param_count` values.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_blend(
    bank: *const GlueBank,
    alpha: *const f64,
    k: usize,
    theta_out: *mut f64,
    p: usize,
) -> GlueStatus {
    guard(|| {
        let bank = &deref(bank, "bank")?.0;
        check_len(k, bank.k(), "alpha")?;
        check_len(p, bank.p(), "theta_out")?;
        let alpha = slice(alpha, k, "alpha")?;
        let out = slice_mut(theta_out, p, "theta_out")?;
        bank.blend_into(alpha, out, &mut Counters::new())?;
        Ok(())
    })
}

/// Largest singular value of the `P x K` expert matrix.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn glue_bank_sigma_max(bank: *const GlueBank, out: *mut f64) -> GlueStatus {
    guard(|| {
        let bank = &deref(bank, "bank")?.0;
        write(out, bank.sigma_max(), "out")
    })
}

/// Numerically stable softmax of `beta` into `alpha_out`, both of length `k`.
///
/// # Safety
/// Pointers must reference arrays of length `k`.
#[no_mangle]
pub unsafe extern "C" fn glue_softmax(beta: *const f64, k: usize, alpha_out: *mut f64) -> GlueStatus {
    guard(|| {
        let alpha = softmax_map(slice(beta, k, "beta")?)?;
        slice_mut(alpha_out, k, "alpha_out")?.copy_from_slice(&alpha);
        Ok(())
    })
}

/// Row-major `n x d` inputs with one class label per row.
///
/// # Safety
/// `inputs` must hold `n * d` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn glue_dataset_new(
    inputs: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    out: *mut *mut GlueDataset,
) -> GlueStatus {
    guard(|| {
        let x = slice(inputs, product(n, d)?, "inputs")?.to_vec();
        let y = slice(labels, n, "labels")?.to_vec();
        let batch = Batch::classification(Matrix::new(n, d, x)?, y)?;
        write(out, Box::into_raw(Box::new(GlueDataset(batch))), "out")
    })
}

/// # Safety
/// `data` must come from [`glue_dataset_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glue_dataset_free(data: *mut GlueDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Determine mixture coefficients for `bank` on `data` and write them to
/// `alpha_out` (`k` entries). For [`GlueMethod::Proxy`] `data` is the proxy
/// set. `options` may be null for defaults; `counters_out` may be null.
///
/// # Safety
/// Handles must be live and pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn glue_learn_alpha(
    bank: *const GlueBank,
    method: GlueMethod,
    data: *const GlueDataset,
    options: *const GlueLearnOptions,
    alpha_out: *mut f64,
    k: usize,
    counters_out: *mut GlueCounters,
) -> GlueStatus {
    guard(|| {
        let bank = &deref(bank, "bank")?.0;
        let data = &deref(data, "data")?.0;
        let opts = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| glue_learn_options_default());
        check_len(k, bank.k(), "alpha_out")?;
        let spsa = SpsaConfig {
            mu: opts.mu,
            m: opts.directions,
            dimension_scaling: opts.dimension_scaling,
            seed: opts.direction_seed,
            ..SpsaConfig::default()
        };
        let optim = OptimConfig {
            eta: opts.learning_rate,
            steps: opts.steps,
            batch_size: opts.batch_size,
            ..OptimConfig::default()
        };
        optim.validate()?;
        let (alpha, counters) = match method {
            GlueMethod::DataSize => (alpha_data_size(bank)?, Counters::new()),
            GlueMethod::Proxy => (alpha_proxy_accuracy(bank, data)?.alpha, Counters::new()),
            GlueMethod::FullGrad => {
                let o = learn_alpha_fullgrad(bank, data, &optim, opts.seed, None)?;
                (o.alpha, o.report.counters)
            }
            GlueMethod::Glue => {
                let o = learn_alpha_glue(bank, data, &spsa, &optim, opts.seed, None)?;
                (o.alpha, o.report.counters)
            }
        };
        slice_mut(alpha_out, k, "alpha_out")?.copy_from_slice(&alpha);
        if !counters_out.is_null() {
            counters_out.write(GlueCounters {
                forwards: counters.forwards,
                backwards: counters.backwards,
                blends: counters.blends,
                inner_products: counters.inner_products,
            });
        }
        Ok(())
    })
}

/// Accuracy and mean loss of the blended model on `data`.
///
/// # Safety
/// Handles must be live and pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn glue_evaluate_blend(
    bank: *const GlueBank,
    alpha: *const f64,
    k: usize,
    data: *const GlueDataset,
    accuracy_out: *mut f64,
    loss_out: *mut f64,
) -> GlueStatus {
    guard(|| {
        let bank = &deref(bank, "bank")?.0;
        let data = &deref(data, "data")?.0;
        check_len(k, bank.k(), "alpha")?;
        let theta = bank.blend(slice(alpha, k, "alpha")?, &mut Counters::new())?;
        let m = evaluate(bank.arch(), &theta, data)?;
        write(accuracy_out, m.accuracy, "accuracy_out")?;
        write(loss_out, m.loss, "loss_out")
    })
}

/// Per-step cost of a full-gradient step and of one SPSA pair.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glue_cost_model(
    forward: f64,
    gamma: f64,
    c_mix: f64,
    d_alpha: f64,
    out: *mut GlueCostBreakdown,
) -> GlueStatus {
    guard(|| {
        let b = cost_model(&CostModel {
            forward,
            gamma,
            c_mix,
            d_alpha,
        })?;
        write(
            out,
            GlueCostBreakdown {
                t_full: b.t_full,
                t_spsa: b.t_spsa,
                gap: b.gap,
            },
            "out",
        )
    })
}

/// `((K-1)/(mK)) sigma_max^2 |grad_theta L|^2`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glue_variance_bound(
    k: usize,
    m: usize,
    sigma_max: f64,
    grad_theta_norm: f64,
    mu: f64,
    out: *mut f64,
) -> GlueStatus {
    guard(|| {
        let v = variance_bound(k, m, sigma_max, grad_theta_norm, mu)?;
        write(out, v.bound, "out")
    })
}
