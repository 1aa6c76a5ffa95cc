//! Learn convex mixture coefficients over fixed pretrained experts with
//! forward passes only.
//!
//! The blended model is `θ(α) = Σ αᵢ θᵢ` with `α = softmax(β)`. [`zo`]
//! estimates `∇_β L` from two loss evaluations at `β ± μu` and updates `β`
//! with Adam. [`baselines`] holds the data-size, proxy-accuracy and
//! full-gradient alternatives, [`analysis`] the cost model and estimator
//! checks, and [`harness`] the end-to-end experiment.

pub mod adam;
pub mod analysis;
pub mod baselines;
pub mod blend;
pub mod counters;
pub mod error;
pub mod harness;
pub mod nn;
pub mod report;
pub mod zo;

pub use blend::{softmax_map, softmax_pullback, ExpertBank, ExpertMeta, MixtureState};
pub use counters::Counters;
pub use error::{ErrorClass, GlueError, Result};
pub use nn::{ArchSpec, Batch, Dataset, LossKind, Matrix, ParamVector};
pub use report::RunReport;
pub use zo::{learn_alpha_glue, OptimConfig, SpsaConfig};
