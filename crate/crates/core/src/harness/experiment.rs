//! End-to-end comparison of the four ways to pick the mixture.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{alpha_data_size, alpha_proxy_accuracy, learn_alpha_fullgrad};
use crate::blend::{ExpertBank, ExpertMeta};
use crate::counters::Counters;
use crate::error::{GlueError, Result};
use crate::harness::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::harness::data::{synth_dataset, DatasetSpec, SynthData};
use crate::harness::evaluate::{evaluate, Metrics};
use crate::harness::finetune::finetune;
use crate::harness::split::{dirichlet_split, ExpertSplit, SplitSpec};
use crate::nn::{init_params, train_expert, Activation, ArchSpec, Dataset, TrainConfig};
use crate::report::RunReport;
use crate::zo::{learn_alpha_glue, OptimConfig, SpsaConfig};

/// How the mixture coefficients are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Config 1: proportional to expert training-set size.
    DataSize,
    /// Config 2: proportional to proxy-set accuracy.
    Proxy,
    /// Config 3: learned with exact gradients.
    FullGrad,
    /// Config 4: learned with two-point SPSA.
    Glue,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DataSize, Method::Proxy, Method::FullGrad, Method::Glue];

    pub fn config_id(self) -> u8 {
        match self {
            Method::DataSize => 1,
            Method::Proxy => 2,
            Method::FullGrad => 3,
            Method::Glue => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::DataSize => "data-size",
            Method::Proxy => "proxy",
            Method::FullGrad => "full-grad",
            Method::Glue => "glue",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GlueError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GlueError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, d_in: usize, classes: usize) -> Result<ArchSpec> {
        let mut sizes = vec![d_in];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        ArchSpec::mlp(&sizes, self.activation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AlphaLearning {
    pub optim: OptimConfig,
    pub spsa: SpsaConfig,
}

/// Single JSON document describing a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub arch: ArchConfig,
    pub expert_training: TrainConfig,
    pub alpha_learning: AlphaLearning,
    pub finetune: TrainConfig,
    /// Size of the proxy set, taken from the front of the validation split.
    pub proxy_size: usize,
    pub seeds: Vec<u64>,
    /// Train every expert from the same random initialization.
    pub shared_init: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            arch: ArchConfig::default(),
            expert_training: TrainConfig::default(),
            alpha_learning: AlphaLearning::default(),
            finetune: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            proxy_size: 500,
            seeds: vec![1, 2, 3],
            shared_init: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlueError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GlueError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.split.validate()?;
        self.alpha_learning.optim.validate()?;
        self.alpha_learning.spsa.validate()?;
        self.expert_training.adam.validate()?;
        self.finetune.adam.validate()?;
        if self.seeds.is_empty() {
            return Err(GlueError::Config("at least one seed is required".into()));
        }
        if self.proxy_size == 0 {
            return Err(GlueError::Config("proxy set must be non-empty".into()));
        }
        Ok(())
    }

    pub fn arch_spec(&self, d_in: usize) -> Result<ArchSpec> {
        self.arch.build(d_in, self.dataset.classes)
    }
}

/// Per-seed random streams derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ stream
}

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_EXPERT: u64 = 3;
pub const STREAM_ALPHA: u64 = 4;
pub const STREAM_DIRECTIONS: u64 = 5;
pub const STREAM_FINETUNE: u64 = 6;

/// Data and trained experts for one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: SynthData,
    pub bank: ExpertBank,
}

impl SeedContext {
    pub fn proxy_set(&self, size: usize) -> crate::nn::Dataset {
        let n = size.min(self.data.validation.len());
        self.data.validation.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Carve the source pool into the `K` expert splits for `seed`.
pub fn split_source(cfg: &ExperimentConfig, data: &SynthData, seed: u64) -> Result<Vec<ExpertSplit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT));
    dirichlet_split(&data.source_pool, data.classes, &cfg.split, &mut rng).map_err(|e| e.in_phase("split"))
}

/// Train one expert per dataset, from a shared or per-expert initialization.
pub fn train_experts(cfg: &ExperimentConfig, arch: &ArchSpec, datasets: &[&Dataset], seed: u64) -> Result<ExpertBank> {
    let shared = init_params(arch, derive_seed(seed, STREAM_INIT));
    let mut experts = Vec::with_capacity(datasets.len());
    let mut meta = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let init = if cfg.shared_init {
            shared.clone()
        } else {
            init_params(arch, derive_seed(seed, STREAM_INIT + 100 * (i as u64 + 1)))
        };
        let trained = train_expert(
            arch,
            &init,
            d,
            &cfg.expert_training,
            derive_seed(seed, STREAM_EXPERT + 100 * (i as u64 + 1)),
        )
        .map_err(|e| e.in_phase("train-experts"))?;
        experts.push(trained);
        meta.push(ExpertMeta {
            train_size: Some(d.len() as u64),
            proxy_accuracy: None,
        });
    }
    ExpertBank::new(arch.clone(), experts, meta)
}

/// Split the source pool and train `K` experts on their private splits.
pub fn train_expert_bank(cfg: &ExperimentConfig, data: &SynthData, seed: u64) -> Result<ExpertBank> {
    let arch = cfg.arch_spec(data.source_pool.dim())?;
    let splits = split_source(cfg, data, seed)?;
    let datasets: Vec<&Dataset> = splits.iter().map(|s| &s.data).collect();
    train_experts(cfg, &arch, &datasets, seed)
}

pub fn prepare_seed(cfg: &ExperimentConfig, data: &SynthData, seed: u64) -> Result<SeedContext> {
    Ok(SeedContext {
        seed,
        data: data.clone(),
        bank: train_expert_bank(cfg, data, seed)?,
    })
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub config_id: u8,
    pub seed: u64,
    pub alpha: Vec<f64>,
    pub zero_shot: Metrics,
    pub final_metrics: Metrics,
    /// Counters of the mixture-determination phase.
    pub alpha_counters: Counters,
    pub alpha_wall_ms: f64,
    pub alpha_steps: usize,
    pub learn_report: Option<RunReport>,
    pub finetune_report: RunReport,
    pub flags: Vec<String>,
}

impl MethodResult {
    pub fn ms_per_alpha_step(&self) -> Option<f64> {
        (self.alpha_steps > 0).then(|| self.alpha_wall_ms / self.alpha_steps as f64)
    }
}

/// Mixture plus the learning report, for one method.
#[derive(Debug, Clone)]
pub struct AlphaChoice {
    pub alpha: Vec<f64>,
    pub report: Option<RunReport>,
    pub counters: Counters,
    pub wall_ms: f64,
    pub flags: Vec<String>,
}

/// Determine the mixture with `method`.
pub fn determine_alpha(cfg: &ExperimentConfig, ctx: &SeedContext, method: Method) -> Result<AlphaChoice> {
    let started = Instant::now();
    let proxy = ctx.proxy_set(cfg.proxy_size);
    let learn = &cfg.alpha_learning;
    let alpha_seed = derive_seed(ctx.seed, STREAM_ALPHA);
    let validation = learn.optim.plateau.map(|_| &ctx.data.validation);
    let (alpha, report, flags) = match method {
        Method::DataSize => (alpha_data_size(&ctx.bank)?, None, vec![]),
        Method::Proxy => {
            let w = alpha_proxy_accuracy(&ctx.bank, &proxy)?;
            let flags = if w.fell_back {
                vec!["proxy accuracies all zero; fell back to uniform".to_string()]
            } else {
                vec![]
            };
            (w.alpha, None, flags)
        }
        Method::FullGrad => {
            let out = learn_alpha_fullgrad(&ctx.bank, &ctx.data.alpha, &learn.optim, alpha_seed, validation)?;
            (out.alpha, Some(out.report), vec![])
        }
        Method::Glue => {
            let spsa = SpsaConfig {
                seed: derive_seed(ctx.seed ^ learn.spsa.seed, STREAM_DIRECTIONS),
                ..learn.spsa
            };
            let out = learn_alpha_glue(&ctx.bank, &ctx.data.alpha, &spsa, &learn.optim, alpha_seed, validation)?;
            (out.alpha, Some(out.report), vec![])
        }
    };
    let (counters, wall_ms) = match &report {
        Some(r) => (r.counters, r.wall_ms.get("learn_alpha").copied().unwrap_or_default()),
        None => (Counters::new(), started.elapsed().as_secs_f64() * 1e3),
    };
    Ok(AlphaChoice {
        alpha,
        report,
        counters,
        wall_ms,
        flags,
    })
}

/// Determine the mixture, evaluate the prior, and fine-tune it.
pub fn run_method(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    method: Method,
) -> Result<(MethodResult, crate::nn::ParamVector, crate::nn::ParamVector)> {
    let phase = format!("learn-alpha:{method}");
    let choice = determine_alpha(cfg, ctx, method).map_err(|e| e.in_phase(&phase))?;
    let arch = ctx.bank.arch();
    let prior = ctx.bank.blend(&choice.alpha, &mut Counters::new())?;
    let zero_shot = evaluate(arch, &prior, &ctx.data.test)?;
    let (tuned, ft_report) = finetune(
        arch,
        &prior,
        &ctx.data.finetune,
        &ctx.data.test,
        &cfg.finetune,
        derive_seed(ctx.seed, STREAM_FINETUNE),
    )
    .map_err(|e| e.in_phase("finetune"))?;
    let final_metrics = ft_report
        .epochs
        .last()
        .map(|e| Metrics {
            accuracy: e.test_accuracy,
            loss: e.test_loss,
        })
        .unwrap_or(zero_shot);
    let alpha_steps = choice.report.as_ref().map_or(0, |r| r.steps.len());
    Ok((
        MethodResult {
            method,
            config_id: method.config_id(),
            seed: ctx.seed,
            alpha: choice.alpha,
            zero_shot,
            final_metrics,
            alpha_counters: choice.counters,
            alpha_wall_ms: choice.wall_ms,
            alpha_steps,
            learn_report: choice.report,
            finetune_report: ft_report,
            flags: choice.flags,
        },
        prior,
        tuned,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub config_id: u8,
    pub per_seed_final_accuracy: BTreeMap<u64, f64>,
    pub per_seed_zero_shot_accuracy: BTreeMap<u64, f64>,
    pub mean_final_accuracy: f64,
    pub mean_zero_shot_accuracy: f64,
    pub mean_ms_per_alpha_step: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub complete: bool,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub results: Vec<MethodResult>,
}

impl ExperimentSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    fn from_results(seeds: &[u64], results: Vec<MethodResult>, complete: bool) -> Self {
        let methods = Method::ALL
            .iter()
            .filter_map(|&m| {
                let rows: Vec<&MethodResult> = results.iter().filter(|r| r.method == m).collect();
                if rows.is_empty() {
                    return None;
                }
                let n = rows.len() as f64;
                let steps: Vec<f64> = rows.iter().filter_map(|r| r.ms_per_alpha_step()).collect();
                Some(MethodSummary {
                    method: m,
                    config_id: m.config_id(),
                    per_seed_final_accuracy: rows.iter().map(|r| (r.seed, r.final_metrics.accuracy)).collect(),
                    per_seed_zero_shot_accuracy: rows.iter().map(|r| (r.seed, r.zero_shot.accuracy)).collect(),
                    mean_final_accuracy: rows.iter().map(|r| r.final_metrics.accuracy).sum::<f64>() / n,
                    mean_zero_shot_accuracy: rows.iter().map(|r| r.zero_shot.accuracy).sum::<f64>() / n,
                    mean_ms_per_alpha_step: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
                })
            })
            .collect();
        Self {
            complete,
            seeds: seeds.to_vec(),
            methods,
            results,
        }
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "config_id",
    "seed",
    "phase",
    "epoch",
    "step",
    "train_loss",
    "test_accuracy",
    "forwards",
    "backwards",
    "blends",
    "wall_ms",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Curve rows for one method result: one per α-learning step and one per
/// fine-tuning epoch (epoch 0 is the zero-shot prior).
pub fn curve_rows(r: &MethodResult) -> Vec<[String; 11]> {
    let mut rows = Vec::new();
    let id = r.config_id.to_string();
    let seed = r.seed.to_string();
    if let Some(learn) = &r.learn_report {
        let per_step = learn.ms_per_step("learn_alpha").unwrap_or(0.0);
        for s in &learn.steps {
            rows.push([
                id.clone(),
                seed.clone(),
                "learn_alpha".into(),
                String::new(),
                s.step.to_string(),
                format!("{}", s.train_loss),
                String::new(),
                s.counters.forwards.to_string(),
                s.counters.backwards.to_string(),
                s.counters.blends.to_string(),
                format!("{:.3}", per_step * s.step as f64),
            ]);
        }
    }
    for e in &r.finetune_report.epochs {
        rows.push([
            id.clone(),
            seed.clone(),
            if e.epoch == 0 { "prior" } else { "finetune" }.into(),
            e.epoch.to_string(),
            String::new(),
            opt(e.train_loss),
            format!("{}", e.test_accuracy),
            e.counters.forwards.to_string(),
            e.counters.backwards.to_string(),
            e.counters.blends.to_string(),
            format!("{:.3}", e.wall_ms),
        ]);
    }
    rows
}

pub fn write_curves(path: &Path, results: &[MethodResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| GlueError::Data(e.to_string()))?;
    w.write_record(CSV_HEADER).map_err(|e| GlueError::Data(e.to_string()))?;
    for r in results {
        for row in curve_rows(r) {
            w.write_record(&row).map_err(|e| GlueError::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Output locations under the run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }
    pub fn expert(&self, seed: u64, i: usize) -> PathBuf {
        self.seed_dir(seed).join("experts").join(format!("expert_{i}.glue"))
    }
    pub fn prior(&self, seed: u64, m: Method) -> PathBuf {
        self.seed_dir(seed).join("priors").join(format!("{m}.glue"))
    }
    pub fn finetuned(&self, seed: u64, m: Method) -> PathBuf {
        self.seed_dir(seed).join("finetuned").join(format!("{m}.glue"))
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn incomplete_marker(&self) -> PathBuf {
        self.root.join("INCOMPLETE")
    }
}

pub fn save_bank(layout: &RunLayout, seed: u64, bank: &ExpertBank) -> Result<()> {
    for (i, (e, m)) in bank.experts().iter().zip(bank.meta()).enumerate() {
        let meta = CheckpointMeta {
            expert_id: Some(i),
            train_size: m.train_size,
            proxy_accuracy: m.proxy_accuracy,
            seed: Some(seed),
            label: None,
        };
        save_checkpoint(&layout.expert(seed, i), bank.arch(), e, &meta)?;
    }
    Ok(())
}

/// Run every method on already-prepared seed contexts.
pub fn run_contexts(
    cfg: &ExperimentConfig,
    contexts: &[SeedContext],
    layout: Option<&RunLayout>,
) -> Result<ExperimentSummary> {
    let mut results = Vec::new();
    for ctx in contexts {
        for method in Method::ALL {
            let (result, prior, tuned) = run_method(cfg, ctx, method)?;
            if let Some(layout) = layout {
                let meta = CheckpointMeta {
                    seed: Some(ctx.seed),
                    label: Some(method.to_string()),
                    ..CheckpointMeta::default()
                };
                save_checkpoint(&layout.prior(ctx.seed, method), ctx.bank.arch(), &prior, &meta)?;
                save_checkpoint(&layout.finetuned(ctx.seed, method), ctx.bank.arch(), &tuned, &meta)?;
            }
            results.push(result);
        }
    }
    let seeds: Vec<u64> = contexts.iter().map(|c| c.seed).collect();
    Ok(ExperimentSummary::from_results(&seeds, results, true))
}

/// Full pipeline: synthesize, split, train experts, then for every seed
/// determine the mixture four ways, fine-tune and evaluate.
///
/// With an output directory, writes checkpoints, `curves.csv` and
/// `summary.json`; an `INCOMPLETE` marker stays behind if any phase fails.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let layout = out.map(RunLayout::new);
    if let Some(layout) = &layout {
        std::fs::create_dir_all(&layout.root)?;
        std::fs::write(layout.incomplete_marker(), b"run in progress or failed\n")?;
    }
    let data = synth_dataset(&cfg.dataset).map_err(|e| e.in_phase("synth"))?;
    let mut contexts = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, &data, seed)?;
        if let Some(layout) = &layout {
            save_bank(layout, seed, &ctx.bank)?;
        }
        contexts.push(ctx);
    }
    let summary = run_contexts(cfg, &contexts, layout.as_ref())?;
    if let Some(layout) = &layout {
        write_curves(&layout.curves(), &summary.results)?;
        std::fs::write(layout.summary(), serde_json::to_vec_pretty(&summary)?)?;
        std::fs::remove_file(layout.incomplete_marker())?;
    }
    Ok(summary)
}
