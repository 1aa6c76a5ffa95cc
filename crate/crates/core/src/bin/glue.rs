//! `glue`: command-line front end for the experiment pipeline.
//!
//! Every subcommand reads and writes under `--out` (default `glue-out`):
//!
//! ```text
//! config.json        effective configuration, reused by later commands
//! data/              synthesized splits (CSV)
//! splits/            per-expert training sets and their class proportions
//! experts/           expert checkpoints
//! alpha/             learned or heuristic mixtures with their reports
//! priors/            blended zero-shot models
//! finetuned/         fine-tuned models and reports
//! analysis/          `analyze` results
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use glue_core::analysis::checks::{bias_checks, cost_checks, variance_checks, AnalysisReport, VarianceCheckConfig};
use glue_core::harness::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use glue_core::harness::data::{read_csv, synth_dataset, write_csv, SynthData};
use glue_core::harness::evaluate::evaluate;
use glue_core::harness::experiment::{
    derive_seed, determine_alpha, run_experiment, split_source, train_experts, ExperimentConfig, Method, SeedContext,
    STREAM_FINETUNE,
};
use glue_core::harness::finetune::finetune;
use glue_core::{Counters, ExpertBank, ExpertMeta, GlueError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "glue",
    version,
    about = "Learn convex mixtures of expert networks with two-point SPSA"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// JSON configuration; defaults to `<out>/config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (replaces the configured seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "glue-out")]
    out: PathBuf,
    /// SPSA perturbation radius.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// SPSA directions per step.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Multiply the SPSA estimate by K.
    #[arg(long, global = true)]
    dimension_scaling: bool,
    /// Mixture-learning steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Training epochs: expert training for `train-experts`, fine-tuning otherwise.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the source pool and target-domain splits.
    Synth,
    /// Draw the Dirichlet non-IID expert splits.
    Split,
    /// Train one expert per split.
    TrainExperts,
    /// Determine the mixture coefficients and write the blended prior.
    LearnAlpha {
        #[arg(long)]
        method: Method,
    },
    /// Fine-tune a blended prior on the target fine-tuning split.
    Finetune {
        #[arg(long)]
        method: Method,
    },
    /// Accuracy and loss of a checkpoint on a data split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Full pipeline over every configured seed.
    Run,
    /// Numerical checks of the estimator and the cost model.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AnalysisKind {
    Variance,
    Cost,
    Bias,
}

impl AnalysisKind {
    fn name(self) -> &'static str {
        match self {
            AnalysisKind::Variance => "variance",
            AnalysisKind::Cost => "cost",
            AnalysisKind::Bias => "bias",
        }
    }
}

struct Layout {
    out: PathBuf,
}

impl Layout {
    fn config(&self) -> PathBuf {
        self.out.join("config.json")
    }
    fn data(&self) -> PathBuf {
        self.out.join("data")
    }
    fn splits(&self) -> PathBuf {
        self.out.join("splits")
    }
    fn experts(&self) -> PathBuf {
        self.out.join("experts")
    }
    fn expert(&self, i: usize) -> PathBuf {
        self.experts().join(format!("expert_{i}.glue"))
    }
    fn alpha(&self, m: Method) -> PathBuf {
        self.out.join("alpha").join(format!("{m}.json"))
    }
    fn prior(&self, m: Method) -> PathBuf {
        self.out.join("priors").join(format!("{m}.glue"))
    }
    fn finetuned(&self, m: Method) -> PathBuf {
        self.out.join("finetuned").join(format!("{m}.glue"))
    }
    fn finetune_report(&self, m: Method) -> PathBuf {
        self.out.join("finetuned").join(format!("{m}.json"))
    }
    fn analysis(&self, kind: AnalysisKind) -> PathBuf {
        self.out.join("analysis").join(format!("{}.json", kind.name()))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_config(opts: &GlobalOpts, layout: &Layout) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None if layout.config().exists() => ExperimentConfig::from_json_file(&layout.config())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    let spsa = &mut cfg.alpha_learning.spsa;
    if let Some(mu) = opts.mu {
        spsa.mu = mu;
    }
    if let Some(m) = opts.m {
        spsa.m = m;
    }
    if opts.dimension_scaling {
        spsa.dimension_scaling = true;
    }
    if let Some(steps) = opts.steps {
        cfg.alpha_learning.optim.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn primary_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn load_or_synth(cfg: &ExperimentConfig, layout: &Layout) -> Result<SynthData> {
    if layout.data().join("meta.json").exists() {
        return SynthData::load_dir(&layout.data());
    }
    let data = synth_dataset(&cfg.dataset).map_err(|e| e.in_phase("synth"))?;
    data.save_dir(&layout.data())?;
    Ok(data)
}

fn load_bank(layout: &Layout) -> Result<ExpertBank> {
    let mut experts = Vec::new();
    let mut meta = Vec::new();
    let mut arch = None;
    while layout.expert(experts.len()).exists() {
        let ckpt = load_checkpoint(&layout.expert(experts.len()))?;
        match &arch {
            None => arch = Some(ckpt.arch.clone()),
            Some(a) if *a != ckpt.arch => {
                return Err(GlueError::Shape(format!(
                    "expert {} has a different architecture",
                    experts.len()
                )))
            }
            Some(_) => {}
        }
        experts.push(ckpt.params);
        meta.push(ExpertMeta {
            train_size: ckpt.meta.train_size,
            proxy_accuracy: ckpt.meta.proxy_accuracy,
        });
    }
    let arch = arch.ok_or_else(|| {
        GlueError::Data(format!(
            "no expert checkpoints in {}; run train-experts first",
            layout.experts().display()
        ))
    })?;
    ExpertBank::new(arch, experts, meta)
}

fn cmd_split(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let data = load_or_synth(cfg, layout)?;
    let seed = primary_seed(cfg);
    let splits = split_source(cfg, &data, seed)?;
    fs::create_dir_all(layout.splits())?;
    let mut summary = Vec::new();
    for (i, s) in splits.iter().enumerate() {
        write_csv(&layout.splits().join(format!("expert_{i}.csv")), &s.data)?;
        summary.push(json!({
            "expert": i,
            "proportions": s.proportions,
            "counts": s.counts,
            "rescaled": s.rescaled,
        }));
    }
    let report = json!({ "seed": seed, "experts": summary });
    write_json(&layout.splits().join("splits.json"), &report)?;
    Ok(report)
}

fn cmd_train_experts(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let data = load_or_synth(cfg, layout)?;
    if !layout.splits().join("splits.json").exists() {
        cmd_split(cfg, layout)?;
    }
    let mut sets = Vec::new();
    while layout.splits().join(format!("expert_{}.csv", sets.len())).exists() {
        sets.push(read_csv(&layout.splits().join(format!("expert_{}.csv", sets.len())))?);
    }
    let arch = cfg.arch_spec(data.source_pool.dim())?;
    let seed = primary_seed(cfg);
    let refs: Vec<_> = sets.iter().collect();
    let bank = train_experts(cfg, &arch, &refs, seed)?;
    let mut rows = Vec::new();
    for (i, (params, m)) in bank.experts().iter().zip(bank.meta()).enumerate() {
        let meta = CheckpointMeta {
            expert_id: Some(i),
            train_size: m.train_size,
            seed: Some(seed),
            ..CheckpointMeta::default()
        };
        save_checkpoint(&layout.expert(i), &arch, params, &meta)?;
        let acc = evaluate(&arch, params, &data.test)?;
        rows.push(json!({ "expert": i, "train_size": m.train_size, "target_test": acc }));
    }
    Ok(json!({ "seed": seed, "experts": rows }))
}

fn cmd_learn_alpha(cfg: &ExperimentConfig, layout: &Layout, method: Method) -> Result<serde_json::Value> {
    let ctx = SeedContext {
        seed: primary_seed(cfg),
        data: load_or_synth(cfg, layout)?,
        bank: load_bank(layout)?,
    };
    let choice = determine_alpha(cfg, &ctx, method).map_err(|e| e.in_phase(&format!("learn-alpha:{method}")))?;
    let prior = ctx.bank.blend(&choice.alpha, &mut Counters::new())?;
    let meta = CheckpointMeta {
        seed: Some(ctx.seed),
        label: Some(method.to_string()),
        ..CheckpointMeta::default()
    };
    fs::create_dir_all(layout.prior(method).parent().unwrap())?;
    save_checkpoint(&layout.prior(method), ctx.bank.arch(), &prior, &meta)?;
    let zero_shot = evaluate(ctx.bank.arch(), &prior, &ctx.data.test)?;
    let report = json!({
        "method": method,
        "seed": ctx.seed,
        "alpha": choice.alpha,
        "zero_shot": zero_shot,
        "counters": choice.counters,
        "wall_ms": choice.wall_ms,
        "flags": choice.flags,
        "report": choice.report,
    });
    write_json(&layout.alpha(method), &report)?;
    Ok(json!({
        "method": method,
        "alpha": report["alpha"],
        "zero_shot": zero_shot,
        "counters": choice.counters,
    }))
}

fn cmd_finetune(cfg: &ExperimentConfig, layout: &Layout, method: Method) -> Result<serde_json::Value> {
    let data = load_or_synth(cfg, layout)?;
    if !layout.prior(method).exists() {
        return Err(GlueError::Data(format!(
            "{} missing; run learn-alpha --method {method} first",
            layout.prior(method).display()
        )));
    }
    let prior = load_checkpoint(&layout.prior(method))?;
    let seed = derive_seed(primary_seed(cfg), STREAM_FINETUNE);
    let (tuned, report) = finetune(
        &prior.arch,
        &prior.params,
        &data.finetune,
        &data.test,
        &cfg.finetune,
        seed,
    )
    .map_err(|e| e.in_phase("finetune"))?;
    fs::create_dir_all(layout.finetuned(method).parent().unwrap())?;
    save_checkpoint(&layout.finetuned(method), &prior.arch, &tuned, &prior.meta)?;
    write_json(&layout.finetune_report(method), &report)?;
    let last = report.epochs.last().expect("epoch 0 is always recorded");
    Ok(json!({
        "method": method,
        "zero_shot_accuracy": report.epochs[0].test_accuracy,
        "final_accuracy": last.test_accuracy,
        "epochs": last.epoch,
    }))
}

fn cmd_evaluate(cfg: &ExperimentConfig, layout: &Layout, checkpoint: &Path, split: &str) -> Result<serde_json::Value> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = load_or_synth(cfg, layout)?;
    let set = data.split(split).ok_or_else(|| {
        GlueError::Config(format!(
            "unknown split {split:?}; expected one of {:?}",
            SynthData::SPLITS
        ))
    })?;
    let metrics = evaluate(&ckpt.arch, &ckpt.params, set)?;
    Ok(json!({ "checkpoint": checkpoint, "split": split, "metrics": metrics }))
}

fn cmd_analyze(
    cfg: &ExperimentConfig,
    opts: &GlobalOpts,
    layout: &Layout,
    kind: AnalysisKind,
) -> Result<AnalysisReport> {
    let report = match kind {
        AnalysisKind::Variance => {
            let defaults = VarianceCheckConfig::default();
            variance_checks(&VarianceCheckConfig {
                k: cfg.split.k,
                m: opts.m.unwrap_or(defaults.m),
                mu: opts.mu.unwrap_or(defaults.mu),
                seed: opts.seed.unwrap_or(defaults.seed),
                ..defaults
            })?
        }
        AnalysisKind::Bias => bias_checks(&[1e-1, 3e-2, 1e-2, 3e-3, 1e-3])?,
        AnalysisKind::Cost => {
            let data = load_or_synth(cfg, layout)?;
            let bank = if layout.expert(0).exists() {
                load_bank(layout)?
            } else {
                cmd_train_experts(cfg, layout)?;
                load_bank(layout)?
            };
            cost_checks(&bank, &data.alpha, &cfg.alpha_learning.optim, 200)?
        }
    };
    write_json(&layout.analysis(kind), &report)?;
    Ok(report)
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let layout = Layout {
        out: cli.global.out.clone(),
    };
    let mut cfg = load_config(&cli.global, &layout)?;
    if let Some(epochs) = cli.global.epochs {
        match cli.command {
            Command::TrainExperts => cfg.expert_training.epochs = epochs,
            _ => cfg.finetune.epochs = epochs,
        }
    }
    fs::create_dir_all(&layout.out)?;
    write_json(&layout.config(), &cfg)?;
    match &cli.command {
        Command::Synth => {
            let data = synth_dataset(&cfg.dataset).map_err(|e| e.in_phase("synth"))?;
            data.save_dir(&layout.data())?;
            let sizes: serde_json::Map<_, _> = SynthData::SPLITS
                .iter()
                .map(|s| (s.to_string(), json!(data.split(s).unwrap().len())))
                .collect();
            Ok(json!({ "classes": data.classes, "sizes": sizes }))
        }
        Command::Split => cmd_split(&cfg, &layout),
        Command::TrainExperts => cmd_train_experts(&cfg, &layout),
        Command::LearnAlpha { method } => cmd_learn_alpha(&cfg, &layout, *method),
        Command::Finetune { method } => cmd_finetune(&cfg, &layout, *method),
        Command::Evaluate { checkpoint, split } => cmd_evaluate(&cfg, &layout, checkpoint, split),
        Command::Run => {
            let summary = run_experiment(&cfg, Some(&layout.out))?;
            Ok(json!({ "complete": summary.complete, "methods": summary.methods }))
        }
        Command::Analyze { kind } => Ok(serde_json::to_value(cmd_analyze(&cfg, &cli.global, &layout, *kind)?)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
