use std::time::Instant;

use crate::counters::Counters;
use crate::error::Result;
use crate::harness::evaluate::evaluate;
use crate::nn::{batch_loss, fit, ArchSpec, Dataset, LossKind, ParamVector, TrainConfig};
use crate::report::{EpochRecord, RunReport};

/// Full-parameter training from the blended prior, with the mixture held
/// fixed. Epoch 0 of the report holds the zero-shot metrics of `theta_star`.
pub fn finetune(
    arch: &ArchSpec,
    theta_star: &ParamVector,
    target_train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamVector, RunReport)> {
    let kind = LossKind::for_arch(arch);
    let mut report = RunReport {
        config: serde_json::json!({ "finetune": cfg, "seed": seed }),
        ..RunReport::default()
    };
    let train_loss = |p: &ParamVector| batch_loss(arch, p, target_train_set, kind, &mut Counters::new());
    let zero_shot = evaluate(arch, theta_star, test_set)?;
    report.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: Some(train_loss(theta_star)?),
        test_accuracy: zero_shot.accuracy,
        test_loss: zero_shot.loss,
        counters: Counters::new(),
        wall_ms: 0.0,
    });
    let started = Instant::now();
    let mut counters = Counters::new();
    let mut epochs = Vec::new();
    // Per-epoch metrics are evaluated outside the training counters.
    let mut trace = |epoch: usize, p: &ParamVector, c: Counters| -> Result<()> {
        let m = evaluate(arch, p, test_set)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss(p)?),
            test_accuracy: m.accuracy,
            test_loss: m.loss,
            counters: c,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    };
    let params = fit(
        arch,
        theta_star,
        target_train_set,
        cfg,
        seed,
        &mut counters,
        |epoch, p, c| trace(epoch, p, *c),
    )?;
    report.epochs.extend(epochs);
    report.counters = counters;
    report
        .wall_ms
        .insert("finetune".into(), started.elapsed().as_secs_f64() * 1e3);
    Ok((params, report))
}
