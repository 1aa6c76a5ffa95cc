use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::counters::Counters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
    /// Mixture after this step (empty for full-parameter training).
    pub alpha: Vec<f64>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub counters: Counters,
    pub wall_ms: f64,
}

/// Losses, accuracies and cost counters of one learning or fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub counters: Counters,
    pub config: serde_json::Value,
    pub wall_ms: BTreeMap<String, f64>,
    /// Degenerate-case markers, e.g. a proxy-accuracy fallback to uniform.
    pub flags: Vec<String>,
    pub stopped_early_at: Option<u64>,
}

impl RunReport {
    pub fn flag(&mut self, note: impl Into<String>) {
        self.flags.push(note.into());
    }

    /// Mean wall time per recorded step of `phase`, in milliseconds.
    pub fn ms_per_step(&self, phase: &str) -> Option<f64> {
        let total = self.wall_ms.get(phase)?;
        (!self.steps.is_empty()).then(|| total / self.steps.len() as f64)
    }
}
