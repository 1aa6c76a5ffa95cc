use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{GlueError, Result};
use crate::nn::{forward, loss_eval, ArchSpec, Dataset, LossKind, Matrix, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_of(predictions: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(j, &y)| argmax(predictions.row(*j)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy and mean loss of `params` on `test_set`.
pub fn evaluate(arch: &ArchSpec, params: &ParamVector, test_set: &Dataset) -> Result<Metrics> {
    evaluate_counted(arch, params, test_set, &mut Counters::new())
}

pub fn evaluate_counted(
    arch: &ArchSpec,
    params: &ParamVector,
    test_set: &Dataset,
    counters: &mut Counters,
) -> Result<Metrics> {
    if test_set.is_empty() {
        return Err(GlueError::Config("evaluation set is empty".into()));
    }
    let labels = test_set
        .labels()
        .ok_or_else(|| GlueError::Config("accuracy needs class labels".into()))?;
    let preds = forward(arch, params, &test_set.inputs, counters)?;
    Ok(Metrics {
        accuracy: accuracy_of(&preds, labels),
        loss: loss_eval(&preds, &test_set.targets, LossKind::CrossEntropy)?,
    })
}
