//! Dirichlet non-IID expert splits.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::nn::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub k: usize,
    pub dirichlet_concentration: f64,
    pub per_expert_budget: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            k: 4,
            dirichlet_concentration: 0.5,
            per_expert_budget: 500,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GlueError::Config("need at least one expert".into()));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return Err(GlueError::Config("Dirichlet concentration must be positive".into()));
        }
        if self.per_expert_budget == 0 {
            return Err(GlueError::Config("per-expert budget must be positive".into()));
        }
        Ok(())
    }
}

/// One expert's private training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSplit {
    pub data: Dataset,
    /// Class proportions drawn from the Dirichlet.
    pub proportions: Vec<f64>,
    /// Realized per-class counts.
    pub counts: Vec<usize>,
    /// Pool indices selected for this expert.
    pub indices: Vec<usize>,
    /// Proportions could not be met and were rescaled to what was available.
    pub rescaled: bool,
}

impl ExpertSplit {
    pub fn realized_proportions(&self) -> Vec<f64> {
        let n: usize = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / n as f64).collect()
    }
}

/// Symmetric `Dirichlet(δ·1_C)` sample.
///
/// Small `δ` makes the gamma draws underflow, so they are taken in log space
/// via `Gamma(δ) = Gamma(δ + 1)·U^{1/δ}`.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: f64, classes: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..classes)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / concentration
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Integer counts summing to `budget` whose shares are as close to
/// `proportions` as rounding allows (largest remainder).
pub fn apportion(proportions: &[f64], budget: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * budget as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Cap counts at availability and hand the shortfall to classes with room,
/// in proportion to their desired share.
fn rescale_to_available(proportions: &[f64], available: &[usize], budget: usize) -> Vec<usize> {
    let mut counts = vec![0usize; proportions.len()];
    let mut remaining = budget;
    let mut open: Vec<usize> = (0..proportions.len()).filter(|&c| available[c] > 0).collect();
    while remaining > 0 && !open.is_empty() {
        let total: f64 = open.iter().map(|&c| proportions[c].max(1e-12)).sum();
        let shares: Vec<f64> = open.iter().map(|&c| proportions[c].max(1e-12) / total).collect();
        let want = apportion(&shares, remaining);
        let mut placed = 0;
        for (&c, w) in open.iter().zip(want) {
            let add = w.min(available[c] - counts[c]);
            counts[c] += add;
            placed += add;
        }
        remaining -= placed;
        open.retain(|&c| counts[c] < available[c]);
        if placed == 0 {
            // Hand out one item at a time to whichever classes still have room.
            for &c in &open {
                if remaining == 0 {
                    break;
                }
                counts[c] += 1;
                remaining -= 1;
            }
            open.retain(|&c| counts[c] < available[c]);
        }
    }
    counts
}

/// Carve `K` expert datasets out of `pool`.
///
/// Each expert draws class proportions from `Dirichlet(δ·1_C)` and samples
/// exactly `per_expert_budget` items without replacement, matching the
/// proportions up to integer rounding. Different experts may share items.
pub fn dirichlet_split<R: Rng + ?Sized>(
    pool: &Dataset,
    classes: usize,
    split: &SplitSpec,
    rng: &mut R,
) -> Result<Vec<ExpertSplit>> {
    split.validate()?;
    let labels = pool
        .labels()
        .ok_or_else(|| GlueError::Data("pool needs class labels".into()))?;
    if split.per_expert_budget > pool.len() {
        return Err(GlueError::Config(format!(
            "budget {} exceeds pool size {}",
            split.per_expert_budget,
            pool.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(GlueError::Label(format!("label {y} outside [0, {classes})")));
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(GlueError::Data(format!("pool has no items of class {c}")));
    }
    let available: Vec<usize> = by_class.iter().map(Vec::len).collect();

    let mut experts = Vec::with_capacity(split.k);
    for _ in 0..split.k {
        let mut attempt = 0;
        let (proportions, counts, rescaled) = loop {
            let p = sample_dirichlet(split.dirichlet_concentration, classes, rng);
            let counts = apportion(&p, split.per_expert_budget);
            if counts.iter().zip(&available).all(|(n, a)| n <= a) {
                break (p, counts, false);
            }
            attempt += 1;
            if attempt >= 10 {
                let counts = rescale_to_available(&p, &available, split.per_expert_budget);
                break (p, counts, true);
            }
        };
        let mut indices = Vec::with_capacity(split.per_expert_budget);
        for (c, &n) in counts.iter().enumerate() {
            indices.extend(by_class[c].choose_multiple(rng, n).copied());
        }
        indices.shuffle(rng);
        experts.push(ExpertSplit {
            data: pool.select(&indices),
            proportions,
            counts,
            indices,
            rescaled,
        });
    }
    Ok(experts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Batch, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(per_class: &[usize]) -> Dataset {
        let labels: Vec<usize> = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        let n = labels.len();
        Batch::classification(Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(), labels).unwrap()
    }

    #[test]
    fn apportion_sums_to_budget() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn dirichlet_sample_lies_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for conc in [1e-3, 0.5, 1.0, 1e6] {
            let p = sample_dirichlet(conc, 5, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn exhausted_class_is_rescaled_and_flagged() {
        // Class 0 has only 3 items; with tiny concentration most draws put
        // nearly everything on one class.
        let pool = pool(&[3, 200]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = SplitSpec {
            k: 30,
            dirichlet_concentration: 0.01,
            per_expert_budget: 50,
            seed: 0,
        };
        let experts = dirichlet_split(&pool, 2, &spec, &mut rng).unwrap();
        for e in &experts {
            assert_eq!(e.data.len(), 50);
            assert!(e.counts[0] <= 3);
        }
    }

    #[test]
    fn budget_larger_than_pool_is_config_error() {
        let pool = pool(&[5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = SplitSpec {
            per_expert_budget: 11,
            ..SplitSpec::default()
        };
        assert!(matches!(
            dirichlet_split(&pool, 2, &spec, &mut rng),
            Err(GlueError::Config(_))
        ));
    }

    #[test]
    fn missing_class_is_data_error() {
        let pool = pool(&[5, 0, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = SplitSpec {
            per_expert_budget: 4,
            ..SplitSpec::default()
        };
        assert!(matches!(
            dirichlet_split(&pool, 3, &spec, &mut rng),
            Err(GlueError::Data(_))
        ));
    }
}
