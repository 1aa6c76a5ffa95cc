//! Desk-scale synthetic datasets with a shifted target domain.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::nn::{Batch, Dataset, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    GaussianMixture,
    TwoSpirals,
    /// CSV with feature columns followed by an integer label column.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    /// Length of the per-class offset added to target-domain class centres.
    pub mean_shift_scale: f64,
    /// Rotation applied to every consecutive coordinate pair of target inputs.
    pub rotation_angle: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            mean_shift_scale: 1.5,
            rotation_angle: 0.5,
        }
    }
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            mean_shift_scale: 0.0,
            rotation_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    /// Source-domain pool the experts are carved from.
    pub source_pool: usize,
    /// Target-domain set used to learn the mixture.
    pub alpha: usize,
    /// Target-domain validation / proxy set.
    pub validation: usize,
    /// Target-domain set used for fine-tuning.
    pub finetune: usize,
    /// Class-balanced target-domain test set.
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source_pool: 4000,
            alpha: 2000,
            validation: 500,
            finetune: 1000,
            test: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub d_in: usize,
    pub classes: usize,
    pub counts: SplitCounts,
    pub domain_shift: DomainShift,
    /// Distance of class centres from the origin.
    pub class_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            path: None,
            d_in: 20,
            classes: 5,
            counts: SplitCounts::default(),
            domain_shift: DomainShift::default(),
            class_separation: 2.5,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if [c.source_pool, c.alpha, c.validation, c.finetune, c.test].contains(&0) {
            return Err(GlueError::Config("every split count must be positive".into()));
        }
        if self.classes < 2 {
            return Err(GlueError::Config("need at least two classes".into()));
        }
        if self.d_in == 0 && self.kind != DatasetKind::File {
            return Err(GlueError::Config("input dimension must be positive".into()));
        }
        if self.kind == DatasetKind::TwoSpirals && self.d_in < 2 {
            return Err(GlueError::Config("spirals need at least two input dimensions".into()));
        }
        let s = &self.domain_shift;
        if !(s.mean_shift_scale.is_finite() && s.rotation_angle.is_finite()) {
            return Err(GlueError::Config("domain shift must be finite".into()));
        }
        if !(self.noise_std >= 0.0 && self.class_separation.is_finite()) {
            return Err(GlueError::Config("invalid noise or separation".into()));
        }
        Ok(())
    }
}

/// Source pool plus the four disjoint target-domain splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub classes: usize,
    pub source_pool: Dataset,
    pub alpha: Dataset,
    pub validation: Dataset,
    pub finetune: Dataset,
    pub test: Dataset,
}

impl SynthData {
    pub const SPLITS: [&'static str; 5] = ["source", "alpha", "validation", "finetune", "test"];

    pub fn split(&self, name: &str) -> Option<&Dataset> {
        Some(match name {
            "source" => &self.source_pool,
            "alpha" => &self.alpha,
            "validation" => &self.validation,
            "finetune" => &self.finetune,
            "test" => &self.test,
            _ => return None,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for name in Self::SPLITS {
            write_csv(&dir.join(format!("{name}.csv")), self.split(name).unwrap())?;
        }
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_vec_pretty(&serde_json::json!({"classes": self.classes}))?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let classes = meta["classes"]
            .as_u64()
            .ok_or_else(|| GlueError::Data("meta.json lacks classes".into()))? as usize;
        let load = |name: &str| read_csv(&dir.join(format!("{name}.csv")));
        Ok(Self {
            classes,
            source_pool: load("source")?,
            alpha: load("alpha")?,
            validation: load("validation")?,
            finetune: load("finetune")?,
            test: load("test")?,
        })
    }
}

/// Class-balanced labels: `n / C` per class with the remainder going to the
/// lowest class indices, in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotate every consecutive coordinate pair `(0,1), (2,3), …` by `angle`.
pub fn rotate_pairs(x: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

/// Class-conditional generator. `shift` selects the target domain.
struct Generator<'a> {
    spec: &'a DatasetSpec,
    centres: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a DatasetSpec, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.d_in;
        let centres = (0..spec.classes)
            .map(|_| {
                random_unit(d, rng)
                    .into_iter()
                    .map(|v| v * spec.class_separation)
                    .collect()
            })
            .collect();
        let shifts = (0..spec.classes).map(|_| random_unit(d, rng)).collect();
        Self { spec, centres, shifts }
    }

    fn draw(&self, label: usize, target: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let spec = self.spec;
        let d = spec.d_in;
        let mut x: Vec<f64> = match spec.kind {
            DatasetKind::GaussianMixture => (0..d)
                .map(|i| self.centres[label][i] + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            DatasetKind::TwoSpirals => {
                let t: f64 = rng.random::<f64>();
                let r = spec.class_separation * (0.2 + t);
                let theta =
                    1.5 * std::f64::consts::TAU * t + std::f64::consts::TAU * label as f64 / spec.classes as f64;
                let mut x = vec![r * theta.cos(), r * theta.sin()];
                x.iter_mut()
                    .for_each(|v| *v += 0.1 * spec.noise_std * rng.sample::<f64, _>(StandardNormal));
                x.extend((2..d).map(|_| spec.noise_std * rng.sample::<f64, _>(StandardNormal)));
                x
            }
            DatasetKind::File => unreachable!("file datasets are not generated"),
        };
        if target {
            apply_shift(&mut x, &self.shifts[label], &spec.domain_shift);
        }
        x
    }

    fn dataset(&self, n: usize, target: bool, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let labels = balanced_labels(n, self.spec.classes, rng);
        let mut data = Vec::with_capacity(n * self.spec.d_in);
        for &y in &labels {
            data.extend(self.draw(y, target, rng));
        }
        Batch::classification(Matrix::new(n, self.spec.d_in, data)?, labels)
    }
}

fn apply_shift(x: &mut [f64], offset: &[f64], shift: &DomainShift) {
    for (v, o) in x.iter_mut().zip(offset) {
        *v += shift.mean_shift_scale * o;
    }
    rotate_pairs(x, shift.rotation_angle);
}

/// Generate the source pool and the target-domain splits. Deterministic
/// given `spec.seed`.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.kind == DatasetKind::File {
        return from_file(spec, &mut rng);
    }
    let generator = Generator::new(spec, &mut rng);
    let c = &spec.counts;
    Ok(SynthData {
        classes: spec.classes,
        source_pool: generator.dataset(c.source_pool, false, &mut rng)?,
        alpha: generator.dataset(c.alpha, true, &mut rng)?,
        validation: generator.dataset(c.validation, true, &mut rng)?,
        finetune: generator.dataset(c.finetune, true, &mut rng)?,
        test: generator.dataset(c.test, true, &mut rng)?,
    })
}

/// Split a labelled CSV into the five sets; the target splits receive the
/// configured rotation (per-class offsets need a generator and are skipped).
fn from_file(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<SynthData> {
    let path = spec
        .path
        .as_ref()
        .ok_or_else(|| GlueError::Config("file dataset needs a path".into()))?;
    let all = read_csv(path)?;
    let c = &spec.counts;
    let needed = c.source_pool + c.alpha + c.validation + c.finetune + c.test;
    if all.len() < needed {
        return Err(GlueError::Data(format!("{} rows in file, {needed} needed", all.len())));
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(rng);
    let mut cursor = 0;
    let mut take = |n: usize, target: bool| {
        let mut part = all.select(&idx[cursor..cursor + n]);
        cursor += n;
        if target {
            for r in 0..part.len() {
                rotate_pairs(part.inputs.row_mut(r), spec.domain_shift.rotation_angle);
            }
        }
        part
    };
    Ok(SynthData {
        classes: spec.classes,
        source_pool: take(c.source_pool, false),
        alpha: take(c.alpha, true),
        validation: take(c.validation, true),
        finetune: take(c.finetune, true),
        test: take(c.test, true),
    })
}

/// Write a classification dataset as CSV: `x0,…,x{d-1},label`.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let labels = data
        .labels()
        .ok_or_else(|| GlueError::Data("only classification sets are written as CSV".into()))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (r, y) in labels.iter().enumerate() {
        let mut rec: Vec<String> = data.inputs.row(r).iter().map(|v| format!("{v:?}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let width = rdr.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(GlueError::Data(format!(
            "{}: need features and a label",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| GlueError::Data(format!("{}:{}: bad {what}", path.display(), line + 2));
        for field in rec.iter().take(width - 1) {
            data.push(field.trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
        labels.push(rec[width - 1].trim().parse::<usize>().map_err(|_| bad("label"))?);
    }
    let rows = labels.len();
    Batch::classification(Matrix::new(rows, width - 1, data)?, labels)
}

fn csv_err(e: csv::Error) -> GlueError {
    GlueError::Data(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: DatasetKind, d_in: usize, shift: DomainShift) -> DatasetSpec {
        DatasetSpec {
            kind,
            d_in,
            classes: 3,
            counts: SplitCounts {
                source_pool: 60,
                alpha: 30,
                validation: 12,
                finetune: 15,
                test: 30,
            },
            domain_shift: shift,
            seed: 7,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let spec = small(DatasetKind::GaussianMixture, 4, DomainShift::default());
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        assert_eq!(a.source_pool.len(), 60);
        assert_eq!(a.test.len(), 30);
        assert_eq!(a.alpha.dim(), 4);
    }

    #[test]
    fn test_set_is_class_balanced() {
        let spec = small(DatasetKind::TwoSpirals, 2, DomainShift::default());
        let data = synth_dataset(&spec).unwrap();
        let mut counts = [0; 3];
        data.test.labels().unwrap().iter().for_each(|&y| counts[y] += 1);
        assert_eq!(counts, [10, 10, 10]);
    }

    #[test]
    fn rotation_by_pi_negates_pairs() {
        let mut x = [1.5, -2.0];
        rotate_pairs(&mut x, std::f64::consts::PI);
        assert!((x[0] + 1.5).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut spec = small(DatasetKind::GaussianMixture, 4, DomainShift::none());
        spec.classes = 1;
        assert!(matches!(synth_dataset(&spec), Err(GlueError::Config(_))));
        let mut spec = small(DatasetKind::GaussianMixture, 4, DomainShift::none());
        spec.counts.test = 0;
        assert!(matches!(synth_dataset(&spec), Err(GlueError::Config(_))));
        let mut spec = small(DatasetKind::GaussianMixture, 4, DomainShift::none());
        spec.domain_shift.rotation_angle = f64::INFINITY;
        assert!(matches!(synth_dataset(&spec), Err(GlueError::Config(_))));
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let spec = small(DatasetKind::GaussianMixture, 3, DomainShift::default());
        let data = synth_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save_dir(dir.path()).unwrap();
        assert_eq!(SynthData::load_dir(dir.path()).unwrap(), data);
    }
}
