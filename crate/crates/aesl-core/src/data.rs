//! Datasets, incremental protocols, and a synthetic generator whose labels
//! are grounded in an affective latent space.
//!
//! Each label is a prototype point in affective space; an instance draws a
//! latent position, labels switch on with probability decaying in the
//! distance to each prototype, features mix per-label directions with the
//! latent, and the affective ratings observe the latent with noise. The
//! structures the learner exploits (label co-occurrence, affective geometry)
//! are therefore present by construction and known exactly.

use crate::error::{AeslError, Result};
use crate::graph::{cooccurrence_adjacency, RelationGraph};
use crate::numerics::matrix::{squared_distance, Matrix};
use crate::numerics::tape::sigmoid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One task's view of the data: features, multi-hot labels over this task's
/// label ids, and affective ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub label_ids: Vec<usize>,
    pub features: Matrix,
    pub labels: Matrix,
    pub affective: Matrix,
    pub split: Split,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.rows() != n || self.affective.rows() != n {
            return Err(AeslError::validation(format!(
                "row counts disagree: features {n}, labels {}, affective {}",
                self.labels.rows(),
                self.affective.rows()
            )));
        }
        if self.labels.cols() != self.label_ids.len() {
            return Err(AeslError::validation(format!(
                "label matrix has {} columns for {} label ids",
                self.labels.cols(),
                self.label_ids.len()
            )));
        }
        for r in 0..self.labels.rows() {
            for c in 0..self.labels.cols() {
                let v = self.labels.get(r, c);
                if v != 0.0 && v != 1.0 {
                    return Err(AeslError::validation(format!(
                        "label value {v} at row {r}, column {c} is not in {{0, 1}}"
                    )));
                }
            }
        }
        if !self.features.is_finite() || !self.affective.is_finite() {
            return Err(AeslError::validation(
                "features and affective ratings must be finite",
            ));
        }
        Ok(())
    }

    /// Restriction of the label matrix to a subset of global label ids.
    pub fn restrict_labels(&self, ids: &[usize]) -> Result<TaskDataset> {
        let cols: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.label_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| AeslError::invalid(format!("label id {id} not in dataset")))
            })
            .collect::<Result<_>>()?;
        Ok(TaskDataset {
            label_ids: ids.to_vec(),
            features: self.features.clone(),
            labels: self.labels.select_cols(&cols),
            affective: self.affective.clone(),
            split: self.split,
        })
    }
}

/// Incremental protocol Bb-Ii: a base task of `base` labels (possibly zero,
/// meaning equal-size splits) followed by increments of `increment` labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub total_labels: usize,
    pub base: usize,
    pub increment: usize,
}

impl Protocol {
    pub fn name(&self) -> String {
        format!("B{}-I{}", self.base, self.increment)
    }

    /// Ordered label-id sets, one per task. Labels follow id order.
    pub fn split(&self) -> Result<Vec<Vec<usize>>> {
        if self.increment == 0 {
            return Err(AeslError::Config(format!(
                "protocol {}: increment must be positive",
                self.name()
            )));
        }
        if self.base >= self.total_labels {
            return Err(AeslError::Config(format!(
                "protocol {}: base {} must be smaller than the label count {}",
                self.name(),
                self.base,
                self.total_labels
            )));
        }
        let remaining = self.total_labels - self.base;
        if remaining % self.increment != 0 {
            return Err(AeslError::Config(format!(
                "protocol arithmetic failed: {} != {} + k * {} for integer k >= 1",
                self.total_labels, self.base, self.increment
            )));
        }
        let mut tasks = Vec::new();
        let mut next = 0;
        if self.base > 0 {
            tasks.push((0..self.base).collect());
            next = self.base;
        }
        while next < self.total_labels {
            tasks.push((next..next + self.increment).collect());
            next += self.increment;
        }
        Ok(tasks)
    }

    pub fn task_count(&self) -> Result<usize> {
        Ok(self.split()?.len())
    }
}

/// Multi-hot labels from ratings: Y = 1 iff rating >= threshold.
pub fn threshold_ratings(ratings: &Matrix, threshold: f64) -> Result<Matrix> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(AeslError::invalid(format!(
            "rating threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(ratings.map(|r| if r >= threshold { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub num_labels: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_affective_dim")]
    pub affective_dim: usize,
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    #[serde(default = "default_affective_noise")]
    pub affective_noise: f64,
    /// Target mean number of positive labels per instance.
    #[serde(default = "default_cardinality")]
    pub label_cardinality: f64,
    /// Distance decay of label probability around each prototype.
    #[serde(default = "default_sharpness")]
    pub prototype_sharpness: f64,
}

fn default_name() -> String {
    "synthetic".into()
}
fn default_feature_dim() -> usize {
    32
}
fn default_affective_dim() -> usize {
    6
}
fn default_feature_noise() -> f64 {
    0.1
}
fn default_affective_noise() -> f64 {
    0.1
}
fn default_cardinality() -> f64 {
    4.6
}
fn default_sharpness() -> f64 {
    1.5
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.num_labels == 0 {
            return Err(AeslError::Config(
                "generator counts (n_train, n_test, num_labels) must be positive".into(),
            ));
        }
        if self.feature_dim == 0 || self.affective_dim == 0 {
            return Err(AeslError::Config(
                "generator dimensions must be positive".into(),
            ));
        }
        if self.feature_noise < 0.0 || self.affective_noise < 0.0 {
            return Err(AeslError::Config("noise scales must be non-negative".into()));
        }
        if self.label_cardinality <= 0.0 || self.label_cardinality > self.num_labels as f64 {
            return Err(AeslError::Config(format!(
                "target label cardinality must lie in (0, {}]",
                self.num_labels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub config: GeneratorConfig,
    pub train: TaskDataset,
    pub test: TaskDataset,
    /// Co-occurrence graph of the emitted training labels.
    pub oracle_graph: RelationGraph,
    /// One row per label: its position in affective space.
    pub prototypes: Matrix,
}

/// Calibrates the logit offset so the expected label cardinality over the
/// sampled latents hits the target. Monotone in the offset, so bisection.
fn calibrate_offset(distances: &Matrix, sharpness: f64, target: f64) -> f64 {
    let expected = |a: f64| -> f64 {
        let mut acc = 0.0;
        for v in distances.as_slice() {
            acc += sigmoid(a - sharpness * v);
        }
        acc / distances.rows() as f64
    };
    let mut lo = -80.0;
    let mut hi = 80.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Full synthetic dataset plus its oracle structures.
pub fn generate(config: &GeneratorConfig) -> Result<GeneratedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.num_labels;
    let n = config.n_train + config.n_test;

    let prototypes = Matrix::standard_normal(k, config.affective_dim, &mut rng);
    let label_directions = Matrix::standard_normal(k, config.feature_dim, &mut rng);
    let latent_projection =
        Matrix::standard_normal(config.affective_dim, config.feature_dim, &mut rng).scale(0.5);

    const MAX_ATTEMPTS: usize = 10;
    let mut attempt = 0;
    let (latents, labels) = loop {
        attempt += 1;
        let latents = Matrix::standard_normal(n, config.affective_dim, &mut rng);
        let mut distances = Matrix::zeros(n, k);
        for i in 0..n {
            for c in 0..k {
                distances.set(
                    i,
                    c,
                    squared_distance(latents.row(i), prototypes.row(c)).sqrt(),
                );
            }
        }
        let offset = calibrate_offset(&distances, config.prototype_sharpness, config.label_cardinality);
        let mut labels = Matrix::zeros(n, k);
        for i in 0..n {
            for c in 0..k {
                let p = sigmoid(offset - config.prototype_sharpness * distances.get(i, c));
                if rng.gen_bool(p) {
                    labels.set(i, c, 1.0);
                }
            }
        }
        let mut ok = true;
        'check: for c in 0..k {
            for range in [0..config.n_train, config.n_train..n] {
                if range.map(|i| labels.get(i, c)).sum::<f64>() == 0.0 {
                    ok = false;
                    break 'check;
                }
            }
        }
        if ok {
            break (latents, labels);
        }
        if attempt >= MAX_ATTEMPTS {
            return Err(AeslError::validation(format!(
                "generator produced a label with zero positives in {MAX_ATTEMPTS} attempts; \
                 raise label_cardinality or instance counts"
            )));
        }
    };

    // X = mean of present labels' directions + projected latent + noise.
    let mut features = Matrix::zeros(n, config.feature_dim);
    for i in 0..n {
        let row_labels = labels.row(i);
        let present = row_labels.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
        let mut row = vec![0.0; config.feature_dim];
        for (c, &y) in row_labels.iter().enumerate() {
            if y == 1.0 {
                for (d, value) in row.iter_mut().enumerate() {
                    *value += label_directions.get(c, d) / present;
                }
            }
        }
        for d in 0..config.feature_dim {
            let mut acc = row[d];
            for (a, _) in (0..config.affective_dim).map(|a| (a, ())) {
                acc += latents.get(i, a) * latent_projection.get(a, d);
            }
            let noise: f64 = rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut rng,
            );
            features.set(i, d, acc + config.feature_noise * noise);
        }
    }

    let mut affective = Matrix::zeros(n, config.affective_dim);
    for i in 0..n {
        for a in 0..config.affective_dim {
            let noise: f64 =
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            affective.set(i, a, latents.get(i, a) + config.affective_noise * noise);
        }
    }

    let train_rows: Vec<usize> = (0..config.n_train).collect();
    let test_rows: Vec<usize> = (config.n_train..n).collect();
    let all_ids: Vec<usize> = (0..k).collect();
    let train = TaskDataset {
        label_ids: all_ids.clone(),
        features: features.select_rows(&train_rows),
        labels: labels.select_rows(&train_rows),
        affective: affective.select_rows(&train_rows),
        split: Split::Train,
    };
    let test = TaskDataset {
        label_ids: all_ids.clone(),
        features: features.select_rows(&test_rows),
        labels: labels.select_rows(&test_rows),
        affective: affective.select_rows(&test_rows),
        split: Split::Test,
    };
    let oracle_graph = cooccurrence_adjacency(&train.labels, &all_ids)?;
    Ok(GeneratedDataset {
        config: config.clone(),
        train,
        test,
        oracle_graph,
        prototypes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub features_train: String,
    pub features_test: String,
    pub labels_train: String,
    pub labels_test: String,
    pub affective_train: String,
    pub affective_test: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        DatasetFiles {
            features_train: "features_train.csv".into(),
            features_test: "features_test.csv".into(),
            labels_train: "labels_train.csv".into(),
            labels_test: "labels_test.csv".into(),
            affective_train: "affective_train.csv".into(),
            affective_test: "affective_test.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "K")]
    pub num_labels: usize,
    #[serde(rename = "d_aff")]
    pub affective_dim: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    /// Rating threshold used when labels came from graded annotations.
    /// Informational for generated data, which emits multi-hot labels.
    pub threshold: f64,
    #[serde(default)]
    pub files: DatasetFiles,
}

fn write_csv(path: &Path, prefix: &str, m: &Matrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..m.cols()).map(|c| format!("{prefix}{c}")).collect();
    writer.write_record(&header)?;
    for r in 0..m.rows() {
        let record: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn read_csv(path: &Path, expected_cols: usize) -> Result<Matrix> {
    if !path.exists() {
        return Err(AeslError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != expected_cols {
            return Err(AeslError::validation(format!(
                "{}: row {r} has {} columns, expected {expected_cols}",
                path.display(),
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(expected_cols);
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                AeslError::validation(format!(
                    "{}: row {r}, column {c}: cannot parse '{field}' as a number",
                    path.display()
                ))
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Writes manifest + CSVs + oracle graph + prototypes into `dir`.
pub fn save_dataset(ds: &GeneratedDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let files = DatasetFiles::default();
    let manifest = DatasetManifest {
        name: ds.config.name.clone(),
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        num_labels: ds.config.num_labels,
        affective_dim: ds.config.affective_dim,
        feature_dim: ds.config.feature_dim,
        threshold: 0.5,
        files: files.clone(),
    };
    write_csv(&dir.join(&files.features_train), "f", &ds.train.features)?;
    write_csv(&dir.join(&files.features_test), "f", &ds.test.features)?;
    write_csv(&dir.join(&files.labels_train), "l", &ds.train.labels)?;
    write_csv(&dir.join(&files.labels_test), "l", &ds.test.labels)?;
    write_csv(&dir.join(&files.affective_train), "a", &ds.train.affective)?;
    write_csv(&dir.join(&files.affective_test), "a", &ds.test.affective)?;
    crate::graph::save_graph_json(&ds.oracle_graph, None, &dir.join("oracle_graph.json"))?;
    write_csv(&dir.join("prototypes.csv"), "a", &ds.prototypes)?;
    let manifest_path = dir.join("manifest.json");
    let file = std::fs::File::create(&manifest_path)?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(manifest_path)
}

/// Loads and validates the train/test pair described by a manifest.
///
/// With `standardize` set, affective columns are shifted and scaled to zero
/// mean and unit variance using training-set statistics (applied to both
/// splits); a constant training column is rejected because the teacher
/// geometry would be degenerate. Without it, values are exactly as on disk.
pub fn load_dataset(manifest_path: &Path, standardize: bool) -> Result<Vec<TaskDataset>> {
    let file = std::fs::File::open(manifest_path)
        .map_err(|_| AeslError::MissingFile(manifest_path.display().to_string()))?;
    let manifest: DatasetManifest = serde_json::from_reader(file)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let features_train = read_csv(&dir.join(&manifest.files.features_train), manifest.feature_dim)?;
    let features_test = read_csv(&dir.join(&manifest.files.features_test), manifest.feature_dim)?;
    let labels_train = read_csv(&dir.join(&manifest.files.labels_train), manifest.num_labels)?;
    let labels_test = read_csv(&dir.join(&manifest.files.labels_test), manifest.num_labels)?;
    let mut affective_train =
        read_csv(&dir.join(&manifest.files.affective_train), manifest.affective_dim)?;
    let mut affective_test =
        read_csv(&dir.join(&manifest.files.affective_test), manifest.affective_dim)?;

    for (split, features, rows) in [
        ("train", &features_train, manifest.n_train),
        ("test", &features_test, manifest.n_test),
    ] {
        if features.rows() != rows {
            return Err(AeslError::validation(format!(
                "{split} features have {} rows, manifest says {rows}",
                features.rows()
            )));
        }
    }

    if standardize {
        standardize_affective(&mut affective_train, &mut affective_test)?;
    }

    let ids: Vec<usize> = (0..manifest.num_labels).collect();
    let train = TaskDataset {
        label_ids: ids.clone(),
        features: features_train,
        labels: labels_train,
        affective: affective_train,
        split: Split::Train,
    };
    let test = TaskDataset {
        label_ids: ids,
        features: features_test,
        labels: labels_test,
        affective: affective_test,
        split: Split::Test,
    };
    train.validate()?;
    test.validate()?;
    Ok(vec![train, test])
}

/// Zero mean, unit variance per column, with statistics from the train split.
fn standardize_affective(train: &mut Matrix, test: &mut Matrix) -> Result<()> {
    let n = train.rows() as f64;
    for c in 0..train.cols() {
        let mean = (0..train.rows()).map(|r| train.get(r, c)).sum::<f64>() / n;
        let var = (0..train.rows())
            .map(|r| (train.get(r, c) - mean).powi(2))
            .sum::<f64>()
            / n;
        if var == 0.0 {
            return Err(AeslError::validation(format!(
                "affective dimension {c} is constant on the training set and cannot be standardized"
            )));
        }
        let std = var.sqrt();
        for r in 0..train.rows() {
            train.set(r, c, (train.get(r, c) - mean) / std);
        }
        for r in 0..test.rows() {
            test.set(r, c, (test.get(r, c) - mean) / std);
        }
    }
    Ok(())
}

/// One incremental task: global label ids and the training view restricted
/// to them. All tasks share the instance pool; what changes is which label
/// columns are revealed, which is exactly the partial-label regime.
#[derive(Debug, Clone)]
pub struct IncrementalTask {
    pub index: usize,
    pub label_ids: Vec<usize>,
    pub train: TaskDataset,
}

/// Splits a full training set into an incremental task stream.
pub fn task_stream(full_train: &TaskDataset, protocol: &Protocol) -> Result<Vec<IncrementalTask>> {
    if protocol.total_labels != full_train.label_ids.len() {
        return Err(AeslError::Config(format!(
            "protocol covers {} labels but the dataset has {}",
            protocol.total_labels,
            full_train.label_ids.len()
        )));
    }
    let splits = protocol.split()?;
    splits
        .into_iter()
        .enumerate()
        .map(|(index, ids)| {
            let global: Vec<usize> = ids.iter().map(|&i| full_train.label_ids[i]).collect();
            Ok(IncrementalTask {
                index,
                label_ids: global.clone(),
                train: full_train.restrict_labels(&global)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn proto(total: usize, base: usize, inc: usize) -> Protocol {
        Protocol {
            total_labels: total,
            base,
            increment: inc,
        }
    }

    #[test]
    fn protocol_b0_i9_on_27_labels() {
        let tasks = proto(27, 0, 9).split().unwrap();
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0], (0..9).collect::<Vec<_>>());
        assert_eq!(tasks[1], (9..18).collect::<Vec<_>>());
        assert_eq!(tasks[2], (18..27).collect::<Vec<_>>());
    }

    #[test]
    fn protocol_b15_i3_on_27_labels() {
        let tasks = proto(27, 15, 3).split().unwrap();
        assert_eq!(tasks.len(), 5);
        assert_eq!(tasks[0], (0..15).collect::<Vec<_>>());
        assert_eq!(tasks[1], vec![15, 16, 17]);
        assert_eq!(tasks[4], vec![24, 25, 26]);
    }

    #[test]
    fn protocol_b16_i3_on_28_labels() {
        let tasks = proto(28, 16, 3).split().unwrap();
        assert_eq!(tasks.len(), 5);
        let total: usize = tasks.iter().map(Vec::len).sum();
        assert_eq!(total, 28);
    }

    #[test]
    fn protocol_partitions_all_labels() {
        for (total, base, inc) in [(27, 0, 3), (27, 15, 2), (28, 0, 7), (28, 16, 2), (20, 0, 5)] {
            let tasks = proto(total, base, inc).split().unwrap();
            let mut seen: Vec<usize> = tasks.concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..total).collect::<Vec<_>>());
        }
    }

    #[test]
    fn protocol_rejects_bad_arithmetic() {
        let err = proto(27, 15, 5).split().unwrap_err().to_string();
        assert!(err.contains("27 != 15 + k * 5"), "{err}");
    }

    #[test]
    fn threshold_rating_cases() {
        let ratings = Matrix::from_rows(&[vec![0.12]]).unwrap();
        assert_eq!(threshold_ratings(&ratings, 0.10).unwrap().get(0, 0), 1.0);
        assert_eq!(threshold_ratings(&ratings, 0.15).unwrap().get(0, 0), 0.0);

        let max_plus = Matrix::from_rows(&[vec![0.3, 0.5, 0.2]]).unwrap();
        let y = threshold_ratings(&max_plus, 0.51).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0, 0.0]);

        assert!(threshold_ratings(&ratings, 0.0).is_err());
        assert!(threshold_ratings(&ratings, 1.0).is_err());
    }

    fn small_config(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            name: "test".into(),
            seed,
            n_train: 120,
            n_test: 60,
            num_labels: 8,
            feature_dim: 12,
            affective_dim: 4,
            feature_noise: 0.1,
            affective_noise: 0.1,
            label_cardinality: 3.0,
            prototype_sharpness: 1.5,
        }
    }

    #[test]
    fn generator_is_deterministic_and_well_shaped() {
        let cfg = small_config(5);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.test.labels, b.test.labels);
        assert_eq!(a.train.features.shape(), (120, 12));
        assert_eq!(a.train.labels.shape(), (120, 8));
        assert_eq!(a.test.affective.shape(), (60, 4));
        a.train.validate().unwrap();
        a.test.validate().unwrap();
    }

    #[test]
    fn generator_hits_target_cardinality_within_20_percent() {
        let mut ratios = Vec::new();
        for seed in 0..10 {
            let cfg = small_config(seed);
            let ds = generate(&cfg).unwrap();
            let mean = ds.train.labels.sum() / ds.train.len() as f64;
            ratios.push(mean / cfg.label_cardinality);
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(
            (0.8..=1.2).contains(&median),
            "median cardinality ratio {median}"
        );
    }

    #[test]
    fn oracle_graph_matches_recomputation() {
        let ds = generate(&small_config(9)).unwrap();
        let recomputed =
            cooccurrence_adjacency(&ds.train.labels, &ds.train.label_ids).unwrap();
        assert!(
            ds.oracle_graph
                .adjacency
                .max_abs_diff(&recomputed.adjacency)
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn shared_labels_mean_closer_affective_latents() {
        // The property distillation exploits: label overlap and affective
        // proximity are positively rank-correlated.
        let mut correlations = Vec::new();
        for seed in 0..10 {
            let ds = generate(&small_config(seed)).unwrap();
            let t = &ds.train;
            let mut shared = Vec::new();
            let mut neg_dist = Vec::new();
            for i in (0..t.len()).step_by(3) {
                for j in (i + 1..t.len()).step_by(7) {
                    let mut overlap = 0.0;
                    for c in 0..t.labels.cols() {
                        overlap += t.labels.get(i, c) * t.labels.get(j, c);
                    }
                    shared.push(overlap);
                    neg_dist.push(-squared_distance(t.affective.row(i), t.affective.row(j)).sqrt());
                }
            }
            let rs = spearman(&shared, &neg_dist);
            correlations.push(rs);
        }
        correlations.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(correlations[correlations.len() / 2] > 0.0);
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let ra = crate::evaluation::average_ranks(a);
        let rb = crate::evaluation::average_ranks(b);
        crate::graph::pearson(&ra, &rb).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let ds = generate(&small_config(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest, false).unwrap();
        assert_eq!(loaded[0], ds.train);
        assert_eq!(loaded[1], ds.test);
    }

    #[test]
    fn loader_standardizes_affective_with_train_stats() {
        let ds = generate(&small_config(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest, true).unwrap();
        let train = &loaded[0].affective;
        for c in 0..train.cols() {
            let mean = (0..train.rows()).map(|r| train.get(r, c)).sum::<f64>() / train.rows() as f64;
            let var = (0..train.rows())
                .map(|r| (train.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / train.rows() as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn loader_rejects_bad_label_values_with_coordinates() {
        let ds = generate(&small_config(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        // Corrupt one label cell.
        let labels_path = dir.path().join("labels_train.csv");
        let text = std::fs::read_to_string(&labels_path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
        fields[2] = "2".into();
        lines[3] = fields.join(",");
        std::fs::write(&labels_path, lines.join("\n")).unwrap();

        let err = load_dataset(&manifest, false).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("column 2"), "{err}");
    }

    #[test]
    fn loader_names_missing_files() {
        let ds = generate(&small_config(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("affective_test.csv")).unwrap();
        match load_dataset(&manifest, false) {
            Err(AeslError::MissingFile(path)) => assert!(path.contains("affective_test.csv")),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn task_stream_masks_labels_per_task() {
        let ds = generate(&small_config(8)).unwrap();
        let stream = task_stream(&ds.train, &proto(8, 0, 4)).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(stream[0].label_ids, vec![0, 1, 2, 3]);
        assert_eq!(stream[1].label_ids, vec![4, 5, 6, 7]);
        assert_eq!(stream[0].train.labels.cols(), 4);
        assert_eq!(stream[0].train.len(), ds.train.len());
        for r in 0..ds.train.len() {
            for (j, &id) in stream[1].label_ids.iter().enumerate() {
                assert_eq!(stream[1].train.labels.get(r, j), ds.train.labels.get(r, id));
            }
        }
    }
}
