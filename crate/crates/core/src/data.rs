//! Synthetic imbalanced datasets, CSV ingestion, and feature-space
//! augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numeric::{gaussian_vec, Rng};

/// Display names for the seven-class layout.
pub const EXPRESSION_NAMES: [&str; 7] = [
    "Surprise",
    "Fear",
    "Disgust",
    "Happiness",
    "Sadness",
    "Anger",
    "Neutral",
];

/// Default seven-class proportions: one dominant class near 40%, the
/// smallest near 3%.
pub const DEFAULT_PROPORTIONS_7: [f64; 7] = [0.10, 0.03, 0.06, 0.39, 0.16, 0.06, 0.20];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub k_classes: usize,
    pub d_in: usize,
    pub n_total: usize,
    pub proportions: Vec<f64>,
    /// Norm of every class mean.
    pub separation: f64,
    /// Per-coordinate within-class standard deviation.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            k_classes: 7,
            d_in: 32,
            n_total: 2800,
            proportions: DEFAULT_PROPORTIONS_7.to_vec(),
            separation: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Zipf-like skew used when no proportions are given for `k != 7`.
pub fn default_proportions(k: usize) -> Vec<f64> {
    if k == 7 {
        return DEFAULT_PROPORTIONS_7.to_vec();
    }
    let raw: Vec<f64> = (1..=k).map(|r| 1.0 / r as f64).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(Error::InvalidConfig("k_classes must be at least 2".into()));
        }
        if self.d_in == 0 || self.n_total == 0 {
            return Err(Error::InvalidConfig("d_in and n_total must be positive".into()));
        }
        if self.proportions.len() != self.k_classes {
            return Err(Error::InvalidConfig(format!(
                "proportions has {} entries, expected {}",
                self.proportions.len(),
                self.k_classes
            )));
        }
        if self.proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidConfig("proportions must be non-negative".into()));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("proportions sum to {sum}, expected 1")));
        }
        if !(self.separation > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "separation must be positive and noise_std non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k_classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(k_classes: usize, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        crate::error::check_len("Dataset labels", inputs.len(), labels.len())?;
        if let Some(&label) = labels.iter().find(|&&l| l >= k_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: k_classes,
            });
        }
        let class_names = (k_classes == 7)
            .then(|| EXPRESSION_NAMES.iter().map(|s| s.to_string()).collect());
        Ok(Self {
            k_classes,
            inputs,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(
            self.k_classes,
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.k_classes,
        )
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.k_classes)
    }

    /// Header `f0,...,f{D-1},label`; floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim() {
            let _ = write!(out, "f{j},");
        }
        out.push_str("label\n");
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            for v in x {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties in the fractional
/// part go to the lower class index.
pub fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Gaussian blobs around `separation`-scaled random unit directions.
pub fn gen_blobs(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let counts = largest_remainder(config.n_total, &config.proportions);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidConfig(format!(
            "class {k} receives no samples; proportions too skewed for n_total = {}",
            config.n_total
        )));
    }
    let root = Rng::new(config.seed);
    let mut means_rng = root.fork(10);
    let means: Vec<Vec<f64>> = (0..config.k_classes)
        .map(|_| {
            let mut dir = gaussian_vec(&mut means_rng, config.d_in, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= config.separation / norm);
            dir
        })
        .collect();

    let mut noise_rng = root.fork(11);
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(config.n_total);
    let mut labels = Vec::with_capacity(config.n_total);
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let noise = gaussian_vec(&mut noise_rng, config.d_in, config.noise_std);
            inputs.push(means[k].iter().zip(&noise).map(|(m, n)| m + n).collect());
            labels.push(k);
        }
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    root.fork(12).shuffle(&mut order);
    let inputs = order.iter().map(|&i| inputs[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(config.k_classes, inputs, labels)
}

/// Reads `f0,...,f{D-1},label`. With `k_classes == None` the class count is
/// `max(label) + 1` (at least 2).
pub fn load_csv(path: &Path, k_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = columns.len().saturating_sub(1);
    let header_ok = dim >= 1
        && columns.last() == Some(&"label")
        && columns[..dim]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("f{j}"));
    if !header_ok {
        return Err(err(1, format!("expected header f0,...,f{{D-1}},label, got {header:?}")));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(err(
                line_no,
                format!("expected {} cells, found {}", dim + 1, cells.len()),
            ));
        }
        let row = cells[..dim]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(line_no, format!("non-numeric cell {c:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label: usize = cells[dim]
            .parse()
            .map_err(|_| err(line_no, format!("invalid label {:?}", cells[dim])))?;
        if let Some(k) = k_classes {
            if label >= k {
                return Err(err(line_no, format!("label {label} >= {k} classes")));
            }
        }
        inputs.push(row);
        labels.push(label);
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = k_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));
    Dataset::new(k, inputs, labels)
}

/// Adds `N(0, std)` noise to every feature; labels are untouched.
pub fn jitter(batch: &Batch, std: f64, rng: &mut Rng) -> Batch {
    if std == 0.0 {
        return batch.clone();
    }
    let inputs = batch
        .inputs
        .iter()
        .map(|x| {
            let noise = gaussian_vec(rng, x.len(), std);
            x.iter().zip(&noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    Batch {
        inputs,
        labels: batch.labels.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Stratified train/test split. Each class contributes
/// `round(train_fraction * n_c)` samples to train, keeping at least one on
/// each side when the class has two or more samples.
pub fn split(dataset: &Dataset, train_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut warnings = Vec::new();
    let mut in_train = vec![false; dataset.len()];
    for k in 0..dataset.k_classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let n = members.len();
        let n_train = if n == 1 {
            warnings.push(format!("class {k} has a single sample; placed in train"));
            1
        } else {
            ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| in_train[i]).collect();
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| !in_train[i]).collect();
    Ok(Split {
        train: dataset.subset(&train)?,
        test: dataset.subset(&test)?,
        warnings,
    })
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes differ by at most one.
pub fn stratified_folds(
    labels: &[usize],
    k_classes: usize,
    folds: usize,
    rng: &mut Rng,
) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    if folds < 2 || labels.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "need 2 <= folds <= dataset size, got {folds} folds for {} samples",
            labels.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut parts = vec![Vec::new(); folds];
    let mut next = 0;
    for k in 0..k_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if !members.is_empty() && members.len() < folds {
            warnings.push(format!(
                "class {k} has {} samples for {folds} folds; stratification is best-effort",
                members.len()
            ));
        }
        rng.shuffle(&mut members);
        for i in members {
            parts[next % folds].push(i);
            next += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((parts, warnings))
}
