//! Negative-sample selection.
//!
//! * MS: synthesizes the negative per embedding dimension from the rival
//!   center element nearest to the sample in sigmoid-squashed space.
//! * NS: uses the model's predictions; a misclassified sample takes the
//!   predicted class center, a correct one takes the class that has most
//!   often stolen its label this epoch.
//! * MM: NS for misclassified samples, MS for correct ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::centers::ClassCenters;
use crate::error::{check_len, Error, Result};
use crate::numeric::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NssMode {
    /// No metric term at all (classification-only baseline).
    None,
    Ms,
    Ns,
    #[default]
    Mm,
}

impl NssMode {
    pub fn uses_stats(self) -> bool {
        matches!(self, NssMode::Ns | NssMode::Mm)
    }
}

impl fmt::Display for NssMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NssMode::None => "none",
            NssMode::Ms => "ms",
            NssMode::Ns => "ns",
            NssMode::Mm => "mm",
        })
    }
}

impl FromStr for NssMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NssMode::None),
            "ms" => Ok(NssMode::Ms),
            "ns" => Ok(NssMode::Ns),
            "mm" => Ok(NssMode::Mm),
            other => Err(Error::InvalidConfig(format!(
                "nss must be one of none|ms|ns|mm, got {other:?}"
            ))),
        }
    }
}

/// Running `K x K` count matrix: `counts[t][p]` samples of true class `t`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionStats {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionStats {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn record(&mut self, labels: &[usize], predictions: &[usize]) -> Result<()> {
        check_len("record_confusion", labels.len(), predictions.len())?;
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= self.k || p >= self.k {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: self.k,
                });
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// CSV: one row per true class, one column per predicted class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|p| self.get(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn record_confusion(
    stats: &mut ConfusionStats,
    labels: &[usize],
    predictions: &[usize],
) -> Result<()> {
    stats.record(labels, predictions)
}

/// The class that most often absorbed samples of class `t`; lowest index on
/// ties. A row with no off-diagonal counts falls back to the rival center
/// nearest to center `t` (squared Euclidean, raw space).
pub fn hardest_rival(stats: &ConfusionStats, t: usize, centers: &ClassCenters) -> usize {
    let mut best: Option<(usize, u64)> = None;
    for k in (0..stats.k).filter(|&k| k != t) {
        let c = stats.get(t, k);
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    if let Some((k, _)) = best {
        return k;
    }
    nearest_rival_center(centers, t)
}

fn nearest_rival_center(centers: &ClassCenters, t: usize) -> usize {
    let own = centers.row(t);
    let mut best = (usize::MAX, f64::INFINITY);
    for k in (0..centers.k()).filter(|&k| k != t) {
        let d: f64 = own
            .iter()
            .zip(centers.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Per-sample negative prototypes together with the class each element was
/// taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeAssignment {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    sources: Vec<Vec<usize>>,
}

impl NegativeAssignment {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            sources: Vec::new(),
        }
    }

    /// Assembles negatives from per-dimension source classes.
    pub fn from_sources(centers: &ClassCenters, sources: Vec<Vec<usize>>) -> Self {
        let vectors = sources
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &k)| centers.get(k, j))
                    .collect()
            })
            .collect();
        Self {
            dim: centers.dim(),
            vectors,
            sources,
        }
    }

    /// Same source classes, values re-read from `centers`.
    pub fn regather(&self, centers: &ClassCenters) -> Self {
        Self::from_sources(centers, self.sources.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn sources(&self, i: usize) -> &[usize] {
        &self.sources[i]
    }

    #[inline]
    pub fn source(&self, i: usize, j: usize) -> usize {
        self.sources[i][j]
    }
}

fn check_inputs(embeddings: &[&[f64]], labels: &[usize], centers: &ClassCenters) -> Result<()> {
    check_len("nss labels", embeddings.len(), labels.len())?;
    for (e, &y) in embeddings.iter().zip(labels) {
        check_len("nss embedding", centers.dim(), e.len())?;
        if y >= centers.k() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: centers.k(),
            });
        }
    }
    Ok(())
}

/// Per-dimension argmin over rival classes of `(sigmoid(e_j) - sigmoid(c_kj))^2`.
fn synthesize(embedding: &[f64], label: usize, centers: &ClassCenters) -> Vec<usize> {
    embedding
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            let se = sigmoid(e);
            let mut best = (usize::MAX, f64::INFINITY);
            for k in (0..centers.k()).filter(|&k| k != label) {
                let diff = se - sigmoid(centers.get(k, j));
                let eta = diff * diff;
                if eta < best.1 {
                    best = (k, eta);
                }
            }
            best.0
        })
        .collect()
}

pub fn ms_nss(
    embeddings: &[&[f64]],
    labels: &[usize],
    centers: &ClassCenters,
) -> Result<NegativeAssignment> {
    check_inputs(embeddings, labels, centers)?;
    let sources = embeddings
        .iter()
        .zip(labels)
        .map(|(e, &y)| synthesize(e, y, centers))
        .collect();
    Ok(NegativeAssignment::from_sources(centers, sources))
}

/// Records the batch into `stats`, then assigns negatives from predictions
/// and the updated statistics.
pub fn ns_nss(
    embeddings: &[&[f64]],
    labels: &[usize],
    predictions: &[usize],
    centers: &ClassCenters,
    stats: &mut ConfusionStats,
) -> Result<NegativeAssignment> {
    check_inputs(embeddings, labels, centers)?;
    stats.record(labels, predictions)?;
    let dim = centers.dim();
    let sources = labels
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| {
            let class = if p != y {
                p
            } else {
                hardest_rival(stats, y, centers)
            };
            vec![class; dim]
        })
        .collect();
    Ok(NegativeAssignment::from_sources(centers, sources))
}

/// Records the batch into `stats`; misclassified samples take the predicted
/// center, correct ones a synthesized negative.
pub fn mm_nss(
    embeddings: &[&[f64]],
    labels: &[usize],
    predictions: &[usize],
    centers: &ClassCenters,
    stats: &mut ConfusionStats,
) -> Result<NegativeAssignment> {
    check_inputs(embeddings, labels, centers)?;
    stats.record(labels, predictions)?;
    let dim = centers.dim();
    let sources = embeddings
        .iter()
        .zip(labels.iter().zip(predictions))
        .map(|(e, (&y, &p))| {
            if p != y {
                vec![p; dim]
            } else {
                synthesize(e, y, centers)
            }
        })
        .collect();
    Ok(NegativeAssignment::from_sources(centers, sources))
}

/// Dispatches on `mode`. `NssMode::None` yields `None`.
pub fn select_negatives(
    mode: NssMode,
    embeddings: &[&[f64]],
    labels: &[usize],
    predictions: &[usize],
    centers: &ClassCenters,
    stats: &mut ConfusionStats,
) -> Result<Option<NegativeAssignment>> {
    Ok(match mode {
        NssMode::None => None,
        NssMode::Ms => Some(ms_nss(embeddings, labels, centers)?),
        NssMode::Ns => Some(ns_nss(embeddings, labels, predictions, centers, stats)?),
        NssMode::Mm => Some(mm_nss(embeddings, labels, predictions, centers, stats)?),
    })
}
