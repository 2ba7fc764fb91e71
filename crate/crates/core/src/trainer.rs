//! SGD with momentum, the step learning-rate schedule, the epoch loop, and
//! evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::centers::ClassCenters;
use crate::data::{jitter, stratified_folds, Dataset};
use crate::error::{check_len, Error, Result};
use crate::model::ModelConfig;
use crate::nss::{select_negatives, ConfusionStats, NssMode};
use crate::numeric::Rng;
use crate::objective::{MarginMode, Network, Objective};

const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_JITTER: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub nss: NssMode,
    pub margin_mode: MarginMode,
    pub fixed_margin: f64,
    pub lr: f64,
    pub center_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    /// Feature-space augmentation noise applied to every training batch.
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            nss: NssMode::Mm,
            margin_mode: MarginMode::Adaptive,
            fixed_margin: 4.0,
            lr: 0.05,
            center_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            batch_size: 32,
            jitter_std: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, c_d: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.margin_mode == MarginMode::Fixed
            && !(self.fixed_margin > 0.0 && self.fixed_margin <= c_d as f64)
        {
            return bad(format!(
                "fixed_margin must lie in (0, c_d = {c_d}], got {}",
                self.fixed_margin
            ));
        }
        if !(self.lr > 0.0) || !(self.center_lr > 0.0) {
            return bad("lr and center_lr must be positive".into());
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.jitter_std >= 0.0) {
            return bad("weight_decay and jitter_std must be non-negative".into());
        }
        if self.epochs == 0 || self.lr_decay_every == 0 || self.batch_size == 0 {
            return bad("epochs, lr_decay_every and batch_size must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            margin_mode: self.margin_mode,
            fixed_margin: self.fixed_margin,
        }
    }

    /// Multiplier the schedule applies at `epoch`.
    pub fn schedule_factor(&self, epoch: usize) -> f64 {
        self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `lr * factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.schedule_factor(epoch)
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    param: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len("sgd_step velocity", param.len(), velocity.len())?;
    check_len("sgd_step grad", param.len(), grad.len())?;
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iter: usize,
    pub epoch: usize,
    pub ce: f64,
    pub metric: f64,
    pub total: f64,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "iter,epoch,ce,metric,total,lr";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.epoch, r.ce, r.metric, r.total, r.lr
        );
    }
    out
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub centers: ClassCenters,
    pub model_velocity: crate::model::ModelParams,
    pub attention_velocity: crate::attention::AttentionParams,
    pub stats: ConfusionStats,
    pub epoch: usize,
    pub iteration: usize,
    /// Samples whose true-class probability had to be clamped before `ln`.
    pub numerical_warnings: usize,
    rng: Rng,
}

impl TrainState {
    pub fn new(
        config: ModelConfig,
        attention_mode: AttentionMode,
        attention_reduction: usize,
        seed: u64,
    ) -> Result<Self> {
        let rng = Rng::new(seed);
        let net = Network::init(config, attention_mode, attention_reduction, &rng)?;
        let centers = ClassCenters::init(config.k_classes, config.c_d, &mut rng.fork(3))?;
        Ok(Self {
            model_velocity: net.model.zeros_like(),
            attention_velocity: net.attention.zeros_like(),
            stats: ConfusionStats::new(config.k_classes),
            net,
            centers,
            epoch: 0,
            iteration: 0,
            numerical_warnings: 0,
            rng,
        })
    }

    /// Sample order for `epoch`, derived from the seed alone.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        epoch_order(&self.rng, epoch, n)
    }
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(root: &Rng, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    root.fork(STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
    order
}

/// Curve rows and misclassification statistics of one epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub rows: Vec<CurveRow>,
    /// `S` as it stood at the end of the epoch, before the reset.
    pub stats: ConfusionStats,
    /// Every `(label, prediction)` pair the epoch observed, in order.
    pub observed: Vec<(usize, usize)>,
}

/// Runs one epoch over `dataset`.
pub fn train_epoch(state: &mut TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<EpochReport> {
    let cfg = *state.net.config();
    config.validate(cfg.c_d)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_len("dataset feature dimension", cfg.d_in, dataset.dim())?;
    if dataset.k_classes != cfg.k_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, model expects {}",
            dataset.k_classes, cfg.k_classes
        )));
    }

    let epoch = state.epoch;
    let lr = lr_at(epoch, config);
    let center_lr = config.center_lr * config.schedule_factor(epoch);
    let objective = config.objective();
    let order = state.epoch_order(epoch, dataset.len());
    let mut jitter_rng = state.rng.fork(STREAM_JITTER + epoch as u64);

    state.stats.reset();
    let mut rows = Vec::with_capacity(dataset.len().div_ceil(config.batch_size));
    let mut observed = Vec::with_capacity(dataset.len());

    for chunk in order.chunks(config.batch_size) {
        let clean = dataset.batch(chunk)?;
        let batch = if config.jitter_std > 0.0 {
            jitter(&clean, config.jitter_std, &mut jitter_rng)
        } else {
            clean
        };
        let traces = state.net.forward(&batch)?;
        let predictions: Vec<usize> = traces.iter().map(|t| t.prediction).collect();
        observed.extend(batch.labels.iter().copied().zip(predictions.iter().copied()));
        let embeddings: Vec<&[f64]> = traces.iter().map(|t| t.embedding.as_slice()).collect();
        let negatives = select_negatives(
            config.nss,
            &embeddings,
            &batch.labels,
            &predictions,
            &state.centers,
            &mut state.stats,
        )?;
        let eval = objective.evaluate(&state.net, &state.centers, &batch, &traces, negatives.as_ref())?;
        state.numerical_warnings += eval.clamped;
        let grads = eval.grads;

        for ((p, v), g) in state
            .net
            .model
            .arrays_mut()
            .into_iter()
            .zip(state.model_velocity.arrays_mut())
            .zip(grads.model.arrays())
        {
            sgd_step(p, v, g, lr, config.momentum, config.weight_decay)?;
        }
        if grads.metric_active || state.net.attention_mode.pixel() {
            for ((p, v), g) in state
                .net
                .attention
                .arrays_mut()
                .into_iter()
                .zip(state.attention_velocity.arrays_mut())
                .zip(grads.attention.arrays())
            {
                sgd_step(p, v, g, lr, config.momentum, config.weight_decay)?;
            }
        }
        if grads.metric_active {
            let centers = &mut state.centers;
            sgd_step(
                &mut centers.values,
                &mut centers.velocity,
                &grads.centers,
                center_lr,
                config.momentum,
                config.weight_decay,
            )?;
        }

        rows.push(CurveRow {
            iter: state.iteration,
            epoch,
            ce: eval.breakdown.ce,
            metric: eval.breakdown.metric,
            total: eval.breakdown.total,
            lr,
        });
        state.iteration += 1;
    }

    let stats = state.stats.clone();
    state.stats.reset();
    state.epoch += 1;
    Ok(EpochReport {
        rows,
        stats,
        observed,
    })
}

/// Trains for `config.epochs` epochs.
pub fn fit(state: &mut TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochReport>> {
    (0..config.epochs)
        .map(|_| train_epoch(state, dataset, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub mean_per_class_accuracy: f64,
    /// Row-major `K x K`; rows are true classes.
    pub confusion: Vec<u64>,
    pub intra_class_compactness: f64,
    pub inter_class_separation: f64,
}

impl MetricsReport {
    pub fn k(&self) -> usize {
        self.per_class_accuracy.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Metrics from predictions and embeddings. Classes without samples get
    /// accuracy 0 and are left out of the per-class mean.
    pub fn from_predictions(
        k: usize,
        labels: &[usize],
        predictions: &[usize],
        embeddings: &[Vec<f64>],
    ) -> Result<Self> {
        check_len("metrics predictions", labels.len(), predictions.len())?;
        check_len("metrics embeddings", labels.len(), embeddings.len())?;
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut confusion = vec![0u64; k * k];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t * k + p] += 1;
        }
        let total: u64 = confusion.iter().sum();
        let correct: u64 = (0..k).map(|c| confusion[c * k + c]).sum();
        let mut per_class = vec![0.0; k];
        let mut present = 0usize;
        let mut per_class_sum = 0.0;
        for c in 0..k {
            let support: u64 = confusion[c * k..(c + 1) * k].iter().sum();
            if support > 0 {
                per_class[c] = confusion[c * k + c] as f64 / support as f64;
                per_class_sum += per_class[c];
                present += 1;
            }
        }

        // geometry, measured against the empirical class means
        let dim = embeddings[0].len();
        let mut means = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (e, &y) in embeddings.iter().zip(labels) {
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(e) {
                *m += v;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            if n > 0 {
                m.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let compactness = embeddings
            .iter()
            .zip(labels)
            .map(|(e, &y)| sq(e, &means[y]))
            .sum::<f64>()
            / labels.len() as f64;
        let mut separation = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                if counts[a] > 0 && counts[b] > 0 {
                    separation = separation.min(sq(&means[a], &means[b]));
                }
            }
        }
        if !separation.is_finite() {
            separation = 0.0;
        }

        Ok(Self {
            overall_accuracy: correct as f64 / total as f64,
            per_class_accuracy: per_class,
            mean_per_class_accuracy: per_class_sum / present as f64,
            confusion,
            intra_class_compactness: compactness,
            inter_class_separation: separation,
        })
    }

    /// Element-wise mean of several reports; confusion counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::EmptyDataset)?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let k = first.k();
        Ok(Self {
            overall_accuracy: avg(&|r| r.overall_accuracy),
            per_class_accuracy: (0..k)
                .map(|c| avg(&|r| r.per_class_accuracy[c]))
                .collect(),
            mean_per_class_accuracy: avg(&|r| r.mean_per_class_accuracy),
            confusion: (0..k * k)
                .map(|i| reports.iter().map(|r| r.confusion[i]).sum())
                .collect(),
            intra_class_compactness: avg(&|r| r.intra_class_compactness),
            inter_class_separation: avg(&|r| r.inter_class_separation),
        })
    }
}

/// Forward-only evaluation.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<MetricsReport> {
    let traces = net.forward(&dataset.as_batch()?)?;
    let predictions: Vec<usize> = traces.iter().map(|t| t.prediction).collect();
    let embeddings: Vec<Vec<f64>> = traces.into_iter().map(|t| t.embedding).collect();
    MetricsReport::from_predictions(dataset.k_classes, &dataset.labels, &predictions, &embeddings)
}

#[derive(Debug, Clone)]
pub struct KFoldReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub warnings: Vec<String>,
}

/// Stratified k-fold cross-validation; every fold trains a fresh state from
/// the same seed.
pub fn kfold(
    dataset: &Dataset,
    folds: usize,
    model: ModelConfig,
    attention_mode: AttentionMode,
    attention_reduction: usize,
    config: &TrainConfig,
) -> Result<KFoldReport> {
    let root = Rng::new(config.seed);
    let (parts, warnings) =
        stratified_folds(&dataset.labels, dataset.k_classes, folds, &mut root.fork(99))?;
    let mut reports = Vec::with_capacity(folds);
    for (f, held_out) in parts.iter().enumerate() {
        let mut is_held = vec![false; dataset.len()];
        held_out.iter().for_each(|&i| is_held[i] = true);
        let train_idx: Vec<usize> = (0..dataset.len()).filter(|&i| !is_held[i]).collect();
        let train = dataset.subset(&train_idx)?;
        let valid = dataset.subset(held_out)?;
        let mut state = TrainState::new(
            model,
            attention_mode,
            attention_reduction,
            config.seed.wrapping_add(f as u64),
        )?;
        fit(&mut state, &train, config)?;
        reports.push(evaluate(&state.net, &valid)?);
    }
    Ok(KFoldReport {
        mean: MetricsReport::mean(&reports)?,
        folds: reports,
        warnings,
    })
}
