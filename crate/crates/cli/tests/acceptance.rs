//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p tc3l-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use tc3l_cli::commands::{self, prepare_data, run, Prepared, RunOutcome};
use tc3l_cli::config::RunConfig;
use tc3l_core::attention::AttentionParams;
use tc3l_core::data::{gen_blobs, split};
use tc3l_core::losses::{amtc3l, ce_loss, tc3l_fixed};
use tc3l_core::model::{self, Upstream};
use tc3l_core::nss::{hardest_rival, ms_nss, select_negatives};
use tc3l_core::numeric::{sigmoid, softmax};
use tc3l_core::trainer::{curve_csv, epoch_order, lr_at, sgd_step, train_epoch, CurveRow};
use tc3l_core::{
    Activation, AttentionMode, Batch, ClassCenters, ConfusionStats, DataConfig,
    MarginMode, ModelConfig, NegativeAssignment, NssMode, Objective, Rng, TrainConfig, TrainState,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn benchmark_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.conf")
}

fn bench(assignments: &[String]) -> RunConfig {
    RunConfig::load(Some(&benchmark_config()), assignments).expect("benchmark config loads")
}

fn random_centers(rng: &mut Rng, k: usize, dim: usize, scale: f64) -> ClassCenters {
    let values = (0..k * dim).map(|_| rng.uniform_in(-scale, scale)).collect();
    ClassCenters::from_values(k, dim, values).unwrap()
}

/// Any rival class other than `y`.
fn rival(rng: &mut Rng, k: usize, y: usize) -> usize {
    let r = rng.below(k - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

// ---------------------------------------------------------------- positivity

fn positivity() -> Verdict {
    let mut rng = Rng::new(1);
    let mut min_value = f64::INFINITY;
    let mut violations = 0;
    for case in 0..10_000 {
        let m = 1 + rng.below(8);
        let dim = 1 + rng.below(64);
        let k = 2 + rng.below(9);
        // every fourth case pins values to the extremes of the range
        let scale = if case % 4 == 0 { 50.0 } else { rng.uniform_in(0.01, 50.0) };
        let draw = |rng: &mut Rng| {
            if case % 4 == 0 {
                if rng.below(2) == 0 { -50.0 } else { 50.0 }
            } else {
                rng.uniform_in(-scale, scale)
            }
        };
        let centers = ClassCenters::from_values(k, dim, (0..k * dim).map(|_| draw(&mut rng)).collect())
            .unwrap();
        let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
        let embeddings: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| draw(&mut rng)).collect()).collect();
        let weights: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dim).map(|_| sigmoid(rng.uniform_in(-50.0, 50.0))).collect())
            .collect();
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let negatives = if case % 2 == 0 {
            ms_nss(&refs, &labels, &centers).unwrap()
        } else {
            let sources = labels
                .iter()
                .map(|&y| (0..dim).map(|_| rival(&mut rng, k, y)).collect())
                .collect();
            NegativeAssignment::from_sources(&centers, sources)
        };
        let value = amtc3l(&refs, &weights, &labels, &centers, &negatives).unwrap().value;
        if !(value > 0.0 && value.is_finite()) {
            violations += 1;
        }
        min_value = min_value.min(value);
    }
    Verdict::new(
        violations == 0,
        format!("10000 cases, {violations} violations, smallest value {min_value:.3e}"),
    )
}

// ---------------------------------------------------------- gradient fidelity

const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst error per gradient family, tracked by name.
#[derive(Default)]
struct Worst(Vec<(String, f64)>);

impl Worst {
    fn note(&mut self, family: &str, err: f64) {
        match self.0.iter_mut().find(|(f, _)| f == family) {
            Some((_, e)) => *e = e.max(err),
            None => self.0.push((family.to_string(), err)),
        }
    }

    fn max(&self) -> f64 {
        self.0.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Direct checks on the loss functions: embeddings, weights, centers, logits.
fn loss_level_gradients(rng: &mut Rng, worst: &mut Worst) {
    let m = 1 + rng.below(4);
    let dim = 1 + rng.below(6);
    let k = 2 + rng.below(4);
    let centers = random_centers(rng, k, dim, 2.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
    let embeddings: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).collect();
    let weights: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rng.uniform_in(0.05, 0.95)).collect()).collect();
    let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
    let negatives = ms_nss(&refs, &labels, &centers).unwrap();
    // the largest margin keeps every hinge open
    let margin = dim as f64;

    let fixed = tc3l_fixed(&refs, &labels, &centers, &negatives, margin).unwrap();
    let adaptive = amtc3l(&refs, &weights, &labels, &centers, &negatives).unwrap();
    let fixed_at = |emb: &[Vec<f64>], c: &ClassCenters| {
        let r: Vec<&[f64]> = emb.iter().map(Vec::as_slice).collect();
        tc3l_fixed(&r, &labels, c, &negatives.regather(c), margin).unwrap().value
    };
    let adaptive_at = |emb: &[Vec<f64>], w: &[Vec<f64>], c: &ClassCenters| {
        let r: Vec<&[f64]> = emb.iter().map(Vec::as_slice).collect();
        amtc3l(&r, w, &labels, c, &negatives.regather(c)).unwrap().value
    };

    for i in 0..m {
        for j in 0..dim {
            let perturbed = |x: f64| {
                let mut e = embeddings.clone();
                e[i][j] = x;
                e
            };
            let fd = central(|x| fixed_at(&perturbed(x), &centers), embeddings[i][j]);
            worst.note("tc3l embeddings", rel_err(fixed.d_embeddings[i][j], fd));
            let fd = central(|x| adaptive_at(&perturbed(x), &weights, &centers), embeddings[i][j]);
            worst.note("amtc3l embeddings", rel_err(adaptive.d_embeddings[i][j], fd));
            let fd = central(
                |x| {
                    let mut w = weights.clone();
                    w[i][j] = x;
                    adaptive_at(&embeddings, &w, &centers)
                },
                weights[i][j],
            );
            worst.note("amtc3l weights", rel_err(adaptive.d_weights[i][j], fd));
        }
    }

    let fixed_centers = fixed.center_grads(k, &labels, &negatives).unwrap();
    let adaptive_centers = adaptive.center_grads(k, &labels, &negatives).unwrap();
    for idx in 0..k * dim {
        let shifted = |x: f64| {
            let mut c = centers.clone();
            c.values[idx] = x;
            c
        };
        let fd = central(|x| fixed_at(&embeddings, &shifted(x)), centers.values[idx]);
        worst.note("tc3l centers", rel_err(fixed_centers[idx], fd));
        let fd = central(|x| adaptive_at(&embeddings, &weights, &shifted(x)), centers.values[idx]);
        worst.note("amtc3l centers", rel_err(adaptive_centers[idx], fd));
    }

    let logits: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| rng.uniform_in(-4.0, 4.0)).collect()).collect();
    let ce_at = |l: &[Vec<f64>]| {
        let p: Vec<Vec<f64>> = l.iter().map(|row| softmax(row)).collect();
        ce_loss(&p, &labels).unwrap().loss
    };
    let analytic = ce_loss(&logits.iter().map(|row| softmax(row)).collect::<Vec<_>>(), &labels).unwrap();
    for i in 0..m {
        for c in 0..k {
            let fd = central(
                |x| {
                    let mut l = logits.clone();
                    l[i][c] = x;
                    ce_at(&l)
                },
                logits[i][c],
            );
            worst.note("ce logits", rel_err(analytic.d_logits[i][c], fd));
        }
    }
}

/// End-to-end checks through the network for one objective.
fn network_gradients(
    family: &str,
    objective: Objective,
    net: &tc3l_core::Network,
    centers: &ClassCenters,
    batch: &Batch,
    negatives: Option<&NegativeAssignment>,
    worst: &mut Worst,
) {
    let traces = net.forward(batch).unwrap();
    let grads = objective.evaluate(net, centers, batch, &traces, negatives).unwrap().grads;
    let value = |n: &tc3l_core::Network, c: &ClassCenters| objective.value(n, c, batch, negatives).unwrap().total;

    let model_grads = grads.model.arrays();
    for a in 0..model_grads.len() {
        for i in 0..model_grads[a].len() {
            let x0 = net.model.arrays()[a][i];
            let fd = central(
                |x| {
                    let mut n = net.clone();
                    n.model.arrays_mut()[a][i] = x;
                    value(&n, centers)
                },
                x0,
            );
            worst.note(&format!("{family} model"), rel_err(model_grads[a][i], fd));
        }
    }
    let attention_grads = grads.attention.arrays();
    for a in 0..attention_grads.len() {
        for i in 0..attention_grads[a].len() {
            let x0 = net.attention.arrays()[a][i];
            let fd = central(
                |x| {
                    let mut n = net.clone();
                    n.attention.arrays_mut()[a][i] = x;
                    value(&n, centers)
                },
                x0,
            );
            worst.note(&format!("{family} attention"), rel_err(attention_grads[a][i], fd));
        }
    }
    for idx in 0..centers.values.len() {
        let fd = central(
            |x| {
                let mut c = centers.clone();
                c.values[idx] = x;
                value(net, &c)
            },
            centers.values[idx],
        );
        worst.note(&format!("{family} centers"), rel_err(grads.centers[idx], fd));
    }
}

fn gradient_fidelity() -> Verdict {
    let mut worst = Worst::default();
    let modes = [AttentionMode::Element, AttentionMode::Both, AttentionMode::Pixel, AttentionMode::None];
    let selectors = [NssMode::Ms, NssMode::Ns, NssMode::Mm];
    for instance in 0..50u64 {
        let mut rng = Rng::new(1000 + instance);
        loss_level_gradients(&mut rng, &mut worst);

        let config = ModelConfig {
            d_in: 3 + rng.below(3),
            c_f: 4,
            h_f: 1 + rng.below(2),
            w_f: 2,
            c_d: 2 + rng.below(3),
            k_classes: 3 + rng.below(2),
            hidden: 5,
            activation: Activation::Tanh,
        };
        let mode = modes[instance as usize % modes.len()];
        let net = tc3l_core::Network::init(config, mode, 2, &rng.fork(5)).unwrap();
        let centers = random_centers(&mut rng, config.k_classes, config.c_d, 1.0);
        let m = 2 + rng.below(3);
        let inputs: Vec<Vec<f64>> = (0..m).map(|_| (0..config.d_in).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.below(config.k_classes)).collect();
        let batch = Batch::new(inputs, labels.clone(), config.k_classes).unwrap();

        let traces = net.forward(&batch).unwrap();
        let predictions: Vec<usize> = traces.iter().map(|t| t.prediction).collect();
        let embeddings: Vec<&[f64]> = traces.iter().map(|t| t.embedding.as_slice()).collect();
        let mut stats = ConfusionStats::new(config.k_classes);
        let selector = selectors[instance as usize % selectors.len()];
        let negatives = select_negatives(selector, &embeddings, &labels, &predictions, &centers, &mut stats)
            .unwrap()
            .unwrap();

        let lambda = rng.uniform_in(0.1, 1.0);
        let ce_only = Objective {
            lambda: 0.0,
            margin_mode: MarginMode::Adaptive,
            fixed_margin: 1.0,
        };
        let fixed = Objective {
            lambda,
            margin_mode: MarginMode::Fixed,
            fixed_margin: config.c_d as f64,
        };
        let adaptive = Objective {
            lambda,
            margin_mode: MarginMode::Adaptive,
            fixed_margin: 1.0,
        };
        network_gradients("ce", ce_only, &net, &centers, &batch, None, &mut worst);
        network_gradients("ce+tc3l", fixed, &net, &centers, &batch, Some(&negatives), &mut worst);
        network_gradients("ce+amtc3l", adaptive, &net, &centers, &batch, Some(&negatives), &mut worst);
    }
    let max = worst.max();
    let (family, _) = worst
        .0
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    Verdict::new(
        max <= FD_TOLERANCE,
        format!(
            "50 instances, {} gradient families, max relative error {max:.2e} ({family})",
            worst.0.len()
        ),
    )
}

// ------------------------------------------------------------------- ms-nss

fn brute_force_sources(embedding: &[f64], label: usize, centers: &ClassCenters) -> Vec<usize> {
    let mut out = Vec::with_capacity(embedding.len());
    for (j, &e) in embedding.iter().enumerate() {
        let mut best_class = None;
        let mut best_distance = 0.0;
        for k in 0..centers.k() {
            if k == label {
                continue;
            }
            let d = (sigmoid(e) - sigmoid(centers.get(k, j))).powi(2);
            if best_class.is_none() || d < best_distance {
                best_class = Some(k);
                best_distance = d;
            }
        }
        out.push(best_class.unwrap());
    }
    out
}

fn squashed_distance(e: &[f64], c: &[f64]) -> f64 {
    e.iter().zip(c).map(|(a, b)| (sigmoid(*a) - sigmoid(*b)).powi(2)).sum()
}

fn ms_nss_oracle() -> Verdict {
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    let mut dominance_failures = 0;
    for instance in 0..1000 {
        let k = 2 + rng.below(9);
        let dim = 1 + rng.below(16);
        let m = 1 + rng.below(6);
        // a coarse grid in half the instances forces exact ties
        let grid = instance % 2 == 0;
        let draw = |rng: &mut Rng| {
            let v = rng.uniform_in(-3.0, 3.0);
            if grid {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let values = (0..k * dim).map(|_| draw(&mut rng)).collect();
        let centers = ClassCenters::from_values(k, dim, values).unwrap();
        let embeddings: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| draw(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let got = ms_nss(&refs, &labels, &centers).unwrap();
        for i in 0..m {
            let expected = brute_force_sources(&embeddings[i], labels[i], &centers);
            let vector: Vec<f64> = expected.iter().enumerate().map(|(j, &c)| centers.get(c, j)).collect();
            let same_vector = got.vector(i).iter().zip(&vector).all(|(a, b)| a.to_bits() == b.to_bits());
            if got.sources(i) != expected.as_slice() || !same_vector {
                mismatches += 1;
            }
            let synthesized = squashed_distance(&embeddings[i], got.vector(i));
            for c in (0..k).filter(|&c| c != labels[i]) {
                if synthesized > squashed_distance(&embeddings[i], centers.row(c)) {
                    dominance_failures += 1;
                }
            }
        }
    }
    Verdict::new(
        mismatches == 0 && dominance_failures == 0,
        format!("1000 instances, {mismatches} oracle mismatches, {dominance_failures} dominance failures"),
    )
}

// ------------------------------------------------------------- ns bookkeeping

fn argmax_oracle(stats: &ConfusionStats, t: usize, centers: &ClassCenters) -> usize {
    let row: Vec<(usize, u64)> = (0..stats.k()).filter(|&k| k != t).map(|k| (k, stats.get(t, k))).collect();
    let top = row.iter().map(|&(_, c)| c).max().unwrap();
    if top > 0 {
        return row.iter().find(|&&(_, c)| c == top).unwrap().0;
    }
    let distance = |k: usize| -> f64 {
        centers.row(t).iter().zip(centers.row(k)).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let nearest = row.iter().map(|&(k, _)| distance(k)).fold(f64::INFINITY, f64::min);
    row.iter().find(|&&(k, _)| distance(k) == nearest).unwrap().0
}

fn ns_bookkeeping() -> Verdict {
    let mut problems = Vec::new();

    // S against a recount of every observed pair, for several seeded epochs
    let model = ModelConfig {
        d_in: 6,
        c_f: 6,
        h_f: 2,
        w_f: 1,
        c_d: 4,
        k_classes: 4,
        hidden: 8,
        activation: Activation::Tanh,
    };
    let mut epochs_checked = 0;
    for seed in 0..4u64 {
        let data = gen_blobs(&DataConfig {
            k_classes: 4,
            d_in: 6,
            n_total: 150,
            proportions: vec![0.4, 0.3, 0.2, 0.1],
            separation: 1.5,
            noise_std: 1.0,
            seed,
        })
        .unwrap();
        for nss in [NssMode::Ns, NssMode::Mm] {
            let config = TrainConfig {
                nss,
                lambda: 0.5,
                epochs: 3,
                batch_size: 16,
                seed,
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(model, AttentionMode::Element, 2, seed).unwrap();
            for epoch in 0..config.epochs {
                let report = train_epoch(&mut state, &data, &config).unwrap();
                let mut recount = vec![0u64; 16];
                for &(t, p) in &report.observed {
                    recount[t * 4 + p] += 1;
                }
                if report.stats.counts() != recount.as_slice() {
                    problems.push(format!("seed {seed} {nss} epoch {epoch}: S differs from recount"));
                }
                let mut seen: Vec<usize> = report.observed.iter().map(|&(t, _)| t).collect();
                let mut labels = data.labels.clone();
                seen.sort_unstable();
                labels.sort_unstable();
                if seen != labels {
                    problems.push(format!("seed {seed} {nss} epoch {epoch}: samples not seen exactly once"));
                }
                if !state.stats.is_zero() {
                    problems.push(format!("seed {seed} {nss} epoch {epoch}: S not reset"));
                }
                epochs_checked += 1;
            }
        }
    }

    // hardest_rival against the oracle on random and sparse matrices
    let mut rng = Rng::new(4);
    let mut lookups = 0;
    let mut virgin_rows = 0;
    for _ in 0..2000 {
        let k = 2 + rng.below(9);
        let dim = 1 + rng.below(6);
        let centers = random_centers(&mut rng, k, dim, 2.0);
        let mut stats = ConfusionStats::new(k);
        let n = rng.below(3 * k);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let predicted: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        stats.record(&truth, &predicted).unwrap();
        for t in 0..k {
            if (0..k).all(|p| p == t || stats.get(t, p) == 0) {
                virgin_rows += 1;
            }
            let got = hardest_rival(&stats, t, &centers);
            let want = argmax_oracle(&stats, t, &centers);
            if got != want {
                problems.push(format!("hardest_rival({t}) = {got}, oracle {want}"));
            }
            lookups += 1;
        }
    }

    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{epochs_checked} epochs recounted, {lookups} rival lookups ({virgin_rows} virgin rows)")
        } else {
            format!("{} problems, first: {}", problems.len(), problems[0])
        },
    )
}

// -------------------------------------------------------- baseline reduction

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn model_bits_equal(a: &tc3l_core::ModelParams, b: &tc3l_core::ModelParams) -> bool {
    a.arrays().iter().zip(b.arrays()).all(|(x, y)| same_bits(x, y))
}

fn attention_bits_equal(a: &AttentionParams, b: &AttentionParams) -> bool {
    a.arrays().iter().zip(b.arrays()).all(|(x, y)| same_bits(x, y))
}

fn baseline_reduction() -> Verdict {
    let model_config = ModelConfig {
        d_in: 8,
        c_f: 6,
        h_f: 2,
        w_f: 2,
        c_d: 4,
        k_classes: 4,
        hidden: 10,
        activation: Activation::Tanh,
    };
    let data = gen_blobs(&DataConfig {
        k_classes: 4,
        d_in: 8,
        n_total: 64,
        proportions: vec![0.4, 0.3, 0.2, 0.1],
        separation: 2.0,
        noise_std: 1.0,
        seed: 5,
    })
    .unwrap();
    let config = TrainConfig {
        lambda: 0.0,
        nss: NssMode::None,
        epochs: 3,
        lr_decay_every: 1,
        lr_decay_factor: 0.5,
        batch_size: 24,
        seed: 5,
        ..TrainConfig::default()
    };

    let mut state = TrainState::new(model_config, AttentionMode::Element, 2, config.seed).unwrap();
    let initial_attention = state.net.attention.clone();
    let initial_centers = state.centers.clone();

    // reference: plain cross-entropy SGD on the model alone
    let mut params = state.net.model.clone();
    let mut velocity = params.zeros_like();
    let root = Rng::new(config.seed);
    let mut reference_rows = Vec::new();
    let mut iteration = 0;

    let mut problems = Vec::new();
    let mut trainer_rows = Vec::new();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, &config);
        for chunk in epoch_order(&root, epoch, data.len()).chunks(config.batch_size) {
            let batch = data.batch(chunk).unwrap();
            let traces = model::forward(&params, &batch).unwrap();
            let probabilities: Vec<Vec<f64>> = traces.iter().map(|t| t.probabilities.clone()).collect();
            let ce = ce_loss(&probabilities, &batch.labels).unwrap();
            let upstream: Vec<Upstream> = ce
                .d_logits
                .iter()
                .map(|d| Upstream {
                    d_logits: d.clone(),
                    ..Upstream::zeros(&model_config)
                })
                .collect();
            let grads = model::backward(&params, &traces, &upstream, None).unwrap();
            for ((p, v), g) in params
                .arrays_mut()
                .into_iter()
                .zip(velocity.arrays_mut())
                .zip(grads.params.arrays())
            {
                sgd_step(p, v, g, lr, config.momentum, config.weight_decay).unwrap();
            }
            reference_rows.push(CurveRow {
                iter: iteration,
                epoch,
                ce: ce.loss,
                metric: 0.0,
                total: ce.loss,
                lr,
            });
            iteration += 1;
        }

        let report = train_epoch(&mut state, &data, &config).unwrap();
        trainer_rows.extend(report.rows);
        if !model_bits_equal(&state.net.model, &params) {
            problems.push(format!("epoch {epoch}: model parameters differ"));
        }
        if !model_bits_equal(&state.model_velocity, &velocity) {
            problems.push(format!("epoch {epoch}: momentum buffers differ"));
        }
        if !attention_bits_equal(&state.net.attention, &initial_attention) {
            problems.push(format!("epoch {epoch}: attention moved"));
        }
        if !same_bits(&state.centers.values, &initial_centers.values) {
            problems.push(format!("epoch {epoch}: centers moved"));
        }
    }
    let same_curve = curve_csv(&trainer_rows) == curve_csv(&reference_rows);
    if !same_curve {
        problems.push("curve.csv differs".into());
    }
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("3 epochs, {} iterations, parameters and curve bitwise identical", reference_rows.len())
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- determinism

const SMALL_RUN: &str = "\
n_total = 280
hidden = 12
c_f = 8
epochs = 3
batch_size = 32
";

fn tc3l(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tc3l"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tc3l_stdout(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tc3l"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out.stdout)
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, relative path and contents, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("small.conf");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let cfg = cfg.to_str().unwrap();

    let mut problems = Vec::new();
    let mut files = 0;
    let mut checked_artifacts = 0;
    for rep in ["a", "b"] {
        let dir = root.join(rep);
        let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-data".into(), "--config".into(), cfg.into(), "--out".into(), p("data.csv")],
            vec!["train".into(), "--config".into(), cfg.into(), "--nss".into(), "mm".into(), "--out".into(), p("train")],
            vec![
                "sweep".into(),
                "--config".into(),
                cfg.into(),
                "--lambda".into(),
                "0.1,1.0".into(),
                "--nss".into(),
                "ms,ns".into(),
                "--out".into(),
                p("sweep"),
            ],
            vec!["ablate".into(), "--config".into(), cfg.into(), "--out".into(), p("ablate")],
        ];
        fs::create_dir_all(&dir).unwrap();
        for step in &steps {
            let args: Vec<&str> = step.iter().map(String::as_str).collect();
            if let Err(e) = tc3l(&args) {
                problems.push(e);
            }
        }
        match tc3l_stdout(&["eval", "--checkpoint", &p("train/model.ckpt"), "--data", &p("data.csv")]) {
            Ok(stdout) => fs::write(dir.join("eval.json"), stdout).unwrap(),
            Err(e) => problems.push(e),
        }
    }
    let a = tree(&root.join("a"));
    let b = tree(&root.join("b"));
    if a.iter().map(|(p, _)| p).ne(b.iter().map(|(p, _)| p)) {
        problems.push("runs produced different file sets".into());
    }
    for ((path, x), (_, y)) in a.iter().zip(&b) {
        files += 1;
        let name = path.file_name().unwrap().to_str().unwrap();
        if matches!(name, "curve.csv" | "metrics.json" | "model.ckpt") {
            checked_artifacts += 1;
        }
        if x != y {
            problems.push(format!("{} differs", path.display()));
        }
    }
    Verdict::new(
        problems.is_empty() && checked_artifacts > 0,
        if problems.is_empty() {
            format!(
                "gen-data, train, eval, sweep, ablate rerun: {files} files identical ({checked_artifacts} curve/metrics/checkpoint)"
            )
        } else {
            format!("{} problems, first: {}", problems.len(), problems[0])
        },
    )
}

// ------------------------------------------------------- desk-scale benchmark

const SEEDS: u64 = 5;
const LAMBDAS: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
const MODES: [NssMode; 3] = [NssMode::Ms, NssMode::Ns, NssMode::Mm];
const VALIDATION_STREAM: u64 = 21;

fn seeded(seed: u64, nss: NssMode, lambda: f64) -> RunConfig {
    bench(&[format!("seed={seed}"), format!("nss={nss}"), format!("lambda={lambda:?}")])
}

/// Outer train/test split plus a validation split carved from the training
/// part, used only to choose lambda.
struct SeedData {
    outer: Prepared,
    inner: Prepared,
}

fn seed_data(seed: u64) -> SeedData {
    let outer = prepare_data(&seeded(seed, NssMode::None, 0.0)).unwrap();
    let s = split(&outer.train, 0.8, &mut Rng::new(seed).fork(VALIDATION_STREAM)).unwrap();
    let inner = Prepared {
        train: s.train,
        test: s.test,
        warnings: s.warnings,
    };
    SeedData { outer, inner }
}

struct Benchmark {
    baseline: Vec<RunOutcome>,
    chosen: Vec<f64>,
    /// Final runs per mode, one per seed.
    modes: Vec<Vec<RunOutcome>>,
}

fn run_benchmark() -> Benchmark {
    let data: Vec<SeedData> = (0..SEEDS).map(seed_data).collect();

    let mut grid = Vec::new();
    for mode in MODES {
        for lambda in LAMBDAS {
            for seed in 0..SEEDS {
                grid.push((mode, lambda, seed));
            }
        }
    }
    let validation: Vec<f64> = grid
        .par_iter()
        .map(|&(mode, lambda, seed)| {
            run(&seeded(seed, mode, lambda), &data[seed as usize].inner)
                .unwrap()
                .metrics
                .mean_per_class_accuracy
        })
        .collect();
    let chosen: Vec<f64> = MODES
        .iter()
        .enumerate()
        .map(|(mi, _)| {
            let mut best = (f64::NEG_INFINITY, LAMBDAS[0]);
            for (li, &lambda) in LAMBDAS.iter().enumerate() {
                let at = (mi * LAMBDAS.len() + li) * SEEDS as usize;
                let score = validation[at..at + SEEDS as usize].iter().sum::<f64>() / SEEDS as f64;
                if score > best.0 {
                    best = (score, lambda);
                }
            }
            best.1
        })
        .collect();

    let mut finals: Vec<(NssMode, f64, u64)> = (0..SEEDS).map(|s| (NssMode::None, 0.0, s)).collect();
    for (&mode, &lambda) in MODES.iter().zip(&chosen) {
        finals.extend((0..SEEDS).map(|s| (mode, lambda, s)));
    }
    let outcomes: Vec<RunOutcome> = finals
        .par_iter()
        .map(|&(mode, lambda, seed)| run(&seeded(seed, mode, lambda), &data[seed as usize].outer).unwrap())
        .collect();
    let mut groups = outcomes.chunks(SEEDS as usize).map(<[RunOutcome]>::to_vec);
    let baseline = groups.next().unwrap();
    let modes = groups.collect();
    Benchmark {
        baseline,
        chosen,
        modes,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale_benefit(b: &Benchmark) -> Verdict {
    let base: Vec<f64> = b.baseline.iter().map(|r| r.metrics.mean_per_class_accuracy).collect();
    let base_mean = mean(base.iter().copied());
    let base_compact = mean(b.baseline.iter().map(|r| r.metrics.intra_class_compactness));
    let mut pass = true;
    let mut parts = vec![format!("baseline {base_mean:.4}")];
    for ((mode, runs), lambda) in MODES.iter().zip(&b.modes).zip(&b.chosen) {
        let accs: Vec<f64> = runs.iter().map(|r| r.metrics.mean_per_class_accuracy).collect();
        let wins = accs.iter().zip(&base).filter(|(a, b)| a >= b).count();
        let m = mean(accs.iter().copied());
        pass &= wins >= 4;
        parts.push(format!("{mode}(λ={lambda}) {m:.4} wins {wins}/5"));
        if *mode == NssMode::Mm {
            let compact = mean(runs.iter().map(|r| r.metrics.intra_class_compactness));
            pass &= m >= base_mean + 0.01 && compact < base_compact;
            parts.push(format!("mm gain {:+.4}, compactness {compact:.3} vs {base_compact:.3}", m - base_mean));
        }
    }
    Verdict::new(pass, parts.join(", "))
}

fn total_losses(outcome: &RunOutcome) -> (Vec<f64>, Vec<f64>) {
    let all: Vec<f64> = outcome.epochs.iter().flat_map(|e| e.rows.iter().map(|r| r.total)).collect();
    let last: Vec<f64> = outcome.epochs.last().unwrap().rows.iter().map(|r| r.total).collect();
    (all, last)
}

/// Population variance of consecutive differences.
fn step_variance(losses: &[f64]) -> f64 {
    let d: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let mu = mean(d.iter().copied());
    mean(d.iter().map(|x| (x - mu).powi(2)))
}

fn convergence_shape(b: &Benchmark) -> Verdict {
    let mut worst_ratio: f64 = 0.0;
    for runs in &b.modes {
        for r in runs {
            let (all, last) = total_losses(r);
            let head = mean(all[..50].iter().copied());
            let tail = mean(last[last.len() - 50..].iter().copied());
            worst_ratio = worst_ratio.max(tail / head);
        }
    }
    let ms = &b.modes[0];
    let mm = &b.modes[2];
    let calmer = ms
        .iter()
        .zip(mm)
        .filter(|(s, m)| step_variance(&total_losses(m).1) <= step_variance(&total_losses(s).1))
        .count();
    Verdict::new(
        worst_ratio < 0.5 && calmer >= 3,
        format!("worst final/initial loss ratio {worst_ratio:.3}, mm variance ≤ ms on {calmer}/5 seeds"),
    )
}

// ------------------------------------------------------------------- ablation

fn ablation_structure() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let ablation = match commands::cmd_ablate(&bench(&[]), tmp.path()) {
        Ok(a) => a,
        Err(e) => return Verdict::new(false, format!("ablate failed: {e}")),
    };
    let runs = ablation.runs();
    let runs_csv = fs::read_to_string(tmp.path().join("runs.csv")).unwrap_or_default();
    let table = ablation.table();
    let baseline_row = table[0].1;
    let repeated = baseline_row.iter().all(|v| v.is_some() && *v == baseline_row[0]);
    let a = table[1].1;
    let b = table[2].1;
    let b_wins = a.iter().zip(&b).filter(|(a, b)| matches!((a, b), (Some(x), Some(y)) if y > x)).count();
    let cells = |row: [Option<f64>; 3]| {
        row.iter()
            .map(|v| v.map_or("failed".to_string(), |v| format!("{v:.4}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    Verdict::new(
        runs.len() == 7 && runs_csv.lines().count() == 8 && repeated && b_wins >= 2,
        format!(
            "{} runs, baseline {}, a {} vs b {} (ms/ns/mm), b ahead in {b_wins}/3",
            runs.len(),
            cells(baseline_row),
            cells(a),
            cells(b)
        ),
    )
}

// ----------------------------------------------------------------------- main

fn report(name: &str, limit: Option<Duration>, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let mut v = check();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            v.pass = false;
            v.detail.push_str(&format!(", over the {} s budget", limit.as_secs()));
        }
    }
    println!(
        "{} {name}: {} [{:.1} s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    v.pass
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    println!("acceptance suite");
    let secs = |s| Some(Duration::from_secs(s));
    let mut ok = true;
    ok &= report("loss-less positivity", secs(10), positivity);
    ok &= report("gradient fidelity", secs(60), gradient_fidelity);
    ok &= report("ms-nss oracle equivalence", secs(10), ms_nss_oracle);
    ok &= report("ns-nss bookkeeping", None, ns_bookkeeping);
    ok &= report("baseline reduction", None, baseline_reduction);
    ok &= report("determinism", None, determinism);
    let mut benchmark = None;
    ok &= report("desk-scale benefit", secs(600), || {
        let b = run_benchmark();
        let v = desk_scale_benefit(&b);
        benchmark = Some(b);
        v
    });
    let benchmark = benchmark.expect("benchmark ran");
    ok &= report("convergence shape", None, || convergence_shape(&benchmark));
    ok &= report("ablation structure", None, ablation_structure);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
