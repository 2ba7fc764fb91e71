//! Experiment commands. Each returns its results so tests can check them
//! without reparsing files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use tc3l_core::checkpoint;
use tc3l_core::data::{gen_blobs, load_csv, split};
use tc3l_core::trainer::{curve_csv, evaluate, fit, kfold, EpochReport, KFoldReport};
use tc3l_core::{
    ClassCenters, Dataset, Error, MarginMode, MetricsReport, NssMode, Result, Rng, TrainState,
};

use crate::config::RunConfig;

const SPLIT_STREAM: u64 = 20;

/// Train and test sets for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

fn check_dim(data: &Dataset, cfg: &RunConfig, path: &Path) -> Result<()> {
    if data.dim() != cfg.model.d_in {
        return Err(Error::InvalidConfig(format!(
            "{} has {} features, config says d_in = {}",
            path.display(),
            data.dim(),
            cfg.model.d_in
        )));
    }
    Ok(())
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let k = cfg.model.k_classes;
    let full = match &cfg.train_data {
        Some(path) => {
            let d = load_csv(path, Some(k))?;
            check_dim(&d, cfg, path)?;
            d
        }
        None => gen_blobs(&cfg.data)?,
    };
    if let Some(path) = &cfg.test_data {
        let test = load_csv(path, Some(k))?;
        check_dim(&test, cfg, path)?;
        return Ok(Prepared {
            train: full,
            test,
            warnings: Vec::new(),
        });
    }
    let s = split(&full, cfg.train_fraction, &mut Rng::new(cfg.data.seed).fork(SPLIT_STREAM))?;
    Ok(Prepared {
        train: s.train,
        test: s.test,
        warnings: s.warnings,
    })
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochReport>,
    pub metrics: MetricsReport,
    pub curve: String,
    pub cross_validation: Option<KFoldReport>,
}

pub fn run(cfg: &RunConfig, data: &Prepared) -> Result<RunOutcome> {
    let mut state = TrainState::new(
        cfg.model,
        cfg.attention,
        cfg.attention_reduction,
        cfg.train.seed,
    )?;
    let epochs = fit(&mut state, &data.train, &cfg.train)?;
    let rows: Vec<_> = epochs.iter().flat_map(|e| e.rows.iter().copied()).collect();
    let metrics = evaluate(&state.net, &data.test)?;
    let cross_validation = if cfg.folds >= 2 {
        Some(kfold(
            &data.train,
            cfg.folds,
            cfg.model,
            cfg.attention,
            cfg.attention_reduction,
            &cfg.train,
        )?)
    } else {
        None
    };
    Ok(RunOutcome {
        state,
        epochs,
        metrics,
        curve: curve_csv(&rows),
        cross_validation,
    })
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn centers_csv(centers: &ClassCenters) -> String {
    let mut out = String::new();
    for k in 0..centers.k() {
        let row: Vec<String> = centers.row(k).iter().map(|&v| real(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn confusion_csv(metrics: &MetricsReport) -> String {
    let k = metrics.k();
    let mut out = String::new();
    for row in metrics.confusion.chunks(k) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn json(value: &serde_json::Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes every artifact of a run into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("curve.csv"), &outcome.curve)?;
    fs::write(dir.join("metrics.json"), outcome.metrics.to_json()? + "\n")?;
    checkpoint::save(&dir.join("model.ckpt"), &outcome.state.net, &outcome.state.centers)?;
    fs::write(dir.join("centers.csv"), centers_csv(&outcome.state.centers))?;
    fs::write(dir.join("confusion.csv"), confusion_csv(&outcome.metrics))?;
    if cfg.train.nss.uses_stats() {
        let stats_dir = dir.join("stats");
        fs::create_dir_all(&stats_dir)?;
        for (e, report) in outcome.epochs.iter().enumerate() {
            fs::write(stats_dir.join(format!("epoch-{e:03}.csv")), report.stats.to_csv())?;
        }
    }
    if let Some(cv) = &outcome.cross_validation {
        let value = serde_json::json!({ "folds": cv.folds, "mean": cv.mean });
        fs::write(dir.join("cv.json"), json(&value)?)?;
    }
    Ok(())
}

fn report_warnings(label: &str, data: &Prepared, outcome: &RunOutcome) {
    for w in &data.warnings {
        eprintln!("warning [{label}]: {w}");
    }
    if let Some(cv) = &outcome.cross_validation {
        for w in &cv.warnings {
            eprintln!("warning [{label}]: {w}");
        }
    }
    if outcome.state.numerical_warnings > 0 {
        eprintln!(
            "warning [{label}]: {} probabilities clamped before the log",
            outcome.state.numerical_warnings
        );
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = gen_blobs(&cfg.data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    data.save_csv(out)?;
    Ok(data)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let data = prepare_data(cfg)?;
    let outcome = run(cfg, &data)?;
    report_warnings("train", &data, &outcome);
    write_run(out, cfg, &outcome)?;
    Ok(outcome.metrics)
}

pub fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<MetricsReport> {
    let ckpt = checkpoint::load(checkpoint_path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", checkpoint_path.display())),
        other => other,
    })?;
    let cfg = *ckpt.net.config();
    let data = load_csv(data_path, Some(cfg.k_classes))?;
    if data.dim() != cfg.d_in {
        return Err(Error::InvalidConfig(format!(
            "{} has {} features, checkpoint expects {}",
            data_path.display(),
            data.dim(),
            cfg.d_in
        )));
    }
    evaluate(&ckpt.net, &data)
}

/// One row of a sweep or ablation summary.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub nss: NssMode,
    pub lambda: f64,
    pub margin_mode: MarginMode,
    pub result: std::result::Result<MetricsReport, String>,
}

impl RunSummary {
    pub fn metrics(&self) -> Option<&MetricsReport> {
        self.result.as_ref().ok()
    }
}

pub const SUMMARY_HEADER: &str = "nss,lambda,margin_mode,overall_acc,mean_per_class_acc";

fn summary_row(r: &RunSummary) -> String {
    let (overall, mean) = match &r.result {
        Ok(m) => (real(m.overall_accuracy), real(m.mean_per_class_accuracy)),
        Err(_) => (String::new(), String::new()),
    };
    format!("{},{:?},{},{overall},{mean}", r.nss, r.lambda, r.margin_mode)
}

/// Thread pool sized by `TC3L_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("TC3L_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("TC3L_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

struct Job {
    name: String,
    cfg: RunConfig,
}

/// Runs every job in its own subdirectory of `out`; failures are recorded
/// and do not stop the others.
fn run_grid(jobs: Vec<Job>, data: &Prepared, out: &Path) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out)?;
    let pool = worker_pool()?;
    let results: Vec<RunSummary> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let dir = out.join(&job.name);
                let result = run(&job.cfg, data).and_then(|outcome| {
                    report_warnings(&job.name, data, &outcome);
                    write_run(&dir, &job.cfg, &outcome)?;
                    Ok(outcome.metrics)
                });
                let result = result.map_err(|e| {
                    eprintln!("error [{}]: {e}", job.name);
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join("error.txt"), format!("{e}\n"));
                    e.to_string()
                });
                RunSummary {
                    name: job.name.clone(),
                    nss: job.cfg.train.nss,
                    lambda: job.cfg.train.lambda,
                    margin_mode: job.cfg.train.margin_mode,
                    result,
                }
            })
            .collect()
    });
    Ok(results)
}

pub fn sweep_dir_name(nss: NssMode, lambda: f64) -> String {
    format!("{nss}_lambda-{lambda:?}")
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    lambdas: &[f64],
    modes: &[NssMode],
    out: &Path,
) -> Result<Vec<RunSummary>> {
    if lambdas.is_empty() || modes.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one lambda and one nss mode".into()));
    }
    let mut jobs = Vec::new();
    for &nss in modes {
        for &lambda in lambdas {
            let mut c = cfg.clone();
            c.train.nss = nss;
            c.train.lambda = lambda;
            c.validate()?;
            jobs.push(Job {
                name: sweep_dir_name(nss, lambda),
                cfg: c,
            });
        }
    }
    let data = prepare_data(cfg)?;
    let results = run_grid(jobs, &data, out)?;
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for r in &results {
        summary.push_str(&summary_row(r));
        summary.push('\n');
    }
    fs::write(out.join("summary.csv"), summary)?;
    Ok(results)
}

pub const ABLATION_MODES: [NssMode; 3] = [NssMode::Ms, NssMode::Ns, NssMode::Mm];

/// Outcome of the baseline / pipeline a / pipeline b grid.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub baseline: RunSummary,
    /// Fixed-margin runs in `ABLATION_MODES` order.
    pub pipeline_a: Vec<RunSummary>,
    /// Adaptive-margin runs in `ABLATION_MODES` order.
    pub pipeline_b: Vec<RunSummary>,
}

impl Ablation {
    pub fn runs(&self) -> Vec<&RunSummary> {
        std::iter::once(&self.baseline)
            .chain(&self.pipeline_a)
            .chain(&self.pipeline_b)
            .collect()
    }

    /// Table rows `(pipeline, [ms, ns, mm])` of overall accuracy; the
    /// baseline has no selection step, so its value fills every column.
    pub fn table(&self) -> Vec<(&'static str, [Option<f64>; 3])> {
        let acc = |r: &RunSummary| r.metrics().map(|m| m.overall_accuracy);
        let row = |runs: &[RunSummary]| [acc(&runs[0]), acc(&runs[1]), acc(&runs[2])];
        let base = acc(&self.baseline);
        vec![
            ("baseline", [base; 3]),
            ("pipeline_a", row(&self.pipeline_a)),
            ("pipeline_b", row(&self.pipeline_b)),
        ]
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("pipeline,ms,ns,mm\n");
        for (name, cells) in self.table() {
            let cells: Vec<String> = cells.iter().map(|c| c.map(real).unwrap_or_default()).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Ablation> {
    let variant = |nss: NssMode, lambda: f64, margin_mode: MarginMode| {
        let mut c = cfg.clone();
        c.train.nss = nss;
        c.train.lambda = lambda;
        c.train.margin_mode = margin_mode;
        c
    };
    let mut jobs = vec![Job {
        name: "baseline".into(),
        cfg: variant(NssMode::None, 0.0, MarginMode::Adaptive),
    }];
    for (prefix, margin) in [("a", MarginMode::Fixed), ("b", MarginMode::Adaptive)] {
        for nss in ABLATION_MODES {
            jobs.push(Job {
                name: format!("{prefix}-{nss}"),
                cfg: variant(nss, cfg.train.lambda, margin),
            });
        }
    }
    for j in &jobs {
        j.cfg.validate()?;
    }
    let data = prepare_data(cfg)?;
    let mut results = run_grid(jobs, &data, out)?.into_iter();
    let baseline = results.next().expect("baseline job");
    let pipeline_a: Vec<RunSummary> = results.by_ref().take(3).collect();
    let pipeline_b: Vec<RunSummary> = results.collect();
    let ablation = Ablation {
        baseline,
        pipeline_a,
        pipeline_b,
    };

    let mut runs = format!("run,{SUMMARY_HEADER}\n");
    for r in ablation.runs() {
        let _ = writeln!(runs, "{},{}", r.name, summary_row(r));
    }
    fs::write(out.join("runs.csv"), runs)?;
    fs::write(out.join("ablation.csv"), ablation.table_csv())?;
    Ok(ablation)
}

/// Whether any run in the list failed.
pub fn any_failed<'a>(runs: impl IntoIterator<Item = &'a RunSummary>) -> bool {
    runs.into_iter().any(|r| r.result.is_err())
}

