//! `key = value` run configuration with line-numbered errors.
//!
//! Values are applied in order defaults, file, flags. A few keys default to
//! other keys when left unset: `center_lr` follows `lr`, `data_seed` follows
//! `seed`, `fixed_margin` is `c_d / 2`, and `proportions` depends on
//! `k_classes`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tc3l_core::data::default_proportions;
use tc3l_core::{
    Activation, AttentionMode, DataConfig, Error, ModelConfig, Result, TrainConfig,
};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "k_classes",
    "d_in",
    "c_f",
    "h_f",
    "w_f",
    "c_d",
    "hidden",
    "activation",
    "attention",
    "attention_reduction",
    "lambda",
    "nss",
    "margin_mode",
    "fixed_margin",
    "lr",
    "center_lr",
    "momentum",
    "weight_decay",
    "epochs",
    "lr_decay_every",
    "lr_decay_factor",
    "batch_size",
    "jitter_std",
    "seed",
    "n_total",
    "proportions",
    "separation",
    "noise_std",
    "data_seed",
    "train_fraction",
    "train_data",
    "test_data",
    "folds",
];

/// Where a value came from, for error messages.
#[derive(Debug, Clone)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag(String),
}

impl Origin {
    fn error(&self, message: String) -> Error {
        match self {
            Origin::File { path, line } => Error::Parse {
                path: path.clone(),
                line: *line,
                message,
            },
            Origin::Flag(flag) => Error::InvalidConfig(format!("{flag}: {message}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub attention: AttentionMode,
    pub attention_reduction: usize,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub train_fraction: f64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Cross-validation folds run by `train`; 0 disables.
    pub folds: usize,
}

/// Builder state: typed values plus the keys whose defaults depend on others.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    cfg: RunConfig,
    center_lr: Option<f64>,
    fixed_margin: Option<f64>,
    data_seed: Option<u64>,
    proportions: Option<Vec<f64>>,
    origins: HashMap<String, Origin>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self {
            cfg: RunConfig {
                model: ModelConfig::default(),
                attention: AttentionMode::default(),
                attention_reduction: 4,
                train: TrainConfig::default(),
                data: DataConfig::default(),
                train_fraction: 0.75,
                train_data: None,
                test_data: None,
                folds: 0,
            },
            center_lr: None,
            fixed_margin: None,
            data_seed: None,
            proportions: None,
            origins: HashMap::new(),
        }
    }
}

fn parse<T: FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected {what}, got {value:?}"))
}

fn parse_real(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got {value:?}"))
    }
}

fn parse_enum<T: FromStr<Err = Error>>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: Error| e.to_string())
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets one key. `origin` only feeds error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &Origin) -> Result<()> {
        self.set_inner(key, value.trim())
            .map_err(|msg| origin.error(format!("key `{key}`: {msg}")))?;
        self.origins.insert(key.to_string(), origin.clone());
        Ok(())
    }

    /// Range checks that can be pinned to the line or flag that set a key.
    fn check_ranges(&self, c: &RunConfig) -> Result<()> {
        let (m, t, d) = (&c.model, &c.train, &c.data);
        let positive = "must be positive";
        let checks: Vec<(&str, bool, String)> = vec![
            ("k_classes", m.k_classes >= 2, "must be at least 2".into()),
            ("d_in", m.d_in > 0, positive.into()),
            ("c_f", m.c_f > 0, positive.into()),
            ("h_f", m.h_f > 0, positive.into()),
            ("w_f", m.w_f > 0, positive.into()),
            ("c_d", m.c_d > 0, positive.into()),
            ("c_d", m.c_d <= m.c_f, format!("must not exceed c_f = {}", m.c_f)),
            ("hidden", m.hidden > 0, positive.into()),
            (
                "attention_reduction",
                c.attention_reduction > 0 && m.c_d / c.attention_reduction > 0,
                format!("must lie in 1..={}", m.c_d),
            ),
            ("lambda", t.lambda >= 0.0, "must be non-negative".into()),
            (
                "fixed_margin",
                t.fixed_margin > 0.0 && t.fixed_margin <= m.c_d as f64,
                format!("must lie in (0, c_d = {}]", m.c_d),
            ),
            ("lr", t.lr > 0.0, positive.into()),
            ("center_lr", t.center_lr > 0.0, positive.into()),
            ("momentum", (0.0..1.0).contains(&t.momentum), "must lie in [0, 1)".into()),
            ("weight_decay", t.weight_decay >= 0.0, "must be non-negative".into()),
            ("epochs", t.epochs > 0, positive.into()),
            ("lr_decay_every", t.lr_decay_every > 0, positive.into()),
            ("lr_decay_factor", t.lr_decay_factor > 0.0, positive.into()),
            ("batch_size", t.batch_size > 0, positive.into()),
            ("jitter_std", t.jitter_std >= 0.0, "must be non-negative".into()),
            ("n_total", d.n_total > 0, positive.into()),
            (
                "proportions",
                d.proportions.len() == m.k_classes,
                format!("needs {} entries, got {}", m.k_classes, d.proportions.len()),
            ),
            (
                "proportions",
                d.proportions.iter().all(|&p| p >= 0.0)
                    && (d.proportions.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
                "must be non-negative and sum to 1".into(),
            ),
            ("separation", d.separation > 0.0, positive.into()),
            ("noise_std", d.noise_std >= 0.0, "must be non-negative".into()),
            (
                "train_fraction",
                c.train_fraction > 0.0 && c.train_fraction < 1.0,
                "must lie in (0, 1)".into(),
            ),
            ("folds", c.folds != 1, "must be 0 (off) or at least 2".into()),
        ];
        for (key, ok, msg) in checks {
            if ok {
                continue;
            }
            let msg = format!("key `{key}`: {msg}");
            return Err(match self.origins.get(key) {
                Some(origin) => origin.error(msg),
                None => Error::InvalidConfig(format!("{msg} (default value)")),
            });
        }
        Ok(())
    }

    fn set_inner(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let c = &mut self.cfg;
        let count = |v: &str| parse::<usize>(v, "a non-negative integer");
        match key {
            "k_classes" => c.model.k_classes = count(value)?,
            "d_in" => c.model.d_in = count(value)?,
            "c_f" => c.model.c_f = count(value)?,
            "h_f" => c.model.h_f = count(value)?,
            "w_f" => c.model.w_f = count(value)?,
            "c_d" => c.model.c_d = count(value)?,
            "hidden" => c.model.hidden = count(value)?,
            "activation" => {
                c.model.activation = match value {
                    "tanh" => Activation::Tanh,
                    "identity" => Activation::Identity,
                    other => return Err(format!("expected tanh|identity, got {other:?}")),
                }
            }
            "attention" => c.attention = parse_enum(value)?,
            "attention_reduction" => c.attention_reduction = count(value)?,
            "lambda" => c.train.lambda = parse_real(value)?,
            "nss" => c.train.nss = parse_enum(value)?,
            "margin_mode" => c.train.margin_mode = parse_enum(value)?,
            "fixed_margin" => self.fixed_margin = Some(parse_real(value)?),
            "lr" => c.train.lr = parse_real(value)?,
            "center_lr" => self.center_lr = Some(parse_real(value)?),
            "momentum" => c.train.momentum = parse_real(value)?,
            "weight_decay" => c.train.weight_decay = parse_real(value)?,
            "epochs" => c.train.epochs = count(value)?,
            "lr_decay_every" => c.train.lr_decay_every = count(value)?,
            "lr_decay_factor" => c.train.lr_decay_factor = parse_real(value)?,
            "batch_size" => c.train.batch_size = count(value)?,
            "jitter_std" => c.train.jitter_std = parse_real(value)?,
            "seed" => c.train.seed = parse(value, "an unsigned 64-bit integer")?,
            "n_total" => c.data.n_total = count(value)?,
            "proportions" => {
                self.proportions = Some(
                    value
                        .split(',')
                        .map(|p| parse_real(p.trim()))
                        .collect::<std::result::Result<_, _>>()?,
                )
            }
            "separation" => c.data.separation = parse_real(value)?,
            "noise_std" => c.data.noise_std = parse_real(value)?,
            "data_seed" => self.data_seed = Some(parse(value, "an unsigned 64-bit integer")?),
            "train_fraction" => c.train_fraction = parse_real(value)?,
            "train_data" => c.train_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_data" => c.test_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "folds" => c.folds = count(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies a whole config file.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let origin = Origin::File {
                path: path.to_path_buf(),
                line: idx + 1,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| origin.error(format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value, &origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        self.apply_text(&text, path)
    }

    /// Applies a `key=value` override given on the command line.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let origin = Origin::Flag(format!("--set {assignment}"));
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| origin.error("expected key=value".into()))?;
        self.set(key.trim(), value, &origin)
    }

    /// Resolves dependent defaults and validates everything.
    pub fn build(&self) -> Result<RunConfig> {
        let mut c = self.cfg.clone();
        c.train.center_lr = self.center_lr.unwrap_or(c.train.lr);
        c.train.fixed_margin = self
            .fixed_margin
            .unwrap_or(c.model.c_d as f64 / 2.0);
        c.data.seed = self.data_seed.unwrap_or(c.train.seed);
        c.data.k_classes = c.model.k_classes;
        c.data.d_in = c.model.d_in;
        c.data.proportions = self
            .proportions
            .clone()
            .unwrap_or_else(|| default_proportions(c.model.k_classes));
        self.check_ranges(&c)?;
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.c_d)?;
        if self.attention_reduction == 0 || self.model.c_d / self.attention_reduction == 0 {
            return Err(Error::InvalidConfig(format!(
                "attention_reduction {} leaves no bottleneck for c_d {}",
                self.attention_reduction, self.model.c_d
            )));
        }
        if self.train_data.is_none() {
            self.data.validate()?;
        }
        if self.test_data.is_none() && !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.folds == 1 {
            return Err(Error::InvalidConfig("folds must be 0 (off) or at least 2".into()));
        }
        Ok(())
    }

    /// Loads defaults, then `path` if given, then `assignments`.
    pub fn load(path: Option<&Path>, assignments: &[String]) -> Result<Self> {
        let mut b = ConfigBuilder::new();
        if let Some(p) = path {
            b.apply_file(p)?;
        }
        for a in assignments {
            b.apply_assignment(a)?;
        }
        b.build()
    }

    /// Every key with its resolved value, parseable back into the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let real = |v: f64| format!("{v:?}");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let activation = match m.activation {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        let values: Vec<String> = vec![
            m.k_classes.to_string(),
            m.d_in.to_string(),
            m.c_f.to_string(),
            m.h_f.to_string(),
            m.w_f.to_string(),
            m.c_d.to_string(),
            m.hidden.to_string(),
            activation.to_string(),
            self.attention.to_string(),
            self.attention_reduction.to_string(),
            real(t.lambda),
            t.nss.to_string(),
            t.margin_mode.to_string(),
            real(t.fixed_margin),
            real(t.lr),
            real(t.center_lr),
            real(t.momentum),
            real(t.weight_decay),
            t.epochs.to_string(),
            t.lr_decay_every.to_string(),
            real(t.lr_decay_factor),
            t.batch_size.to_string(),
            real(t.jitter_std),
            t.seed.to_string(),
            d.n_total.to_string(),
            d.proportions.iter().map(|p| real(*p)).collect::<Vec<_>>().join(","),
            real(d.separation),
            real(d.noise_std),
            d.seed.to_string(),
            real(self.train_fraction),
            path(&self.train_data),
            path(&self.test_data),
            self.folds.to_string(),
        ];
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn parse_list<T: FromStr>(flag: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::InvalidConfig(format!("{flag}: empty list")));
    }
    items
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("{flag}: cannot parse {s:?}")))
        })
        .collect()
}
