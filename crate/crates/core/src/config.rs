//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma-separated.
//! [`ExperimentConfig::to_text`] writes every key in a fixed order and
//! [`ExperimentConfig::parse`] reads it back exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng;
use crate::sensing::Snr;
use crate::utrr::{Optimizer, TrainConfig};

/// Solver selection for `solve` and `sweep-snr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Itrr,
    ItrrBb,
    PgdRidge,
    PgdLasso,
    Omp,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] = [
        SolverKind::Itrr,
        SolverKind::ItrrBb,
        SolverKind::PgdRidge,
        SolverKind::PgdLasso,
        SolverKind::Omp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Itrr => "itrr",
            SolverKind::ItrrBb => "itrr-bb",
            SolverKind::PgdRidge => "pgd-ridge",
            SolverKind::PgdLasso => "pgd-lasso",
            SolverKind::Omp => "omp",
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = SolverKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown solver {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // system
    pub n_antennas: usize,
    pub n_measurements: usize,
    pub n_users: usize,
    /// Pilot blocks; documentation only, checked against `M = B * N_RF`.
    pub n_blocks: Option<usize>,
    pub n_rf: Option<usize>,
    pub n_paths: usize,
    /// Keep only this many beamspace entries (exact-sparse experiments).
    pub sparsity: Option<usize>,
    pub snr: Snr,
    // datasets, counted in complex channels
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    // iterative solvers
    pub solver: SolverKind,
    pub rho: f64,
    pub top_k: usize,
    pub eps: f64,
    pub max_iter: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub omp_sparsity: usize,
    pub zero_init: bool,
    // network
    pub layers: usize,
    pub top_k_last: usize,
    pub rcc: bool,
    pub learning_rates: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub ensemble_top_k: Vec<usize>,
    // evaluation
    pub thresholds: Vec<f64>,
    pub dl_snr_db: Vec<f64>,
    pub sweep_snr: Vec<Snr>,
    pub sweep_methods: Vec<SolverKind>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_antennas: 256,
            n_measurements: 128,
            n_users: 16,
            n_blocks: Some(8),
            n_rf: Some(16),
            n_paths: 3,
            sparsity: None,
            snr: Snr::Db(20.0),
            train_size: 80_000,
            val_size: 2_000,
            test_size: 2_000,
            solver: SolverKind::ItrrBb,
            rho: 1.0,
            top_k: 16,
            eps: 1e-6,
            max_iter: 600,
            lambda1: 1e-4,
            lambda2: 1.0,
            omp_sparsity: 16,
            zero_init: false,
            layers: 30,
            top_k_last: 16,
            rcc: true,
            learning_rates: vec![0.005, 0.001, 0.0005, 0.0002, 0.0001],
            max_epochs: 300,
            patience: 10,
            batch_size: 128,
            optimizer: Optimizer::Adam,
            ensemble_top_k: vec![0, 16, 64, 256],
            thresholds: vec![0.01, 0.001],
            dl_snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            sweep_snr: vec![Snr::Db(0.0), Snr::Db(5.0), Snr::Db(10.0), Snr::Db(15.0), Snr::Db(20.0)],
            sweep_methods: vec![SolverKind::ItrrBb, SolverKind::Omp],
            seed: 42,
        }
    }
}

const PRESETS: [(&str, &str); 2] = [
    ("exact-sparse", include_str!("../presets/exact-sparse.conf")),
    ("desk-train", include_str!("../presets/desk-train.conf")),
];

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_scalar(key, v)).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.trim() == "none" {
        Ok(None)
    } else {
        parse_scalar(key, value).map(Some)
    }
}

impl ExperimentConfig {
    /// Names of the configurations shipped with the crate.
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(name, _)| *name)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {name:?}")))?;
        Self::parse(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parse config text over the defaults and validate the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
            cfg.set(key, value.trim())
                .map_err(|message| Error::Config { line, message })?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "n_antennas" => self.n_antennas = parse_scalar(key, v)?,
            "n_measurements" => self.n_measurements = parse_scalar(key, v)?,
            "n_users" => self.n_users = parse_scalar(key, v)?,
            "n_blocks" => self.n_blocks = parse_opt(key, v)?,
            "n_rf" => self.n_rf = parse_opt(key, v)?,
            "n_paths" => self.n_paths = parse_scalar(key, v)?,
            "sparsity" => self.sparsity = parse_opt(key, v)?,
            "snr_db" => self.snr = parse_scalar(key, v)?,
            "train_size" => self.train_size = parse_scalar(key, v)?,
            "val_size" => self.val_size = parse_scalar(key, v)?,
            "test_size" => self.test_size = parse_scalar(key, v)?,
            "solver" => self.solver = parse_scalar(key, v)?,
            "rho" => self.rho = parse_scalar(key, v)?,
            "top_k" => self.top_k = parse_scalar(key, v)?,
            "eps" => self.eps = parse_scalar(key, v)?,
            "max_iter" => self.max_iter = parse_scalar(key, v)?,
            "lambda1" => self.lambda1 = parse_scalar(key, v)?,
            "lambda2" => self.lambda2 = parse_scalar(key, v)?,
            "omp_sparsity" => self.omp_sparsity = parse_scalar(key, v)?,
            "zero_init" => self.zero_init = parse_scalar(key, v)?,
            "layers" => self.layers = parse_scalar(key, v)?,
            "top_k_last" => self.top_k_last = parse_scalar(key, v)?,
            "rcc" => self.rcc = parse_scalar(key, v)?,
            "learning_rates" => self.learning_rates = parse_list(key, v)?,
            "max_epochs" => self.max_epochs = parse_scalar(key, v)?,
            "patience" => self.patience = parse_scalar(key, v)?,
            "batch_size" => self.batch_size = parse_scalar(key, v)?,
            "optimizer" => self.optimizer = parse_scalar(key, v)?,
            "ensemble_top_k" => self.ensemble_top_k = parse_list(key, v)?,
            "thresholds" => self.thresholds = parse_list(key, v)?,
            "dl_snr_db" => self.dl_snr_db = parse_list(key, v)?,
            "sweep_snr" => self.sweep_snr = parse_list(key, v)?,
            "sweep_methods" => self.sweep_methods = parse_list(key, v)?,
            "seed" => self.seed = parse_scalar(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Serialize every setting; the output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("n_antennas", self.n_antennas.to_string());
        put("n_measurements", self.n_measurements.to_string());
        put("n_users", self.n_users.to_string());
        put("n_blocks", opt(&self.n_blocks));
        put("n_rf", opt(&self.n_rf));
        put("n_paths", self.n_paths.to_string());
        put("sparsity", opt(&self.sparsity));
        put("snr_db", self.snr.to_string());
        put("train_size", self.train_size.to_string());
        put("val_size", self.val_size.to_string());
        put("test_size", self.test_size.to_string());
        put("solver", self.solver.to_string());
        put("rho", self.rho.to_string());
        put("top_k", self.top_k.to_string());
        put("eps", self.eps.to_string());
        put("max_iter", self.max_iter.to_string());
        put("lambda1", self.lambda1.to_string());
        put("lambda2", self.lambda2.to_string());
        put("omp_sparsity", self.omp_sparsity.to_string());
        put("zero_init", self.zero_init.to_string());
        put("layers", self.layers.to_string());
        put("top_k_last", self.top_k_last.to_string());
        put("rcc", self.rcc.to_string());
        put("learning_rates", join(&self.learning_rates));
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("batch_size", self.batch_size.to_string());
        put("optimizer", self.optimizer.to_string());
        put("ensemble_top_k", join(&self.ensemble_top_k));
        put("thresholds", join(&self.thresholds));
        put("dl_snr_db", join(&self.dl_snr_db));
        put("sweep_snr", join(&self.sweep_snr));
        put("sweep_methods", join(&self.sweep_methods));
        put("seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let n = self.n_antennas;
        let m = self.n_measurements;
        if n == 0 || m == 0 {
            return bad("N and M must be positive".into());
        }
        if m > n {
            return bad(format!("M must not exceed N (M = {m}, N = {n})"));
        }
        if let (Some(b), Some(rf)) = (self.n_blocks, self.n_rf) {
            if b * rf != m {
                return bad(format!("M must equal B * N_RF ({m} != {b} * {rf})"));
            }
        }
        if self.n_users == 0 {
            return bad("U must be at least 1".into());
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if let Some(s) = self.sparsity {
            if s == 0 || s > n {
                return bad(format!("sparsity must lie in [1, N], got {s}"));
            }
        }
        for (name, k) in [("top_k", self.top_k), ("top_k_last", self.top_k_last)]
            .into_iter()
            .chain(self.ensemble_top_k.iter().map(|&k| ("ensemble_top_k", k)))
        {
            if k > 2 * n {
                return bad(format!("{name} = {k} exceeds 2N = {}", 2 * n));
            }
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad("rho must be finite and nonnegative".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be nonnegative".into());
        }
        if self.omp_sparsity == 0 || self.omp_sparsity > m {
            return bad(format!("omp_sparsity must lie in [1, M], got {}", self.omp_sparsity));
        }
        if self.layers == 0 {
            return bad("L >= 1 required (layers = 0)".into());
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
            return bad("learning_rates must be a nonempty list of nonnegative numbers".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return bad("thresholds must be positive".into());
        }
        Ok(())
    }

    /// Models trained by `train`: one per ensemble entry, or the single
    /// `top_k_last` when the ensemble list is empty.
    pub fn model_top_ks(&self) -> Vec<usize> {
        if self.ensemble_top_k.is_empty() {
            vec![self.top_k_last]
        } else {
            self.ensemble_top_k.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rates: self.learning_rates.clone(),
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: rng::derive_tag(self.seed, "train"),
        }
    }
}
