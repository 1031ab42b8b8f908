//! Experiment orchestration behind the `trr` command line.
//!
//! Every command works inside a run directory:
//!
//! ```text
//! <run>/config.snapshot        configuration the run used (re-runnable)
//! <run>/dataset.trrd           train/val/test pairs and Phi
//! <run>/dataset.key            dataset-relevant settings, to detect stale files
//! <run>/results_<solver>.csv   per-sample and aggregate solver errors
//! <run>/traces_<solver>.csv    objective/error/norm traces of the first test pair
//! <run>/models/                utrr_k<K>.utrr, train.conf, history.csv, train.csv
//! <run>/models-norcc/          the same, trained with top-K in every layer
//! <run>/evaluate.csv           per-sample and aggregate network errors
//! <run>/accuracy.csv           NMSE and accurate-reconstruction ratios
//! <run>/sum_rate.csv           zero-forcing downlink sum rate
//! <run>/sweep_snr.csv          NMSE versus SNR
//! <run>/run.log                human-readable log (the only file with timestamps)
//! ```
//!
//! Result tables share the columns in [`RESULT_HEADER`]; aggregate rows use
//! `sample_id = -1`, per-sample rows carry the linear normalized squared error
//! of a complex channel, and aggregate rows carry NMSE in dB. `wall_ms` is 0
//! unless timing is requested, so reruns produce byte-identical tables.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SolverKind};
use crate::error::{Error, Result};
use crate::formats;
use crate::metrics::{self, MultiUserChannel};
use crate::rng;
use crate::sensing::{self, Dataset, DatasetSplits, MeasurementMatrix, Snr, Split};
use crate::solvers::{self, Init, SolveOptions, SolverReport, StepRule, TrrProblem};
use crate::utrr::{self, TrainConfig, TrainHistory, UtrrParams};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const DATASET_FILE: &str = "dataset.trrd";
pub const DATASET_KEY: &str = "dataset.key";
pub const LOG_FILE: &str = "run.log";
pub const MODELS_DIR: &str = "models";
pub const MODELS_NO_RCC_DIR: &str = "models-norcc";
pub const TRAIN_SNAPSHOT: &str = "train.conf";

pub const RESULT_HEADER: [&str; 7] = [
    "run_id",
    "method",
    "snr_db",
    "k_param",
    "sample_id",
    "nmse_db_or_error",
    "wall_ms",
];
pub const TRACE_HEADER: [&str; 6] = ["run_id", "method", "iteration", "objective", "error", "norm"];
pub const HISTORY_HEADER: [&str; 8] = [
    "run_id",
    "k_param",
    "epoch",
    "stage",
    "learning_rate",
    "train_loss",
    "val_loss",
    "is_best",
];
pub const ACCURACY_HEADER: [&str; 6] = ["run_id", "method", "k_param", "nmse_db", "threshold", "accurate_ratio"];
pub const SUM_RATE_HEADER: [&str; 5] = ["run_id", "method", "k_param", "dl_snr_db", "sum_rate"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Fill the `wall_ms` column (otherwise 0).
    pub record_timing: bool,
}

impl RunOptions {
    fn wall_ms(&self, d: Duration) -> u128 {
        if self.record_timing {
            d.as_millis()
        } else {
            0
        }
    }
}

/// Identifier shared by all rows a configuration produces.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{:08x}", crc32fast::hash(cfg.to_text().as_bytes()))
}

/// An output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(RunDir {
            root: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Append a timestamped line to the run log.
    pub fn log(&self, command: &str, message: &str) -> Result<()> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut f = OpenOptions::new().create(true).append(true).open(self.join(LOG_FILE))?;
        writeln!(f, "{secs} {command}: {message}")?;
        Ok(())
    }

    pub fn write_snapshot(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::write(self.join(CONFIG_SNAPSHOT), cfg.to_text())?;
        Ok(())
    }
}

/// Shortest round-trip decimal, switching to exponent notation for very
/// small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e7).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a [`RESULT_HEADER`] table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub method: String,
    pub snr: Snr,
    pub k_param: i64,
    pub sample_id: i64,
    pub value: f64,
    pub wall_ms: u128,
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.method.clone(),
            self.snr.to_string(),
            self.k_param.to_string(),
            self.sample_id.to_string(),
            fmt_f64(self.value),
            self.wall_ms.to_string(),
        ]
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let records: Vec<_> = rows.iter().map(ResultRow::record).collect();
    write_table(path, &RESULT_HEADER, &records)
}

// ---------------------------------------------------------------- datasets

/// Settings the dataset file depends on.
fn dataset_key(cfg: &ExperimentConfig) -> String {
    format!(
        "n_antennas={} n_measurements={} n_paths={} sparsity={:?} snr={} sizes={}/{}/{} seed={}\n",
        cfg.n_antennas,
        cfg.n_measurements,
        cfg.n_paths,
        cfg.sparsity,
        cfg.snr,
        cfg.train_size,
        cfg.val_size,
        cfg.test_size,
        cfg.seed
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenDataSummary {
    /// Real-valued pairs per split (train, val, test).
    pub pair_counts: [usize; 3],
}

/// Generate the dataset of `cfg` and write it with a config snapshot.
pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<(DatasetSplits, GenDataSummary)> {
    let splits = sensing::build_dataset(cfg)?;
    formats::write_dataset(&run.join(DATASET_FILE), &splits)?;
    fs::write(run.join(DATASET_KEY), dataset_key(cfg))?;
    run.write_snapshot(cfg)?;
    let summary = GenDataSummary {
        pair_counts: [splits.train.len(), splits.val.len(), splits.test.len()],
    };
    run.log(
        "gen-data",
        &format!(
            "wrote {} (pairs: train {}, val {}, test {})",
            DATASET_FILE, summary.pair_counts[0], summary.pair_counts[1], summary.pair_counts[2]
        ),
    )?;
    Ok((splits, summary))
}

/// The dataset for `cfg`: read from `data_dir` when given, otherwise reuse
/// the run directory's file if it was generated from the same settings, and
/// generate it if not.
pub fn load_or_generate(cfg: &ExperimentConfig, run: &RunDir, data_dir: Option<&Path>) -> Result<DatasetSplits> {
    let splits = match data_dir {
        Some(dir) => formats::read_dataset(&dir.join(DATASET_FILE), cfg.snr)?,
        None => {
            let cached = fs::read_to_string(run.join(DATASET_KEY)).ok();
            if cached.as_deref() == Some(dataset_key(cfg).as_str()) && run.join(DATASET_FILE).exists() {
                formats::read_dataset(&run.join(DATASET_FILE), cfg.snr)?
            } else {
                gen_data(cfg, run)?.0
            }
        }
    };
    let phi = &splits.train.phi;
    if phi.m_rows() != cfg.n_measurements {
        return Err(Error::mismatch(
            "dataset measurements",
            cfg.n_measurements,
            phi.m_rows(),
        ));
    }
    if phi.n_cols() != cfg.n_antennas {
        return Err(Error::mismatch("dataset antennas", cfg.n_antennas, phi.n_cols()));
    }
    Ok(splits)
}

// ----------------------------------------------------------------- solvers

/// An iterative or greedy estimator configured from an experiment config.
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: SolverKind,
    phi: DMatrix<f64>,
    lifted: DMatrix<f64>,
    lipschitz: f64,
    rho: f64,
    top_k: usize,
    lambda1: f64,
    lambda2: f64,
    omp_sparsity: usize,
    options: SolveOptions,
}

impl Estimator {
    pub fn new(cfg: &ExperimentConfig, phi: &MeasurementMatrix, kind: SolverKind) -> Result<Self> {
        let lifted = phi.lifted();
        let lipschitz = solvers::lipschitz_constant(&lifted)?;
        let init = if cfg.zero_init {
            Init::Zero
        } else {
            Init::Backprojection
        };
        Ok(Estimator {
            kind,
            phi: phi.matrix().clone(),
            lifted,
            lipschitz,
            rho: cfg.rho,
            top_k: cfg.top_k,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            omp_sparsity: cfg.omp_sparsity,
            options: SolveOptions::new(cfg.eps, cfg.max_iter).with_init(init),
        })
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    /// The `k_param` column: the sparsity-like parameter of the method.
    pub fn k_param(&self) -> usize {
        match self.kind {
            SolverKind::Itrr | SolverKind::ItrrBb => self.top_k,
            SolverKind::Omp => self.omp_sparsity,
            SolverKind::PgdRidge | SolverKind::PgdLasso => 0,
        }
    }

    /// Estimate `x` from `y`; iterative methods also return their report.
    pub fn run(
        &self,
        y: &DVector<f64>,
        reference: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, Option<SolverReport>)> {
        let mut opts = self.options.clone();
        if let Some(x) = reference {
            opts = opts.with_reference(x.clone());
        }
        let report = match self.kind {
            SolverKind::Itrr | SolverKind::ItrrBb => {
                let p =
                    TrrProblem::with_lipschitz(self.lifted.clone(), y.clone(), self.rho, self.top_k, self.lipschitz)?;
                if self.kind == SolverKind::Itrr {
                    solvers::itrr(&p, &opts)?
                } else {
                    solvers::itrr_bb(&p, &opts)?
                }
            }
            SolverKind::PgdRidge => solvers::pgd_ridge(&self.phi, y, self.lambda2, StepRule::Bb, &opts)?,
            SolverKind::PgdLasso => solvers::pgd_lasso(&self.phi, y, self.lambda1, &opts)?,
            SolverKind::Omp => return Ok((solvers::omp(&self.phi, y, self.omp_sparsity)?, None)),
        };
        Ok((report.solution.clone(), Some(report)))
    }

    /// Estimates for every pair of `dataset`, in order, computed in parallel.
    pub fn run_dataset(&self, dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
        dataset
            .pairs
            .par_iter()
            .map(|p| self.run(&p.measurement, None).map(|(x, _)| x))
            .collect()
    }
}

/// Per-channel normalized squared errors of real-pair estimates, merged
/// back into complex channels.
pub fn channel_errors(dataset: &Dataset, estimates: &[DVector<f64>]) -> Result<Vec<f64>> {
    let truth = dataset.complex_labels()?;
    let est = sensing::merge_pairs(estimates.iter().collect())?;
    if truth.len() != est.len() {
        return Err(Error::mismatch("estimates", truth.len(), est.len()));
    }
    truth
        .iter()
        .zip(&est)
        .map(|(h, e)| metrics::normalized_sq_error(&h.entries, &e.entries))
        .collect()
}

fn mean_db(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    metrics::to_db(errors.iter().sum::<f64>() / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub method: SolverKind,
    pub nmse_db: f64,
    /// Linear normalized squared error per complex test channel.
    pub channel_errors: Vec<f64>,
    /// Linear normalized squared error per real test pair.
    pub pair_errors: Vec<f64>,
    pub rows: Vec<ResultRow>,
}

/// Run `solver` over the test split; writes `results.csv` and `traces.csv`.
pub fn solve(
    cfg: &ExperimentConfig,
    run: &RunDir,
    splits: &DatasetSplits,
    solver: SolverKind,
    opts: RunOptions,
) -> Result<SolveSummary> {
    let test = &splits.test;
    let estimator = Estimator::new(cfg, &test.phi, solver)?;
    let id = run_id(cfg);
    let started = Instant::now();
    let timed: Vec<(DVector<f64>, Duration)> = test
        .pairs
        .par_iter()
        .map(|p| {
            let t = Instant::now();
            estimator.run(&p.measurement, None).map(|(x, _)| (x, t.elapsed()))
        })
        .collect::<Result<_>>()?;
    let total = started.elapsed();
    let estimates: Vec<_> = timed.iter().map(|(x, _)| x.clone()).collect();
    let errors = channel_errors(test, &estimates)?;
    let pair_errors = test
        .pairs
        .iter()
        .zip(&estimates)
        .map(|(p, x)| metrics::normalized_sq_error(&p.label, x))
        .collect::<Result<Vec<_>>>()?;
    let nmse_db = mean_db(&errors);

    let k_param = estimator.k_param() as i64;
    let row = |sample_id: i64, value: f64, wall: Duration| ResultRow {
        run_id: id.clone(),
        method: solver.to_string(),
        snr: test.snr,
        k_param,
        sample_id,
        value,
        wall_ms: opts.wall_ms(wall),
    };
    let mut rows: Vec<ResultRow> = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| row(i as i64, e, timed[2 * i].1 + timed[2 * i + 1].1))
        .collect();
    rows.push(row(-1, nmse_db, total));
    write_results(&run.join(&format!("results_{solver}.csv")), &rows)?;

    let mut traces = Vec::new();
    if let Some(first) = test.pairs.first() {
        if let (_, Some(report)) = estimator.run(&first.measurement, Some(&first.label))? {
            let errs = report.error_trace.unwrap_or_default();
            for (i, (&obj, &norm)) in report.objective_trace.iter().zip(&report.norm_trace).enumerate() {
                traces.push(vec![
                    id.clone(),
                    solver.to_string(),
                    i.to_string(),
                    fmt_f64(obj),
                    errs.get(i).map_or(String::new(), |&e| fmt_f64(e)),
                    fmt_f64(norm),
                ]);
            }
        }
    }
    write_table(&run.join(&format!("traces_{solver}.csv")), &TRACE_HEADER, &traces)?;
    run.write_snapshot(cfg)?;
    run.log(
        "solve",
        &format!(
            "{solver}: NMSE {nmse_db:.3} dB over {} channels in {total:?}",
            errors.len()
        ),
    )?;
    Ok(SolveSummary {
        method: solver,
        nmse_db,
        channel_errors: errors,
        pair_errors,
        rows,
    })
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub top_k: usize,
    pub params: UtrrParams,
    pub history: TrainHistory,
    pub wall: Duration,
    pub test_nmse_db: f64,
}

/// Training settings of the ensemble member with top-K parameter `k`; each
/// member gets its own shuffling seed.
pub fn member_train_config(cfg: &ExperimentConfig, k: usize) -> TrainConfig {
    let mut tc = cfg.train_config();
    tc.seed = rng::derive(tc.seed, k as u64);
    tc
}

pub fn models_dir_name(rcc: bool) -> &'static str {
    if rcc {
        MODELS_DIR
    } else {
        MODELS_NO_RCC_DIR
    }
}

fn model_file(k: usize) -> String {
    format!("utrr_k{k}.utrr")
}

/// Train one network per configured top-K. With `no_rcc` the top-K term is
/// active in every layer. Writes models, `train.conf`, `history.csv` and
/// `train.csv` into `models/` (or `models-norcc/`).
pub fn train(
    cfg: &ExperimentConfig,
    run: &RunDir,
    splits: &DatasetSplits,
    no_rcc: bool,
    opts: RunOptions,
) -> Result<Vec<TrainedModel>> {
    let mut cfg = cfg.clone();
    if no_rcc {
        cfg.rcc = false;
    }
    let id = run_id(&cfg);
    let dir = run.join(models_dir_name(cfg.rcc));
    fs::create_dir_all(&dir)?;
    let method = if cfg.rcc { "utrr" } else { "utrr-norcc" };

    let mut trained = Vec::new();
    let mut history_rows = Vec::new();
    let mut result_rows = Vec::new();
    for k in cfg.model_top_ks() {
        let init = UtrrParams::init(Arc::clone(&splits.train.phi), cfg.layers, k)?.with_rcc(cfg.rcc);
        let tc = member_train_config(&cfg, k);
        let started = Instant::now();
        let (params, history) = utrr::train(&init, &splits.train, &splits.val, &tc).map_err(|e| {
            let _ = run.log("train", &format!("K = {k}: {e}"));
            e
        })?;
        let wall = started.elapsed();
        formats::write_model(&dir.join(model_file(k)), &params)?;

        let estimates = utrr::predict_dataset(&params, &splits.test)?;
        let test_nmse_db = mean_db(&channel_errors(&splits.test, &estimates)?);
        for (i, e) in history.epochs.iter().enumerate() {
            history_rows.push(vec![
                id.clone(),
                k.to_string(),
                e.epoch.to_string(),
                e.stage.to_string(),
                fmt_f64(e.learning_rate),
                fmt_f64(e.train_loss),
                fmt_f64(e.val_loss),
                u8::from(history.best_epoch == Some(i)).to_string(),
            ]);
        }
        result_rows.push(ResultRow {
            run_id: id.clone(),
            method: method.to_string(),
            snr: splits.test.snr,
            k_param: k as i64,
            sample_id: -1,
            value: test_nmse_db,
            wall_ms: opts.wall_ms(wall),
        });
        run.log(
            "train",
            &format!(
                "{method} K = {k}: {} epochs{}, best val loss {:.6e}, test NMSE {test_nmse_db:.3} dB, {wall:?}",
                history.epochs.len(),
                if history.stopped_early { " (early stop)" } else { "" },
                history.best_val_loss().unwrap_or(f64::NAN),
            ),
        )?;
        trained.push(TrainedModel {
            top_k: k,
            params,
            history,
            wall,
            test_nmse_db,
        });
    }
    fs::write(dir.join(TRAIN_SNAPSHOT), cfg.to_text())?;
    write_table(&dir.join("history.csv"), &HISTORY_HEADER, &history_rows)?;
    write_results(&dir.join("train.csv"), &result_rows)?;
    Ok(trained)
}

/// Trained networks read back from a models directory.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub members: Vec<(usize, UtrrParams)>,
    /// Configuration the models were trained with.
    pub config: ExperimentConfig,
}

/// Load every model listed by the directory's `train.conf` (or by `cfg`
/// when the directory has none).
pub fn load_models(dir: &Path, phi: &Arc<MeasurementMatrix>, cfg: &ExperimentConfig) -> Result<ModelSet> {
    let snapshot = dir.join(TRAIN_SNAPSHOT);
    let config = if snapshot.exists() {
        ExperimentConfig::load(&snapshot)?
    } else {
        cfg.clone()
    };
    let members = config
        .model_top_ks()
        .into_iter()
        .map(|k| {
            Ok((
                k,
                formats::read_model(&dir.join(model_file(k)), Arc::clone(phi), config.rcc)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSet { members, config })
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Single,
    Ensemble,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Single => "single",
            EvalMode::Ensemble => "ensemble",
        })
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(EvalMode::Single),
            "ensemble" => Ok(EvalMode::Ensemble),
            other => Err(format!("unknown mode {other:?} (expected single or ensemble)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub method: String,
    /// Member top-K, or -1 for an ensemble of several members.
    pub k_param: i64,
    pub nmse_db: f64,
    /// `(threshold, accurate ratio)` pairs.
    pub ratios: Vec<(f64, f64)>,
    pub channel_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumRateRow {
    pub method: String,
    pub k_param: i64,
    pub dl_snr_db: f64,
    /// Mean sum rate (bit/s/Hz) over the user groups.
    pub sum_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: Vec<AccuracyRow>,
    pub sum_rate: Vec<SumRateRow>,
}

impl Evaluation {
    pub fn row(&self, method: &str, k_param: i64) -> Option<&AccuracyRow> {
        self.accuracy
            .iter()
            .find(|r| r.method == method && r.k_param == k_param)
    }
}

/// Mean ZF sum rate over consecutive groups of `users` channels: the
/// precoder is built from `estimates` and applied to `truth`.
pub fn mean_sum_rate(
    truth: &[DVector<Complex64>],
    estimates: &[DVector<Complex64>],
    users: usize,
    dl_snr_db: f64,
) -> Result<f64> {
    if users == 0 || truth.len() < users {
        return Err(Error::InvalidDimension(format!(
            "sum rate needs at least {users} channels, got {}",
            truth.len()
        )));
    }
    let groups = truth.len() / users;
    let mut total = 0.0;
    for g in 0..groups {
        let range = g * users..(g + 1) * users;
        let h_true = MultiUserChannel::from_users(&truth[range.clone()])?;
        let h_est = MultiUserChannel::from_users(&estimates[range])?;
        let f = metrics::zf_precoder(&h_est)?;
        total += metrics::sum_rate(&h_true, &f, dl_snr_db)?;
    }
    Ok(total / groups as f64)
}

/// Evaluate trained networks on the test split. Single mode reports each
/// member; ensemble mode adds the averaged reconstruction. Writes
/// `evaluate.csv`, `accuracy.csv` and `sum_rate.csv`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    run: &RunDir,
    splits: &DatasetSplits,
    models: &ModelSet,
    mode: EvalMode,
    thresholds: &[f64],
    opts: RunOptions,
) -> Result<Evaluation> {
    if models.members.is_empty() {
        return Err(Error::Degenerate("no models to evaluate"));
    }
    let test = &splits.test;
    let id = run_id(cfg);
    let method = if models.config.rcc { "utrr" } else { "utrr-norcc" };

    let mut candidates: Vec<(String, i64, Vec<DVector<f64>>, Duration)> = Vec::new();
    for (k, params) in &models.members {
        let t = Instant::now();
        let est = utrr::predict_dataset(params, test)?;
        candidates.push((method.to_string(), *k as i64, est, t.elapsed()));
    }
    if mode == EvalMode::Ensemble {
        let params: Vec<UtrrParams> = models.members.iter().map(|(_, p)| p.clone()).collect();
        let k = if params.len() == 1 {
            models.members[0].0 as i64
        } else {
            -1
        };
        let t = Instant::now();
        let est = utrr::ensemble_predict_dataset(&params, test)?;
        candidates.push((format!("{method}-ensemble"), k, est, t.elapsed()));
    }

    let truth: Vec<DVector<Complex64>> = test.complex_labels()?.into_iter().map(|h| h.entries).collect();
    let mut result_rows = Vec::new();
    let mut accuracy = Vec::new();
    let mut sum_rate = Vec::new();
    let rate_groups = truth.len() >= cfg.n_users && cfg.n_users > 0;
    if rate_groups {
        for &snr in &cfg.dl_snr_db {
            sum_rate.push(SumRateRow {
                method: "perfect-csi".into(),
                k_param: -1,
                dl_snr_db: snr,
                sum_rate: mean_sum_rate(&truth, &truth, cfg.n_users, snr)?,
            });
        }
    }
    for (name, k, est, wall) in candidates {
        let errors = channel_errors(test, &est)?;
        let nmse_db = mean_db(&errors);
        for (i, &e) in errors.iter().enumerate() {
            result_rows.push(ResultRow {
                run_id: id.clone(),
                method: name.clone(),
                snr: test.snr,
                k_param: k,
                sample_id: i as i64,
                value: e,
                wall_ms: 0,
            });
        }
        result_rows.push(ResultRow {
            run_id: id.clone(),
            method: name.clone(),
            snr: test.snr,
            k_param: k,
            sample_id: -1,
            value: nmse_db,
            wall_ms: opts.wall_ms(wall),
        });
        let ratios = thresholds
            .iter()
            .map(|&th| Ok((th, metrics::accurate_ratio(&errors, th)?)))
            .collect::<Result<Vec<_>>>()?;
        if rate_groups {
            let merged: Vec<DVector<Complex64>> = sensing::merge_pairs(est.iter().collect())?
                .into_iter()
                .map(|h| h.entries)
                .collect();
            for &snr in &cfg.dl_snr_db {
                sum_rate.push(SumRateRow {
                    method: name.clone(),
                    k_param: k,
                    dl_snr_db: snr,
                    sum_rate: mean_sum_rate(&truth, &merged, cfg.n_users, snr)?,
                });
            }
        }
        run.log("evaluate", &format!("{name} K = {k}: NMSE {nmse_db:.3} dB"))?;
        accuracy.push(AccuracyRow {
            method: name,
            k_param: k,
            nmse_db,
            ratios,
            channel_errors: errors,
        });
    }

    write_results(&run.join("evaluate.csv"), &result_rows)?;
    let acc_records: Vec<Vec<String>> = accuracy
        .iter()
        .flat_map(|r| {
            r.ratios.iter().map(|(th, ratio)| {
                vec![
                    id.clone(),
                    r.method.clone(),
                    r.k_param.to_string(),
                    fmt_f64(r.nmse_db),
                    fmt_f64(*th),
                    fmt_f64(*ratio),
                ]
            })
        })
        .collect();
    write_table(&run.join("accuracy.csv"), &ACCURACY_HEADER, &acc_records)?;
    let rate_records: Vec<Vec<String>> = sum_rate
        .iter()
        .map(|r| {
            vec![
                id.clone(),
                r.method.clone(),
                r.k_param.to_string(),
                fmt_f64(r.dl_snr_db),
                fmt_f64(r.sum_rate),
            ]
        })
        .collect();
    write_table(&run.join("sum_rate.csv"), &SUM_RATE_HEADER, &rate_records)?;
    if !rate_groups {
        run.log(
            "evaluate",
            &format!(
                "sum rate skipped: {} test channels < {} users",
                truth.len(),
                cfg.n_users
            ),
        )?;
    }
    Ok(Evaluation { accuracy, sum_rate })
}

// --------------------------------------------------------------- SNR sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub snr: Snr,
    pub method: SolverKind,
    pub nmse_db: f64,
}

/// NMSE of each method at each SNR. The test channels stay fixed; only the
/// noise is redrawn per SNR. Writes `sweep_snr.csv`.
pub fn sweep_snr(
    cfg: &ExperimentConfig,
    run: &RunDir,
    snrs: &[Snr],
    methods: &[SolverKind],
    opts: RunOptions,
) -> Result<Vec<SweepPoint>> {
    if snrs.is_empty() || methods.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one SNR and one method".into(),
        ));
    }
    cfg.validate()?;
    let id = run_id(cfg);
    let phi = Arc::new(sensing::config_phi(cfg)?);
    let estimators = methods
        .iter()
        .map(|&m| Estimator::new(cfg, &phi, m))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &snr in snrs {
        let test = sensing::build_split(cfg, &phi, Split::Test, cfg.test_size, snr)?;
        for est in &estimators {
            let t = Instant::now();
            let x = est.run_dataset(&test)?;
            let wall = t.elapsed();
            let nmse_db = mean_db(&channel_errors(&test, &x)?);
            rows.push(ResultRow {
                run_id: id.clone(),
                method: est.kind().to_string(),
                snr,
                k_param: est.k_param() as i64,
                sample_id: -1,
                value: nmse_db,
                wall_ms: opts.wall_ms(wall),
            });
            run.log("sweep-snr", &format!("{} at {snr}: NMSE {nmse_db:.3} dB", est.kind()))?;
            points.push(SweepPoint {
                snr,
                method: est.kind(),
                nmse_db,
            });
        }
    }
    write_results(&run.join("sweep_snr.csv"), &rows)?;
    run.write_snapshot(cfg)?;
    Ok(points)
}
