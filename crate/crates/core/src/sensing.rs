//! Bernoulli measurement operators, noisy pilot observations and supervised
//! datasets of real-valued (measurement, label) pairs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::channel::{self, BeamspaceChannel, DftMatrix};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng;

/// Real `M x N` matrix with entries `+-1/sqrt(M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    entries: DMatrix<f64>,
}

impl MeasurementMatrix {
    /// Wrap an existing matrix, checking that every entry is `+-1/sqrt(M)`.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidDimension("measurement matrix must be non-empty".into()));
        }
        let level = entry_level(entries.nrows());
        if entries.iter().any(|&v| v != level && v != -level) {
            return Err(Error::Format {
                kind: "measurement matrix",
                message: format!("entries must be exactly +-{level}"),
            });
        }
        Ok(MeasurementMatrix { entries })
    }

    pub fn m_rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `[Phi, -Phi]`.
    pub fn lifted(&self) -> DMatrix<f64> {
        let (m, n) = self.entries.shape();
        let mut a = DMatrix::zeros(m, 2 * n);
        a.columns_mut(0, n).copy_from(&self.entries);
        a.columns_mut(n, n).copy_from(&(-&self.entries));
        a
    }

    pub fn apply_complex(&self, x: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        if x.len() != self.n_cols() {
            return Err(Error::mismatch("measurement", self.n_cols(), x.len()));
        }
        let re = &self.entries * x.map(|c| c.re);
        let im = &self.entries * x.map(|c| c.im);
        Ok(DVector::from_fn(self.m_rows(), |i, _| Complex64::new(re[i], im[i])))
    }
}

fn entry_level(m_rows: usize) -> f64 {
    1.0 / (m_rows as f64).sqrt()
}

/// Draw an `M x N` matrix of i.i.d. equiprobable `+-1/sqrt(M)` entries.
pub fn bernoulli_matrix<R: Rng + ?Sized>(m_rows: usize, n_cols: usize, rng: &mut R) -> Result<MeasurementMatrix> {
    if m_rows == 0 || n_cols == 0 {
        return Err(Error::InvalidDimension(format!(
            "measurement matrix dimensions must be positive, got {m_rows}x{n_cols}"
        )));
    }
    let level = entry_level(m_rows);
    // fill row by row so that the draw order does not depend on storage layout
    let mut entries = DMatrix::zeros(m_rows, n_cols);
    for i in 0..m_rows {
        for j in 0..n_cols {
            entries[(i, j)] = if rng.random::<bool>() { level } else { -level };
        }
    }
    Ok(MeasurementMatrix { entries })
}

/// Target signal-to-noise ratio of the pilot observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

impl Snr {
    pub fn linear(self) -> Option<f64> {
        match self {
            Snr::Noiseless => None,
            Snr::Db(db) => Some(10f64.powf(db / 10.0)),
        }
    }

    /// Value for CSV output; the noiseless case is reported as +inf.
    pub fn as_db(self) -> f64 {
        match self {
            Snr::Noiseless => f64::INFINITY,
            Snr::Db(db) => db,
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Noiseless => f.write_str("noiseless"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("noiseless") || s.eq_ignore_ascii_case("inf") {
            return Ok(Snr::Noiseless);
        }
        match s.parse::<f64>() {
            Ok(db) if db.is_finite() => Ok(Snr::Db(db)),
            _ => Err(format!("invalid SNR {s:?}: expected dB value or \"noiseless\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexObservation {
    pub measurements: DVector<Complex64>,
    pub snr: Snr,
    /// Noise variance per complex entry.
    pub noise_var: f64,
}

/// `z = Phi h_b + n` with the noise power calibrated per sample.
pub fn observe<R: Rng + ?Sized>(
    phi: &MeasurementMatrix,
    hb: &BeamspaceChannel,
    snr: Snr,
    rng: &mut R,
) -> Result<ComplexObservation> {
    let clean = phi.apply_complex(&hb.entries)?;
    let Some(snr_linear) = snr.linear() else {
        return Ok(ComplexObservation {
            measurements: clean,
            snr,
            noise_var: 0.0,
        });
    };
    let m = phi.m_rows() as f64;
    let noise_var = clean.norm_squared() / (m * snr_linear);
    let mut measurements = clean;
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, (noise_var / 2.0).sqrt()).expect("finite variance");
        for z in measurements.iter_mut() {
            let re = normal.sample(rng);
            let im = normal.sample(rng);
            *z += Complex64::new(re, im);
        }
    }
    Ok(ComplexObservation {
        measurements,
        snr,
        noise_var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Real,
    Imag,
}

/// One real-valued system `y = Phi x + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPair {
    pub measurement: DVector<f64>,
    pub label: DVector<f64>,
    pub part: Part,
}

/// Split a complex system into its real and imaginary real-valued systems.
pub fn split_real(z: &ComplexObservation, hb: &BeamspaceChannel) -> (RealPair, RealPair) {
    let re = RealPair {
        measurement: z.measurements.map(|c| c.re),
        label: hb.entries.map(|c| c.re),
        part: Part::Real,
    };
    let im = RealPair {
        measurement: z.measurements.map(|c| c.im),
        label: hb.entries.map(|c| c.im),
        part: Part::Imag,
    };
    (re, im)
}

pub fn merge_complex(x_re: &DVector<f64>, x_im: &DVector<f64>) -> Result<BeamspaceChannel> {
    if x_re.len() != x_im.len() {
        return Err(Error::mismatch("merge_complex", x_re.len(), x_im.len()));
    }
    Ok(BeamspaceChannel::new(DVector::from_fn(x_re.len(), |i, _| {
        Complex64::new(x_re[i], x_im[i])
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Ordered (real, imag, real, imag, ...) pairs sharing one measurement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<RealPair>,
    pub phi: Arc<MeasurementMatrix>,
    pub snr: Snr,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Complex channels reassembled from consecutive real/imag pairs.
    pub fn complex_labels(&self) -> Result<Vec<BeamspaceChannel>> {
        merge_pairs(self.pairs.iter().map(|p| &p.label).collect())
    }
}

/// Merge a flat (real, imag, real, imag, ...) list into complex vectors.
pub fn merge_pairs(parts: Vec<&DVector<f64>>) -> Result<Vec<BeamspaceChannel>> {
    if !parts.len().is_multiple_of(2) {
        return Err(Error::Format {
            kind: "dataset",
            message: "real/imag pairs must come in twos".into(),
        });
    }
    parts.chunks_exact(2).map(|c| merge_complex(c[0], c[1])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// The measurement matrix a config's master seed determines.
pub fn config_phi(cfg: &ExperimentConfig) -> Result<MeasurementMatrix> {
    let mut r = rng::seeded(rng::derive_tag(cfg.seed, "phi"));
    bernoulli_matrix(cfg.n_measurements, cfg.n_antennas, &mut r)
}

/// Generate one split. Channels depend only on `(seed, split, index)`, and
/// the noise on the same key plus the SNR tag, so changing the SNR keeps the
/// channels fixed.
pub fn build_split(
    cfg: &ExperimentConfig,
    phi: &Arc<MeasurementMatrix>,
    split: Split,
    n_channels: usize,
    snr: Snr,
) -> Result<Dataset> {
    let dft = DftMatrix::new(cfg.n_antennas)?;
    let split_seed = rng::derive_tag(cfg.seed, split.tag());
    let noise_tag = format!("noise@{snr}");
    let pairs: Vec<(RealPair, RealPair)> = (0..n_channels)
        .into_par_iter()
        .map(|i| {
            let sample_seed = rng::derive(split_seed, i as u64);
            let mut channel_rng = rng::seeded(rng::derive_tag(sample_seed, "channel"));
            let mut noise_rng = rng::seeded(rng::derive_tag(sample_seed, &noise_tag));
            let hb = channel::sample_beamspace(&dft, cfg.n_paths, cfg.sparsity, &mut channel_rng)?;
            let z = observe(phi, &hb, snr, &mut noise_rng)?;
            Ok(split_real(&z, &hb))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        pairs: pairs.into_iter().flat_map(|(re, im)| [re, im]).collect(),
        phi: Arc::clone(phi),
        snr,
        split,
    })
}

/// Train/val/test datasets; a pure function of the config and its seed.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    cfg.validate()?;
    let phi = Arc::new(config_phi(cfg)?);
    Ok(DatasetSplits {
        train: build_split(cfg, &phi, Split::Train, cfg.train_size, cfg.snr)?,
        val: build_split(cfg, &phi, Split::Val, cfg.val_size, cfg.snr)?,
        test: build_split(cfg, &phi, Split::Test, cfg.test_size, cfg.snr)?,
    })
}
