//! Saleh-Valenzuela uniform-linear-array channels and their beamspace form.
//!
//! Antenna spacing is fixed at half a wavelength, so a path arriving at
//! physical angle `theta` has spatial direction `sin(theta) / 2`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::select;

/// Paths of one multipath channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    /// Spatial directions in `[-1/2, 1/2]`.
    pub directions: Vec<f64>,
    /// Physical angles of arrival in `[-pi/2, pi/2]`.
    pub angles: Vec<f64>,
}

impl PathSet {
    /// Build a path set from gains and physical angles.
    pub fn from_angles(gains: Vec<Complex64>, angles: Vec<f64>) -> Result<Self> {
        if gains.len() != angles.len() {
            return Err(Error::mismatch("path set", gains.len(), angles.len()));
        }
        if gains.is_empty() {
            return Err(Error::InvalidDimension("a path set needs at least one path".into()));
        }
        let directions = angles.iter().map(|t| 0.5 * t.sin()).collect();
        Ok(PathSet {
            gains,
            directions,
            angles,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.gains.len()
    }
}

/// Antenna-domain channel `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialChannel {
    pub entries: DVector<Complex64>,
}

impl SpatialChannel {
    pub fn n_antennas(&self) -> usize {
        self.entries.len()
    }
}

/// Angular-domain channel `h_b = U h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamspaceChannel {
    pub entries: DVector<Complex64>,
}

impl BeamspaceChannel {
    pub fn new(entries: DVector<Complex64>) -> Self {
        BeamspaceChannel { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.norm()
    }

    /// Rescale to unit Euclidean norm.
    pub fn normalize(&self) -> Result<Self> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate("cannot normalize a zero channel"));
        }
        Ok(BeamspaceChannel {
            entries: self.entries.unscale(norm),
        })
    }

    /// Keep the `n_keep` largest-magnitude entries and zero the rest.
    pub fn sparsify_top(&self, n_keep: usize) -> Result<Self> {
        if n_keep > self.len() {
            return Err(Error::OutOfRange {
                name: "n_keep",
                value: n_keep,
                max: self.len(),
            });
        }
        let mags: Vec<f64> = self.entries.iter().map(|c| c.norm()).collect();
        let mask = select::top_k_mask(&mags, n_keep);
        let entries = DVector::from_iterator(
            self.len(),
            self.entries
                .iter()
                .zip(&mask)
                .map(|(&c, &keep)| if keep { c } else { Complex64::new(0.0, 0.0) }),
        );
        Ok(BeamspaceChannel { entries })
    }
}

/// Unitary DFT matrix whose rows are conjugated steering vectors on the
/// uniform direction grid `(i - (N+1)/2) / N`, `i = 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DftMatrix {
    pub entries: DMatrix<Complex64>,
}

impl DftMatrix {
    pub fn new(n_antennas: usize) -> Result<Self> {
        check_antennas(n_antennas)?;
        let n = n_antennas as f64;
        let scale = 1.0 / n.sqrt();
        let entries = DMatrix::from_fn(n_antennas, n_antennas, |row, m| {
            let direction = grid_direction(row + 1, n_antennas);
            Complex64::from_polar(scale, 2.0 * PI * direction * m as f64)
        });
        Ok(DftMatrix { entries })
    }

    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn to_beamspace(&self, h: &SpatialChannel) -> Result<BeamspaceChannel> {
        if h.n_antennas() != self.n_antennas() {
            return Err(Error::mismatch("to_beamspace", self.n_antennas(), h.n_antennas()));
        }
        Ok(BeamspaceChannel {
            entries: &self.entries * &h.entries,
        })
    }

    /// Inverse transform `U^H h_b`.
    pub fn to_spatial(&self, hb: &BeamspaceChannel) -> Result<SpatialChannel> {
        if hb.len() != self.n_antennas() {
            return Err(Error::mismatch("to_spatial", self.n_antennas(), hb.len()));
        }
        Ok(SpatialChannel {
            entries: self.entries.ad_mul(&hb.entries),
        })
    }
}

/// Direction of grid point `i` (1-based).
pub fn grid_direction(i: usize, n_antennas: usize) -> f64 {
    (i as f64 - (n_antennas as f64 + 1.0) / 2.0) / n_antennas as f64
}

fn check_antennas(n_antennas: usize) -> Result<()> {
    if n_antennas == 0 {
        return Err(Error::InvalidDimension("number of antennas must be at least 1".into()));
    }
    Ok(())
}

/// Array response `(1/sqrt(N)) exp(-j 2 pi direction m)`, `m = 0..N`.
pub fn steering_vector(direction: f64, n_antennas: usize) -> Result<DVector<Complex64>> {
    check_antennas(n_antennas)?;
    let scale = 1.0 / (n_antennas as f64).sqrt();
    Ok(DVector::from_fn(n_antennas, |m, _| {
        Complex64::from_polar(scale, -2.0 * PI * direction * m as f64)
    }))
}

/// Draw `n_paths` paths: uniform angles on `[-pi/2, pi/2]` and standard
/// circularly-symmetric complex Gaussian gains (every path, LoS included).
pub fn sample_paths<R: Rng + ?Sized>(n_paths: usize, rng: &mut R) -> Result<PathSet> {
    if n_paths == 0 {
        return Err(Error::InvalidDimension("number of paths must be at least 1".into()));
    }
    let angle = Uniform::new_inclusive(-FRAC_PI_2, FRAC_PI_2).expect("finite bounds");
    let half = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("positive std");
    let mut gains = Vec::with_capacity(n_paths);
    let mut angles = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        angles.push(angle.sample(rng));
        let re = half.sample(rng);
        let im = half.sample(rng);
        gains.push(Complex64::new(re, im));
    }
    PathSet::from_angles(gains, angles)
}

/// `h = sqrt(N / N_p) * sum_l beta_l a(phi_l)`.
pub fn synthesize_channel(paths: &PathSet, n_antennas: usize) -> Result<SpatialChannel> {
    check_antennas(n_antennas)?;
    let mut h = DVector::<Complex64>::zeros(n_antennas);
    for (&gain, &direction) in paths.gains.iter().zip(&paths.directions) {
        let a = steering_vector(direction, n_antennas)?;
        h.axpy(gain, &a, Complex64::new(1.0, 0.0));
    }
    let scale = (n_antennas as f64 / paths.n_paths() as f64).sqrt();
    Ok(SpatialChannel {
        entries: h.scale(scale),
    })
}

/// One normalized beamspace channel drawn end to end.
pub fn sample_beamspace<R: Rng + ?Sized>(
    dft: &DftMatrix,
    n_paths: usize,
    sparsity: Option<usize>,
    rng: &mut R,
) -> Result<BeamspaceChannel> {
    let paths = sample_paths(n_paths, rng)?;
    let h = synthesize_channel(&paths, dft.n_antennas())?;
    let mut hb = dft.to_beamspace(&h)?;
    if let Some(s) = sparsity {
        hb = hb.sparsify_top(s)?;
    }
    hb.normalize()
}
