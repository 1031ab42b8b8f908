//! Reconstruction error measures, zero-forcing precoding and downlink sum rate.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Reported in place of `-inf` dB for exact reconstructions.
pub const NMSE_FLOOR_DB: f64 = -300.0;
/// Largest accepted condition number of the ZF Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `||x - x_hat||^2 / ||x||^2`.
pub fn normalized_sq_error<T: ComplexField<RealField = f64>>(x: &DVector<T>, x_hat: &DVector<T>) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::mismatch("normalized error", x.len(), x_hat.len()));
    }
    let energy = x.norm_squared();
    if energy == 0.0 {
        return Err(Error::Degenerate("normalized error against a zero vector"));
    }
    Ok((x - x_hat).norm_squared() / energy)
}

/// Mean of the per-sample normalized squared errors, in dB.
pub fn nmse_db<T: ComplexField<RealField = f64>>(truth: &[DVector<T>], estimate: &[DVector<T>]) -> Result<f64> {
    nmse_linear(truth, estimate).map(to_db)
}

pub fn nmse_linear<T: ComplexField<RealField = f64>>(truth: &[DVector<T>], estimate: &[DVector<T>]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Degenerate("NMSE of an empty set"));
    }
    if truth.len() != estimate.len() {
        return Err(Error::mismatch("nmse samples", truth.len(), estimate.len()));
    }
    let mut total = 0.0;
    for (x, x_hat) in truth.iter().zip(estimate) {
        total += normalized_sq_error(x, x_hat)?;
    }
    Ok(total / truth.len() as f64)
}

/// Fraction of errors strictly below `threshold`.
pub fn accurate_ratio(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Degenerate("accurate ratio of an empty list"));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Beamspace channels of `U` users, one column each (`N x U`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiUserChannel {
    pub columns: DMatrix<Complex64>,
}

impl MultiUserChannel {
    pub fn from_users(users: &[DVector<Complex64>]) -> Result<Self> {
        let first = users.first().ok_or(Error::Degenerate("no users"))?;
        for u in users {
            if u.len() != first.len() {
                return Err(Error::mismatch("user channel", first.len(), u.len()));
            }
        }
        Ok(MultiUserChannel {
            columns: DMatrix::from_columns(users),
        })
    }

    pub fn n_users(&self) -> usize {
        self.columns.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    /// Frobenius-normalized beamformers, one column per user.
    pub columns: DMatrix<Complex64>,
    /// `||F~||_F` before normalization.
    pub frobenius_norm_of_unnormalized: f64,
}

/// Hermitian positive-definite inverse via eigendecomposition, checking the
/// condition number on the way.
fn gram_inverse(gram: DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min >= MAX_GRAM_CONDITION {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::IllConditioned(cond));
    }
    let inv_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(1.0 / l, 0.0)));
    Ok(&eig.eigenvectors * inv_vals * eig.eigenvectors.adjoint())
}

/// `F~ = H (H^H H)^{-1}`, scaled to unit total power.
pub fn zf_precoder(h_est: &MultiUserChannel) -> Result<Precoder> {
    let (n, u) = h_est.columns.shape();
    if u == 0 || n < u {
        return Err(Error::InvalidDimension(format!(
            "zero forcing needs N >= U >= 1, got N = {n}, U = {u}"
        )));
    }
    let h = &h_est.columns;
    let gram = h.ad_mul(h);
    let unnormalized = h * gram_inverse(gram)?;
    let frob = unnormalized.norm();
    Ok(Precoder {
        columns: unnormalized.unscale(frob),
        frobenius_norm_of_unnormalized: frob,
    })
}

/// `H^H F` with entry `(u, i) = h_u^H f_i`.
pub fn effective_gains(h_true: &MultiUserChannel, f: &Precoder) -> Result<DMatrix<Complex64>> {
    if h_true.columns.shape() != f.columns.shape() {
        return Err(Error::mismatch("precoder users", h_true.n_users(), f.columns.ncols()));
    }
    Ok(h_true.columns.ad_mul(&f.columns))
}

/// `sum_u log2(1 + |h_u^H f_u|^2 / (sum_{i != u} |h_u^H f_i|^2 + 1/SNR))`.
pub fn sum_rate(h_true: &MultiUserChannel, f: &Precoder, snr_dl_db: f64) -> Result<f64> {
    let gains = effective_gains(h_true, f)?;
    let noise = 10f64.powf(-snr_dl_db / 10.0);
    let u = gains.nrows();
    let mut rate = 0.0;
    for user in 0..u {
        let signal = gains[(user, user)].norm_sqr();
        let interference: f64 = (0..u).filter(|&i| i != user).map(|i| gains[(user, i)].norm_sqr()).sum();
        rate += (1.0 + signal / (interference + noise)).log2();
    }
    Ok(rate)
}
