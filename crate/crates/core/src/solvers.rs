//! Trimmed-ridge regression in the lifted nonnegative space, its iterative
//! solvers, and the ridge/Lasso/OMP baselines.
//!
//! A signed vector `x` is represented as `z = [(x)+; (-x)+]` against the
//! lifted operator `A = [Phi, -Phi]`, so every solver here is a projected
//! gradient method on the nonnegative orthant. Matrix-vector products use a
//! fixed summation order, so repeated solves are bit-identical.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng;
use crate::select;

use rand::Rng;

/// Default ridge weight `rho`.
pub const DEFAULT_RHO: f64 = 1.0;
/// Inflation applied to the power-iteration estimate of `lambda_max(A^T A)`.
pub const LIPSCHITZ_INFLATION: f64 = 1.001;
const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITER: usize = 10_000;

/// `min_{z >= 0} 1/2 ||y - A z||^2 + rho (||z||^2 - ||z||_{K,2}^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrrProblem {
    a_matrix: DMatrix<f64>,
    measurement: DVector<f64>,
    rho: f64,
    top_k: usize,
    lipschitz: f64,
}

impl TrrProblem {
    /// Problem over an arbitrary lifted operator; the Lipschitz constant is
    /// estimated by power iteration.
    pub fn new(a_matrix: DMatrix<f64>, measurement: DVector<f64>, rho: f64, top_k: usize) -> Result<Self> {
        let lipschitz = lipschitz_constant(&a_matrix)?;
        Self::with_lipschitz(a_matrix, measurement, rho, top_k, lipschitz)
    }

    /// Problem for `y = Phi x`, lifted to `A = [Phi, -Phi]`.
    pub fn from_phi(phi: &DMatrix<f64>, measurement: DVector<f64>, rho: f64, top_k: usize) -> Result<Self> {
        Self::new(lift_operator(phi), measurement, rho, top_k)
    }

    pub fn with_lipschitz(
        a_matrix: DMatrix<f64>,
        measurement: DVector<f64>,
        rho: f64,
        top_k: usize,
        lipschitz: f64,
    ) -> Result<Self> {
        if a_matrix.nrows() != measurement.len() {
            return Err(Error::mismatch("trr problem", a_matrix.nrows(), measurement.len()));
        }
        if top_k > a_matrix.ncols() {
            return Err(Error::OutOfRange {
                name: "top_k",
                value: top_k,
                max: a_matrix.ncols(),
            });
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rho must be finite and nonnegative, got {rho}"
            )));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        Ok(TrrProblem {
            a_matrix,
            measurement,
            rho,
            top_k,
            lipschitz,
        })
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn measurement(&self) -> &DVector<f64> {
        &self.measurement
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Same operator and measurement with a different `rho`/`K`.
    pub fn reweighted(&self, rho: f64, top_k: usize) -> Result<Self> {
        Self::with_lipschitz(
            self.a_matrix.clone(),
            self.measurement.clone(),
            rho,
            top_k,
            self.lipschitz,
        )
    }

    /// Fixed step `1 / (k + 2 rho)` of the majorize-minimize iteration.
    pub fn fixed_step(&self) -> f64 {
        1.0 / (self.lipschitz + 2.0 * self.rho)
    }

    fn check(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.a_matrix.ncols() {
            return Err(Error::mismatch("lifted iterate", self.a_matrix.ncols(), z.len()));
        }
        Ok(())
    }

    fn residual(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a_matrix * z - &self.measurement
    }
}

/// `[Phi, -Phi]`.
pub fn lift_operator(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = phi.shape();
    let mut a = DMatrix::zeros(m, 2 * n);
    a.columns_mut(0, n).copy_from(phi);
    a.columns_mut(n, n).copy_from(&(-phi));
    a
}

/// `z = [(x)+; (-x)+]`.
pub fn lift(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(2 * n, |i, _| if i < n { x[i].max(0.0) } else { (-x[i - n]).max(0.0) })
}

/// `x = u - v` for `z = [u; v]`.
pub fn unlift(z: &DVector<f64>) -> DVector<f64> {
    let n = z.len() / 2;
    DVector::from_fn(n, |i, _| z[i] - z[i + n])
}

fn check_k(k: usize, len: usize) -> Result<()> {
    if k > len {
        return Err(Error::OutOfRange {
            name: "k",
            value: k,
            max: len,
        });
    }
    Ok(())
}

fn magnitudes(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.abs()).collect()
}

/// Sum of squares of the `k` largest-magnitude entries.
pub fn top_k2_norm(x: &[f64], k: usize) -> Result<f64> {
    check_k(k, x.len())?;
    Ok(select::top_k_indices(&magnitudes(x), k)
        .into_iter()
        .map(|i| x[i] * x[i])
        .sum())
}

/// Keep the `k` largest-magnitude entries, zero the rest.
pub fn trim_top_k(z: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(k, z.len())?;
    let mask = select::top_k_mask(&magnitudes(z), k);
    Ok(z.iter()
        .zip(mask)
        .map(|(&v, keep)| if keep { v } else { 0.0 })
        .collect())
}

/// `F(z) = 1/2 ||y - A z||^2 + rho (||z||^2 - ||z||_{K,2}^2)`.
pub fn objective(p: &TrrProblem, z: &DVector<f64>) -> Result<f64> {
    p.check(z)?;
    Ok(value_from_residual(p, z, &p.residual(z)))
}

fn value_from_residual(p: &TrrProblem, z: &DVector<f64>, r: &DVector<f64>) -> f64 {
    // ||z||^2 - ||z||_{K,2}^2 summed directly over the entries outside the
    // top-K set, so the regularizer never goes negative through cancellation
    let mask = select::top_k_mask(&magnitudes(z.as_slice()), p.top_k);
    let tail: f64 = z.iter().zip(mask).filter(|(_, keep)| !keep).map(|(v, _)| v * v).sum();
    0.5 * r.norm_squared() + p.rho * tail
}

/// `grad F(z) = A^T (A z - y) + 2 rho (z - trim_K(z))`.
pub fn gradient(p: &TrrProblem, z: &DVector<f64>) -> Result<DVector<f64>> {
    p.check(z)?;
    Ok(gradient_from_residual(p, z, &p.residual(z)))
}

fn gradient_from_residual(p: &TrrProblem, z: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
    let mut g = p.a_matrix.tr_mul(r);
    let mask = select::top_k_mask(&magnitudes(z.as_slice()), p.top_k);
    for ((gi, &zi), keep) in g.iter_mut().zip(z.iter()).zip(mask) {
        if !keep {
            *gi += 2.0 * p.rho * zi;
        }
    }
    g
}

/// `lambda_max(A^T A)` by power iteration on the smaller Gram matrix,
/// inflated by [`LIPSCHITZ_INFLATION`].
pub fn lipschitz_constant(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() || a.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("Lipschitz constant of a zero matrix"));
    }
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.tr_mul(a)
    };
    let n = gram.nrows();
    // deterministic generic start; structured starts such as all-ones can be
    // orthogonal to the dominant eigenvector of a lifted operator
    let mut r = rng::seeded(0x5eed_1195);
    let mut v = DVector::from_fn(n, |_, _| r.random::<f64>() + 0.5);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = &gram * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Err(Error::Numerical("power iteration collapsed to zero"));
        }
        v = w / norm;
        if (next - lambda).abs() <= POWER_TOL * next.abs() {
            return Ok(next.max(0.0) * LIPSCHITZ_INFLATION);
        }
        lambda = next;
    }
    Err(Error::NonConvergence("power iteration"))
}

/// Starting point of an iterative solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Init {
    /// `[(Phi^T y)+; (-Phi^T y)+]`, i.e. `(A^T y)+`.
    #[default]
    Backprojection,
    Zero,
    Lifted(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub eps: f64,
    pub max_iter: usize,
    pub init: Init,
    /// Ground truth for the per-iteration error trace.
    pub reference: Option<DVector<f64>>,
}

impl SolveOptions {
    pub fn new(eps: f64, max_iter: usize) -> Self {
        SolveOptions {
            eps,
            max_iter,
            init: Init::Backprojection,
            reference: None,
        }
    }

    /// Tolerances for noiseless exact-sparse recovery, started from zero.
    pub fn exact_sparse() -> Self {
        Self::new(1e-13, 3000).with_init(Init::Zero)
    }

    /// Tolerances for noisy channel reconstruction.
    pub fn noisy() -> Self {
        Self::new(1e-6, 600)
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_reference(mut self, x: DVector<f64>) -> Self {
        self.reference = Some(x);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self::noisy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    /// `x = u - v`.
    pub solution: DVector<f64>,
    pub iterations_run: usize,
    /// Objective at the initial point followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    /// Normalized squared error against `SolveOptions::reference`, aligned
    /// with `objective_trace`.
    pub error_trace: Option<Vec<f64>>,
    /// `||x||_2` of each iterate, aligned with `objective_trace`.
    pub norm_trace: Vec<f64>,
    pub converged: bool,
}

/// A smooth objective over the nonnegative orthant.
trait LiftedObjective {
    fn dim(&self) -> usize;
    /// Objective value and gradient at `z`.
    fn eval(&self, z: &DVector<f64>) -> (f64, DVector<f64>);
    /// Upper bound on the curvature; its inverse is the safe fixed step.
    fn curvature(&self) -> f64;
    /// `(A^T y)+`.
    fn backprojection(&self) -> DVector<f64>;
}

impl LiftedObjective for TrrProblem {
    fn dim(&self) -> usize {
        self.a_matrix.ncols()
    }

    fn eval(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = self.residual(z);
        (value_from_residual(self, z, &r), gradient_from_residual(self, z, &r))
    }

    fn curvature(&self) -> f64 {
        self.lipschitz + 2.0 * self.rho
    }

    fn backprojection(&self) -> DVector<f64> {
        self.a_matrix.tr_mul(&self.measurement).map(|v| v.max(0.0))
    }
}

/// `||y - A z||^2 + lambda 1^T z` on `z >= 0`.
struct LassoProblem {
    a_matrix: DMatrix<f64>,
    measurement: DVector<f64>,
    lambda: f64,
    lipschitz: f64,
}

impl LiftedObjective for LassoProblem {
    fn dim(&self) -> usize {
        self.a_matrix.ncols()
    }

    fn eval(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = &self.a_matrix * z - &self.measurement;
        let value = r.norm_squared() + self.lambda * z.sum();
        let g = self.a_matrix.tr_mul(&r).map(|v| 2.0 * v + self.lambda);
        (value, g)
    }

    fn curvature(&self) -> f64 {
        2.0 * self.lipschitz
    }

    fn backprojection(&self) -> DVector<f64> {
        self.a_matrix.tr_mul(&self.measurement).map(|v| v.max(0.0))
    }
}

/// Running record of one solve.
struct Recorder<'a> {
    reference: Option<(&'a DVector<f64>, f64)>,
    objective: Vec<f64>,
    error: Vec<f64>,
    norm: Vec<f64>,
}

impl<'a> Recorder<'a> {
    fn new(opts: &'a SolveOptions) -> Self {
        Recorder {
            reference: opts.reference.as_ref().map(|x| (x, x.norm_squared())),
            objective: Vec::new(),
            error: Vec::new(),
            norm: Vec::new(),
        }
    }

    fn record(&mut self, z: &DVector<f64>, value: f64) {
        debug_assert!(z.iter().all(|&v| v >= 0.0), "iterate left the nonnegative orthant");
        let x = unlift(z);
        self.objective.push(value);
        self.norm.push(x.norm());
        if let Some((truth, energy)) = self.reference {
            let err = (truth - &x).norm_squared();
            self.error.push(if energy > 0.0 { err / energy } else { err });
        }
    }

    fn finish(self, z: &DVector<f64>, iterations_run: usize, converged: bool) -> SolverReport {
        SolverReport {
            solution: unlift(z),
            iterations_run,
            objective_trace: self.objective,
            error_trace: self.reference.map(|_| self.error),
            norm_trace: self.norm,
            converged,
        }
    }
}

fn initial_point<P: LiftedObjective>(p: &P, init: &Init) -> Result<DVector<f64>> {
    match init {
        Init::Backprojection => Ok(p.backprojection()),
        Init::Zero => Ok(DVector::zeros(p.dim())),
        Init::Lifted(z) => {
            if z.len() != p.dim() {
                return Err(Error::mismatch("initial iterate", p.dim(), z.len()));
            }
            if z.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Degenerate("initial iterate must be nonnegative"));
            }
            Ok(z.clone())
        }
    }
}

fn project_step(z: &DVector<f64>, g: &DVector<f64>, step: f64) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| (z[i] - step * g[i]).max(0.0))
}

fn solve_fixed<P: LiftedObjective>(p: &P, opts: &SolveOptions) -> Result<SolverReport> {
    opts.validate()?;
    let step = 1.0 / p.curvature();
    let mut z = initial_point(p, &opts.init)?;
    let mut rec = Recorder::new(opts);
    let (mut value, mut g) = p.eval(&z);
    rec.record(&z, value);
    for t in 0..opts.max_iter {
        let next = project_step(&z, &g, step);
        let moved = (&next - &z).norm();
        z = next;
        (value, g) = p.eval(&z);
        rec.record(&z, value);
        if moved <= opts.eps {
            return Ok(rec.finish(&z, t + 1, true));
        }
    }
    Ok(rec.finish(&z, opts.max_iter, false))
}

/// Barzilai-Borwein (BB1) step `||dz||^2 / (dz^T dg)`; returns `fallback`
/// when the curvature estimate is not positive.
pub fn bb_step(
    z: &DVector<f64>,
    z_prev: &DVector<f64>,
    g: &DVector<f64>,
    g_prev: &DVector<f64>,
    fallback: f64,
) -> Result<f64> {
    let dz = z - z_prev;
    let dz2 = dz.norm_squared();
    if dz2 == 0.0 {
        return Err(Error::Degenerate("BB step with identical iterates"));
    }
    let curv = dz.dot(&(g - g_prev));
    if curv > 0.0 && curv.is_finite() {
        Ok(dz2 / curv)
    } else {
        Ok(fallback)
    }
}

/// Extrapolation weight `t / (t + 3)` for `t >= 1`; the first step is a
/// plain projected step.
fn extrapolation(t: usize) -> f64 {
    if t == 0 {
        1.0
    } else {
        t as f64 / (t as f64 + 3.0)
    }
}

fn solve_bb<P: LiftedObjective>(p: &P, opts: &SolveOptions) -> Result<SolverReport> {
    opts.validate()?;
    let fallback = 1.0 / p.curvature();
    let mut z = initial_point(p, &opts.init)?;
    let mut rec = Recorder::new(opts);
    let (mut value, mut g) = p.eval(&z);
    rec.record(&z, value);
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    for t in 0..opts.max_iter {
        let alpha = match &prev {
            None => fallback,
            Some((z_prev, g_prev)) => bb_step(&z, z_prev, &g, g_prev, fallback)?,
        };
        let beta = extrapolation(t);
        let w = project_step(&z, &g, alpha);
        let mut next = &z + (w - &z) * beta;
        let (mut next_value, mut next_g) = p.eval(&next);
        if next_value > value {
            // monotone safeguard: the majorizer step always descends
            next = project_step(&z, &g, fallback);
            (next_value, next_g) = p.eval(&next);
        }
        let moved = (&next - &z).norm();
        prev = Some((std::mem::replace(&mut z, next), std::mem::replace(&mut g, next_g)));
        value = next_value;
        rec.record(&z, value);
        if moved <= opts.eps {
            return Ok(rec.finish(&z, t + 1, true));
        }
    }
    Ok(rec.finish(&z, opts.max_iter, false))
}

fn solve_schedule<P: LiftedObjective>(p: &P, alphas: &[f64], beta: f64, opts: &SolveOptions) -> Result<SolverReport> {
    let mut z = initial_point(p, &opts.init)?;
    let mut rec = Recorder::new(opts);
    let (value, mut g) = p.eval(&z);
    rec.record(&z, value);
    for &alpha in alphas {
        let w = project_step(&z, &g, alpha);
        z = &z + (w - &z) * beta;
        let (value, next_g) = p.eval(&z);
        g = next_g;
        rec.record(&z, value);
    }
    Ok(rec.finish(&z, alphas.len(), false))
}

/// Iterative trimmed-ridge regression with the fixed step `1 / (k + 2 rho)`.
///
/// Each step minimizes a convex majorizer of `F`, so the objective trace is
/// nonincreasing.
pub fn itrr(p: &TrrProblem, opts: &SolveOptions) -> Result<SolverReport> {
    solve_fixed(p, opts)
}

/// Iterative trimmed-ridge regression with BB step sizes and extrapolation
/// `z+ = z + beta (w - z)`, `beta = t / (t + 3)`.
///
/// A candidate that increases the objective is replaced by the fixed
/// `1 / (k + 2 rho)` step, so the objective trace is nonincreasing.
pub fn itrr_bb(p: &TrrProblem, opts: &SolveOptions) -> Result<SolverReport> {
    solve_bb(p, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    /// `1 / (k + 2 lambda2)`.
    Fixed,
    /// BB steps with `t / (t + 3)` extrapolation.
    Bb,
    /// One projected step per entry of `alphas`, each mixed as
    /// `z + beta (w - z)`; runs exactly `alphas.len()` iterations.
    Schedule { alphas: Vec<f64>, beta: f64 },
}

/// `min 1/2 ||y - Phi x||^2 + lambda2 ||x||^2`, solved as the `K = 0`
/// trimmed-ridge problem.
pub fn pgd_ridge(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda2: f64,
    step_rule: StepRule,
    opts: &SolveOptions,
) -> Result<SolverReport> {
    let p = TrrProblem::from_phi(phi, y.clone(), lambda2, 0)?;
    match &step_rule {
        StepRule::Fixed => solve_fixed(&p, opts),
        StepRule::Bb => solve_bb(&p, opts),
        StepRule::Schedule { alphas, beta } => solve_schedule(&p, alphas, *beta, opts),
    }
}

/// `min ||y - Phi x||^2 + lambda1 ||x||_1` by BB projected gradient on the
/// lifted problem, where the l1 term is linear.
pub fn pgd_lasso(phi: &DMatrix<f64>, y: &DVector<f64>, lambda1: f64, opts: &SolveOptions) -> Result<SolverReport> {
    if phi.nrows() != y.len() {
        return Err(Error::mismatch("lasso", phi.nrows(), y.len()));
    }
    if !(lambda1 >= 0.0 && lambda1.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "lambda1 must be finite and nonnegative, got {lambda1}"
        )));
    }
    let a_matrix = lift_operator(phi);
    let lipschitz = lipschitz_constant(&a_matrix)?;
    let p = LassoProblem {
        a_matrix,
        measurement: y.clone(),
        lambda: lambda1,
        lipschitz,
    };
    solve_bb(&p, opts)
}

/// Orthogonal matching pursuit with `sparsity` greedy selections.
///
/// Columns are assumed to have equal norm, so raw correlations are compared.
pub fn omp(phi: &DMatrix<f64>, y: &DVector<f64>, sparsity: usize) -> Result<DVector<f64>> {
    let (m, n) = phi.shape();
    if y.len() != m {
        return Err(Error::mismatch("omp", m, y.len()));
    }
    if sparsity == 0 || sparsity > m.min(n) {
        return Err(Error::OutOfRange {
            name: "sparsity",
            value: sparsity,
            max: m.min(n),
        });
    }
    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    let mut coef = DVector::zeros(0);
    let mut residual = y.clone();
    for _ in 0..sparsity {
        if residual.norm_squared() == 0.0 {
            break;
        }
        let corr = phi.tr_mul(&residual);
        let next = (0..n)
            .filter(|j| !support.contains(j))
            .max_by(|&a, &b| corr[a].abs().total_cmp(&corr[b].abs()).then(b.cmp(&a)))
            .expect("sparsity <= n leaves a free column");
        support.push(next);
        let sub = phi.select_columns(&support);
        let chol = sub
            .tr_mul(&sub)
            .cholesky()
            .ok_or(Error::Numerical("singular active set in OMP"))?;
        coef = chol.solve(&sub.tr_mul(y));
        residual = y - &sub * &coef;
    }
    let mut x = DVector::zeros(n);
    for (&j, &c) in support.iter().zip(coef.iter()) {
        x[j] = c;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(r: &mut rng::Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| r.random::<f64>() * 2.0 - 1.0)
    }

    fn random_nonneg(r: &mut rng::Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.random::<f64>())
    }

    /// Symmetric eigenvalues by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)]).collect()
    }

    /// Dense solve by Gaussian elimination with partial pivoting.
    fn gauss_solve(mut a: DMatrix<f64>, mut b: DVector<f64>) -> DVector<f64> {
        let n = a.nrows();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap();
            a.swap_rows(col, pivot);
            b.swap_rows(col, pivot);
            for row in col + 1..n {
                let f = a[(row, col)] / a[(col, col)];
                for k in col..n {
                    a[(row, k)] -= f * a[(col, k)];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = DVector::zeros(n);
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[(row, k)] * x[k]).sum();
            x[row] = (b[row] - s) / a[(row, row)];
        }
        x
    }

    fn brute_top_k2(x: &[f64], k: usize) -> f64 {
        let n = x.len();
        (0u32..1 << n)
            .filter(|mask| mask.count_ones() as usize == k)
            .map(|mask| {
                (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| x[i] * x[i])
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn top_k2_norm_examples() {
        assert_eq!(top_k2_norm(&[3.0, -1.0, 2.0], 2).unwrap(), 13.0);
        assert_eq!(top_k2_norm(&[3.0, -1.0, 2.0], 0).unwrap(), 0.0);
        assert_eq!(top_k2_norm(&[3.0, -1.0, 2.0], 3).unwrap(), 14.0);
        assert!(top_k2_norm(&[1.0], 2).is_err());
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..7).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
            for k in 0..=7 {
                assert!((top_k2_norm(&x, k).unwrap() - brute_top_k2(&x, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trim_examples() {
        assert_eq!(trim_top_k(&[0.5, 2.0, 0.0, 1.0], 2).unwrap(), vec![0.0, 2.0, 0.0, 1.0]);
        assert_eq!(trim_top_k(&[0.5, 2.0], 0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(trim_top_k(&[0.5, -2.0], 2).unwrap(), vec![0.5, -2.0]);
        // ties keep the lower index
        assert_eq!(trim_top_k(&[1.0, 1.0, 1.0], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(trim_top_k(&[1.0], 2).is_err());
    }

    fn random_problem(r: &mut rng::Rng, m: usize, two_n: usize, rho: f64, k: usize) -> TrrProblem {
        let a = random_matrix(r, m, two_n);
        let y = DVector::from_fn(m, |_, _| r.random::<f64>() - 0.5);
        TrrProblem::new(a, y, rho, k).unwrap()
    }

    #[test]
    fn objective_matches_scalar_loop() {
        let mut r = rng::seeded(11);
        for _ in 0..20 {
            let p = random_problem(&mut r, 4, 6, 1.0, 2);
            let z = random_nonneg(&mut r, 6);
            let mut res = 0.0;
            for i in 0..4 {
                let mut s = 0.0;
                for j in 0..6 {
                    s += p.a_matrix()[(i, j)] * z[j];
                }
                res += (p.measurement()[i] - s).powi(2);
            }
            let sq: f64 = z.iter().map(|v| v * v).sum();
            let expected = 0.5 * res + (sq - brute_top_k2(z.as_slice(), 2));
            assert!((objective(&p, &z).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_edge_cases() {
        let mut r = rng::seeded(12);
        let p = random_problem(&mut r, 3, 6, 0.7, 6);
        let zero = DVector::zeros(6);
        assert!((objective(&p, &zero).unwrap() - 0.5 * p.measurement().norm_squared()).abs() < 1e-15);
        let z = random_nonneg(&mut r, 6);
        let res = (p.a_matrix() * &z - p.measurement()).norm_squared();
        assert!((objective(&p, &z).unwrap() - 0.5 * res).abs() < 1e-12);
        assert!(objective(&p, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn gradient_edge_cases() {
        let mut r = rng::seeded(13);
        let p = random_problem(&mut r, 3, 6, 1.0, 0);
        let g = gradient(&p, &DVector::zeros(6)).unwrap();
        assert_eq!(g, -p.a_matrix().tr_mul(p.measurement()));
        let full = p.reweighted(1.0, 6).unwrap();
        let z = random_nonneg(&mut r, 6);
        let expected = p.a_matrix().tr_mul(&(p.a_matrix() * &z - p.measurement()));
        assert_eq!(gradient(&full, &z).unwrap(), expected);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::seeded(14);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let k = r.random_range(0..=8);
            let rho = r.random::<f64>() + 0.1;
            let p = random_problem(&mut r, 4, 8, rho, k);
            let z = DVector::from_fn(8, |_, _| r.random::<f64>() + 0.1);
            // skip instances whose K-th and (K+1)-th magnitudes nearly tie
            let mut sorted: Vec<f64> = z.iter().copied().collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if k > 0 && k < 8 && sorted[k - 1] - sorted[k] < 1e-3 {
                continue;
            }
            let g = gradient(&p, &z).unwrap();
            for i in 0..8 {
                let mut plus = z.clone();
                plus[i] += h;
                let mut minus = z.clone();
                minus[i] -= h;
                let fd = (objective(&p, &plus).unwrap() - objective(&p, &minus).unwrap()) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3);
                assert!(rel < 1e-5, "component {i}: fd {fd} vs analytic {}", g[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn lipschitz_examples() {
        let eye = DMatrix::<f64>::identity(5, 5);
        assert!((lipschitz_constant(&eye).unwrap() - 1.001).abs() < 1e-9);
        assert!((lipschitz_constant(&(eye * 2.0)).unwrap() - 4.004).abs() < 1e-9);
        assert!(lipschitz_constant(&DMatrix::zeros(2, 2)).is_err());

        let mut r = rng::seeded(15);
        for _ in 0..5 {
            let a = random_matrix(&mut r, 8, 12);
            let oracle = jacobi_eigenvalues(a.tr_mul(&a)).into_iter().fold(f64::MIN, f64::max);
            let got = lipschitz_constant(&a).unwrap() / LIPSCHITZ_INFLATION;
            assert!((got - oracle).abs() / oracle < 1e-6, "{got} vs {oracle}");
        }
    }

    #[test]
    fn lifted_lipschitz_is_twice_phi() {
        let mut r = rng::seeded(16);
        let phi = random_matrix(&mut r, 6, 10);
        let lifted = lipschitz_constant(&lift_operator(&phi)).unwrap();
        let plain = lipschitz_constant(&phi).unwrap();
        assert!((lifted / plain - 2.0).abs() < 1e-6);
    }

    #[test]
    fn itrr_fixed_point_at_zero() {
        let mut r = rng::seeded(17);
        let phi = random_matrix(&mut r, 4, 6);
        let p = TrrProblem::from_phi(&phi, DVector::zeros(4), 1.0, 2).unwrap();
        for report in [
            itrr(&p, &SolveOptions::noisy().with_init(Init::Zero)).unwrap(),
            itrr_bb(&p, &SolveOptions::noisy().with_init(Init::Zero)).unwrap(),
        ] {
            assert!(report.converged);
            assert_eq!(report.iterations_run, 1);
            assert!(report.solution.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn itrr_descends_monotonically() {
        let mut r = rng::seeded(18);
        for _ in 0..20 {
            let phi = random_matrix(&mut r, 6, 10);
            let y = DVector::from_fn(6, |_, _| r.random::<f64>() - 0.5);
            let k = r.random_range(0..=20);
            let p = TrrProblem::from_phi(&phi, y, r.random::<f64>() * 2.0, k).unwrap();
            for report in [
                itrr(&p, &SolveOptions::new(1e-12, 300)).unwrap(),
                itrr_bb(&p, &SolveOptions::new(1e-12, 300)).unwrap(),
            ] {
                for w in report.objective_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{} > {}", w[1], w[0]);
                }
            }
        }
    }

    #[test]
    fn sparse_lift_is_fixed_point() {
        let mut r = rng::seeded(19);
        let (m, n, s) = (12, 20, 3);
        let phi = random_matrix(&mut r, m, n);
        let mut x = DVector::zeros(n);
        for (i, v) in [(2, 1.5), (7, -0.8), (15, 2.1)] {
            x[i] = v;
        }
        let y = &phi * &x;
        let p = TrrProblem::from_phi(&phi, y, 1.0, s).unwrap();
        let z = lift(&x);
        let g = gradient(&p, &z).unwrap();
        for (i, (&zi, &gi)) in z.iter().zip(g.iter()).enumerate() {
            if zi > 0.0 {
                assert!(gi.abs() < 1e-12, "support gradient {i}: {gi}");
            } else {
                // off-support entries stay clamped at zero
                let stepped = (zi - p.fixed_step() * gi).max(0.0);
                assert!(stepped <= 1e-12 || gi <= 0.0);
            }
        }
        let report = itrr(&p, &SolveOptions::new(1e-14, 5).with_init(Init::Lifted(z))).unwrap();
        assert!((&report.solution - &x).norm() < 1e-12);
    }

    #[test]
    fn lift_consistency() {
        let mut r = rng::seeded(20);
        for _ in 0..50 {
            let x = DVector::from_fn(9, |_, _| r.random::<f64>() * 2.0 - 1.0);
            let z = lift(&x);
            assert!(z.iter().all(|&v| v >= 0.0));
            assert_eq!(unlift(&z), x);
            assert!((z.norm() - x.norm()).abs() < 1e-15);
            for k in 0..=9 {
                let a = top_k2_norm(x.as_slice(), k).unwrap();
                let b = top_k2_norm(z.as_slice(), k).unwrap();
                assert!((a - b).abs() < 1e-15);
            }
        }
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = lift_operator(&phi);
        assert_eq!(a.columns(2, 2), -phi.clone());
        assert_eq!(a.columns(0, 2), phi);
    }

    #[test]
    fn bb_step_examples() {
        let mut r = rng::seeded(21);
        let c = random_nonneg(&mut r, 5);
        let z1 = random_nonneg(&mut r, 5);
        let z0 = random_nonneg(&mut r, 5);
        // F = 1/2 ||z - c||^2
        let a = bb_step(&z1, &z0, &(&z1 - &c), &(&z0 - &c), 9.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        // F = 1/2 ||2z - c||^2, Hessian 4I
        let g = |z: &DVector<f64>| (z * 2.0 - &c) * 2.0;
        let a = bb_step(&z1, &z0, &g(&z1), &g(&z0), 9.0).unwrap();
        assert!((a - 0.25).abs() < 1e-12);
        // negative curvature falls back
        let zp = DVector::from_vec(vec![0.0]);
        let zn = DVector::from_vec(vec![1.0]);
        let a = bb_step(
            &zn,
            &zp,
            &DVector::from_vec(vec![-1.0]),
            &DVector::from_vec(vec![0.0]),
            0.3,
        )
        .unwrap();
        assert_eq!(a, 0.3);
        assert!(bb_step(&zn, &zn, &zn, &zp, 0.3).is_err());
    }

    #[test]
    fn bb_reaches_fixed_step_objective_sooner() {
        let mut r = rng::seeded(22);
        let phi = random_matrix(&mut r, 20, 40);
        let y = DVector::from_fn(20, |_, _| r.random::<f64>() - 0.5);
        let p = TrrProblem::from_phi(&phi, y, 1.0, 4).unwrap();
        let fixed = itrr(&p, &SolveOptions::new(1e-300, 200)).unwrap();
        let bb = itrr_bb(&p, &SolveOptions::new(1e-300, 200)).unwrap();
        let target = fixed.objective_trace[200];
        let reached = bb.objective_trace.iter().position(|&v| v <= target).unwrap();
        assert!(reached < 200);
    }

    #[test]
    fn ridge_matches_direct_solve() {
        let mut r = rng::seeded(23);
        let phi = random_matrix(&mut r, 5, 5) + DMatrix::identity(5, 5) * 2.0;
        let x = DVector::from_fn(5, |_, _| r.random::<f64>() - 0.5);
        let y = &phi * &x;
        let oracle = gauss_solve(phi.clone(), y.clone());
        let report = pgd_ridge(&phi, &y, 0.0, StepRule::Bb, &SolveOptions::new(1e-14, 20_000)).unwrap();
        assert!((&report.solution - &oracle).norm() < 1e-8);

        // with lambda2 > 0 the minimizer solves (Phi^T Phi + 2 lambda2 I) x = Phi^T y
        let lam = 0.3;
        let normal = phi.tr_mul(&phi) + DMatrix::identity(5, 5) * (2.0 * lam);
        let oracle = gauss_solve(normal, phi.tr_mul(&y));
        let report = pgd_ridge(&phi, &y, lam, StepRule::Fixed, &SolveOptions::new(1e-14, 50_000)).unwrap();
        assert!((&report.solution - &oracle).norm() < 1e-8);
        assert_eq!(report.norm_trace.len(), report.objective_trace.len());
    }

    #[test]
    fn ridge_heavy_shrinkage() {
        let mut r = rng::seeded(24);
        let phi = random_matrix(&mut r, 6, 10);
        let y = DVector::from_fn(6, |_, _| r.random::<f64>() - 0.5);
        let report = pgd_ridge(&phi, &y, 1e6, StepRule::Fixed, &SolveOptions::noisy()).unwrap();
        assert!(report.solution.norm() < 1e-3 * phi.tr_mul(&y).norm());
    }

    #[test]
    fn lasso_without_penalty_is_least_squares() {
        let mut r = rng::seeded(25);
        let phi = random_matrix(&mut r, 12, 5);
        let x = DVector::from_fn(5, |_, _| r.random::<f64>() - 0.5);
        let y = &phi * &x;
        let oracle = gauss_solve(phi.tr_mul(&phi), phi.tr_mul(&y));
        let report = pgd_lasso(&phi, &y, 0.0, &SolveOptions::new(1e-14, 20_000)).unwrap();
        assert!((&report.solution - &oracle).norm() < 1e-6);
    }

    #[test]
    fn lasso_zero_threshold() {
        let mut r = rng::seeded(26);
        let phi = random_matrix(&mut r, 6, 10);
        let y = DVector::from_fn(6, |_, _| r.random::<f64>() - 0.5);
        let threshold = (phi.tr_mul(&y) * 2.0).amax();
        let report = pgd_lasso(&phi, &y, threshold, &SolveOptions::new(1e-12, 5000)).unwrap();
        assert!(report.solution.amax() < 1e-12);
        let report = pgd_lasso(&phi, &y, 0.5 * threshold, &SolveOptions::new(1e-12, 5000)).unwrap();
        assert!(report.solution.amax() > 1e-6);
    }

    fn unit_columns(r: &mut rng::Rng, m: usize, n: usize) -> DMatrix<f64> {
        let s = 1.0 / (m as f64).sqrt();
        DMatrix::from_fn(m, n, |_, _| if r.random::<bool>() { s } else { -s })
    }

    #[test]
    fn omp_single_atom() {
        let mut r = rng::seeded(27);
        let phi = unit_columns(&mut r, 16, 24);
        let y = phi.column(3) * 2.0;
        let x = omp(&phi, &y, 1).unwrap();
        let mut expected = DVector::zeros(24);
        expected[3] = 2.0;
        assert!((x - expected).norm() < 1e-12);
        assert_eq!(omp(&phi, &DVector::zeros(16), 3).unwrap(), DVector::zeros(24));
        assert!(omp(&phi, &y, 0).is_err());
        assert!(omp(&phi, &y, 17).is_err());
    }

    #[test]
    fn omp_recovers_separated_support() {
        let mut r = rng::seeded(28);
        let phi = unit_columns(&mut r, 64, 128);
        let mut x = DVector::zeros(128);
        for (i, v) in [(5, 1.0), (40, -1.3), (77, 0.9), (120, 1.6)] {
            x[i] = v;
        }
        let y = &phi * &x;
        let x_hat = omp(&phi, &y, 4).unwrap();
        assert!((&x_hat - &x).norm() < 1e-8);
        assert!((&phi * &x_hat - y).norm() < 1e-10);
    }

    #[test]
    fn iterates_stay_nonnegative() {
        let mut r = rng::seeded(29);
        let phi = random_matrix(&mut r, 6, 10);
        let y = DVector::from_fn(6, |_, _| r.random::<f64>() - 0.5);
        let p = TrrProblem::from_phi(&phi, y.clone(), 0.5, 3).unwrap();
        // the recorder asserts nonnegativity of every iterate in debug builds
        itrr(&p, &SolveOptions::noisy()).unwrap();
        itrr_bb(&p, &SolveOptions::noisy()).unwrap();
        pgd_lasso(&phi, &y, 0.01, &SolveOptions::noisy()).unwrap();
    }

    #[test]
    fn error_trace_tracks_reference() {
        let mut r = rng::seeded(30);
        let phi = random_matrix(&mut r, 6, 10);
        let x = DVector::from_fn(10, |i, _| if i == 2 { 1.0 } else { 0.0 });
        let p = TrrProblem::from_phi(&phi, &phi * &x, 1.0, 1).unwrap();
        let report = itrr(&p, &SolveOptions::new(1e-8, 50).with_reference(x)).unwrap();
        let errors = report.error_trace.unwrap();
        assert_eq!(errors.len(), report.objective_trace.len());
        assert!(errors.iter().all(|e| e.is_finite() && *e >= 0.0));
    }
}
