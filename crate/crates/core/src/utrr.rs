//! Unfolded trimmed-ridge regression network.
//!
//! The decoder maps a measurement `y` to `z0 = [(Phi^T y)+; (-Phi^T y)+]`,
//! applies `L` unfolding layers
//!
//! ```text
//! g  = A_t^T (A_t z - y) + rho_t (z - trim_K(z))
//! w  = relu(z - alpha_t g)
//! z' = (w + z) / 2
//! ```
//!
//! and returns `u - v` for the final `z = [u; v]`. With reduced complexity
//! (the default) only the last layer uses `K = top_k_last`; the others use
//! `K = 0` and skip the sort.
//!
//! Forward and backward passes operate on batches stored column-wise, so a
//! single sample is a batch of one. Gradients are exact reverse-mode
//! derivatives with ReLU subgradient 0 at zero and the top-K mask frozen at
//! its forward value.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::select;
use crate::sensing::{Dataset, MeasurementMatrix};

pub const INIT_RHO: f64 = 1.0;
pub const INIT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct UtrrLayer {
    pub a_matrix: DMatrix<f64>,
    pub rho: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtrrParams {
    pub layers: Vec<UtrrLayer>,
    pub top_k_last: usize,
    /// `false` applies `top_k_last` in every layer instead of only the last.
    pub rcc: bool,
    phi: Arc<MeasurementMatrix>,
}

impl UtrrParams {
    /// Every layer starts at `A = [Phi, -Phi]`, `rho = 1`, `alpha = 0.1`.
    pub fn init(phi: Arc<MeasurementMatrix>, n_layers: usize, top_k: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidDimension("L >= 1 layers required".into()));
        }
        if top_k > 2 * phi.n_cols() {
            return Err(Error::OutOfRange {
                name: "top_k",
                value: top_k,
                max: 2 * phi.n_cols(),
            });
        }
        let a = phi.lifted();
        let layers = (0..n_layers)
            .map(|_| UtrrLayer {
                a_matrix: a.clone(),
                rho: INIT_RHO,
                alpha: INIT_ALPHA,
            })
            .collect();
        Ok(UtrrParams {
            layers,
            top_k_last: top_k,
            rcc: true,
            phi,
        })
    }

    /// Assemble from stored layers; every `A` must be `M x 2N` for `phi`.
    pub fn from_layers(
        phi: Arc<MeasurementMatrix>,
        layers: Vec<UtrrLayer>,
        top_k_last: usize,
        rcc: bool,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidDimension("L >= 1 layers required".into()));
        }
        let shape = (phi.m_rows(), 2 * phi.n_cols());
        for layer in &layers {
            if layer.a_matrix.shape() != shape {
                return Err(Error::mismatch("layer matrix columns", shape.1, layer.a_matrix.ncols()));
            }
        }
        if top_k_last > shape.1 {
            return Err(Error::OutOfRange {
                name: "top_k_last",
                value: top_k_last,
                max: shape.1,
            });
        }
        Ok(UtrrParams {
            layers,
            top_k_last,
            rcc,
            phi,
        })
    }

    pub fn with_rcc(mut self, rcc: bool) -> Self {
        self.rcc = rcc;
        self
    }

    pub fn phi(&self) -> &Arc<MeasurementMatrix> {
        &self.phi
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn m_rows(&self) -> usize {
        self.phi.m_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.phi.n_cols()
    }

    /// `L (2MN + 2)`.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.a_matrix.len() + 2).sum()
    }

    /// Top-K parameter used by layer `t`.
    pub fn layer_top_k(&self, t: usize) -> usize {
        if !self.rcc || t + 1 == self.layers.len() {
            self.top_k_last
        } else {
            0
        }
    }
}

/// Per-layer cache for the reverse pass. Columns are samples.
#[derive(Debug, Clone)]
struct LayerCache {
    /// Layer input `z_t`.
    z: DMatrix<f64>,
    /// `A z - y`.
    residual: DMatrix<f64>,
    /// Regularized gradient `g`.
    grad: DMatrix<f64>,
    /// Pre-activation `z - alpha g`.
    pre: DMatrix<f64>,
    /// 1 outside the top-K set, 0 inside; `None` when `K = 0`.
    untrimmed: Option<DMatrix<f64>>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layers: Vec<LayerCache>,
    output: DMatrix<f64>,
    batch: usize,
}

impl ForwardTrace {
    /// States `z_0 ..= z_L`.
    pub fn states(&self) -> Vec<DMatrix<f64>> {
        let mut s: Vec<_> = self.layers.iter().map(|c| c.z.clone()).collect();
        if let Some(last) = self.layers.last() {
            let w = last.pre.map(|v| v.max(0.0));
            s.push((w + &last.z) * 0.5);
        }
        s
    }

    pub fn depth(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// ReLU activity mask (`pre > 0`) of layer `t`.
    pub fn relu_mask(&self, t: usize) -> DMatrix<bool> {
        self.layers[t].pre.map(|v| v > 0.0)
    }

    /// Reconstructions, one column per sample.
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

fn lift_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, b) = x.shape();
    DMatrix::from_fn(2 * n, b, |i, j| {
        if i < n {
            x[(i, j)].max(0.0)
        } else {
            (-x[(i - n, j)]).max(0.0)
        }
    })
}

fn unlift_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() / 2;
    DMatrix::from_fn(n, z.ncols(), |i, j| z[(i, j)] - z[(i + n, j)])
}

/// `1 - mask(top-K of each column)`.
fn untrimmed_mask(z: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut c = DMatrix::from_element(z.nrows(), z.ncols(), 1.0);
    for j in 0..z.ncols() {
        let mags: Vec<f64> = z.column(j).iter().map(|v| v.abs()).collect();
        for i in select::top_k_indices(&mags, k) {
            c[(i, j)] = 0.0;
        }
    }
    c
}

/// Forward pass over a batch `ys` (`M x B`), returning `N x B` outputs.
pub fn forward_batch(params: &UtrrParams, ys: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardTrace)> {
    if ys.nrows() != params.m_rows() {
        return Err(Error::mismatch("measurement batch rows", params.m_rows(), ys.nrows()));
    }
    let mut z = lift_columns(&params.phi.matrix().tr_mul(ys));
    let mut caches = Vec::with_capacity(params.n_layers());
    for (t, layer) in params.layers.iter().enumerate() {
        let residual = &layer.a_matrix * &z - ys;
        let mut grad = layer.a_matrix.tr_mul(&residual);
        let k = params.layer_top_k(t);
        let untrimmed = (k > 0).then(|| untrimmed_mask(&z, k));
        match &untrimmed {
            Some(c) => grad += c.component_mul(&z) * layer.rho,
            None => grad += &z * layer.rho,
        }
        let pre = &z - &grad * layer.alpha;
        let next = (pre.map(|v| v.max(0.0)) + &z) * 0.5;
        caches.push(LayerCache {
            z: std::mem::replace(&mut z, next),
            residual,
            grad,
            pre,
            untrimmed,
        });
    }
    let output = unlift_columns(&z);
    let trace = ForwardTrace {
        layers: caches,
        output: output.clone(),
        batch: ys.ncols(),
    };
    Ok((output, trace))
}

/// Forward pass for one measurement vector.
pub fn forward(params: &UtrrParams, y: &DVector<f64>) -> Result<(DVector<f64>, ForwardTrace)> {
    let ys = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let (out, trace) = forward_batch(params, &ys)?;
    Ok((out.column(0).into_owned(), trace))
}

/// Reconstruction without keeping a trace.
pub fn predict(params: &UtrrParams, y: &DVector<f64>) -> Result<DVector<f64>> {
    forward(params, y).map(|(x, _)| x)
}

/// `mean_i ||x_i - x_hat_i||^2`.
pub fn loss(x_hat: &[DVector<f64>], x: &[DVector<f64>]) -> Result<f64> {
    if x_hat.is_empty() {
        return Err(Error::Degenerate("loss of an empty batch"));
    }
    if x_hat.len() != x.len() {
        return Err(Error::mismatch("loss batch", x.len(), x_hat.len()));
    }
    let mut total = 0.0;
    for (a, b) in x_hat.iter().zip(x) {
        if a.len() != b.len() {
            return Err(Error::mismatch("loss sample", b.len(), a.len()));
        }
        total += (a - b).norm_squared();
    }
    Ok(total / x.len() as f64)
}

fn batch_loss(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (x_hat - x).norm_squared() / x.ncols() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub a_matrix: DMatrix<f64>,
    pub rho: f64,
    pub alpha: f64,
}

/// Derivatives of the loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(params: &UtrrParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    a_matrix: DMatrix::zeros(l.a_matrix.nrows(), l.a_matrix.ncols()),
                    rho: 0.0,
                    alpha: 0.0,
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.a_matrix.iter().copied().chain([l.rho, l.alpha]))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gradient of the batch-mean squared error `mean_i ||x_i - x_hat_i||^2`.
///
/// `labels` holds one column per sample, matching the batch of `trace`.
pub fn backward(params: &UtrrParams, trace: &ForwardTrace, labels: &DMatrix<f64>) -> Result<Gradients> {
    if trace.layers.len() != params.n_layers() {
        return Err(Error::mismatch("trace depth", params.n_layers() + 1, trace.depth()));
    }
    if labels.shape() != trace.output.shape() {
        return Err(Error::mismatch(
            "label batch columns",
            trace.output.ncols(),
            labels.ncols(),
        ));
    }
    let n = params.n_cols();
    let scale = 2.0 / trace.batch as f64;
    let d_out = (&trace.output - labels) * scale;
    let mut dz = DMatrix::from_fn(2 * n, d_out.ncols(), |i, j| {
        if i < n {
            d_out[(i, j)]
        } else {
            -d_out[(i - n, j)]
        }
    });

    let mut grads = Vec::with_capacity(params.n_layers());
    for (layer, cache) in params.layers.iter().zip(&trace.layers).rev() {
        // z' = (relu(pre) + z) / 2
        let d_pre = dz.zip_map(&cache.pre, |d, p| if p > 0.0 { 0.5 * d } else { 0.0 });
        let mut d_z = dz * 0.5 + &d_pre;
        // pre = z - alpha g
        let d_alpha = -d_pre.dot(&cache.grad);
        let d_grad = d_pre * (-layer.alpha);
        // g = A^T r + rho c.z
        let (d_rho, d_z_reg) = match &cache.untrimmed {
            Some(c) => {
                let cz = c.component_mul(&cache.z);
                (d_grad.dot(&cz), c.component_mul(&d_grad) * layer.rho)
            }
            None => (d_grad.dot(&cache.z), &d_grad * layer.rho),
        };
        d_z += d_z_reg;
        // r = A z - y
        let d_res = &layer.a_matrix * &d_grad;
        let mut d_a = &cache.residual * d_grad.transpose();
        d_a.gemm(1.0, &d_res, &cache.z.transpose(), 1.0);
        d_z.gemm_tr(1.0, &layer.a_matrix, &d_res, 1.0);
        grads.push(LayerGradient {
            a_matrix: d_a,
            rho: d_rho,
            alpha: d_alpha,
        });
        dz = d_z;
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// `p <- p - lr g` for every trainable scalar.
pub fn sgd_update(params: &mut UtrrParams, grads: &Gradients, lr: f64) {
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        layer.a_matrix.zip_apply(&g.a_matrix, |p, d| *p -= lr * d);
        layer.rho -= lr * g.rho;
        layer.alpha -= lr * g.alpha;
    }
}

/// Parameter update rule used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain mini-batch gradient descent.
    Sgd,
    /// Adam with the usual moment decays `(0.9, 0.999)` and `1e-8` floor.
    Adam,
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::Adam => f.write_str("adam"),
        }
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for [`Optimizer::Adam`].
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Gradients,
    second: Gradients,
    steps: i32,
}

impl AdamState {
    pub fn new(params: &UtrrParams) -> Self {
        AdamState {
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            steps: 0,
        }
    }

    pub fn update(&mut self, params: &mut UtrrParams, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
        let step = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        let layers = params
            .layers
            .iter_mut()
            .zip(grads.layers.iter())
            .zip(self.first.layers.iter_mut().zip(self.second.layers.iter_mut()));
        for ((layer, g), (m, v)) in layers {
            for (((p, &gi), mi), vi) in layer
                .a_matrix
                .iter_mut()
                .zip(g.a_matrix.iter())
                .zip(m.a_matrix.iter_mut())
                .zip(v.a_matrix.iter_mut())
            {
                step(p, mi, vi, gi);
            }
            step(&mut layer.rho, &mut m.rho, &mut v.rho, g.rho);
            step(&mut layer.alpha, &mut m.alpha, &mut v.alpha, g.alpha);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// One stage per rate; the epoch budget is split evenly across stages.
    pub learning_rates: Vec<f64>,
    pub max_epochs: usize,
    /// Stop after this many epochs without a strict validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.learning_rates.is_empty() {
            return Err(Error::InvalidConfig(
                "training needs batch_size >= 1, patience >= 1 and at least one learning rate".into(),
            ));
        }
        Ok(())
    }

    /// Learning-rate stage of a 0-based epoch.
    pub fn stage(&self, epoch: usize) -> usize {
        let stages = self.learning_rates.len();
        if self.max_epochs == 0 {
            return 0;
        }
        (epoch * stages / self.max_epochs).min(stages - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stage: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|i| self.epochs[i].val_loss)
    }
}

fn stack_columns(dataset: &Dataset, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = dataset.phi.m_rows();
    let n = dataset.phi.n_cols();
    let mut ys = DMatrix::zeros(m, idx.len());
    let mut xs = DMatrix::zeros(n, idx.len());
    for (col, &i) in idx.iter().enumerate() {
        ys.set_column(col, &dataset.pairs[i].measurement);
        xs.set_column(col, &dataset.pairs[i].label);
    }
    (ys, xs)
}

const EVAL_CHUNK: usize = 512;

/// Reconstructions for every pair of `dataset`, in order.
pub fn predict_dataset(params: &UtrrParams, dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
    check_dataset(params, dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let (ys, _) = stack_columns(dataset, chunk);
        let (x_hat, _) = forward_batch(params, &ys)?;
        out.extend(x_hat.column_iter().map(|c| c.into_owned()));
    }
    Ok(out)
}

/// Mean squared reconstruction error over the whole dataset.
pub fn dataset_loss(params: &UtrrParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("loss of an empty dataset"));
    }
    let x_hat = predict_dataset(params, dataset)?;
    let labels: Vec<_> = dataset.pairs.iter().map(|p| p.label.clone()).collect();
    loss(&x_hat, &labels)
}

fn check_dataset(params: &UtrrParams, dataset: &Dataset) -> Result<()> {
    if dataset.phi.m_rows() != params.m_rows() {
        return Err(Error::mismatch(
            "dataset measurements",
            params.m_rows(),
            dataset.phi.m_rows(),
        ));
    }
    if dataset.phi.n_cols() != params.n_cols() {
        return Err(Error::mismatch("dataset labels", params.n_cols(), dataset.phi.n_cols()));
    }
    Ok(())
}

/// Mini-batch training with staged learning rates and early stopping.
///
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn train(
    params: &UtrrParams,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(UtrrParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Degenerate("training needs nonempty train and validation sets"));
    }
    check_dataset(params, train_set)?;
    check_dataset(params, val_set)?;

    let mut current = params.clone();
    let mut best = params.clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        stopped_early: false,
        best_epoch: None,
    };
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = AdamState::new(params);

    for epoch in 0..cfg.max_epochs {
        let stage = cfg.stage(epoch);
        let lr = cfg.learning_rates[stage];
        let mut shuffle = rng::seeded(rng::derive(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (ys, xs) = stack_columns(train_set, batch);
            let (x_hat, trace) = forward_batch(&current, &ys)?;
            loss_sum += batch_loss(&x_hat, &xs) * batch.len() as f64;
            let grads = backward(&current, &trace, &xs)?;
            match cfg.optimizer {
                Optimizer::Sgd => sgd_update(&mut current, &grads, lr),
                Optimizer::Adam => adam.update(&mut current, &grads, lr),
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let val_loss = dataset_loss(&current, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            stage,
            learning_rate: lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = current.clone();
            history.best_epoch = Some(history.epochs.len() - 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Average of the member reconstructions.
pub fn ensemble_predict(models: &[UtrrParams], y: &DVector<f64>) -> Result<DVector<f64>> {
    let (first, rest) = models
        .split_first()
        .ok_or(Error::Degenerate("ensemble of zero models"))?;
    let mut sum = predict(first, y)?;
    for model in rest {
        if model.n_cols() != first.n_cols() {
            return Err(Error::mismatch("ensemble member", first.n_cols(), model.n_cols()));
        }
        sum += predict(model, y)?;
    }
    Ok(sum / models.len() as f64)
}

/// Ensemble reconstructions for every pair of `dataset`.
pub fn ensemble_predict_dataset(models: &[UtrrParams], dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
    let (first, rest) = models
        .split_first()
        .ok_or(Error::Degenerate("ensemble of zero models"))?;
    let mut sum = predict_dataset(first, dataset)?;
    for model in rest {
        for (acc, x) in sum.iter_mut().zip(predict_dataset(model, dataset)?) {
            *acc += x;
        }
    }
    let count = models.len() as f64;
    Ok(sum.into_iter().map(|x| x / count).collect())
}
