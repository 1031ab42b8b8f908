#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use trr::rng;
use trr::sensing::bernoulli_matrix;
use trr::utrr::{backward, forward_batch, UtrrParams};

/// Scalar-loop forward pass of the unfolded network, independent of the
/// library's matrix implementation. Returns the reconstruction and every
/// pre-activation and layer input, for kink detection.
pub struct ScalarForward {
    pub output: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

pub fn scalar_forward(params: &UtrrParams, y: &[f64]) -> ScalarForward {
    let phi = params.phi().matrix();
    let (m, n) = phi.shape();
    let mut z = vec![0.0; 2 * n];
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            s += phi[(i, j)] * y[i];
        }
        z[j] = s.max(0.0);
        z[j + n] = (-s).max(0.0);
    }
    let mut pres = Vec::new();
    let mut inputs = Vec::new();
    for (t, layer) in params.layers.iter().enumerate() {
        let a = &layer.a_matrix;
        let k = params.layer_top_k(t);
        // indices of the k largest entries, lowest index first on ties
        let mut order: Vec<usize> = (0..2 * n).collect();
        order.sort_by(|&p, &q| z[q].abs().total_cmp(&z[p].abs()).then(p.cmp(&q)));
        let mut keep = vec![false; 2 * n];
        for &i in &order[..k] {
            keep[i] = true;
        }
        let mut r = vec![0.0; m];
        for i in 0..m {
            let mut s = -y[i];
            for j in 0..2 * n {
                s += a[(i, j)] * z[j];
            }
            r[i] = s;
        }
        let mut pre = vec![0.0; 2 * n];
        let mut next = vec![0.0; 2 * n];
        for j in 0..2 * n {
            let mut g = if keep[j] { 0.0 } else { layer.rho * z[j] };
            for i in 0..m {
                g += a[(i, j)] * r[i];
            }
            pre[j] = z[j] - layer.alpha * g;
            next[j] = (pre[j].max(0.0) + z[j]) / 2.0;
        }
        inputs.push(std::mem::replace(&mut z, next));
        pres.push(pre);
    }
    let output = (0..n).map(|j| z[j] - z[j + n]).collect();
    ScalarForward {
        output,
        pre: pres,
        inputs,
    }
}

pub fn scalar_loss(params: &UtrrParams, ys: &[Vec<f64>], xs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (y, x) in ys.iter().zip(xs) {
        let out = scalar_forward(params, y).output;
        total += out.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / ys.len() as f64
}

/// Smallest distance of any ReLU input or top-K boundary from a kink.
pub fn kink_margin(params: &UtrrParams, ys: &[Vec<f64>]) -> f64 {
    let mut margin = f64::INFINITY;
    for y in ys {
        let f = scalar_forward(params, y);
        for (t, (pre, z)) in f.pre.iter().zip(&f.inputs).enumerate() {
            for &p in pre {
                margin = margin.min(p.abs());
            }
            let k = params.layer_top_k(t);
            if k > 0 && k < z.len() {
                let mut mags: Vec<f64> = z.iter().map(|v| v.abs()).collect();
                mags.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(mags[k - 1] - mags[k]);
            }
        }
    }
    margin
}

/// A random network around the standard initialization, with a batch that
/// keeps every kink at least `min_margin` away.
pub struct GradientCase {
    pub params: UtrrParams,
    pub ys: Vec<Vec<f64>>,
    pub xs: Vec<Vec<f64>>,
}

pub fn random_case(seed: u64, m: usize, n: usize, layers: usize, top_k: usize, min_margin: f64) -> GradientCase {
    let mut r = rng::seeded(seed);
    loop {
        let phi = Arc::new(bernoulli_matrix(m, n, &mut r).unwrap());
        let mut params = UtrrParams::init(phi, layers, top_k).unwrap();
        for layer in &mut params.layers {
            layer.a_matrix.apply(|v| *v += 0.05 * (r.random::<f64>() - 0.5));
            layer.rho = 0.5 + r.random::<f64>();
            layer.alpha = 0.05 + 0.15 * r.random::<f64>();
        }
        let ys: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| r.random::<f64>() - 0.5).collect())
            .collect();
        if kink_margin(&params, &ys) >= min_margin {
            return GradientCase { params, ys, xs };
        }
    }
}

/// Largest relative deviation between the analytic gradient and central
/// finite differences of the scalar-loop loss over all parameters.
/// Components whose magnitude is below `floor` are compared against `floor`.
pub fn max_gradient_deviation(case: &GradientCase, h: f64, floor: f64) -> f64 {
    let params = &case.params;
    let m = params.m_rows();
    let n = params.n_cols();
    let ys = DMatrix::from_fn(m, case.ys.len(), |i, j| case.ys[j][i]);
    let xs = DMatrix::from_fn(n, case.xs.len(), |i, j| case.xs[j][i]);
    let (_, trace) = forward_batch(params, &ys).unwrap();
    let grads = backward(params, &trace, &xs).unwrap();

    let rel = |analytic: f64, fd: f64| (analytic - fd).abs() / analytic.abs().max(floor);
    let fd = |perturb: &dyn Fn(&mut UtrrParams, f64)| {
        let mut plus = params.clone();
        perturb(&mut plus, h);
        let mut minus = params.clone();
        perturb(&mut minus, -h);
        (scalar_loss(&plus, &case.ys, &case.xs) - scalar_loss(&minus, &case.ys, &case.xs)) / (2.0 * h)
    };
    let mut worst = 0.0_f64;
    for (t, g) in grads.layers.iter().enumerate() {
        worst = worst.max(rel(g.rho, fd(&|p, d| p.layers[t].rho += d)));
        worst = worst.max(rel(g.alpha, fd(&|p, d| p.layers[t].alpha += d)));
        for i in 0..m {
            for j in 0..2 * n {
                worst = worst.max(rel(g.a_matrix[(i, j)], fd(&|p, d| p.layers[t].a_matrix[(i, j)] += d)));
            }
        }
    }
    worst
}

pub fn to_dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
