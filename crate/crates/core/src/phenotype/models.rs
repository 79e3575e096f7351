//! The three bundled model families.

use crate::genome::{LossSpec, ModelSpec};
use crate::linalg::{dot, solve_spd, Matrix};
use crate::phenotype::loss::loss_value_and_gradient;
use crate::rng::{derive_seed, DeterministicStream};
use crate::taskbench::{PairSet, DEFAULT_PAIR_EPS};

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Linear {
        weights: Vec<f64>,
        intercept: f64,
    },
    Kernel {
        support: Matrix,
        dual: Vec<f64>,
        gamma: f64,
        offset: f64,
    },
    Mlp(Mlp),
}

impl FittedModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Linear { weights, intercept } => intercept + dot(weights, x),
            FittedModel::Kernel {
                support,
                dual,
                gamma,
                offset,
            } => {
                let mut acc = 0.0;
                for (i, a) in dual.iter().enumerate() {
                    acc += a * rbf(support.row(i), x, *gamma);
                }
                offset + acc
            }
            FittedModel::Mlp(net) => net.predict_row(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FittedModel::Linear { weights, .. } => weights.len() + 1,
            FittedModel::Kernel { dual, .. } => dual.len(),
            FittedModel::Mlp(net) => net.param_count(),
        }
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        d2 += d * d;
    }
    (-gamma * d2).exp()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ridge regression with an unpenalized intercept, solved through the
/// normal equations on centred data.
pub fn fit_ridge(x: &Matrix, y: &[f64], lambda: f64) -> Option<FittedModel> {
    let (n, p) = (x.rows(), x.cols());
    let x_mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let y_mean = mean(y);
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for i in 0..n {
        let row = x.row(i);
        let yc = y[i] - y_mean;
        for a in 0..p {
            let xa = row[a] - x_mean[a];
            rhs[a] += xa * yc;
            for b in a..p {
                gram[a * p + b] += xa * (row[b] - x_mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
        gram[a * p + a] += lambda;
    }
    let weights = solve_spd(gram, p, &rhs)?;
    let intercept = y_mean - dot(&weights, &x_mean);
    intercept.is_finite().then_some(FittedModel::Linear { weights, intercept })
}

/// RBF kernel ridge regression: `(K + λI) α = y - ȳ`.
pub fn fit_kernel_ridge(x: &Matrix, y: &[f64], lambda: f64, gamma: f64) -> Option<FittedModel> {
    let n = x.rows();
    let y_mean = mean(y);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0 + lambda;
        for j in 0..i {
            let v = rbf(x.row(i), x.row(j), gamma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let rhs: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let dual = solve_spd(k, n, &rhs)?;
    Some(FittedModel::Kernel {
        support: x.clone(),
        dual,
        gamma,
        offset: y_mean,
    })
}

/// One-hidden-layer tanh network trained on standardized labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    inputs: usize,
    hidden: usize,
    /// `hidden x inputs`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    y_mean: f64,
    y_scale: f64,
}

impl Mlp {
    /// Xavier-uniform initialization drawn from `seed` alone.
    pub fn init(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = DeterministicStream::new(seed);
        let a1 = (6.0 / (inputs + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = (0..hidden * inputs).map(|_| rng.uniform_range(-a1, a1)).collect();
        let w2 = (0..hidden).map(|_| rng.uniform_range(-a2, a2)).collect();
        Self {
            inputs,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.inputs + 2 * self.hidden + 1
    }

    fn hidden_activations(&self, x: &[f64], out: &mut [f64]) {
        for (h, slot) in out.iter_mut().enumerate() {
            let w = &self.w1[h * self.inputs..(h + 1) * self.inputs];
            *slot = (self.b1[h] + dot(w, x)).tanh();
        }
    }

    /// Output in standardized label units.
    fn raw_output(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.hidden_activations(x, scratch);
        self.b2 + dot(&self.w2, scratch)
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.hidden];
        self.y_mean + self.y_scale * self.raw_output(x, &mut scratch)
    }
}

/// Ranking losses train on at most this many pairs per training sample.
pub const PAIRS_PER_SAMPLE: usize = 8;

/// Number of ranking pairs a fit on `n` samples uses at most.
pub fn training_pair_cap(n: usize) -> usize {
    (n * n.saturating_sub(1) / 2).min(PAIRS_PER_SAMPLE * n)
}

/// All resolvable pairs when few, else a seeded subsample of
/// [`training_pair_cap`] pairs, fixed for the whole fit.
fn training_pairs(z: &[f64], y_scale: f64, seed: u64) -> PairSet {
    let mut set = PairSet::from_labels(z, DEFAULT_PAIR_EPS / y_scale);
    let cap = training_pair_cap(z.len());
    if set.pairs.len() > cap {
        let mut rng = DeterministicStream::new(derive_seed(seed, 0x7061_6972));
        rng.shuffle(&mut set.pairs);
        set.pairs.truncate(cap);
        set.pairs.sort_unstable();
    }
    set
}

/// Full-batch gradient descent for `epochs` steps. Returns `None` on a
/// non-finite loss or parameter.
pub fn fit_mlp(x: &Matrix, y: &[f64], model: &ModelSpec, loss: &LossSpec, seed: u64) -> Option<FittedModel> {
    let ModelSpec::Mlp1Hidden {
        lambda_reg,
        hidden_units,
        learning_rate,
        epochs,
    } = *model
    else {
        unreachable!("fit_mlp called with a non-mlp model spec");
    };
    let (n, p, h) = (x.rows(), x.cols(), hidden_units as usize);
    let mut net = Mlp::init(p, h, seed);
    let y_mean = mean(y);
    let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    net.y_mean = y_mean;
    net.y_scale = y_scale;
    let z: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let pairs = if loss.kind().is_ranking() {
        training_pairs(&z, y_scale, seed)
    } else {
        PairSet::default()
    };

    let mut acts = vec![0.0; n * h];
    let mut out = vec![0.0; n];
    let mut g_w1 = vec![0.0; h * p];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    for _ in 0..epochs {
        for i in 0..n {
            let a = &mut acts[i * h..(i + 1) * h];
            net.hidden_activations(x.row(i), a);
            out[i] = net.b2 + dot(&net.w2, a);
        }
        let (value, d_out) = loss_value_and_gradient(loss, &out, &z, &pairs);
        if !value.is_finite() {
            return None;
        }
        g_w1.iter_mut().for_each(|v| *v = 0.0);
        g_b1.iter_mut().for_each(|v| *v = 0.0);
        g_w2.iter_mut().for_each(|v| *v = 0.0);
        let mut g_b2 = 0.0;
        for i in 0..n {
            let d = d_out[i];
            if d == 0.0 {
                continue;
            }
            g_b2 += d;
            let a = &acts[i * h..(i + 1) * h];
            let row = x.row(i);
            for k in 0..h {
                g_w2[k] += d * a[k];
                let dpre = d * net.w2[k] * (1.0 - a[k] * a[k]);
                g_b1[k] += dpre;
                let gw = &mut g_w1[k * p..(k + 1) * p];
                for (g, xv) in gw.iter_mut().zip(row) {
                    *g += dpre * xv;
                }
            }
        }
        for (w, g) in net.w1.iter_mut().zip(&g_w1) {
            *w -= learning_rate * (g + lambda_reg * *w);
        }
        for (w, g) in net.w2.iter_mut().zip(&g_w2) {
            *w -= learning_rate * (g + lambda_reg * *w);
        }
        for (b, g) in net.b1.iter_mut().zip(&g_b1) {
            *b -= learning_rate * g;
        }
        net.b2 -= learning_rate * g_b2;
        if !net.b2.is_finite() || net.w2.iter().any(|w| !w.is_finite()) {
            return None;
        }
    }
    Some(FittedModel::Mlp(net))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, p: usize, seed: u64) -> Matrix {
        let mut rng = DeterministicStream::new(seed);
        Matrix::from_vec(n, p, (0..n * p).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
    }

    #[test]
    fn ridge_recovers_exact_linear_coefficients() {
        let x = grid(50, 4, 1);
        let coef = [0.3, -0.2, 0.05, 0.7];
        let y: Vec<f64> = (0..50).map(|i| 0.28 + dot(x.row(i), &coef)).collect();
        let FittedModel::Linear { weights, intercept } = fit_ridge(&x, &y, 0.0).unwrap() else {
            panic!("expected linear model");
        };
        for (w, c) in weights.iter().zip(coef) {
            assert!((w - c).abs() < 1e-8, "{w} vs {c}");
        }
        assert!((intercept - 0.28).abs() < 1e-8);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let x = grid(40, 3, 2);
        let y: Vec<f64> = (0..40).map(|i| x.get(i, 0) * 0.5 + 0.3).collect();
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        let FittedModel::Linear { weights, .. } = &m else { unreachable!() };
        assert!(weights.iter().all(|w| w.abs() < 1e-6));
        let ybar = mean(&y);
        for i in 0..40 {
            assert!((m.predict_row(x.row(i)) - ybar).abs() < 1e-6);
        }
    }

    #[test]
    fn collinear_ridge_without_penalty_fails() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        assert!(fit_ridge(&x, &[1.0, 2.0, 3.0], 0.0).is_none());
    }

    #[test]
    fn kernel_ridge_interpolates_with_tiny_penalty() {
        let x = grid(20, 2, 3);
        let y: Vec<f64> = (0..20).map(|i| (x.get(i, 0) * 2.0).sin()).collect();
        let m = fit_kernel_ridge(&x, &y, 1e-8, 1.0).unwrap();
        for i in 0..20 {
            assert!((m.predict_row(x.row(i)) - y[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn mlp_without_epochs_is_its_initialization() {
        let x = grid(30, 3, 4);
        let y: Vec<f64> = (0..30).map(|i| x.get(i, 1)).collect();
        let spec = ModelSpec::Mlp1Hidden {
            lambda_reg: 0.0,
            hidden_units: 8,
            learning_rate: 0.1,
            epochs: 0,
        };
        let a = fit_mlp(&x, &y, &spec, &LossSpec::Mse, 9).unwrap();
        let b = fit_mlp(&x, &y, &spec, &LossSpec::Mse, 9).unwrap();
        let c = fit_mlp(&x, &y, &spec, &LossSpec::Mse, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let FittedModel::Mlp(net) = &a else { unreachable!() };
        let mut init = Mlp::init(3, 8, 9);
        init.y_mean = net.y_mean;
        init.y_scale = net.y_scale;
        assert_eq!(*net, init);
    }

    #[test]
    fn mlp_training_reduces_error() {
        let x = grid(60, 2, 5);
        let y: Vec<f64> = (0..60).map(|i| x.get(i, 0) - 0.5 * x.get(i, 1)).collect();
        let spec = |epochs| ModelSpec::Mlp1Hidden {
            lambda_reg: 0.0,
            hidden_units: 8,
            learning_rate: 0.1,
            epochs,
        };
        let sse = |m: &FittedModel| -> f64 { (0..60).map(|i| (m.predict_row(x.row(i)) - y[i]).powi(2)).sum() };
        let before = fit_mlp(&x, &y, &spec(0), &LossSpec::Mse, 1).unwrap();
        let after = fit_mlp(&x, &y, &spec(200), &LossSpec::Mse, 1).unwrap();
        assert!(sse(&after) < 0.2 * sse(&before));
    }
}
