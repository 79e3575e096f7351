//! Training objectives with exact gradients with respect to predictions.

use crate::genome::LossSpec;
use crate::taskbench::PairSet;

/// Numerically stable `ln(1 + e^x)`.
#[cfg(test)]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Median of `|y_i - y_j|` over the pairs; 0 for an empty set.
pub fn median_abs_gap(labels: &[f64], pairs: &PairSet) -> f64 {
    let mut gaps: Vec<f64> = pairs.pairs.iter().map(|&(i, j)| (labels[i] - labels[j]).abs()).collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len() / 2;
    if gaps.len() % 2 == 1 {
        gaps[m]
    } else {
        0.5 * (gaps[m - 1] + gaps[m])
    }
}

fn mse(pred: &[f64], labels: &[f64], grad: &mut [f64], weight: f64) -> f64 {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let e = pred[i] - labels[i];
        loss += e * e;
        grad[i] += weight * 2.0 * e / n;
    }
    loss / n
}

fn hinge(pred: &[f64], labels: &[f64], pairs: &PairSet, margin: f64, grad: &mut [f64]) -> f64 {
    let m = pairs.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in &pairs.pairs {
        let s = (labels[i] - labels[j]).signum();
        let slack = margin - s * (pred[i] - pred[j]);
        if slack > 0.0 {
            loss += slack;
            grad[i] -= s / m;
            grad[j] += s / m;
        }
    }
    loss / m
}

fn logsigmoid(pred: &[f64], labels: &[f64], pairs: &PairSet, threshold: f64, grad: &mut [f64], weight: f64) -> f64 {
    let m = pairs.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in &pairs.pairs {
        let s = (labels[i] - labels[j]).signum();
        let z = s * (pred[i] - pred[j]) - threshold;
        // -ln σ(z) = softplus(-z); d/dz = -σ(-z). One exp serves both.
        let e = (-z.abs()).exp();
        let (value, sig) = if z >= 0.0 {
            (e.ln_1p(), e / (1.0 + e))
        } else {
            (-z + e.ln_1p(), 1.0 / (1.0 + e))
        };
        loss += value;
        let dz = -sig * weight / m;
        grad[i] += dz * s;
        grad[j] -= dz * s;
    }
    loss / m
}

/// Loss value and its gradient with respect to `pred`.
///
/// Ranking kinds average over `pairs` (positions into `pred`/`labels`); an
/// empty pair set contributes zero loss and zero gradient.
pub fn loss_value_and_gradient(loss: &LossSpec, pred: &[f64], labels: &[f64], pairs: &PairSet) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.len()];
    let value = match *loss {
        LossSpec::Mse => mse(pred, labels, &mut grad, 1.0),
        LossSpec::PairwiseHinge { margin } => {
            if pairs.is_empty() {
                0.0
            } else {
                hinge(pred, labels, pairs, margin, &mut grad)
            }
        }
        LossSpec::LogsigmoidRank {
            threshold,
            adaptive_threshold,
        } => {
            if pairs.is_empty() {
                0.0
            } else {
                let tau = if adaptive_threshold {
                    threshold * median_abs_gap(labels, pairs)
                } else {
                    threshold
                };
                logsigmoid(pred, labels, pairs, tau, &mut grad, 1.0)
            }
        }
        LossSpec::Multitask {
            rank_weight,
            threshold,
        } => {
            let mut value = (1.0 - rank_weight) * mse(pred, labels, &mut grad, 1.0 - rank_weight);
            if !pairs.is_empty() {
                value += rank_weight * logsigmoid(pred, labels, pairs, threshold, &mut grad, rank_weight);
            }
            value
        }
    };
    (value, grad)
}
