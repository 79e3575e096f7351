//! Error, ranking and aggregate scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize, Serializer};

use crate::contract::Evaluation;
use crate::error::{Error, Result};
use crate::taskbench::PairSet;

/// Rounds to the fixed 6-digit precision used in logs and determinism checks.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn ser_round6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*x))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricBundle {
    #[serde(serialize_with = "ser_round6")]
    pub mae: f64,
    #[serde(serialize_with = "ser_round6")]
    pub rmse: f64,
    #[serde(serialize_with = "ser_round6")]
    pub sign_accuracy: f64,
    #[serde(serialize_with = "ser_round6")]
    pub spearman_rho: f64,
    #[serde(serialize_with = "ser_round6")]
    pub combined_score: f64,
}

impl MetricBundle {
    pub fn compute(pred: &[f64], labels: &[f64], pairs: &PairSet, weights: &ScoreWeights) -> Result<Self> {
        let (mae, rmse) = error_metrics(pred, labels)?;
        let sign_accuracy = sign_accuracy(pred, labels, pairs)?;
        let spearman_rho = spearman(pred, labels)?;
        let combined_score = combined_score(sign_accuracy, mae, rmse, weights)?;
        Ok(Self {
            mae,
            rmse,
            sign_accuracy,
            spearman_rho,
            combined_score,
        })
    }

    /// Fixed-format rendering with 6 fractional digits per field.
    pub fn canonical_string(&self) -> String {
        format!(
            "mae={:.6};rmse={:.6};sign={:.6};rho={:.6};score={:.6}",
            self.mae, self.rmse, self.sign_accuracy, self.spearman_rho, self.combined_score
        )
    }

    /// Field-wise mean. The combined score of the result is the mean of the
    /// inputs' combined scores, not the score of the mean metrics.
    pub fn mean(bundles: &[MetricBundle]) -> Self {
        let n = bundles.len().max(1) as f64;
        let mut out = MetricBundle::default();
        for b in bundles {
            out.mae += b.mae;
            out.rmse += b.rmse;
            out.sign_accuracy += b.sign_accuracy;
            out.spearman_rho += b.spearman_rho;
            out.combined_score += b.combined_score;
        }
        out.mae /= n;
        out.rmse /= n;
        out.sign_accuracy /= n;
        out.spearman_rho /= n;
        out.combined_score /= n;
        out
    }
}

/// Weights of the combined score `α·sign + β/(1+rmse) + γ/(1+mae)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Spec("score weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitnessWeights {
    pub accuracy: f64,
    pub reliability: f64,
    pub complexity: f64,
    /// Parameter count that maps to one unit of complexity.
    pub complexity_scale: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        Self {
            accuracy: 1.0,
            reliability: 0.5,
            complexity: 0.1,
            complexity_scale: 1e4,
        }
    }
}

impl FitnessWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.accuracy, self.reliability, self.complexity];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.complexity_scale > 0.0) {
            return Err(Error::Spec("fitness weights must be >= 0 and complexity_scale > 0".into()));
        }
        Ok(())
    }
}

fn check_inputs(pred: &[f64], labels: &[f64]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite value".into()));
    }
    Ok(())
}

pub fn error_metrics(pred: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    check_inputs(pred, labels)?;
    if pred.is_empty() {
        return Err(Error::Argument("empty inputs".into()));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, y) in pred.iter().zip(labels) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Fraction of pairs whose predicted direction matches the true direction.
/// A predicted tie is counted as wrong.
pub fn sign_accuracy(pred: &[f64], labels: &[f64], pairs: &PairSet) -> Result<f64> {
    check_inputs(pred, labels)?;
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("sign accuracy over an empty pair set".into()));
    }
    let mut correct = 0usize;
    for &(i, j) in &pairs.pairs {
        if i >= pred.len() || j >= pred.len() {
            return Err(Error::Argument(format!("pair ({i}, {j}) out of range")));
        }
        let dp = pred[i] - pred[j];
        let dy = labels[i] - labels[j];
        if dp != 0.0 && (dp > 0.0) == (dy > 0.0) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Average (fractional) ranks, 1-based; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(pred, labels)?;
    if pred.len() < 2 {
        return Err(Error::Argument("spearman needs at least 2 samples".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(labels))
        .ok_or_else(|| Error::UndefinedMetric("zero rank variance".into()))
}

pub fn combined_score(sign_acc: f64, mae: f64, rmse: f64, w: &ScoreWeights) -> Result<f64> {
    if !(0.0..=1.0).contains(&sign_acc) || !(mae >= 0.0) || !(rmse >= 0.0) {
        return Err(Error::Argument(format!(
            "combined score inputs out of range (sign={sign_acc}, mae={mae}, rmse={rmse})"
        )));
    }
    Ok(w.alpha * sign_acc + w.beta / (1.0 + rmse) + w.gamma / (1.0 + mae))
}

/// Divide-by-n standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `1 - σ` over per-seed combined scores.
pub fn reliability(per_seed_scores: &[f64]) -> Result<f64> {
    if per_seed_scores.len() < 2 {
        return Err(Error::Argument("reliability needs at least 2 seed scores".into()));
    }
    Ok(1.0 - population_std(per_seed_scores))
}

/// Selection fitness. Rejected candidates order below every accepted one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fitness {
    Rejected,
    Accepted(f64),
}

impl Fitness {
    pub fn value(self) -> Option<f64> {
        match self {
            Fitness::Rejected => None,
            Fitness::Accepted(v) => Some(v),
        }
    }

    pub fn is_accepted(self) -> bool {
        matches!(self, Fitness::Accepted(_))
    }
}

impl From<Option<f64>> for Fitness {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Fitness::Rejected, Fitness::Accepted)
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Fitness::Rejected, Fitness::Rejected) => Ordering::Equal,
            (Fitness::Rejected, Fitness::Accepted(_)) => Ordering::Less,
            (Fitness::Accepted(_), Fitness::Rejected) => Ordering::Greater,
            (Fitness::Accepted(a), Fitness::Accepted(b)) => a.total_cmp(b),
        }
    }
}

/// `ω1·ρ̄ + ω2·reliability − ω3·(params / scale)`.
pub fn fitness_value(mean_rho: f64, reliability: f64, param_count: usize, w: &FitnessWeights) -> f64 {
    w.accuracy * mean_rho + w.reliability * reliability - w.complexity * (param_count as f64 / w.complexity_scale)
}

pub fn fitness(e: &Evaluation, w: &FitnessWeights) -> Fitness {
    if e.rejected {
        return Fitness::Rejected;
    }
    Fitness::Accepted(fitness_value(
        e.aggregate.spearman_rho,
        e.reliability,
        e.param_count,
        w,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn error_metrics_cases() {
        assert_eq!(error_metrics(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = error_metrics(&[0.31, 0.39], &[0.30, 0.40]).unwrap();
        assert!(approx(mae, 0.01, 1e-12) && approx(rmse, 0.01, 1e-12));
        let (mae, rmse) = error_metrics(&[0.30, 0.42], &[0.30, 0.40]).unwrap();
        assert!(approx(mae, 0.01, 1e-12));
        assert!(approx(rmse, 0.0002f64.sqrt(), 1e-12));
        assert!(approx(rmse, 0.014142, 1e-6));
    }

    #[test]
    fn error_metrics_reject_bad_input() {
        assert!(error_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(error_metrics(&[f64::NAN], &[1.0]).is_err());
        assert!(error_metrics(&[], &[]).is_err());
    }

    #[test]
    fn sign_accuracy_cases() {
        let y = [0.30, 0.28, 0.35, 0.31];
        let pairs = PairSet::from_labels(&y, 1e-6);
        assert_eq!(sign_accuracy(&y, &y, &pairs).unwrap(), 1.0);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert_eq!(sign_accuracy(&neg, &y, &pairs).unwrap(), 0.0);
        let flat = [0.3; 4];
        assert_eq!(sign_accuracy(&flat, &y, &pairs).unwrap(), 0.0);
        assert!(matches!(
            sign_accuracy(&y, &y, &PairSet::default()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn spearman_cases() {
        assert!(approx(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0, 1e-12));
        assert!(approx(spearman(&[3.0, 2.0, 1.0], &[10.0, 20.0, 30.0]).unwrap(), -1.0, 1e-12));
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn combined_score_perfect_cap() {
        let w = ScoreWeights::default();
        assert!(approx(combined_score(1.0, 0.0, 0.0, &w).unwrap(), 1.0, 1e-12));
        assert!(combined_score(1.2, 0.0, 0.0, &w).is_err());
        assert!(combined_score(0.5, -0.1, 0.0, &w).is_err());
    }

    #[test]
    fn reliability_cases() {
        assert_eq!(reliability(&[0.9, 0.9, 0.9]).unwrap(), 1.0);
        assert!(approx(reliability(&[0.8, 0.9, 1.0]).unwrap(), 0.918350, 1e-6));
        assert!(approx(reliability(&[0.0, 1.0]).unwrap(), 0.5, 1e-12));
        assert!(reliability(&[0.5]).is_err());
    }

    #[test]
    fn fitness_arithmetic_and_ordering() {
        let w = FitnessWeights::default();
        assert!(approx(fitness_value(0.9, 1.0, 100, &w), 1.399, 1e-12));
        assert!(fitness_value(0.9, 1.0, 50, &w) > fitness_value(0.9, 1.0, 100, &w));
        assert!(Fitness::Rejected < Fitness::Accepted(-1e9));
        assert!(Fitness::Accepted(0.1) < Fitness::Accepted(0.2));
    }

    #[test]
    fn bundle_serializes_with_six_digits() {
        let b = MetricBundle {
            mae: 0.123456789,
            rmse: 0.1,
            sign_accuracy: 0.5,
            spearman_rho: 0.25,
            combined_score: 0.7,
        };
        let json = serde_json::to_string(&b).unwrap();
        assert!(json.contains("0.123457"));
        assert_eq!(b.canonical_string(), "mae=0.123457;rmse=0.100000;sign=0.500000;rho=0.250000;score=0.700000");
    }
}
