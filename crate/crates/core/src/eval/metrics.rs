//! Yes/no confusion metrics.

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_ci, mcnemar_test, McNemarMethod, DEFAULT_RESAMPLES};
use super::suite::Label;
use super::EvalError;
use crate::video::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassCounters {
    pub base_forwards: usize,
    pub cf_forwards: usize,
    pub grad_passes: usize,
}

impl std::ops::AddAssign for PassCounters {
    fn add_assign(&mut self, o: Self) {
        self.base_forwards += o.base_forwards;
        self.cf_forwards += o.cf_forwards;
        self.grad_passes += o.grad_passes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl LatencySummary {
    pub fn of(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return Self::default();
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        Self { mean: s.iter().sum::<f64>() / s.len() as f64, p50: at(0.5), p95: at(0.95), max: s[s.len() - 1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: Seed,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { level: 0.95, resamples: DEFAULT_RESAMPLES, seed: Seed(0) }
    }
}

/// Ratios whose denominator is zero are `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub false_yes_rate_absent: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub mcnemar_p: Option<f64>,
    pub mcnemar_method: Option<McNemarMethod>,
    pub latency_ms: LatencySummary,
    pub pass_counters: PassCounters,
    pub cases: usize,
    pub failed: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts and derived metrics. Every prediction must be present.
pub fn score_run(predictions: &[(Label, Option<Label>)], boot: &BootstrapConfig) -> Result<MetricsReport, EvalError> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut correct = Vec::with_capacity(predictions.len());
    for (index, &(label, answer)) in predictions.iter().enumerate() {
        let answer = answer.ok_or(EvalError::MissingPrediction { index })?;
        match (label, answer) {
            (Label::Yes, Label::Yes) => tp += 1,
            (Label::No, Label::Yes) => fp += 1,
            (Label::Yes, Label::No) => fn_ += 1,
            (Label::No, Label::No) => tn += 1,
        }
        correct.push(f64::from(u8::from(label == answer)));
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let (ci_low, ci_high) = match bootstrap_ci(&correct, boot.level, boot.resamples, boot.seed) {
        Ok((lo, hi)) => (Some(lo), Some(hi)),
        Err(EvalError::EmptyInput) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f1,
        accuracy: ratio(tp + tn, predictions.len()),
        false_yes_rate_absent: ratio(fp, fp + tn),
        ci_low,
        ci_high,
        mcnemar_p: None,
        mcnemar_method: None,
        latency_ms: LatencySummary::default(),
        pass_counters: PassCounters::default(),
        cases: predictions.len(),
        failed: 0,
    })
}

/// McNemar test between two runs over the same cases, `None` marking failed cases.
pub fn paired_mcnemar(a: &[Option<bool>], b: &[Option<bool>]) -> (f64, McNemarMethod) {
    let (mut only_a, mut only_b) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(true), Some(false)) => only_a += 1,
            (Some(false), Some(true)) => only_b += 1,
            _ => {}
        }
    }
    let r = mcnemar_test(only_a, only_b);
    (r.p_value, r.method)
}
