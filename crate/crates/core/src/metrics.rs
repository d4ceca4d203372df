//! Correlation metrics and preference accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::PairLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
    #[error("no records left to score")]
    EmptySet,
    #[error("tie-threshold mode needs a calibration split")]
    NoCalibration,
    #[error("record {0} has neither a choice nor scores")]
    NoPrediction(usize),
}

fn check(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFew(x.len()));
    }
    Ok(())
}

/// Pearson correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y)).map_err(|_| MetricError::Undefined("all values tied"))
}

/// Kendall tau-b.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).unwrap_or(std::cmp::Ordering::Equal);
            let dy = y[i].partial_cmp(&y[j]).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tx += 1;
                    ty += 1;
                }
                (Equal, _) => tx += 1,
                (_, Equal) => ty += 1,
                _ if dx == dy => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - tx) as f64) * ((n0 - ty) as f64);
    if denom == 0.0 {
        return Err(MetricError::Undefined("tau-b denominator is zero"));
    }
    Ok((conc - disc) as f64 / denom.sqrt())
}

/// One evaluated comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvalRecord {
    pub pred_score_a: Option<f64>,
    pub pred_score_b: Option<f64>,
    pub pred_choice: Option<PairLabel>,
    pub gt_label: PairLabel,
}

impl PairEvalRecord {
    fn score_gap(&self) -> Option<f64> {
        Some(self.pred_score_a? - self.pred_score_b?)
    }

    fn two_way(&self, i: usize) -> Result<PairLabel, MetricError> {
        if let Some(c) = self.pred_choice {
            return Ok(c);
        }
        let d = self.score_gap().ok_or(MetricError::NoPrediction(i))?;
        Ok(if d > 0.0 {
            PairLabel::A
        } else if d < 0.0 {
            PairLabel::B
        } else {
            PairLabel::Tie
        })
    }

    fn three_way(&self, i: usize, tau: f64) -> Result<PairLabel, MetricError> {
        let d = self.score_gap().ok_or(MetricError::NoPrediction(i))?;
        Ok(if d.abs() < tau {
            PairLabel::Tie
        } else if d > 0.0 {
            PairLabel::A
        } else {
            PairLabel::B
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Tie-labelled pairs dropped; two-way accuracy.
    Diff,
    /// Three-way accuracy with a tie threshold fit on a calibration split.
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefAccuracy {
    pub accuracy: f64,
    /// Fitted tie threshold (tau mode only).
    pub threshold: Option<f64>,
    pub n_used: usize,
}

fn three_way_accuracy(records: &[PairEvalRecord], tau: f64) -> Result<f64, MetricError> {
    let mut hit = 0;
    for (i, r) in records.iter().enumerate() {
        if r.three_way(i, tau)? == r.gt_label {
            hit += 1;
        }
    }
    Ok(hit as f64 / records.len() as f64)
}

/// Grid search over 0, midpoints between sorted distinct `|Δscore|`, and
/// one past the largest gap. The smallest best threshold wins.
pub fn fit_tie_threshold(calibration: &[PairEvalRecord]) -> Result<f64, MetricError> {
    if calibration.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut gaps = Vec::with_capacity(calibration.len());
    for (i, r) in calibration.iter().enumerate() {
        gaps.push(r.score_gap().ok_or(MetricError::NoPrediction(i))?.abs());
    }
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    let mut grid = vec![0.0];
    grid.extend(gaps.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    grid.push(gaps.last().copied().unwrap_or(0.0) + 1.0);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for tau in grid {
        let acc = three_way_accuracy(calibration, tau)?;
        if acc > best.0 {
            best = (acc, tau);
        }
    }
    Ok(best.1)
}

pub fn preference_accuracy(
    records: &[PairEvalRecord],
    mode: AccuracyMode,
    calibration: Option<&[PairEvalRecord]>,
) -> Result<PrefAccuracy, MetricError> {
    match mode {
        AccuracyMode::Diff => {
            let mut hit = 0;
            let mut used = 0;
            for (i, r) in records.iter().enumerate() {
                if r.gt_label == PairLabel::Tie {
                    continue;
                }
                used += 1;
                if r.two_way(i)? == r.gt_label {
                    hit += 1;
                }
            }
            if used == 0 {
                return Err(MetricError::EmptySet);
            }
            Ok(PrefAccuracy {
                accuracy: hit as f64 / used as f64,
                threshold: None,
                n_used: used,
            })
        }
        AccuracyMode::Tau => {
            let cal = calibration.ok_or(MetricError::NoCalibration)?;
            if records.is_empty() {
                return Err(MetricError::EmptySet);
            }
            let tau = fit_tie_threshold(cal)?;
            Ok(PrefAccuracy {
                accuracy: three_way_accuracy(records, tau)?,
                threshold: Some(tau),
                n_used: records.len(),
            })
        }
    }
}

/// Flat summary for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub krcc: Option<f64>,
    pub tau_acc: Option<f64>,
    pub tau_threshold: Option<f64>,
    pub diff_acc: Option<f64>,
    pub n_scores: usize,
    pub n_pairs: usize,
    pub n_pairs_non_tie: usize,
}

impl MetricReport {
    /// Correlations of predicted against reference scores.
    pub fn with_scores(mut self, pred: &[f64], gt: &[f64]) -> Result<Self, MetricError> {
        self.plcc = Some(plcc(pred, gt)?);
        self.srcc = Some(srcc(pred, gt)?);
        self.krcc = Some(krcc(pred, gt)?);
        self.n_scores = pred.len();
        Ok(self)
    }

    pub fn with_pairs(
        mut self,
        records: &[PairEvalRecord],
        calibration: &[PairEvalRecord],
    ) -> Result<Self, MetricError> {
        let diff = preference_accuracy(records, AccuracyMode::Diff, None)?;
        let tau = preference_accuracy(records, AccuracyMode::Tau, Some(calibration))?;
        self.diff_acc = Some(diff.accuracy);
        self.tau_acc = Some(tau.accuracy);
        self.tau_threshold = tau.threshold;
        self.n_pairs = records.len();
        self.n_pairs_non_tie = diff.n_used;
        Ok(self)
    }

    /// `key=value` lines, one per populated field.
    pub fn to_key_values(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = v {
            for (k, v) in map {
                if !v.is_null() {
                    out.push_str(&format!("{k}={v}\n"));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PairLabel::*;

    #[test]
    fn plcc_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((plcc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((plcc(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((plcc(&x, &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(plcc(&x, &[2.0; 3]), Err(MetricError::Undefined(_))));
        assert!(matches!(plcc(&[1.0], &[1.0]), Err(MetricError::TooFew(1))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
        assert!((srcc(&[1.0, 2.0, 3.0], &[4.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(srcc(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!((krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(krcc(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]).unwrap(), 1.0);
        assert!(krcc(&[1.0; 3], &[1.0, 2.0, 3.0]).is_err());
    }

    fn choice(c: PairLabel, gt: PairLabel) -> PairEvalRecord {
        PairEvalRecord { pred_score_a: None, pred_score_b: None, pred_choice: Some(c), gt_label: gt }
    }

    fn scored(a: f64, b: f64, gt: PairLabel) -> PairEvalRecord {
        PairEvalRecord { pred_score_a: Some(a), pred_score_b: Some(b), pred_choice: None, gt_label: gt }
    }

    #[test]
    fn diff_drops_ties() {
        let r = [choice(A, A), choice(A, B), choice(A, Tie)];
        let acc = preference_accuracy(&r, AccuracyMode::Diff, None).unwrap();
        assert_eq!(acc.accuracy, 0.5);
        assert_eq!(acc.n_used, 2);
        assert!(matches!(preference_accuracy(&[choice(A, Tie)], AccuracyMode::Diff, None), Err(MetricError::EmptySet)));
    }

    #[test]
    fn tau_mode_examples() {
        let r = [scored(0.9, 0.1, A), scored(0.2, 0.8, B), scored(0.6, 0.5, A)];
        let acc = preference_accuracy(&r, AccuracyMode::Tau, Some(&r)).unwrap();
        assert_eq!(acc.accuracy, 1.0);
        assert_eq!(acc.threshold, Some(0.0));

        let ties = [scored(0.5, 0.5, Tie), scored(0.3, 0.3, Tie)];
        let acc = preference_accuracy(&ties, AccuracyMode::Tau, Some(&ties)).unwrap();
        assert_eq!(acc.accuracy, 1.0);
        assert!(acc.threshold.unwrap() > 0.0);

        assert_eq!(preference_accuracy(&r, AccuracyMode::Tau, None), Err(MetricError::NoCalibration));
    }

    #[test]
    fn threshold_separates_small_gaps() {
        let cal = [scored(0.5, 0.48, Tie), scored(0.9, 0.1, A), scored(0.51, 0.5, Tie), scored(0.1, 0.7, B)];
        let tau = fit_tie_threshold(&cal).unwrap();
        assert!(tau > 0.02 && tau < 0.6);
        assert_eq!(three_way_accuracy(&cal, tau).unwrap(), 1.0);
    }

    #[test]
    fn report_key_values() {
        let rep = MetricReport::default().with_scores(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        let kv = rep.to_key_values();
        assert!(kv.lines().any(|l| l.starts_with("plcc=0.5") || l.starts_with("plcc=0.49999")));
        assert!(kv.contains("n_scores=3"));
        assert!(!kv.contains("diff_acc"));
    }
}
