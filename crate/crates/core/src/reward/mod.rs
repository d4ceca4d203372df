//! Rule-based rewards for structured completions.
//!
//! Each completion earns a format reward, one task reward (absolute-error
//! score, weighted multi-dimension score, or exact-match choice), and two
//! optional bonuses: a temporal bonus when the answer is more probable with
//! frames in order than shuffled, and a length bonus inside a token window.
//! The total is the plain sum of the four parts.

mod completion;

pub use completion::{
    parse_completion, parse_payload, render, render_payload, token_count, Choice, Completion,
    Malformed, ParsedAnswer, Payload, Tag, TaskKind, YesNo, MULTIDIM_M,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("score {0} outside [0, 1]; normalize before scoring")]
    OutOfRange(f64),
    #[error("length mismatch: predicted {pred}, ground truth {gt}, weights {weights}")]
    LengthMismatch { pred: usize, gt: usize, weights: usize },
    #[error("answer kind mismatch between prediction and ground truth")]
    KindMismatch,
    #[error("ground truth does not fit task {0}")]
    TaskMismatch(TaskKind),
    #[error("invalid reward config: {0}")]
    Config(String),
}

/// Pair label as annotated; ties only ever appear in ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    A,
    B,
    Tie,
}

/// Supervision for one query, scores already normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Score(f64),
    MultiScore(Vec<f64>),
    Pair(PairLabel),
    YesNo(YesNo),
}

impl GroundTruth {
    pub fn fits(&self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (GroundTruth::Score(_), TaskKind::ImageScore | TaskKind::NaturalVideoScore)
                | (GroundTruth::MultiScore(_), TaskKind::VideoMultidim)
                | (GroundTruth::Pair(_), TaskKind::Pair)
                | (GroundTruth::YesNo(_), TaskKind::Vqa)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub mu: f64,
    pub gamma: f64,
    pub l_min: usize,
    pub l_max: usize,
    pub lambda: Vec<f64>,
    pub format_weight: f64,
    /// Temporal bonus on single-video tasks.
    pub temporal: bool,
    /// Length-window bonus.
    pub length_control: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            mu: 0.8,
            gamma: 0.1,
            l_min: 320,
            l_max: 512,
            lambda: vec![1.0; MULTIDIM_M],
            format_weight: 1.0,
            temporal: true,
            length_control: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.mu > 0.0) {
            return Err(RewardError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.l_min >= self.l_max {
            return Err(RewardError::Config(format!(
                "l_min {} must be below l_max {}",
                self.l_min, self.l_max
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(RewardError::Config("lambda entries must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-component reward of one completion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub task: f64,
    pub temporal: f64,
    pub length: f64,
    pub total: f64,
}

pub fn format_reward(c: &Completion, cfg: &RewardConfig) -> f64 {
    if c.parsed.is_some() {
        cfg.format_weight
    } else {
        0.0
    }
}

fn check_unit(x: f64) -> Result<(), RewardError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(RewardError::OutOfRange(x))
    }
}

/// `1 − |s_pred − s_gt|`.
pub fn score_reward(s_pred: f64, s_gt: f64) -> Result<f64, RewardError> {
    check_unit(s_pred)?;
    check_unit(s_gt)?;
    Ok(1.0 - (s_pred - s_gt).abs())
}

/// `1 − Σ_j λ_j |v_pred_j − v_gt_j|`; can go negative.
pub fn multidim_reward(v_pred: &[f64], v_gt: &[f64], lambda: &[f64]) -> Result<f64, RewardError> {
    if v_pred.len() != v_gt.len() || v_gt.len() != lambda.len() {
        return Err(RewardError::LengthMismatch {
            pred: v_pred.len(),
            gt: v_gt.len(),
            weights: lambda.len(),
        });
    }
    let mut penalty = 0.0;
    for ((&p, &g), &l) in v_pred.iter().zip(v_gt).zip(lambda) {
        check_unit(p)?;
        check_unit(g)?;
        penalty += l * (p - g).abs();
    }
    Ok(1.0 - penalty)
}

/// Choice or yes/no answer on either side of [`preference_reward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discrete {
    Choice(Choice),
    YesNo(YesNo),
}

/// 1 on an exact match, else 0.
pub fn preference_reward(pred: Discrete, gt: Discrete) -> Result<f64, RewardError> {
    match (pred, gt) {
        (Discrete::Choice(p), Discrete::Choice(g)) => Ok(if p == g { 1.0 } else { 0.0 }),
        (Discrete::YesNo(p), Discrete::YesNo(g)) => Ok(if p == g { 1.0 } else { 0.0 }),
        _ => Err(RewardError::KindMismatch),
    }
}

/// `α` if `w_seq > μ·w_rand` (strict), else 0.
pub fn temporal_reward(w_seq: f64, w_rand: f64, cfg: &RewardConfig) -> f64 {
    // Fused so the sign of `w_seq − μ·w_rand` is exact.
    if (-cfg.mu).mul_add(w_rand, w_seq) > 0.0 {
        cfg.alpha
    } else {
        0.0
    }
}

/// `γ` if `l_min < len < l_max` (both strict), else 0.
pub fn length_reward(length_tokens: usize, cfg: &RewardConfig) -> f64 {
    if cfg.l_min < length_tokens && length_tokens < cfg.l_max {
        cfg.gamma
    } else {
        0.0
    }
}

fn task_reward(
    payload: &Payload,
    gt: &GroundTruth,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    match (payload, gt) {
        (Payload::Score(p), GroundTruth::Score(g)) => score_reward(*p, *g),
        (Payload::MultiScore(p), GroundTruth::MultiScore(g)) => multidim_reward(p, g, &cfg.lambda),
        (Payload::Choice(p), GroundTruth::Pair(label)) => match label {
            PairLabel::A => preference_reward(Discrete::Choice(*p), Discrete::Choice(Choice::A)),
            PairLabel::B => preference_reward(Discrete::Choice(*p), Discrete::Choice(Choice::B)),
            // The policy cannot answer "tie", so no choice matches.
            PairLabel::Tie => Ok(0.0),
        },
        (Payload::YesNo(p), GroundTruth::YesNo(g)) => {
            preference_reward(Discrete::YesNo(*p), Discrete::YesNo(*g))
        }
        _ => Err(RewardError::KindMismatch),
    }
}

/// Shuffle-probe probabilities for one completion's answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalProbe {
    pub w_seq: f64,
    pub w_rand: f64,
}

/// Sum of format, task, temporal and length rewards.
///
/// Malformed completions get no task reward; the temporal and length bonuses
/// still apply because they depend only on the probe and the raw length.
/// The temporal bonus needs a probe and the `temporal` switch, and is never
/// given on pair comparison.
pub fn total_reward(
    c: &Completion,
    task: TaskKind,
    gt: &GroundTruth,
    probe: Option<TemporalProbe>,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    if !gt.fits(task) {
        return Err(RewardError::TaskMismatch(task));
    }
    let format = format_reward(c, cfg);
    let task_r = match &c.parsed {
        Some(p) => task_reward(&p.payload, gt, cfg)?,
        None => 0.0,
    };
    let temporal = match probe {
        Some(pr) if cfg.temporal && task.is_single_video() => temporal_reward(pr.w_seq, pr.w_rand, cfg),
        _ => 0.0,
    };
    let length = if cfg.length_control {
        length_reward(c.length_tokens, cfg)
    } else {
        0.0
    };
    Ok(RewardBreakdown {
        format,
        task: task_r,
        temporal,
        length,
        total: format + task_r + temporal + length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filler(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    fn completion_with_len(payload: &Payload, len: usize, task: TaskKind) -> Completion {
        // Answer block attaches to the last filler word.
        let extra = token_count(&render_payload(payload)) - 1;
        let c = Completion::new(render(&filler(len - extra), payload), task);
        assert_eq!(c.length_tokens, len);
        c
    }

    #[test]
    fn score_reward_examples() {
        assert_eq!(score_reward(0.5, 0.5).unwrap(), 1.0);
        assert!((score_reward(0.2, 0.9).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(score_reward(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(score_reward(1.2, 0.5), Err(RewardError::OutOfRange(1.2)));
    }

    #[test]
    fn multidim_examples() {
        let l = [1.0; 3];
        assert_eq!(multidim_reward(&[0.3, 0.6, 0.9], &[0.3, 0.6, 0.9], &l).unwrap(), 1.0);
        let r = multidim_reward(&[0.5, 0.5, 0.5], &[0.6, 0.4, 0.5], &l).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(multidim_reward(&[0.0; 3], &[1.0; 3], &l).unwrap(), -2.0);
        assert!(matches!(
            multidim_reward(&[0.0; 2], &[1.0; 3], &l),
            Err(RewardError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn preference_examples() {
        let a = Discrete::Choice(Choice::A);
        let b = Discrete::Choice(Choice::B);
        let yes = Discrete::YesNo(YesNo::Yes);
        assert_eq!(preference_reward(a, a).unwrap(), 1.0);
        assert_eq!(preference_reward(b, a).unwrap(), 0.0);
        assert_eq!(preference_reward(yes, yes).unwrap(), 1.0);
        assert_eq!(preference_reward(yes, a), Err(RewardError::KindMismatch));
    }

    #[test]
    fn temporal_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(temporal_reward(0.9, 0.5, &cfg), 0.3);
        assert_eq!(temporal_reward(0.4, 0.5, &cfg), 0.0);
        assert_eq!(temporal_reward(0.41, 0.5, &cfg), 0.3);
    }

    #[test]
    fn length_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(length_reward(400, &cfg), 0.1);
        assert_eq!(length_reward(320, &cfg), 0.0);
        assert_eq!(length_reward(512, &cfg), 0.0);
        assert_eq!(length_reward(321, &cfg), 0.1);
        assert_eq!(length_reward(511, &cfg), 0.1);
    }

    #[test]
    fn format_reward_examples() {
        let cfg = RewardConfig::default();
        let ok = Completion::new("<think>x</think><answer>0.4</answer>".into(), TaskKind::ImageScore);
        assert_eq!(format_reward(&ok, &cfg), 1.0);
        let missing = Completion::new("<think>x<answer>0.4</answer>".into(), TaskKind::ImageScore);
        assert_eq!(format_reward(&missing, &cfg), 0.0);
        let dup = Completion::new(
            "<think>x</think><answer>0.4</answer><answer>0.4</answer>".into(),
            TaskKind::ImageScore,
        );
        assert_eq!(format_reward(&dup, &cfg), 0.0);
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig::default();
        let c = completion_with_len(&Payload::Score(0.55), 400, TaskKind::NaturalVideoScore);
        let probe = TemporalProbe { w_seq: 0.9, w_rand: 0.5 };
        let r = total_reward(&c, TaskKind::NaturalVideoScore, &GroundTruth::Score(0.55), Some(probe), &cfg)
            .unwrap();
        assert_eq!((r.format, r.task, r.temporal, r.length), (1.0, 1.0, 0.3, 0.1));
        assert!((r.total - 2.4).abs() < 1e-15);

        let bad = Completion::new(format!("<think>{}", filler(10)), TaskKind::ImageScore);
        assert_eq!(bad.length_tokens, 10);
        let r = total_reward(&bad, TaskKind::ImageScore, &GroundTruth::Score(0.5), None, &cfg).unwrap();
        assert_eq!(r.total, 0.0);

        let c = completion_with_len(&Payload::Choice(Choice::B), 400, TaskKind::Pair);
        let r = total_reward(&c, TaskKind::Pair, &GroundTruth::Pair(PairLabel::A), Some(probe), &cfg)
            .unwrap();
        assert_eq!((r.format, r.task, r.temporal, r.length), (1.0, 0.0, 0.0, 0.1));
        assert!((r.total - 1.1).abs() < 1e-15);
    }

    #[test]
    fn total_reward_rejects_wrong_ground_truth() {
        let cfg = RewardConfig::default();
        let c = Completion::new("<think>x</think><answer>yes</answer>".into(), TaskKind::Vqa);
        assert_eq!(
            total_reward(&c, TaskKind::Vqa, &GroundTruth::Score(0.5), None, &cfg),
            Err(RewardError::TaskMismatch(TaskKind::Vqa))
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = RewardConfig::default();
        cfg.validate().unwrap();
        cfg.l_min = 600;
        assert!(cfg.validate().is_err());
        let cfg = RewardConfig { mu: 0.0, ..RewardConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
