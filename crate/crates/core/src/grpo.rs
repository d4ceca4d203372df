//! Group-relative policy optimization.
//!
//! For each query the old policy samples a group of `N` completions. Rewards
//! are standardized within the group to advantages, and the policy minimizes
//!
//! `−(1/N) Σᵢ [min(ρᵢÂᵢ, clip(ρᵢ, 1−δ, 1+δ)Âᵢ) − β·k3ᵢ]`
//!
//! with `ρᵢ = π_θ(oᵢ)/π_old(oᵢ)` and the per-sample KL estimate
//! `k3 = exp(ℓ_ref − ℓ_θ) − (ℓ_ref − ℓ_θ) − 1`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, Rng, Tape, Var};
use crate::reward::{total_reward, Completion, GroundTruth, RewardBreakdown, RewardConfig, RewardError, TemporalProbe};
use crate::toy::{Action, PolicyError, Query, ShuffleProbe, ToyPolicy};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("training log: {0}")]
    Io(#[from] std::io::Error),
}

/// When the sampling snapshot `π_old` is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OldPolicyRefresh {
    PerEpoch,
    PerStep,
}

/// Which answer the temporal probe scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalTarget {
    /// Each completion's own answer; every completion can earn the bonus.
    OwnAnswer,
    /// The reference answer; only completions that give it earn the bonus.
    CorrectAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_delta: f64,
    pub kl_beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub std_epsilon: f64,
    pub refresh: OldPolicyRefresh,
    /// Shuffled-frame forward passes per temporal probe.
    pub n_shuffles: usize,
    pub temporal_target: TemporalTarget,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_delta: 0.2,
            kl_beta: 0.001,
            epochs: 3,
            learning_rate: 0.025,
            std_epsilon: 1e-8,
            refresh: OldPolicyRefresh::PerStep,
            n_shuffles: 4,
            temporal_target: TemporalTarget::OwnAnswer,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!("group_size {} < 2", self.group_size)));
        }
        if !(self.clip_delta > 0.0 && self.clip_delta < 1.0) {
            return Err(GrpoError::Config(format!("clip_delta {} outside (0, 1)", self.clip_delta)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(GrpoError::Config(format!("kl_beta {} < 0", self.kl_beta)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(GrpoError::Config(format!("learning_rate {} < 0", self.learning_rate)));
        }
        if self.n_shuffles == 0 {
            return Err(GrpoError::Config("n_shuffles must be at least 1".into()));
        }
        Ok(())
    }
}

/// `(rᵢ − mean)/std` with the population std; all zeros when
/// `std < std_epsilon`.
pub fn advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

pub fn clipped_term(rho: f64, adv: f64, delta: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - delta, 1.0 + delta) * adv)
}

pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let u = logp_ref - logp_new;
    u.exp() - u - 1.0
}

/// One query's sampled group with everything the loss needs.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub query_id: String,
    pub query: Query,
    pub completions: Vec<Completion>,
    pub rewards: Vec<RewardBreakdown>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

/// Surrogate loss recorded on `tape`, with parameters `p` standing for the
/// live policy's weights.
pub fn grpo_loss_on(
    tape: &mut Tape,
    p: &[Var],
    policy: &ToyPolicy,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<Var, GrpoError> {
    let n = group.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let heads = policy.head_log_probs(tape, p, &group.query)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let action = policy.decode_action(group.query.task, &group.completions[i].raw_text)?;
        let lp = ToyPolicy::action_log_prob(tape, &heads, &action);
        let adv = group.advantages[i];
        let d = tape.add_const(lp, -group.logp_old[i]);
        let rho = tape.exp(d);
        let plain = tape.scale(rho, adv);
        let c = tape.clip(rho, 1.0 - cfg.clip_delta, 1.0 + cfg.clip_delta);
        let clipped = tape.scale(c, adv);
        let surrogate = tape.min(plain, clipped);
        // u = ℓ_ref − ℓ_θ
        let neg = tape.neg(lp);
        let u = tape.add_const(neg, group.logp_ref[i]);
        let eu = tape.exp(u);
        let k = tape.sub(eu, u);
        let k3 = tape.add_const(k, -1.0);
        let pen = tape.scale(k3, cfg.kl_beta);
        terms.push(tape.sub(surrogate, pen));
    }
    let s = tape.sum(&terms);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Loss value and gradient at the policy's current parameters.
pub fn grpo_loss(policy: &ToyPolicy, group: &RolloutGroup, cfg: &GrpoConfig) -> Result<(f64, Vec<f64>), GrpoError> {
    let mut tape = Tape::with_capacity(policy.num_params() * 4);
    let p = tape.vars(policy.params.values());
    let loss = grpo_loss_on(&mut tape, &p, policy, group, cfg)?;
    let g = tape.gradient(loss, &p)?;
    Ok((tape.value(loss), g))
}

/// A training query with its supervision.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub query: Query,
    pub truth: GroundTruth,
}

/// Samples a group from `old`, scores it, and fills in advantages.
pub fn rollout(
    item: &TrainItem,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
    rng: &mut Rng,
) -> Result<(RolloutGroup, Vec<Action>), GrpoError> {
    let q = &item.query;
    let heads_old = old.distribution(q)?;
    let heads_ref = reference.distribution(q)?;
    // Drawn unconditionally so that runs with and without the probe share
    // the completion sampling stream.
    let mut probe_rng = rng.fork(0x7e_3a_c0);
    let probe = if reward_cfg.temporal && q.task.is_single_video() {
        Some(ShuffleProbe::run(old, q, Some(heads_old.clone()), &mut probe_rng, cfg.n_shuffles)?)
    } else {
        None
    };
    let truth = old.truth_answer(&item.truth);
    let n = cfg.group_size;
    let mut completions = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut logp_old = Vec::with_capacity(n);
    let mut logp_ref = Vec::with_capacity(n);
    for _ in 0..n {
        let a = ToyPolicy::sample_action(&heads_old, rng);
        let c = Completion::new(old.render_action(q.task, &a), q.task);
        let tp = probe.as_ref().and_then(|pr| {
            let scored = match cfg.temporal_target {
                TemporalTarget::OwnAnswer => Some(&a.answer),
                TemporalTarget::CorrectAnswer => truth.as_ref().filter(|t| **t == a.answer),
            };
            scored.map(|ans| {
                let (w_seq, w_rand) = pr.probabilities(ans);
                TemporalProbe { w_seq, w_rand }
            })
        });
        rewards.push(total_reward(&c, q.task, &item.truth, tp, reward_cfg)?);
        logp_old.push(heads_old.action_logp(&a));
        logp_ref.push(heads_ref.action_logp(&a));
        completions.push(c);
        actions.push(a);
    }
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let adv = advantages(&totals, cfg.std_epsilon)?;
    Ok((
        RolloutGroup {
            query_id: item.id.clone(),
            query: q.clone(),
            completions,
            rewards,
            logp_old,
            logp_ref,
            advantages: adv,
        },
        actions,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub query_id: String,
    pub mean_reward: f64,
    pub loss: f64,
    pub format_rate: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Mean of `mean_reward` over each epoch's steps.
    pub fn epoch_mean_rewards(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.rows.iter().filter(|r| r.epoch == e).map(|r| r.mean_reward).collect();
                rows.iter().sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    }

    pub fn extend(&mut self, other: TrainingLog) {
        let offset = self.rows.len();
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.step += offset;
            r
        }));
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), GrpoError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rows {
            serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainingLog, GrpoError> {
        let text = std::fs::read_to_string(path)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect::<Result<_, _>>()?;
        Ok(TrainingLog { rows })
    }
}

/// Item visiting order for one epoch.
pub trait Schedule {
    fn epoch_order(&self, epoch: usize, n_items: usize, rng: &mut Rng) -> Vec<usize>;
}

/// Every item once per epoch, freshly shuffled.
#[derive(Debug, Clone, Copy, Default)]
pub struct Shuffled;

impl Schedule for Shuffled {
    fn epoch_order(&self, _epoch: usize, n_items: usize, rng: &mut Rng) -> Vec<usize> {
        rng.permutation(n_items)
    }
}

/// Runs `cfg.epochs` passes of one GRPO step per visited item.
pub fn train_stage(
    items: &[TrainItem],
    schedule: &dyn Schedule,
    policy: &mut ToyPolicy,
    reference: &ToyPolicy,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
    rng: &mut Rng,
) -> Result<TrainingLog, GrpoError> {
    if items.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    cfg.validate()?;
    reward_cfg.validate()?;
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut old = policy.clone();
        for idx in schedule.epoch_order(epoch, items.len(), rng) {
            if cfg.refresh == OldPolicyRefresh::PerStep {
                old.params.clone_from(&policy.params);
            }
            let item = &items[idx];
            let (group, _) = rollout(item, &old, reference, cfg, reward_cfg, rng)?;
            let (loss, g) = grpo_loss(policy, &group, cfg)?;
            policy.params.descend(&g, cfg.learning_rate);
            let n = group.len() as f64;
            log.rows.push(LogRow {
                step,
                epoch,
                query_id: group.query_id.clone(),
                mean_reward: group.totals().iter().sum::<f64>() / n,
                loss,
                format_rate: group.completions.iter().filter(|c| c.is_well_formed()).count() as f64 / n,
                mean_len: group.completions.iter().map(|c| c.length_tokens as f64).sum::<f64>() / n,
            });
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::TaskKind;
    use crate::toy::{PolicyConfig, Visual};

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[0.0, 1.0], 1e-8).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(advantages(&[0.7; 8], 1e-8).unwrap(), vec![0.0; 8]);
        let a = advantages(&[1.0, 2.0, 3.0, 4.0], 1e-8).unwrap();
        for (x, y) in a.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((x - y).abs() < 1e-4);
        }
        assert!(matches!(advantages(&[1.0], 1e-8), Err(GrpoError::GroupTooSmall(1))));
    }

    #[test]
    fn ratio_clip_kl_examples() {
        assert_eq!(ratio(-1.3, -1.3), 1.0);
        assert!((ratio(2f64.ln(), 0.0) - 2.0).abs() < 1e-15);
        assert!((ratio(0.0, 4f64.ln()) - 0.25).abs() < 1e-15);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_term(1.5, -1.0, 0.2), -1.5);
        assert_eq!(clipped_term(1.0, 2.0, 0.2), 2.0);
        assert_eq!(kl_penalty(-0.5, -0.5), 0.0);
        assert!((kl_penalty(0.0, 2f64.ln()) - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((kl_penalty(0.0, 2f64.ln()) - 0.3069).abs() < 1e-4);
    }

    fn image_item(rng: &mut Rng, score: f64) -> TrainItem {
        TrainItem {
            id: "img".into(),
            query: Query { task: TaskKind::ImageScore, visual: Visual::Image(rng.normals(8)), question: 0 },
            truth: GroundTruth::Score(score),
        }
    }

    #[test]
    fn zero_advantage_group_has_zero_loss() {
        let mut rng = Rng::new(1);
        let policy = ToyPolicy::new(PolicyConfig::default(), &mut rng);
        let item = image_item(&mut rng, 0.4);
        let (mut group, _) = rollout(&item, &policy, &policy, &GrpoConfig::default(), &RewardConfig::default(), &mut rng).unwrap();
        group.advantages = vec![0.0; group.len()];
        let (loss, g) = grpo_loss(&policy, &group, &GrpoConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn step_raises_logp_of_positive_advantage_completion() {
        let mut rng = Rng::new(2);
        let mut policy = ToyPolicy::new(PolicyConfig::default(), &mut rng);
        let item = image_item(&mut rng, 0.4);
        let cfg = GrpoConfig { group_size: 2, ..GrpoConfig::default() };
        let (mut group, actions) = rollout(&item, &policy, &policy, &cfg, &RewardConfig::default(), &mut rng).unwrap();
        assert_ne!(actions[0], actions[1]);
        group.advantages = vec![-1.0, 1.0];
        let (loss, g) = grpo_loss(&policy, &group, &cfg).unwrap();
        assert!(loss.abs() < 1e-12);
        let before = policy.log_prob(&item.query, &group.completions[1]).unwrap();
        policy.params.descend(&g, 0.05);
        let after = policy.log_prob(&item.query, &group.completions[1]).unwrap();
        assert!(after > before);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut rng = Rng::new(3);
        let mut policy = ToyPolicy::new(PolicyConfig::default(), &mut rng);
        let start = policy.params.clone();
        let items = vec![image_item(&mut rng, 0.9)];
        let cfg = GrpoConfig { group_size: 2, learning_rate: 0.0, ..GrpoConfig::default() };
        let reference = policy.clone();
        let log = train_stage(&items, &Shuffled, &mut policy, &reference, &cfg, &RewardConfig::default(), &mut rng).unwrap();
        assert_eq!(policy.params, start);
        assert_eq!(log.rows.len(), 3);
    }

    #[test]
    fn log_round_trip() {
        let log = TrainingLog {
            rows: vec![LogRow { step: 0, epoch: 0, query_id: "q".into(), mean_reward: 1.5, loss: -0.1, format_rate: 1.0, mean_len: 400.0 }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        assert_eq!(TrainingLog::read_jsonl(&path).unwrap(), log);
    }
}
