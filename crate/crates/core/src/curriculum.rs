//! Three-stage training pipeline.
//!
//! 1. Image-score warm-up: GRPO with format and score rewards only.
//! 2. Task mix over natural-video scores, multi-dimension scores, pair
//!    comparison and yes/no questions, with the temporal and length bonuses.
//! 3. Alternation between the judge and the generator: mine pairs by
//!    tournament, finetune the generator, regenerate, pair new winners with
//!    old losers, retrain the judge, and finetune the generator again.
//!
//! Ablation switches remove single components: `warmup` skips stage 1,
//! `tmr` and `lcr` drop the temporal and length bonuses, and `uf` reduces
//! each stage-3 round to one mining pass and one finetuning pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Counts, Decoder, WorldConfig};
use crate::dpo::{dpo_finetune, DpoConfig, DpoError, DpoTrace, Provenance, WinLosePair};
use crate::grpo::{train_stage, GrpoConfig, GrpoError, Schedule, Shuffled, TrainItem, TrainingLog};
use crate::metrics::{PairEvalRecord, PrefAccuracy};
use crate::numkit::Rng;
use crate::pref::{refresh_pairs, run_tournament, CandidatePool, Judge, PrefError};
use crate::reward::{Choice, GroundTruth, PairLabel, Payload, RewardConfig, TaskKind};
use crate::toy::{
    DiffusionSchedule, GenConfig, PolicyConfig, PolicyError, Query, ShuffleProbe, ToyGenerator, ToyPolicy, Visual,
};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("stage {stage}: dataset {name} is empty")]
    EmptyDataset { stage: u8, name: String },
    #[error("task mix: {0}")]
    Mix(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Pref(#[from] PrefError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Num(#[from] crate::numkit::NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub warmup: bool,
    pub tmr: bool,
    pub lcr: bool,
    pub uf: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self { warmup: true, tmr: true, lcr: true, uf: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Plan {
    pub dataset: String,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
}

impl Default for Stage1Plan {
    fn default() -> Self {
        Self {
            dataset: "image_score.jsonl".into(),
            // Larger steps destabilize the score head once it sharpens.
            grpo: GrpoConfig { learning_rate: 0.01, ..GrpoConfig::default() },
            reward: RewardConfig { temporal: false, length_control: false, ..RewardConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub kind: TaskKind,
    pub dataset: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Plan {
    pub tasks: Vec<TaskMix>,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
}

impl Default for Stage2Plan {
    fn default() -> Self {
        let t = |kind: TaskKind, weight| TaskMix { kind, dataset: format!("{}.jsonl", kind.name()), weight };
        Self {
            tasks: vec![
                t(TaskKind::NaturalVideoScore, 1.0),
                t(TaskKind::VideoMultidim, 1.0),
                t(TaskKind::Pair, 1.0),
                t(TaskKind::Vqa, 1.0),
            ],
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Plan {
    pub n_prompts: usize,
    pub pool_size: usize,
    pub rounds: usize,
    pub dpo: DpoConfig,
    pub generator: GenConfig,
    /// Generator samples per side when measuring oracle win-rates.
    pub win_rate_samples: usize,
}

impl Default for Stage3Plan {
    fn default() -> Self {
        Self {
            n_prompts: 20,
            pool_size: 10,
            rounds: 2,
            dpo: DpoConfig::default(),
            generator: GenConfig::default(),
            win_rate_samples: 400,
        }
    }
}

/// Held-out measurement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPlan {
    /// Sampled answers averaged into one predicted score.
    pub samples: usize,
    pub seed: u64,
    pub n_shuffles: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { samples: 8, seed: 0, n_shuffles: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub seed: u64,
    pub data_dir: String,
    pub world: WorldConfig,
    pub counts: Counts,
    pub policy: PolicyConfig,
    pub stage1: Stage1Plan,
    pub stage2: Stage2Plan,
    pub stage3: Stage3Plan,
    pub eval: EvalPlan,
    pub ablations: Ablations,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: "data".into(),
            world: WorldConfig::default(),
            counts: Counts::default(),
            policy: PolicyConfig::default(),
            stage1: Stage1Plan::default(),
            stage2: Stage2Plan::default(),
            stage3: Stage3Plan::default(),
            eval: EvalPlan::default(),
            ablations: Ablations::default(),
        }
    }
}

impl StagePlan {
    pub fn from_toml_str(s: &str) -> Result<Self, CurriculumError> {
        let plan: StagePlan = toml::from_str(s).map_err(|e| CurriculumError::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurriculumError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        self.stage1.grpo.validate()?;
        self.stage2.grpo.validate()?;
        self.stage1.reward.validate().map_err(GrpoError::from)?;
        self.stage2.reward.validate().map_err(GrpoError::from)?;
        self.stage3.dpo.validate()?;
        if self.stage2.tasks.iter().any(|t| !(t.weight >= 0.0)) {
            return Err(CurriculumError::Mix("weights must be nonnegative".into()));
        }
        if self.stage3.pool_size < 2 {
            return Err(CurriculumError::Config("stage3.pool_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Stage-2 rewards with the ablation switches applied.
    pub fn stage2_reward(&self) -> RewardConfig {
        RewardConfig {
            temporal: self.ablations.tmr,
            length_control: self.ablations.lcr,
            ..self.stage2.reward.clone()
        }
    }
}

/// Stage 1. Returns the initial policy untouched when warm-up is disabled.
pub fn run_stage1(
    plan: &StagePlan,
    items: &[TrainItem],
    policy_init: &ToyPolicy,
    rng: &mut Rng,
) -> Result<(ToyPolicy, TrainingLog), CurriculumError> {
    if !plan.ablations.warmup {
        return Ok((policy_init.clone(), TrainingLog::default()));
    }
    if items.is_empty() {
        return Err(CurriculumError::EmptyDataset { stage: 1, name: plan.stage1.dataset.clone() });
    }
    let reward = RewardConfig { temporal: false, length_control: false, ..plan.stage1.reward.clone() };
    let mut policy = policy_init.clone();
    let log = train_stage(items, &Shuffled, &mut policy, policy_init, &plan.stage1.grpo, &reward, rng)?;
    Ok((policy, log))
}

/// Weighted task sampling: each step picks a task by weight, then an item
/// of that task uniformly. An epoch has as many steps as there are items.
#[derive(Debug, Clone)]
pub struct MixSchedule {
    ranges: Vec<std::ops::Range<usize>>,
    weights: Vec<f64>,
}

impl MixSchedule {
    pub fn new(sizes: &[usize], weights: &[f64]) -> Result<Self, CurriculumError> {
        if sizes.len() != weights.len() {
            return Err(CurriculumError::Mix("one weight per task required".into()));
        }
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            ranges.push(start..start + n);
            start += n;
        }
        let weights: Vec<f64> = weights.iter().zip(sizes).map(|(&w, &n)| if n == 0 { 0.0 } else { w }).collect();
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(CurriculumError::Mix("no task with positive weight and data".into()));
        }
        Ok(Self { ranges, weights })
    }

    pub fn draw_task(&self, rng: &mut Rng) -> usize {
        rng.categorical(&self.weights)
    }
}

impl Schedule for MixSchedule {
    fn epoch_order(&self, _epoch: usize, n_items: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n_items)
            .map(|_| {
                let r = &self.ranges[self.draw_task(rng)];
                r.start + rng.below(r.len())
            })
            .collect()
    }
}

/// Stage 2 over `tasks`, each with its plan weight.
pub fn run_stage2(
    plan: &StagePlan,
    tasks: &BTreeMap<TaskKind, Vec<TrainItem>>,
    policy: &ToyPolicy,
    rng: &mut Rng,
) -> Result<(ToyPolicy, TrainingLog), CurriculumError> {
    let mut items = Vec::new();
    let mut sizes = Vec::new();
    let mut weights = Vec::new();
    for mix in &plan.stage2.tasks {
        let set = tasks
            .get(&mix.kind)
            .ok_or_else(|| CurriculumError::Mix(format!("no data for task {}", mix.kind)))?;
        if set.iter().any(|it| it.query.task != mix.kind) {
            return Err(CurriculumError::Mix(format!("dataset for {} holds other tasks", mix.kind)));
        }
        items.extend(set.iter().cloned());
        sizes.push(set.len());
        weights.push(mix.weight);
    }
    if items.is_empty() {
        return Err(CurriculumError::EmptyDataset { stage: 2, name: "task mix".into() });
    }
    let schedule = MixSchedule::new(&sizes, &weights)?;
    let mut out = policy.clone();
    let log = train_stage(&items, &schedule, &mut out, policy, &plan.stage2.grpo, &plan.stage2_reward(), rng)?;
    Ok((out, log))
}

/// Preference judge built on the policy's comparison head. Decides by the
/// more probable choice; exact ties go to A.
pub struct PolicyJudge<'a> {
    pub policy: &'a ToyPolicy,
    pub decoder: &'a Decoder,
}

impl PolicyJudge<'_> {
    pub fn choose(&self, a: &[f64], b: &[f64]) -> Result<Choice, PolicyError> {
        let q = Query {
            task: TaskKind::Pair,
            visual: Visual::Pair(self.decoder.latent_video(a), self.decoder.latent_video(b)),
            question: 0,
        };
        match self.policy.greedy_answer(&q)? {
            Payload::Choice(c) => Ok(c),
            _ => unreachable!("pair queries answer with a choice"),
        }
    }
}

impl Judge for PolicyJudge<'_> {
    fn judge(&self, a: &[f64], b: &[f64]) -> Result<Choice, String> {
        self.choose(a, b).map_err(|e| e.to_string())
    }
}

/// Fraction of index-matched draws where the challenger's oracle quality
/// beats the baseline's; exact ties count half.
pub fn oracle_win_rate(
    challenger: &ToyGenerator,
    baseline: &ToyGenerator,
    schedule: &DiffusionSchedule,
    oracle: &dyn Fn(&[f64]) -> f64,
    n: usize,
    seed: u64,
) -> Result<f64, CurriculumError> {
    let mut rc = Rng::new(seed);
    let mut rb = Rng::new(seed ^ 0x5eed_0f_ba5e);
    let mut wins = 0.0;
    for _ in 0..n {
        let qc = oracle(&challenger.generate(schedule, &mut rc)?);
        let qb = oracle(&baseline.generate(schedule, &mut rb)?);
        wins += if qc > qb {
            1.0
        } else if qc == qb {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / n.max(1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub initial_pairs: usize,
    pub refreshed_pairs: usize,
    pub refresh_warnings: usize,
    pub dpo_final_loss: Vec<f64>,
    /// Oracle win-rate of each new generator against its predecessor, when
    /// an oracle was supplied.
    pub win_rates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage3Output {
    pub generator: ToyGenerator,
    pub judge: ToyPolicy,
    pub rounds: Vec<RoundMetrics>,
    pub pairs: Vec<WinLosePair>,
    pub audit: Vec<crate::pref::AuditRow>,
    pub judge_log: TrainingLog,
}

fn pools(gen: &ToyGenerator, schedule: &DiffusionSchedule, n_prompts: usize, size: usize, rng: &mut Rng) -> Result<Vec<CandidatePool>, CurriculumError> {
    (0..n_prompts)
        .map(|p| {
            let mut prng = rng.fork(p as u64);
            let cands = (0..size).map(|_| gen.generate(schedule, &mut prng)).collect::<Result<Vec<_>, _>>()?;
            Ok(CandidatePool::new(format!("prompt-{p:03}"), cands))
        })
        .collect()
}

fn mine(pools: &mut [CandidatePool], judge: &dyn Judge, audit: &mut Vec<crate::pref::AuditRow>) -> Result<Vec<WinLosePair>, CurriculumError> {
    let mut out = Vec::with_capacity(pools.len());
    for pool in pools.iter_mut() {
        let o = run_tournament(pool, judge)?;
        out.push(o.pair(pool, Provenance::Initial));
        audit.extend(o.audit);
    }
    Ok(out)
}

/// Pair items for judge training; the winner's presentation slot is random.
pub fn pairs_to_items(pairs: &[WinLosePair], decoder: &Decoder, rng: &mut Rng) -> Vec<TrainItem> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (w, l) = (decoder.latent_video(&p.winner), decoder.latent_video(&p.loser));
            let (visual, label) = if rng.bernoulli(0.5) {
                (Visual::Pair(w, l), PairLabel::A)
            } else {
                (Visual::Pair(l, w), PairLabel::B)
            };
            TrainItem {
                id: format!("{}-mined-{i}", p.prompt_id),
                query: Query { task: TaskKind::Pair, visual, question: 0 },
                truth: GroundTruth::Pair(label),
            }
        })
        .collect()
}

/// Stage 3: alternating judge and generator updates.
///
/// `stage2_pairs` is the original comparison data mixed into judge
/// retraining. `oracle`, when given, is used only to log win-rates.
pub fn run_stage3(
    plan: &StagePlan,
    judge: &ToyPolicy,
    generator: &ToyGenerator,
    decoder: &Decoder,
    stage2_pairs: &[TrainItem],
    oracle: Option<&dyn Fn(&[f64]) -> f64>,
    rng: &mut Rng,
) -> Result<Stage3Output, CurriculumError> {
    let s3 = &plan.stage3;
    let schedule = DiffusionSchedule::linear_rescaled(s3.generator.timesteps)?;
    let mut gen = generator.clone();
    let mut d = judge.clone();
    let mut rounds = Vec::new();
    let mut all_pairs = Vec::new();
    let mut audit = Vec::new();
    let mut judge_log = TrainingLog::default();
    let reward = plan.stage2_reward();
    let win_rate = |a: &ToyGenerator, b: &ToyGenerator, seed: u64| -> Result<Option<f64>, CurriculumError> {
        oracle
            .map(|o| oracle_win_rate(a, b, &schedule, o, s3.win_rate_samples, seed))
            .transpose()
    };
    for round in 0..s3.rounds {
        let mut m = RoundMetrics { round, ..RoundMetrics::default() };
        // pools from the current generator, mined by the current judge
        let mut first = pools(&gen, &schedule, s3.n_prompts, s3.pool_size, rng)?;
        let c = mine(&mut first, &PolicyJudge { policy: &d, decoder }, &mut audit)?;
        m.initial_pairs = c.len();
        // first finetuning pass against a frozen copy
        let g0 = gen.clone();
        let trace = dpo_finetune(&mut gen, &g0, &c, &schedule, &s3.dpo, rng)?;
        m.dpo_final_loss.push(final_loss(&trace));
        if let Some(w) = win_rate(&gen, &g0, rng.next_u64())? {
            m.win_rates.push(w);
        }
        all_pairs.extend(c.iter().cloned());
        if plan.ablations.uf {
            // regenerate and pair new winners with earlier losers
            let mut second = pools(&gen, &schedule, s3.n_prompts, s3.pool_size, rng)?;
            let mut c_hat = Vec::new();
            for pool in second.iter_mut() {
                let r = refresh_pairs(pool, &c, &PolicyJudge { policy: &d, decoder })?;
                m.refresh_warnings += r.warnings;
                if let Some(o) = r.outcome {
                    audit.extend(o.audit);
                }
                c_hat.extend(r.pairs);
            }
            m.refreshed_pairs = c_hat.len();
            // continue judge training from its current weights
            let mut items = pairs_to_items(&c_hat, decoder, rng);
            items.extend(stage2_pairs.iter().cloned());
            let reference = d.clone();
            let log = train_stage(&items, &Shuffled, &mut d, &reference, &plan.stage2.grpo, &reward, rng)?;
            judge_log.extend(log);
            // re-mine the regenerated pools with the new judge
            let c2 = mine(&mut second, &PolicyJudge { policy: &d, decoder }, &mut audit)?;
            let g1 = gen.clone();
            let trace = dpo_finetune(&mut gen, &g1, &c2, &schedule, &s3.dpo, rng)?;
            m.dpo_final_loss.push(final_loss(&trace));
            if let Some(w) = win_rate(&gen, &g1, rng.next_u64())? {
                m.win_rates.push(w);
            }
            all_pairs.extend(c_hat);
            all_pairs.extend(c2);
        }
        rounds.push(m);
    }
    Ok(Stage3Output { generator: gen, judge: d, rounds, pairs: all_pairs, audit, judge_log })
}

fn final_loss(trace: &DpoTrace) -> f64 {
    let k = trace.losses.len().min(10).max(1);
    trace.losses.iter().rev().take(k).sum::<f64>() / k as f64
}

// Held-out measurements.

/// Predicted scores: the mean of `n_samples` sampled answers per item,
/// drawn with a fixed seed. Multi-dimension items report their mean.
pub fn sampled_scores(policy: &ToyPolicy, items: &[TrainItem], n_samples: usize, seed: u64) -> Result<Vec<f64>, CurriculumError> {
    let mut rng = Rng::new(seed);
    let n = n_samples.max(1);
    items
        .iter()
        .map(|it| {
            let mut total = 0.0;
            for _ in 0..n {
                total += match policy.sample_answer(&it.query, &mut rng)? {
                    Payload::Score(s) => s,
                    Payload::MultiScore(v) => v.iter().sum::<f64>() / v.len() as f64,
                    _ => return Err(CurriculumError::Config(format!("item {} is not a score task", it.id))),
                };
            }
            Ok(total / n as f64)
        })
        .collect()
}

/// Share of sampled completions that parse.
pub fn format_rate(policy: &ToyPolicy, items: &[TrainItem], seed: u64) -> Result<f64, CurriculumError> {
    let mut rng = Rng::new(seed);
    let mut ok = 0;
    for it in items {
        ok += policy.sample(&it.query, &mut rng)?.0.is_well_formed() as usize;
    }
    Ok(ok as f64 / items.len().max(1) as f64)
}

/// Share of sampled completions strictly inside the length window.
pub fn length_window_rate(policy: &ToyPolicy, items: &[TrainItem], cfg: &RewardConfig, seed: u64) -> Result<f64, CurriculumError> {
    let mut rng = Rng::new(seed);
    let mut inside = 0;
    for it in items {
        let (c, _) = policy.sample(&it.query, &mut rng)?;
        inside += (c.length_tokens > cfg.l_min && c.length_tokens < cfg.l_max) as usize;
    }
    Ok(inside as f64 / items.len().max(1) as f64)
}

/// Mean `w_seq − w_rand` of the reference answer over single-video items.
pub fn mean_temporal_gap(policy: &ToyPolicy, items: &[TrainItem], n_shuffles: usize, seed: u64) -> Result<f64, CurriculumError> {
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    let mut n = 0;
    for it in items.iter().filter(|it| it.query.task.is_single_video()) {
        let Some(answer) = policy.truth_answer(&it.truth) else { continue };
        let probe = ShuffleProbe::run(policy, &it.query, None, &mut rng, n_shuffles)?;
        let (w_seq, w_rand) = probe.probabilities(&answer);
        total += w_seq - w_rand;
        n += 1;
    }
    if n == 0 {
        return Err(CurriculumError::Config("no single-video items for the temporal probe".into()));
    }
    Ok(total / n as f64)
}

/// Evaluation rows for pair items: greedy choice plus the judge's quality
/// logits as scores.
pub fn pair_eval_records(policy: &ToyPolicy, items: &[TrainItem]) -> Result<Vec<PairEvalRecord>, CurriculumError> {
    items
        .iter()
        .map(|it| {
            let (Visual::Pair(a, b), GroundTruth::Pair(gt)) = (&it.query.visual, &it.truth) else {
                return Err(CurriculumError::Config(format!("item {} is not a pair", it.id)));
            };
            let choice = match policy.greedy_answer(&it.query)? {
                Payload::Choice(Choice::A) => PairLabel::A,
                _ => PairLabel::B,
            };
            Ok(PairEvalRecord {
                pred_score_a: Some(policy.quality_logit(a)?),
                pred_score_b: Some(policy.quality_logit(b)?),
                pred_choice: Some(choice),
                gt_label: *gt,
            })
        })
        .collect()
}

/// Diff and tau accuracy of a judge.
pub fn judge_accuracy(
    policy: &ToyPolicy,
    eval: &[TrainItem],
    calibration: &[TrainItem],
) -> Result<(PrefAccuracy, PrefAccuracy), CurriculumError> {
    use crate::metrics::{preference_accuracy, AccuracyMode};
    let recs = pair_eval_records(policy, eval)?;
    let cal = pair_eval_records(policy, calibration)?;
    let metric = |e: crate::metrics::MetricError| CurriculumError::Config(e.to_string());
    let diff = preference_accuracy(&recs, AccuracyMode::Diff, None).map_err(metric)?;
    let tau = preference_accuracy(&recs, AccuracyMode::Tau, Some(&cal)).map_err(metric)?;
    Ok((diff, tau))
}

/// Fresh policy for a plan.
pub fn init_policy(plan: &StagePlan, rng: &mut Rng) -> ToyPolicy {
    ToyPolicy::new(plan.policy.clone(), rng)
}

/// Fresh generator for a plan.
pub fn init_generator(plan: &StagePlan, rng: &mut Rng) -> Result<ToyGenerator, CurriculumError> {
    let schedule = DiffusionSchedule::linear_rescaled(plan.stage3.generator.timesteps)?;
    Ok(ToyGenerator::new(plan.stage3.generator.clone(), &schedule, rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_frequencies_follow_weights() {
        let s = MixSchedule::new(&[300, 200, 100], &[1.0, 1.0, 0.5]).unwrap();
        let mut rng = Rng::new(9);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[s.draw_task(&mut rng)] += 1;
        }
        for (c, w) in counts.iter().zip([0.4, 0.4, 0.2]) {
            assert!((*c as f64 / 10_000.0 - w).abs() < 0.05 * w);
        }
        let order = s.epoch_order(0, 600, &mut rng);
        assert_eq!(order.len(), 600);
        assert!(order.iter().all(|&i| i < 600));
    }

    #[test]
    fn plan_toml_round_trip() {
        let plan = StagePlan::default();
        let back = StagePlan::from_toml_str(&plan.to_toml()).unwrap();
        assert_eq!(back, plan);
        let partial = StagePlan::from_toml_str("seed = 7\n[ablations]\ntmr = false\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert!(!partial.ablations.tmr && partial.ablations.lcr);
        assert!(StagePlan::from_toml_str("[stage1.grpo]\ngroup_size = 1\n").is_err());
    }

    #[test]
    fn warmup_off_returns_input() {
        let plan = StagePlan { ablations: Ablations { warmup: false, ..Ablations::default() }, ..StagePlan::default() };
        let mut rng = Rng::new(1);
        let p = init_policy(&plan, &mut rng);
        let (out, log) = run_stage1(&plan, &[], &p, &mut rng).unwrap();
        assert_eq!(out.params, p.params);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn zero_rounds_returns_inputs() {
        let plan = StagePlan { stage3: Stage3Plan { rounds: 0, ..Stage3Plan::default() }, ..StagePlan::default() };
        let mut rng = Rng::new(2);
        let p = init_policy(&plan, &mut rng);
        let g = init_generator(&plan, &mut rng).unwrap();
        let world = crate::data::SyntheticWorld::new(crate::data::WorldConfig::default(), &mut rng);
        let out = run_stage3(&plan, &p, &g, &world.decoder, &[], None, &mut rng).unwrap();
        assert_eq!(out.generator.params, g.params);
        assert_eq!(out.judge.params, p.params);
        assert!(out.rounds.is_empty());
    }

    #[test]
    fn unknown_mix_task_is_an_error() {
        let plan = StagePlan::default();
        let mut rng = Rng::new(3);
        let p = init_policy(&plan, &mut rng);
        assert!(matches!(run_stage2(&plan, &BTreeMap::new(), &p, &mut rng), Err(CurriculumError::Mix(_))));
    }
}
