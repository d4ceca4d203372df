//! Finite-difference checks of the GRPO and DPO loss gradients.
//!
//! Each case draws a small random model and inputs, compares the tape
//! gradient with central differences, and reports the worst relative error
//! over all coordinates. Components smaller than [`ABS_FLOOR`] in both
//! estimates are compared absolutely.

use serde::Serialize;

use crate::dpo::{dpo_loss_on, DpoConfig, PairDraw, Provenance, WinLosePair};
use crate::grpo::{grpo_loss_on, rollout, GrpoConfig, TrainItem};
use crate::numkit::{finite_diff, grad, max_relative_error, NumError, Rng};
use crate::reward::{GroundTruth, PairLabel, RewardConfig, TaskKind, YesNo};
use crate::toy::{
    DiffusionSchedule, GenConfig, PolicyConfig, Query, SyntheticVideo, ToyGenerator, ToyPolicy, Visual,
};

pub const FD_STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: usize,
    pub detail: String,
    pub n_params: usize,
    pub max_rel_error: f64,
}

fn small_policy_config(rng: &mut Rng) -> PolicyConfig {
    PolicyConfig {
        frame_dim: 3,
        prompt_dim: 2,
        proj_dim: 3,
        hidden_dim: 4,
        max_frames: 4,
        score_bins: 5,
        length_buckets: vec![100, 350, 420, 600],
        n_questions: 2,
        malformed_rate: 0.05 + 0.3 * rng.uniform(),
        init_sharpness: 0.5 + 4.0 * rng.uniform(),
        pos_init_scale: 0.5,
    }
}

fn perturbed(p: &ToyPolicy, scale: f64, rng: &mut Rng) -> ToyPolicy {
    let mut q = p.clone();
    for v in q.params.values_mut() {
        *v += scale * rng.normal();
    }
    q
}

fn video(cfg: &PolicyConfig, rng: &mut Rng) -> SyntheticVideo {
    let t = 2 + rng.below(cfg.max_frames - 1);
    SyntheticVideo {
        frames: (0..t).map(|_| rng.normals(cfg.frame_dim)).collect(),
        prompt_features: rng.normals(cfg.prompt_dim),
    }
}

fn random_item(cfg: &PolicyConfig, rng: &mut Rng) -> TrainItem {
    let task = TaskKind::ALL[rng.below(TaskKind::ALL.len())];
    let (visual, truth, question) = match task {
        TaskKind::ImageScore => (Visual::Image(rng.normals(cfg.frame_dim)), GroundTruth::Score(rng.uniform()), 0),
        TaskKind::NaturalVideoScore => (Visual::Video(video(cfg, rng)), GroundTruth::Score(rng.uniform()), 0),
        TaskKind::VideoMultidim => (
            Visual::Video(video(cfg, rng)),
            GroundTruth::MultiScore((0..3).map(|_| rng.uniform()).collect()),
            0,
        ),
        TaskKind::Pair => {
            let label = [PairLabel::A, PairLabel::B, PairLabel::Tie][rng.below(3)];
            (Visual::Pair(video(cfg, rng), video(cfg, rng)), GroundTruth::Pair(label), 0)
        }
        TaskKind::Vqa => {
            let yn = if rng.bernoulli(0.5) { YesNo::Yes } else { YesNo::No };
            (Visual::Video(video(cfg, rng)), GroundTruth::YesNo(yn), rng.below(cfg.n_questions))
        }
    };
    TrainItem { id: format!("{task}"), query: Query { task, visual, question }, truth }
}

/// GRPO loss: random task, random old/reference snapshots, and a random
/// clip width and KL weight per case.
pub fn grpo_cases(n_cases: usize, seed: u64) -> Result<Vec<CaseResult>, NumError> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_cases);
    let mut case = 0;
    while out.len() < n_cases {
        let mut crng = rng.fork(case as u64);
        case += 1;
        let pcfg = small_policy_config(&mut crng);
        let base = ToyPolicy::new(pcfg.clone(), &mut crng);
        let policy = perturbed(&base, 0.3, &mut crng);
        let old = perturbed(&policy, 0.1, &mut crng);
        let reference = perturbed(&policy, 0.2, &mut crng);
        let cfg = GrpoConfig {
            group_size: 2 + crng.below(7),
            clip_delta: 0.1 + 0.3 * crng.uniform(),
            kl_beta: [0.0, 0.001, 0.05, 0.5][crng.below(4)],
            ..GrpoConfig::default()
        };
        let rcfg = RewardConfig::default();
        let item = random_item(&pcfg, &mut crng);
        let Ok((group, _)) = rollout(&item, &old, &reference, &cfg, &rcfg, &mut crng) else {
            continue;
        };
        // Central differences straddling a clip boundary are meaningless.
        let near_kink = group.completions.iter().zip(&group.logp_old).any(|(c, &lo)| {
            let rho = (policy.log_prob(&group.query, c).unwrap_or(lo) - lo).exp();
            [1.0 - cfg.clip_delta, 1.0 + cfg.clip_delta].iter().any(|k| (rho - k).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let build = |tape: &mut crate::numkit::Tape, p: &[crate::numkit::Var]| {
            grpo_loss_on(tape, p, &policy, &group, &cfg).expect("group decodes")
        };
        let (_, analytic) = grad(build, &policy.params)?;
        let numeric = finite_diff(build, &policy.params, FD_STEP)?;
        out.push(CaseResult {
            case: out.len(),
            detail: format!("{} N={} δ={:.3} β={}", item.query.task, cfg.group_size, cfg.clip_delta, cfg.kl_beta),
            n_params: policy.num_params(),
            max_rel_error: max_relative_error(&analytic, &numeric, ABS_FLOOR),
        });
    }
    Ok(out)
}

/// DPO loss: random generator, reference, latents, timestep and noise.
pub fn dpo_cases(n_cases: usize, seed: u64) -> Result<Vec<CaseResult>, NumError> {
    let mut rng = Rng::new(seed);
    let schedule = DiffusionSchedule::default();
    (0..n_cases)
        .map(|case| {
            let mut crng = rng.fork(case as u64);
            let gcfg = GenConfig { latent_dim: 4, hidden_dim: 6, out_init_scale: 0.5, ..GenConfig::default() };
            let reference = ToyGenerator::new(gcfg.clone(), &schedule, &mut crng)?;
            let mut theta = reference.clone();
            for v in theta.params.values_mut() {
                *v += 0.2 * crng.normal();
            }
            let pair = WinLosePair {
                prompt_id: format!("case-{case}"),
                winner: crng.normals(gcfg.latent_dim),
                loser: crng.normals(gcfg.latent_dim),
                provenance: Provenance::Initial,
            };
            let draw = PairDraw::sample(&schedule, gcfg.latent_dim, &mut crng);
            let cfg = DpoConfig { weight_const: 0.1 + 2.0 * crng.uniform(), ..DpoConfig::default() };
            let build = |tape: &mut crate::numkit::Tape, p: &[crate::numkit::Var]| {
                dpo_loss_on(tape, p, &theta, &reference, &pair, &schedule, &draw, &cfg).expect("pair matches generator")
            };
            let (_, analytic) = grad(build, &theta.params)?;
            let numeric = finite_diff(build, &theta.params, FD_STEP)?;
            Ok(CaseResult {
                case,
                detail: format!("t={} w={:.3}", draw.t, cfg.weight_const),
                n_params: theta.params.len(),
                max_rel_error: max_relative_error(&analytic, &numeric, ABS_FLOOR),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_cases_pass() {
        for r in grpo_cases(5, 1).unwrap().iter().chain(&dpo_cases(5, 1).unwrap()) {
            assert!(r.max_rel_error < TOLERANCE, "{r:?}");
        }
    }
}
