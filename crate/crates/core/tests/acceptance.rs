//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use vqrl_core::curriculum::{
    init_generator, init_policy, judge_accuracy, length_window_rate, mean_temporal_gap, oracle_win_rate,
    run_stage1, run_stage2, run_stage3, sampled_scores, StagePlan,
};
use vqrl_core::data::{AnnotationRecord, Benchmark, Counts, SyntheticWorld, WorldConfig};
use vqrl_core::dpo::{dpo_loss, inner_margin, DpoConfig, PairDraw, Provenance, WinLosePair};
use vqrl_core::gradcheck::{dpo_cases, grpo_cases, TOLERANCE};
use vqrl_core::grpo::{advantages, TrainItem};
use vqrl_core::metrics::{krcc, plcc, srcc};
use vqrl_core::numkit::Rng;
use vqrl_core::pref::{run_tournament, CandidatePool};
use vqrl_core::reward::{
    length_reward, multidim_reward, preference_reward, score_reward, temporal_reward, Choice, Discrete,
    RewardConfig, YesNo,
};
use vqrl_core::toy::{DiffusionSchedule, GenConfig, ToyGenerator, ToyPolicy};

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// `(mantissa, exponent)` with `x = mantissa · 2^exponent`, for finite `x ≥ 0`.
fn split(x: f64) -> (u128, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1 << 52) - 1)) as u128;
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | 1 << 52, exp - 1075)
    }
}

/// Exact `x > a·b` on the rationals the doubles represent (all inputs ≥ 0).
fn exact_gt_product(x: f64, a: f64, b: f64) -> bool {
    let (xm, xe) = split(x);
    let (am, ae) = split(a);
    let (bm, be) = split(b);
    let (pm, pe) = (am * bm, ae + be);
    if xm == 0 || pm == 0 {
        return xm > 0 && pm == 0;
    }
    let top = |m: u128, e: i32| (128 - m.leading_zeros()) as i32 + e;
    let (tx, tp) = (top(xm, xe), top(pm, pe));
    if tx != tp {
        return tx > tp;
    }
    // Same magnitude: align to the smaller exponent; the shift stays below 128 bits.
    if xe >= pe {
        (xm << (xe - pe)) > pm
    } else {
        xm > (pm << (pe - xe))
    }
}

fn grid(step_hundredths: usize) -> Vec<(usize, f64)> {
    (0..=100).step_by(step_hundredths).map(|i| (i, i as f64 / 100.0)).collect()
}

fn formula_fidelity() -> Outcome {
    let cfg = RewardConfig::default();
    let constants = cfg.alpha == 0.3
        && cfg.mu == 0.8
        && cfg.gamma == 0.1
        && cfg.l_min == 320
        && cfg.l_max == 512
        && cfg.lambda == vec![1.0; 3];
    let mut worst: f64 = 0.0;
    let mut mismatches = 0usize;

    // Score: the expected value is computed on integer hundredths.
    for &(i, p) in &grid(1) {
        for &(j, g) in &grid(1) {
            let want = 1.0 - (i as f64 - j as f64).abs() / 100.0;
            worst = worst.max((score_reward(p, g).unwrap() - want).abs());
        }
    }

    // Multi-dimension: the full coarse grid over all six coordinates, plus a
    // fine sweep of each coordinate pair with the others held fixed.
    let coarse = grid(10);
    let ones = [1.0; 3];
    for a in &coarse {
        for b in &coarse {
            for c in &coarse {
                for x in &coarse {
                    for y in &coarse {
                        for z in &coarse {
                            let want = 1.0
                                - ((a.0 as f64 - x.0 as f64).abs()
                                    + (b.0 as f64 - y.0 as f64).abs()
                                    + (c.0 as f64 - z.0 as f64).abs())
                                    / 100.0;
                            let got = multidim_reward(&[a.1, b.1, c.1], &[x.1, y.1, z.1], &ones).unwrap();
                            worst = worst.max((got - want).abs());
                        }
                    }
                }
            }
        }
    }
    let fixed = [(37usize, 0.37), (81, 0.81), (5, 0.05)];
    for dim in 0..3 {
        for &(i, p) in &grid(1) {
            for &(j, g) in &grid(1) {
                let mut pred = fixed.map(|f| f.1);
                let mut gt = [fixed[2].1, fixed[0].1, fixed[1].1];
                pred[dim] = p;
                gt[dim] = g;
                let mut hundredths = 0.0;
                for k in 0..3 {
                    let pk = if k == dim { i } else { fixed[k].0 };
                    let gk = if k == dim { j } else { fixed[(k + 2) % 3].0 };
                    hundredths += (pk as f64 - gk as f64).abs();
                }
                let got = multidim_reward(&pred, &gt, &cfg.lambda).unwrap();
                worst = worst.max((got - (1.0 - hundredths / 100.0)).abs());
            }
        }
    }

    // Temporal: strict comparison against mu, decided in exact arithmetic on
    // the doubles actually passed in.
    for &(_, w_seq) in &grid(1) {
        for &(_, w_rand) in &grid(1) {
            let want = if exact_gt_product(w_seq, cfg.mu, w_rand) { 0.3 } else { 0.0 };
            if temporal_reward(w_seq, w_rand, &cfg) != want {
                mismatches += 1;
            }
        }
    }

    // Exact equality (halving is exact in binary) earns nothing.
    for w_rand in [1.0, 0.5, 0.25, 0.125] {
        mismatches += (temporal_reward(cfg.mu * w_rand, w_rand, &cfg) != 0.0) as usize;
    }

    for len in 0..=1024 {
        let want = if len > 320 && len < 512 { 0.1 } else { 0.0 };
        if length_reward(len, &cfg) != want {
            mismatches += 1;
        }
    }

    for p in [Choice::A, Choice::B] {
        for g in [Choice::A, Choice::B] {
            let got = preference_reward(Discrete::Choice(p), Discrete::Choice(g)).unwrap();
            mismatches += (got != if p == g { 1.0 } else { 0.0 }) as usize;
        }
    }
    for p in [YesNo::Yes, YesNo::No] {
        for g in [YesNo::Yes, YesNo::No] {
            let got = preference_reward(Discrete::YesNo(p), Discrete::YesNo(g)).unwrap();
            mismatches += (got != if p == g { 1.0 } else { 0.0 }) as usize;
        }
    }

    check(
        constants && worst <= 1e-12 && mismatches == 0,
        format!("constants ok={constants}, worst abs error {worst:.1e}, {mismatches} threshold mismatches"),
    )
}

fn advantage_normalization() -> Outcome {
    let mut rng = Rng::new(11);
    let (mut sum_abs, mut worst_sum, mut worst_std, mut worst_inv) = (0.0, 0.0f64, 0.0f64, 0.0f64);
    let mut degenerate_bad = 0;
    let mut n_degenerate = 0;
    let groups = 10_000;
    for g in 0..groups {
        let n = 2 + rng.below(15);
        if g % 10 == 0 {
            n_degenerate += 1;
            let r = vec![rng.normal(); n];
            degenerate_bad += advantages(&r, 1e-8).unwrap().iter().any(|&a| a != 0.0) as usize;
            continue;
        }
        let r: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0 - 0.5).collect();
        let a = advantages(&r, 1e-8).unwrap();
        let s: f64 = a.iter().sum();
        sum_abs += s.abs();
        worst_sum = worst_sum.max(s.abs());
        let std = (a.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        worst_std = worst_std.max((std - 1.0).abs());
        let shift = 10.0 * rng.normal();
        let scale = 0.1 + 10.0 * rng.uniform();
        let moved: Vec<f64> = r.iter().map(|x| shift + scale * x).collect();
        let b = advantages(&moved, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_inv = worst_inv.max((x - y).abs());
        }
    }
    let mean_sum = sum_abs / groups as f64;
    check(
        mean_sum < 1e-9 && worst_std <= 1e-9 && degenerate_bad == 0 && worst_inv <= 1e-9,
        format!(
            "mean |sum| {mean_sum:.1e} (worst {worst_sum:.1e}), std error {worst_std:.1e}, \
             {degenerate_bad}/{n_degenerate} degenerate groups nonzero, affine drift {worst_inv:.1e}"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let g = grpo_cases(100, 0).unwrap();
    let d = dpo_cases(100, 0).unwrap();
    let gw = g.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let dw = d.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    check(
        g.len() == 100 && d.len() == 100 && gw < TOLERANCE && dw < TOLERANCE,
        format!("worst relative error GRPO {gw:.2e}, DPO {dw:.2e} (tolerance {TOLERANCE:e})"),
    )
}

fn dpo_anchor() -> Outcome {
    let schedule = DiffusionSchedule::default();
    let cfg = GenConfig::default();
    let dcfg = DpoConfig::default();
    let mut rng = Rng::new(21);
    let mut worst: f64 = 0.0;
    let mut flips_bad = 0;
    for i in 0..100 {
        let reference = ToyGenerator::new(cfg.clone(), &schedule, &mut rng).unwrap();
        let mut theta = reference.clone();
        for v in theta.params.values_mut() {
            *v += 0.1 * rng.normal();
        }
        let pair = WinLosePair {
            prompt_id: format!("p{i}"),
            winner: rng.normals(cfg.latent_dim),
            loser: rng.normals(cfg.latent_dim),
            provenance: Provenance::Initial,
        };
        let draw = PairDraw::sample(&schedule, cfg.latent_dim, &mut rng);
        let at_ref = dpo_loss(&reference, &reference, &pair, &schedule, &draw, &dcfg).unwrap();
        worst = worst.max((at_ref - std::f64::consts::LN_2).abs());
        let m = inner_margin(&theta, &reference, &pair, &schedule, &draw).unwrap();
        let ms = inner_margin(&theta, &reference, &pair.swapped(), &schedule, &draw.swapped()).unwrap();
        flips_bad += (ms != -m) as usize;
    }
    check(
        worst <= 1e-9 && flips_bad == 0,
        format!("worst |loss - ln 2| {worst:.1e}, {flips_bad}/100 swaps without exact sign flip"),
    )
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let below = x.iter().filter(|&&v| v < xi).count() as f64;
            let equal = x.iter().filter(|&&v| v == xi).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn brute_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let (mut conc, mut disc, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            if dx == 0.0 {
                tie_x += 1;
            } else if dy == 0.0 {
                tie_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let n1 = (conc + disc + tie_x) as f64;
    let n2 = (conc + disc + tie_y) as f64;
    (conc - disc) as f64 / (n1 * n2).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(31);
    let (mut ws, mut wk, mut wp) = (0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < 1000 {
        let n = 3 + rng.below(48);
        let levels = 2 + rng.below(12);
        let x: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.bernoulli(0.5) { rng.below(levels) as f64 } else { rng.normal() }).collect();
        if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
            continue;
        }
        done += 1;
        ws = ws.max((srcc(&x, &y).unwrap() - brute_pearson(&brute_ranks(&x), &brute_ranks(&y))).abs());
        wk = wk.max((krcc(&x, &y).unwrap() - brute_tau_b(&x, &y)).abs());
        let base = plcc(&x, &y).unwrap();
        let (a, b, c, d) = (rng.normal(), 0.1 + 5.0 * rng.uniform(), rng.normal(), 0.1 + 5.0 * rng.uniform());
        let xt: Vec<f64> = x.iter().map(|v| a + b * v).collect();
        let yt: Vec<f64> = y.iter().map(|v| c + d * v).collect();
        let yn: Vec<f64> = y.iter().map(|v| c - d * v).collect();
        wp = wp.max((plcc(&xt, &yt).unwrap() - base).abs());
        wp = wp.max((plcc(&xt, &yn).unwrap() + base).abs());
        wp = wp.max((base - brute_pearson(&x, &y)).abs());
    }
    check(
        ws <= 1e-12 && wk <= 1e-12 && wp <= 1e-12,
        format!("1000 vectors: srcc {ws:.1e}, krcc {wk:.1e}, plcc affine {wp:.1e}"),
    )
}

fn tournament_oracle() -> Outcome {
    let pairs: Vec<(usize, usize)> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
    let mut wrong = 0;
    for mask in 0u32..64 {
        let a_wins = |i: usize, j: usize| {
            let k = pairs.iter().position(|&p| p == (i, j)).unwrap();
            mask >> k & 1 == 1
        };
        let judge = |a: &[f64], b: &[f64]| -> Result<Choice, String> {
            let (i, j) = (a[0] as usize, b[0] as usize);
            Ok(if a_wins(i, j) { Choice::A } else { Choice::B })
        };
        let mut pool = CandidatePool::new("grid", (0..4).map(|i| vec![i as f64]).collect());
        let out = run_tournament(&mut pool, &judge).unwrap();

        let mut counts = [0usize; 4];
        for &(i, j) in &pairs {
            counts[if a_wins(i, j) { i } else { j }] += 1;
        }
        let hi = *counts.iter().max().unwrap();
        let lo = *counts.iter().min().unwrap();
        let want = if hi == lo {
            (0, 1)
        } else {
            (counts.iter().position(|&c| c == hi).unwrap(), counts.iter().position(|&c| c == lo).unwrap())
        };
        wrong += ((out.winner, out.loser) != want || out.counts != counts) as usize;
    }
    check(wrong == 0, format!("{wrong}/64 judge matrices disagree with the count-and-tiebreak oracle"))
}

fn items(records: &[AnnotationRecord]) -> Vec<TrainItem> {
    records.iter().map(AnnotationRecord::to_item).collect()
}

struct SeedRun {
    stage1_srcc: f64,
    stage1_time: Duration,
    gap_tmr: f64,
    gap_no_tmr: f64,
    window_lcr: f64,
    window_no_lcr: f64,
    win_uf: f64,
    win_no_uf: f64,
    stage3_time: Duration,
    judge_diff: f64,
    judge_tau: f64,
    judge_threshold: Option<f64>,
}

fn stage2_tasks(bench: &Benchmark) -> BTreeMap<vqrl_core::reward::TaskKind, Vec<TrainItem>> {
    use vqrl_core::reward::TaskKind;
    BTreeMap::from([
        (TaskKind::NaturalVideoScore, items(&bench.natural_video)),
        (TaskKind::VideoMultidim, items(&bench.multidim)),
        (TaskKind::Pair, items(&bench.pair)),
        (TaskKind::Vqa, items(&bench.vqa)),
    ])
}

fn run_seed(seed: u64) -> SeedRun {
    let plan = StagePlan { seed, ..StagePlan::default() };
    let mut rng = Rng::new(seed);
    let world = SyntheticWorld::new(WorldConfig::default(), &mut rng);
    let bench = world.generate(&Counts::default(), &mut rng);

    let t = Instant::now();
    let p0 = init_policy(&plan, &mut rng);
    let (p1, _) = run_stage1(&plan, &items(&bench.image), &p0, &mut rng).unwrap();
    let stage1_time = t.elapsed();
    let held = items(&bench.image_heldout);
    let pred = sampled_scores(&p1, &held, plan.eval.samples, plan.eval.seed).unwrap();
    let truth: Vec<f64> = bench.image_heldout.iter().map(|r| bench.oracle_for(&r.id).unwrap().overall).collect();
    let stage1_srcc = srcc(&pred, &truth).unwrap();

    let tasks = stage2_tasks(&bench);
    let stage2_rng = rng.fork(77);
    let stage2 = |tmr: bool, lcr: bool| -> ToyPolicy {
        let mut p = plan.clone();
        p.ablations.tmr = tmr;
        p.ablations.lcr = lcr;
        run_stage2(&p, &tasks, &p1, &mut stage2_rng.clone()).unwrap().0
    };
    let full = stage2(true, true);
    let no_tmr = stage2(false, true);
    let no_lcr = stage2(true, false);

    let vqa_held = items(&bench.vqa_heldout);
    let gap = |p: &ToyPolicy| mean_temporal_gap(p, &vqa_held, plan.eval.n_shuffles, plan.eval.seed).unwrap();
    let mut length_items = vqa_held.clone();
    length_items.extend(items(&bench.multidim_heldout));
    length_items.extend(items(&bench.pair_heldout));
    let window = |p: &ToyPolicy| length_window_rate(p, &length_items, &plan.stage2.reward, plan.eval.seed).unwrap();

    let (diff, tau) = judge_accuracy(&full, &items(&bench.pair_heldout), &items(&bench.pair_calibration)).unwrap();

    let t = Instant::now();
    let generator = init_generator(&plan, &mut rng).unwrap();
    let schedule = DiffusionSchedule::linear_rescaled(plan.stage3.generator.timesteps).unwrap();
    let oracle = |x: &[f64]| world.latent_quality(x);
    let pairs = items(&bench.pair);
    // Both arms share one stream so the comparison is paired.
    let stage3_rng = rng.fork(99);
    let stage3 = |uf: bool| -> f64 {
        let mut p = plan.clone();
        p.ablations.uf = uf;
        let out = run_stage3(&p, &full, &generator, &world.decoder, &pairs, None, &mut stage3_rng.clone()).unwrap();
        oracle_win_rate(&out.generator, &generator, &schedule, &oracle, 2000, 4242).unwrap()
    };
    let win_uf = stage3(true);
    let win_no_uf = stage3(false);
    let stage3_time = t.elapsed();

    SeedRun {
        stage1_srcc,
        stage1_time,
        gap_tmr: gap(&full),
        gap_no_tmr: gap(&no_tmr),
        window_lcr: window(&full),
        window_no_lcr: window(&no_lcr),
        win_uf,
        win_no_uf,
        stage3_time,
        judge_diff: diff.accuracy,
        judge_tau: tau.accuracy,
        judge_threshold: tau.threshold,
    }
}

fn list(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> String {
    runs.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join(" ")
}

fn main() {
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, limit: Option<Duration>, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let el = t.elapsed();
        if let Some(limit) = limit {
            if el > limit {
                o.pass = false;
                o.detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        results.push((name, o, el));
    };
    timed("formula fidelity", Some(Duration::from_secs(10)), &formula_fidelity);
    timed("advantage normalization", Some(Duration::from_secs(5)), &advantage_normalization);
    timed("gradient checks", Some(Duration::from_secs(60)), &gradient_checks);
    timed("dpo anchor", None, &dpo_anchor);
    timed("metric oracles", None, &metric_oracles);
    timed("tournament", None, &tournament_oracle);

    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..SEEDS).map(run_seed).collect();
    let pipeline = t.elapsed();

    let s1_pass = runs.iter().filter(|r| r.stage1_srcc >= 0.9).count();
    let s1_slowest = runs.iter().map(|r| r.stage1_time).max().unwrap();
    results.push((
        "stage-1 convergence",
        check(
            s1_pass >= 4 && s1_slowest < Duration::from_secs(300),
            format!(
                "held-out SRCC per seed [{}], {s1_pass}/5 >= 0.9, slowest stage 1 {:.1}s",
                list(&runs, |r| r.stage1_srcc),
                s1_slowest.as_secs_f64()
            ),
        ),
        s1_slowest,
    ));

    let tmr_wins = runs.iter().filter(|r| r.gap_tmr > r.gap_no_tmr).count();
    results.push((
        "stage-2 temporal reward ablation",
        check(
            tmr_wins >= 4,
            format!(
                "held-out gap with [{}] vs without [{}], {tmr_wins}/5 strictly higher",
                list(&runs, |r| r.gap_tmr),
                list(&runs, |r| r.gap_no_tmr)
            ),
        ),
        Duration::ZERO,
    ));

    let lcr_ok = runs.iter().all(|r| r.window_lcr >= 0.9 && r.window_no_lcr < 0.5);
    results.push((
        "stage-2 length control",
        check(
            lcr_ok,
            format!(
                "in-window share on [{}], off [{}]",
                list(&runs, |r| r.window_lcr),
                list(&runs, |r| r.window_no_lcr)
            ),
        ),
        Duration::ZERO,
    ));

    let s3_pass = runs.iter().filter(|r| r.win_uf >= 0.55).count();
    let uf_wins = runs.iter().filter(|r| r.win_uf >= r.win_no_uf).count();
    let s3_slowest = runs.iter().map(|r| r.stage3_time).max().unwrap();
    results.push((
        "stage-3 alternation",
        check(
            s3_pass >= 4 && uf_wins >= 3 && s3_slowest < Duration::from_secs(600),
            format!(
                "win-rate vs initial generator [{}], {s3_pass}/5 >= 0.55; without refresh [{}], full >= ablation {uf_wins}/5",
                list(&runs, |r| r.win_uf),
                list(&runs, |r| r.win_no_uf)
            ),
        ),
        s3_slowest,
    ));

    let j = &runs[0];
    results.push((
        "preference evaluation",
        check(
            j.judge_diff >= 0.85 && j.judge_threshold.is_some_and(f64::is_finite),
            format!(
                "seed 0 judge diff accuracy {:.3}, tau accuracy {:.3} at threshold {:.4}; other seeds diff [{}]",
                j.judge_diff,
                j.judge_tau,
                j.judge_threshold.unwrap_or(f64::NAN),
                list(&runs[1..], |r| r.judge_diff)
            ),
        ),
        Duration::ZERO,
    ));

    let mut failed = 0;
    for (name, o, el) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += !o.pass as usize;
        let time = if el.is_zero() { String::new() } else { format!(" [{:.2}s]", el.as_secs_f64()) };
        println!("{tag} {name}: {}{time}", o.detail);
    }
    println!("pipeline runs over {SEEDS} seeds took {:.1}s", pipeline.as_secs_f64());
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
