use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use vqrl_core::curriculum::{
    self, init_generator, init_policy, run_stage1, run_stage2, run_stage3, sampled_scores, CurriculumError, StagePlan,
};
use vqrl_core::data::checkpoint::{checkpoint_name, config_hash, load_checkpoint, save_checkpoint};
use vqrl_core::data::{gen_synthetic, load_dataset, read_decoder, read_oracle, AnnotationRecord, DataError, RecordPayload};
use vqrl_core::dpo::write_pairs;
use vqrl_core::gradcheck::{dpo_cases, grpo_cases, TOLERANCE};
use vqrl_core::grpo::{TrainItem, TrainingLog};
use vqrl_core::metrics::{MetricError, MetricReport};
use vqrl_core::numkit::Rng;
use vqrl_core::pref::write_audit;
use vqrl_core::reward::{GroundTruth, Payload, TaskKind};
use vqrl_core::toy::{DiffusionSchedule, ToyGenerator, ToyPolicy};

use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CurriculumError> for CliError {
    fn from(e: CurriculumError) -> Self {
        match e {
            CurriculumError::Config(_) | CurriculumError::Mix(_) | CurriculumError::EmptyDataset { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    plan: StagePlan,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().unwrap_or_else(|| PathBuf::from(&self.plan.data_dir))
    }

    fn load_policy(&self, path: &Path) -> Result<ToyPolicy, CliError> {
        let (params, _) = load_checkpoint(path, Some(&config_hash(&self.plan.policy)))?;
        ToyPolicy::from_params(self.plan.policy.clone(), params).map_err(|e| CliError::Validation(e.to_string()))
    }

    fn save_policy(&self, stage: &str, step: usize, policy: &ToyPolicy) -> Result<PathBuf, CliError> {
        let path = self.out.join(checkpoint_name(stage, step));
        save_checkpoint(&path, &policy.params, &config_hash(&self.plan.policy))?;
        Ok(path)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut plan = match &cli.config {
        Some(p) => StagePlan::load(p).map_err(|e| CliError::Validation(e.to_string()))?,
        None => StagePlan::default(),
    };
    if let Some(s) = cli.seed {
        plan.seed = s;
    }
    plan.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let out = match (&cli.out, &cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::GenData) => PathBuf::from(&plan.data_dir),
        (None, _) => PathBuf::from("runs"),
    };
    std::fs::create_dir_all(&out)?;
    let resolved = plan.to_toml();
    if !matches!(cli.command, Command::Report { .. } | Command::Gradcheck { .. }) {
        eprintln!("resolved config:\n{resolved}");
    }
    std::fs::write(out.join("resolved_config.toml"), &resolved)?;
    let ctx = Ctx { plan, out };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Stage1 { data } => stage1(&ctx, &data),
        Command::Stage2 { init, data } => stage2(&ctx, &init, &data),
        Command::Stage3 { judge, generator, data, oracle } => stage3(&ctx, &judge, generator.as_deref(), &data, oracle.as_deref()),
        Command::Eval { checkpoint, dataset, calibration, oracle } => {
            eval(&ctx, checkpoint.as_deref(), &dataset, calibration.as_deref(), oracle.as_deref())
        }
        Command::Gradcheck { cases } => gradcheck(cases, ctx.plan.seed),
        Command::Report { logs } => report(&logs),
    }
}

fn gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let mut rng = Rng::new(ctx.plan.seed);
    let written = gen_synthetic(&ctx.plan.world, &ctx.plan.counts, &ctx.out, &mut rng)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn load_items(path: &Path, kind: TaskKind) -> Result<Vec<TrainItem>, CliError> {
    let loaded = load_dataset(path, Some(kind))?;
    for e in &loaded.errors {
        eprintln!("warning: {}:{}: {}", path.display(), e.line, e.message);
    }
    Ok(loaded.records.iter().map(AnnotationRecord::to_item).collect())
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<(), CliError> {
    log.write_jsonl(path).map_err(runtime)
}

fn stage1(ctx: &Ctx, data: &Option<PathBuf>) -> Result<(), CliError> {
    let plan = &ctx.plan;
    let mut rng = Rng::new(plan.seed);
    let init = init_policy(plan, &mut rng);
    let items = if plan.ablations.warmup {
        load_items(&ctx.data_dir(data).join(&plan.stage1.dataset), TaskKind::ImageScore)?
    } else {
        Vec::new()
    };
    let (policy, log) = run_stage1(plan, &items, &init, &mut rng)?;
    write_log(&ctx.out.join("stage1_log.jsonl"), &log)?;
    let path = ctx.save_policy("stage1", log.rows.len(), &policy)?;
    if let Some(r) = log.epoch_mean_rewards().last() {
        eprintln!("stage1: {} steps, final epoch mean reward {r:.4}", log.rows.len());
    }
    println!("{}", path.display());
    Ok(())
}

fn stage2(ctx: &Ctx, init: &Path, data: &Option<PathBuf>) -> Result<(), CliError> {
    let plan = &ctx.plan;
    let start = ctx.load_policy(init)?;
    let dir = ctx.data_dir(data);
    let mut tasks = BTreeMap::new();
    for mix in &plan.stage2.tasks {
        tasks.insert(mix.kind, load_items(&dir.join(&mix.dataset), mix.kind)?);
    }
    let mut rng = Rng::new(plan.seed).fork(2);
    let (policy, log) = run_stage2(plan, &tasks, &start, &mut rng)?;
    write_log(&ctx.out.join("stage2_log.jsonl"), &log)?;
    let path = ctx.save_policy("stage2", log.rows.len(), &policy)?;
    println!("{}", path.display());
    Ok(())
}

fn stage3(
    ctx: &Ctx,
    judge: &Path,
    generator: Option<&Path>,
    data: &Option<PathBuf>,
    oracle: Option<&Path>,
) -> Result<(), CliError> {
    let plan = &ctx.plan;
    let dir = ctx.data_dir(data);
    let judge = ctx.load_policy(judge)?;
    let decoder = read_decoder(&dir.join(vqrl_core::data::world::DECODER_FILE))?;
    let pairs = load_items(&dir.join("pair.jsonl"), TaskKind::Pair)?;
    let mut rng = Rng::new(plan.seed).fork(3);
    let gen_hash = config_hash(&plan.stage3.generator);
    let gen = match generator {
        Some(p) => {
            let (params, _) = load_checkpoint(p, Some(&gen_hash))?;
            ToyGenerator::from_params(plan.stage3.generator.clone(), params).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => init_generator(plan, &mut rng)?,
    };
    let weights = oracle.map(read_oracle).transpose()?.map(|(w, _)| w);
    let quality = weights.as_ref().map(|w| move |x: &[f64]| w.overall(x, true));
    let quality_ref = quality.as_ref().map(|q| q as &dyn Fn(&[f64]) -> f64);
    let out = run_stage3(plan, &judge, &gen, &decoder, &pairs, quality_ref, &mut rng)?;
    let rounds = plan.stage3.rounds;
    save_checkpoint(&ctx.out.join(checkpoint_name("stage3-generator", rounds)), &out.generator.params, &gen_hash)?;
    ctx.save_policy("stage3-judge", rounds, &out.judge)?;
    write_pairs(&ctx.out.join("pairs.jsonl"), &out.pairs).map_err(runtime)?;
    write_audit(&ctx.out.join("audit.jsonl"), &out.audit).map_err(runtime)?;
    write_log(&ctx.out.join("stage3_judge_log.jsonl"), &out.judge_log)?;
    let summary = serde_json::to_string_pretty(&out.rounds).map_err(runtime)?;
    std::fs::write(ctx.out.join("rounds.json"), &summary)?;
    if let Some(q) = quality_ref {
        let schedule = DiffusionSchedule::linear_rescaled(plan.stage3.generator.timesteps).map_err(runtime)?;
        let wr = curriculum::oracle_win_rate(&out.generator, &gen, &schedule, q, plan.stage3.win_rate_samples, plan.seed)?;
        println!("win_rate_vs_initial={wr:.4}");
    }
    println!("{summary}");
    Ok(())
}

fn oracle_target(rec: &AnnotationRecord, oracle: &BTreeMap<String, vqrl_core::data::OracleEntry>) -> Result<f64, CliError> {
    let e = oracle
        .get(&rec.id)
        .ok_or_else(|| CliError::Validation(format!("no oracle entry for {}", rec.id)))?;
    Ok(match rec.payload {
        RecordPayload::VideoMultidim { .. } => {
            (e.spatial + e.temporal.unwrap_or(0.0) + e.alignment.unwrap_or(0.0)) / 3.0
        }
        _ => e.overall,
    })
}

fn label_target(item: &TrainItem) -> Option<f64> {
    match &item.truth {
        GroundTruth::Score(s) => Some(*s),
        GroundTruth::MultiScore(v) => Some(v.iter().sum::<f64>() / v.len() as f64),
        _ => None,
    }
}

fn eval(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    dataset: &Path,
    calibration: Option<&Path>,
    oracle: Option<&Path>,
) -> Result<(), CliError> {
    let plan = &ctx.plan;
    let policy = match checkpoint {
        Some(p) => ctx.load_policy(p)?,
        None => init_policy(plan, &mut Rng::new(plan.seed)),
    };
    let loaded = load_dataset(dataset, None)?;
    let records = loaded.records;
    let Some(first) = records.first() else {
        return Err(CliError::Validation(format!("{} has no usable records", dataset.display())));
    };
    let kind = first.kind();
    if records.iter().any(|r| r.kind() != kind) {
        return Err(CliError::Validation(format!("{} mixes task kinds", dataset.display())));
    }
    let items: Vec<TrainItem> = records.iter().map(AnnotationRecord::to_item).collect();
    let mut report = MetricReport::default();
    let mut extra = Vec::new();
    match kind {
        TaskKind::ImageScore | TaskKind::NaturalVideoScore | TaskKind::VideoMultidim => {
            let pred = sampled_scores(&policy, &items, plan.eval.samples, plan.eval.seed)?;
            let gt: Vec<f64> = match oracle {
                Some(p) => {
                    let (_, entries) = read_oracle(p)?;
                    let by_id: BTreeMap<_, _> = entries.into_iter().map(|e| (e.id.clone(), e)).collect();
                    records.iter().map(|r| oracle_target(r, &by_id)).collect::<Result<_, _>>()?
                }
                None => items.iter().filter_map(label_target).collect(),
            };
            report = report.with_scores(&pred, &gt)?;
        }
        TaskKind::Pair => {
            let recs = curriculum::pair_eval_records(&policy, &items)?;
            match calibration {
                Some(c) => {
                    let cal_items = load_items(c, TaskKind::Pair)?;
                    let cal = curriculum::pair_eval_records(&policy, &cal_items)?;
                    report = report.with_pairs(&recs, &cal)?;
                }
                None => {
                    let diff = vqrl_core::metrics::preference_accuracy(&recs, vqrl_core::metrics::AccuracyMode::Diff, None)?;
                    report.diff_acc = Some(diff.accuracy);
                    report.n_pairs = recs.len();
                    report.n_pairs_non_tie = diff.n_used;
                }
            }
        }
        TaskKind::Vqa => {
            let mut hit = 0;
            for it in &items {
                let want = match it.truth {
                    GroundTruth::YesNo(y) => Payload::YesNo(y),
                    _ => unreachable!("vqa items carry yes/no truth"),
                };
                hit += (policy.greedy_answer(&it.query).map_err(runtime)? == want) as usize;
            }
            extra.push(format!("vqa_acc={}", hit as f64 / items.len() as f64));
            let gap = curriculum::mean_temporal_gap(&policy, &items, plan.eval.n_shuffles, plan.eval.seed)?;
            extra.push(format!("temporal_gap={gap}"));
        }
    }
    print!("{}", report.to_key_values());
    for line in &extra {
        println!("{line}");
    }
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(ctx.out.join("report.json"), json)?;
    Ok(())
}

fn gradcheck(cases: usize, seed: u64) -> Result<(), CliError> {
    let mut failed = 0;
    for (name, results) in [("grpo", grpo_cases(cases, seed)), ("dpo", dpo_cases(cases, seed))] {
        let results = results.map_err(runtime)?;
        let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let bad = results.iter().filter(|r| !(r.max_rel_error < TOLERANCE)).count();
        failed += bad;
        println!("{name}: {} cases, worst relative error {worst:.3e}, {bad} above {TOLERANCE:e}", results.len());
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn report(logs: &[PathBuf]) -> Result<(), CliError> {
    for path in logs {
        let log = TrainingLog::read_jsonl(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
        println!("{:>5} {:>6} {:>11} {:>10} {:>11} {:>9}", "epoch", "steps", "mean_reward", "mean_loss", "format_rate", "mean_len");
        let epochs = log.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        for e in 0..epochs {
            let rows: Vec<_> = log.rows.iter().filter(|r| r.epoch == e).collect();
            let n = rows.len().max(1) as f64;
            let mean = |f: fn(&vqrl_core::grpo::LogRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            println!(
                "{:>5} {:>6} {:>11.4} {:>10.4} {:>11.4} {:>9.1}",
                e,
                rows.len(),
                mean(|r| r.mean_reward),
                mean(|r| r.loss),
                mean(|r| r.format_rate),
                mean(|r| r.mean_len)
            );
        }
    }
    Ok(())
}
