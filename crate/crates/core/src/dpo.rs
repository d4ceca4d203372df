//! Preference optimization for the noise-prediction generator.
//!
//! For a win/lose pair noised at a shared timestep with independent noise,
//! the inner margin compares how much better the finetuned network denoises
//! each sample than the frozen reference:
//!
//! `m = (‖εʷ − ε_θ(xʷ_t)‖² − ‖εʷ − ε_ref(xʷ_t)‖²) − (‖εˡ − ε_θ(xˡ_t)‖² − ‖εˡ − ε_ref(xˡ_t)‖²)`
//!
//! and the loss is `−log σ(−w·m)`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, Rng, Tape, Var};
use crate::toy::{noise_with, DiffusionSchedule, ToyGenerator};

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("latent dimension mismatch: {0}")]
    Dimension(String),
    #[error("no preference pairs")]
    NoPairs,
    #[error("invalid DPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("pair file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Mined from a fresh pool by tournament.
    Initial,
    /// A newer pool's winner paired with an earlier loser.
    Refreshed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinLosePair {
    pub prompt_id: String,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub provenance: Provenance,
}

impl WinLosePair {
    pub fn swapped(&self) -> WinLosePair {
        WinLosePair {
            prompt_id: self.prompt_id.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            provenance: self.provenance,
        }
    }
}

pub fn write_pairs(path: &Path, pairs: &[WinLosePair]) -> Result<(), DpoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<WinLosePair>, DpoError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DpoError::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// Constant timestep weight `w`.
    pub weight_const: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub minibatch: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            weight_const: 1.0,
            learning_rate: 0.01,
            steps: 200,
            minibatch: 8,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.weight_const > 0.0) {
            return Err(DpoError::Config(format!("weight_const {} must be positive", self.weight_const)));
        }
        if self.minibatch == 0 {
            return Err(DpoError::Config("minibatch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shared timestep and independent noise draws for one pair evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub t: usize,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
}

impl PairDraw {
    pub fn sample(schedule: &DiffusionSchedule, dim: usize, rng: &mut Rng) -> PairDraw {
        PairDraw {
            t: rng.below(schedule.len()),
            eps_w: rng.normals(dim),
            eps_l: rng.normals(dim),
        }
    }

    pub fn swapped(&self) -> PairDraw {
        PairDraw {
            t: self.t,
            eps_w: self.eps_l.clone(),
            eps_l: self.eps_w.clone(),
        }
    }
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn sq_err_on(tape: &mut Tape, pred: &[Var], target: &[f64]) -> Var {
    let terms: Vec<Var> = pred
        .iter()
        .zip(target)
        .map(|(&p, &e)| {
            let d = tape.add_const(p, -e);
            tape.square(d)
        })
        .collect();
    tape.sum(&terms)
}

fn check_pair(gen: &ToyGenerator, pair: &WinLosePair, draw: &PairDraw) -> Result<(), DpoError> {
    let d = gen.latent_dim();
    for (name, len) in [
        ("winner", pair.winner.len()),
        ("loser", pair.loser.len()),
        ("winner noise", draw.eps_w.len()),
        ("loser noise", draw.eps_l.len()),
    ] {
        if len != d {
            return Err(DpoError::Dimension(format!("{name} has {len} entries, generator expects {d}")));
        }
    }
    Ok(())
}

/// Inner margin `m` on the tape, differentiable in the finetuned
/// generator's parameters `p` only.
pub fn inner_margin_on(
    tape: &mut Tape,
    p: &[Var],
    gen_theta: &ToyGenerator,
    gen_ref: &ToyGenerator,
    pair: &WinLosePair,
    schedule: &DiffusionSchedule,
    draw: &PairDraw,
) -> Result<Var, DpoError> {
    check_pair(gen_theta, pair, draw)?;
    let xw = noise_with(schedule, &pair.winner, draw.t, &draw.eps_w)?;
    let xl = noise_with(schedule, &pair.loser, draw.t, &draw.eps_l)?;
    let ref_w = sq_err(&draw.eps_w, &gen_ref.predict_noise(&xw, draw.t)?);
    let ref_l = sq_err(&draw.eps_l, &gen_ref.predict_noise(&xl, draw.t)?);
    let pw = gen_theta.predict_noise_on(tape, p, &xw, draw.t)?;
    let th_w = sq_err_on(tape, &pw, &draw.eps_w);
    let pl = gen_theta.predict_noise_on(tape, p, &xl, draw.t)?;
    let th_l = sq_err_on(tape, &pl, &draw.eps_l);
    let a = tape.add_const(th_w, -ref_w);
    let b = tape.add_const(th_l, -ref_l);
    Ok(tape.sub(a, b))
}

/// `log(1 + e^z)` in the branch that cannot overflow.
fn softplus_on(tape: &mut Tape, z: Var) -> Var {
    if tape.value(z) > 0.0 {
        let nz = tape.neg(z);
        let e = tape.exp(nz);
        let e1 = tape.add_const(e, 1.0);
        let l = tape.log(e1);
        tape.add(z, l)
    } else {
        let e = tape.exp(z);
        let e1 = tape.add_const(e, 1.0);
        tape.log(e1)
    }
}

/// `−log σ(−w·m)` on the tape.
pub fn dpo_loss_on(
    tape: &mut Tape,
    p: &[Var],
    gen_theta: &ToyGenerator,
    gen_ref: &ToyGenerator,
    pair: &WinLosePair,
    schedule: &DiffusionSchedule,
    draw: &PairDraw,
    cfg: &DpoConfig,
) -> Result<Var, DpoError> {
    let m = inner_margin_on(tape, p, gen_theta, gen_ref, pair, schedule, draw)?;
    let z = tape.scale(m, cfg.weight_const);
    Ok(softplus_on(tape, z))
}

/// Loss value for one pair.
pub fn dpo_loss(
    gen_theta: &ToyGenerator,
    gen_ref: &ToyGenerator,
    pair: &WinLosePair,
    schedule: &DiffusionSchedule,
    draw: &PairDraw,
    cfg: &DpoConfig,
) -> Result<f64, DpoError> {
    let mut tape = Tape::new();
    let p = tape.vars(gen_theta.params.values());
    let l = dpo_loss_on(&mut tape, &p, gen_theta, gen_ref, pair, schedule, draw, cfg)?;
    Ok(tape.value(l))
}

/// Plain-number inner margin `m`.
pub fn inner_margin(
    gen_theta: &ToyGenerator,
    gen_ref: &ToyGenerator,
    pair: &WinLosePair,
    schedule: &DiffusionSchedule,
    draw: &PairDraw,
) -> Result<f64, DpoError> {
    check_pair(gen_theta, pair, draw)?;
    let xw = noise_with(schedule, &pair.winner, draw.t, &draw.eps_w)?;
    let xl = noise_with(schedule, &pair.loser, draw.t, &draw.eps_l)?;
    let a = sq_err(&draw.eps_w, &gen_theta.predict_noise(&xw, draw.t)?)
        - sq_err(&draw.eps_w, &gen_ref.predict_noise(&xw, draw.t)?);
    let b = sq_err(&draw.eps_l, &gen_theta.predict_noise(&xl, draw.t)?)
        - sq_err(&draw.eps_l, &gen_ref.predict_noise(&xl, draw.t)?);
    Ok(a - b)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DpoTrace {
    pub losses: Vec<f64>,
    /// Mean implicit reward margin `−w·m` per step; positive when the
    /// finetuned model favours winners.
    pub margins: Vec<f64>,
}

/// Minibatch gradient descent on the mean pair loss. `gen_ref` is read only.
pub fn dpo_finetune(
    gen_theta: &mut ToyGenerator,
    gen_ref: &ToyGenerator,
    pairs: &[WinLosePair],
    schedule: &DiffusionSchedule,
    cfg: &DpoConfig,
    rng: &mut Rng,
) -> Result<DpoTrace, DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::NoPairs);
    }
    cfg.validate()?;
    let dim = gen_theta.latent_dim();
    let mut trace = DpoTrace::default();
    for _ in 0..cfg.steps {
        let mut tape = Tape::with_capacity(gen_theta.params.len() * 6 * cfg.minibatch);
        let p = tape.vars(gen_theta.params.values());
        let mut losses = Vec::with_capacity(cfg.minibatch);
        let mut margin = 0.0;
        for _ in 0..cfg.minibatch {
            let pair = &pairs[rng.below(pairs.len())];
            let draw = PairDraw::sample(schedule, dim, rng);
            let m = inner_margin_on(&mut tape, &p, gen_theta, gen_ref, pair, schedule, &draw)?;
            margin -= cfg.weight_const * tape.value(m);
            let z = tape.scale(m, cfg.weight_const);
            losses.push(softplus_on(&mut tape, z));
        }
        let s = tape.sum(&losses);
        let mean = tape.scale(s, 1.0 / losses.len() as f64);
        let g = tape.gradient(mean, &p)?;
        trace.losses.push(tape.value(mean));
        trace.margins.push(margin / losses.len() as f64);
        gen_theta.params.descend(&g, cfg.learning_rate);
    }
    Ok(trace)
}
