//! Noise-prediction network for the toy latent generator.
//!
//! `ε_θ(x_t, t) = g_t·x_t + W₂·tanh(W₁[x_t; t/T] + b₁) + b₂`
//!
//! The per-timestep gain `g_t` starts at `√(1−ᾱ_t)`, which is the exact
//! noise predictor when the data are standard normal, so a fresh generator
//! already samples `N(0, I)` latents. The tanh branch starts small and is
//! what preference finetuning moves.

use serde::{Deserialize, Serialize};

use super::diffusion::DiffusionSchedule;
use crate::numkit::{LayoutBuilder, NumError, ParamVector, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub timesteps: usize,
    pub out_init_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_dim: 32,
            timesteps: 50,
            out_init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    gain: usize,
}

#[derive(Debug, Clone)]
pub struct ToyGenerator {
    pub config: GenConfig,
    pub params: ParamVector,
    offsets: Offsets,
}

fn layout(cfg: &GenConfig) -> (ParamVector, Offsets) {
    let (d, h) = (cfg.latent_dim, cfg.hidden_dim);
    let mut b = LayoutBuilder::new();
    let offsets = Offsets {
        w1: b.add("w1", &[h, d + 1]),
        b1: b.add("b1", &[h]),
        w2: b.add("w2", &[d, h]),
        b2: b.add("b2", &[d]),
        gain: b.add("gain", &[cfg.timesteps]),
    };
    (b.finish(), offsets)
}

impl ToyGenerator {
    pub fn new(config: GenConfig, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Self, NumError> {
        if schedule.len() != config.timesteps {
            return Err(NumError::Layout(format!(
                "generator expects {} timesteps, schedule has {}",
                config.timesteps,
                schedule.len()
            )));
        }
        let (mut params, o) = layout(&config);
        let (d, h) = (config.latent_dim, config.hidden_dim);
        let v = params.values_mut();
        let s1 = 1.0 / ((d + 1) as f64).sqrt();
        for x in &mut v[o.w1..o.w1 + h * (d + 1)] {
            *x = s1 * rng.normal();
        }
        for x in &mut v[o.w2..o.w2 + d * h] {
            *x = config.out_init_scale * rng.normal();
        }
        for t in 0..config.timesteps {
            v[o.gain + t] = (1.0 - schedule.alpha_bar(t)).sqrt();
        }
        Ok(Self {
            config,
            params,
            offsets: o,
        })
    }

    /// All parameters zero; predicts the zero vector everywhere.
    pub fn zeros(config: GenConfig) -> Self {
        let (params, offsets) = layout(&config);
        Self {
            config,
            params,
            offsets,
        }
    }

    pub fn from_params(config: GenConfig, params: ParamVector) -> Result<Self, NumError> {
        let (fresh, offsets) = layout(&config);
        if !fresh.same_layout(&params) {
            return Err(NumError::Layout("parameter layout does not match generator config".into()));
        }
        Ok(Self {
            config,
            params,
            offsets,
        })
    }

    pub fn with_params(&self, params: ParamVector) -> ToyGenerator {
        ToyGenerator {
            config: self.config.clone(),
            params,
            offsets: self.offsets,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check(&self, x_t: &[f64], t: usize) -> Result<(), NumError> {
        if x_t.len() != self.config.latent_dim {
            return Err(NumError::Layout(format!(
                "latent has {} entries, generator expects {}",
                x_t.len(),
                self.config.latent_dim
            )));
        }
        if t >= self.config.timesteps {
            return Err(NumError::Layout(format!("timestep {t} outside 0..{}", self.config.timesteps)));
        }
        Ok(())
    }

    fn input(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        let mut z = x_t.to_vec();
        z.push(t as f64 / self.config.timesteps as f64);
        z
    }

    /// Noise prediction recorded on `tape` with parameters `p`.
    pub fn predict_noise_on(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &[f64],
        t: usize,
    ) -> Result<Vec<Var>, NumError> {
        self.check(x_t, t)?;
        let o = self.offsets;
        let (d, h) = (self.config.latent_dim, self.config.hidden_dim);
        let mut z = self.input(x_t, t);
        z.push(1.0);
        let hidden: Vec<Var> = (0..h)
            .map(|j| {
                let mut row = p[o.w1 + j * (d + 1)..o.w1 + (j + 1) * (d + 1)].to_vec();
                row.push(p[o.b1 + j]);
                let pre = tape.lincomb(&row, &z);
                tape.tanh(pre)
            })
            .collect();
        Ok((0..d)
            .map(|i| {
                let net = tape.dot(&p[o.w2 + i * h..o.w2 + (i + 1) * h], &hidden);
                let net = tape.add(net, p[o.b2 + i]);
                let skip = tape.scale(p[o.gain + t], x_t[i]);
                tape.add(net, skip)
            })
            .collect())
    }

    /// Plain-number noise prediction.
    pub fn predict_noise(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>, NumError> {
        self.check(x_t, t)?;
        let o = self.offsets;
        let (d, h) = (self.config.latent_dim, self.config.hidden_dim);
        let v = self.params.values();
        let z = self.input(x_t, t);
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &v[o.w1 + j * (d + 1)..o.w1 + (j + 1) * (d + 1)];
                let s: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                (s + v[o.b1 + j]).tanh()
            })
            .collect();
        Ok((0..d)
            .map(|i| {
                let row = &v[o.w2 + i * h..o.w2 + (i + 1) * h];
                let s: f64 = row.iter().zip(&hidden).map(|(a, b)| a * b).sum();
                s + v[o.b2 + i] + v[o.gain + t] * x_t[i]
            })
            .collect())
    }

    /// Ancestral sampling from pure noise with `σ_t² = β_t`.
    pub fn generate(&self, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Vec<f64>, NumError> {
        let mut x = rng.normals(self.config.latent_dim);
        for t in (0..schedule.len()).rev() {
            let eps = self.predict_noise(&x, t)?;
            let beta = schedule.betas[t];
            let alpha = 1.0 - beta;
            let c = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
            let sigma = beta.sqrt();
            for (xi, ei) in x.iter_mut().zip(&eps) {
                *xi = (*xi - c * ei) / alpha.sqrt();
            }
            if t > 0 {
                for xi in x.iter_mut() {
                    *xi += sigma * rng.normal();
                }
            }
        }
        Ok(x)
    }

    /// Denoising regression `‖ε − ε_θ(x_t, t)‖²` on the tape.
    pub fn denoising_loss_on(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &[f64],
        t: usize,
        eps: &[f64],
    ) -> Result<Var, NumError> {
        let pred = self.predict_noise_on(tape, p, x_t, t)?;
        let sq: Vec<Var> = pred
            .iter()
            .zip(eps)
            .map(|(&e_hat, &e)| {
                let diff = tape.add_const(e_hat, -e);
                tape.square(diff)
            })
            .collect();
        Ok(tape.sum(&sq))
    }

    /// Plain gradient descent on the denoising objective over `data`.
    /// Returns the mean loss of each step.
    pub fn fit_denoising(
        &mut self,
        data: &[Vec<f64>],
        schedule: &DiffusionSchedule,
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut Rng,
    ) -> Result<Vec<f64>, NumError> {
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut tape = Tape::with_capacity(self.params.len() * 4);
            let p = tape.vars(self.params.values());
            let mut losses = Vec::with_capacity(batch);
            for _ in 0..batch.max(1) {
                let x0 = &data[rng.below(data.len())];
                let t = rng.below(schedule.len());
                let (x_t, eps) = super::diffusion::noise(schedule, x0, t, rng)?;
                losses.push(self.denoising_loss_on(&mut tape, &p, &x_t, t, &eps)?);
            }
            let total = tape.sum(&losses);
            let mean = tape.scale(total, 1.0 / losses.len() as f64);
            let g = tape.gradient(mean, &p)?;
            trace.push(tape.value(mean));
            self.params.descend(&g, lr);
        }
        Ok(trace)
    }
}
