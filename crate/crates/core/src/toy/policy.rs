//! Order-sensitive toy policy.
//!
//! Frames are embedded one at a time, then pooled with per-position weights
//! `1/T + P[t]`. The pooled terms are summed in sorted order, so with `P = 0`
//! every output depends only on the multiset of frames and is exactly
//! invariant to frame order. A tanh hidden layer feeds the heads:
//!
//! * score heads: 21 bins over `[0, 1]`, logits `κ·c·(2m − c)` with a learned
//!   centre `m` and sharpness `κ = exp(s)`;
//! * choice head: one quality logit per video plus a presentation bias on A;
//! * yes/no head per question;
//! * length head over fixed token-length buckets;
//! * format head: well-formed vs malformed.
//!
//! A completion's likelihood is `p(format)·p(answer)·p(length bucket)`; the
//! think filler is deterministic and carries no probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Query, SyntheticVideo, Visual};
use crate::numkit::{LayoutBuilder, NumError, ParamVector, Rng, Tape, Var};
use crate::reward::{
    parse_completion, parse_payload, render_payload, token_count, Choice, Completion, GroundTruth, PairLabel, Payload,
    TaskKind, YesNo, MULTIDIM_M,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("query for task {0} does not carry the visual it needs")]
    VisualMismatch(TaskKind),
    #[error("question {0} out of range")]
    UnknownQuestion(usize),
    #[error("completion does not match the sampling template: {0}")]
    TemplateMismatch(String),
    #[error("frame dimension {got}, policy expects {want}")]
    FrameDim { got: usize, want: usize },
    #[error("{got} frames exceed the {max} position embeddings")]
    TooManyFrames { got: usize, max: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub frame_dim: usize,
    pub prompt_dim: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub max_frames: usize,
    pub score_bins: usize,
    /// Exact token length emitted for each length bucket.
    pub length_buckets: Vec<usize>,
    pub n_questions: usize,
    /// Initial probability of a malformed completion.
    pub malformed_rate: f64,
    /// Initial score-head sharpness `κ`.
    pub init_sharpness: f64,
    pub pos_init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            prompt_dim: 4,
            proj_dim: 16,
            hidden_dim: 24,
            max_frames: 8,
            score_bins: 21,
            length_buckets: (0..12).map(|k| 32 + 64 * k).collect(),
            n_questions: 2,
            malformed_rate: 0.05,
            init_sharpness: 1.0,
            pos_init_scale: 0.05,
        }
    }
}

/// Score heads: 0 scores images and natural videos; 1..=3 are the
/// spatial, temporal and alignment dimensions.
const N_SCORE_HEADS: usize = 1 + MULTIDIM_M;

/// Number of malformed renderings the template can emit.
pub const MALFORMED_VARIANTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatOutcome {
    WellFormed,
    /// 0: missing `</think>`; 1: answer before think; 2: doubled `</think>`.
    Malformed(usize),
}

/// The categorical draws behind one completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Action {
    pub format: FormatOutcome,
    /// One index per answer factor (three for multi-dimension scores).
    pub answer: Vec<usize>,
    pub bucket: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    frame_w: usize,
    frame_b: usize,
    pos: usize,
    hidden_w: usize,
    hidden_b: usize,
    score_w: [usize; N_SCORE_HEADS],
    score_b: [usize; N_SCORE_HEADS],
    score_sharp: [usize; N_SCORE_HEADS],
    choice_w: usize,
    choice_order: usize,
    yesno_w: usize,
    yesno_b: usize,
    length_w: usize,
    length_b: usize,
    format_logit: usize,
}

/// Policy architecture plus its current parameters.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub config: PolicyConfig,
    pub params: ParamVector,
    offsets: Offsets,
}

/// Log-probabilities of every head for one query.
#[derive(Debug, Clone)]
pub struct HeadLogProbs<T> {
    pub answer: Vec<Vec<T>>,
    pub length: Vec<T>,
    /// `[well-formed, malformed]`.
    pub format: Vec<T>,
}

impl HeadLogProbs<Var> {
    pub fn values(&self, tape: &Tape) -> HeadLogProbs<f64> {
        HeadLogProbs {
            answer: self.answer.iter().map(|g| tape.values_of(g)).collect(),
            length: tape.values_of(&self.length),
            format: tape.values_of(&self.format),
        }
    }
}

impl HeadLogProbs<f64> {
    pub fn answer_logp(&self, answer: &[usize]) -> f64 {
        self.answer.iter().zip(answer).map(|(g, &a)| g[a]).sum()
    }

    pub fn action_logp(&self, action: &Action) -> f64 {
        let fmt = match action.format {
            FormatOutcome::WellFormed => self.format[0],
            FormatOutcome::Malformed(_) => self.format[1] - (MALFORMED_VARIANTS as f64).ln(),
        };
        fmt + self.answer_logp(&action.answer) + self.length[action.bucket]
    }
}

fn layout(cfg: &PolicyConfig) -> (ParamVector, Offsets) {
    let (d, k, h) = (cfg.frame_dim, cfg.proj_dim, cfg.hidden_dim);
    let mut b = LayoutBuilder::new();
    let frame_w = b.add("frame.w", &[k, d]);
    let frame_b = b.add("frame.b", &[k]);
    let pos = b.add("pos", &[cfg.max_frames, k]);
    let hidden_w = b.add("hidden.w", &[h, k + cfg.prompt_dim]);
    let hidden_b = b.add("hidden.b", &[h]);
    let mut score_w = [0; N_SCORE_HEADS];
    let mut score_b = [0; N_SCORE_HEADS];
    let mut score_sharp = [0; N_SCORE_HEADS];
    for i in 0..N_SCORE_HEADS {
        score_w[i] = b.add(&format!("score{i}.w"), &[h]);
        score_b[i] = b.add(&format!("score{i}.b"), &[1]);
        score_sharp[i] = b.add(&format!("score{i}.sharp"), &[1]);
    }
    let choice_w = b.add("choice.w", &[h]);
    let choice_order = b.add("choice.order", &[1]);
    let yesno_w = b.add("yesno.w", &[cfg.n_questions, h]);
    let yesno_b = b.add("yesno.b", &[cfg.n_questions]);
    let length_w = b.add("length.w", &[cfg.length_buckets.len(), h]);
    let length_b = b.add("length.b", &[cfg.length_buckets.len()]);
    let format_logit = b.add("format.logit", &[1]);
    let offsets = Offsets {
        frame_w,
        frame_b,
        pos,
        hidden_w,
        hidden_b,
        score_w,
        score_b,
        score_sharp,
        choice_w,
        choice_order,
        yesno_w,
        yesno_b,
        length_w,
        length_b,
        format_logit,
    };
    (b.finish(), offsets)
}

const FILLER: [&str; 12] = [
    "frame", "motion", "texture", "edges", "lighting", "flicker", "subject", "background",
    "colour", "blur", "noise", "consistency",
];

fn filler(n: usize) -> String {
    (0..n).map(|i| FILLER[i % FILLER.len()]).collect::<Vec<_>>().join(" ")
}

impl ToyPolicy {
    /// Fresh policy with seeded random weights. Length head and
    /// presentation bias start at zero.
    pub fn new(config: PolicyConfig, rng: &mut Rng) -> Self {
        let (mut params, offsets) = layout(&config);
        let (d, k, h) = (config.frame_dim, config.proj_dim, config.hidden_dim);
        {
            let v = params.values_mut();
            let mut fill = |off: usize, n: usize, scale: f64, rng: &mut Rng| {
                for x in &mut v[off..off + n] {
                    *x = scale * rng.normal();
                }
            };
            fill(offsets.frame_w, k * d, 1.0 / (d as f64).sqrt(), rng);
            fill(offsets.pos, config.max_frames * k, config.pos_init_scale, rng);
            fill(offsets.hidden_w, h * (k + config.prompt_dim), 1.0 / ((k + config.prompt_dim) as f64).sqrt(), rng);
            for i in 0..N_SCORE_HEADS {
                fill(offsets.score_w[i], h, 0.1 / (h as f64).sqrt(), rng);
            }
            fill(offsets.choice_w, h, 0.1 / (h as f64).sqrt(), rng);
            fill(offsets.yesno_w, config.n_questions * h, 0.1 / (h as f64).sqrt(), rng);
        }
        let v = params.values_mut();
        for i in 0..N_SCORE_HEADS {
            v[offsets.score_b[i]] = 0.5;
            v[offsets.score_sharp[i]] = config.init_sharpness.ln();
        }
        let p = config.malformed_rate.clamp(1e-6, 1.0 - 1e-6);
        v[offsets.format_logit] = (p / (1.0 - p)).ln();
        Self {
            config,
            params,
            offsets,
        }
    }

    /// Rebuilds a policy around stored parameters.
    pub fn from_params(config: PolicyConfig, params: ParamVector) -> Result<Self, PolicyError> {
        let (fresh, offsets) = layout(&config);
        if !fresh.same_layout(&params) {
            return Err(NumError::Layout("parameter layout does not match policy config".into()).into());
        }
        Ok(Self {
            config,
            params,
            offsets,
        })
    }

    pub fn with_params(&self, params: ParamVector) -> ToyPolicy {
        ToyPolicy {
            config: self.config.clone(),
            params,
            offsets: self.offsets.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        bin as f64 / (self.config.score_bins - 1) as f64
    }

    /// Zeroes the position embeddings, making every output order-invariant.
    pub fn clear_position_embeddings(&mut self) {
        let n = self.config.max_frames * self.config.proj_dim;
        let off = self.offsets.pos;
        self.params.values_mut()[off..off + n].fill(0.0);
    }

    fn check_frames(&self, frames: &[Vec<f64>]) -> Result<(), PolicyError> {
        if frames.len() > self.config.max_frames {
            return Err(PolicyError::TooManyFrames {
                got: frames.len(),
                max: self.config.max_frames,
            });
        }
        for f in frames {
            if f.len() != self.config.frame_dim {
                return Err(PolicyError::FrameDim {
                    got: f.len(),
                    want: self.config.frame_dim,
                });
            }
        }
        Ok(())
    }

    pub fn check_query(&self, q: &Query) -> Result<(), PolicyError> {
        match (&q.visual, q.task) {
            (Visual::Image(f), TaskKind::ImageScore) => self.check_frames(std::slice::from_ref(f)),
            (Visual::Video(v), TaskKind::NaturalVideoScore | TaskKind::VideoMultidim) => {
                self.check_frames(&v.frames)
            }
            (Visual::Video(v), TaskKind::Vqa) => {
                if q.question >= self.config.n_questions {
                    return Err(PolicyError::UnknownQuestion(q.question));
                }
                self.check_frames(&v.frames)
            }
            (Visual::Pair(a, b), TaskKind::Pair) => {
                self.check_frames(&a.frames)?;
                self.check_frames(&b.frames)
            }
            _ => Err(PolicyError::VisualMismatch(q.task)),
        }
    }

    fn encode(&self, tape: &mut Tape, p: &[Var], frames: &[&[f64]], prompt: &[f64]) -> Vec<Var> {
        let cfg = &self.config;
        let o = &self.offsets;
        let (d, k) = (cfg.frame_dim, cfg.proj_dim);
        let mut ones = vec![0.0; d + 1];
        // y[t][j] = tanh(W_f[j]·f_t + b_f[j])
        let embedded: Vec<Vec<Var>> = frames
            .iter()
            .map(|f| {
                ones[..d].copy_from_slice(f);
                ones[d] = 1.0;
                (0..k)
                    .map(|j| {
                        let mut row: Vec<Var> = p[o.frame_w + j * d..o.frame_w + (j + 1) * d].to_vec();
                        row.push(p[o.frame_b + j]);
                        let pre = tape.lincomb(&row, &ones);
                        tape.tanh(pre)
                    })
                    .collect()
            })
            .collect();
        let pooled: Vec<Var> = if embedded.len() == 1 {
            embedded[0].clone()
        } else {
            let inv_t = 1.0 / embedded.len() as f64;
            (0..k)
                .map(|j| {
                    let mut terms: Vec<Var> = embedded
                        .iter()
                        .enumerate()
                        .map(|(t, y)| {
                            let w = tape.add_const(p[o.pos + t * k + j], inv_t);
                            tape.mul(w, y[j])
                        })
                        .collect();
                    terms.sort_by(|a, b| tape.value(*a).total_cmp(&tape.value(*b)));
                    tape.sum(&terms)
                })
                .collect()
        };
        let width = k + cfg.prompt_dim;
        (0..cfg.hidden_dim)
            .map(|j| {
                let row = &p[o.hidden_w + j * width..o.hidden_w + (j + 1) * width];
                let a = tape.dot(&row[..k], &pooled);
                let mut coeffs = prompt.to_vec();
                coeffs.resize(cfg.prompt_dim, 0.0);
                coeffs.push(1.0);
                let mut vars = row[k..].to_vec();
                vars.push(p[o.hidden_b + j]);
                let b = tape.lincomb(&vars, &coeffs);
                let s = tape.add(a, b);
                tape.tanh(s)
            })
            .collect()
    }

    fn encode_video(&self, tape: &mut Tape, p: &[Var], v: &SyntheticVideo) -> Vec<Var> {
        let frames: Vec<&[f64]> = v.frames.iter().map(Vec::as_slice).collect();
        self.encode(tape, p, &frames, &v.prompt_features)
    }

    fn score_logits(&self, tape: &mut Tape, p: &[Var], head: usize, h: &[Var]) -> Vec<Var> {
        let o = &self.offsets;
        let hd = self.config.hidden_dim;
        let wm = tape.dot(&p[o.score_w[head]..o.score_w[head] + hd], h);
        let m = tape.add(wm, p[o.score_b[head]]);
        let two_m = tape.scale(m, 2.0);
        let kappa = tape.exp(p[o.score_sharp[head]]);
        (0..self.config.score_bins)
            .map(|b| {
                let c = self.bin_center(b);
                let t = tape.add_const(two_m, -c);
                let u = tape.mul(kappa, t);
                tape.scale(u, c)
            })
            .collect()
    }

    fn choice_logit(&self, tape: &mut Tape, p: &[Var], h: &[Var]) -> Var {
        let o = &self.offsets;
        tape.dot(&p[o.choice_w..o.choice_w + self.config.hidden_dim], h)
    }

    /// Log-probabilities of all heads, recorded on `tape`.
    pub fn head_log_probs(
        &self,
        tape: &mut Tape,
        p: &[Var],
        q: &Query,
    ) -> Result<HeadLogProbs<Var>, PolicyError> {
        self.check_query(q)?;
        let o = &self.offsets;
        let hd = self.config.hidden_dim;
        let (answer, h) = match (&q.visual, q.task) {
            (Visual::Image(f), TaskKind::ImageScore) => {
                let h = self.encode(tape, p, &[f.as_slice()], &[]);
                let l = self.score_logits(tape, p, 0, &h);
                (vec![tape.log_softmax(&l)], h)
            }
            (Visual::Video(v), TaskKind::NaturalVideoScore) => {
                let h = self.encode_video(tape, p, v);
                let l = self.score_logits(tape, p, 0, &h);
                (vec![tape.log_softmax(&l)], h)
            }
            (Visual::Video(v), TaskKind::VideoMultidim) => {
                let h = self.encode_video(tape, p, v);
                let groups = (1..=MULTIDIM_M)
                    .map(|head| {
                        let l = self.score_logits(tape, p, head, &h);
                        tape.log_softmax(&l)
                    })
                    .collect();
                (groups, h)
            }
            (Visual::Video(v), TaskKind::Vqa) => {
                let h = self.encode_video(tape, p, v);
                let qi = q.question;
                let w = &p[o.yesno_w + qi * hd..o.yesno_w + (qi + 1) * hd];
                let yes = tape.dot(w, &h);
                let yes = tape.add(yes, p[o.yesno_b + qi]);
                let no = tape.constant(0.0);
                (vec![tape.log_softmax(&[yes, no])], h)
            }
            (Visual::Pair(a, b), TaskKind::Pair) => {
                let ha = self.encode_video(tape, p, a);
                let hb = self.encode_video(tape, p, b);
                let ga = self.choice_logit(tape, p, &ha);
                let ga = tape.add(ga, p[o.choice_order]);
                let gb = self.choice_logit(tape, p, &hb);
                let h = ha
                    .iter()
                    .zip(&hb)
                    .map(|(&x, &y)| {
                        let s = tape.add(x, y);
                        tape.scale(s, 0.5)
                    })
                    .collect();
                (vec![tape.log_softmax(&[ga, gb])], h)
            }
            _ => return Err(PolicyError::VisualMismatch(q.task)),
        };
        let n_len = self.config.length_buckets.len();
        let len_logits: Vec<Var> = (0..n_len)
            .map(|i| {
                let w = &p[o.length_w + i * hd..o.length_w + (i + 1) * hd];
                let z = tape.dot(w, &h);
                tape.add(z, p[o.length_b + i])
            })
            .collect();
        let length = tape.log_softmax(&len_logits);
        let zero = tape.constant(0.0);
        let format = tape.log_softmax(&[zero, p[o.format_logit]]);
        Ok(HeadLogProbs { answer, length, format })
    }

    /// Head log-probabilities as plain numbers.
    pub fn distribution(&self, q: &Query) -> Result<HeadLogProbs<f64>, PolicyError> {
        let mut tape = Tape::with_capacity(self.params.len() * 3);
        let p = tape.vars(self.params.values());
        let heads = self.head_log_probs(&mut tape, &p, q)?;
        Ok(heads.values(&tape))
    }

    /// Latent quality the choice head assigns to one video.
    pub fn quality_logit(&self, v: &SyntheticVideo) -> Result<f64, PolicyError> {
        self.check_frames(&v.frames)?;
        let mut tape = Tape::with_capacity(self.params.len() * 2);
        let p = tape.vars(self.params.values());
        let h = self.encode_video(&mut tape, &p, v);
        let g = self.choice_logit(&mut tape, &p, &h);
        Ok(tape.value(g))
    }

    /// Log-probability of `action` on a recorded head.
    pub fn action_log_prob(tape: &mut Tape, heads: &HeadLogProbs<Var>, action: &Action) -> Var {
        let mut parts: Vec<Var> = heads
            .answer
            .iter()
            .zip(&action.answer)
            .map(|(g, &a)| g[a])
            .collect();
        parts.push(heads.length[action.bucket]);
        match action.format {
            FormatOutcome::WellFormed => parts.push(heads.format[0]),
            FormatOutcome::Malformed(_) => {
                let lp = tape.add_const(heads.format[1], -(MALFORMED_VARIANTS as f64).ln());
                parts.push(lp);
            }
        }
        tape.sum(&parts)
    }

    pub fn answer_payload(&self, task: TaskKind, answer: &[usize]) -> Payload {
        match task {
            TaskKind::ImageScore | TaskKind::NaturalVideoScore => Payload::Score(self.bin_center(answer[0])),
            TaskKind::VideoMultidim => {
                Payload::MultiScore(answer.iter().map(|&b| self.bin_center(b)).collect())
            }
            TaskKind::Pair => Payload::Choice(if answer[0] == 0 { Choice::A } else { Choice::B }),
            TaskKind::Vqa => Payload::YesNo(if answer[0] == 0 { YesNo::Yes } else { YesNo::No }),
        }
    }

    fn payload_answer(&self, payload: &Payload) -> Result<Vec<usize>, PolicyError> {
        let to_bin = |s: f64| -> Result<usize, PolicyError> {
            let b = (s * (self.config.score_bins - 1) as f64).round() as usize;
            if (self.bin_center(b) - s).abs() > 1e-9 {
                return Err(PolicyError::TemplateMismatch(format!("score {s} is not a bin centre")));
            }
            Ok(b)
        };
        Ok(match payload {
            Payload::Score(s) => vec![to_bin(*s)?],
            Payload::MultiScore(v) => v.iter().map(|&s| to_bin(s)).collect::<Result<_, _>>()?,
            Payload::Choice(Choice::A) => vec![0],
            Payload::Choice(Choice::B) => vec![1],
            Payload::YesNo(YesNo::Yes) => vec![0],
            Payload::YesNo(YesNo::No) => vec![1],
        })
    }

    /// Answer indices of a reference label: scores snap to the nearest bin.
    /// Ties have no answer.
    pub fn truth_answer(&self, truth: &GroundTruth) -> Option<Vec<usize>> {
        let bin = |s: f64| (s.clamp(0.0, 1.0) * (self.config.score_bins - 1) as f64).round() as usize;
        match truth {
            GroundTruth::Score(s) => Some(vec![bin(*s)]),
            GroundTruth::MultiScore(v) => Some(v.iter().map(|&s| bin(s)).collect()),
            GroundTruth::Pair(PairLabel::A) => Some(vec![0]),
            GroundTruth::Pair(PairLabel::B) => Some(vec![1]),
            GroundTruth::Pair(PairLabel::Tie) => None,
            GroundTruth::YesNo(YesNo::Yes) => Some(vec![0]),
            GroundTruth::YesNo(YesNo::No) => Some(vec![1]),
        }
    }

    /// Renders the text for an action with exactly the bucket's token length.
    pub fn render_action(&self, task: TaskKind, action: &Action) -> String {
        let body = render_payload(&self.answer_payload(task, &action.answer));
        let extra = token_count(&body).saturating_sub(1);
        let len = self.config.length_buckets[action.bucket];
        let think = filler(len.saturating_sub(extra).max(1));
        match action.format {
            FormatOutcome::WellFormed => format!("<think>{think}</think><answer>{body}</answer>"),
            FormatOutcome::Malformed(0) => format!("<think>{think}<answer>{body}</answer>"),
            FormatOutcome::Malformed(1) => format!("<answer>{body}</answer><think>{think}</think>"),
            FormatOutcome::Malformed(_) => {
                format!("<think>{think}</think></think><answer>{body}</answer>")
            }
        }
    }

    /// Recovers the draws behind a completion produced by [`Self::render_action`].
    pub fn decode_action(&self, task: TaskKind, raw_text: &str) -> Result<Action, PolicyError> {
        let len = token_count(raw_text);
        let bucket = self
            .config
            .length_buckets
            .iter()
            .position(|&l| l == len)
            .ok_or_else(|| PolicyError::TemplateMismatch(format!("length {len} is not a bucket")))?;
        let text = raw_text.trim();
        let format = if parse_completion(text, task).is_ok() {
            FormatOutcome::WellFormed
        } else if text.starts_with("<answer>") {
            FormatOutcome::Malformed(1)
        } else if text.contains("</think></think>") {
            FormatOutcome::Malformed(2)
        } else if !text.contains("</think>") {
            FormatOutcome::Malformed(0)
        } else {
            return Err(PolicyError::TemplateMismatch("unrecognized malformed layout".into()));
        };
        let start = text
            .find("<answer>")
            .ok_or_else(|| PolicyError::TemplateMismatch("no answer block".into()))?
            + "<answer>".len();
        let end = text[start..]
            .find("</answer>")
            .ok_or_else(|| PolicyError::TemplateMismatch("unterminated answer".into()))?
            + start;
        let payload = parse_payload(text[start..end].trim(), task)
            .map_err(|m| PolicyError::TemplateMismatch(m.to_string()))?;
        let answer = self.payload_answer(&payload)?;
        Ok(Action { format, answer, bucket })
    }

    /// Draws an action from precomputed head log-probabilities.
    pub fn sample_action(heads: &HeadLogProbs<f64>, rng: &mut Rng) -> Action {
        let probs = |lp: &[f64]| lp.iter().map(|l| l.exp()).collect::<Vec<_>>();
        let format = if rng.categorical(&probs(&heads.format)) == 0 {
            FormatOutcome::WellFormed
        } else {
            FormatOutcome::Malformed(rng.below(MALFORMED_VARIANTS))
        };
        let answer = heads.answer.iter().map(|g| rng.categorical(&probs(g))).collect();
        let bucket = rng.categorical(&probs(&heads.length));
        Action { format, answer, bucket }
    }

    /// Samples one completion; returns it with its log-probability.
    pub fn sample(&self, q: &Query, rng: &mut Rng) -> Result<(Completion, f64), PolicyError> {
        let heads = self.distribution(q)?;
        let action = Self::sample_action(&heads, rng);
        let lp = heads.action_logp(&action);
        Ok((Completion::new(self.render_action(q.task, &action), q.task), lp))
    }

    /// Log-probability of a recorded completion under the current parameters.
    pub fn log_prob(&self, q: &Query, c: &Completion) -> Result<f64, PolicyError> {
        let action = self.decode_action(q.task, &c.raw_text)?;
        Ok(self.distribution(q)?.action_logp(&action))
    }

    /// Every action with its log-probability. Exponential in the number of
    /// answer factors; meant for tests on small heads.
    pub fn enumerate_actions(&self, q: &Query) -> Result<Vec<(Action, f64)>, PolicyError> {
        let heads = self.distribution(q)?;
        let mut answers: Vec<Vec<usize>> = vec![vec![]];
        for g in &heads.answer {
            answers = answers
                .into_iter()
                .flat_map(|prefix| {
                    (0..g.len()).map(move |a| {
                        let mut v = prefix.clone();
                        v.push(a);
                        v
                    })
                })
                .collect();
        }
        let mut formats = vec![FormatOutcome::WellFormed];
        formats.extend((0..MALFORMED_VARIANTS).map(FormatOutcome::Malformed));
        let mut out = Vec::new();
        for format in &formats {
            for answer in &answers {
                for bucket in 0..heads.length.len() {
                    let a = Action {
                        format: *format,
                        answer: answer.clone(),
                        bucket,
                    };
                    let lp = heads.action_logp(&a);
                    out.push((a, lp));
                }
            }
        }
        Ok(out)
    }

    /// Mean of the score distribution for score tasks, per factor.
    pub fn expected_scores(&self, q: &Query) -> Result<Vec<f64>, PolicyError> {
        let heads = self.distribution(q)?;
        Ok(heads
            .answer
            .iter()
            .map(|g| g.iter().enumerate().map(|(b, l)| l.exp() * self.bin_center(b)).sum())
            .collect())
    }

    /// Answer drawn from the task head alone (no format or length draw).
    pub fn sample_answer(&self, q: &Query, rng: &mut Rng) -> Result<Payload, PolicyError> {
        let heads = self.distribution(q)?;
        let answer: Vec<usize> = heads
            .answer
            .iter()
            .map(|g| rng.categorical(&g.iter().map(|l| l.exp()).collect::<Vec<_>>()))
            .collect();
        Ok(self.answer_payload(q.task, &answer))
    }

    /// Most probable answer from the task head; ties go to the lower index.
    pub fn greedy_answer(&self, q: &Query) -> Result<Payload, PolicyError> {
        let heads = self.distribution(q)?;
        let answer: Vec<usize> = heads
            .answer
            .iter()
            .map(|g| {
                let mut best = 0;
                for (i, &l) in g.iter().enumerate() {
                    if l > g[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        Ok(self.answer_payload(q.task, &answer))
    }
}

/// Task-head log-probabilities with frames in order and under shuffles.
#[derive(Debug, Clone)]
pub struct ShuffleProbe {
    pub ordered: HeadLogProbs<f64>,
    pub shuffled: Vec<HeadLogProbs<f64>>,
}

impl ShuffleProbe {
    /// `n_shuffles` uniform non-identity frame permutations.
    pub fn run(
        policy: &ToyPolicy,
        q: &Query,
        ordered: Option<HeadLogProbs<f64>>,
        rng: &mut Rng,
        n_shuffles: usize,
    ) -> Result<ShuffleProbe, PolicyError> {
        let v = q.video().ok_or(PolicyError::VisualMismatch(q.task))?;
        let ordered = match ordered {
            Some(o) => o,
            None => policy.distribution(q)?,
        };
        let t = v.num_frames();
        let mut shuffled = Vec::with_capacity(n_shuffles);
        for _ in 0..n_shuffles.max(1) {
            let perm = if t >= 2 {
                rng.non_identity_permutation(t)
            } else {
                (0..t).collect()
            };
            let sq = q.with_frame_order(&perm).expect("single-video query");
            shuffled.push(policy.distribution(&sq)?);
        }
        Ok(ShuffleProbe { ordered, shuffled })
    }

    /// `(w_seq, w_rand)` for one answer.
    pub fn probabilities(&self, answer: &[usize]) -> (f64, f64) {
        let w_seq = self.ordered.answer_logp(answer).exp();
        let w_rand = self
            .shuffled
            .iter()
            .map(|h| h.answer_logp(answer).exp())
            .sum::<f64>()
            / self.shuffled.len() as f64;
        (w_seq, w_rand)
    }
}

/// Probability of `answer` with frames in order, and its mean over
/// `n_shuffles` random non-identity frame permutations.
pub fn answer_prob_sequential_vs_shuffled(
    policy: &ToyPolicy,
    q: &Query,
    answer: &Payload,
    rng: &mut Rng,
    n_shuffles: usize,
) -> Result<(f64, f64), PolicyError> {
    let idx = policy.payload_answer(answer)?;
    let probe = ShuffleProbe::run(policy, q, None, rng, n_shuffles)?;
    Ok(probe.probabilities(&idx))
}
