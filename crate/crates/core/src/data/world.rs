//! Synthetic benchmark with a hidden quality oracle.
//!
//! Content vectors `c ~ N(0, I)` determine spatial quality through a fixed
//! linear-plus-tanh map. A video moves its content steadily along a hidden
//! motion direction; an unreasonable video shows the same frames in a
//! scrambled order, which lowers its temporal quality. Human scores pass
//! through annotator profiles with their own offset, scale, and jitter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::records::{write_jsonl, AnnotationRecord, RecordPayload, Scale};
use super::DataError;
use crate::numkit::Rng;
use crate::reward::{PairLabel, YesNo};
use crate::toy::SyntheticVideo;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    /// Raw-scale shift.
    pub offset: f64,
    /// Multiplier on the unit-scale quality.
    pub scale: f64,
    /// Half-width of the uniform per-item jitter, in raw units.
    pub jitter: f64,
}

impl AnnotatorProfile {
    /// Jitter-free raw score for unit quality `q`.
    pub fn expected(&self, q: f64, s: Scale) -> f64 {
        s.min + (s.max - s.min) * self.scale * q + self.offset
    }

    pub fn rate(&self, q: f64, s: Scale, rng: &mut Rng) -> f64 {
        (self.expected(q, s) + self.jitter * rng.uniform_in(-1.0, 1.0)).clamp(s.min, s.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub frame_dim: usize,
    pub prompt_dim: usize,
    pub n_frames: usize,
    /// Content displacement per frame along the motion direction.
    pub speed: f64,
    pub frame_noise: f64,
    /// Oracle gap below which a pair is labelled a tie.
    pub pair_margin: f64,
    pub mos_scale: Scale,
    pub annotators: Vec<AnnotatorProfile>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            prompt_dim: 4,
            n_frames: 6,
            speed: 0.6,
            frame_noise: 0.05,
            pair_margin: 0.03,
            mos_scale: Scale::MOS5,
            annotators: vec![
                AnnotatorProfile { offset: 0.0, scale: 1.0, jitter: 0.05 },
                AnnotatorProfile { offset: 0.15, scale: 0.95, jitter: 0.05 },
                AnnotatorProfile { offset: -0.1, scale: 1.05, jitter: 0.05 },
            ],
        }
    }
}

/// Turns generator latents into videos. Shared by training and evaluation;
/// carries no quality information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub motion_dir: Vec<f64>,
    pub speed: f64,
    pub n_frames: usize,
    pub prompt_dim: usize,
}

impl Decoder {
    fn offset(&self, t: usize) -> f64 {
        (t as f64 - (self.n_frames as f64 - 1.0) / 2.0) * self.speed
    }

    /// Steady motion from content `x`, optionally with per-frame noise.
    pub fn render(&self, x: &[f64], noise: f64, rng: Option<&mut Rng>) -> Vec<Vec<f64>> {
        let mut frames: Vec<Vec<f64>> = (0..self.n_frames)
            .map(|t| x.iter().zip(&self.motion_dir).map(|(c, u)| c + self.offset(t) * u).collect())
            .collect();
        if let Some(rng) = rng {
            for f in &mut frames {
                for v in f.iter_mut() {
                    *v += noise * rng.normal();
                }
            }
        }
        frames
    }

    /// Video for a generated latent: reasonable motion, empty prompt.
    pub fn latent_video(&self, x: &[f64]) -> SyntheticVideo {
        SyntheticVideo {
            frames: self.render(x, 0.0, None),
            prompt_features: vec![0.0; self.prompt_dim],
        }
    }
}

/// Hidden quality weights. Only evaluation may read these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleWeights {
    pub spatial_lin: Vec<f64>,
    pub spatial_bend: Vec<f64>,
    pub temporal_content: Vec<f64>,
    pub align_content: Vec<f64>,
    pub align_prompt: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(rng: &mut Rng, n: usize, norm: f64) -> Vec<f64> {
    let v = rng.normals(n);
    let l = dot(&v, &v).sqrt();
    v.into_iter().map(|x| norm * x / l).collect()
}

impl OracleWeights {
    pub fn spatial(&self, c: &[f64]) -> f64 {
        sigmoid(1.2 * (dot(&self.spatial_lin, c) + 0.5 * dot(&self.spatial_bend, c).tanh()))
    }

    pub fn temporal(&self, c: &[f64], reasonable: bool) -> f64 {
        let s = if reasonable { 1.0 } else { -1.0 };
        sigmoid(1.5 * s + 0.5 * dot(&self.temporal_content, c))
    }

    pub fn alignment(&self, c: &[f64], prompt: &[f64]) -> f64 {
        sigmoid(1.5 * (dot(&self.align_content, c) + dot(&self.align_prompt, prompt)))
    }

    pub fn overall(&self, c: &[f64], reasonable: bool) -> f64 {
        0.6 * self.spatial(c) + 0.4 * self.temporal(c, reasonable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub decoder: Decoder,
    pub oracle: OracleWeights,
}

/// Hidden truth for one generated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub role: String,
    pub id: String,
    pub spatial: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    pub overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasonable: Option<bool>,
}

/// First line of an oracle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleHeader {
    pub role: String,
    pub weights: OracleWeights,
}

pub const ORACLE_ROLE: &str = "oracle";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Counts {
    pub image: usize,
    pub image_heldout: usize,
    pub natural_video: usize,
    pub multidim: usize,
    pub multidim_heldout: usize,
    pub pair: usize,
    pub pair_heldout: usize,
    pub pair_calibration: usize,
    pub vqa: usize,
    pub vqa_heldout: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            image: 700,
            image_heldout: 200,
            natural_video: 200,
            multidim: 300,
            multidim_heldout: 100,
            pair: 200,
            pair_heldout: 200,
            pair_calibration: 100,
            vqa: 100,
            vqa_heldout: 100,
        }
    }
}

impl Counts {
    pub fn zero() -> Self {
        Self {
            image: 0,
            image_heldout: 0,
            natural_video: 0,
            multidim: 0,
            multidim_heldout: 0,
            pair: 0,
            pair_heldout: 0,
            pair_calibration: 0,
            vqa: 0,
            vqa_heldout: 0,
        }
    }
}

/// Generated splits with their hidden truth.
#[derive(Debug, Clone, Default)]
pub struct Benchmark {
    pub image: Vec<AnnotationRecord>,
    pub image_heldout: Vec<AnnotationRecord>,
    pub natural_video: Vec<AnnotationRecord>,
    pub multidim: Vec<AnnotationRecord>,
    pub multidim_heldout: Vec<AnnotationRecord>,
    pub pair: Vec<AnnotationRecord>,
    pub pair_heldout: Vec<AnnotationRecord>,
    pub pair_calibration: Vec<AnnotationRecord>,
    pub vqa: Vec<AnnotationRecord>,
    pub vqa_heldout: Vec<AnnotationRecord>,
    pub oracle: Vec<OracleEntry>,
}

impl Benchmark {
    pub fn splits(&self) -> [(&'static str, &Vec<AnnotationRecord>); 10] {
        [
            ("image_score", &self.image),
            ("image_score_heldout", &self.image_heldout),
            ("natural_video_score", &self.natural_video),
            ("video_multidim", &self.multidim),
            ("video_multidim_heldout", &self.multidim_heldout),
            ("pair", &self.pair),
            ("pair_heldout", &self.pair_heldout),
            ("pair_calibration", &self.pair_calibration),
            ("vqa", &self.vqa),
            ("vqa_heldout", &self.vqa_heldout),
        ]
    }

    pub fn oracle_for(&self, id: &str) -> Option<&OracleEntry> {
        self.oracle.iter().find(|e| e.id == id)
    }
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig, rng: &mut Rng) -> Self {
        let d = config.frame_dim;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let oracle = OracleWeights {
            spatial_lin: unit(rng, d, 1.0),
            spatial_bend: unit(rng, d, 1.0),
            temporal_content: unit(rng, d, 1.0),
            align_content: unit(rng, d, h),
            align_prompt: unit(rng, config.prompt_dim, h),
        };
        let decoder = Decoder {
            motion_dir: unit(rng, d, 1.0),
            speed: config.speed,
            n_frames: config.n_frames,
            prompt_dim: config.prompt_dim,
        };
        Self { config, decoder, oracle }
    }

    /// Oracle quality of a generated latent rendered by the decoder.
    pub fn latent_quality(&self, x: &[f64]) -> f64 {
        self.oracle.overall(x, true)
    }

    fn annotator(&self, rng: &mut Rng) -> (usize, AnnotatorProfile) {
        let i = rng.below(self.config.annotators.len());
        (i, self.config.annotators[i])
    }

    /// Content, prompt, motion flag and rendered video.
    pub fn sample_video(&self, rng: &mut Rng) -> (Vec<f64>, bool, SyntheticVideo) {
        let c = rng.normals(self.config.frame_dim);
        let prompt = rng.normals(self.config.prompt_dim);
        let reasonable = rng.bernoulli(0.5);
        let frames = self.decoder.render(&c, self.config.frame_noise, Some(rng));
        let mut video = SyntheticVideo { frames, prompt_features: prompt };
        if !reasonable {
            let order = rng.non_identity_permutation(self.config.n_frames);
            video = video.permuted(&order);
        }
        (c, reasonable, video)
    }

    fn video_entry(&self, id: String, c: &[f64], reasonable: bool, prompt: &[f64]) -> OracleEntry {
        OracleEntry {
            role: ORACLE_ROLE.into(),
            id,
            spatial: self.oracle.spatial(c),
            temporal: Some(self.oracle.temporal(c, reasonable)),
            alignment: Some(self.oracle.alignment(c, prompt)),
            overall: self.oracle.overall(c, reasonable),
            reasonable: Some(reasonable),
        }
    }

    pub fn image_record(&self, id: String, rng: &mut Rng) -> (AnnotationRecord, OracleEntry) {
        let c = rng.normals(self.config.frame_dim);
        let q = self.oracle.spatial(&c);
        let (ai, prof) = self.annotator(rng);
        let s = self.config.mos_scale;
        let rec = AnnotationRecord {
            id: id.clone(),
            payload: RecordPayload::ImageScore { features: c, mos: prof.rate(q, s, rng) },
            scale: s,
            annotator: Some(ai),
        };
        let entry = OracleEntry {
            role: ORACLE_ROLE.into(),
            id,
            spatial: q,
            temporal: None,
            alignment: None,
            overall: q,
            reasonable: None,
        };
        (rec, entry)
    }

    pub fn natural_video_record(&self, id: String, rng: &mut Rng) -> (AnnotationRecord, OracleEntry) {
        let (c, reasonable, video) = self.sample_video(rng);
        let entry = self.video_entry(id.clone(), &c, reasonable, &video.prompt_features);
        let (ai, prof) = self.annotator(rng);
        let s = self.config.mos_scale;
        let rec = AnnotationRecord {
            id,
            payload: RecordPayload::NaturalVideoScore { video, mos: prof.rate(entry.overall, s, rng) },
            scale: s,
            annotator: Some(ai),
        };
        (rec, entry)
    }

    pub fn multidim_record(&self, id: String, rng: &mut Rng) -> (AnnotationRecord, OracleEntry) {
        let (c, reasonable, video) = self.sample_video(rng);
        let entry = self.video_entry(id.clone(), &c, reasonable, &video.prompt_features);
        let (ai, prof) = self.annotator(rng);
        let s = self.config.mos_scale;
        let qs = [entry.spatial, entry.temporal.unwrap_or(0.0), entry.alignment.unwrap_or(0.0)];
        let mos = qs.iter().map(|&q| prof.rate(q, s, rng)).collect();
        let rec = AnnotationRecord {
            id,
            payload: RecordPayload::VideoMultidim { video, mos },
            scale: s,
            annotator: Some(ai),
        };
        (rec, entry)
    }

    /// Label from the oracle overall gap: A above the margin, B below its
    /// negative, tie in between.
    pub fn pair_label(&self, gap: f64) -> PairLabel {
        if gap > self.config.pair_margin {
            PairLabel::A
        } else if gap < -self.config.pair_margin {
            PairLabel::B
        } else {
            PairLabel::Tie
        }
    }

    pub fn pair_record(&self, id: String, rng: &mut Rng) -> (AnnotationRecord, [OracleEntry; 2]) {
        let (ca, ra, a) = self.sample_video(rng);
        let (cb, rb, b) = self.sample_video(rng);
        let ea = self.video_entry(format!("{id}/a"), &ca, ra, &a.prompt_features);
        let eb = self.video_entry(format!("{id}/b"), &cb, rb, &b.prompt_features);
        let label = self.pair_label(ea.overall - eb.overall);
        let rec = AnnotationRecord {
            id,
            payload: RecordPayload::Pair { a, b, label },
            scale: Scale::UNIT,
            annotator: None,
        };
        (rec, [ea, eb])
    }

    /// Question 0 asks whether the motion is reasonable; question 1 whether
    /// spatial quality is above one half.
    pub fn vqa_record(&self, id: String, rng: &mut Rng) -> (AnnotationRecord, OracleEntry) {
        let (c, reasonable, video) = self.sample_video(rng);
        let entry = self.video_entry(id.clone(), &c, reasonable, &video.prompt_features);
        let question_id = rng.below(2);
        let yes = if question_id == 0 { reasonable } else { entry.spatial > 0.5 };
        let rec = AnnotationRecord {
            id,
            payload: RecordPayload::Vqa { video, question_id, answer: if yes { YesNo::Yes } else { YesNo::No } },
            scale: Scale::UNIT,
            annotator: None,
        };
        (rec, entry)
    }

    pub fn generate(&self, counts: &Counts, rng: &mut Rng) -> Benchmark {
        let mut b = Benchmark::default();
        macro_rules! fill {
            ($field:ident, $n:expr, $prefix:expr, $make:ident) => {
                for i in 0..$n {
                    let (rec, entry) = self.$make(format!("{}-{:04}", $prefix, i), rng);
                    b.$field.push(rec);
                    b.oracle.push(entry);
                }
            };
        }
        fill!(image, counts.image, "img", image_record);
        fill!(image_heldout, counts.image_heldout, "img-ho", image_record);
        fill!(natural_video, counts.natural_video, "nat", natural_video_record);
        fill!(multidim, counts.multidim, "md", multidim_record);
        fill!(multidim_heldout, counts.multidim_heldout, "md-ho", multidim_record);
        fill!(vqa, counts.vqa, "vqa", vqa_record);
        fill!(vqa_heldout, counts.vqa_heldout, "vqa-ho", vqa_record);
        for (field, n, prefix) in [
            (&mut b.pair, counts.pair, "pair"),
            (&mut b.pair_heldout, counts.pair_heldout, "pair-ho"),
            (&mut b.pair_calibration, counts.pair_calibration, "pair-cal"),
        ] {
            for i in 0..n {
                let (rec, [ea, eb]) = self.pair_record(format!("{prefix}-{i:04}"), rng);
                field.push(rec);
                b.oracle.push(ea);
                b.oracle.push(eb);
            }
        }
        b
    }
}

pub const ORACLE_FILE: &str = "oracle.jsonl";
pub const DECODER_FILE: &str = "decoder.json";

/// Writes every non-empty split, the decoder, and the oracle file.
pub fn gen_synthetic(
    config: &WorldConfig,
    counts: &Counts,
    out_dir: &Path,
    rng: &mut Rng,
) -> Result<Vec<PathBuf>, DataError> {
    let world = SyntheticWorld::new(config.clone(), rng);
    let bench = world.generate(counts, rng);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, recs) in bench.splits() {
        if recs.is_empty() {
            continue;
        }
        let p = out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&p, recs)?;
        written.push(p);
    }
    let p = out_dir.join(DECODER_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&world.decoder)?)?;
    written.push(p);
    let p = out_dir.join(ORACLE_FILE);
    write_oracle(&p, &world.oracle, &bench.oracle)?;
    written.push(p);
    Ok(written)
}

pub fn write_oracle(path: &Path, weights: &OracleWeights, entries: &[OracleEntry]) -> Result<(), DataError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &OracleHeader { role: ORACLE_ROLE.into(), weights: weights.clone() })?;
    f.write_all(b"\n")?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads an oracle file. Only evaluation code calls this.
pub fn read_oracle(path: &Path) -> Result<(OracleWeights, Vec<OracleEntry>), DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Open { path: path.to_path_buf(), source: e })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: OracleHeader = serde_json::from_str(lines.next().ok_or(DataError::NotOracle(path.to_path_buf()))?)?;
    if header.role != ORACLE_ROLE {
        return Err(DataError::NotOracle(path.to_path_buf()));
    }
    let entries = lines.map(serde_json::from_str).collect::<Result<Vec<OracleEntry>, _>>()?;
    Ok((header.weights, entries))
}

pub fn read_decoder(path: &Path) -> Result<Decoder, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Open { path: path.to_path_buf(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}
