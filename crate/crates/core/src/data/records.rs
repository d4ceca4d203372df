use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::grpo::TrainItem;
use crate::reward::{GroundTruth, PairLabel, TaskKind, YesNo, MULTIDIM_M};
use crate::toy::{Query, SyntheticVideo, Visual};

/// Declared raw range of a record's scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub min: f64,
    pub max: f64,
}

impl Scale {
    pub const UNIT: Scale = Scale { min: 0.0, max: 1.0 };
    pub const MOS5: Scale = Scale { min: 1.0, max: 5.0 };

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum RecordPayload {
    ImageScore { features: Vec<f64>, mos: f64 },
    NaturalVideoScore { video: SyntheticVideo, mos: f64 },
    VideoMultidim { video: SyntheticVideo, mos: Vec<f64> },
    Pair { a: SyntheticVideo, b: SyntheticVideo, label: PairLabel },
    Vqa { video: SyntheticVideo, question_id: usize, answer: YesNo },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    #[serde(flatten)]
    pub payload: RecordPayload,
    pub scale: Scale,
    /// Index of the annotator profile that produced the scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<usize>,
}

fn check_video(v: &SyntheticVideo) -> Result<(), String> {
    if v.frames.len() < 2 {
        return Err(format!("video has {} frames, need at least 2", v.frames.len()));
    }
    let d = v.frames[0].len();
    if d == 0 || v.frames.iter().any(|f| f.len() != d) {
        return Err("frames differ in dimension".into());
    }
    if v.frames.iter().flatten().chain(&v.prompt_features).any(|x| !x.is_finite()) {
        return Err("non-finite feature".into());
    }
    Ok(())
}

impl AnnotationRecord {
    pub fn kind(&self) -> TaskKind {
        match self.payload {
            RecordPayload::ImageScore { .. } => TaskKind::ImageScore,
            RecordPayload::NaturalVideoScore { .. } => TaskKind::NaturalVideoScore,
            RecordPayload::VideoMultidim { .. } => TaskKind::VideoMultidim,
            RecordPayload::Pair { .. } => TaskKind::Pair,
            RecordPayload::Vqa { .. } => TaskKind::Vqa,
        }
    }

    /// Shape and range checks.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale.min.is_finite() && self.scale.max.is_finite() && self.scale.min < self.scale.max) {
            return Err(format!("bad scale [{}, {}]", self.scale.min, self.scale.max));
        }
        let in_scale = |v: f64| {
            if self.scale.contains(v) {
                Ok(())
            } else {
                Err(format!("mos {v} outside declared scale [{}, {}]", self.scale.min, self.scale.max))
            }
        };
        match &self.payload {
            RecordPayload::ImageScore { features, mos } => {
                if features.is_empty() || features.iter().any(|x| !x.is_finite()) {
                    return Err("image features empty or non-finite".into());
                }
                in_scale(*mos)
            }
            RecordPayload::NaturalVideoScore { video, mos } => {
                check_video(video)?;
                in_scale(*mos)
            }
            RecordPayload::VideoMultidim { video, mos } => {
                check_video(video)?;
                if mos.len() != MULTIDIM_M {
                    return Err(format!("multidim mos has {} entries, need {MULTIDIM_M}", mos.len()));
                }
                mos.iter().try_for_each(|&m| in_scale(m))
            }
            RecordPayload::Pair { a, b, .. } => {
                check_video(a)?;
                check_video(b)
            }
            RecordPayload::Vqa { video, .. } => check_video(video),
        }
    }

    /// Policy query plus normalized supervision.
    pub fn to_item(&self) -> TrainItem {
        let s = self.scale;
        let (query, truth) = match &self.payload {
            RecordPayload::ImageScore { features, mos } => (
                Query { task: TaskKind::ImageScore, visual: Visual::Image(features.clone()), question: 0 },
                GroundTruth::Score(s.normalize(*mos)),
            ),
            RecordPayload::NaturalVideoScore { video, mos } => (
                Query { task: TaskKind::NaturalVideoScore, visual: Visual::Video(video.clone()), question: 0 },
                GroundTruth::Score(s.normalize(*mos)),
            ),
            RecordPayload::VideoMultidim { video, mos } => (
                Query { task: TaskKind::VideoMultidim, visual: Visual::Video(video.clone()), question: 0 },
                GroundTruth::MultiScore(mos.iter().map(|&m| s.normalize(m)).collect()),
            ),
            RecordPayload::Pair { a, b, label } => (
                Query { task: TaskKind::Pair, visual: Visual::Pair(a.clone(), b.clone()), question: 0 },
                GroundTruth::Pair(*label),
            ),
            RecordPayload::Vqa { video, question_id, answer } => (
                Query { task: TaskKind::Vqa, visual: Visual::Video(video.clone()), question: *question_id },
                GroundTruth::YesNo(*answer),
            ),
        };
        TrainItem { id: self.id.clone(), query, truth }
    }
}

/// A rejected dataset line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub records: Vec<AnnotationRecord>,
    pub errors: Vec<LineError>,
}

/// Fraction of malformed lines above which loading aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

fn is_oracle_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("role").and_then(|r| r.as_str()).map(|r| r == "oracle"))
        .unwrap_or(false)
}

/// Reads a line-delimited dataset. Bad lines are collected with their line
/// numbers; more than 10% bad lines aborts. Oracle files are refused.
pub fn load_dataset(path: &Path, kind: Option<TaskKind>) -> Result<Loaded, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Open { path: path.to_path_buf(), source: e })?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut total = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let n = i + 1;
        if is_oracle_line(&line) {
            return Err(DataError::OracleFile(path.to_path_buf()));
        }
        let rec: AnnotationRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(LineError { line: n, message: e.to_string() });
                continue;
            }
        };
        if let Some(k) = kind {
            if rec.kind() != k {
                errors.push(LineError { line: n, message: format!("expected {k}, found {}", rec.kind()) });
                continue;
            }
        }
        match rec.validate() {
            Ok(()) => records.push(rec),
            Err(message) => errors.push(LineError { line: n, message }),
        }
    }
    if total > 0 && errors.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(DataError::TooManyMalformed { path: path.to_path_buf(), bad: errors.len(), total, first: errors[0].clone() });
    }
    Ok(Loaded { records, errors })
}

pub fn save_dataset(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    write_jsonl(path, records)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video() -> SyntheticVideo {
        SyntheticVideo { frames: vec![vec![0.1, 0.2], vec![0.3, 0.4]], prompt_features: vec![0.0] }
    }

    fn records() -> Vec<AnnotationRecord> {
        vec![
            AnnotationRecord {
                id: "i0".into(),
                payload: RecordPayload::ImageScore { features: vec![1.0, -1.0], mos: 3.0 },
                scale: Scale::MOS5,
                annotator: Some(1),
            },
            AnnotationRecord {
                id: "m0".into(),
                payload: RecordPayload::VideoMultidim { video: video(), mos: vec![1.0, 2.0, 5.0] },
                scale: Scale::MOS5,
                annotator: None,
            },
            AnnotationRecord {
                id: "p0".into(),
                payload: RecordPayload::Pair { a: video(), b: video(), label: PairLabel::Tie },
                scale: Scale::UNIT,
                annotator: None,
            },
            AnnotationRecord {
                id: "q0".into(),
                payload: RecordPayload::Vqa { video: video(), question_id: 1, answer: YesNo::No },
                scale: Scale::UNIT,
                annotator: None,
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &records()).unwrap();
        let loaded = load_dataset(&path, None).unwrap();
        assert_eq!(loaded.records, records());
        assert!(loaded.errors.is_empty());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, None).unwrap().records.is_empty());
    }

    #[test]
    fn out_of_scale_mos_is_a_line_error() {
        let mut recs = records();
        recs.extend((0..10).map(|i| AnnotationRecord { id: format!("x{i}"), ..records()[0].clone() }));
        recs[0].payload = RecordPayload::ImageScore { features: vec![1.0], mos: 5.5 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &recs).unwrap();
        let loaded = load_dataset(&path, None).unwrap();
        assert_eq!(loaded.errors.len(), 1);
        assert_eq!(loaded.errors[0].line, 1);
        assert!(loaded.errors[0].message.contains("outside declared scale"));
    }

    #[test]
    fn too_many_bad_lines_abort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &records()).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&path, None), Err(DataError::TooManyMalformed { bad: 1, total: 5, .. })));
    }

    #[test]
    fn oracle_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.jsonl");
        std::fs::write(&path, "{\"role\":\"oracle\",\"id\":\"x\"}\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(DataError::OracleFile(_))));
    }

    #[test]
    fn kind_filter_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs: Vec<_> = (0..10).map(|i| AnnotationRecord { id: format!("i{i}"), ..records()[0].clone() }).collect();
        save_dataset(&path, &recs).unwrap();
        let loaded = load_dataset(&path, Some(TaskKind::ImageScore)).unwrap();
        assert_eq!(loaded.records.len(), 10);
        assert_eq!(loaded.records[0].to_item().truth, GroundTruth::Score(0.5));
        let s = Scale::MOS5;
        assert_eq!(s.denormalize(s.normalize(3.7)), 3.7);
        assert!(matches!(
            load_dataset(&path, Some(TaskKind::Vqa)),
            Err(DataError::TooManyMalformed { .. })
        ));
    }
}
