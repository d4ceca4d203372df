//! Structured completions: `<think>…</think><answer>…</answer>`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Which question a completion answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ImageScore,
    NaturalVideoScore,
    VideoMultidim,
    Pair,
    Vqa,
}

/// Dimensions scored by the multi-dimension task: spatial, temporal, alignment.
pub const MULTIDIM_M: usize = 3;

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::ImageScore,
        TaskKind::NaturalVideoScore,
        TaskKind::VideoMultidim,
        TaskKind::Pair,
        TaskKind::Vqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ImageScore => "image_score",
            TaskKind::NaturalVideoScore => "natural_video_score",
            TaskKind::VideoMultidim => "video_multidim",
            TaskKind::Pair => "pair",
            TaskKind::Vqa => "vqa",
        }
    }

    pub fn from_name(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Tasks that look at one video, where frame shuffling is meaningful.
    pub fn is_single_video(self) -> bool {
        matches!(
            self,
            TaskKind::NaturalVideoScore | TaskKind::VideoMultidim | TaskKind::Vqa
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn swapped(self) -> Choice {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

/// Answer body, already normalized to the task's vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Score(f64),
    MultiScore(Vec<f64>),
    Choice(Choice),
    YesNo(YesNo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub think_text: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
}

impl Tag {
    const ALL: [Tag; 4] = [Tag::ThinkOpen, Tag::ThinkClose, Tag::AnswerOpen, Tag::AnswerClose];

    pub fn text(self) -> &'static str {
        match self {
            Tag::ThinkOpen => "<think>",
            Tag::ThinkClose => "</think>",
            Tag::AnswerOpen => "<answer>",
            Tag::AnswerClose => "</answer>",
        }
    }
}

/// Why a completion failed the tag grammar.
#[derive(Debug, Clone, PartialEq)]
pub enum Malformed {
    MissingTag(Tag),
    DuplicateTag(Tag),
    OrderViolation,
    /// Non-whitespace text outside the two blocks.
    StrayText,
    UnparseablePayload(String),
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Malformed::MissingTag(t) => write!(f, "missing {}", t.text()),
            Malformed::DuplicateTag(t) => write!(f, "duplicate {}", t.text()),
            Malformed::OrderViolation => f.write_str("tags out of order"),
            Malformed::StrayText => f.write_str("text outside think/answer blocks"),
            Malformed::UnparseablePayload(s) => write!(f, "unparseable answer {s:?}"),
        }
    }
}

/// Whitespace-token count; the length proxy for the length reward.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One generated response.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub raw_text: String,
    pub parsed: Option<ParsedAnswer>,
    pub malformed: Option<Malformed>,
    pub length_tokens: usize,
}

impl Completion {
    pub fn new(raw_text: String, task: TaskKind) -> Self {
        let length_tokens = token_count(&raw_text);
        let (parsed, malformed) = match parse_completion(&raw_text, task) {
            Ok(p) => (Some(p), None),
            Err(m) => (None, Some(m)),
        };
        Self {
            raw_text,
            parsed,
            malformed,
            length_tokens,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.parsed.is_some()
    }
}

fn find_all(hay: &str, needle: &str) -> Vec<usize> {
    hay.match_indices(needle).map(|(i, _)| i).collect()
}

/// Parses `text` against the tag grammar and the task's answer vocabulary.
pub fn parse_completion(text: &str, task: TaskKind) -> Result<ParsedAnswer, Malformed> {
    let text = text.trim();
    let mut pos = [0usize; 4];
    for (slot, tag) in Tag::ALL.iter().enumerate() {
        let hits = find_all(text, tag.text());
        match hits.len() {
            0 => return Err(Malformed::MissingTag(*tag)),
            1 => pos[slot] = hits[0],
            _ => return Err(Malformed::DuplicateTag(*tag)),
        }
    }
    let [to, tc, ao, ac] = pos;
    if !(to < tc && tc < ao && ao < ac) {
        return Err(Malformed::OrderViolation);
    }
    let after_close = tc + Tag::ThinkClose.text().len();
    let tail = ac + Tag::AnswerClose.text().len();
    if to != 0 || tail != text.len() || !text[after_close..ao].trim().is_empty() {
        return Err(Malformed::StrayText);
    }
    let think = &text[to + Tag::ThinkOpen.text().len()..tc];
    let body = text[ao + Tag::AnswerOpen.text().len()..ac].trim();
    let payload = parse_payload(body, task)?;
    Ok(ParsedAnswer {
        think_text: think.to_string(),
        payload,
    })
}

fn parse_unit(tok: &str) -> Option<f64> {
    let v: f64 = tok.parse().ok()?;
    (v.is_finite() && (0.0..=1.0).contains(&v)).then_some(v)
}

/// Parses an answer body for `task`. Choice and yes/no tokens are
/// case-insensitive; scores must be reals in `[0, 1]`.
pub fn parse_payload(body: &str, task: TaskKind) -> Result<Payload, Malformed> {
    let bad = || Malformed::UnparseablePayload(body.to_string());
    match task {
        TaskKind::ImageScore | TaskKind::NaturalVideoScore => {
            parse_unit(body).map(Payload::Score).ok_or_else(bad)
        }
        TaskKind::VideoMultidim => {
            let vals: Option<Vec<f64>> = body
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(parse_unit)
                .collect();
            match vals {
                Some(v) if v.len() == MULTIDIM_M => Ok(Payload::MultiScore(v)),
                _ => Err(bad()),
            }
        }
        TaskKind::Pair => {
            let words: Vec<String> = body.split_whitespace().map(str::to_lowercase).collect();
            match words.as_slice() {
                [v, c] if v == "video" && c == "a" => Ok(Payload::Choice(Choice::A)),
                [v, c] if v == "video" && c == "b" => Ok(Payload::Choice(Choice::B)),
                _ => Err(bad()),
            }
        }
        TaskKind::Vqa => match body.to_lowercase().as_str() {
            "yes" => Ok(Payload::YesNo(YesNo::Yes)),
            "no" => Ok(Payload::YesNo(YesNo::No)),
            _ => Err(bad()),
        },
    }
}

/// Canonical answer body for a payload.
pub fn render_payload(payload: &Payload) -> String {
    match payload {
        Payload::Score(s) => format!("{s}"),
        Payload::MultiScore(v) => v.iter().map(|s| format!("{s}")).collect::<Vec<_>>().join(" "),
        Payload::Choice(Choice::A) => "video A".into(),
        Payload::Choice(Choice::B) => "video B".into(),
        Payload::YesNo(YesNo::Yes) => "yes".into(),
        Payload::YesNo(YesNo::No) => "no".into(),
    }
}

/// Well-formed completion text.
pub fn render(think: &str, payload: &Payload) -> String {
    format!(
        "<think>{think}</think><answer>{}</answer>",
        render_payload(payload)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_example() {
        let p = parse_completion("<think>blurry edges</think><answer>0.62</answer>", TaskKind::ImageScore)
            .unwrap();
        assert_eq!(p.payload, Payload::Score(0.62));
        assert_eq!(p.think_text, "blurry edges");
    }

    #[test]
    fn order_violation() {
        assert_eq!(
            parse_completion("<answer>0.5</answer><think>x</think>", TaskKind::ImageScore),
            Err(Malformed::OrderViolation)
        );
    }

    #[test]
    fn choice_example_and_case() {
        let p = parse_completion("<think>t</think><answer>video B</answer>", TaskKind::Pair).unwrap();
        assert_eq!(p.payload, Payload::Choice(Choice::B));
        let p = parse_completion("<think>t</think>\n <answer> Video a </answer>", TaskKind::Pair).unwrap();
        assert_eq!(p.payload, Payload::Choice(Choice::A));
        let p = parse_completion("  <think>t</think><answer>YES</answer>\n", TaskKind::Vqa).unwrap();
        assert_eq!(p.payload, Payload::YesNo(YesNo::Yes));
    }

    #[test]
    fn malformed_reasons() {
        use Malformed::*;
        let t = TaskKind::ImageScore;
        assert_eq!(
            parse_completion("<think>a<answer>0.1</answer>", t),
            Err(MissingTag(Tag::ThinkClose))
        );
        assert_eq!(
            parse_completion("<think>a</think><answer>0.1</answer><answer>0.1</answer>", t),
            Err(DuplicateTag(Tag::AnswerOpen))
        );
        assert_eq!(
            parse_completion("<think>a</think>so<answer>0.1</answer>", t),
            Err(StrayText)
        );
        assert_eq!(
            parse_completion("x<think>a</think><answer>0.1</answer>", t),
            Err(StrayText)
        );
        assert!(matches!(
            parse_completion("<think>a</think><answer>1.3</answer>", t),
            Err(UnparseablePayload(_))
        ));
        assert!(matches!(
            parse_completion("<think>a</think><answer>0.1 0.2</answer>", TaskKind::VideoMultidim),
            Err(UnparseablePayload(_))
        ));
        assert!(matches!(
            parse_completion("<think>a</think><answer>video C</answer>", TaskKind::Pair),
            Err(UnparseablePayload(_))
        ));
    }

    #[test]
    fn multiscore_parses_three_values() {
        let p = parse_completion(
            "<think>ok</think><answer>0.5 0.25, 1</answer>",
            TaskKind::VideoMultidim,
        )
        .unwrap();
        assert_eq!(p.payload, Payload::MultiScore(vec![0.5, 0.25, 1.0]));
    }

    #[test]
    fn token_count_is_whitespace_split() {
        let c = Completion::new("<think>a b  c</think><answer>0.5</answer>".into(), TaskKind::ImageScore);
        assert_eq!(c.length_tokens, 3);
        assert!(c.is_well_formed());
    }
}
