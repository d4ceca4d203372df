//! Desk-scale stand-ins for the vision-language policy and the video
//! generator.

mod diffusion;
mod generator;
mod policy;

pub use diffusion::{noise, noise_with, DiffusionSchedule};
pub use generator::{GenConfig, ToyGenerator};
pub use policy::{
    answer_prob_sequential_vs_shuffled, Action, FormatOutcome, HeadLogProbs, PolicyConfig,
    PolicyError, ShuffleProbe, ToyPolicy, MALFORMED_VARIANTS,
};

use serde::{Deserialize, Serialize};

use crate::reward::TaskKind;

/// Frame-feature matrix standing in for a video's visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub frames: Vec<Vec<f64>>,
    pub prompt_features: Vec<f64>,
}

impl SyntheticVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Same video with frames reordered as `order[i]`-th original at slot i.
    pub fn permuted(&self, order: &[usize]) -> SyntheticVideo {
        SyntheticVideo {
            frames: order.iter().map(|&i| self.frames[i].clone()).collect(),
            prompt_features: self.prompt_features.clone(),
        }
    }
}

/// What the policy looks at for one query.
#[derive(Debug, Clone, PartialEq)]
pub enum Visual {
    Image(Vec<f64>),
    Video(SyntheticVideo),
    Pair(SyntheticVideo, SyntheticVideo),
}

/// A task instance presented to the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub task: TaskKind,
    pub visual: Visual,
    /// Question index for yes/no items; 0 elsewhere.
    pub question: usize,
}

impl Query {
    pub fn video(&self) -> Option<&SyntheticVideo> {
        match &self.visual {
            Visual::Video(v) => Some(v),
            _ => None,
        }
    }

    /// Copy with the single video's frames reordered.
    pub fn with_frame_order(&self, order: &[usize]) -> Option<Query> {
        let v = self.video()?;
        Some(Query {
            task: self.task,
            visual: Visual::Video(v.permuted(order)),
            question: self.question,
        })
    }
}
