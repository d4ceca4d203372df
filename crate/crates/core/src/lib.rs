//! Desk-scale alignment pipeline for quality-assessment policies.
//!
//! A small order-sensitive policy is trained with group-relative policy
//! optimization on structured `<think>/<answer>` completions, scored by
//! rule-based rewards. A judge built from that policy mines win/lose pairs
//! from a toy diffusion generator by round-robin tournament, and the
//! generator is finetuned with diffusion DPO. The [`curriculum`] module
//! strings the pieces together into three stages.

pub mod curriculum;
pub mod data;
pub mod dpo;
pub mod gradcheck;
pub mod grpo;
pub mod metrics;
pub mod numkit;
pub mod pref;
pub mod reward;
pub mod toy;
