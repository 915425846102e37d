//! Future-frame temporal knowledge distillation for sparse-query 3D
//! detectors, on synthetic temporal driving scenes.
//!
//! An offline teacher that sees past, current, and future frames distills
//! into an online student that only sees past and current frames:
//! masked feature reconstruction against future-aggregated teacher features
//! (perspective-view and query level), plus Hungarian-matched logit
//! distillation over foreground and background queries.

pub mod tensor;
pub mod detector;
pub mod distill;
pub mod losses;
pub mod matching;
pub mod world;
pub mod metrics;
pub mod harness;
