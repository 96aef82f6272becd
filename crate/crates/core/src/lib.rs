//! Texture/shape cue-conflict bias measurement and steering for
//! vision-language models.
//!
//! The pipeline: [`dataset`] loads cue-conflict items, [`prompts`] renders
//! the task templates, a [`backends::ChatBackend`] answers, [`extraction`]
//! turns free text into class decisions, and [`metrics`] folds outcomes into
//! shape bias, accuracy, confidence curves and error consistency. [`steering`]
//! perturbs images and searches for biased prompts; [`runner`] orchestrates
//! resumable runs and reports. [`simulator`] is an offline stand-in model.

pub mod backends;
pub mod dataset;
pub mod extraction;
pub mod metrics;
pub mod prompts;
pub mod rng;
pub mod runner;
pub mod simulator;
pub mod steering;
