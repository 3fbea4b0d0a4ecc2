//! Optimization of short-answer grading guidelines for a language-model
//! grader.
//!
//! A guideline's expert sections (question stem, key concept, scoring rubric)
//! stay frozen while its adaptation rules are rewritten by a reflect-and-refine
//! beam search over graded training answers. The optimized guideline then
//! grades new answer sets, with a log-probability confidence check that
//! flags distribution shift and triggers test-time adaptation.

pub mod adaptation;
pub mod agents;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod sampler;
pub mod workbench;

pub use error::{Error, Result};
pub use model::{
    render_guideline, validate_guideline, AnswerSample, GradingOutput, Guideline, KappaWeighting,
    LabeledSample, Lineage, PsiVariant, RunConfig, Score, ScoreScale, Section, ValidationReport,
};
pub use optimizer::{run_training, BeamState, Candidate, IterationRecord, RunCheckpoint};
pub use workbench::{load_dataset, DatasetBundle, RunManifest};
