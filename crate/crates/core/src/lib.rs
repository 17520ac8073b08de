//! Reference-free benchmark harness for region-level captioning of medical
//! images.
//!
//! Stages: dataset ingest, ROI detection for annotation-free datasets,
//! region sampling and focal-input construction, prompt rendering, caption
//! generation through a cached gateway, attribute QA instantiation, judging
//! and scoring, and report emission.

pub mod digest;
pub mod eval;
pub mod gateway;
pub mod geometry;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod prompt;
pub mod qa;
pub mod report;
pub mod roi;
pub mod sampler;
pub mod vocab;
