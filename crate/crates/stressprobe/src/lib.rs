//! Stress-testing harness for multiple-choice multimodal benchmarks.
//!
//! The crate is organized around a pipeline:
//!
//! - [`corpus`] loads and validates benchmark items, visual-substitution
//!   maps, and clinician annotation files.
//! - [`perturb`] generates the five deterministic, seeded input
//!   transformations (modality ablation, option reordering, distractor
//!   replacement, visual substitution) and expands protocol grids.
//! - [`modelio`] renders prompts, queries models through pluggable
//!   adapters (HTTP or mock), parses answers, and caches every response.
//! - [`metrics`] computes the closed-form robustness score suite from
//!   answer records or externally supplied accuracy tables.
//! - [`rubric`] aggregates clinician annotations into per-benchmark
//!   agreement (Fleiss' kappa) and 2D landscape coordinates.
//! - [`harness`] orchestrates full campaigns: planning, scheduling under
//!   concurrency limits, resume-from-cache, and scoring.
//! - [`report`] emits accuracy tables, score bundles, and plot data as
//!   CSV / JSON / Markdown.

pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod modelio;
pub mod perturb;
pub mod report;
pub mod rubric;
pub mod seed;

/// Version tag for the perturbation generators. Participates in cache keys
/// and instance provenance; bump whenever generated bytes could change.
pub const GENERATOR_VERSION: &str = "gen-1";

/// Tool version recorded in run manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
