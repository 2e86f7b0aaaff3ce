//! Clinician-rubric aggregation: per-axis inter-rater agreement (Fleiss'
//! kappa), central scores, and the 2D benchmark-landscape coordinates.
//!
//! The axis set is configuration. The built-in default covers ten axes:
//! five reasoning-complexity and five visual-dependency dimensions, each
//! rated on the 1..=3 ordinal scale.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotationRecord;

/// Rubric axis family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisGroup {
    #[serde(rename = "REASONING")]
    Reasoning,
    #[serde(rename = "VISUAL")]
    Visual,
}

/// One rubric axis with anchor descriptions for scores 1/2/3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub axis_id: String,
    pub group: AxisGroup,
    pub name: String,
    pub anchors: [String; 3],
}

fn axis(axis_id: &str, group: AxisGroup, name: &str, anchors: [&str; 3]) -> AxisSpec {
    AxisSpec {
        axis_id: axis_id.to_string(),
        group,
        name: name.to_string(),
        anchors: anchors.map(str::to_string),
    }
}

/// The built-in ten-axis rubric.
pub fn default_axes() -> Vec<AxisSpec> {
    use AxisGroup::{Reasoning, Visual};
    vec![
        axis(
            "reasoning_steps",
            Reasoning,
            "Reasoning Steps",
            [
                "single recognition step",
                "combines two or three findings",
                "multi-step differential or staged inference",
            ],
        ),
        axis(
            "clinical_context",
            Reasoning,
            "Clinical Context",
            [
                "no patient context needed",
                "limited context such as age or presenting complaint",
                "full scenario with history, labs, and prior workup",
            ],
        ),
        axis(
            "time_sequence_info",
            Reasoning,
            "Time/Sequence Info",
            [
                "no temporal component",
                "occasional reference to timing",
                "requires ordering or comparing events over time",
            ],
        ),
        axis(
            "uncertainty_handling",
            Reasoning,
            "Uncertainty Handling",
            [
                "single unambiguous answer",
                "some vagueness to resolve",
                "needs hedging or weighing several possibilities",
            ],
        ),
        axis(
            "decision_impact",
            Reasoning,
            "Decision Impact",
            [
                "no care consequence",
                "influences follow-up or triage",
                "drives diagnosis or treatment choice",
            ],
        ),
        axis(
            "text_alone_solvable",
            Visual,
            "Text-alone Solvable",
            [
                "answerable without the image",
                "image adds helpful context",
                "image is essential to answer",
            ],
        ),
        axis(
            "visual_detail_needed",
            Visual,
            "Visual Detail Needed",
            [
                "a glance suffices",
                "moderate detail such as spotting a finding",
                "fine detail at expert level",
            ],
        ),
        axis(
            "spatial_understanding",
            Visual,
            "Spatial Understanding",
            [
                "location irrelevant",
                "region or side matters",
                "exact location or distribution is critical",
            ],
        ),
        axis(
            "image_quality_sensitivity",
            Visual,
            "Image Quality Sensitivity",
            [
                "tolerant of degradation",
                "somewhat sensitive",
                "depends on subtle visual cues",
            ],
        ),
        axis(
            "multiview_temporal_alignment",
            Visual,
            "Multi-view / Temporal Alignment",
            [
                "single view suffices",
                "comparison occasionally needed",
                "must align across views or timepoints",
            ],
        ),
    ]
}

/// Load an axis set from JSON (an array of axis objects).
pub fn load_axes(path: impl AsRef<Path>) -> Result<Vec<AxisSpec>, RubricError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| RubricError::AxisFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let axes: Vec<AxisSpec> =
        serde_json::from_slice(&bytes).map_err(|e| RubricError::AxisFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut seen = BTreeSet::new();
    for spec in &axes {
        if !seen.insert(spec.axis_id.as_str()) {
            return Err(RubricError::DuplicateAxis(spec.axis_id.clone()));
        }
    }
    Ok(axes)
}

#[derive(Debug, Error)]
pub enum RubricError {
    #[error("axis file {path}: {message}")]
    AxisFile { path: String, message: String },
    #[error("duplicate axis id {0}")]
    DuplicateAxis(String),
    #[error("tally matrix is empty")]
    EmptyTally,
    #[error("fleiss kappa needs at least 2 raters, got {0}")]
    TooFewRaters(usize),
    #[error("tally row {row} sums to {got}, expected {expected}")]
    RowSumMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("benchmark {benchmark_id} axis {axis_id}: no item has complete ratings")]
    ZeroCompleteItems {
        benchmark_id: String,
        axis_id: String,
    },
    #[error("benchmark {benchmark_id} axis {axis_id}: no annotation records")]
    NoRecords {
        benchmark_id: String,
        axis_id: String,
    },
    #[error("benchmark {benchmark_id} has no {group:?} axes")]
    EmptyGroup {
        benchmark_id: String,
        group: AxisGroup,
    },
    #[error("annotation references unknown item {0} (no benchmark mapping)")]
    UnknownItem(String),
}

/// Fleiss' kappa over an item x category tally matrix.
///
/// Returns `Ok(None)` (UNDEFINED) exactly when all mass falls in a single
/// category, where the chance-agreement denominator vanishes.
pub fn fleiss_kappa(counts: &[Vec<usize>], n_raters: usize) -> Result<Option<f64>, RubricError> {
    if counts.is_empty() {
        return Err(RubricError::EmptyTally);
    }
    if n_raters < 2 {
        return Err(RubricError::TooFewRaters(n_raters));
    }
    let n_categories = counts.iter().map(Vec::len).max().unwrap_or(0);
    let n_items = counts.len();

    let mut p_bar = 0.0;
    let mut column_sums = vec![0usize; n_categories];
    for (row_idx, row) in counts.iter().enumerate() {
        let row_sum: usize = row.iter().sum();
        if row_sum != n_raters {
            return Err(RubricError::RowSumMismatch {
                row: row_idx,
                expected: n_raters,
                got: row_sum,
            });
        }
        let agreeing_pairs: usize = row.iter().map(|&n_ij| n_ij * n_ij.saturating_sub(1)).sum();
        p_bar += agreeing_pairs as f64 / (n_raters * (n_raters - 1)) as f64;
        for (j, &n_ij) in row.iter().enumerate() {
            column_sums[j] += n_ij;
        }
    }
    p_bar /= n_items as f64;

    let total = (n_items * n_raters) as f64;
    let p_e: f64 = column_sums
        .iter()
        .map(|&s| {
            let p_j = s as f64 / total;
            p_j * p_j
        })
        .sum();

    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(None);
    }
    Ok(Some((p_bar - p_e) / (1.0 - p_e)))
}

/// Lower median: for even counts the lower of the two central values, so
/// ordinal outputs stay on the 1..=3 scale.
fn lower_median(scores: &mut [u8]) -> u8 {
    scores.sort_unstable();
    scores[(scores.len() - 1) / 2]
}

/// Aggregated view of one (benchmark, axis) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisProfile {
    pub axis_id: String,
    pub group: AxisGroup,
    /// `None` means agreement is undefined (single rater, or all mass in
    /// one category).
    pub kappa: Option<f64>,
    pub median: u8,
    pub mean: f64,
    /// Distinct items with at least one rating.
    pub n_items: usize,
    /// Size of the rater universe for this axis.
    pub n_raters: usize,
    /// Items excluded from kappa because some rater was missing; they
    /// still count toward median and mean.
    pub n_dropped_items: usize,
}

/// Per-benchmark rubric profile across all configured axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricProfile {
    pub benchmark_id: String,
    pub axes: Vec<AxisProfile>,
}

/// Aggregate one axis of one benchmark.
///
/// Kappa uses only items rated by the full rater universe (Fleiss requires
/// a fixed rater count); median and mean use every rating.
pub fn axis_profile(
    records: &[&AnnotationRecord],
    benchmark_id: &str,
    spec: &AxisSpec,
) -> Result<AxisProfile, RubricError> {
    if records.is_empty() {
        return Err(RubricError::NoRecords {
            benchmark_id: benchmark_id.to_string(),
            axis_id: spec.axis_id.clone(),
        });
    }
    let raters: BTreeSet<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
    let n_raters = raters.len();

    let mut by_item: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for record in records {
        by_item
            .entry(record.item_id.as_str())
            .or_default()
            .push(record);
    }

    let mut tally: Vec<Vec<usize>> = Vec::new();
    let mut dropped = 0usize;
    for item_records in by_item.values() {
        let item_raters: BTreeSet<&str> =
            item_records.iter().map(|r| r.rater_id.as_str()).collect();
        if item_raters != raters {
            dropped += 1;
            continue;
        }
        let mut row = vec![0usize; 3];
        for record in item_records {
            row[record.score as usize - 1] += 1;
        }
        tally.push(row);
    }
    if tally.is_empty() {
        return Err(RubricError::ZeroCompleteItems {
            benchmark_id: benchmark_id.to_string(),
            axis_id: spec.axis_id.clone(),
        });
    }
    let kappa = if n_raters < 2 {
        None
    } else {
        fleiss_kappa(&tally, n_raters)?
    };

    let mut scores: Vec<u8> = records.iter().map(|r| r.score).collect();
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64;
    let median = lower_median(&mut scores);

    Ok(AxisProfile {
        axis_id: spec.axis_id.clone(),
        group: spec.group,
        kappa,
        median,
        mean,
        n_items: by_item.len(),
        n_raters,
        n_dropped_items: dropped,
    })
}

/// Group annotation records by benchmark (via the item -> benchmark map)
/// and produce one profile per benchmark, axes in configured order.
/// Axes without records for a benchmark are skipped.
pub fn benchmark_profiles(
    records: &[AnnotationRecord],
    item_to_benchmark: &BTreeMap<String, String>,
    axes: &[AxisSpec],
) -> Result<Vec<RubricProfile>, RubricError> {
    let mut grouped: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for record in records {
        let benchmark = item_to_benchmark
            .get(&record.item_id)
            .ok_or_else(|| RubricError::UnknownItem(record.item_id.clone()))?;
        grouped.entry(benchmark.as_str()).or_default().push(record);
    }

    let mut profiles = Vec::new();
    for (benchmark_id, benchmark_records) in grouped {
        let mut axis_profiles = Vec::new();
        for spec in axes {
            let axis_records: Vec<&AnnotationRecord> = benchmark_records
                .iter()
                .copied()
                .filter(|r| r.axis_id == spec.axis_id)
                .collect();
            if axis_records.is_empty() {
                continue;
            }
            axis_profiles.push(axis_profile(&axis_records, benchmark_id, spec)?);
        }
        profiles.push(RubricProfile {
            benchmark_id: benchmark_id.to_string(),
            axes: axis_profiles,
        });
    }
    Ok(profiles)
}

/// How axis central scores are aggregated into landscape coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "MEDIAN")]
    Median,
    #[serde(rename = "MEAN")]
    Mean,
}

/// One benchmark's position in (visual, reasoning) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub benchmark_id: String,
    /// Visual-dependency aggregate.
    pub x: f64,
    /// Reasoning-complexity aggregate.
    pub y: f64,
    pub n_items: usize,
}

fn aggregate_group(
    profile: &RubricProfile,
    group: AxisGroup,
    mode: Aggregation,
) -> Result<f64, RubricError> {
    let axes: Vec<&AxisProfile> = profile.axes.iter().filter(|a| a.group == group).collect();
    if axes.is_empty() {
        return Err(RubricError::EmptyGroup {
            benchmark_id: profile.benchmark_id.clone(),
            group,
        });
    }
    Ok(match mode {
        Aggregation::Mean => axes.iter().map(|a| a.mean).sum::<f64>() / axes.len() as f64,
        Aggregation::Median => {
            let mut medians: Vec<u8> = axes.iter().map(|a| a.median).collect();
            lower_median(&mut medians) as f64
        }
    })
}

/// Project profiles onto the 2D landscape: x from VISUAL axes, y from
/// REASONING axes. Errors if a benchmark lacks either axis group.
pub fn landscape_coords(
    profiles: &[RubricProfile],
    mode: Aggregation,
) -> Result<Vec<LandscapePoint>, RubricError> {
    profiles
        .iter()
        .map(|profile| {
            let x = aggregate_group(profile, AxisGroup::Visual, mode)?;
            let y = aggregate_group(profile, AxisGroup::Reasoning, mode)?;
            let n_items = profile.axes.iter().map(|a| a.n_items).max().unwrap_or(0);
            Ok(LandscapePoint {
                benchmark_id: profile.benchmark_id.clone(),
                x,
                y,
                n_items,
            })
        })
        .collect()
}
