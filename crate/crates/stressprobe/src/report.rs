//! Report emission: accuracy tables in the shapes of the extended-data
//! tables, score bundles, robustness summaries, and plot-data series.
//!
//! Emission is deterministic for a given bundle: stable row order, two
//! decimals for percent columns and four for unit-interval fractions in
//! CSV/Markdown, full precision in JSON. Display rounding never feeds
//! back into computation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::RunScores;
use crate::metrics::{AccuracyCell, StressScores, TableLayout};
use crate::rubric::{Aggregation, LandscapePoint, RubricProfile};

/// Tolerance for difference-column consistency.
pub const DELTA_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent delta for {context}: stored {stored}, recomputed {recomputed}")]
    InconsistentDelta {
        context: String,
        stored: f64,
        recomputed: f64,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Modality-sensitivity table row (one model on one dataset):
/// image+text vs text-only accuracy with the drop column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySensitivityRow {
    pub model_id: String,
    pub dataset_id: String,
    pub a_image_text: f64,
    pub a_text_only: f64,
    /// Text-only minus image+text, in pp.
    pub delta: f64,
}

/// Modality-necessity table row: accuracy on the vision-required subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityNecessityRow {
    pub model_id: String,
    pub a_image_text: Option<f64>,
    pub a_text_only: f64,
    pub abstention_rate_text: f64,
}

/// Format-perturbation table row: original vs reordered, both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatPerturbationRow {
    pub model_id: String,
    pub text_original: f64,
    pub text_reordered: f64,
    pub image_original: f64,
    pub image_reordered: f64,
}

/// Distractor-replacement table row for one (model, modality):
/// Base / UNK / 1R..4R accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorRow {
    pub model_id: String,
    pub modality: String,
    pub base: f64,
    pub unknown: Option<f64>,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
}

/// Visual-substitution table row: original vs substituted accuracy with
/// the drop column and the stick-with-original rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualSubstitutionRow {
    pub model_id: String,
    pub a_original: f64,
    pub a_substituted: f64,
    /// Substituted minus original, in pp.
    pub delta: f64,
    pub stick_rate: Option<f64>,
}

/// One benchmark's landscape coordinates under both aggregation modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub benchmark_id: String,
    pub x_mean: f64,
    pub y_mean: f64,
    pub x_median: f64,
    pub y_median: f64,
    pub n_items: usize,
}

/// One point of a distractor-replacement accuracy curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub model_id: String,
    pub modality: String,
    pub r: u8,
    pub accuracy: f64,
}

/// Everything a report is rendered from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub cells: Vec<AccuracyCell>,
    pub layout: TableLayout,
    pub stress_scores: BTreeMap<String, StressScores>,
    pub modality_sensitivity: Vec<ModalitySensitivityRow>,
    pub modality_necessity: Vec<ModalityNecessityRow>,
    pub format_perturbation: Vec<FormatPerturbationRow>,
    pub distractor: Vec<DistractorRow>,
    pub visual_substitution: Vec<VisualSubstitutionRow>,
    pub landscape: Vec<LandscapeRow>,
    pub curves: Vec<CurvePoint>,
}

struct Cells<'a> {
    index: BTreeMap<(&'a str, &'a str, &'a str), &'a AccuracyCell>,
    models: Vec<&'a str>,
}

impl<'a> Cells<'a> {
    fn build(cells: &'a [AccuracyCell]) -> Self {
        let mut index = BTreeMap::new();
        let mut models = Vec::new();
        for cell in cells {
            index.insert(
                (
                    cell.model_id.as_str(),
                    cell.dataset_id.as_str(),
                    cell.condition_class.as_str(),
                ),
                cell,
            );
            models.push(cell.model_id.as_str());
        }
        models.sort_unstable();
        models.dedup();
        Cells { index, models }
    }

    fn get(&self, model: &str, dataset: &str, class: &str) -> Option<&AccuracyCell> {
        self.index.get(&(model, dataset, class)).copied()
    }

    fn acc(&self, model: &str, dataset: &str, class: &str) -> Option<f64> {
        self.get(model, dataset, class).map(|c| c.accuracy)
    }

    fn datasets(&self) -> Vec<&'a str> {
        let mut out: Vec<&str> = self.index.keys().map(|(_, d, _)| *d).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

impl ReportBundle {
    /// Build the full bundle from run scores; delta columns are computed,
    /// so the bundle is consistent by construction.
    pub fn from_scores(scores: &RunScores) -> ReportBundle {
        let cells = Cells::build(&scores.cells);
        let layout = &scores.layout;
        let visreq = layout.visreq_dataset.as_str();
        let subst = layout.subst_dataset.as_str();

        let mut modality_sensitivity = Vec::new();
        let mut modality_necessity = Vec::new();
        let mut format_perturbation = Vec::new();
        let mut distractor = Vec::new();
        let mut visual_substitution = Vec::new();
        let mut curves = Vec::new();

        for model in &cells.models {
            for dataset in cells.datasets() {
                if dataset == visreq || dataset == subst {
                    continue;
                }
                if let (Some(full), Some(text)) = (
                    cells.acc(model, dataset, "IMAGE_TEXT/base"),
                    cells.acc(model, dataset, "TEXT_ONLY/base"),
                ) {
                    modality_sensitivity.push(ModalitySensitivityRow {
                        model_id: model.to_string(),
                        dataset_id: dataset.to_string(),
                        a_image_text: full,
                        a_text_only: text,
                        delta: text - full,
                    });
                }
            }

            if let Some(text_cell) = cells.get(model, visreq, "TEXT_ONLY/base") {
                modality_necessity.push(ModalityNecessityRow {
                    model_id: model.to_string(),
                    a_image_text: cells.acc(model, visreq, "IMAGE_TEXT/base"),
                    a_text_only: text_cell.accuracy,
                    abstention_rate_text: text_cell.abstention_rate,
                });
            }

            if let (Some(text_orig), Some(text_reord), Some(image_orig), Some(image_reord)) = (
                cells.acc(model, visreq, "TEXT_ONLY/base"),
                cells.acc(model, visreq, "TEXT_ONLY/reordered"),
                cells.acc(model, visreq, "IMAGE_TEXT/base"),
                cells.acc(model, visreq, "IMAGE_TEXT/reordered"),
            ) {
                format_perturbation.push(FormatPerturbationRow {
                    model_id: model.to_string(),
                    text_original: text_orig,
                    text_reordered: text_reord,
                    image_original: image_orig,
                    image_reordered: image_reord,
                });
            }

            for modality in ["TEXT_ONLY", "IMAGE_TEXT"] {
                let r_acc = |r: u8| -> Option<f64> {
                    cells
                        .acc(model, visreq, &format!("{modality}/r={r}"))
                        .or_else(|| {
                            if r == 0 {
                                cells.acc(model, visreq, &format!("{modality}/base"))
                            } else {
                                None
                            }
                        })
                };
                let base = cells
                    .acc(model, visreq, &format!("{modality}/base"))
                    .or_else(|| r_acc(0));
                if let (Some(base), Some(r1), Some(r2), Some(r3), Some(r4)) =
                    (base, r_acc(1), r_acc(2), r_acc(3), r_acc(4))
                {
                    distractor.push(DistractorRow {
                        model_id: model.to_string(),
                        modality: modality.to_string(),
                        base,
                        unknown: cells.acc(model, visreq, &format!("{modality}/unknown")),
                        r1,
                        r2,
                        r3,
                        r4,
                    });
                    for (r, accuracy) in [
                        (0, r_acc(0).unwrap_or(base)),
                        (1, r1),
                        (2, r2),
                        (3, r3),
                        (4, r4),
                    ] {
                        curves.push(CurvePoint {
                            model_id: model.to_string(),
                            modality: modality.to_string(),
                            r,
                            accuracy,
                        });
                    }
                }
            }

            if let (Some(orig), Some(substituted)) = (
                cells.acc(model, subst, "IMAGE_TEXT/base"),
                cells.acc(model, subst, "IMAGE_TEXT/substituted"),
            ) {
                visual_substitution.push(VisualSubstitutionRow {
                    model_id: model.to_string(),
                    a_original: orig,
                    a_substituted: substituted,
                    delta: substituted - orig,
                    stick_rate: scores.per_model.get(*model).and_then(|s| s.stick_rate),
                });
            }
        }

        ReportBundle {
            cells: scores.cells.clone(),
            layout: scores.layout.clone(),
            stress_scores: scores.per_model.clone(),
            modality_sensitivity,
            modality_necessity,
            format_perturbation,
            distractor,
            visual_substitution,
            landscape: Vec::new(),
            curves,
        }
    }

    /// Attach rubric landscape data (both aggregation modes side by side).
    pub fn with_rubric(
        mut self,
        profiles: &[RubricProfile],
    ) -> Result<Self, crate::rubric::RubricError> {
        let means = crate::rubric::landscape_coords(profiles, Aggregation::Mean)?;
        let medians = crate::rubric::landscape_coords(profiles, Aggregation::Median)?;
        let median_by_id: BTreeMap<&str, &LandscapePoint> = medians
            .iter()
            .map(|p| (p.benchmark_id.as_str(), p))
            .collect();
        self.landscape = means
            .iter()
            .map(|mean| {
                let median = median_by_id[mean.benchmark_id.as_str()];
                LandscapeRow {
                    benchmark_id: mean.benchmark_id.clone(),
                    x_mean: mean.x,
                    y_mean: mean.y,
                    x_median: median.x,
                    y_median: median.y,
                    n_items: mean.n_items,
                }
            })
            .collect();
        Ok(self)
    }

    /// Every difference column must equal the recomputed difference of its
    /// operand columns to within `DELTA_TOLERANCE`.
    pub fn validate(&self) -> Result<(), ReportError> {
        for row in &self.modality_sensitivity {
            let recomputed = row.a_text_only - row.a_image_text;
            if (row.delta - recomputed).abs() > DELTA_TOLERANCE {
                return Err(ReportError::InconsistentDelta {
                    context: format!("modality_sensitivity {}/{}", row.model_id, row.dataset_id),
                    stored: row.delta,
                    recomputed,
                });
            }
        }
        for row in &self.visual_substitution {
            let recomputed = row.a_substituted - row.a_original;
            if (row.delta - recomputed).abs() > DELTA_TOLERANCE {
                return Err(ReportError::InconsistentDelta {
                    context: format!("visual_substitution {}", row.model_id),
                    stored: row.delta,
                    recomputed,
                });
            }
        }
        Ok(())
    }
}

/// Output format selector for `emit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Md];
}

fn pct(value: f64) -> String {
    format!("{value:.2}")
}

fn frac(value: f64) -> String {
    format!("{value:.4}")
}

fn opt(value: Option<f64>, render: fn(f64) -> String) -> String {
    value.map(render).unwrap_or_else(|| "--".to_string())
}

fn write_file(path: &Path, content: &str) -> Result<PathBuf, ReportError> {
    std::fs::write(path, content).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn accuracy_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("dataset_id,model_id,condition_class,n,accuracy,abstention_rate\n");
    for cell in &bundle.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cell.dataset_id,
            cell.model_id,
            cell.condition_class,
            cell.n,
            pct(cell.accuracy),
            pct(cell.abstention_rate)
        );
    }
    out
}

fn robustness_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("model_id,f1,f2,f3,f4,f5,r1,r2,r3,r4,r5,mean_robustness\n");
    for (model, scores) in &bundle.stress_scores {
        let f = &bundle.stress_scores[model].fragility;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            model,
            opt(f.f1, frac),
            opt(f.f2, frac),
            opt(f.f3, frac),
            opt(f.f4, frac),
            opt(f.f5, frac),
            opt(f.r1, frac),
            opt(f.r2, frac),
            opt(f.r3, frac),
            opt(f.r4, frac),
            opt(f.r5, frac),
            opt(scores.fragility.mean_robustness, frac)
        );
    }
    out
}

fn landscape_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("benchmark_id,aggregation,x,y,n_items\n");
    for row in &bundle.landscape {
        let _ = writeln!(
            out,
            "{},MEAN,{},{},{}",
            row.benchmark_id,
            frac(row.x_mean),
            frac(row.y_mean),
            row.n_items
        );
        let _ = writeln!(
            out,
            "{},MEDIAN,{},{},{}",
            row.benchmark_id,
            frac(row.x_median),
            frac(row.y_median),
            row.n_items
        );
    }
    out
}

fn curves_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("model_id,modality,r,accuracy\n");
    for point in &bundle.curves {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            point.model_id,
            point.modality,
            point.r,
            pct(point.accuracy)
        );
    }
    out
}

fn scores_markdown_row(model: &str, scores: &StressScores) -> String {
    format!(
        "| {model} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
        opt(scores.niac_pp, pct),
        opt(scores.rs, frac),
        opt(scores.rs_agg, frac),
        opt(scores.dga, frac),
        opt(scores.vgs, frac),
        opt(scores.drs, frac),
        opt(scores.csr, pct),
        opt(scores.fragility.mean_robustness, frac),
    )
}

fn summary_md(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    out.push_str("# Stress-test report\n");

    if !bundle.modality_sensitivity.is_empty() {
        out.push_str("\n## Modality sensitivity\n\n");
        out.push_str("| Model | Dataset | Img+Txt | Txt Only | Delta |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &bundle.modality_sensitivity {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                row.model_id,
                row.dataset_id,
                pct(row.a_image_text),
                pct(row.a_text_only),
                pct(row.delta)
            );
        }
    }

    if !bundle.modality_necessity.is_empty() {
        out.push_str("\n## Modality necessity (vision-required subset)\n\n");
        out.push_str("| Model | Image+Text | Text Only | Abstention (text) |\n");
        out.push_str("|---|---|---|---|\n");
        for row in &bundle.modality_necessity {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                row.model_id,
                opt(row.a_image_text, pct),
                pct(row.a_text_only),
                pct(row.abstention_rate_text)
            );
        }
    }

    if !bundle.format_perturbation.is_empty() {
        out.push_str("\n## Format perturbation\n\n");
        out.push_str("| Model | Text (orig) | Text (reord) | Img+Txt (orig) | Img+Txt (reord) |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &bundle.format_perturbation {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                row.model_id,
                pct(row.text_original),
                pct(row.text_reordered),
                pct(row.image_original),
                pct(row.image_reordered)
            );
        }
    }

    if !bundle.distractor.is_empty() {
        out.push_str("\n## Distractor replacement\n\n");
        out.push_str("| Model | Modality | Base | UNK | 1R | 2R | 3R | 4R |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for row in &bundle.distractor {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                row.model_id,
                row.modality,
                pct(row.base),
                opt(row.unknown, pct),
                pct(row.r1),
                pct(row.r2),
                pct(row.r3),
                pct(row.r4)
            );
        }
    }

    if !bundle.visual_substitution.is_empty() {
        out.push_str("\n## Visual substitution\n\n");
        out.push_str("| Model | Original | Image Subst. | Delta | Stick rate |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &bundle.visual_substitution {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                row.model_id,
                pct(row.a_original),
                pct(row.a_substituted),
                pct(row.delta),
                opt(row.stick_rate, frac)
            );
        }
    }

    if !bundle.stress_scores.is_empty() {
        out.push_str("\n## Stress scores\n\n");
        out.push_str("| Model | NIAC (pp) | RS | RS_agg | DGA | VGS | DRS | CSR | R |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for (model, scores) in &bundle.stress_scores {
            out.push_str(&scores_markdown_row(model, scores));
        }
        out.push_str("\n## Visual grounding gain (pp)\n\n");
        out.push_str("| Model | Dataset | VGG |\n|---|---|---|\n");
        for (model, scores) in &bundle.stress_scores {
            for (dataset, value) in &scores.vgg_pp {
                let _ = writeln!(out, "| {model} | {dataset} | {} |", pct(*value));
            }
        }
    }

    if bundle.landscape.is_empty() {
        out.push_str("\nNo rubric input; landscape scatter omitted.\n");
    } else {
        out.push_str("\n## Benchmark landscape (x = visual, y = reasoning)\n\n");
        out.push_str("| Benchmark | x (mean) | y (mean) | x (median) | y (median) | items |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for row in &bundle.landscape {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                row.benchmark_id,
                frac(row.x_mean),
                frac(row.y_mean),
                frac(row.x_median),
                frac(row.y_median),
                row.n_items
            );
        }
    }
    out
}

/// Serialize the bundle (exact values) for machine consumption and replay.
fn stress_scores_json(bundle: &ReportBundle) -> String {
    serde_json::to_string_pretty(bundle).expect("bundle serialization cannot fail")
}

/// Render the plot-data series as CSV: one distractor-replacement curve
/// series per (model, modality) as (r, accuracy) rows, and the landscape
/// scatter as (benchmark, x, y) rows when rubric data is attached.
pub fn plot_data(bundle: &ReportBundle) -> (String, Option<String>) {
    let scatter = if bundle.landscape.is_empty() {
        None
    } else {
        Some(landscape_csv(bundle))
    };
    (curves_csv(bundle), scatter)
}

/// Write the report files for the selected formats into `<out_dir>`;
/// returns the paths written. Refuses bundles with inconsistent delta
/// columns.
pub fn emit(
    bundle: &ReportBundle,
    out_dir: impl AsRef<Path>,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, ReportError> {
    bundle.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Csv => {
                written.push(write_file(
                    &out_dir.join("accuracy.csv"),
                    &accuracy_csv(bundle),
                )?);
                written.push(write_file(
                    &out_dir.join("robustness.csv"),
                    &robustness_csv(bundle),
                )?);
                written.push(write_file(
                    &out_dir.join("curves.csv"),
                    &curves_csv(bundle),
                )?);
                if !bundle.landscape.is_empty() {
                    written.push(write_file(
                        &out_dir.join("landscape.csv"),
                        &landscape_csv(bundle),
                    )?);
                }
            }
            ReportFormat::Json => {
                written.push(write_file(
                    &out_dir.join("stress_scores.json"),
                    &stress_scores_json(bundle),
                )?);
            }
            ReportFormat::Md => {
                written.push(write_file(
                    &out_dir.join("summary.md"),
                    &summary_md(bundle),
                )?);
            }
        }
    }
    Ok(written)
}

/// Reload the JSON report for replay.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ReportBundle, String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}
