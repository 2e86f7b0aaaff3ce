//! Closed-form robustness metrics.
//!
//! Every function here is pure over immutable inputs. Metrics accept
//! accuracy tables directly (not only raw answer records) so published
//! tables can be replayed as golden inputs; `scores_from_cells` is that
//! replay engine. Percent values are carried as exact decimals.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelio::{ModelAnswer, ParsedAnswer};

/// Chance level for 5-choice items, in percent.
pub const CHANCE_5_CHOICE: f64 = 20.0;

/// Weights of the three f4 degradation terms.
pub const F4_WEIGHTS: (f64, f64, f64) = (0.5, 0.3, 0.2);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("mixed cells: {0}")]
    MixedCells(String),
    #[error("chance level {0} must lie in [0, 100)")]
    ChanceOutOfRange(f64),
    #[error("missing accuracy for r={0}")]
    MissingR(u8),
    #[error("item {item_id} has {got} reordered predictions, expected K={expected}")]
    InconsistentK {
        item_id: String,
        expected: usize,
        got: usize,
    },
    #[error("reorder stability needs K >= 1")]
    ZeroK,
    #[error("f1 needs at least one dataset accuracy pair")]
    EmptyDatasetSet,
    #[error("csv error at {path}: {message}")]
    Csv { path: String, message: String },
}

fn check_chance(c: f64) -> Result<(), MetricsError> {
    if (0.0..100.0).contains(&c) {
        Ok(())
    } else {
        Err(MetricsError::ChanceOutOfRange(c))
    }
}

/// One aggregated accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub dataset_id: String,
    pub model_id: String,
    pub condition_class: String,
    pub n: usize,
    /// Percent in [0, 100].
    pub accuracy: f64,
    /// Percent of answers parsed as abstentions.
    #[serde(default)]
    pub abstention_rate: f64,
}

/// Percent-correct over a homogeneous group of answers. Abstentions and
/// unparseable responses count as incorrect but are tallied separately.
pub fn accuracy(answers: &[&ModelAnswer], dataset_id: &str) -> Result<AccuracyCell, MetricsError> {
    let first = answers.first().ok_or(MetricsError::EmptyInput)?;
    let class = first.condition.class();
    for answer in answers {
        if answer.model_id != first.model_id {
            return Err(MetricsError::MixedCells(format!(
                "models {} and {}",
                first.model_id, answer.model_id
            )));
        }
        if answer.condition.class() != class {
            return Err(MetricsError::MixedCells(format!(
                "condition classes {} and {}",
                class,
                answer.condition.class()
            )));
        }
    }
    let n = answers.len();
    let correct = answers.iter().filter(|a| a.correct).count();
    let abstained = answers
        .iter()
        .filter(|a| a.parsed == ParsedAnswer::Abstain)
        .count();
    Ok(AccuracyCell {
        dataset_id: dataset_id.to_string(),
        model_id: first.model_id.clone(),
        condition_class: class,
        n,
        accuracy: 100.0 * correct as f64 / n as f64,
        abstention_rate: 100.0 * abstained as f64 / n as f64,
    })
}

/// Normalized above-chance accuracy, `max(0, A - c) / (100 - c)`, in [0, 1].
pub fn nacc(a: f64, c: f64) -> Result<f64, MetricsError> {
    check_chance(c)?;
    Ok((a - c).max(0.0) / (100.0 - c))
}

/// Visual Grounding Gain in percentage points:
/// `A_full - max(A_text, c)`. Signed; negative means images hurt.
pub fn vgg(a_full: f64, a_text: f64, c: f64) -> f64 {
    a_full - a_text.max(c)
}

/// No-Image Above-Chance in percentage points: `A_text_visreq - c`.
/// Positive values on vision-required items signal shortcut reliance;
/// may be negative under refusal behavior.
pub fn niac(a_text_visreq: f64, c: f64) -> f64 {
    a_text_visreq - c
}

/// Per-item evidence for reorder stability: what the model chose on the
/// original presentation and on each of the K permutations, compared by
/// option text (labels shift under permutation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderRecord {
    pub item_id: String,
    pub originally_correct: bool,
    pub original_text: Option<String>,
    pub reordered_texts: Vec<Option<String>>,
}

/// Item-level Reorder Stability: mean over originally-correct items of the
/// fraction of permutations on which the chosen text matched the original
/// choice. `Ok(None)` when no item was originally correct (undefined, not 0).
pub fn rs_items(records: &[ReorderRecord]) -> Result<Option<f64>, MetricsError> {
    let first = records.first().ok_or(MetricsError::EmptyInput)?;
    let k = first.reordered_texts.len();
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for record in records {
        if record.reordered_texts.len() != k {
            return Err(MetricsError::InconsistentK {
                item_id: record.item_id.clone(),
                expected: k,
                got: record.reordered_texts.len(),
            });
        }
        if !record.originally_correct {
            continue;
        }
        let stable = record
            .reordered_texts
            .iter()
            .filter(
                |choice| matches!((choice, &record.original_text), (Some(a), Some(b)) if a == b),
            )
            .count();
        sum += stable as f64 / k as f64;
        count += 1;
    }
    if count == 0 {
        Ok(None)
    } else {
        Ok(Some(sum / count as f64))
    }
}

/// Aggregate-accuracy proxy for reorder stability:
/// `1 - |A_reord - A_orig| / (100 - c)`, floored at 0 so the score stays a
/// fraction even for swings larger than the above-chance range.
pub fn rs_agg(a_orig: f64, a_reord: f64, c: f64) -> Result<f64, MetricsError> {
    check_chance(c)?;
    Ok((1.0 - (a_reord - a_orig).abs() / (100.0 - c)).max(0.0))
}

fn r_value(map: &BTreeMap<u8, f64>, r: u8) -> Result<f64, MetricsError> {
    map.get(&r).copied().ok_or(MetricsError::MissingR(r))
}

/// Distractor Grounding Advantage: mean over r in 0..=4 of the normalized
/// image-over-text advantage. In [-1, 1]; reported in pp via `80 * DGA`
/// at the 5-choice chance level.
pub fn dga(
    a_full: &BTreeMap<u8, f64>,
    a_text: &BTreeMap<u8, f64>,
    c: f64,
) -> Result<f64, MetricsError> {
    check_chance(c)?;
    let mut sum = 0.0;
    for r in 0..=4u8 {
        sum += nacc(r_value(a_full, r)?, c)? - nacc(r_value(a_text, r)?, c)?;
    }
    Ok(sum / 5.0)
}

/// Visual Grounding Score:
/// `nacc(A_full) * max(0, A_full - max(A_text, c)) / (100 - c)`, in [0, 1].
pub fn vgs(a_full: f64, a_text: f64, c: f64) -> Result<f64, MetricsError> {
    Ok(nacc(a_full, c)? * vgg(a_full, a_text, c).max(0.0) / (100.0 - c))
}

/// Distractor Robustness Score:
/// `clip(0.5 + 0.5 * (mean_r nacc(A_full) - mean_r nacc(A_text)), 0, 1)`.
pub fn drs(
    a_full: &BTreeMap<u8, f64>,
    a_text: &BTreeMap<u8, f64>,
    c: f64,
) -> Result<f64, MetricsError> {
    check_chance(c)?;
    let mut full_mean = 0.0;
    let mut text_mean = 0.0;
    for r in 0..=4u8 {
        full_mean += nacc(r_value(a_full, r)?, c)?;
        text_mean += nacc(r_value(a_text, r)?, c)?;
    }
    Ok((0.5 + 0.5 * (full_mean - text_mean) / 5.0).clamp(0.0, 1.0))
}

/// Composite Stress Robustness weights, fixed a priori.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsrWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CsrWeights {
    fn default() -> Self {
        CsrWeights {
            alpha: 0.6,
            beta: 0.2,
            gamma: 0.2,
        }
    }
}

/// Composite Stress Robustness on a 0-100 scale:
/// `100 * (alpha*VGS + beta*RS_agg + gamma*DRS)`.
pub fn csr(vgs: f64, rs_agg: f64, drs: f64, weights: &CsrWeights) -> f64 {
    100.0 * (weights.alpha * vgs + weights.beta * rs_agg + weights.gamma * drs)
}

/// One dataset's accuracy pair for the weighted modality-drop term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityPair {
    pub dataset_id: String,
    /// Item count (or configured weight) for this dataset.
    pub n: f64,
    pub a_image: f64,
    pub a_text: f64,
}

/// Accuracies feeding the composite distractor-replacement fragility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T4Inputs {
    pub a_text_base: f64,
    pub a_text_4r: f64,
    pub a_img_base: f64,
    pub a_img_4r: f64,
    pub a_text_unk: f64,
    /// Text-only base accuracy restricted to the item subset used in the
    /// unknown variant.
    pub a_text_base_unk: f64,
}

/// Inputs for the five fragility components; absent components yield
/// absent scores, never zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FragilityInputs {
    pub modality: Option<Vec<ModalityPair>>,
    pub a_text_visreq: Option<f64>,
    /// (text-only original, text-only reordered) accuracies.
    pub reorder: Option<(f64, f64)>,
    pub t4: Option<T4Inputs>,
    /// (original, substituted) image+text accuracies.
    pub substitution: Option<(f64, f64)>,
}

/// Fragility values f1..f5 in [0, 1], their complements r_i = 1 - f_i,
/// and the unweighted mean robustness over the five tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FragilityScores {
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub f3: Option<f64>,
    pub f4: Option<f64>,
    pub f5: Option<f64>,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub r3: Option<f64>,
    pub r4: Option<f64>,
    pub r5: Option<f64>,
    /// Defined only when all five components are present.
    pub mean_robustness: Option<f64>,
}

/// Compute the per-test fragility components:
///
/// - f1: item-count-weighted performance drop when images are removed,
///   over any number of datasets;
/// - f2: excess text-only accuracy above chance on vision-required items;
/// - f3: text-only accuracy drop after option reordering;
/// - f4: 0.5/0.3/0.2-weighted mix of text degradation at 4R, image gain
///   at 4R, and the unknown-distractor boost;
/// - f5: accuracy drop under distractor-aligned image substitution.
pub fn fragility(inputs: &FragilityInputs, c: f64) -> Result<FragilityScores, MetricsError> {
    check_chance(c)?;
    let mut scores = FragilityScores::default();

    if let Some(pairs) = &inputs.modality {
        if pairs.is_empty() {
            return Err(MetricsError::EmptyDatasetSet);
        }
        let total: f64 = pairs.iter().map(|p| p.n).sum();
        let dropped: f64 = pairs
            .iter()
            .map(|p| p.n * (p.a_image - p.a_text).max(0.0))
            .sum();
        scores.f1 = Some(dropped / (100.0 * total));
    }
    if let Some(a_text) = inputs.a_text_visreq {
        scores.f2 = Some((a_text - c).max(0.0) / (100.0 - c));
    }
    if let Some((orig, reord)) = inputs.reorder {
        scores.f3 = Some((orig - reord).max(0.0) / 100.0);
    }
    if let Some(t4) = inputs.t4 {
        let (w_text, w_img, w_unk) = F4_WEIGHTS;
        scores.f4 = Some(
            w_text * (t4.a_text_base - t4.a_text_4r).max(0.0) / 100.0
                + w_img * (t4.a_img_4r - t4.a_img_base).max(0.0) / 100.0
                + w_unk * (t4.a_text_unk - t4.a_text_base_unk).max(0.0) / 100.0,
        );
    }
    if let Some((orig, subst)) = inputs.substitution {
        scores.f5 = Some((orig - subst).max(0.0) / 100.0);
    }

    scores.r1 = scores.f1.map(|f| 1.0 - f);
    scores.r2 = scores.f2.map(|f| 1.0 - f);
    scores.r3 = scores.f3.map(|f| 1.0 - f);
    scores.r4 = scores.f4.map(|f| 1.0 - f);
    scores.r5 = scores.f5.map(|f| 1.0 - f);
    if let (Some(r1), Some(r2), Some(r3), Some(r4), Some(r5)) =
        (scores.r1, scores.r2, scores.r3, scores.r4, scores.r5)
    {
        scores.mean_robustness = Some((r1 + r2 + r3 + r4 + r5) / 5.0);
    }
    Ok(scores)
}

/// Full per-model metric bundle. Metrics whose inputs are absent stay
/// `None`; they are reported as absent, never as zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StressScores {
    /// Image benefit in pp per dataset (Test 1).
    pub vgg_pp: BTreeMap<String, f64>,
    pub niac_pp: Option<f64>,
    /// Item-level reorder stability, text-only condition.
    pub rs: Option<f64>,
    /// Item-level reorder stability, image+text condition.
    pub rs_image_text: Option<f64>,
    pub rs_agg: Option<f64>,
    pub dga: Option<f64>,
    pub dga_pp: Option<f64>,
    pub vgs: Option<f64>,
    pub drs: Option<f64>,
    pub csr: Option<f64>,
    pub fragility: FragilityScores,
    /// Fraction of substituted-image answers that stuck with the original
    /// answer label (Test 5 companion measure).
    pub stick_rate: Option<f64>,
    pub chance: f64,
    pub csr_weights: CsrWeights,
    pub f4_weights: (f64, f64, f64),
}

impl StressScores {
    pub fn new(chance: f64, weights: CsrWeights) -> Self {
        StressScores {
            chance,
            csr_weights: weights,
            f4_weights: F4_WEIGHTS,
            ..StressScores::default()
        }
    }
}

/// Which dataset ids in an accuracy table carry which scopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLayout {
    /// Dataset carrying the vision-required subset cells (Tests 2-4).
    pub visreq_dataset: String,
    /// Dataset carrying the visual-substitution subset cells (Test 5).
    pub subst_dataset: String,
    /// Datasets carrying whole-benchmark modality cells (Test 1); empty
    /// means "every other dataset with a paired base cell".
    #[serde(default)]
    pub modality_datasets: Vec<String>,
    /// Optional item-count overrides for the f1 weighting.
    #[serde(default)]
    pub dataset_weights: BTreeMap<String, f64>,
}

impl Default for TableLayout {
    fn default() -> Self {
        TableLayout {
            visreq_dataset: "visreq".to_string(),
            subst_dataset: "subst".to_string(),
            modality_datasets: Vec::new(),
            dataset_weights: BTreeMap::new(),
        }
    }
}

struct CellIndex<'a> {
    cells: BTreeMap<(&'a str, &'a str), &'a AccuracyCell>,
}

impl<'a> CellIndex<'a> {
    fn build(cells: &'a [AccuracyCell], model_id: &str) -> Self {
        let mut index = BTreeMap::new();
        for cell in cells.iter().filter(|c| c.model_id == model_id) {
            index.insert(
                (cell.dataset_id.as_str(), cell.condition_class.as_str()),
                cell,
            );
        }
        CellIndex { cells: index }
    }

    fn get(&self, dataset: &str, class: &str) -> Option<&AccuracyCell> {
        self.cells.get(&(dataset, class)).copied()
    }

    fn acc(&self, dataset: &str, class: &str) -> Option<f64> {
        self.get(dataset, class).map(|c| c.accuracy)
    }

    /// r-level accuracy with the base cell standing in for r=0 when no
    /// dedicated r=0 cell exists (published tables report a Base column).
    fn r_map(&self, dataset: &str, modality: &str) -> Option<BTreeMap<u8, f64>> {
        let mut map = BTreeMap::new();
        for r in 0..=4u8 {
            let direct = self.acc(dataset, &format!("{modality}/r={r}"));
            let value = match (direct, r) {
                (Some(v), _) => v,
                (None, 0) => self.acc(dataset, &format!("{modality}/base"))?,
                (None, _) => return None,
            };
            map.insert(r, value);
        }
        Some(map)
    }

    fn datasets(&self) -> Vec<&'a str> {
        let mut out: Vec<&str> = self.cells.keys().map(|(d, _)| *d).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Replay an accuracy table into a per-model score bundle. Metrics whose
/// cells are missing come back absent.
pub fn scores_from_cells(
    cells: &[AccuracyCell],
    model_id: &str,
    layout: &TableLayout,
    chance: f64,
    weights: &CsrWeights,
) -> Result<StressScores, MetricsError> {
    check_chance(chance)?;
    let index = CellIndex::build(cells, model_id);
    let mut scores = StressScores::new(chance, *weights);
    let visreq = layout.visreq_dataset.as_str();
    let subst = layout.subst_dataset.as_str();

    let modality_datasets: Vec<String> = if layout.modality_datasets.is_empty() {
        index
            .datasets()
            .into_iter()
            .filter(|d| *d != visreq && *d != subst)
            .filter(|d| {
                index.acc(d, "IMAGE_TEXT/base").is_some()
                    && index.acc(d, "TEXT_ONLY/base").is_some()
            })
            .map(str::to_string)
            .collect()
    } else {
        layout.modality_datasets.clone()
    };

    let mut pairs = Vec::new();
    for dataset in &modality_datasets {
        let (Some(full_cell), Some(text_cell)) = (
            index.get(dataset, "IMAGE_TEXT/base"),
            index.get(dataset, "TEXT_ONLY/base"),
        ) else {
            continue;
        };
        scores.vgg_pp.insert(
            dataset.clone(),
            vgg(full_cell.accuracy, text_cell.accuracy, chance),
        );
        let n = layout
            .dataset_weights
            .get(dataset)
            .copied()
            .unwrap_or(full_cell.n as f64);
        pairs.push(ModalityPair {
            dataset_id: dataset.clone(),
            n,
            a_image: full_cell.accuracy,
            a_text: text_cell.accuracy,
        });
    }

    let a_full_base = index.acc(visreq, "IMAGE_TEXT/base");
    let a_text_base = index.acc(visreq, "TEXT_ONLY/base");
    let a_text_reord = index.acc(visreq, "TEXT_ONLY/reordered");
    let full_map = index.r_map(visreq, "IMAGE_TEXT");
    let text_map = index.r_map(visreq, "TEXT_ONLY");
    let a_text_unk = index.acc(visreq, "TEXT_ONLY/unknown");
    let a_subst_orig = index.acc(subst, "IMAGE_TEXT/base");
    let a_subst = index.acc(subst, "IMAGE_TEXT/substituted");

    scores.niac_pp = a_text_base.map(|a| niac(a, chance));
    if let (Some(orig), Some(reord)) = (a_text_base, a_text_reord) {
        scores.rs_agg = Some(rs_agg(orig, reord, chance)?);
    }
    if let (Some(full), Some(text)) = (&full_map, &text_map) {
        let value = dga(full, text, chance)?;
        scores.dga = Some(value);
        scores.dga_pp = Some((100.0 - chance) * value);
        scores.drs = Some(drs(full, text, chance)?);
    }
    if let (Some(full), Some(text)) = (a_full_base, a_text_base) {
        scores.vgs = Some(vgs(full, text, chance)?);
    }
    if let (Some(v), Some(ra), Some(d)) = (scores.vgs, scores.rs_agg, scores.drs) {
        scores.csr = Some(csr(v, ra, d, weights));
    }

    let t4 = match (&full_map, &text_map, a_text_unk, a_full_base, a_text_base) {
        (Some(full), Some(text), Some(unk), full_base, text_base) => Some(T4Inputs {
            a_text_base: text_base.unwrap_or(text[&0]),
            a_text_4r: text[&4],
            a_img_base: full_base.unwrap_or(full[&0]),
            a_img_4r: full[&4],
            a_text_unk: unk,
            a_text_base_unk: text_base.unwrap_or(text[&0]),
        }),
        _ => None,
    };

    scores.fragility = fragility(
        &FragilityInputs {
            modality: if pairs.is_empty() { None } else { Some(pairs) },
            a_text_visreq: a_text_base,
            reorder: a_text_base.zip(a_text_reord),
            t4,
            substitution: a_subst_orig.zip(a_subst),
        },
        chance,
    )?;
    Ok(scores)
}

/// Read an accuracy table from CSV with columns
/// `dataset_id,model_id,condition_class,n,accuracy[,abstention_rate]`.
pub fn read_cells_csv(path: impl AsRef<Path>) -> Result<Vec<AccuracyCell>, MetricsError> {
    let path = path.as_ref();
    let to_err = |message: String| MetricsError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| to_err(e.to_string()))?;
    let mut cells = Vec::new();
    for row in reader.deserialize::<AccuracyCell>() {
        cells.push(row.map_err(|e| to_err(e.to_string()))?);
    }
    Ok(cells)
}

/// Write an accuracy table as CSV at full precision.
pub fn write_cells_csv(cells: &[AccuracyCell], path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let to_err = |message: String| MetricsError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut writer = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
    for cell in cells {
        writer.serialize(cell).map_err(|e| to_err(e.to_string()))?;
    }
    writer.flush().map_err(|e| to_err(e.to_string()))
}
