//! Deterministic, seeded generators for the five stress-test input
//! transformations, plus protocol grid expansion.
//!
//! Generators are pure functions of `(inputs, seed)` and safe to invoke
//! concurrently. Per-item sub-seeds are derived as
//! `hash(seed, item_id, protocol, index)` so adding items to a corpus
//! never perturbs the instances generated for existing items.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Item, Label, OptionEntry, SubstitutionEntry};
use crate::seed::rng_for;
use crate::GENERATOR_VERSION;

/// Literal inserted by the unknown-distractor variant.
pub const UNKNOWN_TEXT: &str = "Unknown";

/// Input modality of a condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "IMAGE_TEXT")]
    ImageText,
    #[serde(rename = "TEXT_ONLY")]
    TextOnly,
}

/// Prompt style to render for a condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "DIRECT")]
    Direct,
    #[serde(rename = "COT")]
    Cot,
}

/// The structural transformation applied to an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Perturbation {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "REORDER")]
    Reorder {
        /// 1-based index of this permutation within the K drawn for the item.
        k_index: u32,
        /// `permutation[new_position] = source_position`.
        permutation: Vec<usize>,
    },
    #[serde(rename = "DISTRACTOR_REPLACE")]
    DistractorReplace {
        r: u8,
        unknown_variant: bool,
        /// Ids of the items each replacement text was sampled from.
        source_item_ids: Vec<String>,
    },
    #[serde(rename = "VISUAL_SUBSTITUTE")]
    VisualSubstitute {
        substitute_image: String,
        aligned_label: Label,
    },
}

/// Full condition descriptor for one generated instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub modality: Modality,
    pub perturbation: Perturbation,
    pub prompt_mode: PromptMode,
}

impl Condition {
    /// Canonical string encoding, used in cache keys and record grouping.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("condition serialization cannot fail")
    }

    /// Short class label for accuracy aggregation, e.g. `TEXT_ONLY/r=2`
    /// or `IMAGE_TEXT/reordered/cot`.
    pub fn class(&self) -> String {
        let modality = match self.modality {
            Modality::ImageText => "IMAGE_TEXT",
            Modality::TextOnly => "TEXT_ONLY",
        };
        let perturbation = match &self.perturbation {
            Perturbation::None => "base".to_string(),
            Perturbation::Reorder { .. } => "reordered".to_string(),
            Perturbation::DistractorReplace {
                unknown_variant: true,
                ..
            } => "unknown".to_string(),
            Perturbation::DistractorReplace { r, .. } => format!("r={r}"),
            Perturbation::VisualSubstitute { .. } => "substituted".to_string(),
        };
        match self.prompt_mode {
            PromptMode::Direct => format!("{modality}/{perturbation}"),
            PromptMode::Cot => format!("{modality}/{perturbation}/cot"),
        }
    }
}

/// An item after one protocol transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedInstance {
    pub item_id: String,
    pub condition: Condition,
    /// Stem text, byte-identical to the source item under every perturbation.
    pub stem: String,
    pub options_after: Vec<OptionEntry>,
    pub answer_label_after: Label,
    pub images_after: Vec<String>,
    pub seed: u64,
    pub generator_version: String,
    /// The source item's answer label, kept for stick-rate reporting under
    /// visual substitution.
    pub original_answer_label: Label,
}

impl PerturbedInstance {
    /// Copy of this instance with images stripped and modality TEXT_ONLY.
    pub fn to_text_only(&self) -> PerturbedInstance {
        let mut out = self.clone();
        out.images_after.clear();
        out.condition.modality = Modality::TextOnly;
        out
    }

    /// Copy with the given prompt mode.
    pub fn with_prompt_mode(&self, mode: PromptMode) -> PerturbedInstance {
        let mut out = self.clone();
        out.condition.prompt_mode = mode;
        out
    }

    pub fn option_by_label(&self, label: Label) -> Option<&OptionEntry> {
        self.options_after.iter().find(|o| o.label == label)
    }

    /// Text of the option the instance is scored against.
    pub fn target_text(&self) -> &str {
        &self.options_after[self.answer_label_after.index()].text
    }
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("item {item_id} has {n} options; this protocol assumes exactly 5")]
    NotFiveOptions { item_id: String, n: usize },
    #[error("item {item_id} has {n} options; at least 2 required")]
    TooFewOptions { item_id: String, n: usize },
    #[error("item {item_id}: requested {requested} permutations but only {available} distinct non-identity permutations exist")]
    TooManyPermutations {
        item_id: String,
        requested: u32,
        available: u128,
    },
    #[error("r must be in 0..=4, got {0}")]
    ROutOfRange(u8),
    #[error(
        "item {item_id}: replacement pool supplies only {available} usable texts, {needed} needed"
    )]
    PoolTooSmall {
        item_id: String,
        needed: usize,
        available: usize,
    },
    #[error("substitution entry is for item {entry_item}, not {item_id}")]
    MismatchedIds { item_id: String, entry_item: String },
    #[error(
        "substitution for item {item_id}: aligned label {label} is not a distractor of the item"
    )]
    BadAlignment { item_id: String, label: Label },
    #[error("protocol {protocol} requires at least one vision_required item")]
    NoVisionRequired { protocol: Protocol },
    #[error("protocol T5 requires a substitution map with at least one entry for the given items")]
    SubstitutionMapRequired,
}

fn relabel(texts: Vec<String>) -> Vec<OptionEntry> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| OptionEntry {
            label: Label::from_index(i).expect("option count is bounded by source item"),
            text,
        })
        .collect()
}

fn base_instance(
    item: &Item,
    modality: Modality,
    mode: PromptMode,
    seed: u64,
) -> PerturbedInstance {
    let images = match modality {
        Modality::ImageText => item.images.clone(),
        Modality::TextOnly => Vec::new(),
    };
    PerturbedInstance {
        item_id: item.id.clone(),
        condition: Condition {
            modality,
            perturbation: Perturbation::None,
            prompt_mode: mode,
        },
        stem: item.stem.clone(),
        options_after: item.options.clone(),
        answer_label_after: item.answer_label,
        images_after: images,
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
        original_answer_label: item.answer_label,
    }
}

/// The unperturbed image+text presentation of an item.
pub fn original(item: &Item, mode: PromptMode) -> PerturbedInstance {
    base_instance(item, Modality::ImageText, mode, 0)
}

/// Test 1 transformation: remove the image, keep everything else.
/// Idempotent; imageless items pass through with only the modality changed.
pub fn ablate_modality(item: &Item, mode: PromptMode) -> PerturbedInstance {
    base_instance(item, Modality::TextOnly, mode, 0)
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

fn draw_non_identity_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let identity: Vec<usize> = (0..n).collect();
    loop {
        let mut perm = identity.clone();
        perm.shuffle(rng);
        if perm != identity {
            return perm;
        }
    }
}

/// Test 3 transformation: draw K option-order permutations uniformly at
/// random without replacement from the non-identity permutations, relabel
/// positions A.., and track the correct text's new position.
///
/// Permutation `k` is drawn from its own derived stream, so raising K
/// extends the list without disturbing earlier permutations.
pub fn reorder_options(
    item: &Item,
    seed: u64,
    k_permutations: u32,
    mode: PromptMode,
) -> Result<Vec<PerturbedInstance>, PerturbError> {
    let n = item.options.len();
    if n < 2 {
        return Err(PerturbError::TooFewOptions {
            item_id: item.id.clone(),
            n,
        });
    }
    let available = factorial(n) - 1;
    if u128::from(k_permutations) > available {
        return Err(PerturbError::TooManyPermutations {
            item_id: item.id.clone(),
            requested: k_permutations,
            available,
        });
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(k_permutations as usize);
    for k in 1..=k_permutations {
        let mut rng = rng_for(seed, &[&item.id, "reorder", &k.to_string()]);
        let perm = loop {
            let candidate = draw_non_identity_permutation(n, &mut rng);
            if seen.insert(candidate.clone()) {
                break candidate;
            }
        };
        let texts: Vec<String> = perm
            .iter()
            .map(|&src| item.options[src].text.clone())
            .collect();
        let answer_pos = perm
            .iter()
            .position(|&src| src == item.answer_label.index())
            .expect("permutation is a bijection");
        out.push(PerturbedInstance {
            item_id: item.id.clone(),
            condition: Condition {
                modality: Modality::ImageText,
                perturbation: Perturbation::Reorder {
                    k_index: k,
                    permutation: perm,
                },
                prompt_mode: mode,
            },
            stem: item.stem.clone(),
            options_after: relabel(texts),
            answer_label_after: Label::from_index(answer_pos).expect("position < option count"),
            images_after: item.images.clone(),
            seed,
            generator_version: GENERATOR_VERSION.to_string(),
            original_answer_label: item.answer_label,
        });
    }
    Ok(out)
}

/// Option texts another item can contribute as replacement distractors:
/// its own distractors, never its correct answer.
fn candidate_texts(item: &Item, pool: &[&Item]) -> Vec<(String, String)> {
    let mut candidates: Vec<(String, String)> = Vec::new();
    for other in pool {
        if other.id == item.id {
            continue;
        }
        for (i, opt) in other.options.iter().enumerate() {
            if i != other.answer_label.index() {
                candidates.push((opt.text.clone(), other.id.clone()));
            }
        }
    }
    candidates.sort();
    candidates.dedup_by(|a, b| a.0 == b.0);
    candidates
}

/// Test 4 transformation: replace `r` distractor texts with distractors
/// sampled from other items (or, in the unknown variant, exactly one
/// distractor with the literal `"Unknown"`), then reshuffle all options
/// and reassign labels. The correct option's text is never touched, though
/// its label may shift in the final shuffle.
pub fn replace_distractors(
    item: &Item,
    r: u8,
    pool: &[&Item],
    seed: u64,
    unknown_variant: bool,
    mode: PromptMode,
) -> Result<PerturbedInstance, PerturbError> {
    if item.options.len() != 5 {
        return Err(PerturbError::NotFiveOptions {
            item_id: item.id.clone(),
            n: item.options.len(),
        });
    }
    if r > 4 {
        return Err(PerturbError::ROutOfRange(r));
    }

    let index_tag = if unknown_variant {
        "UNK".to_string()
    } else {
        r.to_string()
    };
    let mut rng = rng_for(seed, &[&item.id, "replace", &index_tag]);

    let answer_index = item.answer_label.index();
    let mut distractor_positions: Vec<usize> = (0..item.options.len())
        .filter(|&i| i != answer_index)
        .collect();
    distractor_positions.shuffle(&mut rng);

    let mut texts: Vec<String> = item.options.iter().map(|o| o.text.clone()).collect();
    let mut source_ids: Vec<String> = Vec::new();

    if unknown_variant {
        texts[distractor_positions[0]] = UNKNOWN_TEXT.to_string();
    } else if r > 0 {
        let mut candidates = candidate_texts(item, pool);
        candidates.shuffle(&mut rng);
        let present: HashSet<&str> = item.options.iter().map(|o| o.text.as_str()).collect();
        let mut usable = candidates
            .into_iter()
            .filter(|(text, _)| !present.contains(text.as_str()));

        for &pos in distractor_positions.iter().take(r as usize) {
            match usable.next() {
                Some((text, source_id)) => {
                    texts[pos] = text;
                    source_ids.push(source_id);
                }
                None => {
                    return Err(PerturbError::PoolTooSmall {
                        item_id: item.id.clone(),
                        needed: r as usize,
                        available: source_ids.len(),
                    })
                }
            }
        }
    }

    let answer_text = item.answer_text().to_string();
    texts.shuffle(&mut rng);
    let answer_pos = texts
        .iter()
        .position(|t| *t == answer_text)
        .expect("correct text is never replaced");

    Ok(PerturbedInstance {
        item_id: item.id.clone(),
        condition: Condition {
            modality: Modality::ImageText,
            perturbation: Perturbation::DistractorReplace {
                r: if unknown_variant { 1 } else { r },
                unknown_variant,
                source_item_ids: source_ids,
            },
            prompt_mode: mode,
        },
        stem: item.stem.clone(),
        options_after: relabel(texts),
        answer_label_after: Label::from_index(answer_pos).expect("position < 5"),
        images_after: item.images.clone(),
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
        original_answer_label: item.answer_label,
    })
}

/// Test 5 transformation: swap in the distractor-aligned image, keep the
/// question and options unchanged, and score against the aligned label.
pub fn substitute_image(
    item: &Item,
    entry: &SubstitutionEntry,
    mode: PromptMode,
) -> Result<PerturbedInstance, PerturbError> {
    if entry.item_id != item.id {
        return Err(PerturbError::MismatchedIds {
            item_id: item.id.clone(),
            entry_item: entry.item_id.clone(),
        });
    }
    if item.option_by_label(entry.aligned_label).is_none()
        || entry.aligned_label == item.answer_label
    {
        return Err(PerturbError::BadAlignment {
            item_id: item.id.clone(),
            label: entry.aligned_label,
        });
    }
    Ok(PerturbedInstance {
        item_id: item.id.clone(),
        condition: Condition {
            modality: Modality::ImageText,
            perturbation: Perturbation::VisualSubstitute {
                substitute_image: entry.substitute_image.clone(),
                aligned_label: entry.aligned_label,
            },
            prompt_mode: mode,
        },
        stem: item.stem.clone(),
        options_after: item.options.clone(),
        answer_label_after: entry.aligned_label,
        images_after: vec![entry.substitute_image.clone()],
        seed: 0,
        generator_version: GENERATOR_VERSION.to_string(),
        original_answer_label: item.answer_label,
    })
}

/// Stress-test protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::T1,
        Protocol::T2,
        Protocol::T3,
        Protocol::T4,
        Protocol::T5,
    ];
}

/// Parameters the grid builder draws on; which fields matter depends on
/// the protocol.
#[derive(Debug, Clone)]
pub struct GridParams<'a> {
    /// Per-model seed; sub-seeds derive from it per (item, protocol, index).
    pub seed: u64,
    pub k_permutations: u32,
    pub r_set: Vec<u8>,
    /// Emit the unknown-distractor variant alongside the T4 r-grid.
    pub include_unknown_variant: bool,
    pub prompt_mode: PromptMode,
    pub substitutions: Option<&'a [SubstitutionEntry]>,
}

impl GridParams<'_> {
    pub fn new(seed: u64) -> Self {
        GridParams {
            seed,
            k_permutations: 5,
            r_set: vec![0, 1, 2, 3, 4],
            include_unknown_variant: false,
            prompt_mode: PromptMode::Direct,
            substitutions: None,
        }
    }

    /// Exact number of instances the grid will emit for a protocol.
    pub fn expected_count(&self, protocol: Protocol, items: &[&Item]) -> usize {
        match protocol {
            Protocol::T1 => 2 * items.len(),
            Protocol::T2 => 2 * vision_required(items).len(),
            Protocol::T3 => {
                let n = vision_required(items).len();
                n * (2 * self.k_permutations as usize + 2)
            }
            Protocol::T4 => {
                let n = vision_required(items).len();
                let unk = if self.include_unknown_variant { 2 } else { 0 };
                n * (2 * self.r_set.len() + unk)
            }
            Protocol::T5 => {
                let ids: HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
                let mapped = self
                    .substitutions
                    .map(|s| {
                        s.iter()
                            .filter(|e| ids.contains(e.item_id.as_str()))
                            .count()
                    })
                    .unwrap_or(0);
                2 * mapped
            }
        }
    }
}

fn vision_required<'a>(items: &[&'a Item]) -> Vec<&'a Item> {
    items
        .iter()
        .copied()
        .filter(|i| i.vision_required)
        .collect()
}

/// Expand one protocol over the given items into its full instance grid.
///
/// T1 covers every item; T2–T4 select the vision-required subset (the
/// shared item split the protocols reuse); T5 covers items present in the
/// substitution map. Instance counts are exactly `expected_count`.
pub fn build_condition_grid(
    items: &[&Item],
    protocol: Protocol,
    params: &GridParams<'_>,
) -> Result<Vec<PerturbedInstance>, PerturbError> {
    let mode = params.prompt_mode;
    let mut grid = Vec::new();
    match protocol {
        Protocol::T1 => {
            for item in items {
                grid.push(original(item, mode));
                grid.push(ablate_modality(item, mode));
            }
        }
        Protocol::T2 => {
            let selected = vision_required(items);
            if selected.is_empty() {
                return Err(PerturbError::NoVisionRequired { protocol });
            }
            for item in selected {
                grid.push(ablate_modality(item, mode));
                grid.push(original(item, mode));
            }
        }
        Protocol::T3 => {
            let selected = vision_required(items);
            if selected.is_empty() {
                return Err(PerturbError::NoVisionRequired { protocol });
            }
            for item in selected {
                grid.push(original(item, mode));
                grid.push(ablate_modality(item, mode));
                let item_seed = crate::seed::derive_seed(params.seed, &[&item.id, "T3"]);
                for instance in reorder_options(item, item_seed, params.k_permutations, mode)? {
                    grid.push(instance.to_text_only());
                    grid.push(instance);
                }
            }
        }
        Protocol::T4 => {
            let selected = vision_required(items);
            if selected.is_empty() {
                return Err(PerturbError::NoVisionRequired { protocol });
            }
            for item in &selected {
                let item_seed = crate::seed::derive_seed(params.seed, &[&item.id, "T4"]);
                for &r in &params.r_set {
                    let instance = replace_distractors(item, r, &selected, item_seed, false, mode)?;
                    grid.push(instance.to_text_only());
                    grid.push(instance);
                }
                if params.include_unknown_variant {
                    let instance = replace_distractors(item, 0, &selected, item_seed, true, mode)?;
                    grid.push(instance.to_text_only());
                    grid.push(instance);
                }
            }
        }
        Protocol::T5 => {
            let entries = params
                .substitutions
                .ok_or(PerturbError::SubstitutionMapRequired)?;
            let mut emitted = 0usize;
            for item in items {
                for entry in entries.iter().filter(|e| e.item_id == item.id) {
                    grid.push(original(item, mode));
                    grid.push(substitute_image(item, entry, mode)?);
                    emitted += 1;
                }
            }
            if emitted == 0 {
                return Err(PerturbError::SubstitutionMapRequired);
            }
        }
    }
    Ok(grid)
}

/// Export instances as JSONL for audit.
pub fn write_instances(
    instances: &[PerturbedInstance],
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    for instance in instances {
        let line = serde_json::to_string(instance).expect("instance serialization cannot fail");
        writeln!(file, "{line}")?;
    }
    Ok(())
}
