//! Campaign orchestration: expand protocols into instance grids, schedule
//! model queries under per-model concurrency ceilings, checkpoint through
//! the response cache, and score completed runs.
//!
//! The cache is the resume point: killing a run loses nothing that was
//! persisted, and a warm rerun issues zero network calls.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Item, SubstitutionEntry};
use crate::metrics::{
    self, accuracy, AccuracyCell, CsrWeights, MetricsError, ReorderRecord, StressScores,
    TableLayout, CHANCE_5_CHOICE,
};
use crate::modelio::{
    query, AdapterKind, AnswerParser, FailurePolicy, HttpChatAdapter, HttpTransport, MockOracle,
    MockPosition, MockRandom, MockTextPrior, ModelAdapter, ModelAnswer, ModelError, ModelSpec,
    ResponseCache,
};
use crate::perturb::{
    build_condition_grid, GridParams, Modality, PerturbError, Perturbation, PerturbedInstance,
    PromptMode, Protocol,
};
use crate::seed::derive_seed;

/// Environment variable overriding the configured cache root.
pub const CACHE_ENV_VAR: &str = "STRESSPROBE_CACHE";

/// Dataset id carrying vision-required-subset cells.
pub const VISREQ_DATASET: &str = "visreq";
/// Dataset id carrying visual-substitution-subset cells.
pub const SUBST_DATASET: &str = "subst";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("records incomplete for protocol {protocol}: model {model_id} is missing {missing} of {planned} instances")]
    IncompleteProtocol {
        protocol: Protocol,
        model_id: String,
        missing: usize,
        planned: usize,
    },
    #[error(
        "manifest: completion count {completed} exceeds planned {planned} for model {model_id}"
    )]
    ManifestOverrun {
        model_id: String,
        completed: usize,
        planned: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_prompt_modes() -> Vec<PromptMode> {
    vec![PromptMode::Direct]
}

fn default_k() -> u32 {
    5
}

fn default_r_set() -> Vec<u8> {
    vec![0, 1, 2, 3, 4]
}

fn default_chance() -> f64 {
    CHANCE_5_CHOICE
}

/// Full description of a stress-test campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub models: Vec<ModelSpec>,
    pub protocols: Vec<Protocol>,
    #[serde(default = "default_prompt_modes")]
    pub prompt_modes: Vec<PromptMode>,
    pub master_seed: u64,
    #[serde(default = "default_k")]
    pub k_permutations: u32,
    #[serde(default = "default_r_set")]
    pub r_set: Vec<u8>,
    #[serde(default)]
    pub include_unknown_variant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitution_map: Option<PathBuf>,
    /// Overrides the per-dataset item counts weighting the modality-drop
    /// fragility term.
    #[serde(default)]
    pub dataset_weights: BTreeMap<String, f64>,
    pub cache_root: PathBuf,
    pub output_root: PathBuf,
    #[serde(default)]
    pub record_failures: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_lexicon: Option<Vec<String>>,
    #[serde(default = "default_chance")]
    pub chance: f64,
    #[serde(default)]
    pub csr_weights: CsrWeights,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.protocols.is_empty() {
            return Err(HarnessError::Config("protocol set is empty".to_string()));
        }
        if self.models.is_empty() {
            return Err(HarnessError::Config("no models configured".to_string()));
        }
        if self.prompt_modes.is_empty() {
            return Err(HarnessError::Config(
                "no prompt modes configured".to_string(),
            ));
        }
        if self.k_permutations < 1 {
            return Err(HarnessError::Config(
                "k_permutations must be >= 1".to_string(),
            ));
        }
        if self.protocols.contains(&Protocol::T5) && self.substitution_map.is_none() {
            return Err(HarnessError::Config(
                "protocol T5 requires substitution_map".to_string(),
            ));
        }
        let mut seen_models = BTreeSet::new();
        for spec in &self.models {
            spec.validate()?;
            if !seen_models.insert(spec.model_id.as_str()) {
                return Err(HarnessError::Config(format!(
                    "duplicate model_id {}",
                    spec.model_id
                )));
            }
        }
        Ok(())
    }

    /// Cache root, honoring the `STRESSPROBE_CACHE` override.
    pub fn effective_cache_root(&self) -> PathBuf {
        match std::env::var_os(CACHE_ENV_VAR) {
            Some(path) if !path.is_empty() => PathBuf::from(path),
            _ => self.cache_root.clone(),
        }
    }

    /// Digest of the canonical config JSON, recorded in the manifest.
    pub fn digest(&self) -> String {
        use sha2::Digest;
        let canonical = serde_json::to_vec(self).expect("config serialization cannot fail");
        let digest = sha2::Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parser(&self) -> AnswerParser {
        match &self.refusal_lexicon {
            Some(lexicon) => AnswerParser::new(lexicon.clone()),
            None => AnswerParser::default(),
        }
    }

    pub fn model_seed(&self, model_id: &str) -> u64 {
        derive_seed(self.master_seed, &["model", model_id])
    }

    fn table_layout(&self) -> TableLayout {
        TableLayout {
            visreq_dataset: VISREQ_DATASET.to_string(),
            subst_dataset: SUBST_DATASET.to_string(),
            modality_datasets: Vec::new(),
            dataset_weights: self.dataset_weights.clone(),
        }
    }
}

/// One planned query: a model asked about one generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedQuery {
    pub model_id: String,
    pub instance: PerturbedInstance,
}

/// Run header: counts and provenance, recorded before any network activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub generator_version: String,
    pub tool_version: String,
    pub models: Vec<String>,
    /// Grid sizes per protocol, summed over models and prompt modes.
    pub protocol_instances: BTreeMap<String, usize>,
    /// Deduplicated query count (protocols may share conditions).
    pub planned_queries: usize,
    pub planned_per_model: BTreeMap<String, usize>,
    pub created_unix_ms: u64,
}

/// A deterministic execution plan.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub manifest: RunManifest,
    pub queries: Vec<PlannedQuery>,
}

fn query_key(model_id: &str, instance: &PerturbedInstance) -> (String, String, String) {
    (
        model_id.to_string(),
        instance.item_id.clone(),
        instance.condition.canonical(),
    )
}

/// Expand the configured protocols over the corpus into the deduplicated
/// query grid. Deterministic in (corpus, config): per-model seeds derive
/// from the master seed, so growing the model list never disturbs the
/// instances planned for existing models.
pub fn plan(
    config: &RunConfig,
    corpus: &Corpus,
    substitutions: Option<&[SubstitutionEntry]>,
) -> Result<RunPlan, HarnessError> {
    config.validate()?;
    let items = corpus.protocol_items();

    let mut queries = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut protocol_instances: BTreeMap<String, usize> = BTreeMap::new();
    let mut planned_per_model: BTreeMap<String, usize> = BTreeMap::new();

    for spec in &config.models {
        let model_seed = config.model_seed(&spec.model_id);
        for &protocol in &config.protocols {
            for &mode in &config.prompt_modes {
                let params = GridParams {
                    seed: model_seed,
                    k_permutations: config.k_permutations,
                    r_set: config.r_set.clone(),
                    include_unknown_variant: config.include_unknown_variant,
                    prompt_mode: mode,
                    substitutions,
                };
                let grid = build_condition_grid(&items, protocol, &params)?;
                *protocol_instances.entry(protocol.to_string()).or_default() += grid.len();
                for instance in grid {
                    let key = query_key(&spec.model_id, &instance);
                    if seen.insert(key) {
                        *planned_per_model.entry(spec.model_id.clone()).or_default() += 1;
                        queries.push(PlannedQuery {
                            model_id: spec.model_id.clone(),
                            instance,
                        });
                    }
                }
            }
        }
    }

    let manifest = RunManifest {
        config_digest: config.digest(),
        generator_version: crate::GENERATOR_VERSION.to_string(),
        tool_version: crate::TOOL_VERSION.to_string(),
        models: config.models.iter().map(|m| m.model_id.clone()).collect(),
        protocol_instances,
        planned_queries: queries.len(),
        planned_per_model,
        created_unix_ms: crate::modelio::now_unix_ms(),
    };
    Ok(RunPlan { manifest, queries })
}

/// Memorized answers for the text-prior mock: every item's correct text.
fn text_prior_memory(corpus: &Corpus) -> BTreeMap<String, String> {
    corpus
        .items()
        .iter()
        .map(|item| (item.id.clone(), item.answer_text().to_string()))
        .collect()
}

/// Materialize one adapter per configured model.
pub fn build_adapters(
    config: &RunConfig,
    corpus: &Corpus,
) -> Result<BTreeMap<String, Arc<dyn ModelAdapter>>, HarnessError> {
    let mut adapters: BTreeMap<String, Arc<dyn ModelAdapter>> = BTreeMap::new();
    for spec in &config.models {
        let model_seed = config.model_seed(&spec.model_id);
        let adapter: Arc<dyn ModelAdapter> = match spec.adapter {
            AdapterKind::MockOracle => Arc::new(MockOracle),
            AdapterKind::MockPosition => Arc::new(MockPosition),
            AdapterKind::MockTextPrior => {
                Arc::new(MockTextPrior::new(text_prior_memory(corpus), model_seed))
            }
            AdapterKind::MockRandom => Arc::new(MockRandom::new(model_seed)),
            AdapterKind::HttpChat => Arc::new(HttpChatAdapter::new(
                spec,
                corpus.root(),
                Box::new(HttpTransport::new()),
            )?),
        };
        adapters.insert(spec.model_id.clone(), adapter);
    }
    Ok(adapters)
}

/// Execute a plan: every planned instance ends with exactly one answer
/// record. Queries dispatch concurrently up to each model's in-flight
/// ceiling; completed answers come back sorted by (model, item, condition)
/// so downstream aggregation is independent of completion order.
pub fn execute(
    plan: &RunPlan,
    config: &RunConfig,
    cache: &ResponseCache,
    adapters: &BTreeMap<String, Arc<dyn ModelAdapter>>,
) -> Result<Vec<ModelAnswer>, HarnessError> {
    let parser = config.parser();
    let failure_policy = if config.record_failures {
        FailurePolicy::RecordFailures
    } else {
        FailurePolicy::Abort
    };

    let mut by_model: BTreeMap<&str, Vec<&PlannedQuery>> = BTreeMap::new();
    for planned in &plan.queries {
        by_model
            .entry(planned.model_id.as_str())
            .or_default()
            .push(planned);
    }

    let specs: HashMap<&str, &ModelSpec> = config
        .models
        .iter()
        .map(|m| (m.model_id.as_str(), m))
        .collect();

    let stop = AtomicBool::new(false);
    let mut answers: Vec<ModelAnswer> = Vec::with_capacity(plan.queries.len());
    let mut first_error: Option<HarnessError> = None;

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (model_id, queue) in &by_model {
            let spec = specs[model_id];
            let adapter = adapters
                .get(*model_id)
                .unwrap_or_else(|| panic!("no adapter for model {model_id}"))
                .clone();
            let workers = spec.max_in_flight.max(1).min(queue.len().max(1));
            let cursor = Arc::new(AtomicUsize::new(0));
            for _ in 0..workers {
                let cursor = Arc::clone(&cursor);
                let adapter = adapter.clone();
                let parser = parser.clone();
                let queue: &[&PlannedQuery] = queue;
                let stop = &stop;
                handles.push(scope.spawn(move || {
                    let mut local: Vec<ModelAnswer> = Vec::new();
                    loop {
                        if stop.load(Ordering::SeqCst) {
                            return Ok(local);
                        }
                        let index = cursor.fetch_add(1, Ordering::SeqCst);
                        if index >= queue.len() {
                            return Ok(local);
                        }
                        let planned = queue[index];
                        match query(
                            spec,
                            adapter.as_ref(),
                            &planned.instance,
                            planned.instance.condition.prompt_mode,
                            cache,
                            &parser,
                            failure_policy,
                        ) {
                            Ok(answer) => local.push(answer),
                            Err(err) => {
                                stop.store(true, Ordering::SeqCst);
                                return Err((err, local));
                            }
                        }
                    }
                }));
            }
        }
        for handle in handles {
            match handle.join().expect("worker thread panicked") {
                Ok(local) => answers.extend(local),
                Err((err, local)) => {
                    answers.extend(local);
                    if first_error.is_none() {
                        first_error = Some(HarnessError::Model(err));
                    }
                }
            }
        }
    });

    if let Some(err) = first_error {
        return Err(err);
    }
    answers.sort_by(|a, b| {
        (&a.model_id, &a.item_id, a.condition.canonical()).cmp(&(
            &b.model_id,
            &b.item_id,
            b.condition.canonical(),
        ))
    });
    Ok(answers)
}

/// Persist answer records as JSONL.
pub fn save_records(records: &[ModelAnswer], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for record in records {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ModelAnswer>, HarnessError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Append-only manifest log: one JSON event per line.
pub struct ManifestLog {
    path: PathBuf,
}

impl ManifestLog {
    pub fn new(output_root: impl AsRef<Path>) -> Self {
        ManifestLog {
            path: output_root.as_ref().join("manifest.jsonl"),
        }
    }

    pub fn append(&self, event: &serde_json::Value) -> Result<(), HarnessError> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        writeln!(file, "{event}").map_err(|e| io_err(&self.path, e))
    }

    pub fn planned(&self, manifest: &RunManifest) -> Result<(), HarnessError> {
        self.append(&serde_json::json!({ "event": "planned", "manifest": manifest }))
    }

    pub fn model_completed(
        &self,
        manifest: &RunManifest,
        model_id: &str,
        completed: usize,
    ) -> Result<(), HarnessError> {
        let planned = manifest
            .planned_per_model
            .get(model_id)
            .copied()
            .unwrap_or(0);
        if completed > planned {
            return Err(HarnessError::ManifestOverrun {
                model_id: model_id.to_string(),
                completed,
                planned,
            });
        }
        self.append(&serde_json::json!({
            "event": "model_completed",
            "model_id": model_id,
            "completed": completed,
            "planned": planned,
            "at_unix_ms": crate::modelio::now_unix_ms(),
        }))
    }

    pub fn finished(&self, records: usize) -> Result<(), HarnessError> {
        self.append(&serde_json::json!({
            "event": "finished",
            "records": records,
            "at_unix_ms": crate::modelio::now_unix_ms(),
        }))
    }
}

/// Computed results of a run: per-model score bundles plus every accuracy
/// cell they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub per_model: BTreeMap<String, StressScores>,
    pub cells: Vec<AccuracyCell>,
    /// Extra measure for T5: fraction of substituted-image answers that
    /// stuck with the original answer label.
    pub layout: TableLayout,
}

struct RecordIndex<'a> {
    by_key: HashMap<(&'a str, &'a str, String), &'a ModelAnswer>,
}

impl<'a> RecordIndex<'a> {
    fn build(records: &'a [ModelAnswer]) -> Self {
        let mut by_key = HashMap::with_capacity(records.len());
        for record in records {
            by_key.insert(
                (
                    record.model_id.as_str(),
                    record.item_id.as_str(),
                    record.condition.canonical(),
                ),
                record,
            );
        }
        RecordIndex { by_key }
    }

    fn get(&self, model_id: &str, instance: &PerturbedInstance) -> Option<&'a ModelAnswer> {
        self.by_key
            .get(&(
                model_id,
                instance.item_id.as_str(),
                instance.condition.canonical(),
            ))
            .copied()
    }
}

/// Verify that every instance a protocol plans has a record, naming the
/// first protocol that comes up short.
fn check_completeness(
    config: &RunConfig,
    corpus: &Corpus,
    substitutions: Option<&[SubstitutionEntry]>,
    index: &RecordIndex<'_>,
) -> Result<(), HarnessError> {
    let items = corpus.protocol_items();
    for spec in &config.models {
        let model_seed = config.model_seed(&spec.model_id);
        for &protocol in &config.protocols {
            for &mode in &config.prompt_modes {
                let params = GridParams {
                    seed: model_seed,
                    k_permutations: config.k_permutations,
                    r_set: config.r_set.clone(),
                    include_unknown_variant: config.include_unknown_variant,
                    prompt_mode: mode,
                    substitutions,
                };
                let grid = build_condition_grid(&items, protocol, &params)?;
                let planned = grid.len();
                let missing = grid
                    .iter()
                    .filter(|instance| index.get(&spec.model_id, instance).is_none())
                    .count();
                if missing > 0 {
                    return Err(HarnessError::IncompleteProtocol {
                        protocol,
                        model_id: spec.model_id.clone(),
                        missing,
                        planned,
                    });
                }
            }
        }
    }
    Ok(())
}

fn strip_cot_suffix(class: &str) -> String {
    class.strip_suffix("/cot").unwrap_or(class).to_string()
}

/// Aggregate records into accuracy cells and the per-model score bundles.
///
/// Cells are scoped three ways: per-benchmark whole-set cells (Test 1),
/// pooled vision-required-subset cells under dataset id `visreq`
/// (Tests 2-4), and substitution-subset cells under `subst` (Test 5).
/// Score bundles are computed from the first configured prompt mode;
/// cells for other modes are still emitted (their classes carry a mode
/// suffix).
pub fn score_run(
    records: &[ModelAnswer],
    corpus: &Corpus,
    config: &RunConfig,
    substitutions: Option<&[SubstitutionEntry]>,
) -> Result<RunScores, HarnessError> {
    config.validate()?;
    let index = RecordIndex::build(records);
    check_completeness(config, corpus, substitutions, &index)?;

    let items = corpus.protocol_items();
    let item_by_id: HashMap<&str, &Item> = items.iter().map(|i| (i.id.as_str(), *i)).collect();
    let visreq_ids: BTreeSet<&str> = items
        .iter()
        .filter(|i| i.vision_required)
        .map(|i| i.id.as_str())
        .collect();
    let mapped_ids: BTreeSet<&str> = substitutions
        .map(|subs| subs.iter().map(|e| e.item_id.as_str()).collect())
        .unwrap_or_default();
    let mut by_benchmark: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for item in &items {
        by_benchmark
            .entry(item.benchmark_id.as_str())
            .or_default()
            .insert(item.id.as_str());
    }

    let has_t1 = config.protocols.contains(&Protocol::T1);
    let has_visreq_protocol = config
        .protocols
        .iter()
        .any(|p| matches!(p, Protocol::T2 | Protocol::T3 | Protocol::T4));
    let has_t3 = config.protocols.contains(&Protocol::T3);
    let has_t5 = config.protocols.contains(&Protocol::T5);
    let primary_mode = config.prompt_modes[0];

    // (dataset, class) -> answers, per model.
    let mut groups: BTreeMap<(String, String, String), Vec<&ModelAnswer>> = BTreeMap::new();
    for record in records {
        let Some(item) = item_by_id.get(record.item_id.as_str()) else {
            continue;
        };
        let class = record.condition.class();
        let is_base = matches!(record.condition.perturbation, Perturbation::None);
        let mut scopes: Vec<&str> = Vec::new();
        if has_t1 && is_base {
            scopes.push(item.benchmark_id.as_str());
        }
        if has_visreq_protocol
            && visreq_ids.contains(record.item_id.as_str())
            && !matches!(
                record.condition.perturbation,
                Perturbation::VisualSubstitute { .. }
            )
        {
            scopes.push(VISREQ_DATASET);
        }
        if has_t5
            && mapped_ids.contains(record.item_id.as_str())
            && record.condition.modality == Modality::ImageText
            && (is_base
                || matches!(
                    record.condition.perturbation,
                    Perturbation::VisualSubstitute { .. }
                ))
        {
            scopes.push(SUBST_DATASET);
        }
        for scope in scopes {
            groups
                .entry((record.model_id.clone(), scope.to_string(), class.clone()))
                .or_default()
                .push(record);
        }
    }

    let mut cells = Vec::new();
    for ((_, dataset, _), answers) in &groups {
        cells.push(accuracy(answers, dataset)?);
    }
    cells.sort_by(|a, b| {
        (&a.model_id, &a.dataset_id, &a.condition_class).cmp(&(
            &b.model_id,
            &b.dataset_id,
            &b.condition_class,
        ))
    });

    // Scoring cells: primary prompt mode only, with the mode suffix
    // normalized away so table lookups use the canonical class names.
    let scoring_cells: Vec<AccuracyCell> = cells
        .iter()
        .filter(|cell| {
            let is_cot_class = cell.condition_class.ends_with("/cot");
            match primary_mode {
                PromptMode::Direct => !is_cot_class,
                PromptMode::Cot => is_cot_class,
            }
        })
        .map(|cell| AccuracyCell {
            condition_class: strip_cot_suffix(&cell.condition_class),
            ..cell.clone()
        })
        .collect();

    let layout = config.table_layout();
    let mut per_model = BTreeMap::new();
    for spec in &config.models {
        let mut scores = metrics::scores_from_cells(
            &scoring_cells,
            &spec.model_id,
            &layout,
            config.chance,
            &config.csr_weights,
        )?;

        if has_t3 {
            scores.rs = reorder_stability(
                records,
                corpus,
                &spec.model_id,
                &visreq_ids,
                config.k_permutations,
                primary_mode,
                Modality::TextOnly,
            )?;
            scores.rs_image_text = reorder_stability(
                records,
                corpus,
                &spec.model_id,
                &visreq_ids,
                config.k_permutations,
                primary_mode,
                Modality::ImageText,
            )?;
        }
        if has_t5 {
            scores.stick_rate = stick_rate(records, corpus, &spec.model_id, primary_mode);
        }
        per_model.insert(spec.model_id.clone(), scores);
    }

    Ok(RunScores {
        per_model,
        cells,
        layout,
    })
}

/// Text of the option a record chose, under the record's own condition.
fn chosen_text(record: &ModelAnswer, item: &Item) -> Option<String> {
    let label = record.parsed.chosen_label()?;
    let position = label.index();
    match &record.condition.perturbation {
        Perturbation::None => item.options.get(position).map(|o| o.text.clone()),
        Perturbation::Reorder { permutation, .. } => permutation
            .get(position)
            .and_then(|&src| item.options.get(src))
            .map(|o| o.text.clone()),
        // Other perturbations change option texts; reconstructing them is
        // not needed for reorder stability.
        _ => None,
    }
}

fn reorder_stability(
    records: &[ModelAnswer],
    corpus: &Corpus,
    model_id: &str,
    visreq_ids: &BTreeSet<&str>,
    k_permutations: u32,
    mode: PromptMode,
    modality: Modality,
) -> Result<Option<f64>, HarnessError> {
    let mut originals: BTreeMap<&str, &ModelAnswer> = BTreeMap::new();
    let mut reordered: BTreeMap<&str, Vec<(u32, &ModelAnswer)>> = BTreeMap::new();
    for record in records {
        if record.model_id != model_id
            || record.condition.prompt_mode != mode
            || record.condition.modality != modality
            || !visreq_ids.contains(record.item_id.as_str())
        {
            continue;
        }
        match &record.condition.perturbation {
            Perturbation::None => {
                originals.insert(record.item_id.as_str(), record);
            }
            Perturbation::Reorder { k_index, .. } => {
                reordered
                    .entry(record.item_id.as_str())
                    .or_default()
                    .push((*k_index, record));
            }
            _ => {}
        }
    }
    if reordered.is_empty() {
        return Ok(None);
    }

    let mut reorder_records = Vec::new();
    for (item_id, mut ks) in reordered {
        let item = corpus.get(item_id).expect("record item exists in corpus");
        let original = originals
            .get(item_id)
            .unwrap_or_else(|| panic!("missing original record for item {item_id}"));
        ks.sort_by_key(|(k, _)| *k);
        reorder_records.push(ReorderRecord {
            item_id: item_id.to_string(),
            originally_correct: original.correct,
            original_text: chosen_text(original, item),
            reordered_texts: ks.iter().map(|(_, r)| chosen_text(r, item)).collect(),
        });
    }
    debug_assert!(reorder_records
        .iter()
        .all(|r| r.reordered_texts.len() == k_permutations as usize));
    Ok(metrics::rs_items(&reorder_records)?)
}

/// Fraction of substituted-image answers that stuck with the item's
/// original answer label. Substitution keeps the option order, so the
/// corpus item's answer label is directly comparable.
fn stick_rate(
    records: &[ModelAnswer],
    corpus: &Corpus,
    model_id: &str,
    mode: PromptMode,
) -> Option<f64> {
    let mut total = 0usize;
    let mut stuck = 0usize;
    for record in records {
        if record.model_id != model_id || record.condition.prompt_mode != mode {
            continue;
        }
        if matches!(
            record.condition.perturbation,
            Perturbation::VisualSubstitute { .. }
        ) {
            let Some(item) = corpus.get(&record.item_id) else {
                continue;
            };
            total += 1;
            if record.parsed.chosen_label() == Some(item.answer_label) {
                stuck += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(stuck as f64 / total as f64)
    }
}

/// Everything a finished campaign produced.
pub struct CampaignOutput {
    pub manifest: RunManifest,
    pub records: Vec<ModelAnswer>,
    pub scores: RunScores,
}

/// Run a full campaign: load, plan, execute (resuming from cache), score,
/// and write `run_config.json`, `manifest.jsonl`, and `records.jsonl`
/// under the output root.
pub fn run_campaign(config: &RunConfig) -> Result<CampaignOutput, HarnessError> {
    config.validate()?;
    let corpus = Corpus::load(&config.corpus)?;
    let substitutions = match &config.substitution_map {
        Some(path) => Some(crate::corpus::load_substitution_map(path, &corpus)?),
        None => None,
    };
    let subs = substitutions.as_deref();

    let run_plan = plan(config, &corpus, subs)?;
    std::fs::create_dir_all(&config.output_root).map_err(|e| io_err(&config.output_root, e))?;
    let config_path = config.output_root.join("run_config.json");
    let config_json = serde_json::to_vec_pretty(config).expect("config serialization cannot fail");
    std::fs::write(&config_path, config_json).map_err(|e| io_err(&config_path, e))?;

    let log = ManifestLog::new(&config.output_root);
    log.planned(&run_plan.manifest)?;

    let cache = ResponseCache::new(config.effective_cache_root());
    let adapters = build_adapters(config, &corpus)?;
    let records = execute(&run_plan, config, &cache, &adapters)?;

    let mut completed: BTreeMap<&str, usize> = BTreeMap::new();
    for record in &records {
        *completed.entry(record.model_id.as_str()).or_default() += 1;
    }
    for (model_id, count) in completed {
        log.model_completed(&run_plan.manifest, model_id, count)?;
    }

    save_records(&records, config.output_root.join("records.jsonl"))?;
    let scores = score_run(&records, &corpus, config, subs)?;
    log.finished(records.len())?;

    Ok(CampaignOutput {
        manifest: run_plan.manifest,
        records,
        scores,
    })
}
