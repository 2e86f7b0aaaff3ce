#![allow(dead_code)]

//! Shared fixtures for integration tests: synthetic corpora and run
//! configurations wired to mock adapters.

use std::collections::BTreeMap;
use std::path::Path;

use stressprobe::corpus::{write_items, Corpus, Item, Label, OptionEntry, SubstitutionEntry};
use stressprobe::harness::RunConfig;
use stressprobe::metrics::{CsrWeights, CHANCE_5_CHOICE};
use stressprobe::modelio::ModelSpec;
use stressprobe::perturb::{PromptMode, Protocol};

/// A 5-option item with distinct texts; the answer label cycles with `n`.
pub fn synthetic_item(n: usize) -> Item {
    let options = (0..5)
        .map(|i| OptionEntry {
            label: Label::from_index(i).unwrap(),
            text: format!("finding {n}-{i}"),
        })
        .collect();
    Item {
        id: format!("item-{n:04}"),
        benchmark_id: "synthetic".to_string(),
        stem: format!("What is the diagnosis in case {n}?"),
        options,
        answer_label: Label::from_index(n % 5).unwrap(),
        images: Vec::new(),
        vision_required: true,
        content_filtered: false,
        metadata: BTreeMap::new(),
    }
}

pub fn synthetic_corpus(n: usize) -> Corpus {
    let items = (0..n).map(synthetic_item).collect();
    Corpus::from_items(items, ".").unwrap()
}

/// Substitution entries aligning every item to its first distractor.
pub fn substitution_entries(corpus: &Corpus) -> Vec<SubstitutionEntry> {
    corpus
        .items()
        .iter()
        .map(|item| {
            let distractor = (0..5)
                .map(|i| Label::from_index(i).unwrap())
                .find(|l| *l != item.answer_label)
                .unwrap();
            SubstitutionEntry {
                item_id: item.id.clone(),
                substitute_image: format!("subs/{}.png", item.id),
                aligned_label: distractor,
            }
        })
        .collect()
}

/// A mock-model run config over a freshly written synthetic corpus.
pub fn mock_config(
    dir: &Path,
    models: Vec<ModelSpec>,
    protocols: Vec<Protocol>,
    n_items: usize,
) -> (RunConfig, Corpus) {
    let items: Vec<Item> = (0..n_items).map(synthetic_item).collect();
    let corpus_path = dir.join("items.jsonl");
    write_items(&items, &corpus_path).unwrap();
    let corpus = Corpus::load(&corpus_path).unwrap();
    let config = RunConfig {
        corpus: corpus_path,
        models,
        protocols,
        prompt_modes: vec![PromptMode::Direct],
        master_seed: 7,
        k_permutations: 5,
        r_set: vec![0, 1, 2, 3, 4],
        include_unknown_variant: false,
        substitution_map: None,
        dataset_weights: BTreeMap::new(),
        cache_root: dir.join("cache"),
        output_root: dir.join("out"),
        record_failures: false,
        refusal_lexicon: None,
        chance: CHANCE_5_CHOICE,
        csr_weights: CsrWeights::default(),
    };
    (config, corpus)
}
