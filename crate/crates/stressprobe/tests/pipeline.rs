//! End-to-end pipeline checks: mock campaign -> reports -> table replay,
//! and annotations -> profiles -> landscape emission.

mod common;

use std::collections::BTreeMap;

use common::{mock_config, substitution_entries};
use stressprobe::harness::{build_adapters, execute, plan, score_run};
use stressprobe::metrics::{scores_from_cells, StressScores};
use stressprobe::modelio::{AdapterKind, ModelSpec, ResponseCache};
use stressprobe::perturb::Protocol;
use stressprobe::report::{emit, load_bundle, ReportBundle, ReportFormat};
use stressprobe::rubric::{benchmark_profiles, default_axes};

/// Null out the fields that only a live run (not a table) can produce.
fn cells_only(scores: &StressScores) -> StressScores {
    StressScores {
        rs: None,
        rs_image_text: None,
        stick_rate: None,
        ..scores.clone()
    }
}

#[test]
fn json_report_replays_to_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, corpus) = mock_config(
        dir.path(),
        vec![
            ModelSpec::mock("oracle", AdapterKind::MockOracle),
            ModelSpec::mock("position", AdapterKind::MockPosition),
            ModelSpec::mock("random", AdapterKind::MockRandom),
        ],
        vec![
            Protocol::T1,
            Protocol::T2,
            Protocol::T3,
            Protocol::T4,
            Protocol::T5,
        ],
        10,
    );
    config.include_unknown_variant = true;
    config.substitution_map = Some(dir.path().join("map.json"));
    let subs = substitution_entries(&corpus);

    let run_plan = plan(&config, &corpus, Some(&subs)).unwrap();
    let cache = ResponseCache::new(config.effective_cache_root());
    let adapters = build_adapters(&config, &corpus).unwrap();
    let records = execute(&run_plan, &config, &cache, &adapters).unwrap();
    let scores = score_run(&records, &corpus, &config, Some(&subs)).unwrap();

    let bundle = ReportBundle::from_scores(&scores);
    let reports = dir.path().join("reports");
    emit(&bundle, &reports, &ReportFormat::ALL).unwrap();
    for file in [
        "accuracy.csv",
        "robustness.csv",
        "curves.csv",
        "summary.md",
        "stress_scores.json",
    ] {
        assert!(reports.join(file).is_file(), "missing report file {file}");
    }

    // Re-ingest the JSON report and replay its accuracy cells through the
    // metric engine: the cell-derived scores must reproduce identically.
    let reloaded = load_bundle(reports.join("stress_scores.json")).unwrap();
    assert_eq!(reloaded.cells, scores.cells);
    for (model, stored) in &reloaded.stress_scores {
        let replayed = scores_from_cells(
            &reloaded.cells,
            model,
            &reloaded.layout,
            config.chance,
            &config.csr_weights,
        )
        .unwrap();
        assert_eq!(replayed, cells_only(stored), "replay mismatch for {model}");
    }

    // Display rounding stays out of the computation path: the JSON cells
    // carry full precision even where the CSV shows two decimals.
    let accuracy_csv = std::fs::read_to_string(reports.join("accuracy.csv")).unwrap();
    assert!(accuracy_csv.starts_with("dataset_id,model_id,condition_class,n,accuracy"));
}

#[test]
fn oracle_and_position_disagree_on_stability_not_accuracy_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (config, corpus) = mock_config(
        dir.path(),
        vec![
            ModelSpec::mock("oracle", AdapterKind::MockOracle),
            ModelSpec::mock("position", AdapterKind::MockPosition),
        ],
        vec![Protocol::T3],
        25,
    );
    let run_plan = plan(&config, &corpus, None).unwrap();
    let cache = ResponseCache::new(config.effective_cache_root());
    let adapters = build_adapters(&config, &corpus).unwrap();
    let records = execute(&run_plan, &config, &cache, &adapters).unwrap();
    let scores = score_run(&records, &corpus, &config, None).unwrap();

    let oracle = &scores.per_model["oracle"];
    let position = &scores.per_model["position"];
    assert_eq!(oracle.rs, Some(1.0));
    assert!(
        position.rs.unwrap() < 0.5,
        "position shortcut must be unstable"
    );
    // The aggregate proxy also separates them.
    assert!(position.rs_agg.unwrap() < oracle.rs_agg.unwrap() + 1e-12);
}

#[test]
fn rubric_pipeline_emits_landscape() {
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let axes = default_axes();
    let axis_ids = axes.iter().map(|a| a.axis_id.clone()).collect();
    let records = stressprobe::corpus::load_annotations(
        workspace.join("fixtures/annotations.csv"),
        &axis_ids,
    )
    .unwrap();
    let corpus =
        stressprobe::corpus::Corpus::load(workspace.join("fixtures/demo_corpus.jsonl")).unwrap();
    let mut item_to_benchmark: BTreeMap<String, String> = corpus
        .items()
        .iter()
        .map(|i| (i.id.clone(), i.benchmark_id.clone()))
        .collect();
    // The fixture has one annotated item beyond the corpus' protocol set.
    item_to_benchmark
        .entry("demo-0007".to_string())
        .or_insert_with(|| "demo-vqa".to_string());

    let profiles = benchmark_profiles(&records, &item_to_benchmark, &axes).unwrap();
    assert_eq!(profiles.len(), 1);
    let profile = &profiles[0];
    assert_eq!(profile.benchmark_id, "demo-vqa");
    assert_eq!(profile.axes.len(), 10);
    let reasoning_steps = profile
        .axes
        .iter()
        .find(|a| a.axis_id == "reasoning_steps")
        .unwrap();
    assert_eq!(
        reasoning_steps.n_dropped_items, 1,
        "demo-0007 is incomplete"
    );

    let bundle = ReportBundle::default().with_rubric(&profiles).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit(&bundle, dir.path(), &ReportFormat::ALL).unwrap();
    let landscape = std::fs::read_to_string(dir.path().join("landscape.csv")).unwrap();
    assert!(landscape.contains("demo-vqa,MEAN,"));
    assert!(landscape.contains("demo-vqa,MEDIAN,"));
}
