//! Command-line front end for the stress-testing harness.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use stressprobe::corpus::{load_annotations, load_substitution_map, Corpus};
use stressprobe::harness::{run_campaign, score_run, RunConfig};
use stressprobe::metrics::{read_cells_csv, scores_from_cells, CsrWeights, TableLayout};
use stressprobe::report::{emit, ReportBundle, ReportFormat};
use stressprobe::rubric::{benchmark_profiles, default_axes, load_axes};

#[derive(Parser)]
#[command(
    name = "stressprobe",
    version,
    about = "Stress-testing harness for multiple-choice multimodal benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Md => ReportFormat::Md,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus (and optionally a substitution map).
    Validate {
        /// Items JSONL file.
        corpus: PathBuf,
        #[arg(long)]
        substitution_map: Option<PathBuf>,
    },
    /// Execute a full stress-test campaign from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metrics from a run directory, or replay an accuracy table.
    Metrics {
        /// Run directory (containing run_config.json and records.jsonl).
        #[arg(long, conflicts_with = "from_tables")]
        run: Option<PathBuf>,
        /// Accuracy table CSV with columns
        /// dataset_id,model_id,condition_class,n,accuracy[,abstention_rate].
        #[arg(long)]
        from_tables: Option<PathBuf>,
        /// Dataset id carrying the vision-required subset cells.
        #[arg(long, default_value = "visreq")]
        visreq_dataset: String,
        /// Dataset id carrying the visual-substitution subset cells.
        #[arg(long, default_value = "subst")]
        subst_dataset: String,
        /// Where to write stress_scores.json (defaults next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate clinician annotations into rubric profiles and landscape
    /// coordinates.
    Rubric {
        #[arg(long)]
        annotations: PathBuf,
        /// Axis set JSON; omitted means the built-in ten-axis rubric.
        #[arg(long)]
        axes: Option<PathBuf>,
        /// Corpus used to map items to benchmarks; omitted groups all
        /// annotations under one benchmark id "all".
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "rubric_out")]
        out: PathBuf,
    },
    /// Re-emit reports for a completed run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Formats to emit; omitted means all of csv, json, md.
        #[arg(long, value_enum)]
        format: Vec<FormatArg>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Validate {
            corpus,
            substitution_map,
        } => validate(corpus, substitution_map),
        Command::Run { config } => run(config),
        Command::Metrics {
            run,
            from_tables,
            visreq_dataset,
            subst_dataset,
            out,
        } => metrics_cmd(run, from_tables, visreq_dataset, subst_dataset, out),
        Command::Rubric {
            annotations,
            axes,
            corpus,
            out,
        } => rubric_cmd(annotations, axes, corpus, out),
        Command::Report { run, format } => report_cmd(run, format),
    }
}

fn validate(corpus_path: PathBuf, substitution_map: Option<PathBuf>) -> Result<()> {
    let corpus = Corpus::load(&corpus_path)
        .with_context(|| format!("validating {}", corpus_path.display()))?;
    let items = corpus.items();
    let benchmarks: HashSet<&str> = items.iter().map(|i| i.benchmark_id.as_str()).collect();
    let vision_required = items.iter().filter(|i| i.vision_required).count();
    let filtered = items.iter().filter(|i| i.content_filtered).count();
    let five_option = items.iter().filter(|i| i.options.len() == 5).count();
    println!(
        "corpus OK: {} items across {} benchmark(s)",
        items.len(),
        benchmarks.len()
    );
    println!("  vision_required: {vision_required}");
    println!("  content_filtered (excluded from protocols): {filtered}");
    println!("  five-option items: {five_option} / {}", items.len());
    if let Some(map_path) = substitution_map {
        let entries = load_substitution_map(&map_path, &corpus)
            .with_context(|| format!("validating {}", map_path.display()))?;
        println!("substitution map OK: {} entries", entries.len());
    }
    Ok(())
}

fn run(config_path: PathBuf) -> Result<()> {
    let config = RunConfig::load(&config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let output = run_campaign(&config).context("campaign failed")?;
    println!(
        "run complete: {} records across {} model(s)",
        output.records.len(),
        output.manifest.models.len()
    );

    let bundle = ReportBundle::from_scores(&output.scores);
    let reports_dir = config.output_root.join("reports");
    let written = emit(&bundle, &reports_dir, &ReportFormat::ALL)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn metrics_cmd(
    run: Option<PathBuf>,
    from_tables: Option<PathBuf>,
    visreq_dataset: String,
    subst_dataset: String,
    out: Option<PathBuf>,
) -> Result<()> {
    match (run, from_tables) {
        (Some(run_dir), None) => {
            let config = RunConfig::load(run_dir.join("run_config.json"))?;
            let corpus = Corpus::load(&config.corpus)?;
            let substitutions = config
                .substitution_map
                .as_ref()
                .map(|path| load_substitution_map(path, &corpus))
                .transpose()?;
            let records = stressprobe::harness::load_records(run_dir.join("records.jsonl"))?;
            let scores = score_run(&records, &corpus, &config, substitutions.as_deref())?;
            let bundle = ReportBundle::from_scores(&scores);
            let out_dir = out.unwrap_or_else(|| run_dir.join("reports"));
            emit(&bundle, &out_dir, &[ReportFormat::Json])?;
            println!("wrote {}", out_dir.join("stress_scores.json").display());
            print_score_lines(&scores.per_model);
            Ok(())
        }
        (None, Some(table_path)) => {
            let cells = read_cells_csv(&table_path)
                .with_context(|| format!("reading {}", table_path.display()))?;
            let layout = TableLayout {
                visreq_dataset,
                subst_dataset,
                modality_datasets: Vec::new(),
                dataset_weights: BTreeMap::new(),
            };
            let models: Vec<String> = {
                let mut out: Vec<String> = cells.iter().map(|c| c.model_id.clone()).collect();
                out.sort();
                out.dedup();
                out
            };
            let mut per_model = BTreeMap::new();
            for model in models {
                let scores = scores_from_cells(
                    &cells,
                    &model,
                    &layout,
                    stressprobe::metrics::CHANCE_5_CHOICE,
                    &CsrWeights::default(),
                )?;
                per_model.insert(model, scores);
            }
            print_score_lines(&per_model);
            if let Some(out_dir) = out {
                let scores = stressprobe::harness::RunScores {
                    per_model,
                    cells,
                    layout,
                };
                let bundle = ReportBundle::from_scores(&scores);
                emit(&bundle, &out_dir, &ReportFormat::ALL)?;
                println!("wrote reports under {}", out_dir.display());
            }
            Ok(())
        }
        _ => bail!("provide exactly one of --run or --from-tables"),
    }
}

fn print_score_lines(per_model: &BTreeMap<String, stressprobe::metrics::StressScores>) {
    for (model, scores) in per_model {
        let show = |v: Option<f64>| {
            v.map(|x| format!("{x:.4}"))
                .unwrap_or_else(|| "--".to_string())
        };
        println!(
            "{model}: CSR={} VGS={} RS_agg={} DRS={} DGA={} R={}",
            scores
                .csr
                .map(|x| format!("{x:.2}"))
                .unwrap_or_else(|| "--".to_string()),
            show(scores.vgs),
            show(scores.rs_agg),
            show(scores.drs),
            show(scores.dga),
            show(scores.fragility.mean_robustness),
        );
    }
}

fn rubric_cmd(
    annotations: PathBuf,
    axes_path: Option<PathBuf>,
    corpus_path: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let axes = match axes_path {
        Some(path) => load_axes(&path)?,
        None => default_axes(),
    };
    let axis_ids: HashSet<String> = axes.iter().map(|a| a.axis_id.clone()).collect();
    let records = load_annotations(&annotations, &axis_ids)
        .with_context(|| format!("reading {}", annotations.display()))?;

    let item_to_benchmark: BTreeMap<String, String> = match corpus_path {
        Some(path) => {
            let corpus = Corpus::load(&path)?;
            corpus
                .items()
                .iter()
                .map(|i| (i.id.clone(), i.benchmark_id.clone()))
                .collect()
        }
        None => records
            .iter()
            .map(|r| (r.item_id.clone(), "all".to_string()))
            .collect(),
    };

    let profiles = benchmark_profiles(&records, &item_to_benchmark, &axes)?;
    std::fs::create_dir_all(&out)?;
    let profiles_json = serde_json::to_string_pretty(&profiles)?;
    std::fs::write(out.join("profiles.json"), profiles_json)?;

    let bundle = ReportBundle::default().with_rubric(&profiles)?;
    emit(&bundle, &out, &[ReportFormat::Csv, ReportFormat::Md])?;
    for profile in &profiles {
        for axis in &profile.axes {
            let kappa = axis
                .kappa
                .map(|k| format!("{k:.4}"))
                .unwrap_or_else(|| "undefined".to_string());
            println!(
                "{} / {}: kappa={} median={} mean={:.4} (items={}, raters={}, dropped={})",
                profile.benchmark_id,
                axis.axis_id,
                kappa,
                axis.median,
                axis.mean,
                axis.n_items,
                axis.n_raters,
                axis.n_dropped_items
            );
        }
    }
    println!("wrote rubric outputs under {}", out.display());
    Ok(())
}

fn report_cmd(run_dir: PathBuf, formats: Vec<FormatArg>) -> Result<()> {
    let config = RunConfig::load(run_dir.join("run_config.json"))?;
    let corpus = Corpus::load(&config.corpus)?;
    let substitutions = config
        .substitution_map
        .as_ref()
        .map(|path| load_substitution_map(path, &corpus))
        .transpose()?;
    let records = stressprobe::harness::load_records(run_dir.join("records.jsonl"))?;
    let scores = score_run(&records, &corpus, &config, substitutions.as_deref())?;
    let bundle = ReportBundle::from_scores(&scores);

    let selected: Vec<ReportFormat> = if formats.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        formats.into_iter().map(ReportFormat::from).collect()
    };
    let written = emit(&bundle, run_dir.join("reports"), &selected)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
