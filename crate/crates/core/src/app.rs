//! Command-line surface: argument parsing and the subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Manifest, RunConfig};
use crate::corpus::{write_file, Corpus, LabelCatalog};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, CandidateScope, Group, Metric, MetricsReport};
use crate::labelgraphs::{graph_stats, GraphKind, Taxonomy};
use crate::model::{graph_set_label, parse_graph_set, FusionMode, ModelConfig};
use crate::oracles::{gradient_suite, metric_oracle_suite};
use crate::pipeline::{prepare, PreparedData};
use crate::synthetic::generate_synthetic;
use crate::textpipe::{format_word_vectors, parse_word_vectors, WordVectors};
use crate::trainer::{score_documents, train_with, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "kamg", version, about = "Multi-graph label-attention text classifier")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Graph set, e.g. `g,s,c`.
    #[arg(long, global = true, value_name = "LIST")]
    pub graphs: Option<String>,
    /// `post` or `pre`; `ablate` accepts a list.
    #[arg(long, global = true, value_name = "MODE")]
    pub fusion: Option<String>,
    /// Similarity-graph neighbours per label.
    #[arg(long, global = true, value_name = "INT")]
    pub k: Option<usize>,
    /// Similarity-graph cosine threshold.
    #[arg(long, global = true, value_name = "FLOAT", allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long = "few-threshold", global = true, value_name = "INT")]
    pub few_threshold: Option<usize>,
    /// Cutoffs for the ranking metrics, e.g. `5,10`.
    #[arg(long = "K", global = true, value_name = "LIST", value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the hierarchy, similarity and co-occurrence graphs.
    BuildGraphs,
    /// Train a model and write a checkpoint with its history.
    Train,
    /// Score the test split with a trained checkpoint.
    Evaluate {
        #[arg(long, value_name = "PATH", required = true)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every graph subset under each fusion mode.
    Ablate,
    /// Write a synthetic dataset and a config pointing at it.
    Synth,
    /// Run the brute-force metric and finite-difference gradient oracles.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

fn parse_fusions(s: &str) -> Result<Vec<FusionMode>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.out = Some(out.clone());
    }
    if let Some(g) = &args.graphs {
        cfg.model.graphs = parse_graph_set(g)?;
    }
    if let Some(f) = &args.fusion {
        if let [mode] = parse_fusions(f)?[..] {
            cfg.model.fusion = mode;
        }
    }
    if let Some(k) = args.k {
        cfg.graphs.k = k;
    }
    if let Some(tau) = args.tau {
        cfg.graphs.tau = tau;
    }
    if let Some(t) = args.few_threshold {
        cfg.eval.few_threshold = t;
    }
    if let Some(ks) = &args.ks {
        cfg.eval.ks = ks.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Reads the four inputs named in `cfg` and records their hashes.
pub fn load_inputs(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(Corpus, Taxonomy, WordVectors)> {
    let labels = cfg.require("labels", &cfg.paths.labels)?;
    let corpus = cfg.require("corpus", &cfg.paths.corpus)?;
    let taxonomy = cfg.require("taxonomy", &cfg.paths.taxonomy)?;
    let embeddings = cfg.require("embeddings", &cfg.paths.embeddings)?;
    for (role, p) in [
        ("labels", &labels),
        ("corpus", &corpus),
        ("taxonomy", &taxonomy),
        ("embeddings", &embeddings),
    ] {
        manifest.add_input(role, p)?;
    }
    let catalog = LabelCatalog::load(&labels)?;
    let corpus = Corpus::load(&corpus, catalog)?;
    let taxonomy = Taxonomy::load(&taxonomy)?;
    let text = std::fs::read_to_string(&embeddings).map_err(|e| Error::io(&embeddings, e))?;
    let vectors = parse_word_vectors(&text, cfg.model.embed_dim)?;
    Ok((corpus, taxonomy, vectors))
}

fn load_prepared(cfg: &RunConfig, manifest: &mut Manifest) -> Result<PreparedData> {
    let (corpus, taxonomy, vectors) = load_inputs(cfg, manifest)?;
    prepare(&corpus, &taxonomy, &vectors, &cfg.prepare_options())
}

pub fn scope_note(scope: CandidateScope) -> &'static str {
    match scope {
        CandidateScope::WithinBucket => {
            "# candidates: per-bucket rows rank only that bucket's labels (interpretation of the grouped-table protocol); overall ranks all labels"
        }
        CandidateScope::AllLabels => "# candidates: every row ranks all labels; gold is restricted to the bucket",
    }
}

fn evaluate_test(cfg: &RunConfig, data: &PreparedData, outcome: (&crate::model::KamgModel, &crate::model::LabelContext)) -> Result<MetricsReport> {
    let (model, ctx) = outcome;
    let scores = score_documents(model, ctx, data, &data.test)?;
    let gold: Vec<Vec<usize>> = data.test.iter().map(|d| d.labels.clone()).collect();
    evaluate(&scores, &gold, &data.buckets, &cfg.eval.ks, cfg.eval.scope)
}

pub fn cmd_build_graphs(cfg: &RunConfig) -> Result<String> {
    let mut manifest = Manifest::new("build-graphs", cfg);
    let data = load_prepared(cfg, &mut manifest)?;
    let dir = out_dir(cfg)?;
    let mut stats = String::new();
    let mut summary = String::new();
    for g in &data.graphs {
        g.save(&dir.join(format!("{}.graph", g.kind())))?;
        let st = graph_stats(g);
        stats.push_str(&serde_json::to_string(&st)?);
        stats.push('\n');
        summary.push_str(&format!(
            "{:<13} labels {:>5}  edges {:>7}  isolated {:>5}  max weight {}\n",
            g.kind().to_string(),
            st.labels,
            st.edges,
            st.isolated,
            st.max_weight
        ));
    }
    if !data.uncovered_labels.is_empty() {
        summary.push_str(&format!(
            "{} label descriptions have no pretrained token (zero embedding)\n",
            data.uncovered_labels.len()
        ));
    }
    write_file(&dir.join("graph_stats.jsonl"), stats.as_bytes())?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let mut manifest = Manifest::new("train", cfg);
    let data = load_prepared(cfg, &mut manifest)?;
    let dir = out_dir(cfg)?;
    let outcome = train_with(&data, &cfg.model, &cfg.train_config(), |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  dev R@{} {:.4}  ({:.1}s)",
            r.epoch + 1,
            r.loss,
            cfg.train.dev_k,
            r.dev_metric,
            r.seconds
        );
    })?;
    Checkpoint::capture(&outcome.model, &data).save(&dir.join("checkpoint.bin"))?;
    write_file(&dir.join("history.jsonl"), outcome.history.to_jsonl().as_bytes())?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(match outcome.history.best_epoch {
        Some(e) => format!(
            "trained {}: best dev R@{} {:.4} at epoch {}\n",
            cfg.model.tag(),
            cfg.train.dev_k,
            outcome.history.epochs[e].dev_metric,
            e + 1
        ),
        None => format!("trained {} for 0 epochs\n", cfg.model.tag()),
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let mut manifest = Manifest::new("evaluate", cfg);
    manifest.add_input("checkpoint", checkpoint)?;
    let data = load_prepared(cfg, &mut manifest)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.validate(&cfg.model, &data)?;
    let model = ckpt.into_model()?;
    let ctx = crate::model::LabelContext::new(&cfg.model, data.label_embeddings.clone(), &data.graphs)?;
    let report = evaluate_test(cfg, &data, (&model, &ctx))?;
    let dir = out_dir(cfg)?;
    let table = format!("{}\n{}", scope_note(cfg.eval.scope), report.to_table());
    write_file(&dir.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    write_file(&dir.join("report.txt"), table.as_bytes())?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(table)
}

/// The seven non-empty subsets of `universe`, singletons first.
pub fn graph_subsets(universe: &[GraphKind]) -> Vec<Vec<GraphKind>> {
    let n = universe.len();
    let mut sets: Vec<Vec<GraphKind>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| universe[i]).collect())
        .collect();
    sets.sort_by_key(|s| (s.len(), graph_set_label(s)));
    sets
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub graphs: String,
    pub fusion: FusionMode,
    pub k: usize,
    pub frequent: Option<f64>,
    pub few: Option<f64>,
    pub zero: Option<f64>,
    pub overall: Option<f64>,
}

pub fn ablation_grid(universe: &[GraphKind], fusions: &[FusionMode]) -> Vec<(Vec<GraphKind>, FusionMode)> {
    let mut grid = Vec::new();
    for set in graph_subsets(universe) {
        for &f in fusions {
            if f == FusionMode::PreGcnMerge && set.len() < 2 {
                continue;
            }
            grid.push((set.clone(), f));
        }
    }
    grid
}

pub fn cmd_ablate(cfg: &RunConfig, fusions: &[FusionMode]) -> Result<String> {
    let mut manifest = Manifest::new("ablate", cfg);
    let data = load_prepared(cfg, &mut manifest)?;
    let dir = out_dir(cfg)?;
    let k = cfg.eval.ks[0];
    let mut rows = Vec::new();
    for (graphs, fusion) in ablation_grid(&cfg.model.graphs, fusions) {
        let model_cfg = ModelConfig {
            graphs: graphs.clone(),
            fusion,
            ..cfg.model.clone()
        };
        eprintln!("training {}", model_cfg.tag());
        let outcome = train_with(&data, &model_cfg, &cfg.train_config(), |_| {})?;
        let report = evaluate_test(cfg, &data, (&outcome.model, &outcome.context))?;
        let cell = |g| report.get(g, Metric::Recall, k);
        rows.push(AblationRow {
            graphs: graph_set_label(&graphs),
            fusion,
            k,
            frequent: cell(Group::Frequent),
            few: cell(Group::Few),
            zero: cell(Group::Zero),
            overall: cell(Group::Overall),
        });
    }
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let table = format!("{}\n{}", scope_note(cfg.eval.scope), ablation_table(&rows));
    write_file(&dir.join("ablation.jsonl"), jsonl.as_bytes())?;
    write_file(&dir.join("ablation.txt"), table.as_bytes())?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(table)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(0, |r| r.k);
    let mut s = format!(
        "{:<8}{:<7}{:>11}{:>11}{:>11}{:>11}\n",
        "graphs", "fusion", "Frequent", "Few", "Zero", "Overall"
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        s.push_str(&format!(
            "{:<8}{:<7}{:>11}{:>11}{:>11}{:>11}\n",
            r.graphs,
            r.fusion.to_string(),
            fmt(r.frequent),
            fmt(r.few),
            fmt(r.zero),
            fmt(r.overall)
        ));
    }
    s.push_str(&format!("(values are R@{k})\n"));
    s
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let mut spec = cfg.synthetic.clone();
    spec.embed_dim = cfg.model.embed_dim;
    let data = generate_synthetic(&spec)?;
    write_file(&dir.join("labels.jsonl"), data.corpus.catalog.to_jsonl().as_bytes())?;
    data.corpus.write(&dir.join("corpus.jsonl"))?;
    write_file(&dir.join("taxonomy.tsv"), data.taxonomy.to_text().as_bytes())?;
    write_file(&dir.join("vectors.txt"), format_word_vectors(&data.vectors).as_bytes())?;

    let mut run = cfg.clone();
    run.synthetic = spec;
    run.paths.labels = Some("labels.jsonl".into());
    run.paths.corpus = Some("corpus.jsonl".into());
    run.paths.taxonomy = Some("taxonomy.tsv".into());
    run.paths.embeddings = Some("vectors.txt".into());
    run.paths.out = None;
    write_file(&dir.join("config.toml"), run.to_toml().as_bytes())?;
    Manifest::new("synth", &run).write(&dir.join("manifest.jsonl"))?;
    let [f, r, z] = [
        data.corpus.catalog.labels().iter().filter(|l| l.code.starts_with('F')).count(),
        data.corpus.catalog.labels().iter().filter(|l| l.code.starts_with('R')).count(),
        data.corpus.catalog.labels().iter().filter(|l| l.unseen).count(),
    ];
    Ok(format!(
        "wrote {} documents, {} labels ({f} frequent, {r} few-shot, {z} unseen) to {}\n",
        data.corpus.documents.len(),
        data.corpus.catalog.len(),
        dir.display()
    ))
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Returns the printed report and whether every suite passed.
pub fn cmd_oracle_check(cfg: &RunConfig, trials: usize) -> Result<(String, bool)> {
    let mut out = String::new();
    let metrics = metric_oracle_suite(trials, cfg.seed)?;
    out.push_str(&format!(
        "{} metric oracle: {} trials, {} comparisons, {} mismatches, {} RP/R identity violations ({:.2}s)\n",
        if metrics.passed() { "PASS" } else { "FAIL" },
        metrics.trials,
        metrics.checks,
        metrics.mismatches.len(),
        metrics.identity_violations,
        metrics.seconds
    ));
    for m in &metrics.mismatches {
        out.push_str(&format!("  {m}\n"));
    }
    let grads = gradient_suite(cfg.seed)?;
    for c in &grads.cases {
        out.push_str(&format!(
            "  {:<28} {:>6} coords  max rel err {:.3e}\n",
            c.name, c.coordinates, c.max_rel_error
        ));
    }
    let grads_ok = grads.passed(GRADIENT_TOLERANCE);
    out.push_str(&format!(
        "{} gradient oracle: {} cases, max rel err {:.3e} (tolerance {GRADIENT_TOLERANCE:e}) ({:.2}s)\n",
        if grads_ok { "PASS" } else { "FAIL" },
        grads.cases.len(),
        grads.max_rel_error(),
        grads.seconds
    ));
    Ok((out, metrics.passed() && grads_ok))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::BuildGraphs => print!("{}", cmd_build_graphs(&cfg)?),
        Command::Train => print!("{}", cmd_train(&cfg)?),
        Command::Evaluate { checkpoint } => print!("{}", cmd_evaluate(&cfg, &checkpoint)?),
        Command::Ablate => {
            let fusions = match &cli.common.fusion {
                Some(f) => parse_fusions(f)?,
                None => vec![FusionMode::PostGcn, FusionMode::PreGcnMerge],
            };
            print!("{}", cmd_ablate(&cfg, &fusions)?)
        }
        Command::Synth => print!("{}", cmd_synth(&cfg)?),
        Command::OracleCheck { trials } => {
            let (report, ok) = cmd_oracle_check(&cfg, trials)?;
            print!("{report}");
            if !ok {
                return Ok(1);
            }
        }
    }
    Ok(0)
}
