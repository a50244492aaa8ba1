//! `ddfm`: run the equivalence suite and decentralized-expert experiments.
//!
//! Exit status is 0 when every hard check passes, 1 when a check fails and 2
//! for configuration, parse or I/O errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use ddfm_core::clustering::normalize_features;
use ddfm_core::decentral::{ensemble_next_token, route, RouterConfig, RouterWeights};
use ddfm_core::dfm::Token;
use ddfm_core::experts::{train_dense, Corpus, ExpertModel};
use ddfm_core::harness::pipeline::{cluster_features, spread_unassigned, train_experts};
use ddfm_core::harness::report::{render, RunMeta};
use ddfm_core::harness::synth::{component_rng, stream, SyntheticWorld};
use ddfm_core::harness::{
    emit_report, run_equivalence_suite, run_experiment, ExperimentConfig, Format, RunReport, Table,
};
use ddfm_core::io::{
    read_assignments, read_ids, read_matrix, write_assignments, write_ids, write_matrix,
};
use ddfm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ddfm", version, about)]
struct Cli {
    /// Experiment configuration (JSON, every field required).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rendering of the summary printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Json => Format::Json,
            OutputFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence suite.
    Verify,
    /// Run the full pipeline: synthesize, partition, train, route, compare.
    Experiment,
    /// Write a synthetic training corpus, held-out corpus and feature matrix.
    Synth,
    /// Cluster a feature matrix into balanced clusters.
    Cluster {
        /// Matrix file (`.bin` for binary, anything else for text).
        #[arg(long)]
        features: PathBuf,
        /// Sidecar with one id per row; row indices are used when absent.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Train one expert per cluster plus the dense baseline.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// `item_id,cluster_id` CSV. Samples not listed are spread at random.
        #[arg(long)]
        assignments: PathBuf,
    },
    /// Next-token distribution for a prefix, routed by features.
    Infer {
        /// Directory holding `expert_<k>.model` files (and optionally `dense.model`).
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        centroids: PathBuf,
        /// Space-separated token ids.
        #[arg(long, default_value = "")]
        prefix: String,
        /// Comma-separated feature vector; omitted for text-only inputs.
        #[arg(long)]
        features: Option<String>,
    },
    /// Re-render a saved report and return its exit status.
    Report {
        /// Path to a `report.json`.
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            let check_failure = matches!(e, Error::CheckFailed { .. }) && !e.is_input_error();
            ExitCode::from(if check_failure { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::ConfigInvalid("--config is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli, config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Verify => run_report(cli, run_equivalence_suite),
        Command::Experiment => run_report(cli, run_experiment),
        Command::Synth => synth(cli),
        Command::Cluster { features, ids } => cluster(cli, features, ids.as_deref()),
        Command::Train {
            corpus,
            assignments,
        } => train(cli, corpus, assignments),
        Command::Infer {
            models,
            centroids,
            prefix,
            features,
        } => infer(cli, models, centroids, prefix, features.as_deref()),
        Command::Report { report } => {
            let report = RunReport::load(report)?;
            if let Some(dir) = &cli.out {
                emit_report(&report, dir)?;
            }
            print!("{}", render(&report, cli.format.into())?);
            Ok(report.exit_code() as u8)
        }
    }
}

fn run_report(cli: &Cli, f: impl Fn(&ExperimentConfig) -> Result<RunReport>) -> Result<u8> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let report = f(&config)?;
    emit_report(&report, &dir)?;
    RunMeta::new(started, clock.elapsed()).write(&dir)?;
    print!("{}", render(&report, cli.format.into())?);
    for c in report.failed() {
        eprintln!("{}", c.summary());
    }
    Ok(report.exit_code() as u8)
}

fn print_table(table: &Table, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(table)?),
        OutputFormat::Csv => print!("{}", table.to_csv()?),
    }
    Ok(())
}

fn synth(cli: &Cli) -> Result<u8> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let world = SyntheticWorld::new(&config, config.seed)?;
    let train = world.sample_corpus(
        config.corpus.samples,
        "s",
        &mut component_rng(config.seed, stream::TRAIN),
    )?;
    let heldout = world.sample_corpus(
        config.corpus.heldout,
        "h",
        &mut component_rng(config.seed, stream::HELDOUT),
    )?;
    train.save(&dir.join("corpus.json"))?;
    heldout.save(&dir.join("heldout.json"))?;
    let (ids, rows): (Vec<String>, Vec<Vec<f64>>) = train
        .samples
        .iter()
        .filter_map(|s| s.features.clone().map(|f| (s.id.clone(), f)))
        .unzip();
    write_matrix(&dir.join("features.txt"), &rows)?;
    write_ids(&dir.join("features.ids"), &ids)?;
    let mut t = Table::new("synth", &["file", "rows"]);
    t.push(vec!["corpus.json".into(), train.len().into()]);
    t.push(vec!["heldout.json".into(), heldout.len().into()]);
    t.push(vec!["features.txt".into(), rows.len().into()]);
    print_table(&t, cli.format)?;
    Ok(0)
}

fn cluster(cli: &Cli, features: &Path, ids: Option<&Path>) -> Result<u8> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let rows = read_matrix(features)?;
    let ids = match ids {
        Some(p) => read_ids(p)?,
        None => (0..rows.len()).map(|i| i.to_string()).collect(),
    };
    let set = normalize_features(ids, &rows)?;
    let model = cluster_features(&set, &config, config.seed)?;
    write_assignments(&dir.join("assignments.csv"), set.ids(), &model.assignment)?;
    let centroid_name = match features.extension().and_then(|e| e.to_str()) {
        Some("bin") => "centroids.bin",
        _ => "centroids.txt",
    };
    write_matrix(&dir.join(centroid_name), &model.centroids)?;
    let model_path = dir.join("cluster_model.json");
    fs::write(&model_path, serde_json::to_string_pretty(&model)?).map_err(|e| Error::Io {
        path: model_path,
        source: e,
    })?;
    let mut t = Table::new("clusters", &["cluster", "items"]);
    for (k, &size) in model.sizes.iter().enumerate() {
        t.push(vec![k.into(), size.into()]);
    }
    print_table(&t, cli.format)?;
    Ok(0)
}

fn train(cli: &Cli, corpus_path: &Path, assignments: &Path) -> Result<u8> {
    let config = load_config(cli)?;
    let dir = out_dir(cli, &config)?;
    let corpus = Corpus::load(corpus_path)?;
    let index: BTreeMap<&str, usize> = corpus
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut assignment = vec![usize::MAX; corpus.len()];
    for row in read_assignments(assignments)? {
        let bad = |reason: String| Error::Parse {
            path: assignments.to_path_buf(),
            reason,
        };
        let &i = index
            .get(row.item_id.as_str())
            .ok_or_else(|| bad(format!("unknown item id {:?}", row.item_id)))?;
        if row.cluster_id >= config.clusters {
            return Err(bad(format!(
                "cluster id {} >= configured clusters {}",
                row.cluster_id, config.clusters
            )));
        }
        assignment[i] = row.cluster_id;
    }
    spread_unassigned(&mut assignment, config.clusters, config.seed);
    let shards = corpus.shards(&assignment, config.clusters)?;
    let experts = train_experts(&shards, config.expert.order, config.expert.alpha)?;
    let dense = train_dense(&corpus, config.expert.order, config.expert.alpha)?;
    let mut t = Table::new("experts", &["model", "samples", "contexts"]);
    for (k, (expert, shard)) in experts.iter().zip(&shards).enumerate() {
        let name = format!("expert_{k}.model");
        expert.save(&dir.join(&name))?;
        t.push(vec![
            name.into(),
            shard.len().into(),
            expert.counts().len().into(),
        ]);
    }
    dense.save(&dir.join("dense.model"))?;
    t.push(vec![
        "dense.model".into(),
        corpus.len().into(),
        dense.counts().len().into(),
    ]);
    print_table(&t, cli.format)?;
    Ok(0)
}

fn parse_list<T: std::str::FromStr>(text: &str, sep: char, what: &str) -> Result<Vec<T>> {
    text.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad {what} value {s:?}")))
        })
        .collect()
}

fn infer(
    cli: &Cli,
    models: &Path,
    centroids: &Path,
    prefix: &str,
    features: Option<&str>,
) -> Result<u8> {
    let config = load_config(cli)?;
    let prefix: Vec<Token> = parse_list(prefix, ' ', "prefix token")?;
    let mut experts = Vec::new();
    loop {
        let path = models.join(format!("expert_{}.model", experts.len()));
        if !path.exists() {
            break;
        }
        experts.push(ExpertModel::load(&path)?);
    }
    if experts.is_empty() {
        return Err(Error::Io {
            path: models.join("expert_0.model"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no expert models"),
        });
    }
    let router = RouterConfig {
        temperature: config.router.temperature,
        top_k: config.router.top_k,
        centroids: read_matrix(centroids)?,
    };
    if router.clusters() != experts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} centroids for {} experts",
            router.clusters(),
            experts.len()
        )));
    }
    let weights = match features {
        Some(f) => route(&parse_list::<f64>(f, ',', "feature")?, &router)?,
        None => {
            let k = component_rng(config.seed, stream::ROUTING).random_range(0..experts.len());
            RouterWeights::one_hot(experts.len(), k)
        }
    };
    let pmf = ensemble_next_token(&experts, &weights, &prefix)?;
    let dense_path = models.join("dense.model");
    let dense = if dense_path.exists() {
        Some(ExpertModel::load(&dense_path)?.next_token(&prefix)?)
    } else {
        None
    };
    match cli.format {
        OutputFormat::Json => {
            let value = serde_json::json!({
                "prefix": prefix,
                "weights": weights,
                "routed": pmf,
                "dense": dense,
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        OutputFormat::Csv => {
            let mut t = Table::new("next_token", &["token", "routed", "dense"]);
            for (tok, p) in pmf.iter().enumerate() {
                let d = dense.as_ref().map_or(f64::NAN, |d| d[tok]);
                t.push(vec![tok.into(), (*p).into(), d.into()]);
            }
            print!("{}", t.to_csv()?);
        }
    }
    Ok(0)
}
