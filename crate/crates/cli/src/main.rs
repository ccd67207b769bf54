//! `addrloc` — single entry point for the desk-scale image address
//! localization toolkit. Every subcommand resolves its configuration as
//! flags > config file > defaults, digests its inputs into a run manifest
//! written before any output, and is deterministic given identical inputs
//! and seed.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use addrloc_core::align::{load_checkpoint, random_fd_suite, save_checkpoint, GeoTarget};
use addrloc_core::annotate::{annotate_dataset, FixtureClient};
use addrloc_core::baseline::{
    build_database, compare, pipeline_evaluate, write_comparison, AddressSource,
};
use addrloc_core::geodata::{
    filter_split_by_city, location_addresses, location_coords, read_dataset, read_graph,
    read_split, split_dataset, write_dataset, write_graph, write_split, Address,
};
use addrloc_core::infer_eval::{
    constrained_evaluate, evaluate, read_metrics, similarity_map, write_metrics,
    write_simmap_csv, CandidatePrior,
};
use addrloc_core::partition::partition_city;
use addrloc_core::synthcity::{generate_city, CityConfig};
use addrloc_core::trainer::{train, write_train_log, TrainConfig};

use config::{apply_city_config, apply_train_config};
use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "addrloc",
    version,
    about = "Desk-scale image address localization: synthesize, partition, annotate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid city: dataset + street graph.
    Synth(SynthArgs),
    /// Derive sub-street addresses from the street graph geometry.
    Partition(PartitionArgs),
    /// Annotate street-level addresses through geocoding fixtures.
    Annotate(AnnotateArgs),
    /// Assign locations to train/database/query splits.
    Split(SplitArgs),
    /// Train the image/text encoders.
    Train(TrainArgs),
    /// Evaluate SSA/SA retrieval metrics of a checkpoint.
    Eval(EvalArgs),
    /// Evaluate with per-location candidate priors.
    ConstrainedEval(ConstrainedEvalArgs),
    /// Run the two-stage retrieval baseline and compare against the model.
    Baseline(BaselineArgs),
    /// Export an address similarity map over all sample coordinates.
    Simmap(SimmapArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key=value city config file (defaults used for absent keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    spacing_m: Option<f64>,
    #[arg(long)]
    locations_per_segment: Option<usize>,
    #[arg(long)]
    views_per_location: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    signature_scale: Option<f64>,
    #[arg(long)]
    city_tag: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file (line-delimited records).
    #[arg(long)]
    out_dataset: PathBuf,
    /// Output street graph file.
    #[arg(long)]
    out_graph: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Minimum along-street gap between kept intersections, meters.
    #[arg(long, default_value_t = 50.0)]
    min_gap_m: f64,
    /// Sub-streets with fewer locations merge into a neighbor.
    #[arg(long, default_value_t = 5)]
    min_locations: usize,
    /// Output dataset file with addresses filled in.
    #[arg(long)]
    out_dataset: PathBuf,
    /// Output partition report (counts per level).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Geocoding backend; only "fixture" is implemented.
    #[arg(long, default_value = "fixture")]
    backend: String,
    /// Geocoding fixture file (required for the fixture backend).
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Manual corrections: one `location_id<TAB>canonical address` per line.
    #[arg(long)]
    corrections: Option<PathBuf>,
    /// Fraction of locations actually geocoded; the rest interpolate.
    #[arg(long, default_value_t = 1.0)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    out_dataset: PathBuf,
    /// Optional annotation report (geocoded/interpolated/corrected counts).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output split file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value training config file (defaults used for absent keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-epoch loss log, one JSON record per line.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Ablation switches; a disabled term contributes neither loss nor
    /// gradient.
    #[arg(long)]
    disable_address: bool,
    #[arg(long)]
    disable_caption: bool,
    #[arg(long)]
    disable_geography: bool,
    /// Geography regression target: raw | inverted.
    #[arg(long)]
    geo_target: Option<GeoTarget>,
    #[arg(long)]
    freeze_image: bool,
    #[arg(long)]
    freeze_text: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Restrict the split to one city of a merged dataset by tag.
    #[arg(long)]
    city_prefix: Option<String>,
    /// Output metrics file (fields ssa1/ssa5/sa1/sa5).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConstrainedEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// JSON map: location_id -> {"neighborhood": name} or
    /// {"streets": [names...]}. Locations absent from the map rank
    /// unconstrained.
    #[arg(long)]
    priors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Resolve retrieved GPS through geocoding fixtures instead of the
    /// dataset's own address table.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Model metrics file (from `eval`); when given, `--out` becomes a
    /// model-vs-pipeline comparison report.
    #[arg(long)]
    model_metrics: Option<PathBuf>,
    /// Output file: pipeline metrics, or the comparison report when
    /// --model-metrics is given.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Canonical address text, e.g. "H01 between V00 and V01, NE".
    #[arg(long)]
    address: String,
    /// Output CSV (east,north,similarity).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random configurations to sweep.
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Central finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Output report file.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Partition(a) => cmd_partition(a),
        Cmd::Annotate(a) => cmd_annotate(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ConstrainedEval(a) => cmd_constrained_eval(a),
        Cmd::Baseline(a) => cmd_baseline(a),
        Cmd::Simmap(a) => cmd_simmap(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn override_opt<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = CityConfig::default();
    if let Some(path) = &a.config {
        apply_city_config(&mut cfg, path)?;
    }
    override_opt(&mut cfg.rows, a.rows);
    override_opt(&mut cfg.cols, a.cols);
    override_opt(&mut cfg.spacing_m, a.spacing_m);
    override_opt(&mut cfg.locations_per_segment, a.locations_per_segment);
    override_opt(&mut cfg.views_per_location, a.views_per_location);
    override_opt(&mut cfg.feature_dim, a.feature_dim);
    override_opt(&mut cfg.noise_sigma, a.noise_sigma);
    override_opt(&mut cfg.signature_scale, a.signature_scale);
    override_opt(&mut cfg.seed, a.seed);
    if let Some(tag) = a.city_tag {
        cfg.city_tag = tag;
    }

    let (ds, graph) = generate_city(&cfg)?;
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    RunManifest::new(
        "synth",
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
        &inputs,
        &[&a.out_dataset, &a.out_graph],
    )?
    .write_next_to(&a.out_dataset)?;
    write_dataset(&a.out_dataset, &ds)?;
    write_graph(&a.out_graph, &graph)?;
    println!(
        "synth: {} samples, {} streets -> {}",
        ds.samples.len(),
        graph.streets.len(),
        a.out_dataset.display()
    );
    Ok(())
}

fn cmd_partition(a: PartitionArgs) -> Result<()> {
    let graph = read_graph(&a.graph)?;
    let ds = read_dataset(&a.dataset)?;
    let coords = location_coords(&ds)?;
    let (labels, summary) = partition_city(&graph, &coords, a.min_gap_m, a.min_locations)?;
    let annotated = addrloc_core::geodata::apply_annotations(&ds, &labels)?;

    RunManifest::new(
        "partition",
        None,
        serde_json::json!({
            "min_gap_m": a.min_gap_m,
            "min_locations": a.min_locations,
        }),
        &[&a.graph, &a.dataset],
        &[&a.out_dataset, &a.report],
    )?
    .write_next_to(&a.out_dataset)?;
    write_dataset(&a.out_dataset, &annotated)?;
    std::fs::write(
        &a.report,
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .with_context(|| format!("cannot write report {}", a.report.display()))?;
    println!(
        "partition: {} locations -> {} sub-streets, {} distinct addresses",
        summary.locations, summary.sub_streets, summary.distinct_addresses
    );
    Ok(())
}

fn read_corrections(path: &Path) -> Result<BTreeMap<String, Address>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read corrections file {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((id, addr_text)) = trimmed.split_once('\t') else {
            bail!(
                "{}:{line}: expected `location_id<TAB>canonical address text`",
                path.display()
            );
        };
        let addr = Address::parse_text(addr_text.trim())
            .map_err(|e| anyhow!("{}:{line}: {e}", path.display()))?;
        if out.insert(id.trim().to_string(), addr).is_some() {
            bail!("{}:{line}: duplicate correction for {id:?}", path.display());
        }
    }
    Ok(out)
}

fn cmd_annotate(a: AnnotateArgs) -> Result<()> {
    let client = match a.backend.as_str() {
        "fixture" => {
            let path = a
                .fixture
                .as_ref()
                .ok_or_else(|| anyhow!("--fixture is required for the fixture backend"))?;
            FixtureClient::from_file(path)?
        }
        other => return Err(addrloc_core::Error::UnsupportedBackend(other.to_string()).into()),
    };
    let ds = read_dataset(&a.dataset)?;
    let corrections = match &a.corrections {
        Some(path) => read_corrections(path)?,
        None => BTreeMap::new(),
    };
    let (annotated, report) =
        annotate_dataset(&ds, &client, &corrections, a.sample_fraction, a.seed)?;

    let mut inputs: Vec<&Path> = vec![&a.dataset];
    if let Some(p) = &a.fixture {
        inputs.push(p);
    }
    if let Some(p) = &a.corrections {
        inputs.push(p);
    }
    let mut outputs: Vec<&Path> = vec![&a.out_dataset];
    if let Some(p) = &a.report {
        outputs.push(p);
    }
    RunManifest::new(
        "annotate",
        Some(a.seed),
        serde_json::json!({
            "backend": a.backend,
            "sample_fraction": a.sample_fraction,
            "seed": a.seed,
        }),
        &inputs,
        &outputs,
    )?
    .write_next_to(&a.out_dataset)?;
    write_dataset(&a.out_dataset, &annotated)?;
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("cannot write report {}", path.display()))?;
    }
    println!(
        "annotate: {} geocoded, {} interpolated, {} corrected -> {}",
        report.geocoded,
        report.interpolated,
        report.corrected,
        a.out_dataset.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let split = split_dataset(&ds, a.seed)?;
    RunManifest::new(
        "split",
        Some(a.seed),
        serde_json::json!({ "seed": a.seed }),
        &[&a.dataset],
        &[&a.out],
    )?
    .write_next_to(&a.out)?;
    write_split(&a.out, &split)?;
    println!(
        "split: {} train / {} database / {} query locations ({} queries dropped) -> {}",
        split.train.len(),
        split.database.len(),
        split.query.len(),
        split.dropped_queries.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        apply_train_config(&mut cfg, path)?;
    }
    override_opt(&mut cfg.epochs, a.epochs);
    override_opt(&mut cfg.batch_size, a.batch_size);
    override_opt(&mut cfg.lr_start, a.lr_start);
    override_opt(&mut cfg.lr_end, a.lr_end);
    override_opt(&mut cfg.lr_scale, a.lr_scale);
    override_opt(&mut cfg.weights.alpha, a.alpha);
    override_opt(&mut cfg.weights.beta, a.beta);
    override_opt(&mut cfg.weights.gamma, a.gamma);
    override_opt(&mut cfg.geo_target, a.geo_target);
    override_opt(&mut cfg.embed_dim, a.embed_dim);
    override_opt(&mut cfg.token_dim, a.token_dim);
    override_opt(&mut cfg.seed, a.seed);
    if a.disable_address {
        cfg.toggles.address = false;
    }
    if a.disable_caption {
        cfg.toggles.caption = false;
    }
    if a.disable_geography {
        cfg.toggles.geography = false;
    }
    if a.freeze_image {
        cfg.freeze_image = true;
    }
    if a.freeze_text {
        cfg.freeze_text = true;
    }

    let ds = read_dataset(&a.dataset)?;
    let split = read_split(&a.split)?;
    let (params, log) = train(&ds, &split, &cfg)?;

    let mut inputs: Vec<&Path> = vec![&a.dataset, &a.split];
    if let Some(p) = &a.config {
        inputs.push(p);
    }
    RunManifest::new(
        "train",
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
        &inputs,
        &[&a.out_checkpoint, &a.log],
    )?
    .write_next_to(&a.out_checkpoint)?;
    save_checkpoint(&a.out_checkpoint, &params)?;
    write_train_log(&a.log, &log)?;
    let last = log.last().expect("log has records");
    println!(
        "train: {} epochs, final total loss {:.6} -> {}",
        cfg.epochs,
        last.l_total,
        a.out_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let mut split = read_split(&a.split)?;
    if let Some(tag) = &a.city_prefix {
        split = filter_split_by_city(&split, tag);
    }
    let params = load_checkpoint(&a.checkpoint, &ds.vocab)?;
    let report = evaluate(&params, &ds, &split)?;

    RunManifest::new(
        "eval",
        None,
        serde_json::json!({ "city_prefix": a.city_prefix }),
        &[&a.checkpoint, &a.dataset, &a.split],
        &[&a.out],
    )?
    .write_next_to(&a.out)?;
    write_metrics(&a.out, &report)?;
    println!(
        "eval: ssa1 {:.4} ssa5 {:.4} sa1 {:.4} sa5 {:.4} over {} queries -> {}",
        report.ssa1,
        report.ssa5,
        report.sa1,
        report.sa5,
        report.total_queries,
        a.out.display()
    );
    Ok(())
}

fn cmd_constrained_eval(a: ConstrainedEvalArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let split = read_split(&a.split)?;
    let params = load_checkpoint(&a.checkpoint, &ds.vocab)?;
    let text = std::fs::read_to_string(&a.priors)
        .with_context(|| format!("cannot read priors file {}", a.priors.display()))?;
    let priors: BTreeMap<String, CandidatePrior> = serde_json::from_str(&text)
        .with_context(|| format!("bad priors file {}", a.priors.display()))?;
    let report = constrained_evaluate(&params, &ds, &split, &priors)?;

    RunManifest::new(
        "constrained-eval",
        None,
        serde_json::json!({ "prior_count": priors.len() }),
        &[&a.checkpoint, &a.dataset, &a.split, &a.priors],
        &[&a.out],
    )?
    .write_next_to(&a.out)?;
    write_metrics(&a.out, &report)?;
    println!(
        "constrained-eval: ssa1 {:.4} ssa5 {:.4} sa1 {:.4} sa5 {:.4} ({} priors) -> {}",
        report.ssa1,
        report.ssa5,
        report.sa1,
        report.sa5,
        priors.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let split = read_split(&a.split)?;
    let db = build_database(&ds, &split.database, None)?;

    let table;
    let fixture_client;
    let source = match &a.fixture {
        Some(path) => {
            fixture_client = FixtureClient::from_file(path)?;
            AddressSource::Geocoder(&fixture_client)
        }
        None => {
            table = location_addresses(&ds)?;
            AddressSource::Table(&table)
        }
    };
    let pipeline = pipeline_evaluate(&ds, &split, &db, &source, None)?;

    let mut inputs: Vec<&Path> = vec![&a.dataset, &a.split];
    if let Some(p) = &a.fixture {
        inputs.push(p);
    }
    if let Some(p) = &a.model_metrics {
        inputs.push(p);
    }
    RunManifest::new(
        "baseline",
        None,
        serde_json::json!({
            "address_source": if a.fixture.is_some() { "geocoder" } else { "table" },
            "database_rows": db.len(),
        }),
        &inputs,
        &[&a.out],
    )?
    .write_next_to(&a.out)?;

    match &a.model_metrics {
        Some(path) => {
            let model = read_metrics(path)?;
            let report = compare(&model, &pipeline)?;
            write_comparison(&a.out, &report)?;
            println!(
                "baseline: pipeline ssa1 {:.4} vs model ssa1 {:.4} (delta {:+.4}) -> {}",
                report.pipeline.ssa1,
                report.model.ssa1,
                report.delta.ssa1,
                a.out.display()
            );
        }
        None => {
            write_metrics(&a.out, &pipeline)?;
            println!(
                "baseline: ssa1 {:.4} ssa5 {:.4} sa1 {:.4} sa5 {:.4} -> {}",
                pipeline.ssa1,
                pipeline.ssa5,
                pipeline.sa1,
                pipeline.sa5,
                a.out.display()
            );
        }
    }
    Ok(())
}

fn cmd_simmap(a: SimmapArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let params = load_checkpoint(&a.checkpoint, &ds.vocab)?;
    let address = Address::parse_text(&a.address)?;
    let rows = similarity_map(&params, &ds, &address)?;

    RunManifest::new(
        "simmap",
        None,
        serde_json::json!({ "address": a.address }),
        &[&a.checkpoint, &a.dataset],
        &[&a.out],
    )?
    .write_next_to(&a.out)?;
    write_simmap_csv(&a.out, &rows)?;
    println!("simmap: {} rows -> {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = random_fd_suite(a.configs, a.seed, a.step)?;
    let failed = entries.iter().filter(|e| !e.pass).count();
    let report = serde_json::json!({
        "n_configs": a.configs,
        "seed": a.seed,
        "step": a.step,
        "all_pass": failed == 0,
        "entries": entries,
    });

    RunManifest::new(
        "gradcheck",
        Some(a.seed),
        serde_json::json!({ "configs": a.configs, "seed": a.seed, "step": a.step }),
        &[],
        &[&a.out],
    )?
    .write_next_to(&a.out)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("cannot write report {}", a.out.display()))?;

    let worst = entries
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0f64, f64::max);
    println!(
        "gradcheck: {}/{} configurations passed, worst relative error {:.3e} -> {}",
        a.configs - failed,
        a.configs,
        worst,
        a.out.display()
    );
    if failed > 0 {
        bail!("gradient check failed on {failed} of {} configurations", a.configs);
    }
    Ok(())
}
