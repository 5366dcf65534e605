mod config;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dds_core::datagen::{generate, summarize};
use dds_core::eval::{build_graph, run_experiment, Dataset};
use dds_core::ingest::{parse_transactions, write_transactions, RecordFormat, StaticGraph};
use dds_core::nn::LayerKind;
use dds_core::partition::{pic_cluster, refine_partition, PartitionAssignment};
use dds_core::serve::{
    latency_report, serve_lines, store_write, EmbeddingStore, ScoreRequest, Scorer, TcpService,
    LATEST, MIN_LATENCY_SAMPLES,
};
use dds_core::{audit_no_future, DdsGraph, LnnModel, TransactionRecord};

use crate::config::PipelineConfig;

/// Temporal graph fraud scoring: data generation, graph building,
/// training, embedding export, serving and evaluation.
#[derive(Parser)]
#[command(name = "dds", version)]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Write a synthetic transaction log with planted fraud rings.
    Datagen(DatagenArgs),
    /// Parse a transaction log into a static graph.
    Ingest(IngestArgs),
    /// Cluster the static graph and split clusters down to the size cap.
    Partition(PartitionArgs),
    /// Unroll the static graph into the dynamic snapshot graph.
    BuildDds(BuildDdsArgs),
    /// Train an LNN on community batches and save the checkpoint.
    Train(TrainArgs),
    /// Export stage-1 entity embeddings to a store file.
    Embed(EmbedArgs),
    /// Score every record of a transaction log against a store.
    Score(ScoreArgs),
    /// Answer NDJSON score requests over TCP or stdin/stdout.
    Serve(ServeArgs),
    /// Train and compare all models; write markdown and JSON reports.
    Eval(EvalArgs),
    /// Check that no labeled order can see its own or a later snapshot.
    Audit(AuditArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Output log; `.csv` selects CSV, anything else JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail when any row is rejected.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildDdsArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a plain-text edge listing.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured layer kind.
    #[arg(long)]
    kind: Option<LayerKind>,
    /// Init and batch-order seed; the first configured seed by default.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-epoch history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    dds: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only entity snapshots strictly before this snapshot.
    #[arg(long)]
    as_of: Option<u32>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Transaction log to score; the configured records by default.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// NDJSON responses; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Listen address; overrides the config and `DDS_ADDR`.
    #[arg(long)]
    addr: Option<String>,
    /// Read requests from stdin and answer on stdout instead of TCP.
    #[arg(long)]
    stdio: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    dds: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("error: kind=cli msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            let msg = error_message(&e);
            eprintln!("error: kind={kind} msg={msg}");
            ExitCode::FAILURE
        }
    }
}

/// Context chain joined with ": ". Core errors already print their source.
fn error_message(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<dds_core::Error>() {
            break;
        }
    }
    parts
        .join(": ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<dds_core::Error>() {
            return d.kind();
        }
        if cause.is::<io::Error>() {
            return "io";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
    }
    "cli"
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Datagen(a) => datagen(&cfg, a),
        Command::Ingest(a) => ingest(&cfg, a),
        Command::Partition(a) => partition(&cfg, a),
        Command::BuildDds(a) => build_dds(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Embed(a) => embed(&cfg, a),
        Command::Score(a) => score(&cfg, a),
        Command::Serve(a) => serve(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Audit(a) => audit(&cfg, a),
    }
}

fn pick(flag: Option<PathBuf>, configured: &Path) -> PathBuf {
    flag.unwrap_or_else(|| configured.to_path_buf())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn read_records(path: &Path, strict: bool) -> Result<Vec<TransactionRecord>> {
    let parsed = parse_transactions(path, RecordFormat::from_path(path))
        .with_context(|| format!("reading {}", path.display()))?;
    for e in parsed.errors.iter().take(20) {
        log::warn!("{}: rejected {e}", path.display());
    }
    if !parsed.errors.is_empty() {
        if strict {
            bail!(
                "{} rows rejected in {}",
                parsed.errors.len(),
                path.display()
            );
        }
        log::warn!("{} rows rejected in total", parsed.errors.len());
    }
    Ok(parsed.records)
}

fn datagen(cfg: &PipelineConfig, a: DatagenArgs) -> Result<()> {
    let mut gen = cfg.datagen.clone();
    if let Some(s) = a.seed {
        gen.seed = s;
    }
    let out = pick(a.out, &cfg.paths.records);
    let records = generate(&gen)?;
    ensure_parent(&out)?;
    write_transactions(&records, &out, RecordFormat::from_path(&out))?;
    let stats = summarize(&records, &gen.snapshot_index()?)?;
    println!(
        "records={} fraud={} legit={} entities={} out={}",
        stats.n_records,
        stats.n_fraud,
        stats.n_legit,
        stats.n_entities,
        out.display()
    );
    Ok(())
}

fn ingest(cfg: &PipelineConfig, a: IngestArgs) -> Result<()> {
    let input = pick(a.input, &cfg.paths.records);
    let out = pick(a.out, &cfg.paths.graph);
    let records = read_records(&input, a.strict)?;
    let graph = build_graph(&records, &cfg.experiment)?;
    ensure_parent(&out)?;
    graph.save(&out)?;
    println!(
        "orders={} entities={} edges={} snapshots={} out={}",
        graph.n_orders(),
        graph.n_entities(),
        graph.n_edges(),
        graph.index.n_snapshots,
        out.display()
    );
    Ok(())
}

fn partition(cfg: &PipelineConfig, a: PartitionArgs) -> Result<()> {
    let graph = StaticGraph::load(&pick(a.graph, &cfg.paths.graph))?;
    let out = pick(a.out, &cfg.paths.partition);
    let coarse = pic_cluster(&graph, &cfg.experiment.pic)?;
    let parts = refine_partition(&graph, &coarse, &cfg.experiment.refine)?;
    ensure_parent(&out)?;
    parts.save(&out)?;
    let sizes = parts.sizes();
    println!(
        "coarse={} parts={} max_size={} out={}",
        coarse.n_parts,
        parts.n_parts,
        sizes.iter().max().copied().unwrap_or(0),
        out.display()
    );
    Ok(())
}

fn build_dds(cfg: &PipelineConfig, a: BuildDdsArgs) -> Result<()> {
    let graph = StaticGraph::load(&pick(a.graph, &cfg.paths.graph))?;
    let out = pick(a.out, &cfg.paths.dds);
    let dds = DdsGraph::build_full(&graph, cfg.experiment.lnn.dds)?;
    ensure_parent(&out)?;
    dds.save(&out)?;
    if let Some(text) = a.text {
        ensure_parent(&text)?;
        let mut w = BufWriter::new(fs::File::create(&text)?);
        dds.write_text(&mut w)?;
        w.flush()?;
    }
    println!(
        "vertices={} edges={} out={}",
        dds.n_vertices(),
        dds.n_edges(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &PipelineConfig, a: TrainArgs) -> Result<()> {
    let graph = StaticGraph::load(&pick(a.graph, &cfg.paths.graph))?;
    let parts = PartitionAssignment::load(&pick(a.partition, &cfg.paths.partition))?;
    let out = pick(a.out, &cfg.paths.model);
    let exp = &cfg.experiment;
    let kind = a.kind.unwrap_or(exp.lnn.layer_kind);
    let seed = match a.seed {
        Some(s) => s,
        None => *exp.seeds.first().context("config lists no seeds")?,
    };
    let data = Dataset::from_parts(graph, parts, exp)?;
    let (model, history) = data.train_lnn(exp, kind, seed)?;
    ensure_parent(&out)?;
    model.save(&out)?;
    if let Some(h) = a.history {
        ensure_parent(&h)?;
        let json = serde_json::json!({
            "epochs": history.epochs,
            "best_epoch": history.best_epoch,
            "best_val_ap": history.best_val_ap,
            "pos_weight": history.pos_weight,
        });
        fs::write(&h, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    println!(
        "kind={kind} seed={seed} epochs={} best_epoch={} best_val_ap={:.6} model_version={:016x} out={}",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_ap,
        model.version(),
        out.display()
    );
    Ok(())
}

fn embed(cfg: &PipelineConfig, a: EmbedArgs) -> Result<()> {
    let graph = StaticGraph::load(&pick(a.graph, &cfg.paths.graph))?;
    let dds = DdsGraph::load(&pick(a.dds, &cfg.paths.dds))?;
    let model = LnnModel::load(&pick(a.model, &cfg.paths.model))?;
    let out = pick(a.out, &cfg.paths.store);
    if dds.config != model.config.dds {
        bail!(
            "dynamic graph was built with {:?} but the model expects {:?}",
            dds.config,
            model.config.dds
        );
    }
    let embs = model.infer_entity_embeddings(&graph, &dds, a.as_of)?;
    ensure_parent(&out)?;
    let snapshot = a.as_of.unwrap_or(LATEST);
    store_write(
        &out,
        model.embedding_dim(),
        model.version(),
        snapshot,
        &embs,
    )?;
    println!(
        "entities={} dim={} model_version={:016x} out={}",
        embs.len(),
        model.embedding_dim(),
        model.version(),
        out.display()
    );
    Ok(())
}

fn open_scorer(
    cfg: &PipelineConfig,
    model: Option<PathBuf>,
    store: Option<PathBuf>,
) -> Result<Scorer> {
    let model = LnnModel::load(&pick(model, &cfg.paths.model))?;
    let store = EmbeddingStore::open(&pick(store, &cfg.paths.store))?;
    Ok(Scorer::new(model, store)?)
}

fn score(cfg: &PipelineConfig, a: ScoreArgs) -> Result<()> {
    let records = read_records(&pick(a.input, &cfg.paths.records), false)?;
    let scorer = open_scorer(cfg, a.model, a.store)?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for r in &records {
        let line = scorer.handle_line(&serde_json::to_string(&ScoreRequest::from(r))?);
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    report_latency(&scorer);
    Ok(())
}

fn report_latency(scorer: &Scorer) {
    let lat = scorer.latencies();
    if lat.len() >= MIN_LATENCY_SAMPLES {
        if let Ok(r) = latency_report(&lat) {
            log::info!(
                "latency n={} p50={}us p95={}us p99={}us max={}us throughput={:.0}/s",
                r.count,
                r.p50_micros,
                r.p95_micros,
                r.p99_micros,
                r.max_micros,
                r.throughput
            );
        }
    }
}

fn serve(cfg: &PipelineConfig, a: ServeArgs) -> Result<()> {
    let scorer = Arc::new(open_scorer(cfg, a.model, a.store)?);
    if a.stdio {
        let stdin = io::stdin();
        serve_lines(&scorer, stdin.lock(), io::stdout().lock())?;
        report_latency(&scorer);
        return Ok(());
    }
    let addr = a
        .addr
        .or_else(|| std::env::var("DDS_ADDR").ok())
        .unwrap_or_else(|| cfg.serve.addr.clone());
    let svc = TcpService::start(scorer.clone(), addr.as_str())?;
    println!("listening={}", svc.local_addr());
    io::stdout().flush()?;
    // Serves until the process is killed.
    loop {
        std::thread::park();
    }
}

fn eval(cfg: &PipelineConfig, a: EvalArgs) -> Result<()> {
    let records = read_records(&pick(a.input, &cfg.paths.records), false)?;
    let out_dir = pick(a.out_dir, &cfg.paths.report_dir);
    let report = run_experiment(&records, &cfg.experiment)?;
    fs::create_dir_all(&out_dir)?;
    let md = report.to_markdown();
    fs::write(out_dir.join("report.md"), &md)?;
    fs::write(out_dir.join("report.json"), report.to_json()? + "\n")?;
    print!("{md}");
    Ok(())
}

fn audit(cfg: &PipelineConfig, a: AuditArgs) -> Result<()> {
    let dds = DdsGraph::load(&pick(a.dds, &cfg.paths.dds))?;
    let report = audit_no_future(&dds);
    if !report.ok {
        let first = report
            .violations
            .first()
            .map(|v| format!("{v:?}"))
            .unwrap_or_default();
        println!(
            "ok=false checked_orders={} violations={}",
            report.checked_orders,
            report.violations.len()
        );
        bail!(
            "{} orders see their own or a later snapshot; first: {first}",
            report.violations.len()
        );
    }
    println!(
        "ok=true checked_orders={} violations=0",
        report.checked_orders
    );
    Ok(())
}
