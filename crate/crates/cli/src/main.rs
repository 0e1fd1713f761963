//! `gata2floor` command-line interface.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use gata2floor::config::RunConfig;
use gata2floor::eval::{
    assignment_accuracy, baseline_agglomerative, baseline_intersection, baseline_kde, markdown_table, EvalReport,
    F1Average, FacadeResult,
};
use gata2floor::facade::{load_facades, write_facades, FacadeRecord};
use gata2floor::graph::{build_graph, pseudo_labels, GraphSummary};
use gata2floor::labelfree::{candidates, load_pgm, read_scores, select, PatchEmbeddings, ProposalConfig};
use gata2floor::model::{forward, load_checkpoint, save_checkpoint, Mode, ModelConfig, ModelParams};
use gata2floor::synth::{generate, SynthConfig};
use gata2floor::train::{prepare, train, write_epoch_log};
use gata2floor::{selftest, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gata2floor", version, about = "Floor counting from window and door detections")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-facade work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic facades with known floors.
    Synth(SynthArgs),
    /// Build graphs and pseudo-labels.
    Graph(IoArgs),
    /// Train a model on pseudo-labels.
    Train(TrainArgs),
    /// Score a model and the baselines against ground truth.
    Eval(EvalArgs),
    /// Per-facade counts, confidence and floor assignments.
    Predict(PredictArgs),
    /// Run one clustering baseline.
    Baseline(BaselineArgs),
    /// Label-free window proposals from a grayscale image.
    Proposals(ProposalArgs),
    /// Gradient checks and oracle comparisons.
    Selftest,
}

#[derive(Args, Debug)]
struct IoArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    irregular: bool,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    min_floors: Option<u32>,
    #[arg(long)]
    max_floors: Option<u32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-facade model results.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Markdown comparison table; also printed to standard output.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    weighted_f1: bool,
    #[command(flatten)]
    baseline: BaselineParams,
}

#[derive(Args, Debug)]
struct BaselineParams {
    /// KDE bandwidth in normalized units.
    #[arg(long, default_value_t = 0.02)]
    bandwidth: f64,
    /// Agglomerative merge threshold; defaults to each facade's tau.
    #[arg(long)]
    threshold: Option<f64>,
    /// Intersection overlap ratio.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Kde,
    Ac,
    Ic,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    input: PathBuf,
    /// Per-facade CSV; defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    weighted_f1: bool,
    #[command(flatten)]
    params: BaselineParams,
}

#[derive(Args, Debug)]
struct ProposalArgs {
    /// Binary 8-bit PGM.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// JSON object from candidate index to score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write every candidate box, indexed, before selection.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    window: usize,
    /// Edge, variance and coherence weights.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    min_box: usize,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn io_err(path: Option<&Path>) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf),
        source: e,
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_json_lines<T: Serialize>(path: Option<&Path>, items: &[T]) -> Result<()> {
    let mut w = output(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn show_config(title: &str, lines: &str) {
    eprintln!("# {title}");
    for l in lines.lines() {
        eprintln!("#   {l}");
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn truth_of(r: &FacadeRecord) -> Result<usize> {
    r.floor_count
        .map(|c| c as usize)
        .ok_or_else(|| Error::Invalid(format!("facade `{}` has no floor_count", r.facade_id)))
}

fn run_baseline(method: Method, p: &BaselineParams, cfg: &RunConfig, r: &FacadeRecord) -> Result<usize> {
    match method {
        Method::Kde => baseline_kde(r, p.bandwidth),
        Method::Ac => {
            let threshold = match p.threshold {
                Some(t) => t,
                None => build_graph(r, &cfg.graph)?.tau,
            };
            baseline_agglomerative(r, threshold)
        }
        Method::Ic => baseline_intersection(r, p.overlap),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Kde => "KDE",
        Method::Ac => "AC",
        Method::Ic => "IC",
    }
}

fn baseline_report(
    method: Method,
    p: &BaselineParams,
    cfg: &RunConfig,
    records: &[FacadeRecord],
    average: F1Average,
) -> Result<EvalReport> {
    let facades = records
        .par_iter()
        .map(|r| {
            let c = run_baseline(method, p, cfg, r)?;
            Ok(FacadeResult {
                facade_id: r.facade_id.clone(),
                predicted: c as f64,
                rounded: c,
                truth: truth_of(r)?,
                confidence: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(method_name(method), facades, average)
}

#[derive(Serialize)]
struct NodeAssignment {
    node: usize,
    floor_id: usize,
    prob: f64,
}

#[derive(Serialize)]
struct Prediction {
    facade_id: String,
    floor_count: usize,
    raw_count: f64,
    confidence: f64,
    assignments: Vec<NodeAssignment>,
}

fn predict_one(r: &FacadeRecord, params: &ModelParams, mcfg: &ModelConfig, cfg: &RunConfig) -> Result<Prediction> {
    let g = build_graph(r, &cfg.graph)?;
    let out = forward(&g, params, mcfg, Mode::Eval)?;
    let assignments = out
        .assignment()
        .into_iter()
        .enumerate()
        .map(|(node, floor_id)| NodeAssignment {
            node,
            floor_id,
            prob: out.assign_probs.at(node, floor_id),
        })
        .collect();
    Ok(Prediction {
        facade_id: r.facade_id.clone(),
        floor_count: out.count(),
        raw_count: out.c_hat,
        confidence: out.u_hat,
        assignments,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Invalid(format!("--jobs: {e}")))?;
    }
    let cfg = resolve(&cli)?;
    cfg.validate()?;

    match &cli.command {
        Command::Synth(a) => {
            let mut s = SynthConfig {
                seed: cli.seed.unwrap_or(0),
                irregular: a.irregular,
                ..Default::default()
            };
            if let Some(j) = a.jitter {
                s.jitter = j;
            }
            if let Some(d) = a.dropout {
                s.dropout = d;
            }
            s.floors = (a.min_floors.unwrap_or(s.floors.0), a.max_floors.unwrap_or(s.floors.1));
            show_config("synth", &serde_json::to_string_pretty(&s)?);
            let records = generate(&s, a.n)?;
            let path = a.out.as_deref();
            let mut w = output(path)?;
            write_facades(&mut w, &records)?;
            w.flush().map_err(io_err(path))?;
        }
        Command::Graph(a) => {
            show_config("graph", &cfg.to_kv_string());
            let records = load_facades(&a.input)?;
            let summaries = records
                .par_iter()
                .map(|r| {
                    let g = build_graph(r, &cfg.graph)?;
                    Ok(GraphSummary::new(&g, &pseudo_labels(&g)))
                })
                .collect::<Result<Vec<_>>>()?;
            write_json_lines(a.out.as_deref(), &summaries)?;
        }
        Command::Train(a) => {
            let mut cfg = cfg.clone();
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            cfg.validate()?;
            show_config("train", &cfg.to_kv_string());
            let examples = prepare(&load_facades(&a.input)?, &cfg.graph)?;
            let outcome = train(&examples, &cfg.model, &cfg.train, |e, _| {
                eprintln!(
                    "epoch {:>4}  loss {:.4}  train_mae {:.3}  train_acc {:.3}",
                    e.epoch, e.loss.total, e.train_mae, e.train_acc
                );
            })?;
            save_checkpoint(&a.out, &outcome.params, &cfg.model)?;
            if let Some(p) = &a.log {
                let mut w = output(Some(p))?;
                write_epoch_log(&mut w, &outcome.log).map_err(io_err(Some(p)))?;
                w.flush().map_err(io_err(Some(p)))?;
            }
        }
        Command::Eval(a) => {
            show_config("eval", &cfg.to_kv_string());
            let average = if a.weighted_f1 { F1Average::Weighted } else { F1Average::Macro };
            let records = load_facades(&a.input)?;
            let (mcfg, params) = load_checkpoint(&a.checkpoint)?;
            let preds = records
                .par_iter()
                .map(|r| {
                    let p = predict_one(r, &params, &mcfg, &cfg)?;
                    let slots: Vec<usize> = p.assignments.iter().map(|n| n.floor_id).collect();
                    let assign = if r.boxes.iter().all(|b| b.floor_id.is_some()) {
                        Some(assignment_accuracy(r, &slots)? * r.boxes.len() as f64)
                    } else {
                        None
                    };
                    let res = FacadeResult {
                        facade_id: r.facade_id.clone(),
                        predicted: p.raw_count,
                        rounded: p.floor_count,
                        truth: truth_of(r)?,
                        confidence: Some(p.confidence),
                    };
                    Ok((res, assign))
                })
                .collect::<Result<Vec<_>>>()?;
            let nodes: usize = records.iter().map(|r| r.boxes.len()).sum();
            let hits: Option<f64> = preds.iter().map(|(_, a)| *a).sum();
            let mut model = EvalReport::new("GATA2Floor", preds.into_iter().map(|(r, _)| r).collect(), average)?;
            model.assignment_accuracy = hits.filter(|_| nodes > 0).map(|h| h / nodes as f64);
            let mut reports = vec![model];
            for m in [Method::Kde, Method::Ac, Method::Ic] {
                reports.push(baseline_report(m, &a.baseline, &cfg, &records, average)?);
            }
            if let Some(p) = &a.csv {
                let mut w = output(Some(p))?;
                reports[0].write_csv(&mut w).map_err(io_err(Some(p)))?;
                w.flush().map_err(io_err(Some(p)))?;
            }
            let mut table = markdown_table(&reports);
            if let Some(acc) = reports[0].assignment_accuracy {
                table.push_str(&format!("\nPer-node assignment accuracy: {acc:.3}\n"));
            }
            if let Some(p) = &a.table {
                write_text(Some(p), &table)?;
            }
            write_text(None, &table)?;
        }
        Command::Predict(a) => {
            show_config("predict", &cfg.to_kv_string());
            let records = load_facades(&a.input)?;
            let (mcfg, params) = load_checkpoint(&a.checkpoint)?;
            let preds = records
                .par_iter()
                .map(|r| predict_one(r, &params, &mcfg, &cfg))
                .collect::<Result<Vec<_>>>()?;
            write_json_lines(a.out.as_deref(), &preds)?;
        }
        Command::Baseline(a) => {
            show_config("baseline", &cfg.to_kv_string());
            eprintln!(
                "#   method = {}, bandwidth = {}, threshold = {}, overlap = {}",
                method_name(a.method),
                a.params.bandwidth,
                a.params.threshold.map_or("tau".into(), |t| t.to_string()),
                a.params.overlap
            );
            let records = load_facades(&a.input)?;
            let counts = records
                .par_iter()
                .map(|r| run_baseline(a.method, &a.params, &cfg, r))
                .collect::<Result<Vec<_>>>()?;
            let mut csv = String::from("facade_id,count,truth\n");
            for (r, c) in records.iter().zip(&counts) {
                let truth = r.floor_count.map(|t| t.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{c},{truth}\n", r.facade_id));
            }
            write_text(a.out.as_deref(), &csv)?;
            if records.iter().all(|r| r.floor_count.is_some()) && !records.is_empty() {
                let average = if a.weighted_f1 { F1Average::Weighted } else { F1Average::Macro };
                let report = baseline_report(a.method, &a.params, &cfg, &records, average)?;
                eprint!("{}", markdown_table(&[report]));
            }
        }
        Command::Proposals(a) => {
            let pcfg = ProposalConfig {
                variance_window: a.window,
                weights: [a.weights[0], a.weights[1], a.weights[2]],
                min_box: a.min_box,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            show_config("proposals", &serde_json::to_string_pretty(&pcfg)?);
            let img = load_pgm(&a.image)?;
            let emb = a.embeddings.as_ref().map(PatchEmbeddings::load).transpose()?;
            let cands = candidates(&img, emb.as_ref(), &pcfg)?;
            if let Some(p) = &a.candidates {
                let listed: BTreeMap<usize, _> = cands.boxes.iter().enumerate().collect();
                write_text(Some(p), &(serde_json::to_string_pretty(&listed)? + "\n"))?;
            }
            let f = File::open(&a.scores).map_err(|e| Error::Io {
                path: a.scores.clone(),
                source: e,
            })?;
            let scores = read_scores(io::BufReader::new(f))?;
            let set = select(&cands.boxes, &scores, &pcfg)?;
            let facade_id = a
                .image
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            let record = FacadeRecord {
                facade_id,
                width: img.width as u32,
                height: img.height as u32,
                boxes: set.boxes(),
                floor_count: None,
            };
            let mut w = output(Some(&a.out))?;
            write_facades(&mut w, &[record])?;
            w.flush().map_err(io_err(Some(&a.out)))?;
            eprintln!("{} of {} candidates kept", set.proposals.len(), cands.boxes.len());
        }
        Command::Selftest => {
            let checks = selftest::run_all(cli.seed.unwrap_or(0))?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
