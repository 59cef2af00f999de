//! `cf3`: synthetic data, target training, attribution, explainer training,
//! explanation and evaluation as separate stages sharing one output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use cf3_core::explainer::ExplainerConfig;
use cf3_core::fixtures::five_node_gradient_check;
use cf3_core::pipeline::{self, Dataset, RunConfig};
use cf3_core::synthbench::SynthConfig;
use cf3_core::{Error, ErrorKind};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cf3", version, about = "Factual/counterfactual evidence subgraphs for company risk graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic company graph with planted risk motifs.
    Synth(SynthArgs),
    /// Split the labels and train the target classifier.
    TrainTarget(StageArgs),
    /// Meta-path attribution for the explainer's training instances.
    Attribute(StageArgs),
    /// Train the explainer against the attribution subgraphs.
    TrainExplainer(StageArgs),
    /// Explain held-out instances; writes evidence.json and DOT files.
    Explain(StageArgs),
    /// Score the evidence; writes report.json.
    Evaluate(StageArgs),
    /// Compare analytic and numeric gradients on the bundled 5-node instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set explainer.epochs=50`. The value
    /// is parsed as JSON and falls back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    companies: Option<usize>,
    #[arg(long)]
    motifs: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    /// Dataset directory (overrides `data` in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory shared by all stages (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Explainer training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Explainer learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Edges kept per explanation (K).
    #[arg(long)]
    edge_budget: Option<usize>,
    #[arg(long)]
    top_m: Option<usize>,
    /// Worker threads for explain/evaluate; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 4)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) | None => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(args) => synth(args),
        Command::TrainTarget(args) => stage(args, |ds, cfg, out| {
            let t = pipeline::train_target_stage(ds, cfg, out)?;
            println!("target: train accuracy {:.4}, final loss {:.6}", t.train_accuracy, last(&t.loss_trace));
            Ok(())
        }),
        Command::Attribute(args) => stage(args, |ds, cfg, out| {
            let recs = pipeline::attribute_stage(ds, cfg, out)?;
            let warned = recs.iter().filter(|r| r.warning.is_some()).count();
            println!("attribution: {} instances ({warned} without a positive delta)", recs.len());
            Ok(())
        }),
        Command::TrainExplainer(args) => stage(args, |ds, cfg, out| {
            let t = pipeline::train_explainer_stage(ds, cfg, out)?;
            println!(
                "explainer: loss {:.6} -> {:.6}; counterfactual CE {:.6} -> {:.6}",
                t.loss_trace[0],
                last(&t.loss_trace),
                t.counterfactual_before,
                t.counterfactual_after
            );
            Ok(())
        }),
        Command::Explain(args) => stage(args, |ds, cfg, out| {
            let ev = pipeline::explain_stage(ds, cfg, out)?;
            println!("explained {} instances -> {}", ev.len(), out.join(pipeline::EVIDENCE).display());
            Ok(())
        }),
        Command::Evaluate(args) => stage(args, |ds, cfg, out| {
            let report = pipeline::evaluate_stage(ds, cfg, out)?;
            let m = &report.metrics;
            println!("fidelity+ {:.4}", m.fidelity_plus);
            println!("fidelity- {:.4}", m.fidelity_minus);
            println!("charact   {}", opt(m.charact));
            println!("gef       {:.4}", m.gef);
            println!("ror       {}", opt(m.ror));
            println!("kappa     {}", opt(m.kappa));
            if let Some(b) = &report.benchmark {
                println!(
                    "edge auc {:.4} (random {:.4}); precision@{} {:.4} (random {:.4})",
                    b.edge_auc, b.random_edge_auc, b.k, b.precision_at_k, b.random_precision_at_k
                );
            }
            println!("report -> {}", out.join(pipeline::REPORT).display());
            Ok(())
        }),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn last(v: &[f64]) -> f64 {
    v.last().copied().unwrap_or(f64::NAN)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    push(&mut extra, "num_companies", args.companies.map(Value::from));
    push(&mut extra, "motif_count", args.motifs.map(Value::from));
    push(&mut extra, "seed", args.overrides.seed.map(Value::from));
    let cfg: SynthConfig = resolve_config(&args.overrides, SynthConfig::default(), &extra)?;
    let data = pipeline::synth_stage(&cfg, &args.out)?;
    let risky = data.labels.iter().filter(|l| l.1 == 1).count();
    println!(
        "synth: {} nodes, {} edges, {} risky of {} companies -> {}",
        data.graph.num_nodes(),
        data.graph.edges().len(),
        risky,
        data.labels.len(),
        args.out.display()
    );
    Ok(())
}

fn stage(args: StageArgs, f: impl FnOnce(&Dataset, &RunConfig, &Path) -> cf3_core::Result<()>) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    push(&mut extra, "data", args.data.as_ref().map(|p| Value::from(p.display().to_string())));
    push(&mut extra, "out", args.out.as_ref().map(|p| Value::from(p.display().to_string())));
    push(&mut extra, "seed", args.overrides.seed.map(Value::from));
    push(&mut extra, "explainer.epochs", args.epochs.map(Value::from));
    push(&mut extra, "explainer.learning_rate", args.lr.map(Value::from));
    push(&mut extra, "explainer.edge_budget", args.edge_budget.map(Value::from));
    push(&mut extra, "top_m", args.top_m.map(Value::from));
    push(&mut extra, "workers", args.workers.map(Value::from));
    let cfg: RunConfig = resolve_config(&args.overrides, RunConfig::default(), &extra)?;
    cfg.validate()?;
    let data = cfg.data.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set `data`".into()))?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no run directory: pass --out or set `out`".into()))?;
    if !data.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", data.display())).into());
    }
    let ds = Dataset::load(&data)?;
    f(&ds, &cfg, &out)?;
    Ok(())
}

fn push(list: &mut Vec<(String, Value)>, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        list.push((key.to_string(), v));
    }
}

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
fn resolve_config<T>(o: &Overrides, defaults: T, flags: &[(String, Value)]) -> anyhow::Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut doc = serde_json::to_value(defaults).context("serializing defaults")?;
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut doc, file);
    }
    for pair in &o.set {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut doc, key, value)?;
    }
    for (key, value) in flags {
        set_path(&mut doc, key, value.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| anyhow!(Error::Config(e.to_string())))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad config key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = ExplainerConfig {
        hidden_dim: args.hidden_dim,
        l2: 0.0,
        seed: args.seed,
        ..ExplainerConfig::default()
    };
    let err = five_node_gradient_check(&cfg, args.step)?;
    println!("max relative error: {err:.3e}");
    if err < GRADCHECK_TOLERANCE {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(())
    } else {
        Err(Error::Numeric { op: "gradient check" }.into())
    }
}
