//! File-based stages: dataset → target → attribution → explainer →
//! evidence → report. Each stage reads what earlier stages wrote under the
//! output directory and records itself in `run-manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{build_attribution_subgraph, AttributionRecord, AttributionSubgraph, RemovalMode, WeightedEdge};
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::explainer::{explain, train_explainer, EvidenceSubgraph, ExplainerConfig, ExplainerParams, ExplainerTraining, KeptEdge};
use crate::hetgraph::{computation_subgraph, load_graph, load_labels, read_file, read_jsonl, write_file, CompSubgraph, HetGraph, MetaPathPattern, NodeType};
use crate::metrics::{evaluate_evidence, Annotation, Report};
use crate::synthbench::{explanation_edge_auc, feature_precision_at_k, generate, GroundTruth, SynthConfig, SynthData};
use crate::target::{train_target, TargetCheckpoint, TargetConfig, TargetTraining};

pub const MANIFEST: &str = "run-manifest.json";
pub const SPLIT: &str = "split.json";
pub const TARGET: &str = "target.json";
pub const ATTRIBUTION: &str = "attribution.json";
pub const EXPLAINER: &str = "explainer.json";
pub const EXPLAINER_TRAINING: &str = "explainer-training.json";
pub const EVIDENCE: &str = "evidence.json";
pub const EVIDENCE_DOT_DIR: &str = "evidence";
pub const REPORT: &str = "report.json";

fn default_patterns() -> Vec<MetaPathPattern> {
    let c = NodeType::Company;
    let p = |types: Vec<NodeType>, rels: &[&str]| MetaPathPattern {
        node_types: types,
        relations: rels.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        p(vec![c, c], &["guarantee"]),
        p(vec![c, c, c], &["guarantee", "guarantee"]),
        p(vec![c, c], &["invest"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory, for front-ends that read it from the config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory, likewise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Overrides the seeds of the nested target and explainer configs.
    pub seed: u64,
    pub hops: usize,
    /// Share of labelled companies used for training.
    pub train_fraction: f64,
    /// Cap on explainer training instances, filled half with positives
    /// unless `train_positives_only` is set.
    pub max_train_instances: usize,
    /// Train the explainer on risky training nodes only.
    pub train_positives_only: bool,
    /// Cap on explained/evaluated held-out instances.
    pub max_eval_instances: usize,
    pub patterns: Vec<MetaPathPattern>,
    pub top_m: usize,
    /// Explainer training skips instances whose largest meta-path delta
    /// (in nats) is below this: their label does not rest on structure.
    pub min_attribution_delta: f64,
    pub removal_mode: RemovalMode,
    /// Worker threads for `explain` and `evaluate`; 0 picks the core count.
    pub workers: usize,
    /// `k` of the feature precision score on benchmark data.
    pub precision_k: usize,
    pub write_dot: bool,
    pub target: TargetConfig,
    pub explainer: ExplainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: None,
            seed: 7,
            hops: 2,
            train_fraction: 0.5,
            max_train_instances: 40,
            train_positives_only: true,
            max_eval_instances: 60,
            patterns: default_patterns(),
            top_m: 3,
            min_attribution_delta: 0.1,
            removal_mode: RemovalMode::PerInstance,
            workers: 1,
            precision_k: 8,
            write_dot: true,
            target: TargetConfig::default(),
            explainer: ExplainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(Error::Config("hops must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0,1)".into()));
        }
        if self.max_train_instances == 0 || self.max_eval_instances == 0 {
            return Err(Error::Config("instance caps must be >= 1".into()));
        }
        if self.patterns.is_empty() || self.top_m == 0 {
            return Err(Error::Config("at least one meta-path and top_m >= 1 are required".into()));
        }
        for p in &self.patterns {
            p.validate()?;
        }
        if !(self.min_attribution_delta >= 0.0 && self.min_attribution_delta.is_finite()) {
            return Err(Error::Config("min_attribution_delta must be finite and >= 0".into()));
        }
        if self.precision_k == 0 {
            return Err(Error::Config("precision_k must be >= 1".into()));
        }
        self.target.validate()?;
        self.explainer.validate()
    }

    /// The config as used: nested seeds replaced by the run seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.target.seed = self.seed;
        c.explainer.seed = self.seed;
        c
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(to_json(&self.resolved()).as_bytes()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_file(path, &to_json(v))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Reads an artifact an earlier stage should have produced.
fn upstream<T: DeserializeOwned>(out: &Path, name: &str, stage: &str) -> Result<T> {
    let path = out.join(name);
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run `{stage}` first", path.display())));
    }
    read_json(&path)
}

fn require_file(path: PathBuf, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{} not found; run `{stage}` first", path.display())))
    }
}

/// A dataset directory: `nodes.jsonl`, `edges.jsonl`, `features.csv`,
/// `labels.jsonl`, and optionally `ground_truth.jsonl` and
/// `annotations.jsonl`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub graph: HetGraph,
    pub labels: Vec<(usize, u8)>,
    pub truth: Option<GroundTruth>,
    pub annotations: Option<Vec<Annotation>>,
}

impl Dataset {
    pub const FILES: [&'static str; 4] = ["nodes.jsonl", "edges.jsonl", "features.csv", "labels.jsonl"];

    pub fn load(dir: &Path) -> Result<Self> {
        let p = |f: &str| dir.join(f);
        let graph = load_graph(&p("nodes.jsonl"), &p("edges.jsonl"), &p("features.csv"))?;
        let labels = load_labels(&graph, &p("labels.jsonl"))?;
        let truth = match p("ground_truth.jsonl") {
            f if f.exists() => Some(GroundTruth::load(&f)?),
            _ => None,
        };
        let annotations = match p("annotations.jsonl") {
            f if f.exists() => Some(read_jsonl(&f)?),
            _ => None,
        };
        Ok(Dataset {
            dir: dir.to_path_buf(),
            graph,
            labels,
            truth,
            annotations,
        })
    }

    fn label_of(&self) -> BTreeMap<&str, u8> {
        self.labels.iter().map(|&(i, y)| (self.graph.id(i), y)).collect()
    }

    fn instance(&self, id: &str, hops: usize) -> Result<CompSubgraph> {
        let y = self.label_of().get(id).copied();
        Ok(computation_subgraph(&self.graph, id, hops)?.with_label(y))
    }

    fn instances(&self, ids: &[String], hops: usize) -> Result<Vec<CompSubgraph>> {
        let labels = self.label_of();
        ids.iter()
            .map(|id| Ok(computation_subgraph(&self.graph, id, hops)?.with_label(labels.get(id.as_str()).copied())))
            .collect()
    }

    fn input_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = Self::FILES.iter().map(|f| self.dir.join(f)).collect();
        for extra in ["ground_truth.jsonl", "annotations.jsonl"] {
            if self.dir.join(extra).exists() {
                files.push(self.dir.join(extra));
            }
        }
        files
    }
}

/// Train/test partition of the labelled nodes plus the instance lists each
/// later stage works on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Training nodes the explainer learns from.
    pub explainer_train: Vec<String>,
    /// Held-out nodes that get explained and evaluated.
    pub eval: Vec<String>,
}

/// Up to `cap` ids, half positives where possible, in the given order.
fn balanced(ids: &[String], labels: &BTreeMap<&str, u8>, cap: usize) -> Vec<String> {
    let (pos, neg): (Vec<&String>, Vec<&String>) = ids.iter().partition(|id| labels[id.as_str()] == 1);
    let np = pos.len().min(cap / 2);
    let nn = neg.len().min(cap - np);
    let np = pos.len().min(cap - nn);
    let keep: std::collections::BTreeSet<&String> = pos[..np].iter().chain(&neg[..nn]).copied().collect();
    ids.iter().filter(|id| keep.contains(id)).cloned().collect()
}

pub fn make_split(ds: &Dataset, cfg: &RunConfig) -> Result<Split> {
    let mut ids: Vec<String> = ds.labels.iter().map(|&(i, _)| ds.graph.id(i).to_string()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config("at least two labelled nodes are needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ids.shuffle(&mut rng);
    let n_train = ((ids.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let test = ids.split_off(n_train);
    let labels = ds.label_of();
    Ok(Split {
        explainer_train: if cfg.train_positives_only {
            let pos: Vec<String> = ids.iter().filter(|id| labels[id.as_str()] == 1).take(cfg.max_train_instances).cloned().collect();
            if pos.is_empty() {
                return Err(Error::Config("no risky node in the training split".into()));
            }
            pos
        } else {
            balanced(&ids, &labels, cfg.max_train_instances)
        },
        eval: balanced(&test, &labels, cfg.max_eval_instances),
        train: ids,
        test,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Input file → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn record_stage(out: &Path, stage: &str, inputs: &[PathBuf], outputs: &[&str], seed: u64, config_hash: String) -> Result<()> {
    let path = out.join(MANIFEST);
    let mut manifest: Manifest = if path.exists() { read_json(&path)? } else { Manifest::default() };
    let mut entry = StageEntry {
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config_hash,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        ..Default::default()
    };
    for f in inputs {
        entry.inputs.insert(f.display().to_string(), file_hash(f)?);
    }
    manifest.stages.insert(stage.to_string(), entry);
    write_json(&path, &manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates a benchmark dataset into `out`.
pub fn synth_stage(cfg: &SynthConfig, out: &Path) -> Result<SynthData> {
    create_dir(out)?;
    let data = generate(cfg)?;
    data.write(out)?;
    let hash = hex(&Sha256::digest(to_json(cfg).as_bytes()));
    let outputs = ["nodes.jsonl", "edges.jsonl", "features.csv", "labels.jsonl", "ground_truth.jsonl", "annotations.jsonl"];
    record_stage(out, "synth", &[], &outputs, cfg.seed, hash)?;
    info!("synth: {} nodes, {} edges", data.graph.num_nodes(), data.graph.edges().len());
    Ok(data)
}

/// Splits the labels and trains the target on the training part.
pub fn train_target_stage(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<TargetTraining> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    create_dir(out)?;
    let split = make_split(ds, &cfg)?;
    let train: std::collections::BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let labels: Vec<(usize, u8)> = ds
        .labels
        .iter()
        .copied()
        .filter(|&(i, _)| train.contains(ds.graph.id(i)))
        .collect();
    let trained = train_target(&ds.graph, &labels, &cfg.target)?;
    trained.checkpoint.save(&out.join(TARGET))?;
    write_json(&out.join(SPLIT), &split)?;
    record_stage(out, "train-target", &ds.input_files(), &[TARGET, SPLIT], cfg.seed, cfg.hash())?;
    info!("target: train accuracy {:.3}", trained.train_accuracy);
    Ok(trained)
}

fn load_target(out: &Path) -> Result<(TargetCheckpoint, PathBuf)> {
    let path = require_file(out.join(TARGET), "train-target")?;
    Ok((TargetCheckpoint::load(&path)?, path))
}

/// Meta-path attribution for every explainer training instance.
pub fn attribute_stage(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<Vec<AttributionRecord>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (ckpt, target_path) = load_target(out)?;
    let split: Split = upstream(out, SPLIT, "train-target")?;
    let subs = ds.instances(&split.explainer_train, cfg.hops)?;
    let records = subs
        .iter()
        .map(|sub| {
            let att = build_attribution_subgraph(&ckpt, sub, &cfg.patterns, cfg.top_m, cfg.removal_mode)?;
            Ok(att.to_record(sub, &cfg.patterns))
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join(ATTRIBUTION), &records)?;
    let mut inputs = ds.input_files();
    inputs.extend([target_path, out.join(SPLIT)]);
    record_stage(out, "attribute", &inputs, &[ATTRIBUTION], cfg.seed, cfg.hash())?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub instances: usize,
    /// Attributed instances left out for a weak largest delta.
    pub skipped: usize,
    pub loss_trace: Vec<f64>,
    pub counterfactual_before: f64,
    pub counterfactual_after: f64,
}

pub fn train_explainer_stage(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<ExplainerTraining> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (ckpt, target_path) = load_target(out)?;
    let records: Vec<AttributionRecord> = upstream(out, ATTRIBUTION, "attribute")?;
    let mut subs = Vec::with_capacity(records.len());
    let mut atts = Vec::with_capacity(records.len());
    let informative = |rec: &&AttributionRecord| {
        rec.contributions.iter().any(|c| c.delta >= cfg.min_attribution_delta)
    };
    for rec in records.iter().filter(informative) {
        let sub = ds.instance(&rec.center, cfg.hops)?;
        atts.push(AttributionSubgraph::from_record(&sub, rec)?);
        subs.push(sub);
    }
    if subs.is_empty() {
        return Err(Error::Config(format!(
            "none of the {} attributed instances has a meta-path delta >= {}; lower min_attribution_delta",
            records.len(),
            cfg.min_attribution_delta
        )));
    }
    let trained = train_explainer(&subs, &ckpt, &atts, &cfg.explainer)?;
    trained.params.save(&out.join(EXPLAINER))?;
    let summary = TrainingSummary {
        instances: subs.len(),
        skipped: records.len() - subs.len(),
        loss_trace: trained.loss_trace.clone(),
        counterfactual_before: trained.counterfactual_before,
        counterfactual_after: trained.counterfactual_after,
    };
    write_json(&out.join(EXPLAINER_TRAINING), &summary)?;
    let mut inputs = ds.input_files();
    inputs.extend([target_path, out.join(ATTRIBUTION)]);
    record_stage(out, "train-explainer", &inputs, &[EXPLAINER, EXPLAINER_TRAINING], cfg.seed, cfg.hash())?;
    info!(
        "explainer: loss {:.4} -> {:.4}",
        summary.loss_trace[0],
        summary.loss_trace[summary.loss_trace.len() - 1]
    );
    Ok(trained)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub weight: f64,
}

/// Risk-class probabilities on the full input, the evidence alone and the
/// evidence removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidencePredictions {
    pub original: f64,
    pub factual: f64,
    pub counterfactual: f64,
}

/// One explained instance in `evidence.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub center: String,
    pub edges: Vec<WeightedEdge>,
    pub feature_importance: Vec<FeatureWeight>,
    pub predictions: EvidencePredictions,
}

fn weighted(ev: &EvidenceSubgraph, k: &KeptEdge) -> WeightedEdge {
    WeightedEdge {
        src: ev.node_ids[k.edge.src].clone(),
        dst: ev.node_ids[k.edge.dst].clone(),
        rel: ev.relations[k.edge.rel].clone(),
        weight: k.weight,
    }
}

pub fn evidence_record(ev: &EvidenceSubgraph, sub: &CompSubgraph, ckpt: &TargetCheckpoint, feature_names: &[String]) -> Result<EvidenceRecord> {
    let c = sub.center();
    let original = ckpt.predict_subgraph(sub)?[1];
    let factual = ckpt.predict(&ev.hard_adjacency(sub, true), &ev.hard_features(sub, true), c)?[1];
    let counterfactual = ckpt.predict(&ev.hard_adjacency(sub, false), &ev.hard_features(sub, false), c)?[1];
    Ok(EvidenceRecord {
        center: ev.center.clone(),
        edges: ev.kept_edges.iter().map(|k| weighted(ev, k)).collect(),
        feature_importance: ev
            .feature_importance()
            .into_iter()
            .zip(feature_names)
            .map(|(weight, name)| FeatureWeight { name: name.clone(), weight })
            .collect(),
        predictions: EvidencePredictions {
            original,
            factual,
            counterfactual,
        },
    })
}

/// Graphviz rendering: kept edges solid, removed edges dashed.
pub fn evidence_dot(ev: &EvidenceSubgraph) -> String {
    let kept: std::collections::BTreeSet<_> = ev.kept_edges.iter().map(|k| k.edge).collect();
    let mut s = String::from("digraph evidence {\n");
    let _ = writeln!(s, "  \"{}\" [shape=doublecircle];", ev.center);
    for k in &ev.edge_scores {
        let e = k.edge;
        let style = if kept.contains(&e) { "solid" } else { "dashed" };
        let _ = writeln!(
            s,
            "  \"{}\" -> \"{}\" [label=\"{} {:.3}\", style={style}];",
            ev.node_ids[e.src], ev.node_ids[e.dst], ev.relations[e.rel], k.weight
        );
    }
    s.push_str("}\n");
    s
}

fn load_explainer(out: &Path) -> Result<(ExplainerParams, PathBuf)> {
    let path = require_file(out.join(EXPLAINER), "train-explainer")?;
    Ok((ExplainerParams::load(&path)?, path))
}

fn explain_all(params: &ExplainerParams, subs: &[CompSubgraph], cfg: &RunConfig) -> Result<Vec<EvidenceSubgraph>> {
    cfg.pool()?
        .install(|| subs.par_iter().map(|s| explain(params, s, &cfg.explainer)).collect())
}

/// Explains the held-out instances: `evidence.json` plus one DOT file each.
pub fn explain_stage(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<Vec<EvidenceSubgraph>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (params, params_path) = load_explainer(out)?;
    let (ckpt, target_path) = load_target(out)?;
    let split: Split = upstream(out, SPLIT, "train-target")?;
    let subs = ds.instances(&split.eval, cfg.hops)?;
    let evidence = explain_all(&params, &subs, &cfg)?;
    let records = cfg.pool()?.install(|| {
        evidence
            .par_iter()
            .zip(&subs)
            .map(|(ev, sub)| evidence_record(ev, sub, &ckpt, ds.graph.feature_names()))
            .collect::<Result<Vec<_>>>()
    })?;
    write_json(&out.join(EVIDENCE), &records)?;
    let mut outputs = vec![EVIDENCE];
    if cfg.write_dot {
        let dir = out.join(EVIDENCE_DOT_DIR);
        create_dir(&dir)?;
        for ev in &evidence {
            write_file(&dir.join(format!("{}.dot", ev.center)), &evidence_dot(ev))?;
        }
        outputs.push(EVIDENCE_DOT_DIR);
    }
    let mut inputs = ds.input_files();
    inputs.extend([target_path, params_path, out.join(SPLIT)]);
    record_stage(out, "explain", &inputs, &outputs, cfg.seed, cfg.hash())?;
    Ok(evidence)
}

/// Ground-truth scores on benchmark data, each next to a random baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    /// Risky evaluated instances with a defined edge AUC.
    pub instances: usize,
    pub edge_auc: f64,
    pub random_edge_auc: f64,
    pub k: usize,
    pub precision_at_k: f64,
    pub random_precision_at_k: f64,
    /// Fidelity+ of a random top-K edge selector; features stay intact.
    pub random_fidelity_plus: f64,
    /// Same random edges, plus features dropped under a random mask.
    pub random_masked_fidelity_plus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub metrics: Report,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<Benchmark>,
}

/// Uniform random edge scores, top-K kept, and a uniform random feature mask.
pub fn random_evidence(sub: &CompSubgraph, edge_budget: usize, rng: &mut ChaCha8Rng) -> Result<EvidenceSubgraph> {
    let edge_scores: Vec<KeptEdge> = sub
        .edges()
        .iter()
        .map(|&edge| KeptEdge { edge, weight: rng.gen::<f64>() })
        .collect();
    let mut kept = edge_scores.clone();
    kept.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.edge.cmp(&b.edge)));
    kept.truncate(edge_budget);
    let (n, d) = (sub.num_nodes(), sub.feature_dim());
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>()).collect();
    let mask = Tensor::new(n, d, data)?;
    Ok(EvidenceSubgraph {
        center: sub.center_id().to_string(),
        node_ids: sub.node_ids().to_vec(),
        relations: sub.relations().to_vec(),
        edge_scores,
        kept_edges: kept,
        layer_masks: vec![mask.clone(); 2],
        masked_features: Tensor::from_fn(n, d, |i, j| sub.features().get(i, j) * mask.get(i, j))?,
        feature_mask: mask,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(
    subs: &[CompSubgraph],
    evidence: &[EvidenceSubgraph],
    truth: &GroundTruth,
    ckpt: &TargetCheckpoint,
    cfg: &RunConfig,
) -> Result<Option<Benchmark>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let random = subs
        .iter()
        .map(|s| random_evidence(s, cfg.explainer.edge_budget, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let (mut auc, mut rauc, mut prec, mut rprec) = (vec![], vec![], vec![], vec![]);
    for ((sub, ev), rnd) in subs.iter().zip(evidence).zip(&random) {
        let Some(rec) = truth.get(sub.center_id()) else { continue };
        if sub.label() != Some(1) {
            continue;
        }
        // a subgraph made only of evidence edges has no negatives
        let (Ok(a), Ok(r)) = (explanation_edge_auc(ev, rec), explanation_edge_auc(rnd, rec)) else {
            continue;
        };
        auc.push(a);
        rauc.push(r);
        prec.push(feature_precision_at_k(ev, rec, cfg.precision_k)?);
        rprec.push(feature_precision_at_k(rnd, rec, cfg.precision_k)?);
    }
    if auc.is_empty() {
        return Ok(None);
    }
    // the edge selector removes random edges only; the masked variant also
    // drops features under its random mask
    let edges_only: Vec<EvidenceSubgraph> = random
        .iter()
        .map(|ev| EvidenceSubgraph {
            feature_mask: Tensor::zeros(ev.feature_mask.rows(), ev.feature_mask.cols()),
            ..ev.clone()
        })
        .collect();
    let random_report = evaluate_evidence(subs, ckpt, &edges_only, None)?;
    let masked_report = evaluate_evidence(subs, ckpt, &random, None)?;
    Ok(Some(Benchmark {
        instances: auc.len(),
        edge_auc: mean(&auc),
        random_edge_auc: mean(&rauc),
        k: cfg.precision_k,
        precision_at_k: mean(&prec),
        random_precision_at_k: mean(&rprec),
        random_fidelity_plus: random_report.fidelity_plus,
        random_masked_fidelity_plus: masked_report.fidelity_plus,
    }))
}

/// Scores the trained explainer on the held-out instances.
pub fn evaluate_stage(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (params, params_path) = load_explainer(out)?;
    let (ckpt, target_path) = load_target(out)?;
    let split: Split = upstream(out, SPLIT, "train-target")?;
    let subs = ds.instances(&split.eval, cfg.hops)?;
    let evidence = explain_all(&params, &subs, &cfg)?;
    let pool = cfg.pool()?;
    let metrics = pool.install(|| evaluate_evidence(&subs, &ckpt, &evidence, ds.annotations.as_deref()))?;
    let bench = match &ds.truth {
        Some(t) => pool.install(|| benchmark(&subs, &evidence, t, &ckpt, &cfg))?,
        None => None,
    };
    let report = RunReport { metrics, benchmark: bench };
    write_json(&out.join(REPORT), &report)?;
    let mut inputs = ds.input_files();
    inputs.extend([target_path, params_path, out.join(SPLIT)]);
    record_stage(out, "evaluate", &inputs, &[REPORT], cfg.seed, cfg.hash())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub target: TargetTraining,
    pub explainer: ExplainerTraining,
    pub evidence: Vec<EvidenceSubgraph>,
    pub report: RunReport,
}

/// Every stage after dataset creation, in order.
pub fn run_pipeline(data: &Path, cfg: &RunConfig, out: &Path) -> Result<PipelineRun> {
    let ds = Dataset::load(data)?;
    let target = train_target_stage(&ds, cfg, out)?;
    attribute_stage(&ds, cfg, out)?;
    let explainer = train_explainer_stage(&ds, cfg, out)?;
    let evidence = explain_stage(&ds, cfg, out)?;
    let report = evaluate_stage(&ds, cfg, out)?;
    Ok(PipelineRun {
        target,
        explainer,
        evidence,
        report,
    })
}
