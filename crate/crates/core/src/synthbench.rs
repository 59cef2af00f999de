//! Synthetic company networks with planted risk motifs and known evidence.
//!
//! A preferential-attachment backbone of companies (invest/supply edges, a
//! few noise guarantees) plus persons managing companies. Motifs are small
//! guarantee structures planted on disjoint company sets; the first member of
//! each is a distressed source with high signal features, the others look
//! healthy on their own. Risk spreads along guarantees: a company is risky iff
//! it is distressed or guarantees with a distressed company. For an exposed
//! company the evidence is its motif (or the guarantee edges to its distressed
//! partners) plus the signal dims; a distressed company has no edge evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::explainer::EvidenceSubgraph;
use crate::hetgraph::{read_jsonl, write_file, write_labels, Edge, HetGraph, NodeType};
use crate::metrics::Annotation;

pub const RELATIONS: [&str; 4] = ["guarantee", "invest", "supply", "manager"];
const GUARANTEE: usize = 0;
const INVEST: usize = 1;
const SUPPLY: usize = 2;
const MANAGER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motif {
    /// Guarantee cycle a→b→c→a.
    RiskTriangle,
    /// Guarantee chain a→b→c.
    RiskChain,
}

impl Motif {
    fn size(self) -> usize {
        3
    }

    fn edges(self, nodes: &[usize]) -> Vec<(usize, usize)> {
        let (a, b, c) = (nodes[0], nodes[1], nodes[2]);
        match self {
            Motif::RiskTriangle => vec![(a, b), (b, c), (c, a)],
            Motif::RiskChain => vec![(a, b), (b, c)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_companies: usize,
    pub num_persons: usize,
    /// Number of relation types used, taken from the front of
    /// guarantee, invest, supply, manager.
    pub num_relations: usize,
    /// Edges each new company attaches with.
    pub attachment_degree: usize,
    pub motif: Motif,
    pub motif_count: usize,
    pub feature_dim: usize,
    pub signal_dims: Vec<usize>,
    /// Upper bound of the uniform noise on non-signal dims.
    pub noise_scale: f64,
    /// Mean signal above which a company counts as distressed.
    pub signal_threshold: f64,
    /// Share of non-motif companies distressed on their own.
    pub lone_distress_fraction: f64,
    /// Chance that a motif's source is left undistressed, making the motif inert.
    pub inert_motif_rate: f64,
    /// Share of backbone edges typed as guarantees.
    pub noise_guarantee_rate: f64,
    pub experts: usize,
    /// Chance an expert's first pick is a random neighbour.
    pub expert_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_companies: 200,
            num_persons: 40,
            num_relations: 4,
            attachment_degree: 2,
            motif: Motif::RiskTriangle,
            motif_count: 10,
            feature_dim: 32,
            signal_dims: (0..8).collect(),
            noise_scale: 0.15,
            signal_threshold: 0.5,
            lone_distress_fraction: 0.0,
            inert_motif_rate: 0.0,
            noise_guarantee_rate: 0.1,
            experts: 3,
            expert_noise: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_companies == 0 || self.attachment_degree == 0 {
            return Err(Error::Config("num_companies and attachment_degree must be >= 1".into()));
        }
        if !(1..=RELATIONS.len()).contains(&self.num_relations) {
            return Err(Error::Config(format!("num_relations must be in 1..={}", RELATIONS.len())));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        if self.signal_dims.is_empty() || self.signal_dims.iter().any(|&d| d >= self.feature_dim) {
            return Err(Error::Config("signal_dims must be non-empty and below feature_dim".into()));
        }
        if self.signal_dims.iter().collect::<BTreeSet<_>>().len() != self.signal_dims.len() {
            return Err(Error::Config("signal_dims contains duplicates".into()));
        }
        if self.motif_count * self.motif.size() > self.num_companies {
            return Err(Error::Config(format!(
                "{} motifs need {} companies, only {} available",
                self.motif_count,
                self.motif_count * self.motif.size(),
                self.num_companies
            )));
        }
        for (name, v) in [
            ("lone_distress_fraction", self.lone_distress_fraction),
            ("inert_motif_rate", self.inert_motif_rate),
            ("noise_guarantee_rate", self.noise_guarantee_rate),
            ("expert_noise", self.expert_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }

    fn relation_or(&self, want: usize, fallback: usize) -> usize {
        if want < self.num_relations {
            want
        } else {
            fallback.min(self.num_relations - 1)
        }
    }
}

/// Evidence of one risky node: one line of `ground_truth.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub evidence_edges: Vec<(String, String, String)>,
    pub evidence_dims: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub records: BTreeMap<String, TruthRecord>,
}

impl GroundTruth {
    pub fn get(&self, id: &str) -> Option<&TruthRecord> {
        self.records.get(id)
    }

    /// Distinct evidence edges over all records.
    pub fn all_edges(&self) -> BTreeSet<(String, String, String)> {
        self.records.values().flat_map(|r| r.evidence_edges.iter().cloned()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs: Vec<TruthRecord> = read_jsonl(path)?;
        Ok(GroundTruth {
            records: recs.into_iter().map(|r| (r.id.clone(), r)).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub graph: HetGraph,
    /// Every company, in node order.
    pub labels: Vec<(usize, u8)>,
    pub truth: GroundTruth,
    pub annotations: Vec<Annotation>,
}

impl SynthData {
    /// Writes nodes/edges/features, labels, ground truth and annotations.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.graph.write(dir)?;
        write_labels(&self.graph, &self.labels, &dir.join("labels.jsonl"))?;
        self.truth.write(&dir.join("ground_truth.jsonl"))?;
        let mut out = String::new();
        for a in &self.annotations {
            out.push_str(&serde_json::to_string(a).expect("serializable"));
            out.push('\n');
        }
        write_file(&dir.join("annotations.jsonl"), &out)
    }
}

/// Degree-proportional sampling of `k` distinct targets among `0..n`.
fn attach(rng: &mut ChaCha8Rng, pool: &[usize], n: usize, k: usize) -> Vec<usize> {
    let mut picked = BTreeSet::new();
    let k = k.min(n);
    while picked.len() < k {
        let v = if pool.is_empty() || rng.gen_bool(0.1) {
            rng.gen_range(0..n)
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        picked.insert(v);
    }
    picked.into_iter().collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nc = cfg.num_companies;
    let n = nc + cfg.num_persons;
    let mut nodes: Vec<(String, NodeType)> = (0..nc).map(|i| (format!("c{i:03}"), NodeType::Company)).collect();
    nodes.extend((0..cfg.num_persons).map(|i| (format!("p{i:03}"), NodeType::Person)));

    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    let mut pool: Vec<usize> = Vec::new();
    let invest = cfg.relation_or(INVEST, 0);
    let supply = cfg.relation_or(SUPPLY, invest);
    for v in 1..nc {
        for u in attach(&mut rng, &pool, v, cfg.attachment_degree) {
            let rel = if rng.gen_bool(cfg.noise_guarantee_rate) {
                GUARANTEE
            } else if rng.gen_bool(0.5) {
                invest
            } else {
                supply
            };
            let (s, d) = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
            edges.insert(Edge { src: s, dst: d, rel });
            pool.extend([u, v]);
        }
    }
    let manager = cfg.relation_or(MANAGER, invest);
    for p in nc..n {
        let k = rng.gen_range(1..=2);
        for c in attach(&mut rng, &pool, nc, k) {
            edges.insert(Edge { src: p, dst: c, rel: manager });
        }
    }

    // motifs on disjoint company sets
    let mut companies: Vec<usize> = (0..nc).collect();
    companies.shuffle(&mut rng);
    let motifs: Vec<Vec<usize>> = companies
        .chunks(cfg.motif.size())
        .take(cfg.motif_count)
        .map(|c| c.to_vec())
        .collect();
    let mut motif_of = vec![None; n];
    for (k, m) in motifs.iter().enumerate() {
        for &v in m {
            motif_of[v] = Some(k);
        }
        for (s, d) in cfg.motif.edges(m) {
            edges.insert(Edge { src: s, dst: d, rel: GUARANTEE });
        }
    }

    // features: noise everywhere, signal high for distressed companies
    let mut distressed = vec![false; n];
    for m in &motifs {
        distressed[m[0]] = !rng.gen_bool(cfg.inert_motif_rate);
    }
    for v in 0..nc {
        if motif_of[v].is_none() {
            distressed[v] = rng.gen_bool(cfg.lone_distress_fraction);
        }
    }
    let signal: BTreeSet<usize> = cfg.signal_dims.iter().copied().collect();
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    for &high in &distressed {
        for j in 0..cfg.feature_dim {
            data.push(if !signal.contains(&j) {
                rng.gen_range(0.0..cfg.noise_scale)
            } else if high {
                rng.gen_range(0.7..1.3)
            } else {
                rng.gen_range(0.0..0.3)
            });
        }
    }
    let features = Tensor::new(n, cfg.feature_dim, data)?;
    let feature_names = (0..cfg.feature_dim)
        .map(|j| if signal.contains(&j) { format!("signal_{j}") } else { format!("noise_{j}") })
        .collect();

    let relations: Vec<String> = RELATIONS[..cfg.num_relations].iter().map(|s| s.to_string()).collect();
    // ordered by relation so a reload indexes relations the same way
    let mut edge_list: Vec<Edge> = edges.into_iter().collect();
    edge_list.sort_by_key(|e| (e.rel, e.src, e.dst));
    let graph = HetGraph::new(nodes, relations, edge_list, features, feature_names)?;

    let mean_signal = |v: usize| {
        cfg.signal_dims.iter().map(|&j| graph.features().get(v, j)).sum::<f64>() / cfg.signal_dims.len() as f64
    };
    let is_distressed: Vec<bool> = (0..n).map(|v| v < nc && mean_signal(v) > cfg.signal_threshold).collect();
    // guarantee edges from each company to distressed partners
    let mut exposure: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); n];
    for e in graph.edges().iter().filter(|e| e.rel == GUARANTEE) {
        if is_distressed[e.dst] {
            exposure[e.src].insert((e.src, e.dst));
        }
        if is_distressed[e.src] {
            exposure[e.dst].insert((e.src, e.dst));
        }
    }
    let labels: Vec<(usize, u8)> =
        (0..nc).map(|v| (v, u8::from(is_distressed[v] || !exposure[v].is_empty()))).collect();

    let rel_name = &graph.relations()[GUARANTEE];
    let mut truth = GroundTruth::default();
    let mut evidence_of = vec![BTreeSet::new(); n];
    for &(v, y) in &labels {
        if y == 0 {
            continue;
        }
        let mut ev = BTreeSet::new();
        if !is_distressed[v] {
            ev.extend(exposure[v].iter().copied());
            if let Some(k) = motif_of[v] {
                if exposure[v].iter().any(|&(s, d)| motif_of[s] == Some(k) && motif_of[d] == Some(k)) {
                    ev.extend(cfg.motif.edges(&motifs[k]));
                }
            }
        }
        let id = graph.id(v).to_string();
        truth.records.insert(
            id.clone(),
            TruthRecord {
                id,
                evidence_edges: ev
                    .iter()
                    .map(|&(s, d)| (graph.id(s).to_string(), graph.id(d).to_string(), rel_name.clone()))
                    .collect(),
                evidence_dims: cfg.signal_dims.clone(),
            },
        );
        evidence_of[v] = ev;
    }

    // experts rank the other endpoints of the evidence, most distressed first
    let neighbors = graph.undirected_neighbors();
    let mut annotations = Vec::new();
    for v in 0..nc {
        let partners: BTreeSet<usize> = evidence_of[v].iter().flat_map(|&(s, d)| [s, d]).filter(|&u| u != v).collect();
        if partners.is_empty() {
            continue;
        }
        let mut ranked: Vec<usize> = partners.into_iter().collect();
        ranked.sort_by(|&a, &b| mean_signal(b).total_cmp(&mean_signal(a)).then(a.cmp(&b)));
        for e in 0..cfg.experts {
            let mut picks = ranked.clone();
            if rng.gen_bool(cfg.expert_noise) && !neighbors[v].is_empty() {
                let other = neighbors[v][rng.gen_range(0..neighbors[v].len())];
                picks.retain(|&u| u != other);
                picks.insert(0, other);
            }
            annotations.push(Annotation {
                instance: graph.id(v).to_string(),
                expert: format!("expert{}", e + 1),
                top_picks: picks.iter().map(|&u| graph.id(u).to_string()).collect(),
            });
        }
    }
    Ok(SynthData {
        graph,
        labels,
        truth,
        annotations,
    })
}

/// ROC AUC of `scores` against binary `truth`, with tied scores sharing
/// their average rank.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if scores.len() != truth.len() || pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs at least one positive and one negative"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// AUC of the evidence's soft edge scores over the subgraph's edges.
pub fn explanation_edge_auc(evidence: &EvidenceSubgraph, truth: &TruthRecord) -> Result<f64> {
    let wanted: BTreeSet<(&str, &str, &str)> = truth
        .evidence_edges
        .iter()
        .map(|(s, d, r)| (s.as_str(), d.as_str(), r.as_str()))
        .collect();
    if wanted.is_empty() {
        return Err(Error::Undefined("AUC against an empty ground truth"));
    }
    let mut scores = Vec::with_capacity(evidence.edge_scores.len());
    let mut member = Vec::with_capacity(evidence.edge_scores.len());
    for k in &evidence.edge_scores {
        let e = k.edge;
        let key = (
            evidence.node_ids[e.src].as_str(),
            evidence.node_ids[e.dst].as_str(),
            evidence.relations[e.rel].as_str(),
        );
        scores.push(k.weight);
        member.push(wanted.contains(&key));
    }
    roc_auc(&scores, &member)
}

/// Share of the `k` most important feature dimensions that are true signal
/// dimensions. `k` larger than the feature width is clamped to it.
pub fn feature_precision_at_k(evidence: &EvidenceSubgraph, truth: &TruthRecord, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let top = evidence.top_features(k);
    let dims: BTreeSet<usize> = truth.evidence_dims.iter().copied().collect();
    Ok(top.iter().filter(|d| dims.contains(d)).count() as f64 / top.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::KeptEdge;
    use crate::hetgraph::{computation_subgraph, load_graph, load_labels};
    use tempfile::TempDir;

    #[test]
    fn fixture_counts() {
        let data = generate(&SynthConfig::default()).unwrap();
        let g = &data.graph;
        assert_eq!(g.num_nodes(), 240);
        assert_eq!(g.relations(), &RELATIONS.map(String::from));
        assert_eq!(g.feature_dim(), 32);
        // truth edges are real guarantee edges
        for (s, d, r) in data.truth.all_edges() {
            assert_eq!(r, "guarantee");
            let e = Edge { src: g.index_of(&s).unwrap(), dst: g.index_of(&d).unwrap(), rel: 0 };
            assert!(g.edges().contains(&e));
        }
        // 10 sources without edge evidence, two exposed members per triangle
        let (sources, exposed): (Vec<_>, Vec<_>) = data.truth.records.values().partition(|r| r.evidence_edges.is_empty());
        assert_eq!(sources.len(), 10);
        assert!(exposed.len() >= 20, "{}", exposed.len());
        let risky = data.labels.iter().filter(|l| l.1 == 1).count();
        assert_eq!(risky, data.truth.records.len());
        assert_eq!(data.annotations.len(), 3 * exposed.len());
    }

    #[test]
    fn labels_follow_the_rule() {
        let cfg = SynthConfig { lone_distress_fraction: 0.05, inert_motif_rate: 0.3, ..SynthConfig::default() };
        let data = generate(&cfg).unwrap();
        let g = &data.graph;
        let distressed = |v: usize| {
            g.node_type(v) == NodeType::Company
                && cfg.signal_dims.iter().map(|&j| g.features().get(v, j)).sum::<f64>() / 8.0 > 0.5
        };
        let motif_edges: BTreeSet<(usize, usize)> = g
            .edges()
            .iter()
            .filter(|e| e.rel == 0)
            .map(|e| (e.src, e.dst))
            .collect();
        let (mut lone, mut inert) = (0, 0);
        for &(v, y) in &data.labels {
            let partners: Vec<usize> = motif_edges
                .iter()
                .filter_map(|&(s, d)| if s == v { Some(d) } else if d == v { Some(s) } else { None })
                .collect();
            let exposed = partners.iter().any(|&u| distressed(u));
            assert_eq!(y == 1, distressed(v) || exposed, "{}", g.id(v));
            if distressed(v) && partners.is_empty() {
                lone += 1;
            }
            if !distressed(v) && partners.len() >= 2 && !exposed {
                inert += 1;
            }
            if y == 1 {
                let rec = data.truth.get(g.id(v)).unwrap();
                if distressed(v) {
                    assert!(rec.evidence_edges.is_empty());
                } else {
                    // an exposed company touches its evidence
                    assert!(rec.evidence_edges.iter().any(|(s, d, _)| s == g.id(v) || d == g.id(v)));
                }
            }
        }
        assert!(lone > 0 && inert > 0, "{lone} {inert}");
    }

    #[test]
    fn deterministic_and_zero_motifs() {
        let cfg = SynthConfig { num_companies: 60, num_persons: 10, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.graph.features(), b.graph.features());
        assert_eq!(a.annotations, b.annotations);
        let none = generate(&SynthConfig { motif_count: 0, ..cfg.clone() }).unwrap();
        assert!(none.labels.iter().all(|l| l.1 == 0));
        assert!(none.truth.records.is_empty());
        assert!(generate(&SynthConfig { motif_count: 21, ..cfg.clone() }).is_err());
        let chain = generate(&SynthConfig { motif: Motif::RiskChain, ..cfg }).unwrap();
        // a chain a→b→c with source a exposes b directly; c only if b is distressed
        let exposed: Vec<_> = chain.truth.records.values().filter(|r| !r.evidence_edges.is_empty()).collect();
        assert!(!exposed.is_empty());
        assert!(exposed.iter().all(|r| !r.evidence_edges.is_empty()));
    }

    #[test]
    fn files_round_trip() {
        let cfg = SynthConfig { num_companies: 40, num_persons: 5, motif_count: 3, ..SynthConfig::default() };
        let data = generate(&cfg).unwrap();
        let dir = TempDir::new().unwrap();
        data.write(dir.path()).unwrap();
        let p = |f: &str| dir.path().join(f);
        let g = load_graph(&p("nodes.jsonl"), &p("edges.jsonl"), &p("features.csv")).unwrap();
        assert_eq!(g.relations(), data.graph.relations());
        assert_eq!(g.edges(), data.graph.edges());
        assert_eq!(g.features(), data.graph.features());
        assert_eq!(load_labels(&g, &p("labels.jsonl")).unwrap(), data.labels);
        assert_eq!(GroundTruth::load(&p("ground_truth.jsonl")).unwrap(), data.truth);
        let line = std::fs::read_to_string(p("ground_truth.jsonl")).unwrap();
        assert!(line.starts_with("{\"id\":") && line.contains("\"evidence_edges\":[[\""));
    }

    fn evidence_for(sub: &crate::hetgraph::CompSubgraph, score: impl Fn(Edge) -> f64, importance: &[f64]) -> EvidenceSubgraph {
        let scores: Vec<KeptEdge> = sub.edges().iter().map(|&edge| KeptEdge { edge, weight: score(edge) }).collect();
        let m = Tensor::from_fn(sub.num_nodes(), importance.len(), |_, j| importance[j]).unwrap();
        EvidenceSubgraph {
            center: sub.center_id().into(),
            node_ids: sub.node_ids().to_vec(),
            relations: sub.relations().to_vec(),
            kept_edges: scores.clone(),
            edge_scores: scores,
            layer_masks: vec![m.clone(), m.clone()],
            feature_mask: m,
            masked_features: sub.features().clone(),
        }
    }

    #[test]
    fn auc_and_precision_oracles() {
        let data = generate(&SynthConfig::default()).unwrap();
        let (id, rec) = data.truth.records.iter().next().unwrap();
        let sub = computation_subgraph(&data.graph, id, 2).unwrap();
        let is_truth = |e: Edge| {
            rec.evidence_edges.contains(&(sub.node_ids()[e.src].clone(), sub.node_ids()[e.dst].clone(), sub.relations()[e.rel].clone()))
        };
        let uniform = vec![0.5; 32];
        let oracle = evidence_for(&sub, |e| if is_truth(e) { 0.9 } else { 0.1 }, &uniform);
        assert_eq!(explanation_edge_auc(&oracle, rec).unwrap(), 1.0);
        let flat = evidence_for(&sub, |_| 0.5, &uniform);
        assert_eq!(explanation_edge_auc(&flat, rec).unwrap(), 0.5);

        let perfect: Vec<f64> = (0..32).map(|j| if j < 8 { 0.9 } else { 0.1 }).collect();
        let ev = evidence_for(&sub, |_| 0.5, &perfect);
        assert_eq!(feature_precision_at_k(&ev, rec, 8).unwrap(), 1.0);
        assert_eq!(feature_precision_at_k(&ev, rec, 100).unwrap(), 0.25);
        assert!(feature_precision_at_k(&ev, rec, 0).is_err());
        let empty = TruthRecord { evidence_edges: vec![], ..rec.clone() };
        assert!(explanation_edge_auc(&ev, &empty).is_err());
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..100 {
            let truth: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.2)).collect();
            let scores: Vec<f64> = (0..2000).map(|_| rng.gen::<f64>()).collect();
            let auc = roc_auc(&scores, &truth).unwrap();
            assert!((auc - 0.5).abs() < 0.1, "{auc}");
            total += auc;
        }
        assert!((total / 100.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn random_masks_give_signal_share() {
        // expected precision of a uniformly random ranking is |signal| / d
        let data = generate(&SynthConfig::default()).unwrap();
        let (id, rec) = data.truth.records.iter().next().unwrap();
        let sub = computation_subgraph(&data.graph, id, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let imp: Vec<f64> = (0..32).map(|_| rng.gen::<f64>()).collect();
            total += feature_precision_at_k(&evidence_for(&sub, |_| 0.5, &imp), rec, 8).unwrap();
        }
        assert!((total / trials as f64 - 0.25).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let scores = [0.1, 0.4, 0.4, 0.8, 0.3, 0.4];
        let truth = [false, true, false, true, false, true];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if truth[i] && !truth[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((roc_auc(&scores, &truth).unwrap() - wins / pairs).abs() < 1e-15);
    }
}
