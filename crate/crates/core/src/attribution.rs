//! Meta-path attribution: how much does the target model's loss rise when a
//! meta-path instance is cut out of the computation subgraph? Positive
//! contributions of the best patterns become per-edge targets (`A_att`) for
//! the explainer's generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::hetgraph::{enumerate_metapath_instances, remove_metapath, CompSubgraph, Edge, MetaPathInstance, MetaPathPattern};
use crate::target::{model_loss, TargetCheckpoint};

/// How instances of one pattern are intervened on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalMode {
    /// Each instance is removed on its own.
    #[default]
    PerInstance,
    /// All instances of a pattern are removed together; every instance of
    /// the pattern then carries the joint delta.
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub pattern: MetaPathPattern,
    pub instance: MetaPathInstance,
    /// Loss after removal minus loss before.
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct AttributionSubgraph {
    node_ids: Vec<String>,
    a_att: Vec<Tensor>,
    provenance: Vec<Contribution>,
    selected: Vec<MetaPathPattern>,
    warning: Option<String>,
}

impl AttributionSubgraph {
    fn empty(sub: &CompSubgraph, provenance: Vec<Contribution>, warning: &str) -> Self {
        let n = sub.num_nodes();
        AttributionSubgraph {
            node_ids: sub.node_ids().to_vec(),
            a_att: vec![Tensor::zeros(n, n); sub.num_relations()],
            provenance,
            selected: Vec::new(),
            warning: Some(warning.to_string()),
        }
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Per-relation edge targets in `[0, 1]`.
    pub fn a_att(&self) -> &[Tensor] {
        &self.a_att
    }

    /// `A_att` collapsed over relations by taking the maximum.
    pub fn collapsed(&self) -> Tensor {
        let n = self.node_ids.len();
        let mut out = Tensor::zeros(n, n);
        for a in &self.a_att {
            for i in 0..n {
                for j in 0..n {
                    if a.get(i, j) > out.get(i, j) {
                        out.set(i, j, a.get(i, j));
                    }
                }
            }
        }
        out
    }

    /// Every scored instance, in enumeration order.
    pub fn provenance(&self) -> &[Contribution] {
        &self.provenance
    }

    /// Patterns whose instances feed `A_att`, best first.
    pub fn selected_patterns(&self) -> &[MetaPathPattern] {
        &self.selected
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.a_att.iter().all(|a| a.data().iter().all(|&v| v == 0.0))
    }

    pub fn to_record(&self, sub: &CompSubgraph, patterns: &[MetaPathPattern]) -> AttributionRecord {
        let ids = sub.node_ids();
        let mut a_att = Vec::new();
        for e in sub.edges() {
            let w = self.a_att[e.rel].get(e.src, e.dst);
            if w > 0.0 {
                a_att.push(WeightedEdge {
                    src: ids[e.src].clone(),
                    dst: ids[e.dst].clone(),
                    rel: sub.relations()[e.rel].clone(),
                    weight: w,
                });
            }
        }
        AttributionRecord {
            center: sub.center_id().to_string(),
            patterns: patterns.to_vec(),
            selected: self.selected.iter().map(ToString::to_string).collect(),
            contributions: self
                .provenance
                .iter()
                .map(|c| ContributionRecord {
                    pattern: c.pattern.to_string(),
                    path: c.instance.node_ids.iter().map(|&i| ids[i].clone()).collect(),
                    delta: c.delta,
                })
                .collect(),
            a_att,
            warning: self.warning.clone(),
        }
    }

    /// Rebuilds `A_att` for `sub` from a stored record. Provenance is not
    /// restored.
    pub fn from_record(sub: &CompSubgraph, record: &AttributionRecord) -> Result<Self> {
        if record.center != sub.center_id() {
            return Err(Error::Referential {
                id: record.center.clone(),
                context: format!("attribution record used for center {}", sub.center_id()),
            });
        }
        let n = sub.num_nodes();
        let mut a_att = vec![Tensor::zeros(n, n); sub.num_relations()];
        for e in &record.a_att {
            let local = |id: &str| {
                sub.local_index(id).ok_or_else(|| Error::Referential {
                    id: id.to_string(),
                    context: format!("attribution edge outside subgraph of {}", sub.center_id()),
                })
            };
            let (s, d) = (local(&e.src)?, local(&e.dst)?);
            let r = sub.relations().iter().position(|x| *x == e.rel).ok_or_else(|| Error::Referential {
                id: e.rel.clone(),
                context: "attribution relation".into(),
            })?;
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::Dimension(format!("attribution weight {} outside [0,1]", e.weight)));
            }
            if sub.adjacency()[r].get(s, d) == 0.0 {
                return Err(Error::Dimension(format!("attribution edge {}->{} not in subgraph", e.src, e.dst)));
            }
            a_att[r].set(s, d, e.weight);
        }
        Ok(AttributionSubgraph {
            node_ids: sub.node_ids().to_vec(),
            a_att,
            provenance: Vec::new(),
            selected: Vec::new(),
            warning: record.warning.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub src: String,
    pub dst: String,
    pub rel: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub pattern: String,
    pub path: Vec<String>,
    pub delta: f64,
}

/// One entry of `attribution.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub center: String,
    pub patterns: Vec<MetaPathPattern>,
    #[serde(default)]
    pub selected: Vec<String>,
    pub contributions: Vec<ContributionRecord>,
    #[serde(rename = "A_att")]
    pub a_att: Vec<WeightedEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Loss increase caused by removing one instance.
pub fn metapath_contribution(
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    pattern: &MetaPathPattern,
    instance: &MetaPathInstance,
) -> Result<Contribution> {
    let base = model_loss(ckpt, sub)?;
    let delta = removal_delta(ckpt, sub, base, std::slice::from_ref(instance))?;
    Ok(Contribution {
        pattern: pattern.clone(),
        instance: instance.clone(),
        delta,
    })
}

fn removal_delta(ckpt: &TargetCheckpoint, sub: &CompSubgraph, base: f64, instances: &[MetaPathInstance]) -> Result<f64> {
    let cut = remove_metapath(sub, instances)?;
    let delta = model_loss(ckpt, &cut)? - base;
    if !delta.is_finite() {
        return Err(Error::Numeric { op: "metapath_contribution" });
    }
    Ok(delta)
}

/// Scores every instance of every pattern, keeps the `top_m` patterns by
/// mean positive delta and spreads their positive deltas onto edges.
pub fn build_attribution_subgraph(
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    patterns: &[MetaPathPattern],
    top_m: usize,
    mode: RemovalMode,
) -> Result<AttributionSubgraph> {
    if top_m == 0 {
        return Err(Error::Config("top_m must be >= 1".into()));
    }
    if patterns.is_empty() {
        return Err(Error::Config("at least one meta-path pattern is required".into()));
    }
    for p in patterns {
        p.validate()?;
    }
    let base = model_loss(ckpt, sub)?;

    let per_pattern: Vec<Vec<MetaPathInstance>> =
        patterns.iter().map(|p| enumerate_metapath_instances(sub, p)).collect();
    if per_pattern.iter().all(Vec::is_empty) {
        return Ok(AttributionSubgraph::empty(sub, Vec::new(), "no meta-path instance found"));
    }

    let deltas: Vec<Vec<f64>> = match mode {
        RemovalMode::PerInstance => per_pattern
            .iter()
            .map(|insts| {
                insts
                    .iter()
                    .map(|inst| removal_delta(ckpt, sub, base, std::slice::from_ref(inst)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?,
        RemovalMode::Joint => per_pattern
            .iter()
            .map(|insts| {
                if insts.is_empty() {
                    return Ok(Vec::new());
                }
                let d = removal_delta(ckpt, sub, base, insts)?;
                Ok(vec![d; insts.len()])
            })
            .collect::<Result<_>>()?,
    };

    let provenance: Vec<Contribution> = patterns
        .iter()
        .zip(&per_pattern)
        .zip(&deltas)
        .flat_map(|((p, insts), ds)| {
            insts.iter().zip(ds).map(move |(inst, &delta)| Contribution {
                pattern: p.clone(),
                instance: inst.clone(),
                delta,
            })
        })
        .collect();

    let mut ranked: Vec<(usize, f64)> = deltas
        .iter()
        .enumerate()
        .filter(|(_, ds)| !ds.is_empty())
        .map(|(k, ds)| (k, ds.iter().map(|d| d.max(0.0)).sum::<f64>() / ds.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_m);

    let mut sums: BTreeMap<Edge, f64> = BTreeMap::new();
    for &(k, _) in &ranked {
        for (inst, &d) in per_pattern[k].iter().zip(&deltas[k]) {
            let d = d.max(0.0);
            if d == 0.0 {
                continue;
            }
            for &e in &inst.edge_refs {
                *sums.entry(sub.edges()[e]).or_insert(0.0) += d;
            }
        }
    }
    let max = sums.values().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(AttributionSubgraph::empty(sub, provenance, "no meta-path instance has a positive contribution"));
    }
    let n = sub.num_nodes();
    let mut a_att = vec![Tensor::zeros(n, n); sub.num_relations()];
    for (e, s) in sums {
        // the max edge gets exactly 1
        a_att[e.rel].set(e.src, e.dst, if s == max { 1.0 } else { s / max });
    }
    Ok(AttributionSubgraph {
        node_ids: sub.node_ids().to_vec(),
        a_att,
        provenance,
        selected: ranked.iter().map(|&(k, _)| patterns[k].clone()).collect(),
        warning: None,
    })
}
