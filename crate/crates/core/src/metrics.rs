//! Explanation quality: fidelity±, characterization score, GEF, RoR and
//! Fleiss' kappa, plus the evaluation driver that produces `report.json`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainer::{explain, EvidenceSubgraph, ExplainerConfig, ExplainerParams};
use crate::hetgraph::CompSubgraph;
use crate::target::{TargetCheckpoint, PROB_FLOOR};

/// Predictions for one explained instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub y: u8,
    /// Label predicted on the full computation subgraph.
    pub pred: u8,
    /// Label predicted on the evidence subgraph alone.
    pub pred_evidence: u8,
    /// Label predicted with the evidence removed.
    pub pred_complement: u8,
    pub prob_orig: [f64; 2],
    pub prob_evidence: [f64; 2],
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn mean_abs_change(records: &[EvalRecord], alt: impl Fn(&EvalRecord) -> u8) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Undefined("fidelity over zero instances"));
    }
    let total: f64 = records
        .iter()
        .map(|r| (indicator(r.pred == r.y) - indicator(alt(r) == r.y)).abs())
        .sum();
    Ok(total / records.len() as f64)
}

/// Share of instances whose correctness changes when the evidence is removed.
pub fn fidelity_plus(records: &[EvalRecord]) -> Result<f64> {
    mean_abs_change(records, |r| r.pred_complement)
}

/// Share of instances whose correctness changes when only the evidence is kept.
pub fn fidelity_minus(records: &[EvalRecord]) -> Result<f64> {
    mean_abs_change(records, |r| r.pred_evidence)
}

/// Weighted harmonic mean of `fid+` and `1 − fid−`.
pub fn charact(fid_plus: f64, fid_minus: f64, w_plus: f64, w_minus: f64) -> Result<f64> {
    if fid_plus <= 0.0 || fid_minus >= 1.0 {
        return Err(Error::Undefined("charact needs fid+ > 0 and fid- < 1"));
    }
    Ok((w_plus + w_minus) / (w_plus / fid_plus + w_minus / (1.0 - fid_minus)))
}

/// `1 − exp(−KL(y ‖ ŷ))` with natural logs.
pub fn gef(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::shape("gef", "distributions differ in length"));
    }
    for p in [y, y_hat] {
        if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Undefined("gef needs probability distributions"));
        }
    }
    let mut kl = 0.0;
    for (&p, &q) in y.iter().zip(y_hat) {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::Undefined("gef: explanation assigns zero mass where the model does not"));
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(1.0 - (-kl.max(0.0)).exp())
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub instance: String,
    pub expert: String,
    pub top_picks: Vec<String>,
}

/// Expert rankings and the algorithm's pick, per instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub experts: BTreeMap<String, Vec<(String, Vec<String>)>>,
    pub algorithm: BTreeMap<String, String>,
}

impl AnnotationSet {
    pub fn from_annotations(annotations: &[Annotation]) -> Result<Self> {
        let mut set = AnnotationSet::default();
        for a in annotations {
            if a.top_picks.is_empty() {
                return Err(Error::Config(format!("expert {} gave no picks for {}", a.expert, a.instance)));
            }
            set.experts
                .entry(a.instance.clone())
                .or_default()
                .push((a.expert.clone(), a.top_picks.clone()));
        }
        Ok(set)
    }
}

/// Share of instances whose algorithm pick appears among any expert's picks.
pub fn ror(set: &AnnotationSet) -> Result<f64> {
    if set.experts.is_empty() {
        return Err(Error::Undefined("RoR over zero instances"));
    }
    let mut hits = 0usize;
    for (inst, lists) in &set.experts {
        let pick = set
            .algorithm
            .get(inst)
            .ok_or_else(|| Error::MissingLabel(format!("algorithm pick for {inst}")))?;
        if lists.iter().any(|(_, picks)| picks.contains(pick)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.experts.len() as f64)
}

/// Fleiss' kappa over a subject × category count table.
pub fn fleiss_kappa(ratings: &[Vec<usize>], raters: usize) -> Result<f64> {
    if raters < 2 {
        return Err(Error::Config("kappa needs at least two raters".into()));
    }
    let Some(k) = ratings.first().map(Vec::len) else {
        return Err(Error::Undefined("kappa over zero subjects"));
    };
    if ratings.iter().any(|row| row.len() != k || row.iter().sum::<usize>() != raters) {
        return Err(Error::shape("fleiss_kappa", format!("every row must have {k} counts summing to {raters}")));
    }
    let n = raters as f64;
    let subjects = ratings.len() as f64;
    let p_bar = ratings
        .iter()
        .map(|row| row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n)
        .sum::<f64>()
        / (subjects * n * (n - 1.0));
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = ratings.iter().map(|row| row[j] as f64).sum::<f64>() / (subjects * n);
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        // a single category used by everyone
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Agreement table over `(instance, candidate)` subjects, with categories
/// "picked" / "not picked". Raters are each expert's first pick plus the
/// algorithm's pick.
pub fn agreement_table(set: &AnnotationSet) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut table = Vec::new();
    let mut raters = None;
    for (inst, lists) in &set.experts {
        let pick = set
            .algorithm
            .get(inst)
            .ok_or_else(|| Error::MissingLabel(format!("algorithm pick for {inst}")))?;
        let mut choices: Vec<&String> = lists.iter().map(|(_, p)| &p[0]).collect();
        choices.push(pick);
        match raters {
            None => raters = Some(choices.len()),
            Some(r) if r != choices.len() => {
                return Err(Error::Config(format!("instance {inst} has a different number of experts")));
            }
            _ => {}
        }
        let candidates: BTreeSet<&String> = choices.iter().copied().collect();
        for c in candidates {
            let yes = choices.iter().filter(|&&x| x == c).count();
            table.push(vec![yes, choices.len() - yes]);
        }
    }
    Ok((table, raters.unwrap_or(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub gef: f64,
    pub kept_edges: usize,
    pub top_risk_source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub fidelity_plus: f64,
    pub fidelity_minus: f64,
    /// `None` when `fid+ = 0` or `fid− = 1`.
    pub charact: Option<f64>,
    pub gef: f64,
    pub ror: Option<f64>,
    pub kappa: Option<f64>,
    pub num_instances: usize,
    pub instances: Vec<InstanceRow>,
}

fn label(p: [f64; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

fn floor_renorm(p: [f64; 2]) -> [f64; 2] {
    let q = [p[0].max(PROB_FLOOR), p[1].max(PROB_FLOOR)];
    let s = q[0] + q[1];
    [q[0] / s, q[1] / s]
}

/// The non-center node carrying the largest total kept-edge weight.
pub fn top_risk_source(ev: &EvidenceSubgraph) -> Option<String> {
    let mut mass = vec![0.0; ev.node_ids.len()];
    for k in &ev.kept_edges {
        mass[k.edge.src] += k.weight;
        mass[k.edge.dst] += k.weight;
    }
    (1..mass.len())
        .filter(|&i| mass[i] > 0.0)
        .max_by(|&a, &b| mass[a].total_cmp(&mass[b]).then(b.cmp(&a)))
        .map(|i| ev.node_ids[i].clone())
}

/// Scores precomputed evidence subgraphs with hard keep/drop semantics:
/// kept edges and features with `M* > 0.5` form the evidence, the rest the
/// complement.
pub fn evaluate_evidence(
    instances: &[CompSubgraph],
    ckpt: &TargetCheckpoint,
    evidence: &[EvidenceSubgraph],
    annotations: Option<&[Annotation]>,
) -> Result<Report> {
    if instances.len() != evidence.len() {
        return Err(Error::Config("one evidence subgraph per instance is required".into()));
    }
    if instances.is_empty() {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    let rows = instances
        .par_iter()
        .zip(evidence)
        .map(|(sub, ev)| {
            let y = sub.label().ok_or_else(|| Error::MissingLabel(sub.center_id().to_string()))?;
            if ev.center != sub.center_id() {
                return Err(Error::Referential {
                    id: ev.center.clone(),
                    context: format!("evidence paired with instance {}", sub.center_id()),
                });
            }
            let c = sub.center();
            let prob_orig = ckpt.predict_subgraph(sub)?;
            let prob_evidence = ckpt.predict(&ev.hard_adjacency(sub, true), &ev.hard_features(sub, true), c)?;
            let prob_rest = ckpt.predict(&ev.hard_adjacency(sub, false), &ev.hard_features(sub, false), c)?;
            Ok(InstanceRow {
                gef: gef(&prob_orig, &floor_renorm(prob_evidence))?,
                kept_edges: ev.kept_edges.len(),
                top_risk_source: top_risk_source(ev),
                record: EvalRecord {
                    id: sub.center_id().to_string(),
                    y,
                    pred: label(prob_orig),
                    pred_evidence: label(prob_evidence),
                    pred_complement: label(prob_rest),
                    prob_orig,
                    prob_evidence,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<EvalRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let fp = fidelity_plus(&records)?;
    let fm = fidelity_minus(&records)?;
    let (ror_v, kappa) = match annotations {
        Some(ann) => {
            let mut set = AnnotationSet::from_annotations(ann)?;
            let known: BTreeSet<&str> = rows.iter().map(|r| r.record.id.as_str()).collect();
            set.experts.retain(|k, _| known.contains(k.as_str()));
            for r in &rows {
                if let Some(p) = &r.top_risk_source {
                    set.algorithm.insert(r.record.id.clone(), p.clone());
                }
            }
            // instances without any kept edge have no pick to compare
            set.experts.retain(|k, _| set.algorithm.contains_key(k));
            if set.experts.is_empty() {
                (None, None)
            } else {
                let (table, raters) = agreement_table(&set)?;
                (Some(ror(&set)?), fleiss_kappa(&table, raters).ok())
            }
        }
        None => (None, None),
    };
    Ok(Report {
        fidelity_plus: fp,
        fidelity_minus: fm,
        charact: charact(fp, fm, 0.5, 0.5).ok(),
        gef: rows.iter().map(|r| r.gef).sum::<f64>() / rows.len() as f64,
        ror: ror_v,
        kappa,
        num_instances: rows.len(),
        instances: rows,
    })
}

/// Explains every instance and scores the result.
pub fn evaluate_explainer(
    instances: &[CompSubgraph],
    ckpt: &TargetCheckpoint,
    params: &ExplainerParams,
    cfg: &ExplainerConfig,
    annotations: Option<&[Annotation]>,
) -> Result<Report> {
    let evidence = instances
        .par_iter()
        .map(|sub| explain(params, sub, cfg))
        .collect::<Result<Vec<_>>>()?;
    evaluate_evidence(instances, ckpt, &evidence, annotations)
}
