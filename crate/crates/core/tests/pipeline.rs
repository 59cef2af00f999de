use std::collections::BTreeSet;

use tempfile::TempDir;

use cf3_core::explainer::EvidenceSubgraph;
use cf3_core::hetgraph::Edge;
use cf3_core::pipeline::{explain_stage, run_pipeline, synth_stage, train_explainer_stage, Dataset, RunConfig};
use cf3_core::synthbench::{GroundTruth, SynthConfig};
use cf3_core::ErrorKind;

fn key(ev: &EvidenceSubgraph, e: Edge) -> (String, String, String) {
    (ev.node_ids[e.src].clone(), ev.node_ids[e.dst].clone(), ev.relations[e.rel].clone())
}

/// Keeping as many edges as were planted, the explainer finds a third of
/// them; neighbouring motifs' guarantee edges take most of the other slots.
#[test]
fn motif_sized_budget_beats_random_selection() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    synth_stage(&SynthConfig::default(), data.path()).unwrap();
    let truth = GroundTruth::load(&data.path().join("ground_truth.jsonl")).unwrap();
    let run = run_pipeline(data.path(), &RunConfig::default(), out.path()).unwrap();

    let (mut recall, mut chance) = (Vec::new(), Vec::new());
    for ev in &run.evidence {
        let Some(rec) = truth.get(&ev.center) else { continue };
        let planted: BTreeSet<_> = rec.evidence_edges.iter().cloned().collect();
        if planted.is_empty() || planted.len() >= ev.edge_scores.len() {
            continue;
        }
        let mut ranked = ev.edge_scores.clone();
        ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        let hit = ranked[..planted.len()].iter().filter(|k| planted.contains(&key(ev, k.edge))).count();
        recall.push(hit as f64 / planted.len() as f64);
        // a uniform K-subset contains each planted edge with probability K/|E|
        chance.push(planted.len() as f64 / ev.edge_scores.len() as f64);
    }
    assert!(recall.len() >= 10);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, c) = (mean(&recall), mean(&chance));
    assert!(r >= 0.3, "recall {r}");
    assert!(r >= 3.0 * c, "recall {r} vs chance {c}");
}

#[test]
fn stages_refuse_missing_upstream_artifacts() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    synth_stage(&SynthConfig { num_companies: 60, motif_count: 4, ..SynthConfig::default() }, data.path()).unwrap();
    let ds = Dataset::load(data.path()).unwrap();
    let cfg = RunConfig::default();
    let err = explain_stage(&ds, &cfg, out.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(err.to_string().contains("train-explainer"), "{err}");
    let err = train_explainer_stage(&ds, &cfg, out.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn unreachable_delta_floor_is_a_config_error() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    synth_stage(&SynthConfig { num_companies: 60, motif_count: 4, ..SynthConfig::default() }, data.path()).unwrap();
    let cfg = RunConfig {
        min_attribution_delta: 1e6,
        explainer: cf3_core::explainer::ExplainerConfig { epochs: 2, ..Default::default() },
        ..RunConfig::default()
    };
    let ds = Dataset::load(data.path()).unwrap();
    cf3_core::pipeline::train_target_stage(&ds, &cfg, out.path()).unwrap();
    cf3_core::pipeline::attribute_stage(&ds, &cfg, out.path()).unwrap();
    let err = train_explainer_stage(&ds, &cfg, out.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(err.to_string().contains("min_attribution_delta"), "{err}");
}
