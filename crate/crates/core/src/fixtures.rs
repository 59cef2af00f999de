//! A seeded 5-node, 2-relation instance for gradient checks and smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::{build_attribution_subgraph, AttributionSubgraph, RemovalMode};
use crate::diffkernel::Tensor;
use crate::error::Result;
use crate::explainer::{gradient_check, ExplainerConfig, ExplainerParams};
use crate::hetgraph::{computation_subgraph, CompSubgraph, Edge, HetGraph, MetaPathPattern, NodeType};
use crate::target::{TargetCheckpoint, TargetConfig};

pub struct Instance {
    pub ckpt: TargetCheckpoint,
    pub sub: CompSubgraph,
    pub att: AttributionSubgraph,
}

/// Invest triangle c0→c1→c2→c0 plus a supply path c0→c3→c4→c1, centered
/// at c0 with label 1; the target is a seeded untrained checkpoint.
pub fn five_node() -> Result<Instance> {
    let nodes = (0..5).map(|i| (format!("c{i}"), NodeType::Company)).collect();
    let e = |src, dst, rel| Edge { src, dst, rel };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features = Tensor::from_fn(5, 3, |_, _| rng.gen_range(0.2..1.5))?;
    let g = HetGraph::new(
        nodes,
        vec!["invest".into(), "supply".into()],
        vec![e(0, 1, 0), e(1, 2, 0), e(2, 0, 0), e(0, 3, 1), e(3, 4, 1), e(4, 1, 1)],
        features,
        vec!["a".into(), "b".into(), "c".into()],
    )?;
    let ckpt = TargetCheckpoint::initialize(&TargetConfig { hidden_dim: 4, seed: 3, ..TargetConfig::default() }, 2, 3)?;
    let sub = computation_subgraph(&g, "c0", 2)?.with_label(Some(1));
    let pats = [
        MetaPathPattern::new(vec![NodeType::Company; 2], vec!["invest".into()])?,
        MetaPathPattern::new(vec![NodeType::Company; 2], vec!["supply".into()])?,
    ];
    let att = build_attribution_subgraph(&ckpt, &sub, &pats, 2, RemovalMode::PerInstance)?;
    Ok(Instance { ckpt, sub, att })
}

/// Largest relative error between analytic and central-difference gradients
/// of the total explainer loss on [`five_node`], over every explainer weight.
pub fn five_node_gradient_check(cfg: &ExplainerConfig, step: f64) -> Result<f64> {
    let inst = five_node()?;
    let params = ExplainerParams::initialize(cfg, inst.sub.num_relations(), inst.sub.feature_dim())?;
    gradient_check(&params, &inst.ckpt, &inst.sub, &inst.att, cfg, step)
}
