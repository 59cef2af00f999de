//! Single-pass inference. Works on edge lists only, so the cost is linear in
//! the number of edges for fixed feature and hidden widths.

use crate::diffkernel::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::hetgraph::{CompSubgraph, Edge};

use super::{EncoderOutput, ExplainerConfig, ExplainerParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeptEdge {
    pub edge: Edge,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct EvidenceSubgraph {
    pub center: String,
    pub node_ids: Vec<String>,
    pub relations: Vec<String>,
    /// `Â` at every edge of the subgraph, in edge order.
    pub edge_scores: Vec<KeptEdge>,
    /// Top-K edges by weight, ties broken by `(src, dst, rel)`.
    pub kept_edges: Vec<KeptEdge>,
    pub layer_masks: Vec<Tensor>,
    /// `M*`, the mean layer mask.
    pub feature_mask: Tensor,
    /// `X ⊙ M*`
    pub masked_features: Tensor,
}

impl EvidenceSubgraph {
    /// Column means of `M*`.
    pub fn feature_importance(&self) -> Vec<f64> {
        column_means(&self.feature_mask)
    }

    /// `M*` at the center node.
    pub fn center_importance(&self) -> Vec<f64> {
        self.feature_mask.row(0).to_vec()
    }

    /// Feature indices sorted by importance, ties by index.
    pub fn top_features(&self, k: usize) -> Vec<usize> {
        let imp = self.feature_importance();
        let mut idx: Vec<usize> = (0..imp.len()).collect();
        idx.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
        idx.truncate(k.min(imp.len()));
        idx
    }

    /// Dense per-relation soft adjacency `A ⊙ Â`.
    pub fn soft_adjacency(&self) -> Vec<Tensor> {
        let n = self.node_ids.len();
        let mut out = vec![Tensor::zeros(n, n); self.relations.len()];
        for k in &self.edge_scores {
            out[k.edge.rel].set(k.edge.src, k.edge.dst, k.weight);
        }
        out
    }

    /// Adjacency with only the kept edges (`keep = true`) or only the
    /// dropped ones, using the original edge weights of `sub`.
    pub fn hard_adjacency(&self, sub: &CompSubgraph, keep: bool) -> Vec<Tensor> {
        let mut out = if keep {
            vec![Tensor::zeros(sub.num_nodes(), sub.num_nodes()); sub.num_relations()]
        } else {
            sub.adjacency().to_vec()
        };
        for k in &self.kept_edges {
            let e = k.edge;
            out[e.rel].set(e.src, e.dst, if keep { sub.weight(e) } else { 0.0 });
        }
        out
    }

    /// Features gated by `M* > 0.5` (`keep = true`) or by its complement.
    pub fn hard_features(&self, sub: &CompSubgraph, keep: bool) -> Tensor {
        let x = sub.features();
        let m = &self.feature_mask;
        let data = x
            .data()
            .iter()
            .zip(m.data())
            .map(|(&v, &w)| if (w > 0.5) == keep { v } else { 0.0 })
            .collect();
        Tensor::new(x.rows(), x.cols(), data).expect("finite")
    }
}

pub(crate) fn column_means(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    let n = t.rows().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Row-normalized `A + I` as adjacency lists: `(neighbour, weight)` per row.
fn sparse_normalized(sub: &CompSubgraph, rel: usize) -> Vec<Vec<(usize, f64)>> {
    let n = sub.num_nodes();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    for &e in sub.edges().iter().filter(|e| e.rel == rel) {
        let w = sub.weight(e);
        if e.src == e.dst {
            rows[e.src][0].1 += w;
        } else {
            rows[e.src].push((e.dst, w));
        }
    }
    for row in &mut rows {
        let s: f64 = row.iter().map(|p| p.1).sum();
        row.iter_mut().for_each(|p| p.1 /= s);
    }
    rows
}

fn spmm(a: &[Vec<(usize, f64)>], h: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(h.rows(), h.cols());
    let cols = h.cols();
    let data = out.data_mut();
    for (i, row) in a.iter().enumerate() {
        let dst = &mut data[i * cols..(i + 1) * cols];
        for &(j, w) in row {
            for (o, v) in dst.iter_mut().zip(h.row(j)) {
                *o += w * v;
            }
        }
    }
    out
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn relu(t: Tensor) -> Result<Tensor> {
    t.map(|v| v.max(0.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evidence subgraph for `sub` in one forward pass.
pub fn explain(params: &ExplainerParams, sub: &CompSubgraph, cfg: &ExplainerConfig) -> Result<EvidenceSubgraph> {
    if !params.is_trained() {
        return Err(Error::Untrained);
    }
    cfg.validate()?;
    if params.num_relations() != sub.num_relations() || params.feature_dim() != sub.feature_dim() {
        return Err(Error::Dimension(format!(
            "explainer built for {} relations and {} features, subgraph has {} and {}",
            params.num_relations(),
            params.feature_dim(),
            sub.num_relations(),
            sub.feature_dim()
        )));
    }
    let x = sub.features();
    let (d, h) = (params.feature_dim(), params.hidden_dim());
    let layer_masks = params
        .masks()
        .iter()
        .map(|m| x.matmul(m)?.map(sigmoid))
        .collect::<Result<Vec<_>>>()?;
    let gate_rows: Vec<f64> = (0..sub.num_nodes())
        .map(|i| layer_masks[1].row(i).iter().sum::<f64>() / d as f64)
        .collect();
    let masked_in = zip_with(x, &layer_masks[0], |a, b| a * b)?;

    let mut z_rel = Vec::with_capacity(sub.num_relations());
    for r in 0..sub.num_relations() {
        let a = sparse_normalized(sub, r);
        let h1 = relu(spmm(&a, &masked_in.matmul(&params.enc_in()[r])?))?;
        let gated = Tensor::from_fn(h1.rows(), h, |i, j| h1.get(i, j) * gate_rows[i])?;
        let zr = spmm(&a, &gated.matmul(&params.enc_hidden()[r])?);
        z_rel.push(match params.encoder_output() {
            EncoderOutput::Linear => zr,
            EncoderOutput::Relu => relu(zr)?,
        });
    }
    let mut z = z_rel[0].clone();
    for zr in &z_rel[1..] {
        z = zip_with(&z, zr, |a, b| a + b)?;
    }

    let rels = z_rel.len() as f64;
    let score = |i: usize, j: usize| -> f64 {
        z_rel
            .iter()
            .map(|zr| sigmoid(dot(zr.row(i), zr.row(j)) + dot(z.row(i), z.row(j))))
            .sum::<f64>()
            / rels
    };
    let edge_scores: Vec<KeptEdge> = sub
        .edges()
        .iter()
        .map(|&edge| KeptEdge {
            edge,
            weight: score(edge.src, edge.dst),
        })
        .collect();
    let mut kept_edges = edge_scores.clone();
    kept_edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.edge.cmp(&b.edge)));
    kept_edges.truncate(cfg.edge_budget);

    let m = layer_masks.len() as f64;
    let feature_mask = zip_with(&layer_masks[0], &layer_masks[1], |a, b| a / m + b / m)?;
    let masked_features = zip_with(x, &feature_mask, |a, b| a * b)?;
    Ok(EvidenceSubgraph {
        center: sub.center_id().to_string(),
        node_ids: sub.node_ids().to_vec(),
        relations: sub.relations().to_vec(),
        edge_scores,
        kept_edges,
        layer_masks,
        feature_mask,
        masked_features,
    })
}
