use crate::attribution::AttributionSubgraph;
use crate::diffkernel::{Bindings, Expression, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::hetgraph::CompSubgraph;
use crate::target::{build_logits, one_hot_row, TargetCheckpoint};
#[cfg(test)]
use crate::target::{cross_entropy, softmax2};

use super::{EncoderOutput, ExplainerConfig, ExplainerParams, ParamNodes, NUM_LAYERS};

/// `rownorm(A + I)`.
pub(crate) fn normalized_adjacency(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        out.set(i, i, a.get(i, i) + 1.0);
        let s: f64 = out.row(i).iter().sum();
        for j in 0..n {
            out.set(i, j, out.get(i, j) / s);
        }
    }
    out
}

pub(crate) fn mask_node(expr: &mut Expression, x: NodeId, m: NodeId) -> Result<NodeId> {
    let xm = expr.matmul(x, m)?;
    expr.sigmoid(xm)
}

pub(crate) fn encode_node(
    expr: &mut Expression,
    a_norm: NodeId,
    x: NodeId,
    xm0: NodeId,
    xm1: NodeId,
    w0: NodeId,
    w1: NodeId,
    output: EncoderOutput,
) -> Result<NodeId> {
    let (d, h) = expr.shape(w0);
    let masked = expr.hadamard(x, xm0)?;
    let t = expr.matmul(masked, w0)?;
    let t = expr.matmul(a_norm, t)?;
    let h1 = expr.relu(t)?;
    // per-node mean of the layer-1 mask, repeated across the hidden width
    let spread = expr.constant(Tensor::filled(d, h, 1.0 / d as f64));
    let gate = expr.matmul(xm1, spread)?;
    let gated = expr.hadamard(h1, gate)?;
    let t = expr.matmul(gated, w1)?;
    let t = expr.matmul(a_norm, t)?;
    match output {
        EncoderOutput::Linear => Ok(t),
        EncoderOutput::Relu => expr.relu(t),
    }
}

pub(crate) fn decode_node(expr: &mut Expression, z_r: NodeId, z: NodeId) -> Result<NodeId> {
    let zc = expr.concat_cols(z_r, z)?;
    let zt = expr.transpose(zc)?;
    let g = expr.matmul(zc, zt)?;
    // average with the transpose so the output is symmetric bit for bit
    let gt = expr.transpose(g)?;
    let sym = expr.weighted_sum(&[(0.5, g), (0.5, gt)])?;
    expr.sigmoid(sym)
}

fn mean_node(expr: &mut Expression, terms: &[NodeId]) -> Result<NodeId> {
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(f64, NodeId)> = terms.iter().map(|&t| (w, t)).collect();
    expr.weighted_sum(&weighted)
}

/// Constant inputs for one subgraph.
pub(crate) struct InstanceNodes {
    pub x: NodeId,
    pub adjacency: Vec<NodeId>,
    pub normalized: Vec<NodeId>,
    pub selector: NodeId,
}

pub(crate) fn instance_nodes(expr: &mut Expression, sub: &CompSubgraph) -> InstanceNodes {
    InstanceNodes {
        x: expr.constant(sub.features().clone()),
        adjacency: sub.adjacency().iter().map(|a| expr.constant(a.clone())).collect(),
        normalized: sub.adjacency().iter().map(|a| expr.constant(normalized_adjacency(a))).collect(),
        selector: expr.constant(one_hot_row(sub.num_nodes(), sub.center())),
    }
}

pub(crate) struct GeneratorNodes {
    pub layer_masks: Vec<NodeId>,
    pub z_rel: Vec<NodeId>,
    pub z: NodeId,
    pub a_rel: Vec<NodeId>,
    pub a_hat: NodeId,
    pub m_star: NodeId,
    pub x_hat: NodeId,
}

pub(crate) fn generator_nodes(expr: &mut Expression, p: &ParamNodes, inst: &InstanceNodes) -> Result<GeneratorNodes> {
    let layer_masks = p.masks.iter().map(|&m| mask_node(expr, inst.x, m)).collect::<Result<Vec<_>>>()?;
    let z_rel = inst
        .normalized
        .iter()
        .zip(p.enc_in.iter().zip(&p.enc_hidden))
        .map(|(&a, (&w0, &w1))| encode_node(expr, a, inst.x, layer_masks[0], layer_masks[1], w0, w1, p.encoder_output))
        .collect::<Result<Vec<_>>>()?;
    let z = expr.sum_all(&z_rel)?;
    let a_rel = z_rel.iter().map(|&zr| decode_node(expr, zr, z)).collect::<Result<Vec<_>>>()?;
    let a_hat = mean_node(expr, &a_rel)?;
    let m_star = mean_node(expr, &layer_masks)?;
    let x_hat = expr.hadamard(inst.x, m_star)?;
    Ok(GeneratorNodes {
        layer_masks,
        z_rel,
        z,
        a_rel,
        a_hat,
        m_star,
        x_hat,
    })
}

/// Logits of the four target queries, in the order factual, adjacency-only,
/// features-only, counterfactual.
pub(crate) fn query_logits(
    expr: &mut Expression,
    ckpt: &TargetCheckpoint,
    inst: &InstanceNodes,
    a_hat: NodeId,
    x_hat: NodeId,
    m_star: NodeId,
) -> Result<[NodeId; 4]> {
    let w = ckpt.constants(expr);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let keep_not = expr.one_minus(a_hat)?;
    for &a in &inst.adjacency {
        kept.push(expr.hadamard(a, a_hat)?);
        dropped.push(expr.hadamard(a, keep_not)?);
    }
    let m_not = expr.one_minus(m_star)?;
    let x_rest = expr.hadamard(inst.x, m_not)?;
    Ok([
        build_logits(expr, &w, &kept, x_hat, inst.selector)?,
        build_logits(expr, &w, &kept, inst.x, inst.selector)?,
        build_logits(expr, &w, &inst.adjacency, x_hat, inst.selector)?,
        build_logits(expr, &w, &dropped, x_rest, inst.selector)?,
    ])
}

pub(crate) struct LossNodes {
    pub terms: [NodeId; 4],
    pub recon: NodeId,
    pub total: NodeId,
}

/// Per-instance objective without the weight penalty.
pub(crate) fn loss_nodes(
    expr: &mut Expression,
    logits: [NodeId; 4],
    y: u8,
    a_hat: NodeId,
    support: &Tensor,
    a_att: &Tensor,
    cfg: &ExplainerConfig,
) -> Result<LossNodes> {
    let onehot = |expr: &mut Expression, c: u8| {
        let mut t = Tensor::zeros(1, 2);
        t.set(0, c as usize, 1.0);
        expr.constant(t)
    };
    let yt = onehot(expr, y);
    let flipped = onehot(expr, 1 - y);
    let mut terms = [logits[0]; 4];
    for k in 0..3 {
        terms[k] = expr.softmax_cross_entropy(logits[k], yt)?;
    }
    terms[3] = expr.softmax_cross_entropy(logits[3], flipped)?;

    let n = support.rows();
    let count = support.sum();
    let recon = if count > 0.0 {
        let s = expr.constant(support.clone());
        let on_support = expr.hadamard(a_hat, s)?;
        let target = expr.constant(a_att.clone());
        let mse = expr.mse(on_support, target)?;
        expr.scale(mse, (n * n) as f64 / count)?
    } else {
        expr.constant(Tensor::zeros(1, 1))
    };
    let total = expr.weighted_sum(&[
        (cfg.alpha, terms[0]),
        (cfg.alpha, terms[1]),
        (cfg.alpha, terms[2]),
        (cfg.beta, recon),
        (cfg.gamma, terms[3]),
    ])?;
    Ok(LossNodes { terms, recon, total })
}

/// Label the explainer trains towards: the subgraph's label if known,
/// otherwise the target's own prediction.
pub(crate) fn training_label(ckpt: &TargetCheckpoint, sub: &CompSubgraph) -> Result<u8> {
    match sub.label() {
        Some(y) => Ok(y),
        None => {
            let p = ckpt.predict_subgraph(sub)?;
            Ok(u8::from(p[1] > p[0]))
        }
    }
}

fn check_attribution(sub: &CompSubgraph, att: &AttributionSubgraph) -> Result<Tensor> {
    let a = att.collapsed();
    if a.rows() != sub.num_nodes() {
        return Err(Error::shape(
            "attribution",
            format!("attribution has {} nodes, subgraph has {}", a.rows(), sub.num_nodes()),
        ));
    }
    Ok(a)
}

/// One instance's objective as an expression over the explainer's leaves.
pub(crate) struct InstanceGraph {
    pub expr: Expression,
    pub loss: LossNodes,
    #[allow(dead_code)] // inspected by tests
    pub logits: [NodeId; 4],
}

pub(crate) fn instance_graph(
    params: &ExplainerParams,
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    att: &AttributionSubgraph,
    cfg: &ExplainerConfig,
) -> Result<InstanceGraph> {
    check_dims(params, ckpt, sub)?;
    let a_att = check_attribution(sub, att)?;
    let y = training_label(ckpt, sub)?;
    let mut expr = Expression::new();
    let p = params.leaves(&mut expr)?;
    let inst = instance_nodes(&mut expr, sub);
    let generator = generator_nodes(&mut expr, &p, &inst)?;
    let logits = query_logits(&mut expr, ckpt, &inst, generator.a_hat, generator.x_hat, generator.m_star)?;
    let loss = loss_nodes(&mut expr, logits, y, generator.a_hat, &sub.support(), &a_att, cfg)?;
    Ok(InstanceGraph { expr, loss, logits })
}

pub(crate) fn check_dims(params: &ExplainerParams, ckpt: &TargetCheckpoint, sub: &CompSubgraph) -> Result<()> {
    if params.num_relations() != sub.num_relations() || params.feature_dim() != sub.feature_dim() {
        return Err(Error::Dimension(format!(
            "explainer built for {} relations and {} features, subgraph has {} and {}",
            params.num_relations(),
            params.feature_dim(),
            sub.num_relations(),
            sub.feature_dim()
        )));
    }
    if ckpt.num_relations() != sub.num_relations() || ckpt.feature_dim() != sub.feature_dim() {
        return Err(Error::Dimension("target model does not match the subgraph".into()));
    }
    Ok(())
}

fn eval_one(build: impl FnOnce(&mut Expression) -> Result<NodeId>) -> Result<Tensor> {
    let mut expr = Expression::new();
    let root = build(&mut expr)?;
    expr.evaluate(root, &Bindings::new())
}

/// `sigmoid(X · M)`: an n×d mask in (0, 1).
pub fn layer_feature_mask(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    eval_one(|e| {
        let (x, m) = (e.constant(x.clone()), e.constant(m.clone()));
        mask_node(e, x, m)
    })
}

/// Two-layer encoder for one relation; `a` is the raw relation adjacency.
pub fn encode_relation(
    a: &Tensor,
    x: &Tensor,
    masks: (&Tensor, &Tensor),
    w0: &Tensor,
    w1: &Tensor,
    output: EncoderOutput,
) -> Result<Tensor> {
    eval_one(|e| {
        let a = e.constant(normalized_adjacency(a));
        let x = e.constant(x.clone());
        let (m0, m1) = (e.constant(masks.0.clone()), e.constant(masks.1.clone()));
        let (w0, w1) = (e.constant(w0.clone()), e.constant(w1.clone()));
        encode_node(e, a, x, m0, m1, w0, w1, output)
    })
}

pub fn fuse_global(z_rel: &[Tensor]) -> Result<Tensor> {
    if z_rel.is_empty() {
        return Err(Error::shape("fuse_global", "no relation embeddings"));
    }
    eval_one(|e| {
        let ids: Vec<NodeId> = z_rel.iter().map(|z| e.constant(z.clone())).collect();
        e.sum_all(&ids)
    })
}

/// `sigmoid([Z_r, Z][Z_r, Z]ᵀ)`, exactly symmetric.
pub fn decode_relation(z_r: &Tensor, z: &Tensor) -> Result<Tensor> {
    eval_one(|e| {
        let (a, b) = (e.constant(z_r.clone()), e.constant(z.clone()));
        decode_node(e, a, b)
    })
}

/// Mean of the per-relation decoder outputs.
pub fn fuse_adjacency(a_rel: &[Tensor]) -> Result<Tensor> {
    if a_rel.is_empty() {
        return Err(Error::shape("fuse_adjacency", "no relation adjacencies"));
    }
    eval_one(|e| {
        let ids: Vec<NodeId> = a_rel.iter().map(|a| e.constant(a.clone())).collect();
        mean_node(e, &ids)
    })
}

/// Returns `(X̂, M*)` with `M*` the mean layer mask and `X̂ = X ⊙ M*`.
pub fn global_feature_mask(x: &Tensor, masks: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if masks.is_empty() {
        return Err(Error::shape("global_feature_mask", "no layer masks"));
    }
    let mut expr = Expression::new();
    let xn = expr.constant(x.clone());
    let ids: Vec<NodeId> = masks.iter().map(|m| expr.constant(m.clone())).collect();
    let m_star = mean_node(&mut expr, &ids)?;
    let x_hat = expr.hadamard(xn, m_star)?;
    let mut out = expr.evaluate_many(&[x_hat, m_star], &Bindings::new())?;
    let m = out.pop().expect("two roots");
    Ok((out.pop().expect("two roots"), m))
}

/// Dense generator output for one subgraph.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub layer_masks: Vec<Tensor>,
    pub z_rel: Vec<Tensor>,
    pub z: Tensor,
    pub a_rel: Vec<Tensor>,
    pub a_hat: Tensor,
    pub m_star: Tensor,
    pub x_hat: Tensor,
}

/// Runs the differentiable generator forward on `sub`.
pub fn generate(params: &ExplainerParams, sub: &CompSubgraph) -> Result<GeneratorOutput> {
    if params.num_relations() != sub.num_relations() || params.feature_dim() != sub.feature_dim() {
        return Err(Error::Dimension("explainer does not match the subgraph".into()));
    }
    let mut expr = Expression::new();
    let p = params.leaves(&mut expr)?;
    let inst = instance_nodes(&mut expr, sub);
    let g = generator_nodes(&mut expr, &p, &inst)?;
    let r = sub.num_relations();
    let mut roots = Vec::new();
    roots.extend(&g.layer_masks);
    roots.extend(&g.z_rel);
    roots.push(g.z);
    roots.extend(&g.a_rel);
    roots.extend([g.a_hat, g.m_star, g.x_hat]);
    let vals = expr.evaluate_many(&roots, &params.bindings())?;
    let mut it = vals.into_iter();
    let mut take = |k: usize| (&mut it).take(k).collect::<Vec<_>>();
    let layer_masks = take(NUM_LAYERS);
    let z_rel = take(r);
    let z = take(1).remove(0);
    let a_rel = take(r);
    let mut rest = take(3);
    let x_hat = rest.pop().expect("x_hat");
    let m_star = rest.pop().expect("m_star");
    let a_hat = rest.pop().expect("a_hat");
    Ok(GeneratorOutput {
        layer_masks,
        z_rel,
        z,
        a_rel,
        a_hat,
        m_star,
        x_hat,
    })
}

/// Target probabilities under the four explainer queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Predictions {
    /// `Φ(A⊙Â, X̂)`
    pub factual: [f64; 2],
    /// `Φ(A⊙Â, X)`
    pub adjacency_only: [f64; 2],
    /// `Φ(A, X̂)`
    pub features_only: [f64; 2],
    /// `Φ(A⊙(1−Â), X⊙(1−M*))`
    pub counterfactual: [f64; 2],
}

fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::new(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

pub fn factual_counterfactual_forward(
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    a_hat: &Tensor,
    x_hat: &Tensor,
    m_star: &Tensor,
) -> Result<Predictions> {
    let n = sub.num_nodes();
    if a_hat.shape() != (n, n) || x_hat.shape() != sub.features().shape() || m_star.shape() != x_hat.shape() {
        return Err(Error::shape("factual_counterfactual_forward", "explanation does not match the subgraph"));
    }
    let not_a = a_hat.map(|v| 1.0 - v)?;
    let not_m = m_star.map(|v| 1.0 - v)?;
    let kept = sub.adjacency().iter().map(|a| hadamard(a, a_hat)).collect::<Result<Vec<_>>>()?;
    let dropped = sub.adjacency().iter().map(|a| hadamard(a, &not_a)).collect::<Result<Vec<_>>>()?;
    let x_rest = hadamard(sub.features(), &not_m)?;
    let c = sub.center();
    Ok(Predictions {
        factual: ckpt.predict(&kept, x_hat, c)?,
        adjacency_only: ckpt.predict(&kept, sub.features(), c)?,
        features_only: ckpt.predict(sub.adjacency(), x_hat, c)?,
        counterfactual: ckpt.predict(&dropped, &x_rest, c)?,
    })
}

/// Components of one instance's objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub factual: f64,
    pub adjacency_only: f64,
    pub features_only: f64,
    pub counterfactual: f64,
    pub recon: f64,
    pub reg: f64,
}

/// Weighted sum of the components.
pub fn total_loss(parts: &LossBreakdown, cfg: &ExplainerConfig) -> f64 {
    cfg.alpha * (parts.factual + parts.adjacency_only + parts.features_only)
        + cfg.beta * parts.recon
        + cfg.gamma * parts.counterfactual
        + parts.reg
}

/// Evaluates each objective term for one instance.
pub fn loss_breakdown(
    params: &ExplainerParams,
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    att: &AttributionSubgraph,
    cfg: &ExplainerConfig,
) -> Result<LossBreakdown> {
    let g = instance_graph(params, ckpt, sub, att, cfg)?;
    let mut roots = g.loss.terms.to_vec();
    roots.push(g.loss.recon);
    let v = g.expr.evaluate_many(&roots, &params.bindings())?;
    Ok(LossBreakdown {
        factual: v[0].item(),
        adjacency_only: v[1].item(),
        features_only: v[2].item(),
        counterfactual: v[3].item(),
        recon: v[4].item(),
        reg: cfg.l2 * params.squared_norm(),
    })
}

/// Cross-entropies of a prediction set against `y`, for cross-checks.
/// Largest relative error between analytic and central-difference
/// gradients of the total loss, over every explainer weight.
pub fn gradient_check(
    params: &ExplainerParams,
    ckpt: &TargetCheckpoint,
    sub: &CompSubgraph,
    att: &AttributionSubgraph,
    cfg: &ExplainerConfig,
    step: f64,
) -> Result<f64> {
    let g = instance_graph(params, ckpt, sub, att, cfg)?;
    let names = params.names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    g.expr.finite_diff_check(g.loss.total, &params.bindings(), &wrt, step)
}

#[cfg(test)]
pub(crate) fn prediction_losses(p: &Predictions, y: u8) -> [f64; 4] {
    [
        cross_entropy(p.factual, y),
        cross_entropy(p.adjacency_only, y),
        cross_entropy(p.features_only, y),
        cross_entropy(p.counterfactual, 1 - y),
    ]
}

#[cfg(test)]
pub(crate) fn probs(logits: &Tensor) -> [f64; 2] {
    softmax2(logits.row(0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffkernel::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(lo..hi)).unwrap()
    }

    #[test]
    fn feature_mask_examples() {
        let x = t(&[&[0.0, 10.0], &[-10.0, 0.0]]);
        assert!(layer_feature_mask(&x, &Tensor::zeros(2, 2)).unwrap().data().iter().all(|&v| v == 0.5));
        let m = layer_feature_mask(&x, &Tensor::identity(2)).unwrap();
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.get(1, 1), 0.5);
        assert_eq!(m.get(0, 1), sigmoid(10.0));
        assert_eq!(m.get(1, 0), sigmoid(-10.0));
        assert!(m.get(0, 1) > 0.9999 && m.get(1, 0) < 1e-4);
        assert!(layer_feature_mask(&x, &Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn encoder_examples() {
        let x = t(&[&[1.5, -2.0, 0.0]]);
        let ones = Tensor::ones(1, 3);
        let eye = Tensor::identity(3);
        // a single node whose adjacency is I normalizes to I again
        let z = encode_relation(&Tensor::identity(1), &x, (&ones, &ones), &eye, &eye, EncoderOutput::Relu).unwrap();
        assert_eq!(z, t(&[&[1.5, 0.0, 0.0]]));
        let zero = encode_relation(&Tensor::zeros(1, 1), &Tensor::zeros(1, 3), (&ones, &ones), &eye, &eye, EncoderOutput::Relu).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_three_node_hand_case() {
        // edges 0->1, 2->1 ; d = 2, h = 1
        let mut a = Tensor::zeros(3, 3);
        a.set(0, 1, 1.0);
        a.set(2, 1, 1.0);
        let x = t(&[&[2.0, 0.0], &[0.0, 4.0], &[6.0, 2.0]]);
        let m0 = t(&[&[1.0, 0.5], &[1.0, 0.5], &[0.5, 1.0]]);
        let m1 = t(&[&[1.0, 1.0], &[0.5, 0.5], &[0.0, 1.0]]);
        let w0 = t(&[&[1.0], &[1.0]]);
        let w1 = t(&[&[2.0]]);
        // Ã rows: 0 -> {0,1}/2, 1 -> {1}, 2 -> {1,2}/2
        // (X⊙M0)W0 = [2, 2, 5];  H1 = [2, 2, 3.5]
        // gate = row means of M1 = [1, .5, .5];  H1⊙gate = [2, 1, 1.75]
        // ·W1 = [4, 2, 3.5];  Ã· = [3, 2, 2.75]
        let z = encode_relation(&a, &x, (&m0, &m1), &w0, &w1, EncoderOutput::Relu).unwrap();
        assert_eq!(z, encode_relation(&a, &x, (&m0, &m1), &w0, &w1, EncoderOutput::Linear).unwrap());
        let neg = t(&[&[-2.0]]);
        let lin = encode_relation(&a, &x, (&m0, &m1), &w0, &neg, EncoderOutput::Linear).unwrap();
        assert!(lin.max_abs_diff(&t(&[&[-3.0], &[-2.0], &[-2.75]])) < 1e-15);
        let clipped = encode_relation(&a, &x, (&m0, &m1), &w0, &neg, EncoderOutput::Relu).unwrap();
        assert!(clipped.data().iter().all(|&v| v == 0.0));
        assert!(z.max_abs_diff(&t(&[&[3.0], &[2.0], &[2.75]])) < 1e-15, "{z:?}");
    }

    #[test]
    fn fuse_and_decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z1 = rand_t(&mut rng, 4, 3, -1.0, 1.0);
        assert_eq!(fuse_global(std::slice::from_ref(&z1)).unwrap(), z1);
        let neg = z1.map(|v| -v).unwrap();
        assert!(fuse_global(&[z1.clone(), neg]).unwrap().data().iter().all(|&v| v == 0.0));
        let zs: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, 4, 3, -1.0, 1.0)).collect();
        let fused = fuse_global(&zs).unwrap();
        let oracle = Tensor::from_fn(4, 3, |i, j| zs.iter().fold(0.0, |acc, z| acc + z.get(i, j))).unwrap();
        assert!(fused.max_abs_diff(&oracle) < 1e-15);
        assert!(fuse_global(&[]).is_err());

        let a = decode_relation(&Tensor::zeros(3, 2), &Tensor::zeros(3, 2)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
        let a = decode_relation(&t(&[&[1.0], &[0.0]]), &t(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(a.get(0, 0), sigmoid(1.0));
        assert_eq!(a.get(1, 1), sigmoid(1.0));
        assert_eq!(a.get(0, 1), 0.5);
        assert!((a.get(0, 0) - 0.7311).abs() < 1e-4);
        let a = decode_relation(&zs[0], &fused).unwrap();
        assert_eq!(a, a.transpose());
        assert!(decode_relation(&zs[0], &Tensor::zeros(3, 3)).is_err());

        let decs: Vec<Tensor> = (0..4).map(|k| decode_relation(&zs[k], &fused).unwrap()).collect();
        assert_eq!(fuse_adjacency(&decs[..1]).unwrap(), decs[0]);
        let half = vec![Tensor::filled(3, 3, 0.5); 3];
        assert!(fuse_adjacency(&half).unwrap().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let mean = fuse_adjacency(&decs).unwrap();
        let oracle = Tensor::from_fn(4, 4, |i, j| decs.iter().fold(0.0, |acc, a| acc + a.get(i, j)) / 4.0).unwrap();
        assert!(mean.max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn global_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, 3, 4, -2.0, 2.0);
        let (xh, m) = global_feature_mask(&x, &[Tensor::ones(3, 4), Tensor::ones(3, 4)]).unwrap();
        assert_eq!(xh, x);
        assert!(m.data().iter().all(|&v| v == 1.0));
        let (xh, _) = global_feature_mask(&x, &[Tensor::zeros(3, 4), Tensor::zeros(3, 4)]).unwrap();
        assert!(xh.data().iter().all(|&v| v == 0.0));
        let m1 = rand_t(&mut rng, 3, 4, 0.0, 1.0);
        let m2 = rand_t(&mut rng, 3, 4, 0.0, 1.0);
        let (xh, _) = global_feature_mask(&x, &[m1.clone(), m2.clone()]).unwrap();
        let oracle = Tensor::from_fn(3, 4, |i, j| x.get(i, j) * (m1.get(i, j) + m2.get(i, j)) / 2.0).unwrap();
        assert!(xh.max_abs_diff(&oracle) < 1e-15);
        assert!(global_feature_mask(&x, &[]).is_err());
    }

    pub(crate) fn five_node() -> (TargetCheckpoint, CompSubgraph, AttributionSubgraph) {
        let f = crate::fixtures::five_node().unwrap();
        (f.ckpt, f.sub, f.att)
    }

    fn small_cfg() -> ExplainerConfig {
        ExplainerConfig {
            hidden_dim: 4,
            ..ExplainerConfig::default()
        }
    }

    #[test]
    fn forward_identities() {
        let (ckpt, sub, _) = five_node();
        let n = sub.num_nodes();
        let orig = ckpt.predict_subgraph(&sub).unwrap();
        let ones_x = Tensor::ones(n, 3);
        let p = factual_counterfactual_forward(&ckpt, &sub, &Tensor::ones(n, n), sub.features(), &ones_x).unwrap();
        assert_eq!(p.factual, orig);
        assert_eq!(p.adjacency_only, orig);
        assert_eq!(p.features_only, orig);
        let empty = vec![Tensor::zeros(n, n); 2];
        assert_eq!(p.counterfactual, ckpt.predict(&empty, &Tensor::zeros(n, 3), 0).unwrap());
        let p = factual_counterfactual_forward(&ckpt, &sub, &Tensor::zeros(n, n), sub.features(), &ones_x).unwrap();
        assert_eq!(p.factual, ckpt.predict(&empty, sub.features(), 0).unwrap());
    }

    #[test]
    fn graph_and_numeric_forward_agree() {
        let (ckpt, sub, att) = five_node();
        let cfg = small_cfg();
        let params = ExplainerParams::initialize(&cfg, 2, 3).unwrap();
        let out = generate(&params, &sub).unwrap();
        let numeric = factual_counterfactual_forward(&ckpt, &sub, &out.a_hat, &out.x_hat, &out.m_star).unwrap();
        let g = instance_graph(&params, &ckpt, &sub, &att, &cfg).unwrap();
        let logits = g.expr.evaluate_many(&g.logits, &params.bindings()).unwrap();
        let graph = [probs(&logits[0]), probs(&logits[1]), probs(&logits[2]), probs(&logits[3])];
        let want = [numeric.factual, numeric.adjacency_only, numeric.features_only, numeric.counterfactual];
        for (a, b) in graph.iter().zip(&want) {
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
        // the public per-step ops compose to the same generator output
        let m0 = layer_feature_mask(sub.features(), &params.masks()[0]).unwrap();
        let m1 = layer_feature_mask(sub.features(), &params.masks()[1]).unwrap();
        let zs: Vec<Tensor> = (0..2)
            .map(|r| encode_relation(&sub.adjacency()[r], sub.features(), (&m0, &m1), &params.enc_in()[r], &params.enc_hidden()[r], params.encoder_output()).unwrap())
            .collect();
        let z = fuse_global(&zs).unwrap();
        let a_hat = fuse_adjacency(&zs.iter().map(|zr| decode_relation(zr, &z).unwrap()).collect::<Vec<_>>()).unwrap();
        assert_eq!(a_hat, out.a_hat);
        let (x_hat, m_star) = global_feature_mask(sub.features(), &[m0, m1]).unwrap();
        assert_eq!((x_hat, m_star), (out.x_hat, out.m_star));
    }

    #[test]
    fn loss_recomposes_from_terms() {
        let (ckpt, sub, att) = five_node();
        let cfg = small_cfg();
        let params = ExplainerParams::initialize(&cfg, 2, 3).unwrap();
        let parts = loss_breakdown(&params, &ckpt, &sub, &att, &cfg).unwrap();
        let out = generate(&params, &sub).unwrap();
        let p = factual_counterfactual_forward(&ckpt, &sub, &out.a_hat, &out.x_hat, &out.m_star).unwrap();
        let ce = prediction_losses(&p, 1);
        assert!((ce[0] - parts.factual).abs() < 1e-9);
        assert!((ce[3] - parts.counterfactual).abs() < 1e-9);
        // reconstruction: mean over the support of (Â − A_att)²
        let s = sub.support();
        let a_att = att.collapsed();
        let (mut sum, mut cnt) = (0.0, 0.0);
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                if s.get(i, j) > 0.0 {
                    sum += (out.a_hat.get(i, j) - a_att.get(i, j)).powi(2);
                    cnt += 1.0;
                }
            }
        }
        assert!((parts.recon - sum / cnt).abs() < 1e-12);
        let g = instance_graph(&params, &ckpt, &sub, &att, &cfg).unwrap();
        let total = g.expr.evaluate(g.loss.total, &params.bindings()).unwrap().item();
        let no_reg = LossBreakdown { reg: 0.0, ..parts };
        assert!((total - total_loss(&no_reg, &cfg)).abs() < 1e-12);

        let zero = ExplainerConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, l2: 0.0, ..cfg };
        let parts = loss_breakdown(&params, &ckpt, &sub, &att, &zero).unwrap();
        assert_eq!(total_loss(&parts, &zero), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ckpt, sub, att) = five_node();
        for encoder_output in [EncoderOutput::Linear, EncoderOutput::Relu] {
            let cfg = ExplainerConfig { hidden_dim: 4, l2: 0.0, encoder_output, ..ExplainerConfig::default() };
            let params = ExplainerParams::initialize(&cfg, 2, 3).unwrap();
            let err = gradient_check(&params, &ckpt, &sub, &att, &cfg, 1e-5).unwrap();
            assert!(err < 1e-4, "{encoder_output:?}: {err}");
        }
    }
}
