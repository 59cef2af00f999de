//! The frozen classifier being explained: a two-layer relational GCN with a
//! linear readout on the center node.
//!
//! Layer rule, per relation `r` with weighted adjacency `A_r`:
//!
//! ```text
//! Ã_r     = rownorm(A_r + I)
//! H^{l+1} = ReLU( Σ_r Ã_r H^l W_r^l ),   H^0 = X
//! logits  = H^2[center] W_c + b
//! ```
//!
//! Adjacency may be soft (entries in `[0, 1]`), which is how the explainer
//! feeds masked graphs through the model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkernel::{Bindings, Expression, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::hetgraph::{CompSubgraph, HetGraph};
use crate::weights::WeightFile;

pub const NUM_LAYERS: usize = 2;
pub const NUM_CLASSES: usize = 2;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Reweight the loss so both classes carry equal total mass.
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            hidden_dim: 16,
            learning_rate: 0.2,
            epochs: 300,
            l2: 1e-4,
            balance_classes: true,
            seed: 7,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("target hidden_dim must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("target learning_rate must be > 0".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("target l2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frozen target weights. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCheckpoint {
    config: TargetConfig,
    layer1: Vec<Tensor>,
    layer2: Vec<Tensor>,
    classifier: Tensor,
    bias: Tensor,
    fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    #[serde(flatten)]
    target: TargetConfig,
    num_relations: usize,
    feature_dim: usize,
    fingerprint: String,
}

/// Leaves or constants holding the target weights inside an expression.
pub(crate) struct TargetNodes {
    layer1: Vec<NodeId>,
    layer2: Vec<NodeId>,
    classifier: NodeId,
    bias: NodeId,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound)).expect("finite init")
}

impl TargetCheckpoint {
    /// Builds a checkpoint from explicit weights, checking shapes.
    pub fn from_weights(
        config: TargetConfig,
        layer1: Vec<Tensor>,
        layer2: Vec<Tensor>,
        classifier: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let d = layer1.first().map(Tensor::rows).unwrap_or(0);
        if layer1.is_empty() || layer1.len() != layer2.len() {
            return Err(Error::Dimension("one layer-1 and one layer-2 weight per relation".into()));
        }
        let bad = |what: &str, t: &Tensor, want: (usize, usize)| {
            (t.shape() != want).then(|| {
                Error::Dimension(format!("{what} is {}x{}, expected {}x{}", t.rows(), t.cols(), want.0, want.1))
            })
        };
        for w in &layer1 {
            if let Some(e) = bad("layer-1 weight", w, (d, h)) {
                return Err(e);
            }
        }
        for w in &layer2 {
            if let Some(e) = bad("layer-2 weight", w, (h, h)) {
                return Err(e);
            }
        }
        if let Some(e) = bad("classifier", &classifier, (h, NUM_CLASSES)) {
            return Err(e);
        }
        if let Some(e) = bad("bias", &bias, (1, NUM_CLASSES)) {
            return Err(e);
        }
        Ok(TargetCheckpoint {
            config,
            layer1,
            layer2,
            classifier,
            bias,
            fingerprint: String::new(),
        })
    }

    /// Seeded initialization: uniform in ±1/sqrt(fan_in), zero bias.
    pub fn initialize(config: &TargetConfig, num_relations: usize, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layer1 = (0..num_relations).map(|_| uniform(&mut rng, feature_dim, h, feature_dim)).collect();
        let layer2 = (0..num_relations).map(|_| uniform(&mut rng, h, h, h)).collect();
        let classifier = uniform(&mut rng, h, NUM_CLASSES, h);
        Self::from_weights(config.clone(), layer1, layer2, classifier, Tensor::zeros(1, NUM_CLASSES))
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn num_relations(&self) -> usize {
        self.layer1.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer1[0].rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Digest of the labels and graph shape this checkpoint was trained on.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (r, w) in self.layer1.iter().enumerate() {
            out.push((format!("target.layer1.{r}"), w));
        }
        for (r, w) in self.layer2.iter().enumerate() {
            out.push((format!("target.layer2.{r}"), w));
        }
        out.push(("target.classifier".into(), &self.classifier));
        out.push(("target.bias".into(), &self.bias));
        out
    }

    /// Embeds the frozen weights as constants.
    pub(crate) fn constants(&self, expr: &mut Expression) -> TargetNodes {
        TargetNodes {
            layer1: self.layer1.iter().map(|w| expr.constant(w.clone())).collect(),
            layer2: self.layer2.iter().map(|w| expr.constant(w.clone())).collect(),
            classifier: expr.constant(self.classifier.clone()),
            bias: expr.constant(self.bias.clone()),
        }
    }

    fn leaves(&self, expr: &mut Expression) -> Result<TargetNodes> {
        let mut p = |name: String, t: &Tensor| expr.param(&name, t.rows(), t.cols());
        Ok(TargetNodes {
            layer1: self
                .layer1
                .iter()
                .enumerate()
                .map(|(r, w)| p(format!("target.layer1.{r}"), w))
                .collect::<Result<_>>()?,
            layer2: self
                .layer2
                .iter()
                .enumerate()
                .map(|(r, w)| p(format!("target.layer2.{r}"), w))
                .collect::<Result<_>>()?,
            classifier: p("target.classifier".into(), &self.classifier)?,
            bias: p("target.bias".into(), &self.bias)?,
        })
    }

    fn check_inputs(&self, adjacency: &[Tensor], features: &Tensor) -> Result<()> {
        if adjacency.len() != self.num_relations() {
            return Err(Error::shape(
                "predict",
                format!("{} adjacency matrices for {} relations", adjacency.len(), self.num_relations()),
            ));
        }
        let n = features.rows();
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "predict",
                format!("features have {} columns, model expects {}", features.cols(), self.feature_dim()),
            ));
        }
        for a in adjacency {
            if a.shape() != (n, n) {
                return Err(Error::shape("predict", format!("adjacency {}x{} for {n} nodes", a.rows(), a.cols())));
            }
            if a.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dimension("adjacency entries must lie in [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Class probabilities `(p0, p1)` at `center`.
    pub fn predict(&self, adjacency: &[Tensor], features: &Tensor, center: usize) -> Result<[f64; 2]> {
        Ok(softmax2(&self.logits(adjacency, features, center)?))
    }

    /// Pre-softmax class scores at `center`.
    pub fn logits(&self, adjacency: &[Tensor], features: &Tensor, center: usize) -> Result<[f64; 2]> {
        self.check_inputs(adjacency, features)?;
        let n = features.rows();
        if center >= n {
            return Err(Error::shape("predict", format!("center {center} out of {n} nodes")));
        }
        let mut expr = Expression::new();
        let w = self.constants(&mut expr);
        let adj: Vec<NodeId> = adjacency.iter().map(|a| expr.constant(a.clone())).collect();
        let x = expr.constant(features.clone());
        let sel = expr.constant(one_hot_row(n, center));
        let logits = build_logits(&mut expr, &w, &adj, x, sel)?;
        let z = expr.evaluate(logits, &Bindings::new())?;
        Ok([z.get(0, 0), z.get(0, 1)])
    }

    pub fn predict_subgraph(&self, sub: &CompSubgraph) -> Result<[f64; 2]> {
        self.predict(sub.adjacency(), sub.features(), sub.center())
    }

    pub fn to_file(&self) -> WeightFile<serde_json::Value> {
        let config = CheckpointConfig {
            target: self.config.clone(),
            num_relations: self.num_relations(),
            feature_dim: self.feature_dim(),
            fingerprint: self.fingerprint.clone(),
        };
        WeightFile {
            config: serde_json::to_value(config).expect("serializable"),
            weights: self.named().into_iter().map(|(k, v)| (k, v.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = WeightFile::<serde_json::Value>::load(path)?;
        let cfg: CheckpointConfig =
            serde_json::from_value(file.config.clone()).map_err(|e| Error::json(path, e))?;
        let (r, d, h) = (cfg.num_relations, cfg.feature_dim, cfg.target.hidden_dim);
        let layer1 = (0..r)
            .map(|i| file.take(&format!("target.layer1.{i}"), (d, h)))
            .collect::<Result<_>>()?;
        let layer2 = (0..r)
            .map(|i| file.take(&format!("target.layer2.{i}"), (h, h)))
            .collect::<Result<_>>()?;
        let classifier = file.take("target.classifier", (h, NUM_CLASSES))?;
        let bias = file.take("target.bias", (1, NUM_CLASSES))?;
        let mut ckpt = Self::from_weights(cfg.target, layer1, layer2, classifier, bias)?;
        ckpt.fingerprint = cfg.fingerprint;
        Ok(ckpt)
    }
}

pub(crate) fn one_hot_row(n: usize, idx: usize) -> Tensor {
    let mut t = Tensor::zeros(1, n);
    t.set(0, idx, 1.0);
    t
}

pub(crate) fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (e0, e1) = ((z[0] - m).exp(), (z[1] - m).exp());
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Relational GCN forward pass. `adjacency` holds raw (possibly soft) n×n
/// matrices, `selector` is m×n and picks the rows to classify.
pub(crate) fn build_logits(
    expr: &mut Expression,
    w: &TargetNodes,
    adjacency: &[NodeId],
    x: NodeId,
    selector: NodeId,
) -> Result<NodeId> {
    let n = expr.shape(x).0;
    let eye = expr.constant(Tensor::identity(n));
    let mut norm = Vec::with_capacity(adjacency.len());
    for &a in adjacency {
        let looped = expr.add(a, eye)?;
        norm.push(expr.row_normalize(looped)?);
    }
    let mut h = x;
    for layer in [&w.layer1, &w.layer2] {
        let mut terms = Vec::with_capacity(norm.len());
        for (&a, &wr) in norm.iter().zip(layer.iter()) {
            let hw = expr.matmul(h, wr)?;
            terms.push(expr.matmul(a, hw)?);
        }
        let s = expr.sum_all(&terms)?;
        h = expr.relu(s)?;
    }
    let picked = expr.matmul(selector, h)?;
    let scores = expr.matmul(picked, w.classifier)?;
    let m = expr.shape(selector).0;
    let ones = expr.constant(Tensor::ones(m, 1));
    let b = expr.matmul(ones, w.bias)?;
    expr.add(scores, b)
}

/// `-ln p_y` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: [f64; 2], y: u8) -> f64 {
    -probs[y as usize].max(PROB_FLOOR).ln()
}

/// Cross-entropy of the model's prediction at the subgraph's center,
/// computed from the logits so that confident predictions still give
/// distinct losses. Capped at the floored-probability value.
pub fn model_loss(ckpt: &TargetCheckpoint, sub: &CompSubgraph) -> Result<f64> {
    let y = sub.label().ok_or_else(|| Error::MissingLabel(sub.center_id().to_string()))?;
    let z = ckpt.logits(sub.adjacency(), sub.features(), sub.center())?;
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    Ok((lse - z[y as usize]).min(-PROB_FLOOR.ln()))
}

#[derive(Clone, Debug)]
pub struct TargetTraining {
    pub checkpoint: TargetCheckpoint,
    /// Training loss before each update, then the final loss.
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
}

/// Full-batch gradient descent on the labeled nodes of `graph`.
pub fn train_target(graph: &HetGraph, labels: &[(usize, u8)], cfg: &TargetConfig) -> Result<TargetTraining> {
    cfg.validate()?;
    if labels.len() < 2 {
        return Err(Error::Config("target training needs at least two labeled nodes".into()));
    }
    let positives = labels.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Config("target training needs both classes present".into()));
    }
    let n = graph.num_nodes();
    let m = labels.len();

    let mut ckpt = TargetCheckpoint::initialize(cfg, graph.relations().len(), graph.feature_dim())?;
    ckpt.fingerprint = fingerprint(graph, labels);

    let (w_pos, w_neg) = if cfg.balance_classes {
        (m as f64 / (2.0 * positives as f64), m as f64 / (2.0 * (m - positives) as f64))
    } else {
        (1.0, 1.0)
    };
    let mut selector = Tensor::zeros(m, n);
    let mut targets = Tensor::zeros(m, NUM_CLASSES);
    for (row, &(idx, y)) in labels.iter().enumerate() {
        selector.set(row, idx, 1.0);
        targets.set(row, y as usize, if y == 1 { w_pos } else { w_neg });
    }

    let mut expr = Expression::new();
    let w = ckpt.leaves(&mut expr)?;
    let adj: Vec<NodeId> = graph.dense_adjacency().into_iter().map(|a| expr.constant(a)).collect();
    let x = expr.constant(graph.features().clone());
    let sel = expr.constant(selector);
    let logits = build_logits(&mut expr, &w, &adj, x, sel)?;
    let t = expr.constant(targets);
    let ce = expr.softmax_cross_entropy(logits, t)?;
    let mut reg_terms = Vec::new();
    for &p in w.layer1.iter().chain(&w.layer2).chain([&w.classifier]) {
        let sq = expr.hadamard(p, p)?;
        reg_terms.push(expr.reduce_sum(sq)?);
    }
    let reg = expr.sum_all(&reg_terms)?;
    let loss = expr.weighted_sum(&[(1.0, ce), (cfg.l2, reg)])?;

    let names: Vec<String> = ckpt.named().into_iter().map(|(k, _)| k).collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let grads = {
            let named = ckpt.named();
            let mut b = Bindings::new();
            for (k, v) in &named {
                b.bind(k.clone(), v);
            }
            let (value, grads) = expr
                .value_and_gradients(loss, &b, &wrt)
                .map_err(|e| Error::Training { epoch, detail: e.to_string() })?;
            if !value.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite loss".into() });
            }
            trace.push(value);
            grads
        };
        let lr = cfg.learning_rate;
        let step = |t: &mut Tensor, g: &Tensor| -> Result<()> {
            let next = Tensor::new(
                t.rows(),
                t.cols(),
                t.data().iter().zip(g.data()).map(|(w, d)| w - lr * d).collect(),
            )
            .map_err(|_| Error::Training { epoch, detail: "non-finite weights".into() })?;
            *t = next;
            Ok(())
        };
        for (r, t) in ckpt.layer1.iter_mut().enumerate() {
            step(t, &grads[&format!("target.layer1.{r}")])?;
        }
        for (r, t) in ckpt.layer2.iter_mut().enumerate() {
            step(t, &grads[&format!("target.layer2.{r}")])?;
        }
        step(&mut ckpt.classifier, &grads["target.classifier"])?;
        step(&mut ckpt.bias, &grads["target.bias"])?;
    }

    let named = ckpt.named();
    let mut b = Bindings::new();
    for (k, v) in &named {
        b.bind(k.clone(), v);
    }
    let (z, final_loss) = {
        let vals = expr.evaluate_many(&[logits, loss], &b)?;
        (vals[0].clone(), vals[1].item())
    };
    trace.push(final_loss);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(row, (_, y))| {
            let p = softmax2(z.row(*row));
            (p[1] > p[0]) == (*y == 1)
        })
        .count();
    drop(b);
    Ok(TargetTraining {
        checkpoint: ckpt,
        loss_trace: trace,
        train_accuracy: correct as f64 / m as f64,
    })
}

fn fingerprint(graph: &HetGraph, labels: &[(usize, u8)]) -> String {
    let mut h = Sha256::new();
    h.update(format!("n={} d={} r={} e={};", graph.num_nodes(), graph.feature_dim(), graph.relations().len(), graph.edges().len()));
    for &(i, y) in labels {
        h.update(graph.id(i).as_bytes());
        h.update([b'=', b'0' + y, b';']);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{computation_subgraph, Edge, NodeType};
    use proptest::prelude::*;
    use rand::Rng;
    use tempfile::TempDir;

    fn cfg(h: usize) -> TargetConfig {
        TargetConfig {
            hidden_dim: h,
            ..TargetConfig::default()
        }
    }

    #[test]
    fn empty_graph_gives_bias_only_prediction() {
        let mut ckpt = TargetCheckpoint::initialize(&cfg(4), 2, 3).unwrap();
        ckpt.bias = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let want = softmax2(&[0.3, -0.4]);
        let adj = vec![Tensor::zeros(5, 5); 2];
        for c in 0..5 {
            let p = ckpt.predict(&adj, &Tensor::zeros(5, 3), c).unwrap();
            assert_eq!(p, want);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_scaling_by_one_is_identity() {
        let ckpt = TargetCheckpoint::initialize(&cfg(6), 2, 3).unwrap();
        let a = Tensor::from_fn(4, 4, |i, j| ((i + j) % 2) as f64).unwrap();
        let x = Tensor::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.4).unwrap();
        let scaled = a.map(|v| v * 1.0).unwrap();
        let p = ckpt.predict(&[a.clone(), a.clone()], &x, 1).unwrap();
        let q = ckpt.predict(&[scaled.clone(), scaled], &x, 1).unwrap();
        assert_eq!(p, q);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ckpt = TargetCheckpoint::initialize(&cfg(2), 1, 2).unwrap();
        let x = Tensor::zeros(2, 2);
        assert!(ckpt.predict(&[Tensor::zeros(3, 3)], &x, 0).is_err());
        assert!(ckpt.predict(&[Tensor::filled(2, 2, 1.5)], &x, 0).is_err());
        assert!(ckpt.predict(&[Tensor::zeros(2, 2), Tensor::zeros(2, 2)], &x, 0).is_err());
        assert!(ckpt.predict(&[Tensor::zeros(2, 2)], &Tensor::zeros(2, 3), 0).is_err());
    }

    #[test]
    fn three_node_forward_matches_hand_computation() {
        // d = h = 1, one relation, edges 1->0 and 0->2 (weights 1).
        // Ã rows: node0 {0:1/2, 2:1/2}; node1 {0:1/2, 1:1/2}; node2 {2:1}
        // X = [2, 4, -6], W1 = 1 -> H1 = relu(ÃX) = relu([-2, 3, -6]) = [0, 3, 0]
        // W2 = 2 -> H2 = relu(2 ÃH1) = [0, 3, 0]
        // logits at node 1: 3 * [1, -1] + [0.5, 0] = [3.5, -3]
        let ckpt = TargetCheckpoint::from_weights(
            cfg(1),
            vec![Tensor::ones(1, 1)],
            vec![Tensor::filled(1, 1, 2.0)],
            Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap(),
        )
        .unwrap();
        let mut a = Tensor::zeros(3, 3);
        a.set(1, 0, 1.0);
        a.set(0, 2, 1.0);
        let x = Tensor::from_rows(&[vec![2.0], vec![4.0], vec![-6.0]]).unwrap();
        let p = ckpt.predict(&[a.clone()], &x, 1).unwrap();
        let want = softmax2(&[3.5, -3.0]);
        assert!((p[0] - want[0]).abs() < 1e-15);
        let p0 = ckpt.predict(&[a], &x, 0).unwrap();
        assert_eq!(p0, softmax2(&[0.5, 0.0]));
    }

    fn sub_with_label(y: Option<u8>) -> (TargetCheckpoint, CompSubgraph) {
        let nodes = (0..4).map(|i| (format!("c{i}"), NodeType::Company)).collect();
        let e = |s, d| Edge { src: s, dst: d, rel: 0 };
        let g = HetGraph::new(
            nodes,
            vec!["r".into()],
            vec![e(0, 1), e(1, 2), e(2, 3), e(3, 0)],
            Tensor::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.3 - 1.0).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let ckpt = TargetCheckpoint::initialize(&cfg(3), 1, 2).unwrap();
        (ckpt, computation_subgraph(&g, "c0", 2).unwrap().with_label(y))
    }

    #[test]
    fn model_loss_cases() {
        assert_eq!(cross_entropy([1.0, 0.0], 0), 0.0);
        assert!((cross_entropy([0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy([0.0, 1.0], 0) - -(PROB_FLOOR.ln())).abs() < 1e-9);

        let (ckpt, sub) = sub_with_label(Some(1));
        let p = ckpt.predict_subgraph(&sub).unwrap();
        let expect = -(p[1].ln());
        assert!((model_loss(&ckpt, &sub).unwrap() - expect).abs() < 1e-15);
        let (_, unlabeled) = sub_with_label(None);
        assert!(matches!(model_loss(&ckpt, &unlabeled), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let ckpt = TargetCheckpoint::initialize(&cfg(3), 2, 4).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("target.json");
        ckpt.save(&path).unwrap();
        assert_eq!(TargetCheckpoint::load(&path).unwrap(), ckpt);

        let mut file = ckpt.to_file();
        file.weights.insert("target.classifier".into(), Tensor::zeros(2, 2));
        file.save(&path).unwrap();
        assert!(matches!(TargetCheckpoint::load(&path), Err(Error::Dimension(_))));
    }

    /// label = 1 iff feature 0 > 0; feature 1 is noise.
    fn separable_graph() -> (HetGraph, Vec<(usize, u8)>) {
        let n = 40;
        let nodes = (0..n).map(|i| (format!("c{i}"), NodeType::Company)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Tensor::from_fn(n, 2, |i, j| {
            if j == 0 {
                let mag = rng.gen_range(0.5..2.0);
                if i % 2 == 0 { mag } else { -mag }
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .unwrap();
        // edges join same-parity nodes, so neighbourhood means keep the sign
        let edges = (0..n - 2).map(|i| Edge { src: i, dst: i + 2, rel: 0 }).collect();
        let g = HetGraph::new(nodes, vec!["r".into()], edges, feats, vec!["s".into(), "noise".into()]).unwrap();
        let labels = (0..n).map(|i| (i, u8::from(g.features().get(i, 0) > 0.0))).collect();
        (g, labels)
    }

    #[test]
    fn learns_separable_toy_graph() {
        let (g, labels) = separable_graph();
        // a logistic oracle on feature 0 alone is perfect by construction
        assert!(labels.iter().all(|&(i, y)| (g.features().get(i, 0) > 0.0) == (y == 1)));
        let cfg = TargetConfig {
            hidden_dim: 8,
            epochs: 200,
            ..TargetConfig::default()
        };
        let out = train_target(&g, &labels, &cfg).unwrap();
        assert!(out.train_accuracy >= 0.95, "accuracy {}", out.train_accuracy);
        assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (g, labels) = separable_graph();
        let cfg0 = TargetConfig {
            epochs: 0,
            ..cfg(4)
        };
        let out = train_target(&g, &labels, &cfg0).unwrap();
        let init = TargetCheckpoint::initialize(&cfg0, 1, 2).unwrap();
        assert_eq!(out.checkpoint.layer1, init.layer1);
        assert_eq!(out.checkpoint.classifier, init.classifier);

        let cfg = TargetConfig {
            epochs: 20,
            ..cfg(4)
        };
        let a = train_target(&g, &labels, &cfg).unwrap().checkpoint;
        let b = train_target(&g, &labels, &cfg).unwrap().checkpoint;
        assert_eq!(a, b);
        let bits = |c: &TargetCheckpoint| c.named().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn single_class_rejected() {
        let (g, _) = separable_graph();
        let labels: Vec<(usize, u8)> = (0..5).map(|i| (i, 1)).collect();
        assert!(matches!(train_target(&g, &labels, &cfg(2)), Err(Error::Config(_))));
        assert!(train_target(&g, &[(0, 1)], &cfg(2)).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let (g, labels) = separable_graph();
        let cfg = TargetConfig {
            learning_rate: 1e200,
            epochs: 5,
            ..cfg(4)
        };
        assert!(matches!(train_target(&g, &labels, &cfg), Err(Error::Training { .. })));
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let (ckpt, sub) = sub_with_label(Some(1));
        let n = sub.num_nodes();
        let mut expr = Expression::new();
        let w = ckpt.constants(&mut expr);
        let adj = expr.param("adj", n, n).unwrap();
        let x = expr.param("x", n, 2).unwrap();
        let sel = expr.constant(one_hot_row(n, 0));
        let logits = build_logits(&mut expr, &w, &[adj], x, sel).unwrap();
        let y = expr.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let ce = expr.softmax_cross_entropy(logits, y).unwrap();
        // soft adjacency strictly inside (0,1) so both FD probes stay valid
        let a = sub.adjacency()[0].map(|v| 0.2 + 0.6 * v).unwrap();
        let b = Bindings::new().with("adj", &a).with("x", sub.features());
        let err = expr.finite_diff_check(ce, &b, &["adj", "x"], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn predict_is_permutation_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let ckpt = TargetCheckpoint::initialize(&TargetConfig { seed, ..cfg(5) }, 2, 3).unwrap();
            let adj: Vec<Tensor> = (0..2)
                .map(|_| Tensor::from_fn(n, n, |_, _| if rng.gen_bool(0.4) { rng.gen_range(0.0..=1.0) } else { 0.0 }).unwrap())
                .collect();
            let x = Tensor::from_fn(n, 3, |_, _| rng.gen_range(-2.0..2.0)).unwrap();
            // permutation fixing the center (index 0)
            let mut perm: Vec<usize> = (1..n).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            perm.insert(0, 0);
            let padj: Vec<Tensor> = adj
                .iter()
                .map(|a| Tensor::from_fn(n, n, |i, j| a.get(perm[i], perm[j])).unwrap())
                .collect();
            let px = Tensor::from_fn(n, 3, |i, j| x.get(perm[i], j)).unwrap();
            let p = ckpt.predict(&adj, &x, 0).unwrap();
            let q = ckpt.predict(&padj, &px, 0).unwrap();
            prop_assert!((p[0] - q[0]).abs() < 1e-12);
        }
    }
}
