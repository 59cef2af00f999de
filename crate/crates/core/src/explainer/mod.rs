//! The explainer: a per-relation graph autoencoder that scores edges, a
//! layer-wise feature masker, and the factual/counterfactual objective that
//! trains both against the frozen target model.
//!
//! Forward pass for one computation subgraph with features `X` (n×d):
//!
//! ```text
//! X_ml = sigmoid(X · M_l)                          l = 0, 1
//! H1_r = ReLU(Ã_r · ((X ⊙ X_m0) · W0_r))
//! Z_r  = Ã_r · ((H1_r ⊙ gate(X_m1)) · W1_r)         gate = row means of X_m1, broadcast to h
//! Z    = Σ_r Z_r
//! A_r  = sigmoid([Z_r, Z] · [Z_r, Z]ᵀ)
//! Â    = mean_r A_r          M* = mean_l X_ml          X̂ = X ⊙ M*
//! ```
//!
//! `Z_r` is linear by default; [`EncoderOutput::Relu`] wraps it in a ReLU,
//! which confines every `A_r` entry to `[0.5, 1)`.
//!
//! The target is then queried on `(A⊙Â, X̂)`, `(A⊙Â, X)`, `(A, X̂)` and the
//! complement `(A⊙(1−Â), X⊙(1−M*))`.

mod infer;
mod ops;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Bindings, Expression, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::weights::WeightFile;

pub use infer::{explain, EvidenceSubgraph, KeptEdge};
pub use ops::{
    decode_relation, encode_relation, factual_counterfactual_forward, fuse_adjacency, fuse_global,
    generate, global_feature_mask, gradient_check, layer_feature_mask, loss_breakdown, total_loss, GeneratorOutput,
    LossBreakdown, Predictions,
};
pub use train::{train_explainer, ExplainerTraining};

/// Number of masked layers; matches the two-layer target.
pub const NUM_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    Sgd,
    #[default]
    Adam,
}

/// Activation on the encoder's second layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderOutput {
    #[default]
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the three factual cross-entropy terms.
    pub alpha: f64,
    /// Weight of the reconstruction term against `A_att`.
    pub beta: f64,
    /// Weight of the counterfactual term.
    pub gamma: f64,
    pub l2: f64,
    /// Number of edges kept in an evidence subgraph (K).
    pub edge_budget: usize,
    pub hidden_dim: usize,
    pub encoder_output: EncoderOutput,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            epochs: 200,
            learning_rate: 0.0015,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            l2: 1e-4,
            edge_budget: 25,
            hidden_dim: 32,
            encoder_output: EncoderOutput::Linear,
            optimizer: Optimizer::Adam,
            seed: 7,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_budget == 0 {
            return Err(Error::Config("edge_budget must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("explainer hidden_dim must be >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("l2", self.l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("explainer learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Learnable explainer weights: encoder `W0_r` (d×h) and `W1_r` (h×h) per
/// relation, and a d×d masker per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerParams {
    enc_in: Vec<Tensor>,
    enc_hidden: Vec<Tensor>,
    masks: Vec<Tensor>,
    encoder_output: EncoderOutput,
    trained: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamsHeader {
    num_relations: usize,
    feature_dim: usize,
    hidden_dim: usize,
    #[serde(default)]
    encoder_output: EncoderOutput,
    trained: bool,
}

pub(crate) struct ParamNodes {
    pub enc_in: Vec<NodeId>,
    pub enc_hidden: Vec<NodeId>,
    pub masks: Vec<NodeId>,
    pub encoder_output: EncoderOutput,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound)).expect("finite init")
}

impl ExplainerParams {
    /// Seeded uniform initialization in ±1/sqrt(fan_in).
    pub fn initialize(cfg: &ExplainerConfig, num_relations: usize, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if num_relations == 0 || feature_dim == 0 {
            return Err(Error::Config("explainer needs at least one relation and one feature".into()));
        }
        let h = cfg.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc_in = (0..num_relations).map(|_| uniform(&mut rng, feature_dim, h)).collect();
        let enc_hidden = (0..num_relations).map(|_| uniform(&mut rng, h, h)).collect();
        let masks = (0..NUM_LAYERS).map(|_| uniform(&mut rng, feature_dim, feature_dim)).collect();
        Ok(ExplainerParams {
            enc_in,
            enc_hidden,
            masks,
            encoder_output: cfg.encoder_output,
            trained: false,
        })
    }

    /// Explicit weights, shape-checked.
    pub fn from_weights(enc_in: Vec<Tensor>, enc_hidden: Vec<Tensor>, masks: Vec<Tensor>, trained: bool) -> Result<Self> {
        if enc_in.is_empty() || enc_in.len() != enc_hidden.len() {
            return Err(Error::Dimension("one encoder weight pair per relation".into()));
        }
        if masks.len() != NUM_LAYERS {
            return Err(Error::Dimension(format!("expected {NUM_LAYERS} mask weights, got {}", masks.len())));
        }
        let (d, h) = enc_in[0].shape();
        let ok = enc_in.iter().all(|w| w.shape() == (d, h))
            && enc_hidden.iter().all(|w| w.shape() == (h, h))
            && masks.iter().all(|m| m.shape() == (d, d));
        if !ok {
            return Err(Error::Dimension(format!("explainer weights inconsistent with d={d}, h={h}")));
        }
        Ok(ExplainerParams {
            enc_in,
            enc_hidden,
            masks,
            encoder_output: EncoderOutput::Linear,
            trained,
        })
    }

    pub fn with_encoder_output(mut self, encoder_output: EncoderOutput) -> Self {
        self.encoder_output = encoder_output;
        self
    }

    pub fn encoder_output(&self) -> EncoderOutput {
        self.encoder_output
    }

    pub fn num_relations(&self) -> usize {
        self.enc_in.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_in[0].rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_in[0].cols()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn enc_in(&self) -> &[Tensor] {
        &self.enc_in
    }

    pub fn enc_hidden(&self) -> &[Tensor] {
        &self.enc_hidden
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|(_, t)| t.squared_norm()).sum()
    }

    /// `(leaf name, tensor)` pairs in a fixed order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let a = self.enc_in.iter().enumerate().map(|(r, t)| (format!("enc_in.{r}"), t));
        let b = self.enc_hidden.iter().enumerate().map(|(r, t)| (format!("enc_hidden.{r}"), t));
        let c = self.masks.iter().enumerate().map(|(l, t)| (format!("mask.{l}"), t));
        a.chain(b).chain(c)
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.enc_in.iter_mut().chain(self.enc_hidden.iter_mut()).chain(self.masks.iter_mut())
    }

    pub(crate) fn names(&self) -> Vec<String> {
        self.iter().map(|(n, _)| n).collect()
    }

    pub(crate) fn leaves(&self, expr: &mut Expression) -> Result<ParamNodes> {
        let mut leaf = |name: String, t: &Tensor| expr.param(&name, t.rows(), t.cols());
        Ok(ParamNodes {
            enc_in: self.enc_in.iter().enumerate().map(|(r, t)| leaf(format!("enc_in.{r}"), t)).collect::<Result<_>>()?,
            enc_hidden: self
                .enc_hidden
                .iter()
                .enumerate()
                .map(|(r, t)| leaf(format!("enc_hidden.{r}"), t))
                .collect::<Result<_>>()?,
            masks: self.masks.iter().enumerate().map(|(l, t)| leaf(format!("mask.{l}"), t)).collect::<Result<_>>()?,
            encoder_output: self.encoder_output,
        })
    }

    pub(crate) fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (name, t) in self.iter() {
            b.bind(name, t);
        }
        b
    }

    pub(crate) fn set_trained(&mut self) {
        self.trained = true;
    }

    pub fn to_file(&self) -> WeightFile<serde_json::Value> {
        let header = ParamsHeader {
            num_relations: self.num_relations(),
            feature_dim: self.feature_dim(),
            hidden_dim: self.hidden_dim(),
            encoder_output: self.encoder_output,
            trained: self.trained,
        };
        WeightFile {
            config: serde_json::to_value(header).expect("serializable"),
            weights: self.iter().map(|(k, v)| (k, v.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = WeightFile::<serde_json::Value>::load(path)?;
        let header: ParamsHeader = serde_json::from_value(file.config.clone()).map_err(|e| Error::json(path, e))?;
        let (r, d, h) = (header.num_relations, header.feature_dim, header.hidden_dim);
        let enc_in = (0..r).map(|i| file.take(&format!("enc_in.{i}"), (d, h))).collect::<Result<_>>()?;
        let enc_hidden = (0..r).map(|i| file.take(&format!("enc_hidden.{i}"), (h, h))).collect::<Result<_>>()?;
        let masks = (0..NUM_LAYERS).map(|l| file.take(&format!("mask.{l}"), (d, d))).collect::<Result<_>>()?;
        Ok(Self::from_weights(enc_in, enc_hidden, masks, header.trained)?.with_encoder_output(header.encoder_output))
    }
}
