use log::debug;

use crate::attribution::AttributionSubgraph;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::hetgraph::CompSubgraph;
use crate::target::TargetCheckpoint;

use super::ops::{instance_graph, InstanceGraph};
use super::{ExplainerConfig, ExplainerParams, Optimizer};

#[derive(Clone, Debug)]
pub struct ExplainerTraining {
    pub params: ExplainerParams,
    /// Mean objective before each update, then after the last one.
    pub loss_trace: Vec<f64>,
    /// Mean counterfactual cross-entropy at initialization and after training.
    pub counterfactual_before: f64,
    pub counterfactual_after: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ExplainerParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn mean_counterfactual(graphs: &[InstanceGraph], params: &ExplainerParams) -> Result<f64> {
    let b = params.bindings();
    let mut total = 0.0;
    for g in graphs {
        total += g.expr.evaluate(g.loss.terms[3], &b)?.item();
    }
    Ok(total / graphs.len() as f64)
}

/// Full-batch training over the mean per-instance objective plus an L2
/// penalty on all explainer weights.
pub fn train_explainer(
    instances: &[CompSubgraph],
    ckpt: &TargetCheckpoint,
    attributions: &[AttributionSubgraph],
    cfg: &ExplainerConfig,
) -> Result<ExplainerTraining> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("explainer training needs at least one instance".into()));
    }
    if instances.len() != attributions.len() {
        return Err(Error::Config(format!(
            "{} instances but {} attribution subgraphs",
            instances.len(),
            attributions.len()
        )));
    }
    let mut params = ExplainerParams::initialize(cfg, instances[0].num_relations(), instances[0].feature_dim())?;
    let graphs = instances
        .iter()
        .zip(attributions)
        .map(|(sub, att)| instance_graph(&params, ckpt, sub, att, cfg))
        .collect::<Result<Vec<_>>>()?;
    let names = params.names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let scale = 1.0 / graphs.len() as f64;
    let counterfactual_before = mean_counterfactual(&graphs, &params)?;
    let mut adam = Adam::new(&params);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..=cfg.epochs {
        let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect();
        let mut loss = 0.0;
        {
            let b = params.bindings();
            for g in &graphs {
                let (value, gi) = if epoch < cfg.epochs {
                    g.expr.value_and_gradients(g.loss.total, &b, &wrt)
                } else {
                    g.expr.evaluate(g.loss.total, &b).map(|v| (v.item(), Default::default()))
                }
                .map_err(|e| Error::Training { epoch, detail: e.to_string() })?;
                loss += value * scale;
                for (acc, name) in grads.iter_mut().zip(&names) {
                    if let Some(t) = gi.get(name) {
                        for (a, v) in acc.iter_mut().zip(t.data()) {
                            *a += v * scale;
                        }
                    }
                }
            }
        }
        loss += cfg.l2 * params.squared_norm();
        if !loss.is_finite() {
            return Err(Error::Training { epoch, detail: "non-finite loss".into() });
        }
        trace.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        if epoch % 20 == 0 {
            debug!("explainer epoch {epoch}: loss {loss:.6}");
        }
        adam.t += 1;
        let (bc1, bc2) = (1.0 - BETA1.powi(adam.t), 1.0 - BETA2.powi(adam.t));
        for (k, (w, g)) in params.iter_mut().zip(&grads).enumerate() {
            let mut next = w.data().to_vec();
            for (i, (x, &gi)) in next.iter_mut().zip(g).enumerate() {
                let gi = gi + 2.0 * cfg.l2 * *x;
                match cfg.optimizer {
                    Optimizer::Sgd => *x -= cfg.learning_rate * gi,
                    Optimizer::Adam => {
                        let m = &mut adam.m[k][i];
                        let v = &mut adam.v[k][i];
                        *m = BETA1 * *m + (1.0 - BETA1) * gi;
                        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                        *x -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                    }
                }
            }
            *w = Tensor::new(w.rows(), w.cols(), next)
                .map_err(|_| Error::Training { epoch, detail: "non-finite weights".into() })?;
        }
    }
    let counterfactual_after = mean_counterfactual(&graphs, &params)?;
    params.set_trained();
    Ok(ExplainerTraining {
        params,
        loss_trace: trace,
        counterfactual_before,
        counterfactual_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::ops::tests::five_node;

    fn cfg(epochs: usize) -> ExplainerConfig {
        ExplainerConfig {
            epochs,
            hidden_dim: 4,
            learning_rate: 0.01,
            ..ExplainerConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ckpt, sub, att) = five_node();
        let out = train_explainer(&[sub], &ckpt, &[att], &cfg(0)).unwrap();
        let init = ExplainerParams::initialize(&cfg(0), 2, 3).unwrap();
        assert_eq!(out.params.enc_in(), init.enc_in());
        assert_eq!(out.params.masks(), init.masks());
        assert!(out.params.is_trained());
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn deterministic_and_decreasing() {
        let (ckpt, sub, att) = five_node();
        let subs = vec![sub; 2];
        let atts = vec![att; 2];
        let a = train_explainer(&subs, &ckpt, &atts, &cfg(60)).unwrap();
        let b = train_explainer(&subs, &ckpt, &atts, &cfg(60)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace.len(), 61);
        assert!(a.loss_trace[60] < a.loss_trace[0], "{:?}", a.loss_trace);

        let sgd = ExplainerConfig { optimizer: Optimizer::Sgd, learning_rate: 0.05, ..cfg(60) };
        let s = train_explainer(&subs, &ckpt, &atts, &sgd).unwrap();
        assert!(s.loss_trace[60] < s.loss_trace[0]);
    }

    #[test]
    fn input_errors() {
        let (ckpt, sub, att) = five_node();
        assert!(matches!(train_explainer(&[], &ckpt, &[], &cfg(1)), Err(Error::Config(_))));
        assert!(matches!(train_explainer(std::slice::from_ref(&sub), &ckpt, &[], &cfg(1)), Err(Error::Config(_))));
        let huge = ExplainerConfig { optimizer: Optimizer::Sgd, learning_rate: 1e300, ..cfg(3) };
        assert!(matches!(train_explainer(&[sub], &ckpt, &[att], &huge), Err(Error::Training { .. })));
    }
}
