use crate::autodiff::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamax,
}

keyword_enum!(OptimizerKind {
    OptimizerKind::Sgd => "sgd",
    OptimizerKind::Adam => "adam",
    OptimizerKind::Adamax => "adamax",
});

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig { kind, learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradient accumulator indexed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        ParamGrads { grads: vec![None; store.len()] }
    }

    /// Adds `scale ·` every parameter gradient of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let slot = &mut self.grads[id.index()];
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => *slot = Some(if scale == 1.0 { g.clone() } else { g.map(|v| v * scale) }),
            }
        }
    }

    pub fn merge(&mut self, other: ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.grads[id.index()] = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// SGD, Adam or Adamax with per-parameter state. Parameters without a
/// gradient are skipped entirely, state included.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let stateful = config.kind != OptimizerKind::Sgd;
        Optimizer {
            config,
            steps: 0,
            first: if stateful { zeros() } else { Vec::new() },
            second: if stateful { zeros() } else { Vec::new() },
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let OptimizerConfig { kind, learning_rate: lr, beta1, beta2, eps } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let i = id.index();
            match kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
                    for (k, (w, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Adamax => {
                    let step = lr / (1.0 - beta1.powi(t));
                    let (m, u) = (self.first[i].data_mut(), self.second[i].data_mut());
                    for (k, (w, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        u[k] = (beta2 * u[k]).max(g.abs() + eps);
                        *w -= step * m[k] / u[k];
                    }
                }
            }
        }
        Ok(())
    }
}
