use serde::{Deserialize, Serialize};

use crate::compute::{ParameterStore, Tensor};
use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    /// `w ← w − lr · g`.
    Sgd,
    /// Zeiler's adaptive rule; the step is additionally scaled by `lr`.
    Adadelta { rho: f64, eps: f64 },
}

impl Optimizer {
    pub fn adadelta() -> Self {
        Optimizer::Adadelta { rho: 0.95, eps: 1e-6 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adadelta { .. } => "adadelta",
        }
    }

    pub fn parse(s: &str) -> Result<Optimizer, ModelError> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adadelta" => Ok(Optimizer::adadelta()),
            _ => Err(ModelError::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Per-parameter optimizer accumulators, kept in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Tensor>,
    pub sq_step: Vec<Tensor>,
}

pub const STATE_PREFIX: &str = "__opt";

impl OptimizerState {
    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, opt: Optimizer, store: &mut ParameterStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        match opt {
            Optimizer::Sgd => {
                for id in ids {
                    let g = store.grad(id).clone();
                    for (w, d) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adadelta { rho, eps } => {
                if self.sq_grad.len() != ids.len() {
                    self.sq_grad = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
                    self.sq_step = self.sq_grad.clone();
                }
                for (k, id) in ids.into_iter().enumerate() {
                    let g = store.grad(id).clone();
                    let eg = self.sq_grad[k].data_mut();
                    let ed = self.sq_step[k].data_mut();
                    let w = store.value_mut(id).data_mut();
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                        let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
                        ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
                        w[i] += lr * delta;
                    }
                }
            }
        }
    }

    /// Appends the accumulators to `out` under reserved names.
    pub fn export(&self, params: &ParameterStore, out: &mut ParameterStore) -> Result<(), ModelError> {
        for (k, id) in params.ids().enumerate().take(self.sq_grad.len()) {
            let name = params.name(id);
            out.insert(&format!("{STATE_PREFIX}.g.{name}"), self.sq_grad[k].clone())?;
            out.insert(&format!("{STATE_PREFIX}.d.{name}"), self.sq_step[k].clone())?;
        }
        Ok(())
    }

    /// Recovers accumulators for `params` from a checkpoint store.
    pub fn import(params: &ParameterStore, saved: &ParameterStore) -> OptimizerState {
        let mut st = OptimizerState::default();
        for id in params.ids() {
            let name = params.name(id);
            match (saved.get(&format!("{STATE_PREFIX}.g.{name}")), saved.get(&format!("{STATE_PREFIX}.d.{name}"))) {
                (Ok(g), Ok(d)) => {
                    st.sq_grad.push(g.clone());
                    st.sq_step.push(d.clone());
                }
                _ => return OptimizerState::default(),
            }
        }
        st
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut store = ParameterStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&[0.5, -1.0]);
        OptimizerState::default().step(Optimizer::Sgd, &mut store, 0.1);
        assert_eq!(store.value(id).data(), &[0.95, 2.1]);
    }

    #[test]
    fn adadelta_first_step_matches_formula() {
        let mut store = ParameterStore::new();
        let id = store.insert("w", Tensor::vector(vec![0.0])).unwrap();
        store.grad_mut(id).data_mut()[0] = 2.0;
        let mut st = OptimizerState::default();
        st.step(Optimizer::adadelta(), &mut store, 1.0);
        // E[g²] = 0.05·4 = 0.2, Δ = −sqrt(1e-6)/sqrt(0.2 + 1e-6)·2
        let want = -(1e-6f64).sqrt() / (0.2f64 + 1e-6).sqrt() * 2.0;
        assert!((store.value(id).data()[0] - want).abs() < 1e-15);

        let mut ck = ParameterStore::new();
        st.export(&store, &mut ck).unwrap();
        assert_eq!(OptimizerState::import(&store, &ck), st);
    }
}
