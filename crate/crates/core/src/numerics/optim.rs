use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

/// Serializable optimizer state. Moment buffers follow the parameter order
/// of the store they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    #[serde(skip)]
    pub first_moments: Vec<Vec<f64>>,
    #[serde(skip)]
    pub second_moments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            state: OptimizerState {
                kind,
                learning_rate,
                beta1: 0.9,
                beta2: 0.998,
                epsilon: 1e-9,
                step: 0,
                first_moments: Vec::new(),
                second_moments: Vec::new(),
            },
        }
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self { state }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.state.kind
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.state.learning_rate = lr;
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(NumericsError::MissingGrad(p.name.clone()));
        }
        let s = &mut self.state;
        s.step += 1;
        let lr = s.learning_rate;
        match s.kind {
            OptimizerKind::Sgd => {
                for p in store.iter_mut() {
                    let g = p.grad.take().unwrap();
                    for (v, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if s.first_moments.len() != store.len() {
                    s.first_moments = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
                    s.second_moments = s.first_moments.clone();
                }
                let t = s.step as i32;
                let c1 = 1.0 - s.beta1.powi(t);
                let c2 = 1.0 - s.beta2.powi(t);
                for ((p, m), v) in store.iter_mut().zip(&mut s.first_moments).zip(&mut s.second_moments) {
                    let g = p.grad.take().unwrap();
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
                        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr * mhat / (vhat.sqrt() + s.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
