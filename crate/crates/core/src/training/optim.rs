use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::ToyVlm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain SGD, no momentum.
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Applies gradient updates to named model tensors.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    moments: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// One update of every tensor named in `grads`.
    pub fn step(&mut self, model: &mut ToyVlm, grads: &HashMap<String, Tensor>) {
        self.t += 1;
        let (kind, lr, t) = (self.kind, self.lr, self.t);
        let moments = &mut self.moments;
        model.visit_mut(&mut |name, _, param| {
            let Some(g) = grads.get(name) else { return };
            let p = param.data_mut();
            match kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    });
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for (((w, &gi), m), v) in p.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * gi;
                        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        });
    }
}
