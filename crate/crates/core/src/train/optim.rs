use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numerics::Scalar;

use super::model::{Gradients, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::argument(format!("unknown optimizer '{other}'"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Applies gradient steps to the trainable parameter groups of a model.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            lr: T::lit(learning_rate),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update. Frozen groups are skipped entirely, so their bits never
    /// change. Avg-k gates are re-derived afterwards when keys moved.
    pub fn step(&mut self, model: &mut ToyModel<T>, grads: &Gradients<T>) {
        self.step += 1;
        let trainable = model.trainable;
        let gslices = grads.slices();
        if self.m.is_empty() {
            self.m = gslices
                .iter()
                .map(|(_, g)| vec![T::zero(); g.len()])
                .collect();
            self.v = self.m.clone();
        }
        let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPS));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        for (idx, ((group, p), (_, g))) in model
            .param_slices_mut()
            .into_iter()
            .zip(&gslices)
            .enumerate()
        {
            if !trainable.allows(group) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.iter_mut().zip(g.iter()) {
                        *w = *w - self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for i in 0..p.len() {
                        let gv = g[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gv;
                        v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] = p[i] - self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if trainable.ffn {
            model.retie_gates();
        }
    }
}
