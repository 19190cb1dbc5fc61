//! First-order optimizers over tensors with accumulated gradients.

use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
        weight_decay: f64,
    },
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum {
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for a fixed list of tensors; slot `i` always refers to
/// the `i`-th tensor passed to [`Optimizer::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Vec<Elem>>,
    second: Vec<Vec<Elem>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every tensor that holds a gradient.
    pub fn step(&mut self, params: &mut [Tensor]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.steps += 1;
        let lr = self.lr as Elem;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[Elem]>::to_vec) else { continue };
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    data.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
                }
                OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                    let (mu, wd) = (momentum as Elem, weight_decay as Elem);
                    for ((w, g), v) in data.iter_mut().zip(&grad).zip(self.first[i].iter_mut()) {
                        let d = g + wd * *w;
                        *v = mu * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, weight_decay } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (b1, b2, wd) = (beta1 as Elem, beta2 as Elem, weight_decay as Elem);
                    for (((w, g), m), v) in data
                        .iter_mut()
                        .zip(&grad)
                        .zip(self.first[i].iter_mut())
                        .zip(self.second[i].iter_mut())
                    {
                        let d = g + wd * *w;
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        let mhat = *m as f64 / c1;
                        let vhat = *v as f64 / c2;
                        *w -= (self.lr * mhat / (vhat.sqrt() + ADAM_EPS)) as Elem;
                    }
                }
            }
        }
    }
}

/// Cosine decay from `base` at epoch 0 to `min` at epoch `total`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}
