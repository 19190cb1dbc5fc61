//! Parameter storage and the small set of layers the search space is built from.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::tensor::{BatchNormMode, Elem, Gradients, RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// Trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.params.push(t.with_requires_grad(true));
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, channels: usize) -> StatsId {
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers every parameter on `tape`. Frozen bindings record constants,
    /// so no gradient can flow into the store.
    pub fn bind(&mut self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter_mut()
                .map(|p| {
                    if trainable {
                        tape.param(p)
                    } else {
                        p.set_tape_id(None);
                        tape.constant(Tensor::from_parts(p.shape().to_vec(), p.data().to_vec()))
                    }
                })
                .collect(),
        )
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for p in &mut self.params {
            grads.accumulate_into(p)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Drops every gradient buffer, so parameters the next backward pass
    /// does not reach are skipped by the optimizer.
    pub fn clear_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn has_nonzero_grad(&self) -> bool {
        self.params
            .iter()
            .any(|p| p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
    }

    /// Flattened copy of all parameter values, in registration order.
    pub fn flat_values(&self) -> Vec<Elem> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

/// How batch-norm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPolicy {
    /// Batch statistics, folded into the running statistics.
    Train,
    /// Batch statistics, running statistics left untouched.
    BatchStats,
    /// Stored running statistics.
    Eval,
}

/// Everything a layer needs to record itself on a tape.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub stats: &'a mut ParamStore,
    pub bn: BnPolicy,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.var(gamma), self.var(beta));
        let mode = match self.bn {
            BnPolicy::Train => BatchNormMode::Train {
                running: Some(self.stats.stats_mut(stats)),
            },
            BnPolicy::BatchStats => BatchNormMode::Train { running: None },
            BnPolicy::Eval => BatchNormMode::Eval(self.stats.stats(stats)),
        };
        self.tape.batch_norm2d(x, g, b, mode)
    }
}

/// Kaiming-normal initialised `[out, in, k, k]` convolution weight.
pub fn conv_weight(rng: &mut impl Rng, out: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out * cin * k * k).map(|_| normal.sample(rng) as Elem).collect();
    Tensor::from_parts(vec![out, cin, k, k], data)
}

pub fn linear_weight(rng: &mut impl Rng, out: usize, fin: usize) -> Tensor {
    let bound = 1.0 / (fin as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let data = (0..out * fin).map(|_| uniform.sample(rng) as Elem).collect();
    Tensor::from_parts(vec![out, fin], data)
}

/// Optional ReLU, then convolution, then batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub stride: usize,
    pub padding: usize,
    pub relu_first: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu_first: bool,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.conv"), conv_weight(rng, cout, cin, kernel)),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout])),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
            stats: store.add_stats(cout),
            stride,
            padding: kernel / 2,
            relu_first,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x = if self.relu_first { ctx.tape.relu(x) } else { x };
        let w = ctx.var(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, self.padding)?;
        ctx.batch_norm(y, self.gamma, self.beta, self.stats)
    }

    /// Copies weights and running statistics from `other` (same shapes).
    pub fn copy_from(&self, dst: &mut ParamStore, other: &ConvBn, src: &ParamStore) {
        for (d, s) in [
            (self.weight, other.weight),
            (self.gamma, other.gamma),
            (self.beta, other.beta),
        ] {
            dst.get_mut(d).data_mut().copy_from_slice(src.get(s).data());
        }
        *dst.stats_mut(self.stats) = src.stats(other.stats).clone();
    }
}
