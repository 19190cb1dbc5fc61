//! Bi-level architecture search: weight training in the inner loop,
//! architecture updates from first-order or zeroth-order hypergradients,
//! annealed mixing, early stopping, and retraining of the result.

mod oracle;
mod trace;
mod zo;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use oracle::{exact_hypergradient_quadratic, quadratic_objective, QuadraticBilevel};
pub use trace::{early_stop_check, EpochRecord, SearchTrace, StopReason, TRACE_SCHEMA_VERSION};
pub use zo::{evaluate_outer, zo_hypergradient, LowerLevel, ZoParams};

use crate::data::{Batch, BatchStream, Cycler, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::{BnPolicy, ParamStore};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::simplex::AnnealSchedule;
use crate::supernet::{
    discretize, instantiate, AlphaParams, EdgeProbs, EdgeWeights, Genotype, Mixing, Network, SupernetConfig,
    NUM_EDGES, NUM_OPS,
};
use crate::tensor::{Elem, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "darts-1st")]
    Darts1st,
    #[serde(rename = "zo-darts")]
    ZoDarts,
    #[serde(rename = "zo-darts-plus")]
    ZoDartsPlus,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Darts1st, Algorithm::ZoDarts, Algorithm::ZoDartsPlus];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Darts1st => "darts-1st",
            Algorithm::ZoDarts => "zo-darts",
            Algorithm::ZoDartsPlus => "zo-darts-plus",
        }
    }

    pub fn is_zeroth_order(self) -> bool {
        !matches!(self, Algorithm::Darts1st)
    }

    /// Softmax for the first-order baseline, plain sparsemax for ZO-DARTS,
    /// annealed sparsemax for ZO-DARTS+.
    pub fn mixing(self, schedule: AnnealSchedule) -> Mixing {
        match self {
            Algorithm::Darts1st => Mixing::SoftmaxTau { tau: 1.0 },
            Algorithm::ZoDarts => Mixing::Sparsemax,
            Algorithm::ZoDartsPlus => Mixing::AnnealedSparsemax { schedule },
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Algorithm::ALL.into_iter().find(|a| a.name() == norm).ok_or_else(|| {
            let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            Error::param("algorithm", format!("unknown `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub enabled: bool,
    pub patience: usize,
    pub onehot_eps: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 3,
            onehot_eps: 1e-6,
        }
    }
}

/// Network shape not implied by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Skeleton {
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub num_stages: usize,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            cells_per_stage: 1,
            num_stages: 3,
        }
    }
}

impl Skeleton {
    pub fn network_config(&self, ds: &Dataset) -> SupernetConfig {
        SupernetConfig {
            stem_channels: self.stem_channels,
            cells_per_stage: self.cells_per_stage,
            num_stages: self.num_stages,
            num_classes: ds.num_classes(),
            image_channels: ds.channels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    /// Weight steps between architecture updates.
    pub inner_steps: usize,
    pub mu: f64,
    pub lr_w: f64,
    pub lr_w_min: f64,
    pub lr_alpha: f64,
    pub optimizer_w: OptimizerKind,
    pub optimizer_alpha: OptimizerKind,
    pub schedule: AnnealSchedule,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub zo_directions: usize,
    pub zo_adapt_steps: usize,
    pub batch_size: usize,
    pub alpha_init_scale: f64,
    pub skeleton: Skeleton,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::for_algorithm(Algorithm::ZoDartsPlus)
    }
}

impl SearchConfig {
    /// Defaults for `algorithm`. The first-order baseline alternates one
    /// architecture step with every weight step; only ZO-DARTS+ stops early.
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            epochs: 50,
            inner_steps: if algorithm.is_zeroth_order() { 10 } else { 1 },
            mu: 1e-3,
            lr_w: 0.025,
            lr_w_min: 1e-3,
            lr_alpha: 3e-4,
            optimizer_w: OptimizerKind::sgd_momentum(),
            optimizer_alpha: OptimizerKind::adam(),
            schedule: AnnealSchedule::default(),
            early_stop: EarlyStop {
                enabled: algorithm == Algorithm::ZoDartsPlus,
                ..EarlyStop::default()
            },
            seed: 0,
            zo_directions: 1,
            zo_adapt_steps: 1,
            batch_size: 64,
            alpha_init_scale: 1e-3,
            skeleton: Skeleton::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("inner_steps", self.inner_steps),
            ("patience", self.early_stop.patience),
            ("batch_size", self.batch_size),
            ("zo_directions", self.zo_directions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        for (name, v) in [("mu", self.mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_w_min", self.lr_w_min),
            ("lr_alpha", self.lr_alpha),
            ("alpha_init_scale", self.alpha_init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.early_stop.onehot_eps >= 0.0 && self.early_stop.onehot_eps < 1.0) {
            return Err(Error::param("onehot_eps", "must lie in [0, 1)"));
        }
        self.schedule.validate()
    }

    pub fn mixing(&self) -> Mixing {
        self.algorithm.mixing(self.schedule)
    }

    pub fn zo_params(&self) -> ZoParams {
        ZoParams {
            mu: self.mu,
            adapt_steps: self.zo_adapt_steps,
            directions: self.zo_directions,
        }
    }
}

/// Counters accumulated over a whole search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub inner_steps: usize,
    pub alpha_updates: usize,
    /// Tape nodes that differentiate through a simplex map.
    pub simplex_grad_nodes: usize,
    /// Outer-loss evaluations made by the zeroth-order estimator.
    pub outer_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub alpha: AlphaParams,
    pub trace: SearchTrace,
    pub stats: SearchStats,
    pub stop_reason: StopReason,
    pub stop_epoch: usize,
    /// Wall time of the search loop in seconds.
    pub elapsed_s: f64,
}

pub fn search(config: &SearchConfig, dataset: &Dataset) -> Result<SearchOutcome> {
    search_with(config, dataset, |_| Ok(()))
}

/// Runs the search, handing each epoch record to `on_epoch` as soon as it is
/// complete so a caller can persist the trace incrementally.
pub fn search_with(
    config: &SearchConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    config.validate()?;
    let norm = Normalization::from_train(dataset)?;
    let train = BatchStream::new(dataset, Split::Train, config.batch_size, true, config.seed, norm.clone())?;
    let val_stream = BatchStream::new(
        dataset,
        Split::Val,
        config.batch_size,
        true,
        config.seed.wrapping_add(1),
        norm.clone(),
    )?;
    let val_eval = BatchStream::new(dataset, Split::Val, config.batch_size, false, 0, norm)?;
    let mixing = config.mixing();
    let mut net = Network::supernet(&config.skeleton.network_config(dataset), config.seed)?;
    let mut alpha_rng = ChaCha8Rng::seed_from_u64(config.seed);
    alpha_rng.set_stream(1);
    let mut alpha = AlphaParams::random(&mut alpha_rng, config.alpha_init_scale);
    let mut zo_rng = ChaCha8Rng::seed_from_u64(config.seed);
    zo_rng.set_stream(2);
    let mut w_opt = Optimizer::new(config.optimizer_w, config.lr_w);
    let mut a_opt = Optimizer::new(config.optimizer_alpha, config.lr_alpha);
    let mut val = Cycler::new(val_stream);
    let mut stats = SearchStats::default();
    let mut trace = SearchTrace::new();

    let start = Instant::now();
    let mut last_elapsed = 0.0;
    for epoch in 0..config.epochs {
        let at = |e: Error| at_epoch(e, epoch);
        let lr = cosine_lr(config.lr_w, config.lr_w_min, epoch, config.epochs);
        w_opt.set_lr(lr);
        let mut probs = mixing.probabilities(&alpha, epoch)?;
        let (mut loss_sum, mut seen) = (0.0, 0);
        let (steps_before, updates_before) = (stats.inner_steps, stats.alpha_updates);
        for batch in train.epoch(epoch) {
            let loss = weight_step(&mut net, &mut w_opt, &batch, EdgeWeights::Constant(&probs), BnPolicy::Train).map_err(at)?;
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
            stats.inner_steps += 1;
            if stats.inner_steps % config.inner_steps != 0 {
                continue;
            }
            let val_batch = val.next_batch();
            match config.algorithm {
                Algorithm::Darts1st => {
                    let step = first_order_alpha_step(&mut net, &mut alpha, &mut a_opt, &val_batch).map_err(at)?;
                    stats.simplex_grad_nodes += step.simplex_grad_nodes;
                }
                Algorithm::ZoDarts | Algorithm::ZoDartsPlus => {
                    let mut lower = SupernetLower {
                        net: &mut net,
                        opt: &mut w_opt,
                        mixing,
                        epoch,
                        train: &batch,
                        val: &val_batch,
                        evaluations: 0,
                    };
                    let g = zo_hypergradient(&mut lower, &alpha.to_flat(), &config.zo_params(), &mut zo_rng).map_err(at)?;
                    stats.outer_evaluations += lower.evaluations;
                    apply_alpha_gradient(&mut alpha, &mut a_opt, &g)?;
                }
            }
            if !alpha.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "architecture parameters became non-finite".into(),
                });
            }
            stats.alpha_updates += 1;
            probs = mixing.probabilities(&alpha, epoch)?;
        }

        let (val_loss, val_accuracy) = evaluate(&mut net, &val_eval, EdgeWeights::Constant(&probs), BnPolicy::BatchStats)
            .map_err(at)?;
        let mut elapsed = start.elapsed().as_secs_f64();
        if elapsed <= last_elapsed {
            elapsed = last_elapsed + 1e-9;
        }
        last_elapsed = elapsed;
        let probabilities = (0..NUM_EDGES)
            .map(|e| mixing.row(&alpha.row(e), epoch))
            .collect::<Result<Vec<_>>>()?;
        let mut record = EpochRecord {
            schema_version: TRACE_SCHEMA_VERSION,
            epoch,
            temperature: mixing.temperature(epoch),
            probabilities,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_accuracy,
            elapsed_s: elapsed,
            lr_w: lr,
            inner_steps: stats.inner_steps - steps_before,
            alpha_updates: stats.alpha_updates - updates_before,
            alpha: alpha.rows().to_vec(),
            stop_reason: None,
        };
        trace.push(record.clone());
        let stop = if config.early_stop.enabled
            && early_stop_check(trace.records(), config.early_stop.patience, config.early_stop.onehot_eps)
        {
            Some(StopReason::EarlyStop)
        } else if epoch + 1 == config.epochs {
            Some(StopReason::EpochLimit)
        } else {
            None
        };
        if let Some(reason) = stop {
            record.stop_reason = Some(reason);
            if let Some(last) = trace.last_mut() {
                last.stop_reason = Some(reason);
            }
        }
        on_epoch(&record)?;
        if let Some(reason) = stop {
            return Ok(SearchOutcome {
                genotype: discretize(&alpha),
                alpha,
                trace,
                stats,
                stop_reason: reason,
                stop_epoch: epoch,
                elapsed_s: elapsed,
            });
        }
    }
    unreachable!("the final epoch always sets a stop reason")
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
        other => other,
    }
}

fn non_finite(what: &str, value: f64) -> Error {
    Error::Diverged {
        epoch: 0,
        detail: format!("{what} is {value}; the learning rate is probably too high"),
    }
}

/// One optimizer step on the training loss with the given operation weights.
/// Returns the loss before the step.
pub fn weight_step(
    net: &mut Network,
    optimizer: &mut Optimizer,
    batch: &Batch,
    weights: EdgeWeights<'_>,
    bn: BnPolicy,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let logits = net.forward(&mut tape, x, weights, bn, true)?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(non_finite("training loss", value));
    }
    let grads = tape.backward(loss)?;
    let params = net.params_mut();
    params.clear_grad();
    params.accumulate(&grads)?;
    optimizer.step(params.tensors_mut());
    Ok(value)
}

/// Mean loss and number of correct predictions on one batch, parameters frozen.
pub fn batch_loss(net: &mut Network, batch: &Batch, weights: EdgeWeights<'_>, bn: BnPolicy) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let logits = net.forward(&mut tape, x, weights, bn, false)?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let value = tape.value(loss).item()? as f64;
    let k = tape.shape(logits)[1];
    let correct = tape
        .value(logits)
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .filter(|(row, &label)| argmax_elem(row) == label)
        .count();
    Ok((value, correct))
}

fn argmax_elem(row: &[Elem]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy over one pass of `stream`.
pub fn evaluate(net: &mut Network, stream: &BatchStream<'_>, weights: EdgeWeights<'_>, bn: BnPolicy) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut n) = (0.0, 0, 0);
    for batch in stream.epoch(0) {
        let (l, c) = batch_loss(net, &batch, weights, bn)?;
        loss += l * batch.labels.len() as f64;
        correct += c;
        n += batch.labels.len();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Result of a first-order architecture step.
#[derive(Clone, Debug)]
pub struct AlphaStep {
    pub val_loss: f64,
    pub gradient: Vec<f64>,
    pub simplex_grad_nodes: usize,
}

/// `∇_α L_val(w, α)` with `w` frozen and softmax mixing at unit temperature.
pub fn alpha_gradient(net: &mut Network, alpha: &mut AlphaParams, val: &Batch) -> Result<AlphaStep> {
    let mixing = Mixing::SoftmaxTau { tau: 1.0 };
    let probs = mixing.probabilities(alpha, 0)?;
    let mut tape = Tape::new();
    let a = tape.param(alpha.tensor_mut());
    let var = tape.row_softmax(a, 1.0)?;
    let x = tape.constant(val.images.clone());
    let logits = net.forward(
        &mut tape,
        x,
        EdgeWeights::Tracked { probs: &probs, var },
        BnPolicy::BatchStats,
        false,
    )?;
    let loss = tape.softmax_cross_entropy(logits, &val.labels)?;
    let val_loss = tape.value(loss).item()? as f64;
    if !val_loss.is_finite() {
        return Err(non_finite("validation loss", val_loss));
    }
    let grads = tape.backward(loss)?;
    let gradient = grads
        .get(a)
        .map(|g| g.iter().map(|&v| v as f64).collect())
        .unwrap_or_else(|| vec![0.0; NUM_EDGES * NUM_OPS]);
    Ok(AlphaStep {
        val_loss,
        gradient,
        simplex_grad_nodes: tape.simplex_grad_nodes(),
    })
}

/// One optimizer step on `∇_α L_val(w, α)`; the weights are not touched.
pub fn first_order_alpha_step(
    net: &mut Network,
    alpha: &mut AlphaParams,
    optimizer: &mut Optimizer,
    val: &Batch,
) -> Result<AlphaStep> {
    let step = alpha_gradient(net, alpha, val)?;
    apply_alpha_gradient(alpha, optimizer, &step.gradient)?;
    Ok(step)
}

fn apply_alpha_gradient(alpha: &mut AlphaParams, optimizer: &mut Optimizer, g: &[f64]) -> Result<()> {
    let t = alpha.tensor_mut();
    t.clear_grad();
    t.accumulate_grad(&g.iter().map(|&v| v as Elem).collect::<Vec<_>>())?;
    optimizer.step(alpha.as_params_mut());
    alpha.tensor_mut().clear_grad();
    Ok(())
}

/// The supernet weights as the inner problem of the zeroth-order estimator.
/// Adaptation steps and outer losses both use batch statistics, so running
/// statistics are never touched by an evaluation.
pub struct SupernetLower<'a> {
    pub net: &'a mut Network,
    pub opt: &'a mut Optimizer,
    pub mixing: Mixing,
    pub epoch: usize,
    pub train: &'a Batch,
    pub val: &'a Batch,
    pub evaluations: usize,
}

impl SupernetLower<'_> {
    fn probs(&self, alpha: &[f64]) -> Result<EdgeProbs> {
        let mut out = [[0.0; NUM_OPS]; NUM_EDGES];
        for (e, row) in out.iter_mut().enumerate() {
            let p = self.mixing.row(&alpha[e * NUM_OPS..(e + 1) * NUM_OPS], self.epoch)?;
            row.copy_from_slice(&p);
        }
        Ok(out)
    }
}

impl LowerLevel for SupernetLower<'_> {
    type Snapshot = (ParamStore, Optimizer);

    fn snapshot(&self) -> Self::Snapshot {
        (self.net.params().clone(), self.opt.clone())
    }

    fn restore(&mut self, (params, opt): Self::Snapshot) {
        self.net.set_params(params);
        *self.opt = opt;
    }

    fn adapt_step(&mut self, alpha: &[f64]) -> Result<()> {
        let probs = self.probs(alpha)?;
        weight_step(self.net, self.opt, self.train, EdgeWeights::Constant(&probs), BnPolicy::BatchStats).map(|_| ())
    }

    fn upper_loss(&mut self, alpha: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let probs = self.probs(alpha)?;
        batch_loss(self.net, self.val, EdgeWeights::Constant(&probs), BnPolicy::BatchStats).map(|(l, _)| l)
    }
}

/// Per-edge support sizes of a fixed `alpha` pushed through `mixing` at
/// epochs `0..epochs`.
pub fn replay_support_sizes(alpha: &AlphaParams, mixing: &Mixing, epochs: usize) -> Result<Vec<[usize; NUM_EDGES]>> {
    (0..epochs)
        .map(|n| {
            let probs = mixing.probabilities(alpha, n)?;
            Ok(std::array::from_fn(|e| probs[e].iter().filter(|&&p| p > 0.0).count()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub skeleton: Skeleton,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            lr_min: 0.0,
            optimizer: OptimizerKind::sgd_momentum(),
            seed: 0,
            skeleton: Skeleton::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub genotype: String,
    pub seed: u64,
    pub parameters: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the checkpoint with the best validation accuracy.
    pub test_accuracy: f64,
    pub history: Vec<RetrainEpoch>,
}

/// Trains a freshly initialised network for `genotype` from scratch and
/// reports test accuracy at its best validation checkpoint.
pub fn retrain(genotype: &Genotype, dataset: &Dataset, config: &RetrainConfig) -> Result<RetrainReport> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::param("epochs", "epochs and batch_size must be at least 1"));
    }
    let norm = Normalization::from_train(dataset)?;
    let train = BatchStream::new(dataset, Split::Train, config.batch_size, true, config.seed, norm.clone())?;
    let val = BatchStream::new(dataset, Split::Val, config.batch_size, false, 0, norm.clone())?;
    let test = BatchStream::new(dataset, Split::Test, config.batch_size, false, 0, norm)?;
    let mut net = instantiate(genotype, &config.skeleton.network_config(dataset), config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_lr(cosine_lr(config.lr, config.lr_min, epoch, config.epochs));
        let (mut loss_sum, mut seen) = (0.0, 0);
        for batch in train.epoch(epoch) {
            let loss = weight_step(&mut net, &mut opt, &batch, EdgeWeights::Single, BnPolicy::Train).map_err(|e| at_epoch(e, epoch))?;
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let (_, val_accuracy) = evaluate(&mut net, &val, EdgeWeights::Single, BnPolicy::Eval)?;
        history.push(RetrainEpoch {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, net.params().clone()));
        }
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    net.set_params(params);
    let (_, test_accuracy) = evaluate(&mut net, &test, EdgeWeights::Single, BnPolicy::Eval)?;
    Ok(RetrainReport {
        genotype: genotype.to_string(),
        seed: config.seed,
        parameters: net.num_parameters(),
        best_epoch,
        best_val_accuracy,
        test_accuracy,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::supernet::OpKind;

    fn tiny_dataset() -> Dataset {
        synth_blobs(120, 3, 8, 4).unwrap()
    }

    fn tiny_config(algorithm: Algorithm) -> SearchConfig {
        SearchConfig {
            epochs: 2,
            batch_size: 16,
            skeleton: Skeleton {
                stem_channels: 4,
                cells_per_stage: 1,
                num_stages: 2,
            },
            ..SearchConfig::for_algorithm(algorithm)
        }
    }

    fn val_batch(ds: &Dataset, n: usize) -> Batch {
        let norm = Normalization::from_train(ds).unwrap();
        let stream = BatchStream::new(ds, Split::Val, n, false, 0, norm).unwrap();
        let idx = &ds.split(Split::Val)[..n];
        stream.batch(idx)
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!("ZO_DARTS_PLUS".parse::<Algorithm>().unwrap(), Algorithm::ZoDartsPlus);
        let err = "enas".parse::<Algorithm>().unwrap_err().to_string();
        assert!(err.contains("darts-1st, zo-darts, zo-darts-plus"), "{err}");
    }

    #[test]
    fn config_bounds() {
        let mut c = SearchConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let c = SearchConfig { mu: 0.0, ..SearchConfig::default() };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            early_stop: EarlyStop { patience: 0, ..EarlyStop::default() },
            ..SearchConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig { inner_steps: 0, ..SearchConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn per_algorithm_defaults() {
        let d = SearchConfig::for_algorithm(Algorithm::Darts1st);
        assert_eq!((d.inner_steps, d.early_stop.enabled), (1, false));
        let z = SearchConfig::for_algorithm(Algorithm::ZoDarts);
        assert_eq!((z.inner_steps, z.early_stop.enabled), (10, false));
        let p = SearchConfig::for_algorithm(Algorithm::ZoDartsPlus);
        assert_eq!((p.inner_steps, p.early_stop.enabled), (10, true));
        assert_eq!(p.epochs, 50);
        assert_eq!(p.schedule, AnnealSchedule::default());
    }

    #[test]
    fn config_json_defaults_fill_missing_keys() {
        let c: SearchConfig = serde_json::from_str(r#"{"algorithm": "zo-darts", "epochs": 7}"#).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.schedule, AnnealSchedule::default());
        assert!(serde_json::from_str::<SearchConfig>(r#"{"epoch": 7}"#).is_err());
    }

    #[test]
    fn single_epoch_gives_single_record() {
        let ds = tiny_dataset();
        let cfg = SearchConfig { epochs: 1, ..tiny_config(Algorithm::ZoDartsPlus) };
        let out = search(&cfg, &ds).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.stop_reason, StopReason::EpochLimit);
        assert_eq!(out.trace.records()[0].stop_reason, Some(StopReason::EpochLimit));
    }

    #[test]
    fn alpha_updates_follow_inner_step_blocks() {
        let ds = tiny_dataset();
        for (alg, t) in [(Algorithm::ZoDarts, 4), (Algorithm::Darts1st, 1), (Algorithm::ZoDartsPlus, 3)] {
            let cfg = SearchConfig { inner_steps: t, epochs: 3, ..tiny_config(alg) };
            let out = search(&cfg, &ds).unwrap();
            assert_eq!(out.stats.alpha_updates, out.stats.inner_steps / t);
            let steps: usize = out.trace.records().iter().map(|r| r.inner_steps).sum();
            let updates: usize = out.trace.records().iter().map(|r| r.alpha_updates).sum();
            assert_eq!((steps, updates), (out.stats.inner_steps, out.stats.alpha_updates));
        }
    }

    #[test]
    fn zeroth_order_search_never_differentiates_the_simplex() {
        let ds = tiny_dataset();
        for alg in [Algorithm::ZoDarts, Algorithm::ZoDartsPlus] {
            let out = search(&tiny_config(alg), &ds).unwrap();
            assert_eq!(out.stats.simplex_grad_nodes, 0);
            assert_eq!(out.stats.outer_evaluations, 2 * out.stats.alpha_updates);
        }
        let out = search(&tiny_config(Algorithm::Darts1st), &ds).unwrap();
        assert_eq!(out.stats.simplex_grad_nodes, out.stats.alpha_updates);
        assert_eq!(out.stats.outer_evaluations, 0);
    }

    #[test]
    fn search_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Algorithm::ZoDartsPlus);
        let (a, b) = (search(&cfg, &ds).unwrap(), search(&cfg, &ds).unwrap());
        assert_eq!(a.genotype, b.genotype);
        assert_eq!(a.alpha, b.alpha);
        for (x, y) in a.trace.records().iter().zip(b.trace.records()) {
            assert_eq!(x.probabilities, y.probabilities);
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }

    #[test]
    fn zero_alpha_learning_rate_freezes_alpha() {
        let ds = tiny_dataset();
        for alg in Algorithm::ALL {
            let cfg = SearchConfig { lr_alpha: 0.0, ..tiny_config(alg) };
            let out = search(&cfg, &ds).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            assert_eq!(out.alpha, AlphaParams::random(&mut rng, cfg.alpha_init_scale), "{alg}");
        }
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Algorithm::Darts1st);
        let mut net = Network::supernet(&cfg.skeleton.network_config(&ds), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut alpha = AlphaParams::random(&mut rng, 0.5);
        let batch = val_batch(&ds, 8);
        let step = alpha_gradient(&mut net, &mut alpha, &batch).unwrap();
        assert_eq!(step.simplex_grad_nodes, 1);
        let softmax = Mixing::SoftmaxTau { tau: 1.0 };
        let mut loss_at = |flat: &[f64]| {
            let a = AlphaParams::from_flat(flat).unwrap();
            let p = softmax.probabilities(&a, 0).unwrap();
            batch_loss(&mut net, &batch, EdgeWeights::Constant(&p), BnPolicy::BatchStats).unwrap().0
        };
        let base = alpha.to_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            let a = step.gradient[i];
            assert!((a - fd).abs() / (a.abs() + 1e-8) < 1e-4 || (a - fd).abs() < 1e-9, "entry {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn small_alpha_step_descends_on_the_same_batch() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Algorithm::Darts1st);
        let mut net = Network::supernet(&cfg.skeleton.network_config(&ds), 1).unwrap();
        let mut alpha = AlphaParams::random(&mut ChaCha8Rng::seed_from_u64(2), 0.3);
        let batch = val_batch(&ds, 12);
        let before = alpha_gradient(&mut net, &mut alpha, &batch).unwrap().val_loss;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3);
        first_order_alpha_step(&mut net, &mut alpha, &mut opt, &batch).unwrap();
        let after = alpha_gradient(&mut net, &mut alpha, &batch).unwrap().val_loss;
        assert!(after <= before, "{after} > {before}");
        let mut zero = Optimizer::new(OptimizerKind::adam(), 0.0);
        let frozen = alpha.clone();
        first_order_alpha_step(&mut net, &mut alpha, &mut zero, &batch).unwrap();
        assert_eq!(alpha, frozen);
    }

    #[test]
    fn inner_steps_train_weights_only() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Algorithm::ZoDartsPlus);
        let mut net = Network::supernet(&cfg.skeleton.network_config(&ds), 0).unwrap();
        let alpha = AlphaParams::zeros();
        let probs = cfg.mixing().probabilities(&alpha, 0).unwrap();
        let norm = Normalization::from_train(&ds).unwrap();
        let stream = BatchStream::new(&ds, Split::Train, 84, false, 0, norm).unwrap();
        let batch = stream.epoch(0).next().unwrap();

        let mut still = Optimizer::new(cfg.optimizer_w, 0.0);
        let before = net.params().flat_values();
        weight_step(&mut net, &mut still, &batch, EdgeWeights::Constant(&probs), BnPolicy::BatchStats).unwrap();
        assert_eq!(net.params().flat_values(), before);

        let mut opt = Optimizer::new(cfg.optimizer_w, 0.05);
        let losses: Vec<f64> = (0..30)
            .map(|_| weight_step(&mut net, &mut opt, &batch, EdgeWeights::Constant(&probs), BnPolicy::Train).unwrap())
            .collect();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[25..].iter().sum();
        assert!(tail < 0.5 * head, "{losses:?}");
        assert!(alpha.tensor().grad().is_none());
    }

    #[test]
    fn zo_estimate_on_supernet_restores_weights() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Algorithm::ZoDartsPlus);
        let mut net = Network::supernet(&cfg.skeleton.network_config(&ds), 0).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer_w, 0.05);
        let batch = val_batch(&ds, 10);
        let before = net.params().clone();
        let mut lower = SupernetLower {
            net: &mut net,
            opt: &mut opt,
            mixing: cfg.mixing(),
            epoch: 0,
            train: &batch,
            val: &batch,
            evaluations: 0,
        };
        let alpha = AlphaParams::random(&mut ChaCha8Rng::seed_from_u64(1), 0.2).to_flat();
        let g = zo_hypergradient(&mut lower, &alpha, &cfg.zo_params(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(lower.evaluations, 2);
        assert!(g.iter().all(|v| v.is_finite()));
        assert_eq!(net.params(), &before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_alpha_replay_shrinks_support() {
        let alpha = AlphaParams::random(&mut ChaCha8Rng::seed_from_u64(5), 0.2);
        let sizes = replay_support_sizes(&alpha, &Algorithm::ZoDartsPlus.mixing(AnnealSchedule::default()), 50).unwrap();
        for w in sizes.windows(2) {
            for e in 0..NUM_EDGES {
                assert!(w[1][e] <= w[0][e]);
            }
        }
        assert!(sizes[49].iter().sum::<usize>() < sizes[0].iter().sum::<usize>());
    }

    #[test]
    fn retrain_all_zeroise_is_a_constant_predictor() {
        let ds = tiny_dataset();
        let cfg = RetrainConfig {
            epochs: 2,
            batch_size: 16,
            skeleton: tiny_config(Algorithm::ZoDarts).skeleton,
            ..RetrainConfig::default()
        };
        let report = retrain(&Genotype::uniform(OpKind::Zeroise), &ds, &cfg).unwrap();
        let test = ds.split(Split::Test);
        let rate = |c: u16| test.iter().filter(|&&i| ds.labels()[i] == c).count() as f64 / test.len() as f64;
        let rates: Vec<f64> = (0..3).map(rate).collect();
        assert!(rates.iter().any(|&r| (r - report.test_accuracy).abs() < 1e-12), "{rates:?} vs {}", report.test_accuracy);
        assert!(report.test_accuracy <= ds.majority_rate(Split::Test));
        assert_eq!(report.history.len(), 2);
    }

    #[test]
    fn retrain_conv_genotype_learns_blobs() {
        let ds = synth_blobs(400, 4, 8, 1).unwrap();
        let cfg = RetrainConfig {
            epochs: 6,
            batch_size: 32,
            skeleton: Skeleton {
                stem_channels: 4,
                cells_per_stage: 1,
                num_stages: 2,
            },
            ..RetrainConfig::default()
        };
        let report = retrain(&Genotype::uniform(OpKind::Conv3x3), &ds, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&report.test_accuracy));
        assert!(report.test_accuracy >= 0.95, "{report:?}");
    }
}
