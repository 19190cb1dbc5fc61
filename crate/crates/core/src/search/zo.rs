//! Zeroth-order hypergradient estimation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// The inner problem of a bi-level objective, seen through function values only.
pub trait LowerLevel {
    type Snapshot;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);

    /// One optimizer step on the inner loss with the outer variables fixed at `alpha`.
    fn adapt_step(&mut self, alpha: &[f64]) -> Result<()>;

    /// Outer loss at the current inner state.
    fn upper_loss(&mut self, alpha: &[f64]) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoParams {
    /// Smoothing radius.
    pub mu: f64,
    /// Inner adaptation steps per function evaluation; 0 keeps the inner state frozen.
    pub adapt_steps: usize,
    /// Random directions averaged per estimate.
    pub directions: usize,
}

impl ZoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::param("mu", format!("must be positive, got {}", self.mu)));
        }
        if self.directions == 0 {
            return Err(Error::param("zo_directions", "must be at least 1"));
        }
        Ok(())
    }
}

/// `F̂(alpha)`: adapt the inner state from its current value, read the outer
/// loss, then put the inner state back.
pub fn evaluate_outer<L: LowerLevel>(lower: &mut L, alpha: &[f64], adapt_steps: usize) -> Result<f64> {
    let saved = lower.snapshot();
    let value = (|| {
        for _ in 0..adapt_steps {
            lower.adapt_step(alpha)?;
        }
        lower.upper_loss(alpha)
    })();
    lower.restore(saved);
    let value = value?;
    if !value.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: format!("outer loss evaluated to {value}"),
        });
    }
    Ok(value)
}

/// Averages `(F̂(α + μu) − F̂(α)) / μ · u` over standard normal directions `u`.
pub fn zo_hypergradient<L: LowerLevel>(
    lower: &mut L,
    alpha: &[f64],
    params: &ZoParams,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    params.validate()?;
    let base = evaluate_outer(lower, alpha, params.adapt_steps)?;
    let mut grad = vec![0.0; alpha.len()];
    let mut shifted = vec![0.0; alpha.len()];
    let mut u = vec![0.0; alpha.len()];
    for _ in 0..params.directions {
        for ((s, ui), a) in shifted.iter_mut().zip(u.iter_mut()).zip(alpha) {
            *ui = StandardNormal.sample(rng);
            *s = a + params.mu * *ui;
        }
        let value = evaluate_outer(lower, &shifted, params.adapt_steps)?;
        let coef = (value - base) / params.mu / params.directions as f64;
        grad.iter_mut().zip(&u).for_each(|(g, ui)| *g += coef * ui);
    }
    Ok(grad)
}
