//! Maps from real vectors onto the probability simplex.
//!
//! [`sparsemax`] is the Euclidean projection onto the simplex and returns
//! exact zeros outside its support. [`annealed_sparsemax`] divides the input
//! by a temperature that shrinks geometrically every `interval` epochs, so a
//! fixed input is pushed towards a one-hot output as training proceeds. The
//! annealed objective is read as a projection (an argmin over the simplex of
//! the squared distance), the same problem [`sparsemax`] solves.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`SimplexVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Validation("simplex vector is empty".into()));
        }
        if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("simplex component {v} is not a finite non-negative value")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Validation(format!("simplex components sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Indices with non-zero probability.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect()
    }

    /// Index of the largest component; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Deref for SimplexVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl IntoIterator for SimplexVector {
    type Item = f64;
    type IntoIter = std::vec::IntoIter<f64>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Lowest index of the maximum; NaN-free input assumed.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_input(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::Validation("input vector is empty".into()));
    }
    if let Some(i) = alpha.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("component {i} is {}", alpha[i])));
    }
    Ok(())
}

/// Softmax of `alpha / tau`.
pub fn softmax_tau(alpha: &[f64], tau: f64) -> Result<SimplexVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", format!("must be positive and finite, got {tau}")));
    }
    if let Some(i) = alpha.iter().position(|v| v.is_nan()) {
        return Err(Error::Validation(format!("component {i} is NaN")));
    }
    if alpha.is_empty() {
        return Err(Error::Validation("input vector is empty".into()));
    }
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = alpha.iter().map(|a| ((a - m) / tau).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(SimplexVector(p))
}

/// Projection result with the support chosen by the threshold rule.
struct Projection {
    p: Vec<f64>,
    in_support: Vec<bool>,
}

fn project(z: &[f64]) -> Projection {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable: equal values keep index order
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut k_star = 0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += z[i];
        if 1.0 + (k + 1) as f64 * z[i] > cumsum {
            k_star = k + 1;
            support_sum = cumsum;
        }
    }
    // k = 1 always satisfies the rule, so the support is never empty.
    let theta = (support_sum - 1.0) / k_star as f64;
    let mut p = vec![0.0; z.len()];
    let mut in_support = vec![false; z.len()];
    for &i in &order[..k_star] {
        p[i] = (z[i] - theta).max(0.0);
        in_support[i] = true;
    }
    Projection { p, in_support }
}

/// Euclidean projection of `alpha` onto the simplex.
pub fn sparsemax(alpha: &[f64]) -> Result<SimplexVector> {
    check_input(alpha)?;
    Ok(SimplexVector(project(alpha).p))
}

/// `J·v` for the Jacobian `J` of [`sparsemax`] at `alpha`.
///
/// On the support `S` the Jacobian is `I − 11ᵀ/|S|`; elsewhere it is zero.
/// At a support boundary the support selected by the threshold rule is used.
pub fn sparsemax_jacobian_vec(alpha: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_input(alpha)?;
    if v.len() != alpha.len() {
        return Err(Error::dim(
            "sparsemax_jacobian_vec",
            "v",
            format!("alpha has {} components, v has {}", alpha.len(), v.len()),
        ));
    }
    let proj = project(alpha);
    let size = proj.in_support.iter().filter(|&&s| s).count() as f64;
    let mean = v
        .iter()
        .zip(&proj.in_support)
        .filter(|(_, &s)| s)
        .map(|(x, _)| x)
        .sum::<f64>()
        / size;
    Ok(v
        .iter()
        .zip(&proj.in_support)
        .map(|(x, &s)| if s { x - mean } else { 0.0 })
        .collect())
}

/// Geometric temperature decay: `tau0 · factor^(epoch // interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.5,
            factor: 0.75,
            interval: 5,
        }
    }
}

impl AnnealSchedule {
    pub fn new(tau0: f64, factor: f64, interval: usize) -> Result<Self> {
        let s = Self {
            tau0,
            factor,
            interval,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return Err(Error::param("tau0", format!("must be positive, got {}", self.tau0)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::param("factor", format!("must lie in (0, 1], got {}", self.factor)));
        }
        if self.interval == 0 {
            return Err(Error::param("interval", "must be at least 1"));
        }
        Ok(())
    }

    pub fn temperature_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.interval) as i32;
        self.tau0 * self.factor.powi(steps)
    }
}

/// `sparsemax(alpha / schedule.temperature_at(epoch))`.
pub fn annealed_sparsemax(alpha: &[f64], schedule: &AnnealSchedule, epoch: usize) -> Result<SimplexVector> {
    check_input(alpha)?;
    schedule.validate()?;
    let t = schedule.temperature_at(epoch);
    let scaled: Vec<f64> = alpha.iter().map(|a| a / t).collect();
    sparsemax(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Closed-form projection of a 2-vector onto the 1-simplex.
    fn project_2d(z: [f64; 2]) -> [f64; 2] {
        let p1 = ((1.0 + z[0] - z[1]) / 2.0).clamp(0.0, 1.0);
        [p1, 1.0 - p1]
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax_tau(&[1.0, 1.0, 1.0], 0.3).unwrap(), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(
            &softmax_tau(&[2f64.ln(), 0.0], 1.0).unwrap(),
            &[2.0 / 3.0, 1.0 / 3.0],
            1e-15
        ));
        let sharp = softmax_tau(&[1.0, 0.0], 0.01).unwrap();
        // 1 - 1e-20 rounds to 1.0 in f64, so check the complement directly
        assert!(sharp[1] < 1e-20);
        assert!(sharp[1] > 0.0);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax_tau(&[1.0], 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(softmax_tau(&[1.0], -1.0), Err(Error::Parameter { .. })));
        assert!(matches!(softmax_tau(&[f64::NAN, 1.0], 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn sparsemax_examples() {
        assert!(close(&sparsemax(&[1.0; 5]).unwrap(), &[0.2; 5], 1e-15));
        let want = project_2d([0.5, 0.0]);
        assert_eq!(want, [0.75, 0.25]);
        assert!(close(&sparsemax(&[0.5, 0.0]).unwrap(), &want, 1e-15));
        let want = project_2d([2.0, 0.0]);
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap().into_vec(), want.to_vec());
        assert_eq!(want, [1.0, 0.0]);
    }

    #[test]
    fn sparsemax_rejects_non_finite() {
        assert!(matches!(sparsemax(&[f64::NAN, 0.0]), Err(Error::Validation(_))));
        assert!(matches!(sparsemax(&[f64::INFINITY, 0.0]), Err(Error::Validation(_))));
        assert!(sparsemax(&[]).is_err());
    }

    #[test]
    fn tied_components_enter_support_together() {
        let p = sparsemax(&[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.into_vec(), vec![0.5, 0.5, 0.0]);
        // exactly on the threshold boundary: z = [1, 0, 0] puts 0-valued
        // entries at p = 0 and outside the support
        let p = sparsemax(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.into_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn schedule_temperatures() {
        let s = AnnealSchedule::default();
        assert_eq!(s.temperature_at(0), 1.5);
        assert_eq!(s.temperature_at(4), 1.5);
        assert_eq!(s.temperature_at(5), 1.125);
        assert_eq!(s.temperature_at(12), 0.84375);
        assert!(AnnealSchedule::new(0.0, 0.5, 1).is_err());
        assert!(AnnealSchedule::new(1.0, 1.5, 1).is_err());
        assert!(AnnealSchedule::new(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn annealing_saturates_small_gap() {
        let s = AnnealSchedule::default();
        // temperature < 0.5 makes the scaled gap exceed 1
        let epoch = (0..).find(|&n| s.temperature_at(n) < 0.5).unwrap();
        let scaled = 0.5 / s.temperature_at(epoch);
        assert_eq!(project_2d([scaled, 0.0]), [1.0, 0.0]);
        assert_eq!(annealed_sparsemax(&[0.5, 0.0], &s, epoch).unwrap().into_vec(), vec![1.0, 0.0]);
        for n in [0, 3, 7, 40, 100] {
            assert!(close(&annealed_sparsemax(&[0.3; 5], &s, n).unwrap(), &[0.2; 5], 1e-12));
        }
    }

    #[test]
    fn jacobian_examples() {
        let jv = sparsemax_jacobian_vec(&[0.1, 0.2, 0.0, 0.15, 0.05], &[1.0; 5]).unwrap();
        assert!(jv.iter().all(|v| v.abs() < 1e-15));
        let jv = sparsemax_jacobian_vec(&[5.0, 0.0, 0.1], &[0.3, -2.0, 1.0]).unwrap();
        assert_eq!(jv, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn jacobian_matches_central_difference() {
        // Fixed pseudo-random inputs; skip points near a support change.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let alpha: Vec<f64> = (0..5).map(|_| next()).collect();
            let v: Vec<f64> = (0..5).map(|_| next()).collect();
            let p = sparsemax(&alpha).unwrap();
            let theta = alpha
                .iter()
                .zip(p.iter())
                .find(|(_, &pi)| pi > 0.0)
                .map(|(a, pi)| a - pi)
                .unwrap();
            let margin = alpha.iter().map(|a| (a - theta).abs()).fold(f64::INFINITY, f64::min);
            if margin < 1e-3 {
                continue;
            }
            let plus: Vec<f64> = alpha.iter().zip(&v).map(|(a, d)| a + h * d).collect();
            let minus: Vec<f64> = alpha.iter().zip(&v).map(|(a, d)| a - h * d).collect();
            let (pp, pm) = (sparsemax(&plus).unwrap(), sparsemax(&minus).unwrap());
            let fd: Vec<f64> = pp.iter().zip(pm.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let jv = sparsemax_jacobian_vec(&alpha, &v).unwrap();
            assert!(close(&jv, &fd, 1e-5), "{jv:?} vs {fd:?}");
            checked += 1;
        }
    }

    fn finite_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, k)
    }

    proptest! {
        #[test]
        fn outputs_lie_on_simplex(alpha in finite_vec(5), tau in 0.01f64..10.0) {
            let p = sparsemax(&alpha).unwrap();
            prop_assert!(SimplexVector::new(p.into_vec()).is_ok());
            let q = softmax_tau(&alpha, tau).unwrap();
            prop_assert!(q.iter().all(|&v| v >= 0.0));
            prop_assert!(SimplexVector::new(q.into_vec()).is_ok());
        }

        #[test]
        fn shift_invariance(alpha in finite_vec(5), c in -3.0f64..3.0) {
            let shifted: Vec<f64> = alpha.iter().map(|a| a + c).collect();
            let (p, q) = (sparsemax(&alpha).unwrap(), sparsemax(&shifted).unwrap());
            prop_assert!(close(&p, &q, 1e-12));
        }

        #[test]
        fn support_shrinks_under_scaling(alpha in finite_vec(5), c in 1.0f64..20.0) {
            let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();
            let base = sparsemax(&alpha).unwrap().support();
            let sharp = sparsemax(&scaled).unwrap().support();
            prop_assert!(sharp.iter().all(|i| base.contains(i)));
        }

        #[test]
        fn argmax_preserved(alpha in finite_vec(5)) {
            let i = argmax(&alpha);
            let unique = alpha.iter().enumerate().all(|(j, &a)| j == i || a < alpha[i]);
            prop_assume!(unique);
            prop_assert_eq!(sparsemax(&alpha).unwrap().argmax(), i);
        }
    }
}
