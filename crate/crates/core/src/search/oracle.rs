//! A bi-level quadratic with a closed-form hypergradient.
//!
//! Inner loss `½||w − Aα||²` (so `w*(α) = Aα` and the inner Hessian is the
//! identity); outer loss `½||w − b||² + ½||α||²`.

use super::zo::LowerLevel;
use crate::error::{Error, Result};

fn check(a: &[Vec<f64>], b: &[f64], alpha: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("quadratic_bilevel", "A rows vs b", format!("{} vs {}", a.len(), b.len())));
    }
    if let Some(r) = a.iter().find(|r| r.len() != alpha.len()) {
        return Err(Error::dim(
            "quadratic_bilevel",
            "A columns vs alpha",
            format!("{} vs {}", r.len(), alpha.len()),
        ));
    }
    Ok(())
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// `Aᵀ(Aα − b) + α`.
pub fn exact_hypergradient_quadratic(a: &[Vec<f64>], b: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    check(a, b, alpha)?;
    let r: Vec<f64> = mat_vec(a, alpha).iter().zip(b).map(|(x, y)| x - y).collect();
    Ok((0..alpha.len())
        .map(|j| a.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum::<f64>() + alpha[j])
        .collect())
}

/// `F(α) = ½||Aα − b||² + ½||α||²`, the outer loss at the inner optimum.
pub fn quadratic_objective(a: &[Vec<f64>], b: &[f64], alpha: &[f64]) -> Result<f64> {
    check(a, b, alpha)?;
    let r: f64 = mat_vec(a, alpha).iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(0.5 * r + 0.5 * alpha.iter().map(|v| v * v).sum::<f64>())
}

/// The quadratic problem as a [`LowerLevel`] with gradient-descent inner steps.
#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub inner_lr: f64,
}

impl QuadraticBilevel {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, inner_lr: f64) -> Result<Self> {
        let cols = a.first().map_or(0, Vec::len);
        check(&a, &b, &vec![0.0; cols])?;
        Ok(Self {
            w: vec![0.0; b.len()],
            a,
            b,
            inner_lr,
        })
    }
}

impl LowerLevel for QuadraticBilevel {
    type Snapshot = Vec<f64>;

    fn snapshot(&self) -> Vec<f64> {
        self.w.clone()
    }

    fn restore(&mut self, snapshot: Vec<f64>) {
        self.w = snapshot;
    }

    fn adapt_step(&mut self, alpha: &[f64]) -> Result<()> {
        check(&self.a, &self.b, alpha)?;
        let target = mat_vec(&self.a, alpha);
        for (w, t) in self.w.iter_mut().zip(target) {
            *w -= self.inner_lr * (*w - t);
        }
        Ok(())
    }

    fn upper_loss(&mut self, alpha: &[f64]) -> Result<f64> {
        let r: f64 = self.w.iter().zip(&self.b).map(|(w, b)| (w - b).powi(2)).sum();
        Ok(0.5 * r + 0.5 * alpha.iter().map(|v| v * v).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::zo::evaluate_outer;

    #[test]
    fn identity_example() {
        assert_eq!(exact_hypergradient_quadratic(&[vec![1.0]], &[0.0], &[1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn origin_is_stationary_when_b_is_zero() {
        let a = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]];
        let g = exact_hypergradient_quadratic(&a, &[0.0; 3], &[0.0; 2]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_central_differences() {
        let a = vec![vec![0.4, -1.2, 0.3], vec![1.1, 0.2, -0.7], vec![-0.5, 0.9, 0.6], vec![0.05, 0.3, -1.4]];
        let b = [0.3, -0.8, 1.2, 0.1];
        let alpha = [0.7, -0.2, 0.45];
        let g = exact_hypergradient_quadratic(&a, &b, &alpha).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let (mut p, mut m) = (alpha, alpha);
            p[j] += h;
            m[j] -= h;
            let fd = (quadratic_objective(&a, &b, &p).unwrap() - quadratic_objective(&a, &b, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8, "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn one_unit_step_reaches_inner_optimum() {
        let a = vec![vec![1.0, 2.0], vec![0.5, -1.0]];
        let mut q = QuadraticBilevel::new(a.clone(), vec![0.2, 0.1], 1.0).unwrap();
        q.w = vec![5.0, -3.0];
        let alpha = [0.3, -0.6];
        let f = evaluate_outer(&mut q, &alpha, 1).unwrap();
        assert!((f - quadratic_objective(&a, &[0.2, 0.1], &alpha).unwrap()).abs() < 1e-14);
        assert_eq!(q.w, vec![5.0, -3.0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            exact_hypergradient_quadratic(&[vec![1.0, 2.0]], &[0.0], &[1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            exact_hypergradient_quadratic(&[vec![1.0]], &[0.0, 1.0], &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }
}
