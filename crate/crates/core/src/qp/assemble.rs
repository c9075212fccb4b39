use serde::{Deserialize, Serialize};

use super::project::ConstraintSet;
use super::QpError;
use crate::cohort::Cohort;
use crate::regression::{basis, ModelKind};

/// Symmetric `dim x dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    dim: usize,
    q: Vec<f64>,
}

impl QuadraticForm {
    pub fn from_rows(dim: usize, q: Vec<f64>) -> Result<QuadraticForm, QpError> {
        if q.len() != dim * dim {
            return Err(QpError::Dimension {
                expected: dim * dim,
                got: q.len(),
            });
        }
        let mut form = QuadraticForm { dim, q };
        form.symmetrize();
        Ok(form)
    }

    pub fn zeros(dim: usize) -> QuadraticForm {
        QuadraticForm {
            dim,
            q: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    /// `w' Q w`.
    pub fn value(&self, w: &[f64]) -> f64 {
        assert_eq!(w.len(), self.dim, "weight dimension");
        (0..self.dim)
            .map(|i| w[i] * dot(self.row(i), w))
            .sum()
    }

    /// Gradient `2 Q w`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| 2.0 * dot(self.row(i), w)).collect()
    }

    /// Upper bound on the Lipschitz constant of the gradient
    /// (twice the largest absolute row sum).
    pub fn lipschitz_bound(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * 2.0
    }

    fn add_outer(&mut self, scale: f64, v: &[f64]) {
        for i in 0..self.dim {
            if v[i] == 0.0 {
                continue;
            }
            let s = scale * v[i];
            let row = &mut self.q[i * self.dim..(i + 1) * self.dim];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }

    fn symmetrize(&mut self) {
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let m = 0.5 * (self.q[i * self.dim + j] + self.q[j * self.dim + i]);
                self.q[i * self.dim + j] = m;
                self.q[j * self.dim + i] = m;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        for (mi, ri) in m.iter_mut().zip(r) {
            *mi += ri;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

// sum_i (r_i - mu)(r_i - mu)', accumulated into `form` with `scale`.
fn add_scatter(form: &mut QuadraticForm, scale: f64, rows: &[Vec<f64>], mu: &[f64]) {
    let mut centered = vec![0.0; mu.len()];
    for r in rows {
        for ((c, ri), mi) in centered.iter_mut().zip(r).zip(mu) {
            *c = ri - mi;
        }
        form.add_outer(scale, &centered);
    }
}

/// Heuristic trade-off `0.1 * |P x P| / |P x N|`.
pub fn default_gamma(n_pos: usize, n_neg: usize) -> f64 {
    0.1 * (n_pos * n_pos) as f64 / (n_pos * n_neg) as f64
}

/// Build the quadratic form and the mean-direction vector from basis
/// vectors of the two classes. The returned constraint set has default
/// `[0, 1]` bounds and no ordering.
///
/// Uses the centered identities
/// `sum_{P x P} d d' = 2 n_p S_p` and
/// `sum_{P x N} d d' = n_n S_p + n_p S_n + n_p n_n (mu_p - mu_n)(mu_p - mu_n)'`
/// where `S` is the scatter about the class mean.
pub fn assemble_from_basis(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    gamma: f64,
) -> Result<(QuadraticForm, ConstraintSet), QpError> {
    if positives.is_empty() {
        return Err(QpError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(QpError::EmptyClass("negative"));
    }
    let dim = positives[0].len();
    for r in positives.iter().chain(negatives) {
        if r.len() != dim {
            return Err(QpError::Dimension {
                expected: dim,
                got: r.len(),
            });
        }
    }
    let n_p = positives.len() as f64;
    let n_n = negatives.len() as f64;
    let mu_p = mean(positives, dim);
    let mu_n = mean(negatives, dim);
    let diff: Vec<f64> = mu_p.iter().zip(&mu_n).map(|(a, b)| a - b).collect();

    // AQI = 100 f, squared differences pick up 100^2.
    let s = 100.0 * 100.0;
    let mut form = QuadraticForm::zeros(dim);
    add_scatter(&mut form, s * (2.0 * n_p - gamma * n_n), positives, &mu_p);
    add_scatter(&mut form, -s * gamma * n_p, negatives, &mu_n);
    form.add_outer(-s * gamma * n_p * n_n, &diff);
    form.symmetrize();

    Ok((form, ConstraintSet::new(diff)))
}

/// Quadratic form and constraints for a cohort. The rank-ordering chain is
/// not attached here; callers add it for M1 via
/// [`ConstraintSet::with_ordering`].
pub fn assemble(
    cohort: &Cohort,
    kind: ModelKind,
    gamma: f64,
) -> Result<(QuadraticForm, ConstraintSet), QpError> {
    let pos: Vec<Vec<f64>> = cohort.positives.iter().map(|x| basis(kind, x)).collect();
    let neg: Vec<Vec<f64>> = cohort.negatives.iter().map(|x| basis(kind, x)).collect();
    assemble_from_basis(&pos, &neg, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force ordered pair sum of `(phi_i - phi_j)(phi_i - phi_j)'`.
    fn pair_sum(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
        let dim = a[0].len();
        let mut m = vec![0.0; dim * dim];
        for x in a {
            for y in b {
                let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
                for i in 0..dim {
                    for j in 0..dim {
                        m[i * dim + j] += d[i] * d[j];
                    }
                }
            }
        }
        m
    }

    #[test]
    fn two_feature_hand_expansion() {
        let (q, cs) = assemble_from_basis(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 1.0).unwrap();
        // -10000 d d' with d = (1, -1)
        assert_eq!(q.entry(0, 0), -10000.0);
        assert_eq!(q.entry(0, 1), 10000.0);
        assert_eq!(q.entry(1, 1), -10000.0);
        assert_eq!(q.value(&[1.0, 0.0]), -10000.0);
        assert_eq!(q.value(&[0.0, 0.0]), 0.0);
        assert_eq!(cs.mean_direction(), &[1.0, -1.0]);
    }

    #[test]
    fn singleton_positive_class_has_no_intra_term() {
        let a = vec![0.2, 0.7, 0.1];
        let negs = vec![vec![0.1, 0.3, 0.0], vec![0.5, 0.2, 0.4]];
        let gamma = 0.7;
        let (q, _) = assemble_from_basis(&[a.clone()], &negs, gamma).unwrap();
        let cross = pair_sum(&[a], &negs);
        for i in 0..3 {
            for j in 0..3 {
                let expect = -gamma * 1e4 * cross[i * 3 + j];
                assert!((q.entry(i, j) - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn identical_classes_match_pair_sum_oracle() {
        let set = vec![
            vec![0.9, 0.1, 0.4],
            vec![0.3, 0.8, 0.2],
            vec![0.5, 0.5, 0.7],
        ];
        let (q, cs) = assemble_from_basis(&set, &set, 1.0).unwrap();
        let pp = pair_sum(&set, &set);
        for k in 0..9 {
            let expect = 1e4 * (pp[k] - pp[k]);
            assert!((q.q[k] - expect).abs() < 1e-8, "{} vs {}", q.q[k], expect);
        }
        assert!(cs.mean_direction().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn general_instance_matches_pair_sum_oracle() {
        let pos = vec![vec![0.9, 0.1, 0.4], vec![0.3, 0.8, 0.2], vec![0.6, 0.6, 0.6]];
        let neg = vec![vec![0.1, 0.2, 0.0], vec![0.0, 0.5, 0.3]];
        let gamma = 0.35;
        let (q, _) = assemble_from_basis(&pos, &neg, gamma).unwrap();
        let pp = pair_sum(&pos, &pos);
        let pn = pair_sum(&pos, &neg);
        for k in 0..9 {
            let expect = 1e4 * (pp[k] - gamma * pn[k]);
            assert!((q.q[k] - expect).abs() <= 1e-9 * (1e4 * (pp[k].abs() + gamma * pn[k].abs())).max(1.0));
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        assert_eq!(
            assemble_from_basis(&[], &[vec![1.0]], 1.0).unwrap_err(),
            QpError::EmptyClass("positive")
        );
        assert_eq!(
            assemble_from_basis(&[vec![1.0]], &[], 1.0).unwrap_err(),
            QpError::EmptyClass("negative")
        );
    }

    #[test]
    fn gamma_heuristic() {
        assert!((default_gamma(20, 20) - 0.1).abs() < 1e-15);
        assert!((default_gamma(10, 5) - 0.2).abs() < 1e-15);
    }
}
