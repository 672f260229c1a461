use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Result, SindyError};

/// Columns whose residual norm falls below this fraction of the largest
/// column norm are treated as linearly dependent.
const RANK_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StlsParams {
    /// Hard threshold: coefficients with smaller magnitude are removed.
    pub threshold: f64,
    pub max_iter: usize,
    /// Ridge term added to the normal equations when QR cannot solve.
    pub ridge_eps: f64,
}

impl Default for StlsParams {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            max_iter: 20,
            ridge_eps: 1e-10,
        }
    }
}

impl StlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(SindyError::InvalidParameter(format!(
                "threshold must be >= 0, got {}",
                self.threshold
            )));
        }
        if self.max_iter < 1 {
            return Err(SindyError::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.ridge_eps >= 0.0 && self.ridge_eps.is_finite()) {
            return Err(SindyError::InvalidParameter(format!(
                "ridge_eps must be >= 0, got {}",
                self.ridge_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsFit {
    /// One coefficient per design column; removed columns are exactly zero.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` ran out before the active set settled.
    pub converged: bool,
    /// Active-set size after each iteration.
    pub active_sizes: Vec<usize>,
}

impl StlsFit {
    pub fn nnz(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

/// Sequential thresholded least squares.
///
/// Alternates a least-squares solve on the active columns with removal of
/// every coefficient below `threshold`, until the active set stops changing.
pub fn stls(design: &DMatrix<f64>, targets: &[f64], params: &StlsParams) -> Result<StlsFit> {
    params.validate()?;
    let (p, k) = design.shape();
    if p == 0 || k == 0 {
        return Err(SindyError::InvalidParameter(format!("design matrix is {p}x{k}")));
    }
    if targets.len() != p {
        return Err(SindyError::ShapeMismatch {
            expected: format!("{p} targets"),
            found: targets.len().to_string(),
        });
    }

    let mut active: Vec<usize> = (0..k).collect();
    let mut active_sizes = Vec::new();
    let mut solution = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        solution = least_squares(design, targets, &active, params.ridge_eps)?;
        let keep: Vec<usize> = active
            .iter()
            .zip(&solution)
            .filter(|(_, c)| c.abs() >= params.threshold)
            .map(|(&j, _)| j)
            .collect();
        if keep.is_empty() {
            return Err(SindyError::NoActiveTerms {
                threshold: params.threshold,
            });
        }
        active_sizes.push(keep.len());
        if keep.len() == active.len() {
            converged = true;
            break;
        }
        solution = active
            .iter()
            .zip(&solution)
            .filter(|(_, c)| c.abs() >= params.threshold)
            .map(|(_, &c)| c)
            .collect();
        active = keep;
    }

    let mut coefficients = vec![0.0; k];
    for (&j, &c) in active.iter().zip(&solution) {
        coefficients[j] = c;
    }
    Ok(StlsFit {
        coefficients,
        iterations,
        converged,
        active_sizes,
    })
}

/// Least squares restricted to `columns`, returning one coefficient per
/// listed column.
///
/// Uses Householder QR with column pivoting; columns that are numerically
/// dependent on earlier pivots get a zero coefficient. Falls back to the
/// ridge-stabilized normal equations if the triangular solve is not finite.
pub fn least_squares(design: &DMatrix<f64>, targets: &[f64], columns: &[usize], ridge_eps: f64) -> Result<Vec<f64>> {
    let p = design.nrows();
    let k = columns.len();
    let mut a: Vec<Vec<f64>> = columns
        .iter()
        .map(|&j| design.column(j).iter().copied().collect())
        .collect();
    let mut b = targets.to_vec();
    let mut perm: Vec<usize> = (0..k).collect();

    let steps = p.min(k);
    let mut rank = 0;
    let mut first_norm = 0.0;
    let mut diag = Vec::with_capacity(steps);
    // Squared norms of the unreduced part of each column, downdated per step
    // and recomputed once cancellation has eaten most of their precision.
    let mut norms2: Vec<f64> = a.iter().map(|c| dot(c, c)).collect();
    let mut fresh = norms2.clone();
    for j in 0..steps {
        let (best, best_norm2) = (j..k)
            .map(|c| (c, norms2[c]))
            .fold((j, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        let best_norm = dot(&a[best][j..], &a[best][j..]).sqrt();
        debug_assert!(best_norm2 >= 0.0);
        if j == 0 {
            first_norm = best_norm;
        }
        if !(best_norm > RANK_RTOL * first_norm) || best_norm == 0.0 {
            break;
        }
        a.swap(j, best);
        perm.swap(j, best);
        norms2.swap(j, best);
        fresh.swap(j, best);

        let alpha = if a[j][j] > 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            let beta = 2.0 / vnorm2;
            for col in a.iter_mut().skip(j + 1) {
                let s = beta * dot(&v, &col[j..]);
                for (c, vi) in col[j..].iter_mut().zip(&v) {
                    *c -= s * vi;
                }
            }
            let s = beta * dot(&v, &b[j..]);
            for (c, vi) in b[j..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        a[j][j] = alpha;
        for c in j + 1..k {
            norms2[c] -= a[c][j] * a[c][j];
            if norms2[c] <= 1e-4 * fresh[c] {
                norms2[c] = dot(&a[c][j + 1..], &a[c][j + 1..]);
                fresh[c] = norms2[c];
            }
        }
        diag.push(alpha);
        rank += 1;
    }

    // Back substitution on the leading rank x rank triangle.
    let mut x = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut acc = b[i];
        for c in i + 1..rank {
            acc -= a[c][i] * x[c];
        }
        x[i] = acc / diag[i];
    }

    let mut out = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        out[perm[i]] = xi;
    }
    if out.iter().all(|v| v.is_finite()) {
        return Ok(out);
    }
    ridge_normal_equations(design, targets, columns, ridge_eps)
}

/// Inner product with independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    for (cx, cy) in xs.zip(ys) {
        for l in 0..8 {
            acc[l] += cx[l] * cy[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn ridge_normal_equations(
    design: &DMatrix<f64>,
    targets: &[f64],
    columns: &[usize],
    ridge_eps: f64,
) -> Result<Vec<f64>> {
    let sub = design.select_columns(columns);
    let y = DVector::from_column_slice(targets);
    let mut gram = sub.transpose() * &sub;
    for i in 0..columns.len() {
        gram[(i, i)] += ridge_eps;
    }
    let rhs = sub.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| SindyError::NumericalFailure("normal equations are not positive definite".into()))?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SindyError::NumericalFailure("non-finite least-squares solution".into()));
    }
    Ok(sol.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::NormalStream;
    use approx::assert_relative_eq;

    fn design_1_x1_x2(rows: &[(f64, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), 3, |i, j| match j {
            0 => 1.0,
            1 => rows[i].0,
            _ => rows[i].1,
        })
    }

    fn random_rows(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut g = NormalStream::new(seed);
        (0..n).map(|_| (g.next_standard(), g.next_standard())).collect()
    }

    #[test]
    fn recovers_exact_sparse_model() {
        let rows = random_rows(30, 1);
        let design = design_1_x1_x2(&rows);
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r.0).collect();
        let fit = stls(
            &design,
            &y,
            &StlsParams {
                threshold: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fit.coefficients[0], 0.0);
        assert_relative_eq!(fit.coefficients[1], 2.0, max_relative = 1e-12);
        assert_eq!(fit.coefficients[2], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn zero_threshold_is_plain_least_squares() {
        let rows = random_rows(40, 2);
        let design = design_1_x1_x2(&rows);
        let mut g = NormalStream::new(3);
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 1.0 + 0.5 * r.0 - 0.2 * r.1 + 0.3 * g.next_standard())
            .collect();
        let fit = stls(
            &design,
            &y,
            &StlsParams {
                threshold: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let normal = ridge_normal_equations(&design, &y, &[0, 1, 2], 0.0).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&normal) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn dependent_columns_get_zero_weight() {
        // Third column duplicates the second.
        let rows = random_rows(20, 4);
        let design = DMatrix::from_fn(20, 3, |i, j| if j == 0 { 1.0 } else { rows[i].0 });
        let y: Vec<f64> = rows.iter().map(|r| 3.0 * r.0 + 1.0).collect();
        let c = least_squares(&design, &y, &[0, 1, 2], 1e-10).unwrap();
        assert_relative_eq!(c[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(c[1] + c[2], 3.0, max_relative = 1e-12);
        assert!(c[1] == 0.0 || c[2] == 0.0);
    }

    #[test]
    fn underdetermined_system_solves() {
        let design = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 1.0, 1.0, -1.0, 3.0, 0.5]);
        let y = [1.0, 2.0];
        let c = least_squares(&design, &y, &[0, 1, 2, 3], 1e-10).unwrap();
        let fitted = &design * DVector::from_vec(c);
        assert_relative_eq!(fitted[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(fitted[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn threshold_too_large() {
        let rows = random_rows(10, 5);
        let design = design_1_x1_x2(&rows);
        let y: Vec<f64> = rows.iter().map(|r| 0.1 * r.0).collect();
        assert!(matches!(
            stls(
                &design,
                &y,
                &StlsParams {
                    threshold: 10.0,
                    ..Default::default()
                }
            ),
            Err(SindyError::NoActiveTerms { .. })
        ));
        assert!(matches!(
            stls(&design, &y[..3], &StlsParams::default()),
            Err(SindyError::ShapeMismatch { .. })
        ));
        assert!(stls(
            &design,
            &y,
            &StlsParams {
                max_iter: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn fixed_point_and_monotone_sparsity() {
        let mut g = NormalStream::new(9);
        let (p, k) = (80, 10);
        let design = DMatrix::from_fn(p, k, |_, _| g.next_standard());
        let y: Vec<f64> = (0..p)
            .map(|i| 2.0 * design[(i, 1)] - 0.7 * design[(i, 4)] + 0.12 * design[(i, 7)] + 0.05 * g.next_standard())
            .collect();
        let params = StlsParams {
            threshold: 0.1,
            ..Default::default()
        };
        let fit = stls(&design, &y, &params).unwrap();
        assert!(fit.active_sizes.windows(2).all(|w| w[1] <= w[0]));
        let active: Vec<usize> = (0..k).filter(|&j| fit.coefficients[j] != 0.0).collect();
        assert_eq!(active, vec![1, 4, 7]);
        assert!(active.iter().all(|&j| fit.coefficients[j].abs() >= params.threshold));
        let again = least_squares(&design, &y, &active, params.ridge_eps).unwrap();
        for (&j, c) in active.iter().zip(again) {
            assert!((fit.coefficients[j] - c).abs() <= 1e-12);
        }
    }
}
