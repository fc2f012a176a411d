//! Small dense linear-algebra kernels: nonnegative least squares and
//! ridge regression. Problem sizes here are tiny (tens of columns,
//! hundreds of rows), so clarity wins over blocked algorithms.

use nalgebra::{DMatrix, DVector};

/// Result of a nonnegative least-squares solve.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    /// Coefficients, elementwise >= 0.
    pub x: DVector<f64>,
    /// Euclidean norm of the residual `a * x - b`.
    pub residual: f64,
    /// True when the columns carrying signal are numerically rank deficient.
    pub degenerate: bool,
}

/// Minimize `|| a x - b ||_2` subject to `x >= 0` (Lawson-Hanson active set).
///
/// Passive-set subproblems are solved through the SVD, so a rank-deficient
/// passive set yields the minimum-norm solution for that set instead of
/// failing; the `degenerate` flag reports the deficiency.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let (m, n) = a.shape();
    assert_eq!(m, b.len(), "nnls: row count mismatch");
    let mut x = DVector::<f64>::zeros(n);
    if n == 0 || m == 0 {
        return NnlsSolution { x, residual: b.norm(), degenerate: false };
    }

    let scale = a.amax().max(b.amax()).max(1.0);
    let tol = 1e-12 * scale * (m.max(n) as f64);

    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        // Dual vector w = a^T (b - a x); the most positive free component
        // enters the passive set.
        let resid = b - a * &x;
        let w = a.transpose() * &resid;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        // Inner loop: solve on the passive set, backtrack while any passive
        // coefficient would go nonpositive.
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(idx.iter());
            let s_sub = min_norm_least_squares(&sub, b);
            if s_sub.iter().all(|&v| v > tol) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s_sub[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if s_sub[k] <= tol {
                    let denom = x[j] - s_sub[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                // All offending coefficients already at zero: drop them.
                for (k, &j) in idx.iter().enumerate() {
                    if s_sub[k] <= tol {
                        passive[j] = false;
                        x[j] = 0.0;
                    }
                }
                continue;
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (s_sub[k] - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }

    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let residual = (a * &x - b).norm();
    let degenerate = {
        // Deficiency is judged over every column that carries signal at all,
        // so a collinear pair is flagged even when only one member ends up
        // in the passive set.
        let live: Vec<usize> = (0..n).filter(|&j| a.column(j).amax() > 0.0).collect();
        if live.is_empty() {
            false
        } else {
            let sub = a.select_columns(live.iter());
            numerical_rank(&sub) < live.len()
        }
    };
    NnlsSolution { x, residual, degenerate }
}

/// Minimum-norm least-squares solution through the SVD.
pub fn min_norm_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    svd.solve(b, eps).expect("svd solve")
}

/// Numerical rank with a relative singular-value cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let svd = a.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    if max_sv == 0.0 {
        return 0;
    }
    let cutoff = max_sv * 1e-9 * (a.nrows().max(a.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > cutoff).count()
}

/// Ridge regression `min || x w - y ||^2 + lambda ||w||^2`.
///
/// `lambda` is relative to the mean diagonal of the Gram matrix, which keeps
/// the regularizer meaningful regardless of feature scale. Callers append a
/// column of ones for an intercept.
pub fn ridge_regression(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = x.ncols();
    let gram = x.transpose() * x;
    let mean_diag = gram.diagonal().sum() / (n as f64).max(1.0);
    let reg = lambda * mean_diag.max(1e-30);
    let lhs = gram + DMatrix::<f64>::identity(n, n) * reg;
    let rhs = x.transpose() * y;
    lhs.lu().solve(&rhs).unwrap_or_else(|| min_norm_least_squares(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: dense grid search over the nonnegative orthant.
    fn grid_oracle(a: &DMatrix<f64>, b: &DVector<f64>, hi: f64, steps: usize) -> (Vec<f64>, f64) {
        let n = a.ncols();
        assert!(n <= 2, "oracle only handles tiny problems");
        let mut best = (vec![0.0; n], f64::INFINITY);
        let axis: Vec<f64> = (0..=steps).map(|i| hi * i as f64 / steps as f64).collect();
        if n == 1 {
            for &v in &axis {
                let x = DVector::from_vec(vec![v]);
                let r = (a * &x - b).norm();
                if r < best.1 {
                    best = (vec![v], r);
                }
            }
        } else {
            for &v0 in &axis {
                for &v1 in &axis {
                    let x = DVector::from_vec(vec![v0, v1]);
                    let r = (a * &x - b).norm();
                    if r < best.1 {
                        best = (vec![v0, v1], r);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn recovers_unconstrained_solution_when_positive() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0, 5.0]);
        let sol = nnls(&a, &b);
        assert!((sol.x[0] - 2.0).abs() < 1e-10);
        assert!((sol.x[1] - 3.0).abs() < 1e-10);
        assert!(sol.residual < 1e-10);
        assert!(!sol.degenerate);
    }

    #[test]
    fn clamps_negative_component_matches_grid_oracle() {
        // Unconstrained solution would drive x[1] negative.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 0.9, 1.0, 1.1, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.3, 0.7, 1.05]);
        let sol = nnls(&a, &b);
        let (ox, orr) = grid_oracle(&a, &b, 3.0, 600);
        assert!(sol.residual <= orr + 1e-6, "nnls {} vs oracle {}", sol.residual, orr);
        for j in 0..2 {
            assert!(sol.x[j] >= 0.0);
            assert!((sol.x[j] - ox[j]).abs() < 2e-2);
        }
    }

    #[test]
    fn random_problems_never_beat_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let m = rng.gen_range(3..8);
            let a = DMatrix::from_fn(m, 2, |_, _| rng.gen_range(-1.0..2.0f64));
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..3.0f64));
            let sol = nnls(&a, &b);
            let (_, orr) = grid_oracle(&a, &b, 4.0, 400);
            assert!(sol.x.iter().all(|&v| v >= 0.0));
            assert!(sol.residual <= orr + 1e-4, "nnls {} oracle {}", sol.residual, orr);
        }
    }

    #[test]
    fn collinear_columns_flag_degenerate_but_preserve_sum() {
        let col = [1.0, 2.0, 0.5, 1.5];
        let mut data = Vec::new();
        for &v in &col {
            data.push(v);
            data.push(v);
        }
        let a = DMatrix::from_row_slice(4, 2, &data);
        let truth = 3.0; // combined weight of the pair
        let b = DVector::from_vec(col.iter().map(|v| v * truth).collect::<Vec<_>>());
        let sol = nnls(&a, &b);
        assert!(sol.degenerate);
        assert!((sol.x[0] + sol.x[1] - truth).abs() < 1e-8);
    }

    #[test]
    fn all_zero_matrix_returns_zero() {
        let a = DMatrix::zeros(3, 2);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let sol = nnls(&a, &b);
        assert_eq!(sol.x[0], 0.0);
        assert_eq!(sol.x[1], 0.0);
    }

    #[test]
    fn ridge_recovers_plane() {
        let x = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 2.0, 1.0, //
                2.0, 1.0, 1.0, //
                3.0, 3.0, 1.0, //
                0.5, 1.5, 1.0, //
                2.5, 0.5, 1.0,
            ],
        );
        let w_true = [2.0, -1.0, 0.5];
        let y = DVector::from_fn(5, |i, _| {
            x[(i, 0)] * w_true[0] + x[(i, 1)] * w_true[1] + x[(i, 2)] * w_true[2]
        });
        let w = ridge_regression(&x, &y, 1e-12);
        for j in 0..3 {
            assert!((w[j] - w_true[j]).abs() < 1e-6);
        }
    }
}
