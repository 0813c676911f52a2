//! Ridge regression with an intercept, solved in primal form when features
//! are fewer than training rows and in dual (kernel) form otherwise. Both
//! routes minimize `||Y - XW - 1b'||^2 + lambda ||W||^2` and agree to
//! numerical precision.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::MetricsError;

/// Fitted ridge model: weight matrix (features x targets) plus an intercept
/// per target.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub weights: Array2<f64>,
    pub intercept: Array1<f64>,
}

/// Cholesky factorization of a symmetric positive-definite matrix; returns
/// the lower factor. Fails on a non-positive pivot, which for our systems
/// only happens at lambda = 0 with rank-deficient inputs.
pub(crate) fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, MetricsError> {
    let n = a.dim().0;
    debug_assert_eq!(a.dim().0, a.dim().1);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(MetricsError::SingularSystem { pivot: i });
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves the symmetric positive semi-definite system `A X = B` by
/// Gauss-Jordan elimination with diagonal pivoting. Directions whose pivot
/// falls below a relative tolerance are dropped (their solution rows are
/// zero), which yields an exact least-squares solution for normal equations,
/// where `B` always lies in the range of `A`.
pub(crate) fn solve_spd_least_squares(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.dim().0;
    let m = b.dim().1;
    let mut a = a.clone();
    let mut b = b.clone();
    let scale = (0..n).map(|i| a[[i, i]]).fold(0.0f64, f64::max);
    let tol = scale * 1e-12 * n as f64;
    let mut eliminated = vec![false; n];
    let mut x = Array2::<f64>::zeros((n, m));
    for _ in 0..n {
        let Some(pivot) = (0..n)
            .filter(|&i| !eliminated[i])
            .max_by(|&i, &j| a[[i, i]].partial_cmp(&a[[j, j]]).expect("finite diagonal"))
        else {
            break;
        };
        if a[[pivot, pivot]] <= tol {
            break;
        }
        eliminated[pivot] = true;
        let d = a[[pivot, pivot]];
        for i in 0..n {
            if i == pivot || a[[i, pivot]] == 0.0 {
                continue;
            }
            let factor = a[[i, pivot]] / d;
            for j in 0..n {
                let v = a[[pivot, j]];
                if v != 0.0 {
                    a[[i, j]] -= factor * v;
                }
            }
            for j in 0..m {
                let v = b[[pivot, j]];
                if v != 0.0 {
                    b[[i, j]] -= factor * v;
                }
            }
        }
    }
    for i in 0..n {
        if eliminated[i] {
            for j in 0..m {
                x[[i, j]] = b[[i, j]] / a[[i, i]];
            }
        }
    }
    x
}

/// Solves `L L' X = B` for X given the lower Cholesky factor.
pub(crate) fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.dim().0;
    let m = b.dim().1;
    let mut x = b.clone();
    // Forward substitution L Z = B.
    for col in 0..m {
        for i in 0..n {
            let mut v = x[[i, col]];
            for k in 0..i {
                v -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
        // Back substitution L' X = Z.
        for i in (0..n).rev() {
            let mut v = x[[i, col]];
            for k in (i + 1)..n {
                v -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
    }
    x
}

fn column_means(a: ArrayView2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).expect("non-empty input")
}

/// Fits ridge weights and intercept. X is expected column-standardized by the
/// caller when comparability across feature sets matters; this routine only
/// centers (the intercept is never penalized).
pub fn ridge_fit(x: &Array2<f64>, y: &Array2<f64>, lambda: f64) -> Result<RidgeModel, MetricsError> {
    let (n, p) = x.dim();
    if y.dim().0 != n {
        return Err(MetricsError::ShapeMismatch { got: y.dim().0, expected: n });
    }
    if n < 2 {
        return Err(MetricsError::TooShort { len: n });
    }
    if lambda < 0.0 {
        return Err(MetricsError::NegativeLambda(lambda));
    }
    let x_mean = column_means(x.view());
    let y_mean = column_means(y.view());
    let xc = x - &x_mean;
    let yc = y - &y_mean;

    let weights = if p <= n {
        // Primal: (Xc'Xc + lambda I) W = Xc'Y. Normal equations are always
        // consistent, so rank deficiency at lambda = 0 (including the rank
        // drop from centering out the intercept) still has an exact
        // least-squares solution.
        let mut gram = xc.t().dot(&xc);
        for i in 0..p {
            gram[[i, i]] += lambda;
        }
        solve_spd_least_squares(&gram, &xc.t().dot(&yc))
    } else {
        // Dual: W = Xc' (Xc Xc' + lambda I)^-1 Y. Centering puts the all-ones
        // vector in the kernel's null space, so lambda = 0 is always singular
        // here.
        let mut kernel = xc.dot(&xc.t());
        for i in 0..n {
            kernel[[i, i]] += lambda;
        }
        let l = cholesky(&kernel)?;
        let alpha = cholesky_solve(&l, &yc);
        xc.t().dot(&alpha)
    };
    let intercept = &y_mean - &x_mean.dot(&weights);
    Ok(RidgeModel { weights, intercept })
}

/// Predicts `X W + 1 b'`.
pub fn ridge_predict(model: &RidgeModel, x: &Array2<f64>) -> Result<Array2<f64>, MetricsError> {
    if x.dim().1 != model.weights.dim().0 {
        return Err(MetricsError::ShapeMismatch { got: x.dim().1, expected: model.weights.dim().0 });
    }
    Ok(x.dot(&model.weights) + &model.intercept)
}
