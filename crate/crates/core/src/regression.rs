//! Regression engine: Lasso via cyclic coordinate descent, K-fold
//! cross-validation, restricted OLS, and Lasso-path entry levels.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Convergence threshold on the largest squared coefficient change per
/// sweep, scaled by the column's mean square (the scale-invariant
/// coordinate-descent criterion used across the Lasso ecosystem).
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
/// Cross-validation paths stop early once this fraction of the response
/// variance is explained; beyond it the fit is saturated and deeper grid
/// points only interpolate noise.
pub const CV_SATURATION_DEV_RATIO: f64 = 0.999;

/// A converged Lasso solution on the original data scale.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    pub intercept: f64,
    pub n_iterations: usize,
    /// Columns (1-based) dropped for having zero variance.
    pub dropped_columns: Vec<usize>,
}

impl LassoFit {
    pub fn support(&self) -> BTreeSet<usize> {
        (1..=self.coefficients.len()).filter(|&j| self.coefficients[j - 1] != 0.0).collect()
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for (1/2n)‖y − Xβ‖² + λ‖β‖₁ on the matrix as
/// given (no centering or scaling). Maintains the residual; after each full
/// sweep it iterates on the active set until stable. Returns sweeps used.
fn lasso_cd_raw(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    col_sq_norm_over_n: &[f64],
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
    beta: &mut DVector<f64>,
) -> usize {
    let mut residual = y - x * &*beta;
    let in_set: Vec<bool> = col_sq_norm_over_n.iter().map(|&n| n > 0.0).collect();
    cd_on_set(x, col_sq_norm_over_n, lambda, tol, max_sweeps, &in_set, beta, &mut residual)
}

/// Above this column count the Gram matrix stops paying for itself.
const GRAM_MODE_MAX_COLS: usize = 1200;

/// Warm-started path solver with sequential strong-rule screening: each
/// grid point first fits on the ever-active set plus the strong-rule
/// survivors {j : |x_jᵀr|/n ≥ 2λ_k − λ_{k-1}}, then verifies the KKT
/// conditions on every column and re-solves with any violators added.
/// Calls `on_solution` with each grid index and its converged coefficients.
///
/// For moderate column counts the solver runs in covariance mode: the
/// gradient vector Xᵀr/n is maintained through the precomputed Gram matrix,
/// so screening and KKT checks are plain reads and a sweep costs O(p) plus
/// O(p) per coefficient that actually moved.
///
/// `saturate_dev_ratio` is the standard early path exit: once the fit
/// explains that fraction of the response variance the remaining (even
/// less penalized) grid points are reported with the saturated solution.
fn lasso_path_engine(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    col_sq_norm_over_n: &[f64],
    lambdas: &[f64],
    tol: f64,
    max_sweeps: usize,
    saturate_dev_ratio: Option<f64>,
    mut on_solution: impl FnMut(usize, &DVector<f64>),
) -> usize {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut screened = vec![false; p];
    let mut total_sweeps = 0usize;
    let gram = if p <= GRAM_MODE_MAX_COLS { Some(x.transpose() * x) } else { None };
    // Gradient Xᵀ(y − Xβ)/n, maintained exactly in covariance mode and
    // recomputed per grid point otherwise.
    let xty: DVector<f64> = x.transpose() * y;
    let mut gradient: DVector<f64> = &xty / n;
    let mut residual = y.clone();
    let total_ss = y.norm_squared();

    let mut prev_lambda = f64::INFINITY;
    for (li, &lambda) in lambdas.iter().enumerate() {
        if gram.is_none() {
            gradient = x.transpose() * &residual / n;
        }
        let strong_cut = if prev_lambda.is_finite() { 2.0 * lambda - prev_lambda } else { lambda };
        for j in 0..p {
            if !screened[j]
                && col_sq_norm_over_n[j] > 0.0
                && (beta[j] != 0.0 || gradient[j].abs() >= strong_cut)
            {
                screened[j] = true;
            }
        }
        loop {
            total_sweeps += match &gram {
                Some(gram) => cd_cov_on_set(
                    gram,
                    col_sq_norm_over_n,
                    n,
                    lambda,
                    tol,
                    max_sweeps,
                    &screened,
                    &mut beta,
                    &mut gradient,
                ),
                None => cd_on_set(
                    x,
                    col_sq_norm_over_n,
                    lambda,
                    tol,
                    max_sweeps,
                    &screened,
                    &mut beta,
                    &mut residual,
                ),
            };
            if gram.is_none() {
                gradient = x.transpose() * &residual / n;
            }
            // Full KKT sweep; pull violators into the working set.
            let mut clean = true;
            for j in 0..p {
                if screened[j] || col_sq_norm_over_n[j] <= 0.0 {
                    continue;
                }
                if gradient[j].abs() > lambda + tol {
                    screened[j] = true;
                    clean = false;
                }
            }
            if clean {
                break;
            }
        }
        on_solution(li, &beta);
        prev_lambda = lambda;
        if let Some(ratio) = saturate_dev_ratio {
            // RSS from the maintained state: ‖r‖² in residual mode,
            // yᵀy − βᵀXᵀy − n·βᵀg in covariance mode.
            let rss = if gram.is_some() {
                total_ss - beta.dot(&xty) - n * beta.dot(&gradient)
            } else {
                residual.norm_squared()
            };
            if total_ss > 0.0 && rss <= (1.0 - ratio) * total_ss {
                for rest in li + 1..lambdas.len() {
                    on_solution(rest, &beta);
                }
                break;
            }
        }
    }
    total_sweeps
}

/// Coordinate descent on the flagged columns in covariance mode: `gradient`
/// holds Xᵀ(y − Xβ)/n and is updated through the Gram column of every
/// coefficient that moves.
#[allow(clippy::too_many_arguments)]
fn cd_cov_on_set(
    gram: &DMatrix<f64>,
    col_sq_norm_over_n: &[f64],
    n: f64,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
    in_set: &[bool],
    beta: &mut DVector<f64>,
    gradient: &mut DVector<f64>,
) -> usize {
    let members: Vec<usize> = (0..gram.ncols()).filter(|&j| in_set[j]).collect();
    if members.is_empty() {
        return 0;
    }
    let p = gram.nrows();
    let gram_data = gram.as_slice();
    let update = |j: usize, beta: &mut DVector<f64>, gradient: &mut DVector<f64>| -> f64 {
        let norm = col_sq_norm_over_n[j];
        let old = beta[j];
        let c = gradient[j] + norm * old;
        let new = soft_threshold(c, lambda) / norm;
        if new != old {
            let scale = (old - new) / n;
            let col = &gram_data[j * p..(j + 1) * p];
            let grad = gradient.as_mut_slice();
            for (g, &v) in grad.iter_mut().zip(col) {
                *g += scale * v;
            }
            beta[j] = new;
        }
        (new - old) * (new - old) * norm
    };
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for &j in &members {
            max_change = max_change.max(update(j, beta, gradient));
        }
        if max_change < tol || sweeps >= max_sweeps {
            return sweeps;
        }
        let active: Vec<usize> = members.iter().copied().filter(|&j| beta[j] != 0.0).collect();
        loop {
            sweeps += 1;
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, beta, gradient));
            }
            if change < tol || sweeps >= max_sweeps {
                break;
            }
        }
        if sweeps >= max_sweeps {
            return sweeps;
        }
    }
}

/// Cyclic coordinate descent restricted to the flagged columns, with
/// active-subset iteration between full passes over the set. The residual
/// must equal y − Xβ on entry; it is kept consistent. Returns sweeps used.
#[allow(clippy::too_many_arguments)]
fn cd_on_set(
    x: &DMatrix<f64>,
    col_sq_norm_over_n: &[f64],
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
    in_set: &[bool],
    beta: &mut DVector<f64>,
    residual: &mut DVector<f64>,
) -> usize {
    let n = x.nrows() as f64;
    let members: Vec<usize> = (0..x.ncols()).filter(|&j| in_set[j]).collect();
    if members.is_empty() {
        return 0;
    }
    let update = |j: usize, beta: &mut DVector<f64>, residual: &mut DVector<f64>| -> f64 {
        let norm = col_sq_norm_over_n[j];
        let col = x.column(j);
        let old = beta[j];
        let c = col.dot(residual) / n + norm * old;
        let new = soft_threshold(c, lambda) / norm;
        if new != old {
            beta[j] = new;
            residual.axpy(old - new, &col, 1.0);
        }
        (new - old) * (new - old) * norm
    };
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for &j in &members {
            max_change = max_change.max(update(j, beta, residual));
        }
        if max_change < tol || sweeps >= max_sweeps {
            return sweeps;
        }
        let active: Vec<usize> = members.iter().copied().filter(|&j| beta[j] != 0.0).collect();
        loop {
            sweeps += 1;
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, beta, residual));
            }
            if change < tol || sweeps >= max_sweeps {
                break;
            }
        }
        if sweeps >= max_sweeps {
            return sweeps;
        }
    }
}

/// Column means and 1/n-convention standard deviations.
struct Standardization {
    means: Vec<f64>,
    scales: Vec<f64>,
    dropped: Vec<usize>,
}

fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Standardization) {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    let mut dropped = Vec::new();
    for j in 0..x.ncols() {
        let mut col = out.column_mut(j);
        let mean = col.iter().sum::<f64>() / n;
        col.iter_mut().for_each(|v| *v -= mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n;
        let scale = var.sqrt();
        if scale > 0.0 {
            col.iter_mut().for_each(|v| *v /= scale);
        } else {
            dropped.push(j + 1);
        }
        means.push(mean);
        scales.push(scale);
    }
    (out, Standardization { means, scales, dropped })
}

fn check_finite(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("non-finite values in regression inputs"));
    }
    if x.nrows() != y.len() {
        return Err(Error::invalid_input("design and response dimensions disagree"));
    }
    Ok(())
}

/// Lasso with internal standardization: columns are scaled to mean 0 and
/// unit 1/n-variance, the response is centered, and coefficients are
/// returned on the original scale together with the implied intercept.
/// Zero-variance columns are dropped (coefficient 0) and reported.
pub fn lasso_coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<LassoFit> {
    check_finite(x, y)?;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid_input("lambda must be finite and nonnegative"));
    }
    let (xs, std) = standardize_columns(x);
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let yc = y.map(|v| v - y_mean);
    let norms: Vec<f64> =
        (0..x.ncols()).map(|j| if std.scales[j] > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut beta_std = DVector::zeros(x.ncols());
    let sweeps = lasso_cd_raw(&xs, &yc, &norms, lambda, tol, max_sweeps, &mut beta_std);

    let mut coefficients = DVector::zeros(x.ncols());
    for j in 0..x.ncols() {
        if std.scales[j] > 0.0 {
            coefficients[j] = beta_std[j] / std.scales[j];
        }
    }
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&std.means)
            .map(|(&b, &m)| b * m)
            .sum::<f64>();
    Ok(LassoFit {
        coefficients,
        lambda,
        intercept,
        n_iterations: sweeps,
        dropped_columns: std.dropped,
    })
}

/// Largest KKT residual of a fit, measured on the standardized problem:
/// zero coefficients need |gradient| ≤ λ, active ones gradient = sign(β)·λ.
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, fit: &LassoFit) -> f64 {
    let (xs, std) = standardize_columns(x);
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let yc = y.map(|v| v - y_mean);
    let beta_std =
        DVector::from_fn(x.ncols(), |j, _| fit.coefficients[j] * std.scales[j]);
    let residual = &yc - &xs * &beta_std;
    let n = x.nrows() as f64;
    let mut worst: f64 = 0.0;
    for j in 0..x.ncols() {
        if std.scales[j] == 0.0 {
            continue;
        }
        let g = xs.column(j).dot(&residual) / n;
        let v = if beta_std[j] == 0.0 {
            (g.abs() - fit.lambda).max(0.0)
        } else {
            (g - beta_std[j].signum() * fit.lambda).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Decreasing log-spaced penalty grid starting at the smallest λ with an
/// all-zero solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid_input("lambda grid must be nonempty"));
        }
        if values.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::invalid_input("lambda grid values must be positive"));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid_input("lambda grid must be strictly decreasing"));
        }
        Ok(LambdaGrid { values })
    }

    fn log_spaced(lambda_max: f64, n_points: usize, ratio: f64) -> Result<Self> {
        if !(lambda_max.is_finite() && lambda_max > 0.0) {
            return Err(Error::numerical("lambda_max is zero; response carries no signal to scale a grid"));
        }
        if n_points == 1 {
            return LambdaGrid::new(vec![lambda_max]);
        }
        let log_max = lambda_max.ln();
        let log_min = (lambda_max * ratio).ln();
        let step = (log_min - log_max) / (n_points - 1) as f64;
        let mut values: Vec<f64> =
            (0..n_points).map(|i| (log_max + step * i as f64).exp()).collect();
        values[0] = lambda_max;
        LambdaGrid::new(values)
    }

    /// Grid anchored at λ_max = max_j |x̃_jᵀ ỹ|/n on internally standardized
    /// data, matching [`lasso_coordinate_descent`]'s preprocessing.
    pub fn from_data(x: &DMatrix<f64>, y: &DVector<f64>, n_points: usize, ratio: f64) -> Result<Self> {
        check_finite(x, y)?;
        let (xs, std) = standardize_columns(x);
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc = y.map(|v| v - y_mean);
        let n = x.nrows() as f64;
        let lambda_max = (0..x.ncols())
            .filter(|&j| std.scales[j] > 0.0)
            .map(|j| (xs.column(j).dot(&yc) / n).abs())
            .fold(0.0, f64::max);
        LambdaGrid::log_spaced(lambda_max, n_points, ratio)
    }

    /// Grid anchored at λ_max = max_j |x_jᵀ y|/n on the matrix as given
    /// (for pre-normalized designs such as knockoff augmentations).
    pub fn from_raw(x: &DMatrix<f64>, y: &DVector<f64>, n_points: usize, ratio: f64) -> Result<Self> {
        check_finite(x, y)?;
        let n = x.nrows() as f64;
        let lambda_max = (0..x.ncols()).map(|j| (x.column(j).dot(y) / n).abs()).fold(0.0, f64::max);
        LambdaGrid::log_spaced(lambda_max, n_points, ratio)
    }

    /// 100 points; ratio 1e-3, or the shallower 1e-2 once n does not exceed
    /// N (square designs already sit at the interpolation boundary).
    pub fn default_for(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let ratio = if x.nrows() <= x.ncols() { 1e-2 } else { 1e-3 };
        LambdaGrid::from_data(x, y, 100, ratio)
    }
}

/// Held-out mean squared error per grid point.
#[derive(Debug, Clone)]
pub struct CvCurve {
    pub lambdas: Vec<f64>,
    pub mean_squared_error: Vec<f64>,
    pub skipped_folds: usize,
}

/// Standardized warm-started path on one training split; returns per-λ
/// coefficients on the original scale plus intercepts.
fn lasso_path_standardized(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
    tol: f64,
    max_sweeps: usize,
    saturate_dev_ratio: Option<f64>,
) -> (Vec<DVector<f64>>, Vec<f64>, usize, Vec<usize>) {
    let (xs, std) = standardize_columns(x);
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let yc = y.map(|v| v - y_mean);
    let norms: Vec<f64> =
        (0..x.ncols()).map(|j| if std.scales[j] > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut coefs = vec![DVector::zeros(x.ncols()); lambdas.len()];
    let mut intercepts = vec![y_mean; lambdas.len()];
    let sweeps = lasso_path_engine(&xs, &yc, &norms, lambdas, tol, max_sweeps, saturate_dev_ratio, |li, beta_std| {
        let mut beta = DVector::zeros(x.ncols());
        for j in 0..x.ncols() {
            if std.scales[j] > 0.0 {
                beta[j] = beta_std[j] / std.scales[j];
            }
        }
        intercepts[li] =
            y_mean - beta.iter().zip(&std.means).map(|(&b, &m)| b * m).sum::<f64>();
        coefs[li] = beta;
    });
    (coefs, intercepts, sweeps, std.dropped)
}

/// K-fold cross-validated Lasso: fold assignment is a seeded shuffle, the
/// held-out MSE is averaged over folds, ties in the curve break toward the
/// larger (sparser) λ, and the winning λ is refit on the full data.
/// Folds whose training response is constant are skipped.
pub fn lasso_cv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    folds: usize,
    grid: &LambdaGrid,
    rng_seed: u64,
) -> Result<(LassoFit, CvCurve)> {
    check_finite(x, y)?;
    let n = x.nrows();
    if folds < 2 {
        return Err(Error::invalid_input("cross-validation needs at least 2 folds"));
    }
    if n < folds {
        return Err(Error::invalid_input("more folds than observations"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut assignment = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            assignment[row] = pos % folds;
        }
        assignment
    };

    let per_fold: Vec<Option<(Vec<f64>, usize)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let x_train = x.select_rows(train_rows.iter());
            let y_train = DVector::from_iterator(train_rows.len(), train_rows.iter().map(|&i| y[i]));
            let spread = y_train.max() - y_train.min();
            if !(spread > 1e-12) {
                return None;
            }
            let (coefs, intercepts, _, _) = lasso_path_standardized(
                &x_train,
                &y_train,
                &grid.values,
                DEFAULT_TOL,
                DEFAULT_MAX_SWEEPS,
                Some(CV_SATURATION_DEV_RATIO),
            );
            // One prediction product per fold: (n_test × p) · (p × n_lambda).
            let x_test = x.select_rows(test_rows.iter());
            let coef_matrix = DMatrix::from_columns(&coefs);
            let preds = x_test * coef_matrix;
            let mut sse = vec![0.0; grid.values.len()];
            for (li, (col, b0)) in preds.column_iter().zip(&intercepts).enumerate() {
                for (ti, &i) in test_rows.iter().enumerate() {
                    let err = y[i] - (b0 + col[ti]);
                    sse[li] += err * err;
                }
            }
            Some((sse, test_rows.len()))
        })
        .collect();

    let skipped_folds = per_fold.iter().filter(|f| f.is_none()).count();
    if skipped_folds == folds {
        return Err(Error::numerical("every cross-validation fold was degenerate"));
    }
    let mut total_sse = vec![0.0; grid.values.len()];
    let mut total_count = 0usize;
    for fold in per_fold.into_iter().flatten() {
        for (acc, v) in total_sse.iter_mut().zip(&fold.0) {
            *acc += v;
        }
        total_count += fold.1;
    }
    let mse: Vec<f64> = total_sse.iter().map(|s| s / total_count as f64).collect();

    let mut best = 0usize;
    for (i, &m) in mse.iter().enumerate() {
        if m < mse[best] {
            best = i;
        }
    }
    let lambda_star = grid.values[best];
    // Refit on the full data by walking the path down to λ*.
    let (mut coefs, intercepts, sweeps, dropped) = lasso_path_standardized(
        x,
        y,
        &grid.values[..=best],
        DEFAULT_TOL,
        DEFAULT_MAX_SWEEPS,
        Some(CV_SATURATION_DEV_RATIO),
    );
    let fit = LassoFit {
        coefficients: coefs.swap_remove(best),
        lambda: lambda_star,
        intercept: intercepts[best],
        n_iterations: sweeps,
        dropped_columns: dropped,
    };
    Ok((fit, CvCurve { lambdas: grid.values.clone(), mean_squared_error: mse, skipped_folds }))
}

/// Least squares restricted to `support` (1-based columns of `x`), solved as
/// given with no centering or intercept. The returned vector has length
/// `x.ncols()` with zeros off the support. Rank deficiency is an error.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, support: &BTreeSet<usize>) -> Result<DVector<f64>> {
    check_finite(x, y)?;
    let p = x.ncols();
    if support.is_empty() {
        return Ok(DVector::zeros(p));
    }
    if let (Some(&min), Some(&max)) = (support.iter().next(), support.iter().next_back()) {
        if min == 0 || max > p {
            return Err(Error::invalid_input("support index out of range"));
        }
    }
    if support.len() > x.nrows() {
        return Err(Error::invalid_input("support larger than the sample size"));
    }
    let cols: Vec<usize> = support.iter().map(|&j| j - 1).collect();
    let xs = x.select_columns(cols.iter());
    let svd = xs.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(Error::numerical("restricted design is rank deficient"));
    }
    let solution = svd
        .solve(y, 0.0)
        .map_err(|e| Error::numerical(format!("least-squares solve failed: {e}")))?;
    let mut beta = DVector::zeros(p);
    for (idx, &j) in cols.iter().enumerate() {
        beta[j] = solution[idx];
    }
    Ok(beta)
}

/// Entry level of every column of an augmented design along the Lasso path:
/// Z_j is the largest grid λ at which coefficient j is nonzero, 0 if never.
/// The matrix is used as given (callers pre-normalize), warm-starting each
/// grid point from the previous one.
pub fn lasso_entry_times(
    x_augmented: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &LambdaGrid,
) -> Result<Vec<f64>> {
    check_finite(x_augmented, y)?;
    let n = x_augmented.nrows() as f64;
    let p = x_augmented.ncols();
    let norms: Vec<f64> =
        (0..p).map(|j| x_augmented.column(j).norm_squared() / n).collect();
    let mut entry = vec![0.0f64; p];
    lasso_path_engine(
        x_augmented,
        y,
        &norms,
        &grid.values,
        DEFAULT_TOL,
        DEFAULT_MAX_SWEEPS,
        None,
        |li, beta| {
            let lambda = grid.values[li];
            for j in 0..p {
                if entry[j] == 0.0 && beta[j] != 0.0 {
                    entry[j] = lambda;
                }
            }
        },
    );
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn standard_column(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let scale = (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        v /= scale;
        v
    }

    #[test]
    fn univariate_unpenalized_is_ols() {
        let x_col = standard_column(50, 1);
        let y = &x_col * 0.8 + standard_column(50, 2) * 0.1;
        let x = DMatrix::from_columns(&[x_col.clone()]);
        let fit = lasso_coordinate_descent(&x, &y, 0.0, 1e-20, 1000).unwrap();
        let expected = x_col.dot(&y) / x_col.dot(&x_col);
        assert!((fit.coefficients[0] - expected).abs() < 1e-8);
    }

    #[test]
    fn full_shrinkage_at_lambda_max() {
        let x_col = standard_column(40, 3);
        let y = &x_col * 1.5;
        let x = DMatrix::from_columns(&[x_col]);
        let grid = LambdaGrid::from_data(&x, &y, 5, 0.5).unwrap();
        let fit =
            lasso_coordinate_descent(&x, &y, grid.values[0], DEFAULT_TOL, 1000).unwrap();
        assert_eq!(fit.coefficients[0], 0.0);
    }

    #[test]
    fn soft_threshold_closed_form() {
        // A standardized column with xᵀy/n = 0.7 at λ = 0.2 gives β = 0.5.
        let x_col = standard_column(60, 4);
        let y = &x_col * 0.7;
        let x = DMatrix::from_columns(&[x_col]);
        let fit = lasso_coordinate_descent(&x, &y, 0.2, 1e-24, 1000).unwrap();
        assert!((fit.coefficients[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_column_dropped() {
        let n = 30;
        let c1 = DVector::from_element(n, 2.5);
        let c2 = standard_column(n, 5);
        let y = &c2 * 1.0;
        let x = DMatrix::from_columns(&[c1, c2]);
        let fit = lasso_coordinate_descent(&x, &y, 0.01, DEFAULT_TOL, 1000).unwrap();
        assert_eq!(fit.dropped_columns, vec![1]);
        assert_eq!(fit.coefficients[0], 0.0);
        assert!(fit.coefficients[1] > 0.5);
    }

    #[test]
    fn kkt_holds_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 80;
        let p = 12;
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta_true = DVector::from_fn(p, |j, _| if j < 3 { 1.0 } else { 0.0 });
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * &beta_true + noise * 0.3;
        let fit = lasso_coordinate_descent(&x, &y, 0.05, 1e-18, 5000).unwrap();
        assert!(kkt_violation(&x, &y, &fit) < 1e-6);
    }

    // Measured on the standardized problem the solver actually minimizes.
    #[test]
    fn objective_nonincreasing_over_sweeps() {
        let n = 60;
        let p = 10;
        let cols: Vec<DVector<f64>> = (0..p).map(|j| standard_column(n, 300 + j as u64)).collect();
        let x = DMatrix::from_columns(&cols);
        let mut y = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let y_mean = y.iter().sum::<f64>() / n as f64;
        y.iter_mut().for_each(|v| *v -= y_mean);
        let lambda = 0.05;
        let objective = |fit: &LassoFit| {
            let resid = &y - &x * &fit.coefficients;
            resid.norm_squared() / (2.0 * n as f64)
                + lambda * fit.coefficients.iter().map(|b| b.abs()).sum::<f64>()
        };
        let mut last = f64::INFINITY;
        for sweeps in 1..=8 {
            let fit = lasso_coordinate_descent(&x, &y, lambda, 0.0, sweeps).unwrap();
            let obj = objective(&fit);
            assert!(obj <= last + 1e-9, "objective rose at sweep {sweeps}");
            last = obj;
        }
    }

    #[test]
    fn unpenalized_matches_ols_on_centered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 50;
        let p = 5;
        let mut x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        for j in 0..p {
            let mean = x.column(j).iter().sum::<f64>() / n as f64;
            x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
        }
        let mut y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y_mean = y.iter().sum::<f64>() / n as f64;
        y.iter_mut().for_each(|v| *v -= y_mean);

        let fit = lasso_coordinate_descent(&x, &y, 0.0, 1e-22, 50_000).unwrap();
        let full: BTreeSet<usize> = (1..=p).collect();
        let beta_ols = ols(&x, &y, &full).unwrap();
        let rel = (&fit.coefficients - &beta_ols).norm() / beta_ols.norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn grid_starts_at_lambda_max() {
        let x_col = standard_column(40, 17);
        let y = &x_col * 0.9;
        let x = DMatrix::from_columns(&[x_col.clone()]);
        let grid = LambdaGrid::from_data(&x, &y, 10, 1e-2).unwrap();
        let expected = (x_col.dot(&y) / 40.0).abs();
        assert!((grid.values[0] - expected).abs() < 1e-12);
        assert!(grid.values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn entry_times_all_zero_on_single_point_grid() {
        let x_col = standard_column(40, 19);
        let y = &x_col * 0.9;
        let x = DMatrix::from_columns(&[x_col]);
        let grid = LambdaGrid::from_raw(&x, &y, 1, 1.0).unwrap();
        let z = lasso_entry_times(&x, &y, &grid).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn entry_times_rank_signal_over_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 100;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = x.column(0) * 2.0 + noise * 0.1;
        let grid = LambdaGrid::from_raw(&x, &y, 50, 1e-3).unwrap();
        let z = lasso_entry_times(&x, &y, &grid).unwrap();
        assert!(z[0] > z[1] && z[0] > z[2]);
    }

    #[test]
    fn ols_identity_design_returns_response() {
        let n = 6;
        let x = DMatrix::identity(n, n);
        let y = DVector::from_fn(n, |i, _| i as f64 - 2.0);
        let support: BTreeSet<usize> = (1..=n).collect();
        let beta = ols(&x, &y, &support).unwrap();
        assert!((beta - y).norm() < 1e-12);
    }

    #[test]
    fn ols_empty_support_is_zero() {
        let x = DMatrix::identity(4, 4);
        let y = DVector::from_element(4, 1.0);
        let beta = ols(&x, &y, &BTreeSet::new()).unwrap();
        assert_eq!(beta, DVector::zeros(4));
    }

    #[test]
    fn ols_orthogonal_columns_project_independently() {
        let n = 40;
        let c1 = standard_column(n, 29);
        // Orthogonalize c2 against c1.
        let mut c2 = standard_column(n, 31);
        c2 -= &c1 * (c1.dot(&c2) / c1.dot(&c1));
        let y = &c1 * 1.5 - &c2 * 0.7;
        let x = DMatrix::from_columns(&[c1.clone(), c2.clone()]);
        let support: BTreeSet<usize> = [1, 2].into_iter().collect();
        let beta = ols(&x, &y, &support).unwrap();
        assert!((beta[0] - c1.dot(&y) / c1.norm_squared()).abs() < 1e-10);
        assert!((beta[1] - c2.dot(&y) / c2.norm_squared()).abs() < 1e-10);
    }

    #[test]
    fn ols_rejects_rank_deficient_design() {
        let c1 = standard_column(20, 37);
        let c2 = &c1 * 2.0;
        let y = c1.clone();
        let x = DMatrix::from_columns(&[c1, c2]);
        let support: BTreeSet<usize> = [1, 2].into_iter().collect();
        assert!(matches!(ols(&x, &y, &support), Err(Error::Numerical(_))));
    }

    #[test]
    fn cv_leave_one_out_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = x.column(0) * 1.0
            + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.2;
        let grid = LambdaGrid::from_data(&x, &y, 8, 1e-2).unwrap();
        let (_, curve) = lasso_cv(&x, &y, n, &grid, 99).unwrap();

        // Direct leave-one-out loop with cold fits. Agreement is limited by
        // the production solver's sweep tolerance, so the bound sits well
        // above solver noise and far below any fold-mechanics error.
        let mut sse = vec![0.0; grid.values.len()];
        for i in 0..n {
            let rows: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let x_train = x.select_rows(rows.iter());
            let y_train = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
            for (li, &lambda) in grid.values.iter().enumerate() {
                let fit =
                    lasso_coordinate_descent(&x_train, &y_train, lambda, 1e-22, 100_000).unwrap();
                let pred = fit.intercept + x.row(i).transpose().dot(&fit.coefficients);
                sse[li] += (y[i] - pred) * (y[i] - pred);
            }
        }
        for (li, &s) in sse.iter().enumerate() {
            let diff = (curve.mean_squared_error[li] - s / n as f64).abs();
            assert!(diff < 1e-5, "grid point {li}: diff {diff}");
        }
    }

    #[test]
    fn cv_pure_noise_prefers_heavy_penalty() {
        let n = 60;
        let p = 20;
        let mut upper = 0;
        let trials = 50;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let grid = LambdaGrid::from_data(&x, &y, 30, 1e-3).unwrap();
            let (fit, _) = lasso_cv(&x, &y, 5, &grid, seed).unwrap();
            let pos = grid.values.iter().position(|&l| l == fit.lambda).unwrap();
            if pos < grid.values.len() / 2 {
                upper += 1;
            }
        }
        assert!(upper >= (trials as f64 * 0.8) as u64, "only {upper}/{trials} in upper half");
    }

    #[test]
    fn cv_recovers_strong_single_feature() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let n = 80;
            let p = 10;
            let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = x.column(2) * 3.0 + noise * 1e-3;
            let grid = LambdaGrid::from_data(&x, &y, 40, 1e-4).unwrap();
            let (fit, _) = lasso_cv(&x, &y, 10, &grid, seed).unwrap();
            assert!(fit.support().contains(&3), "seed {seed}");
        }
    }

    #[test]
    fn cv_fold_assignment_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 30;
        let x = DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = x.column(0) * 1.0
            + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.5;
        let grid = LambdaGrid::from_data(&x, &y, 20, 1e-2).unwrap();
        let (fit_a, curve_a) = lasso_cv(&x, &y, 5, &grid, 7).unwrap();
        let (fit_b, curve_b) = lasso_cv(&x, &y, 5, &grid, 7).unwrap();
        assert_eq!(fit_a.lambda, fit_b.lambda);
        assert_eq!(curve_a.mean_squared_error, curve_b.mean_squared_error);
    }
}

