//! Fixed-design knockoffs: equicorrelated group construction, Lasso-path
//! entry statistics with signed-max combination, the knockoff+ threshold,
//! knockoff relaxed e-values, and the multilayer knockoff filter baseline.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evalue::{evalues_from_outcome, DetectionOutcome};
use crate::mirror::MirrorCut;
use crate::model::{induced_group_selection, Dataset, LayerPartition};
use crate::regression::{lasso_entry_times, LambdaGrid};

/// A fixed-design knockoff copy. `gram` is Σ = XᵀX of the unit-normalized
/// design and `s_matrix` the block-diagonal S with X̃ᵀX̃ = Σ, XᵀX̃ = Σ − S.
#[derive(Debug, Clone)]
pub struct KnockoffDesign {
    pub x_normalized: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
    pub s_matrix: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

fn symmetric_eigen_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    (min, max)
}

/// Orthonormal basis of an `extra`-dimensional subspace orthogonal to the
/// columns of `q` (itself orthonormal). Deterministic: the candidate block
/// is drawn from a fixed-seed stream, re-drawn on rank failure.
fn orthonormal_complement(q: &DMatrix<f64>, extra: usize) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    for attempt in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6b6e_6f63_6b00 + attempt);
        let raw = DMatrix::from_fn(n, extra, |_, _| rng.sample::<f64, _>(StandardNormal));
        let projected = &raw - q * (q.transpose() * &raw);
        let qr = projected.qr();
        let r = qr.r();
        let full_rank = (0..extra).all(|i| r[(i, i)].abs() > 1e-10);
        if full_rank {
            return Ok(qr.q());
        }
    }
    Err(Error::numerical("failed to build an orthonormal complement basis"))
}

/// Equicorrelated group knockoffs for a fixed design with n ≥ 2N:
/// columns are normalized to unit norm, S = γ·blockdiag(Σ_gg) with
/// γ = min(1, 2λ_min(D^(-1/2) Σ D^(-1/2))), and
/// X̃ = X(I − Σ⁻¹S) + Ũ C with CᵀC = 2S − SΣ⁻¹S.
pub fn construct_group_knockoffs(x: &DMatrix<f64>, groups: &[Vec<usize>]) -> Result<KnockoffDesign> {
    let n = x.nrows();
    let p = x.ncols();
    if n < 2 * p {
        return Err(Error::invalid_input(format!(
            "fixed-design knockoffs need n ≥ 2N (n={n}, N={p})"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("design contains non-finite values"));
    }
    let mut covered = vec![false; p];
    for group in groups {
        for &j in group {
            if j == 0 || j > p || covered[j - 1] {
                return Err(Error::invalid_input("groups must partition the design columns"));
            }
            covered[j - 1] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::invalid_input("groups must cover every design column"));
    }

    let mut x_normalized = x.clone();
    for j in 0..p {
        let norm = x_normalized.column(j).norm();
        if norm <= 0.0 {
            return Err(Error::numerical(format!("column {} has zero norm", j + 1)));
        }
        x_normalized.column_mut(j).iter_mut().for_each(|v| *v /= norm);
    }
    let gram = x_normalized.transpose() * &x_normalized;

    let eig = gram.clone().symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    let lam_max = eig.eigenvalues.max();
    if !(lam_min > 0.0) || lam_max / lam_min > 1e12 {
        return Err(Error::numerical(format!(
            "normalized Gram matrix is singular or ill-conditioned (λmin={lam_min:.3e})"
        )));
    }
    let mut inv_diag = eig.eigenvalues.clone();
    inv_diag.iter_mut().for_each(|l| *l = 1.0 / *l);
    let sigma_inv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();

    // D = blockdiag(Σ_gg) and its inverse square root, block by block.
    let mut d = DMatrix::zeros(p, p);
    let mut d_inv_sqrt = DMatrix::zeros(p, p);
    for group in groups {
        let idx: Vec<usize> = group.iter().map(|&j| j - 1).collect();
        let block = gram.select_rows(idx.iter()).select_columns(idx.iter());
        let beig = block.clone().symmetric_eigen();
        if beig.eigenvalues.min() <= 0.0 {
            return Err(Error::numerical("a within-group Gram block is not positive definite"));
        }
        let mut inv_sqrt_vals = beig.eigenvalues.clone();
        inv_sqrt_vals.iter_mut().for_each(|l| *l = 1.0 / l.sqrt());
        let binv =
            &beig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * beig.eigenvectors.transpose();
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                d[(ia, ib)] = block[(a, b)];
                d_inv_sqrt[(ia, ib)] = binv[(a, b)];
            }
        }
    }

    let scaled = &d_inv_sqrt * &gram * &d_inv_sqrt;
    let (scaled_min, _) = symmetric_eigen_bounds(&scaled);
    let gamma = (2.0 * scaled_min).min(1.0);
    if !(gamma > 0.0) {
        return Err(Error::numerical("knockoff shrinkage factor collapsed to zero"));
    }
    let s = &d * gamma;

    // CᵀC = 2S − SΣ⁻¹S, PSD by the choice of γ up to roundoff.
    let a = &s * 2.0 - &s * &sigma_inv * &s;
    let aeig = a.symmetric_eigen();
    let mut sqrt_vals = aeig.eigenvalues.clone();
    for l in sqrt_vals.iter_mut() {
        if *l < -1e-8 {
            return Err(Error::numerical(format!(
                "knockoff residual matrix has eigenvalue {l:.3e} below the PSD tolerance"
            )));
        }
        *l = l.max(0.0).sqrt();
    }
    let c = DMatrix::from_diagonal(&sqrt_vals) * aeig.eigenvectors.transpose();

    let q = x_normalized.clone().qr().q();
    let u_tilde = orthonormal_complement(&q, p)?;
    let x_tilde = &x_normalized * (DMatrix::identity(p, p) - &sigma_inv * &s) + u_tilde * c;

    Ok(KnockoffDesign { x_normalized, x_tilde, s_matrix: s, gram })
}

/// Signed-max group statistics from a fitted Lasso path.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffStatistics {
    pub t: Vec<f64>,
    pub z_original: Vec<f64>,
    pub z_knockoff: Vec<f64>,
}

/// T = max(Z, Z̃) · sign(Z − Z̃), with sign(0) = 0 on ties.
pub fn signed_max(z: f64, z_tilde: f64) -> f64 {
    if z > z_tilde {
        z
    } else if z_tilde > z {
        -z_tilde
    } else {
        0.0
    }
}

/// Group importance: Z_g is the largest entry level among the group's
/// original columns, Z̃_g among their knockoffs, combined by signed max.
/// Entry levels come from one Lasso path on the augmented design [X, X̃].
pub fn knockoff_statistics(
    x: &DMatrix<f64>,
    x_tilde: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[Vec<usize>],
    grid: &LambdaGrid,
) -> Result<KnockoffStatistics> {
    if x.shape() != x_tilde.shape() {
        return Err(Error::invalid_input("design and knockoff dimensions differ"));
    }
    let p = x.ncols();
    let mut augmented = DMatrix::zeros(x.nrows(), 2 * p);
    augmented.columns_mut(0, p).copy_from(x);
    augmented.columns_mut(p, p).copy_from(x_tilde);
    let entry = lasso_entry_times(&augmented, y, grid)?;

    let mut z_original = Vec::with_capacity(groups.len());
    let mut z_knockoff = Vec::with_capacity(groups.len());
    let mut t = Vec::with_capacity(groups.len());
    for group in groups {
        let z = group.iter().map(|&j| entry[j - 1]).fold(0.0_f64, f64::max);
        let zt = group.iter().map(|&j| entry[p + j - 1]).fold(0.0_f64, f64::max);
        z_original.push(z);
        z_knockoff.push(zt);
        t.push(signed_max(z, zt));
    }
    Ok(KnockoffStatistics { t, z_original, z_knockoff })
}

fn strict_counts_plus_one(t_stats: &[f64], cut: &MirrorCut) -> (f64, usize) {
    match cut {
        MirrorCut::ZeroPlus => (
            1.0 + t_stats.iter().filter(|&&v| v < 0.0).count() as f64,
            t_stats.iter().filter(|&&v| v > 0.0).count(),
        ),
        MirrorCut::Value(t) => (
            1.0 + t_stats.iter().filter(|&&v| v < -t).count() as f64,
            t_stats.iter().filter(|&&v| v > *t).count(),
        ),
        MirrorCut::Infinite => (1.0, 0),
    }
}

fn mirror_cut_candidates(t_stats: &[f64]) -> Vec<MirrorCut> {
    let mut magnitudes: Vec<f64> =
        t_stats.iter().filter(|&&v| v != 0.0).map(|&v| v.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    magnitudes.dedup();
    let mut cuts = vec![MirrorCut::ZeroPlus];
    cuts.extend(magnitudes.into_iter().map(MirrorCut::Value));
    cuts
}

/// The knockoff+ threshold: smallest t > 0 with
/// (1 + #{T < −t}) / (#{T > t} ∨ 1) ≤ α, selection {T ≥ t}. Candidates are
/// the 0⁺ limit and the nonzero |T| values; strict counts at a candidate
/// equal the expression on the open interval above it, so the scan matches
/// the infimum over all real thresholds.
pub fn knockoff_plus_threshold(t_stats: &[f64], alpha: f64) -> Result<(MirrorCut, BTreeSet<usize>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid_input("alpha must lie in (0, 1)"));
    }
    if t_stats.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("statistics must be finite"));
    }
    for cut in mirror_cut_candidates(t_stats) {
        let (num, den) = strict_counts_plus_one(t_stats, &cut);
        if num / den.max(1) as f64 <= alpha {
            let selected =
                (1..=t_stats.len()).filter(|&g| cut.selects(t_stats[g - 1])).collect();
            return Ok((cut, selected));
        }
    }
    Ok((MirrorCut::Infinite, BTreeSet::new()))
}

/// Outcome plus relaxed e-values e_g = G·1{T_g ≥ t} / (1 + #{T ≤ −t}).
pub fn knockoff_outcome_from_stats(
    t_stats: &[f64],
    alpha0: f64,
) -> Result<(DetectionOutcome, Vec<f64>, MirrorCut)> {
    let (cut, selected) = knockoff_plus_threshold(t_stats, alpha0)?;
    let v_hat = 1.0 + cut.mirrored_count_closed(t_stats) as f64;
    let outcome = DetectionOutcome::new(t_stats.len(), selected, v_hat, alpha0)?;
    let evalues = evalues_from_outcome(&outcome);
    Ok((outcome, evalues, cut))
}

/// One group-knockoff run at one layer.
#[derive(Debug, Clone)]
pub struct KnockoffDetection {
    pub outcome: DetectionOutcome,
    pub evalues: Vec<f64>,
    pub threshold: MirrorCut,
    pub statistics: KnockoffStatistics,
}

/// Entry-level grid on the augmented design: 100 points, ratio 1e-3 when
/// rows comfortably exceed the 2N augmented columns, 1e-2 at the square
/// boundary.
fn default_augmented_grid(augmented: &DMatrix<f64>, y: &DVector<f64>) -> Result<LambdaGrid> {
    let ratio = if augmented.nrows() <= augmented.ncols() { 1e-2 } else { 1e-3 };
    LambdaGrid::from_raw(augmented, y, 100, ratio)
}

fn centered_problem(dataset: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let mut x = dataset.design.clone();
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let mean = x.column(j).iter().sum::<f64>() / n;
        x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
    }
    let y_mean = dataset.response.iter().sum::<f64>() / n;
    let y = dataset.response.map(|v| v - y_mean);
    (x, y)
}

/// The group-knockoff base procedure at layer `m`. The equicorrelated
/// fixed-design construction is deterministic in the data, so repeated runs
/// coincide and a single replication suffices in derandomized pipelines.
pub fn knockoff_detect(
    dataset: &Dataset,
    partition: &LayerPartition,
    m: usize,
    alpha0: f64,
) -> Result<KnockoffDetection> {
    if dataset.num_features() != partition.num_features() {
        return Err(Error::invalid_input("dataset and partition disagree on feature count"));
    }
    let layer = partition.layer(m)?;
    let (x, y) = centered_problem(dataset);
    let design = construct_group_knockoffs(&x, layer.groups())?;
    let mut augmented = DMatrix::zeros(x.nrows(), 2 * x.ncols());
    augmented.columns_mut(0, x.ncols()).copy_from(&design.x_normalized);
    augmented.columns_mut(x.ncols(), x.ncols()).copy_from(&design.x_tilde);
    let grid = default_augmented_grid(&augmented, &y)?;
    let statistics =
        knockoff_statistics(&design.x_normalized, &design.x_tilde, &y, layer.groups(), &grid)?;
    let (outcome, evalues, threshold) = knockoff_outcome_from_stats(&statistics.t, alpha0)?;
    Ok(KnockoffDetection { outcome, evalues, threshold, statistics })
}

/// Multilayer knockoff filter output. Thresholds are on the statistic
/// scale, so this carries its own cut vector instead of a ThresholdVector.
#[derive(Debug, Clone)]
pub struct MkfResult {
    pub selected_features: BTreeSet<usize>,
    pub per_layer_groups: Vec<BTreeSet<usize>>,
    pub cuts: Vec<MirrorCut>,
    /// V̂^(m) = c·(1 + #{T^(m) ≤ −t^(m)}) at the final thresholds (closed form).
    pub per_layer_v_hat: Vec<f64>,
    pub per_layer_fdp_hat: Vec<f64>,
    pub per_layer_stats: Vec<Vec<f64>>,
}

/// Joint survival (Eq.-4 style consistency applied to statistics): feature j
/// survives when its group statistic clears the cut at every layer.
fn mkf_survivors(
    stats: &[Vec<f64>],
    cuts: &[MirrorCut],
    partition: &LayerPartition,
) -> BTreeSet<usize> {
    (1..=partition.num_features())
        .filter(|&j| {
            stats.iter().zip(cuts).enumerate().all(|(m0, (t, cut))| {
                cut.selects(t[partition.layers()[m0].group_of(j) - 1])
            })
        })
        .collect()
}

/// MKF(c)+: per-layer knockoff statistics, then coordinate descent over the
/// per-layer cuts until c·(1 + #{T^(m) < −t}) / (|S^(m)| ∨ 1) ≤ α^(m) holds
/// at every layer, with S the joint-survival selection. The update counts
/// layer-m survival strictly, matching the single-layer knockoff+ scan;
/// reported V̂ uses the closed count.
pub fn mkf_plus(
    dataset: &Dataset,
    partition: &LayerPartition,
    alphas: &[f64],
    c: f64,
) -> Result<MkfResult> {
    let m_count = partition.num_layers();
    if alphas.len() != m_count {
        return Err(Error::invalid_input("one alpha per layer required"));
    }
    if alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::invalid_input("alphas must lie in (0, 1)"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid_input("the expansion constant must be positive"));
    }

    let (x, y) = centered_problem(dataset);
    let mut stats: Vec<Vec<f64>> = Vec::with_capacity(m_count);
    for m in 1..=m_count {
        let layer = partition.layer(m)?;
        let design =
            construct_group_knockoffs(&x, layer.groups()).map_err(|e| e.in_layer(m))?;
        let mut augmented = DMatrix::zeros(x.nrows(), 2 * x.ncols());
        augmented.columns_mut(0, x.ncols()).copy_from(&design.x_normalized);
        augmented.columns_mut(x.ncols(), x.ncols()).copy_from(&design.x_tilde);
        let grid = default_augmented_grid(&augmented, &y).map_err(|e| e.in_layer(m))?;
        let s = knockoff_statistics(&design.x_normalized, &design.x_tilde, &y, layer.groups(), &grid)
            .map_err(|e| e.in_layer(m))?;
        stats.push(s.t);
    }
    mkf_filter_from_stats(&stats, partition, alphas, c)
}

/// The threshold search of MKF(c)+ given precomputed per-layer statistics.
pub fn mkf_filter_from_stats(
    stats: &[Vec<f64>],
    partition: &LayerPartition,
    alphas: &[f64],
    c: f64,
) -> Result<MkfResult> {
    let m_count = partition.num_layers();
    let candidates: Vec<Vec<MirrorCut>> = stats
        .iter()
        .map(|t| {
            let mut cuts = mirror_cut_candidates(t);
            cuts.push(MirrorCut::Infinite);
            cuts
        })
        .collect();
    let mut position = vec![0usize; m_count];

    // Strict survival at the updating layer, closed elsewhere.
    let layer_selection_size = |m0: usize, cut: &MirrorCut, position: &[usize]| -> usize {
        let layer = &partition.layers()[m0];
        let strict = |v: f64| match cut {
            MirrorCut::ZeroPlus => v > 0.0,
            MirrorCut::Value(t) => v > *t,
            MirrorCut::Infinite => false,
        };
        let groups: BTreeSet<usize> = (1..=partition.num_features())
            .filter(|&j| {
                stats.iter().enumerate().all(|(m0b, t)| {
                    let g = partition.layers()[m0b].group_of(j) - 1;
                    if m0b == m0 {
                        strict(t[g])
                    } else {
                        candidates[m0b][position[m0b]].selects(t[g])
                    }
                })
            })
            .map(|j| layer.group_of(j))
            .collect();
        groups.len()
    };

    let pass_bound: usize = candidates.iter().map(|c| c.len()).sum::<usize>() + 1;
    let mut passes = 0usize;
    loop {
        passes += 1;
        assert!(passes <= pass_bound, "multilayer knockoff filter failed to terminate");
        let mut changed = false;
        for m0 in 0..m_count {
            let start = position[m0];
            for idx in start..candidates[m0].len() {
                let cut = &candidates[m0][idx];
                let admissible = match cut {
                    MirrorCut::Infinite => true,
                    _ => {
                        let (num, _) = strict_counts_plus_one(&stats[m0], cut);
                        let den = layer_selection_size(m0, cut, &position).max(1);
                        c * num / den as f64 <= alphas[m0]
                    }
                };
                if admissible {
                    if idx != start {
                        position[m0] = idx;
                        changed = true;
                    }
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let cuts: Vec<MirrorCut> = (0..m_count).map(|m0| candidates[m0][position[m0]]).collect();
    let selected = mkf_survivors(stats, &cuts, partition);
    let mut per_layer_groups = Vec::with_capacity(m_count);
    let mut per_layer_v_hat = Vec::with_capacity(m_count);
    let mut per_layer_fdp_hat = Vec::with_capacity(m_count);
    for m in 1..=m_count {
        let groups = induced_group_selection(&selected, partition, m)?;
        // The multilayer filter reports the closed-count V̂ form.
        let v_hat = match cuts[m - 1] {
            MirrorCut::Infinite => 0.0,
            ref cut => c * (1.0 + cut.mirrored_count_closed(&stats[m - 1]) as f64),
        };
        per_layer_fdp_hat.push(v_hat / groups.len().max(1) as f64);
        per_layer_v_hat.push(v_hat);
        per_layer_groups.push(groups);
    }
    Ok(MkfResult {
        selected_features: selected,
        per_layer_groups,
        cuts,
        per_layer_v_hat,
        per_layer_fdp_hat,
        per_layer_stats: stats.to_vec(),
    })
}
