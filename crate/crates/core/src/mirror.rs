//! Data-splitting detection: sample splitting, mirror statistics, group
//! statistics, the DS threshold rule, and DS generalized e-values.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalue::{evalues_from_outcome, DetectionOutcome};
use crate::model::{Dataset, LayerPartition};
use crate::regression::{lasso_cv, ols, LambdaGrid};
use crate::seeds;

/// A balanced split of the observation rows (0-based positions):
/// `half_a` has ⌊n/2⌋ rows, `half_b` the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub half_a: Vec<usize>,
    pub half_b: Vec<usize>,
}

/// Uniformly random balanced split, deterministic given the seed and
/// independent of the response by construction.
pub fn split_half(n: usize, rng_seed: u64) -> Result<SplitIndices> {
    if n < 4 {
        return Err(Error::invalid_input("data splitting needs at least 4 observations"));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rows.shuffle(&mut rng);
    let mut half_a: Vec<usize> = rows[..n / 2].to_vec();
    let mut half_b: Vec<usize> = rows[n / 2..].to_vec();
    half_a.sort_unstable();
    half_b.sort_unstable();
    Ok(SplitIndices { half_a, half_b })
}

/// Feature-level mirror statistics W_j with the f(u,v) = u + v combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorStatistics {
    pub w: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// W_j = sign(β_a,j · β_b,j) · (|β_a,j| + |β_b,j|); zero whenever either
/// half's coefficient is zero.
pub fn mirror_statistics(beta_a: &[f64], beta_b: &[f64]) -> Result<MirrorStatistics> {
    if beta_a.len() != beta_b.len() {
        return Err(Error::invalid_input("coefficient vectors differ in length"));
    }
    let w = beta_a
        .iter()
        .zip(beta_b)
        .map(|(&a, &b)| sign(a * b) * (a.abs() + b.abs()))
        .collect();
    Ok(MirrorStatistics { w })
}

/// How feature-level mirror statistics combine into a group statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStatMode {
    /// T_g = mean of W_j over the group.
    Mean,
    /// T_g = max of W_j over the group.
    Max,
}

/// Per-group statistics at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStatistics {
    pub t: Vec<f64>,
    pub mode: GroupStatMode,
}

pub fn group_statistics(
    w: &MirrorStatistics,
    partition: &LayerPartition,
    m: usize,
    mode: GroupStatMode,
) -> Result<GroupStatistics> {
    if w.w.len() != partition.num_features() {
        return Err(Error::invalid_input("mirror statistics length must equal feature count"));
    }
    let layer = partition.layer(m)?;
    let t = layer
        .groups()
        .iter()
        .map(|members| {
            let vals = members.iter().map(|&j| w.w[j - 1]);
            match mode {
                GroupStatMode::Mean => vals.sum::<f64>() / members.len() as f64,
                GroupStatMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(GroupStatistics { t, mode })
}

/// A sign-symmetry threshold. `ZeroPlus` is the infimum limit "select every
/// strictly positive statistic"; `Infinite` rejects nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MirrorCut {
    ZeroPlus,
    Value(f64),
    Infinite,
}

impl MirrorCut {
    pub fn as_f64(&self) -> f64 {
        match self {
            MirrorCut::ZeroPlus => 0.0,
            MirrorCut::Value(t) => *t,
            MirrorCut::Infinite => f64::INFINITY,
        }
    }

    /// Selection rule {T ≥ t}, with the 0⁺ limit meaning {T > 0}.
    pub fn selects(&self, t_stat: f64) -> bool {
        match self {
            MirrorCut::ZeroPlus => t_stat > 0.0,
            MirrorCut::Value(t) => t_stat >= *t,
            MirrorCut::Infinite => false,
        }
    }

    /// #{T ≤ −t}, the closed mirrored count; the 0⁺ limit gives #{T < 0}.
    /// V-hat estimates use this closed form (the validity of the e-value
    /// budget rests on it), while the threshold scan itself counts strictly.
    pub fn mirrored_count_closed(&self, t_stats: &[f64]) -> usize {
        match self {
            MirrorCut::ZeroPlus => t_stats.iter().filter(|&&v| v < 0.0).count(),
            MirrorCut::Value(t) => t_stats.iter().filter(|&&v| v <= -t).count(),
            MirrorCut::Infinite => 0,
        }
    }
}

/// Ascending candidate thresholds: the 0⁺ limit, then each distinct nonzero
/// |T_g|. The estimated-FDP expressions are evaluated with strict counts at
/// each candidate, which is exactly their value on the open interval above
/// it, so scanning the candidates reproduces the infimum over all t > 0.
fn candidate_cuts(t_stats: &[f64]) -> Vec<MirrorCut> {
    let mut magnitudes: Vec<f64> =
        t_stats.iter().filter(|&&v| v != 0.0).map(|&v| v.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    magnitudes.dedup();
    let mut cuts = vec![MirrorCut::ZeroPlus];
    cuts.extend(magnitudes.into_iter().map(MirrorCut::Value));
    cuts
}

fn strict_counts(t_stats: &[f64], cut: &MirrorCut) -> (usize, usize) {
    match cut {
        MirrorCut::ZeroPlus => (
            t_stats.iter().filter(|&&v| v < 0.0).count(),
            t_stats.iter().filter(|&&v| v > 0.0).count(),
        ),
        MirrorCut::Value(t) => (
            t_stats.iter().filter(|&&v| v < -t).count(),
            t_stats.iter().filter(|&&v| v > *t).count(),
        ),
        MirrorCut::Infinite => (0, 0),
    }
}

/// The DS threshold: the smallest t > 0 with
/// #{T < −t} / (#{T > t} ∨ 1) ≤ α, and the selection {g : T_g ≥ t}.
/// Returns `Infinite` with an empty selection when no candidate qualifies.
pub fn ds_threshold(t_stats: &[f64], alpha: f64) -> Result<(MirrorCut, BTreeSet<usize>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid_input("alpha must lie in (0, 1)"));
    }
    if t_stats.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("statistics must be finite"));
    }
    for cut in candidate_cuts(t_stats) {
        let (num, den) = strict_counts(t_stats, &cut);
        if num as f64 / den.max(1) as f64 <= alpha {
            let selected =
                (1..=t_stats.len()).filter(|&g| cut.selects(t_stats[g - 1])).collect();
            return Ok((cut, selected));
        }
    }
    Ok((MirrorCut::Infinite, BTreeSet::new()))
}

/// Turns one vector of group statistics into a detection outcome and DS
/// generalized e-values e_g = G·1{T_g ≥ t} / (#{T ≤ −t} ∨ α₀).
pub fn ds_outcome_from_stats(
    t_stats: &[f64],
    alpha0: f64,
) -> Result<(DetectionOutcome, Vec<f64>, MirrorCut)> {
    let (cut, selected) = ds_threshold(t_stats, alpha0)?;
    let v_hat = cut.mirrored_count_closed(t_stats) as f64;
    let outcome = DetectionOutcome::new(t_stats.len(), selected, v_hat, alpha0)?;
    let evalues = evalues_from_outcome(&outcome);
    Ok((outcome, evalues, cut))
}

/// One DS run at one layer.
#[derive(Debug, Clone)]
pub struct DsDetection {
    pub outcome: DetectionOutcome,
    pub evalues: Vec<f64>,
    pub threshold: MirrorCut,
    pub group_stats: GroupStatistics,
    /// Support columns (1-based) discarded from the half-B OLS for collinearity.
    pub dropped_collinear: Vec<usize>,
}

fn center_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let mut col = x.column_mut(j);
        let mean = col.iter().sum::<f64>() / n;
        col.iter_mut().for_each(|v| *v -= mean);
    }
}

/// Keeps a maximal independent subset of the support, scanning in index
/// order and dropping any column nearly in the span of the kept ones.
fn drop_collinear(x: &DMatrix<f64>, support: &BTreeSet<usize>) -> (BTreeSet<usize>, Vec<usize>) {
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut kept_ids = BTreeSet::new();
    let mut dropped = Vec::new();
    for &j in support {
        let col = x.column(j - 1).clone_owned();
        let orig = col.norm();
        if orig == 0.0 {
            dropped.push(j);
            continue;
        }
        let mut resid = col;
        for basis in &kept {
            let coef = basis.dot(&resid);
            resid.axpy(-coef, basis, 1.0);
        }
        if resid.norm() < 1e-8 * orig || kept.len() >= x.nrows() {
            dropped.push(j);
        } else {
            resid /= resid.norm();
            kept.push(resid);
            kept_ids.insert(j);
        }
    }
    (kept_ids, dropped)
}

/// The full DS base procedure at layer `m`: split the rows, Lasso-CV on half
/// A, OLS on half B restricted to the Lasso support, mirror and group
/// statistics, then the DS threshold at `alpha0`.
pub fn ds_detect(
    dataset: &Dataset,
    partition: &LayerPartition,
    m: usize,
    alpha0: f64,
    mode: GroupStatMode,
    rng_seed: u64,
) -> Result<DsDetection> {
    if dataset.num_features() != partition.num_features() {
        return Err(Error::invalid_input("dataset and partition disagree on feature count"));
    }
    partition.layer(m)?;
    let split = split_half(dataset.n(), rng_seed)?;
    let x_a = dataset.design.select_rows(split.half_a.iter());
    let y_a =
        DVector::from_iterator(split.half_a.len(), split.half_a.iter().map(|&i| dataset.response[i]));
    let mut x_b = dataset.design.select_rows(split.half_b.iter());
    let mut y_b =
        DVector::from_iterator(split.half_b.len(), split.half_b.iter().map(|&i| dataset.response[i]));

    let p = dataset.num_features();
    let (beta_a, support) = match LambdaGrid::default_for(&x_a, &y_a) {
        Ok(grid) => {
            let folds = 10.min(x_a.nrows());
            let (fit, _) = lasso_cv(&x_a, &y_a, folds, &grid, seeds::derive(rng_seed, 0xCF, 0))?;
            let support = fit.support();
            (fit.coefficients, support)
        }
        // A flat response on half A means an empty Lasso path: no support.
        Err(Error::Numerical(_)) => (DVector::zeros(p), BTreeSet::new()),
        Err(e) => return Err(e),
    };

    // Half-B OLS with the same implicit-intercept convention as the Lasso.
    center_columns(&mut x_b);
    let y_mean = y_b.iter().sum::<f64>() / y_b.len() as f64;
    y_b.iter_mut().for_each(|v| *v -= y_mean);
    let (kept, dropped_collinear) = drop_collinear(&x_b, &support);
    let beta_b = ols(&x_b, &y_b, &kept)?;

    let w = mirror_statistics(beta_a.as_slice(), beta_b.as_slice())?;
    let group_stats = group_statistics(&w, partition, m, mode)?;
    let (outcome, evalues, threshold) = ds_outcome_from_stats(&group_stats.t, alpha0)?;
    Ok(DsDetection { outcome, evalues, threshold, group_stats, dropped_collinear })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn split_sizes_even_and_odd() {
        let s = split_half(10, 1).unwrap();
        assert_eq!((s.half_a.len(), s.half_b.len()), (5, 5));
        let s = split_half(11, 1).unwrap();
        assert_eq!((s.half_a.len(), s.half_b.len()), (5, 6));
        let mut all: Vec<usize> = s.half_a.iter().chain(&s.half_b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_given_seed() {
        assert_eq!(split_half(20, 42).unwrap(), split_half(20, 42).unwrap());
        assert_ne!(split_half(20, 42).unwrap(), split_half(20, 43).unwrap());
    }

    #[test]
    fn mirror_statistic_examples() {
        let w = mirror_statistics(&[0.5, 0.5, 0.0], &[0.3, -0.3, 0.7]).unwrap();
        assert_eq!(w.w[0], 0.8);
        assert_eq!(w.w[1], -0.8);
        assert_eq!(w.w[2], 0.0);
    }

    #[test]
    fn mirror_statistic_sign_antisymmetry() {
        let w_pos = mirror_statistics(&[0.4], &[0.6]).unwrap();
        let w_neg = mirror_statistics(&[-0.4], &[0.6]).unwrap();
        assert_eq!(w_pos.w[0], -w_neg.w[0]);
    }

    #[test]
    fn group_statistic_modes() {
        let p = LayerPartition::new(2, vec![vec![vec![1, 2]]]).unwrap();
        let w = MirrorStatistics { w: vec![1.0, 3.0] };
        let mean = group_statistics(&w, &p, 1, GroupStatMode::Mean).unwrap();
        assert_eq!(mean.t, vec![2.0]);
        let max = group_statistics(&w, &p, 1, GroupStatMode::Max).unwrap();
        assert_eq!(max.t, vec![3.0]);

        let singles = LayerPartition::singletons(2).unwrap();
        let w = MirrorStatistics { w: vec![-1.5, 0.25] };
        for mode in [GroupStatMode::Mean, GroupStatMode::Max] {
            let t = group_statistics(&w, &singles, 1, mode).unwrap();
            assert_eq!(t.t, w.w);
        }
    }

    #[test]
    fn ds_threshold_zero_plus_case() {
        let (cut, sel) = ds_threshold(&[3.0, 2.0, 1.0, -1.0], 0.5).unwrap();
        assert_eq!(cut, MirrorCut::ZeroPlus);
        assert_eq!(sel, set(&[1, 2, 3]));
    }

    #[test]
    fn ds_threshold_scans_upward() {
        let (cut, sel) = ds_threshold(&[3.0, -2.0, -1.0, 2.0], 0.25).unwrap();
        assert_eq!(cut, MirrorCut::Value(2.0));
        assert_eq!(sel, set(&[1, 4]));
    }

    #[test]
    fn ds_threshold_no_positive_statistics() {
        let (_, sel) = ds_threshold(&[-3.0, -1.0, 0.0], 0.2).unwrap();
        assert!(sel.is_empty());
    }

    #[test]
    fn ds_threshold_satisfies_its_own_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let stats: Vec<f64> =
                (0..20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let alpha = 0.05 + 0.9 * rng.gen::<f64>();
            let (cut, _) = ds_threshold(&stats, alpha).unwrap();
            if let MirrorCut::Value(_) | MirrorCut::ZeroPlus = cut {
                let (num, den) = strict_counts(&stats, &cut);
                assert!(num as f64 / den.max(1) as f64 <= alpha);
            }
        }
    }

    #[test]
    fn ds_outcome_substitution_example() {
        let (outcome, evalues, cut) =
            ds_outcome_from_stats(&[3.0, 2.0, 1.0, -1.0], 0.5).unwrap();
        assert_eq!(cut, MirrorCut::ZeroPlus);
        assert_eq!(outcome.v_hat, 1.0);
        assert_eq!(evalues, vec![4.0, 4.0, 4.0, 0.0]);
    }

    #[test]
    fn ds_outcome_all_nonpositive_gives_zero_evalues() {
        let (_, evalues, _) = ds_outcome_from_stats(&[-3.0, -1.0, 0.0], 0.2).unwrap();
        assert_eq!(evalues, vec![0.0; 3]);
    }

    fn gaussian_dataset(n: usize, p: usize, beta: &DVector<f64>, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * beta + noise;
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn ds_detect_is_deterministic_and_consistent() {
        let beta = DVector::from_fn(12, |j, _| if j < 2 { 2.0 } else { 0.0 });
        let data = gaussian_dataset(60, 12, &beta, 9);
        let p = LayerPartition::singletons(12).unwrap();
        let a = ds_detect(&data, &p, 1, 0.2, GroupStatMode::Mean, 77).unwrap();
        let b = ds_detect(&data, &p, 1, 0.2, GroupStatMode::Mean, 77).unwrap();
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.group_stats.t, b.group_stats.t);
    }

    #[test]
    fn ds_detect_finds_strong_signals() {
        let beta = DVector::from_fn(10, |j, _| if j == 0 { 4.0 } else { 0.0 });
        let mut hits = 0;
        for seed in 0..10 {
            let data = gaussian_dataset(120, 10, &beta, 100 + seed);
            let p = LayerPartition::singletons(10).unwrap();
            let det = ds_detect(&data, &p, 1, 0.2, GroupStatMode::Mean, seed).unwrap();
            if det.outcome.rejections.contains(&1) {
                hits += 1;
            }
        }
        assert!(hits >= 8, "only {hits}/10 runs detected the strong signal");
    }

    #[test]
    fn ds_detect_collinear_columns_are_dropped_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 40;
        let base = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise_col = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Columns 1 and 2 are identical; 3 is independent.
        let x = DMatrix::from_columns(&[base.clone(), base.clone(), noise_col]);
        let y = &base * 3.0
            + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.1;
        let data = Dataset::new(x, y).unwrap();
        let p = LayerPartition::singletons(3).unwrap();
        let det = ds_detect(&data, &p, 1, 0.2, GroupStatMode::Mean, 3).unwrap();
        // Whenever both duplicates enter the Lasso support, the later one is
        // the one dropped from the half-B OLS.
        if !det.dropped_collinear.is_empty() {
            assert_eq!(det.dropped_collinear, vec![2]);
        }
    }
}
