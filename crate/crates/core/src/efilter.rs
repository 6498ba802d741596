//! The generalized e-filter: coordinate-descent threshold search over
//! per-layer e-value tables enforcing FDP-hat ≤ α at every layer at once,
//! plus its single-layer special case, the generalized e-BH procedure.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{induced_group_selection, LayerPartition, SelectionResult, ThresholdVector};

/// Per-layer, per-group nonnegative scores (raw or replication-averaged
/// generalized e-values). `layers[m-1][g-1]` is e_g^(m).
#[derive(Debug, Clone, PartialEq)]
pub struct EValueTable {
    layers: Vec<Vec<f64>>,
}

impl EValueTable {
    pub fn new(layers: Vec<Vec<f64>>, partition: &LayerPartition) -> Result<Self> {
        if layers.len() != partition.num_layers() {
            return Err(Error::invalid_input(format!(
                "e-value table has {} layers, partition has {}",
                layers.len(),
                partition.num_layers()
            )));
        }
        for (li, layer) in layers.iter().enumerate() {
            let expected = partition.layer(li + 1)?.group_count();
            if layer.len() != expected {
                return Err(Error::invalid_input(format!(
                    "layer {}: {} e-values for {} groups",
                    li + 1,
                    layer.len(),
                    expected
                )));
            }
            if layer.iter().any(|&e| !e.is_finite() || e < 0.0) {
                return Err(Error::invalid_input(format!(
                    "layer {}: e-values must be finite and nonnegative",
                    li + 1
                )));
            }
        }
        Ok(EValueTable { layers })
    }

    pub fn layer(&self, m: usize) -> &[f64] {
        &self.layers[m - 1]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

/// Target FDR levels, one per layer, each in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLevels {
    pub target_alphas: Vec<f64>,
}

impl FilterLevels {
    pub fn new(target_alphas: Vec<f64>) -> Result<Self> {
        if target_alphas.is_empty() {
            return Err(Error::invalid_input("at least one target level required"));
        }
        if target_alphas.iter().any(|&a| !(0.0..1.0).contains(&a) || a <= 0.0) {
            return Err(Error::invalid_input("target levels must lie in (0, 1)"));
        }
        Ok(FilterLevels { target_alphas })
    }
}

/// Features whose enclosing group clears the threshold at every layer:
/// `{j : e_{h(m,j)}^(m) ≥ t^(m) for all m}`.
pub fn candidate_selection(
    evalues: &EValueTable,
    thresholds: &ThresholdVector,
    partition: &LayerPartition,
) -> Result<BTreeSet<usize>> {
    if thresholds.values.len() != partition.num_layers() {
        return Err(Error::invalid_input("threshold vector length must match layer count"));
    }
    let mut out = BTreeSet::new();
    'feature: for j in 1..=partition.num_features() {
        for (mi, &t) in thresholds.values.iter().enumerate() {
            let layer = partition.layer(mi + 1)?;
            let e = evalues.layer(mi + 1)[layer.group_of(j) - 1];
            if !(e >= t) {
                continue 'feature;
            }
        }
        out.insert(j);
    }
    Ok(out)
}

/// Estimated FDP at layer `m`: `(G^(m)/t^(m)) / (|S^(m)| ∨ 1)`, where S^(m)
/// is induced from the candidate selection at the given thresholds.
/// Zero when the layer threshold is infinite.
pub fn fdp_hat_layer(
    evalues: &EValueTable,
    thresholds: &ThresholdVector,
    partition: &LayerPartition,
    m: usize,
) -> Result<f64> {
    let layer = partition.layer(m)?;
    let t = *thresholds
        .values
        .get(m - 1)
        .ok_or_else(|| Error::invalid_input("threshold vector shorter than layer index"))?;
    if t.is_infinite() {
        return Ok(0.0);
    }
    let selected = candidate_selection(evalues, thresholds, partition)?;
    let groups = induced_group_selection(&selected, partition, m)?;
    Ok((layer.group_count() as f64 / t) / groups.len().max(1) as f64)
}

/// The threshold grid for one layer: `grid[k-1] = G/(α·k)`, k = 1..=G.
/// Values are computed once here and reused for both the search and the
/// final selection so the two never drift apart.
fn layer_grid(group_count: usize, alpha: f64) -> Vec<f64> {
    (1..=group_count)
        .map(|k| group_count as f64 / (alpha * k as f64))
        .collect()
}

struct EFilterState<'a> {
    evalues: &'a EValueTable,
    partition: &'a LayerPartition,
    grids: Vec<Vec<f64>>,
    /// Current grid position per layer; threshold is grids[m][k-1].
    ks: Vec<usize>,
}

impl<'a> EFilterState<'a> {
    fn threshold(&self, m0: usize) -> f64 {
        self.grids[m0][self.ks[m0] - 1]
    }

    /// Survivor flags against all layers except `skip` at current thresholds.
    fn survivors_excluding(&self, skip: usize) -> Vec<bool> {
        let n = self.partition.num_features();
        let mut alive = vec![true; n];
        for (m0, layer) in self.partition.layers().iter().enumerate() {
            if m0 == skip {
                continue;
            }
            let t = self.threshold(m0);
            let evs = self.evalues.layer(m0 + 1);
            for j0 in 0..n {
                if alive[j0] && !(evs[layer.group_of(j0 + 1) - 1] >= t) {
                    alive[j0] = false;
                }
            }
        }
        alive
    }

    /// |S^(m)| when layer `m0` uses grid position `k` and the others stay put.
    /// Counts groups that clear the candidate threshold and contain a feature
    /// surviving every other layer.
    fn layer_selection_size(&self, m0: usize, k: usize, other_survivors: &[bool]) -> usize {
        let layer = &self.partition.layers()[m0];
        let evs = self.evalues.layer(m0 + 1);
        let t = self.grids[m0][k - 1];
        layer
            .groups()
            .iter()
            .enumerate()
            .filter(|(g0, members)| {
                evs[*g0] >= t && members.iter().any(|&j| other_survivors[j - 1])
            })
            .count()
    }
}

/// Runs the generalized e-filter and also reports how many passes the outer
/// loop took (the termination bound is `G^(1)+…+G^(M)+1`).
pub fn generalized_efilter_with_stats(
    evalues: &EValueTable,
    levels: &FilterLevels,
    partition: &LayerPartition,
) -> Result<(SelectionResult, usize)> {
    let m_count = partition.num_layers();
    if levels.target_alphas.len() != m_count {
        return Err(Error::invalid_input("level vector length must match layer count"));
    }
    let group_counts = partition.group_counts();
    let grids: Vec<Vec<f64>> = group_counts
        .iter()
        .zip(&levels.target_alphas)
        .map(|(&g, &a)| layer_grid(g, a))
        .collect();
    // Initialize at t^(m) = 1/α^(m), the k = G^(m) grid point.
    let mut state = EFilterState { evalues, partition, grids, ks: group_counts.clone() };

    let pass_bound: usize = group_counts.iter().sum::<usize>() + 1;
    let mut passes = 0usize;
    loop {
        passes += 1;
        assert!(
            passes <= pass_bound,
            "e-filter exceeded its termination bound of {pass_bound} passes"
        );
        let mut changed = false;
        for m0 in 0..m_count {
            let other = state.survivors_excluding(m0);
            // Raise t^(m) to the smallest grid value (largest k not above the
            // current one) with (G/t)/(1 ∨ |S^(m)|) ≤ α. On the grid this is
            // exactly the integer condition k ≤ max(1, |S^(m)|); k = 1 always
            // satisfies it, so the update never needs an infinite threshold.
            let start = state.ks[m0];
            for k in (1..=start).rev() {
                if k <= state.layer_selection_size(m0, k, &other).max(1) {
                    if k != start {
                        state.ks[m0] = k;
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

    let thresholds =
        ThresholdVector::new((0..m_count).map(|m0| state.threshold(m0)).collect())?;
    let selected = candidate_selection(evalues, &thresholds, partition)?;
    let mut per_layer_groups = Vec::with_capacity(m_count);
    let mut per_layer_fdp_hat = Vec::with_capacity(m_count);
    for m in 1..=m_count {
        per_layer_groups.push(induced_group_selection(&selected, partition, m)?);
        per_layer_fdp_hat.push(fdp_hat_layer(evalues, &thresholds, partition, m)?);
    }
    let result = SelectionResult {
        selected_features: selected,
        per_layer_groups,
        thresholds,
        per_layer_fdp_hat,
    };
    Ok((result, passes))
}

/// Finds the minimal admissible threshold vector for the given e-values and
/// returns the resulting selection.
pub fn generalized_efilter(
    evalues: &EValueTable,
    levels: &FilterLevels,
    partition: &LayerPartition,
) -> Result<SelectionResult> {
    generalized_efilter_with_stats(evalues, levels, partition).map(|(r, _)| r)
}

/// The generalized e-BH procedure: with e-values sorted in decreasing order,
/// take k̂ = max{k : e_(k) ≥ N/(αk)} and select every j with e_j ≥ N/(α·k̂).
/// Returns 1-based indices; empty when no k qualifies.
pub fn generalized_ebh(evalues: &[f64], alpha: f64) -> Result<BTreeSet<usize>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid_input("alpha must lie in (0, 1)"));
    }
    if evalues.iter().any(|&e| !e.is_finite() || e < 0.0) {
        return Err(Error::invalid_input("e-values must be finite and nonnegative"));
    }
    let n = evalues.len();
    let mut sorted: Vec<f64> = evalues.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut k_hat = 0usize;
    for k in (1..=n).rev() {
        if sorted[k - 1] >= n as f64 / (alpha * k as f64) {
            k_hat = k;
            break;
        }
    }
    if k_hat == 0 {
        return Ok(BTreeSet::new());
    }
    let cut = n as f64 / (alpha * k_hat as f64);
    Ok((1..=n).filter(|&j| evalues[j - 1] >= cut).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerPartition;

    fn set(items: &[usize]) -> std::collections::BTreeSet<usize> {
        items.iter().copied().collect()
    }

    fn two_layer_4() -> LayerPartition {
        LayerPartition::singletons_and_contiguous(4, 2).unwrap()
    }

    #[test]
    fn fdp_hat_direct_substitution() {
        let p = LayerPartition::singletons(10).unwrap();
        let mut e = vec![0.0; 10];
        for ev in e.iter_mut().take(4) {
            *ev = 60.0;
        }
        let table = EValueTable::new(vec![e], &p).unwrap();
        let t = ThresholdVector::new(vec![50.0]).unwrap();
        assert_eq!(fdp_hat_layer(&table, &t, &p, 1).unwrap(), 0.05);
    }

    #[test]
    fn fdp_hat_infinite_threshold_is_zero() {
        let p = LayerPartition::singletons(10).unwrap();
        let table = EValueTable::new(vec![vec![100.0; 10]], &p).unwrap();
        let t = ThresholdVector::new(vec![f64::INFINITY]).unwrap();
        assert_eq!(fdp_hat_layer(&table, &t, &p, 1).unwrap(), 0.0);
    }

    #[test]
    fn fdp_hat_empty_selection_denominator_guard() {
        let p = LayerPartition::singletons(4).unwrap();
        let table = EValueTable::new(vec![vec![0.5; 4]], &p).unwrap();
        let t = ThresholdVector::new(vec![2.0]).unwrap();
        assert_eq!(fdp_hat_layer(&table, &t, &p, 1).unwrap(), 2.0);
    }

    #[test]
    fn candidate_selection_requires_every_layer() {
        let p = two_layer_4();
        let table =
            EValueTable::new(vec![vec![8.0, 0.0, 8.0, 0.0], vec![2.0, 0.0]], &p).unwrap();
        let t = ThresholdVector::new(vec![2.0, 2.0]).unwrap();
        assert_eq!(candidate_selection(&table, &t, &p).unwrap(), set(&[1]));
    }

    #[test]
    fn candidate_selection_vacuous_thresholds() {
        let p = two_layer_4();
        let table =
            EValueTable::new(vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.5, 2.5]], &p).unwrap();
        let t = ThresholdVector::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(candidate_selection(&table, &t, &p).unwrap(), set(&[1, 2, 3, 4]));
    }

    #[test]
    fn candidate_selection_infinite_threshold_empty() {
        let p = two_layer_4();
        let table =
            EValueTable::new(vec![vec![8.0, 8.0, 8.0, 8.0], vec![8.0, 8.0]], &p).unwrap();
        let t = ThresholdVector::new(vec![1.0, f64::INFINITY]).unwrap();
        assert!(candidate_selection(&table, &t, &p).unwrap().is_empty());
    }

    #[test]
    fn efilter_hand_trace_agreement() {
        let p = two_layer_4();
        let table =
            EValueTable::new(vec![vec![8.0, 0.0, 8.0, 0.0], vec![4.0, 0.0]], &p).unwrap();
        let levels = FilterLevels::new(vec![0.5, 0.5]).unwrap();
        let r = generalized_efilter(&table, &levels, &p).unwrap();
        assert_eq!(r.thresholds.values, vec![8.0, 4.0]);
        assert_eq!(r.selected_features, set(&[1]));
        assert!(r.is_consistent(&p));
    }

    #[test]
    fn efilter_hand_trace_layer_conflict() {
        let p = two_layer_4();
        let table =
            EValueTable::new(vec![vec![8.0, 0.0, 8.0, 0.0], vec![2.0, 0.0]], &p).unwrap();
        let levels = FilterLevels::new(vec![0.5, 0.5]).unwrap();
        let r = generalized_efilter(&table, &levels, &p).unwrap();
        assert!(r.selected_features.is_empty());
    }

    // With all-zero e-values nothing clears any threshold; the minimal
    // admissible vector is still finite (k = 1 is always admissible), so the
    // filter reports t = G/α with an empty selection.
    #[test]
    fn efilter_all_zero_evalues() {
        let p = two_layer_4();
        let table = EValueTable::new(vec![vec![0.0; 4], vec![0.0; 2]], &p).unwrap();
        let levels = FilterLevels::new(vec![0.5, 0.5]).unwrap();
        let r = generalized_efilter(&table, &levels, &p).unwrap();
        assert!(r.selected_features.is_empty());
        assert_eq!(r.thresholds.values, vec![4.0 / 0.5, 2.0 / 0.5]);
    }

    #[test]
    fn ebh_selects_only_top_value() {
        let s = generalized_ebh(&[10.0, 2.0, 0.5, 0.0], 0.5).unwrap();
        assert_eq!(s, set(&[1]));
    }

    #[test]
    fn ebh_selects_all_when_uniformly_large() {
        let s = generalized_ebh(&[4.0, 4.0, 4.0, 4.0], 0.5).unwrap();
        assert_eq!(s, set(&[1, 2, 3, 4]));
    }

    #[test]
    fn ebh_all_zero() {
        assert!(generalized_ebh(&[0.0, 0.0, 0.0], 0.2).unwrap().is_empty());
    }

    #[test]
    fn efilter_matches_ebh_on_single_singleton_layer() {
        let p = LayerPartition::singletons(6).unwrap();
        let evs = vec![vec![12.0, 7.5, 3.0, 3.0, 0.4, 0.0]];
        for alpha in [0.05, 0.1, 0.25, 0.5, 0.9] {
            let table = EValueTable::new(evs.clone(), &p).unwrap();
            let levels = FilterLevels::new(vec![alpha]).unwrap();
            let filtered = generalized_efilter(&table, &levels, &p).unwrap();
            let ebh = generalized_ebh(&evs[0], alpha).unwrap();
            assert_eq!(filtered.selected_features, ebh, "alpha={alpha}");
        }
    }
}
