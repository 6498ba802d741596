//! Shared data model: multi-resolution partitions, datasets, ground truth,
//! selections, and the FDP/power metrics used everywhere else.
//!
//! Feature and group indices are 1-based in all public interfaces.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One resolution: a complete, non-overlapping cover of `[1..=num_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Group g (1-based) is `groups[g-1]`, a sorted list of feature ids.
    groups: Vec<Vec<usize>>,
    /// `group_of[j-1]` is the group id containing feature j.
    group_of: Vec<usize>,
}

impl Layer {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g - 1]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// The group id containing feature `j` (the h(m, j) lookup).
    pub fn group_of(&self, j: usize) -> usize {
        self.group_of[j - 1]
    }
}

/// The M resolutions at which features are interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPartition {
    num_features: usize,
    layers: Vec<Layer>,
}

/// A single partition defect found by [`validate_partition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionViolation {
    EmptyGroup { layer: usize, group: usize },
    IndexOutOfRange { layer: usize, group: usize, feature: usize },
    Overlap { layer: usize, feature: usize },
    Gap { layer: usize, feature: usize },
}

impl std::fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionViolation::EmptyGroup { layer, group } => {
                write!(f, "layer {layer}: group {group} is empty")
            }
            PartitionViolation::IndexOutOfRange { layer, group, feature } => {
                write!(f, "layer {layer}: group {group} contains out-of-range feature {feature}")
            }
            PartitionViolation::Overlap { layer, feature } => {
                write!(f, "layer {layer}: feature {feature} appears in more than one group")
            }
            PartitionViolation::Gap { layer, feature } => {
                write!(f, "layer {layer}: feature {feature} is not covered by any group")
            }
        }
    }
}

/// Report-style check of a raw layer list against the partition invariants:
/// every group nonempty, indices in `[1..=num_features]`, no overlaps, no gaps.
pub fn validate_partition(num_features: usize, layers: &[Vec<Vec<usize>>]) -> Vec<PartitionViolation> {
    let mut violations = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        let layer_no = li + 1;
        let mut seen = vec![false; num_features];
        for (gi, group) in layer.iter().enumerate() {
            if group.is_empty() {
                violations.push(PartitionViolation::EmptyGroup { layer: layer_no, group: gi + 1 });
            }
            for &j in group {
                if j == 0 || j > num_features {
                    violations.push(PartitionViolation::IndexOutOfRange {
                        layer: layer_no,
                        group: gi + 1,
                        feature: j,
                    });
                } else if seen[j - 1] {
                    violations.push(PartitionViolation::Overlap { layer: layer_no, feature: j });
                } else {
                    seen[j - 1] = true;
                }
            }
        }
        for (j0, covered) in seen.iter().enumerate() {
            if !covered {
                violations.push(PartitionViolation::Gap { layer: layer_no, feature: j0 + 1 });
            }
        }
    }
    violations
}

impl LayerPartition {
    /// Builds a validated partition. Groups are stored sorted.
    pub fn new(num_features: usize, layers: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::InvalidPartition("num_features must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidPartition("at least one layer is required".into()));
        }
        let violations = validate_partition(num_features, &layers);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
            return Err(Error::InvalidPartition(msgs.join("; ")));
        }
        let built = layers
            .into_iter()
            .map(|layer| {
                let mut groups: Vec<Vec<usize>> = layer;
                for g in &mut groups {
                    g.sort_unstable();
                }
                let mut group_of = vec![0usize; num_features];
                for (gi, group) in groups.iter().enumerate() {
                    for &j in group {
                        group_of[j - 1] = gi + 1;
                    }
                }
                Layer { groups, group_of }
            })
            .collect();
        Ok(LayerPartition { num_features, layers: built })
    }

    /// The single-layer singleton partition (each feature its own group).
    pub fn singletons(num_features: usize) -> Result<Self> {
        LayerPartition::new(num_features, vec![(1..=num_features).map(|j| vec![j]).collect()])
    }

    /// Two layers: singletons, then `group_count` contiguous groups of equal size.
    pub fn singletons_and_contiguous(num_features: usize, group_count: usize) -> Result<Self> {
        if group_count == 0 || num_features % group_count != 0 {
            return Err(Error::InvalidPartition(format!(
                "{num_features} features cannot be split into {group_count} equal groups"
            )));
        }
        let size = num_features / group_count;
        let singles: Vec<Vec<usize>> = (1..=num_features).map(|j| vec![j]).collect();
        let blocks: Vec<Vec<usize>> = (0..group_count)
            .map(|g| (g * size + 1..=(g + 1) * size).collect())
            .collect();
        LayerPartition::new(num_features, vec![singles, blocks])
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, m: usize) -> Result<&Layer> {
        self.layers
            .get(m - 1)
            .ok_or_else(|| Error::invalid_input(format!("layer {m} out of range (M={})", self.layers.len())))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.group_count()).collect()
    }
}

/// Groups at layer `m` touched by the selected feature set:
/// `{g : A_g ∩ selected ≠ ∅}`.
pub fn induced_group_selection(
    selected: &BTreeSet<usize>,
    partition: &LayerPartition,
    m: usize,
) -> Result<BTreeSet<usize>> {
    let layer = partition.layer(m)?;
    Ok(selected.iter().map(|&j| layer.group_of(j)).collect())
}

/// A design matrix with its response vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        Dataset::with_names(design, response, None)
    }

    pub fn with_names(
        design: DMatrix<f64>,
        response: DVector<f64>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if design.nrows() < 2 {
            return Err(Error::invalid_input("dataset needs at least 2 observations"));
        }
        if design.ncols() < 1 {
            return Err(Error::invalid_input("dataset needs at least 1 feature"));
        }
        if design.nrows() != response.len() {
            return Err(Error::invalid_input(format!(
                "design has {} rows but response has {} entries",
                design.nrows(),
                response.len()
            )));
        }
        if design.iter().any(|v| !v.is_finite()) || response.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("dataset contains non-finite values"));
        }
        if let Some(names) = &feature_names {
            if names.len() != design.ncols() {
                return Err(Error::invalid_input("feature name count does not match design columns"));
            }
        }
        Ok(Dataset { design, response, feature_names })
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.design.ncols()
    }
}

/// The set of truly relevant features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub relevant_features: BTreeSet<usize>,
}

impl GroundTruth {
    pub fn new(relevant_features: BTreeSet<usize>) -> Self {
        GroundTruth { relevant_features }
    }

    /// Non-null groups at layer `m`: groups intersecting the relevant set.
    pub fn relevant_groups(&self, partition: &LayerPartition, m: usize) -> Result<BTreeSet<usize>> {
        induced_group_selection(&self.relevant_features, partition, m)
    }

    /// Null groups at layer `m`: groups entirely inside the null set.
    pub fn null_groups(&self, partition: &LayerPartition, m: usize) -> Result<BTreeSet<usize>> {
        let relevant = self.relevant_groups(partition, m)?;
        let layer = partition.layer(m)?;
        Ok((1..=layer.group_count()).filter(|g| !relevant.contains(g)).collect())
    }
}

/// One threshold per layer; `f64::INFINITY` means no rejection at that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub values: Vec<f64>,
}

impl ThresholdVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&t| t.is_nan() || t < 1.0) {
            return Err(Error::invalid_input("thresholds must lie in [1, +inf]"));
        }
        Ok(ThresholdVector { values })
    }
}

/// Output of a multilayer selection: features, the per-layer group
/// selections they induce, the thresholds, and the per-layer FDP estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected_features: BTreeSet<usize>,
    pub per_layer_groups: Vec<BTreeSet<usize>>,
    pub thresholds: ThresholdVector,
    pub per_layer_fdp_hat: Vec<f64>,
}

impl SelectionResult {
    /// Checks the cross-layer consistency invariant
    /// `S^(m) = {g : A_g ∩ S ≠ ∅}` for every layer.
    pub fn is_consistent(&self, partition: &LayerPartition) -> bool {
        (1..=partition.num_layers()).all(|m| {
            induced_group_selection(&self.selected_features, partition, m)
                .map(|s| s == self.per_layer_groups[m - 1])
                .unwrap_or(false)
        })
    }
}

/// Per-layer realized FDP and power of a selection against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub fdp: f64,
    pub power: f64,
    pub selected: usize,
}

/// FDP^(m) = |S^(m) ∩ H0^(m)| / (|S^(m)| ∨ 1) and
/// power^(m) = |S^(m) ∩ H1^(m)| / (|H1^(m)| ∨ 1), with H1^(m) the non-null groups.
pub fn evaluate_selection(
    selected: &BTreeSet<usize>,
    truth: &GroundTruth,
    partition: &LayerPartition,
) -> Result<Vec<LayerMetrics>> {
    if let Some(&max) = truth.relevant_features.iter().next_back() {
        if max > partition.num_features() {
            return Err(Error::invalid_input(format!(
                "ground-truth feature {max} exceeds N={}",
                partition.num_features()
            )));
        }
    }
    let mut out = Vec::with_capacity(partition.num_layers());
    for m in 1..=partition.num_layers() {
        let sel = induced_group_selection(selected, partition, m)?;
        let relevant = truth.relevant_groups(partition, m)?;
        let false_count = sel.iter().filter(|g| !relevant.contains(g)).count();
        let true_count = sel.len() - false_count;
        let fdp = false_count as f64 / (sel.len().max(1)) as f64;
        let power = true_count as f64 / relevant.len().max(1) as f64;
        out.push(LayerMetrics { fdp, power, selected: sel.len() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn validate_accepts_canonical_two_layer_partition() {
        let layers = vec![
            vec![vec![1], vec![2], vec![3], vec![4]],
            vec![vec![1, 2], vec![3, 4]],
        ];
        assert!(validate_partition(4, &layers).is_empty());
        assert!(LayerPartition::new(4, layers).is_ok());
    }

    #[test]
    fn validate_reports_overlap() {
        let layers = vec![vec![vec![1, 2], vec![2, 3], vec![4]]];
        let violations = validate_partition(4, &layers);
        assert!(violations.contains(&PartitionViolation::Overlap { layer: 1, feature: 2 }));
    }

    #[test]
    fn validate_reports_gaps() {
        let layers = vec![vec![vec![1, 2]]];
        let violations = validate_partition(4, &layers);
        assert!(violations.contains(&PartitionViolation::Gap { layer: 1, feature: 3 }));
        assert!(violations.contains(&PartitionViolation::Gap { layer: 1, feature: 4 }));
    }

    #[test]
    fn validate_reports_empty_group_and_bad_index() {
        let layers = vec![vec![vec![], vec![1, 2, 3, 4, 9]]];
        let violations = validate_partition(4, &layers);
        assert!(violations.contains(&PartitionViolation::EmptyGroup { layer: 1, group: 1 }));
        assert!(violations
            .contains(&PartitionViolation::IndexOutOfRange { layer: 1, group: 2, feature: 9 }));
    }

    fn two_layer() -> LayerPartition {
        LayerPartition::singletons_and_contiguous(4, 2).unwrap()
    }

    #[test]
    fn induced_selection_examples() {
        let p = two_layer();
        assert_eq!(induced_group_selection(&set(&[1]), &p, 2).unwrap(), set(&[1]));
        assert_eq!(induced_group_selection(&set(&[]), &p, 2).unwrap(), set(&[]));
        assert_eq!(induced_group_selection(&set(&[1, 3]), &p, 2).unwrap(), set(&[1, 2]));
        assert!(induced_group_selection(&set(&[1]), &p, 3).is_err());
    }

    #[test]
    fn evaluate_selection_singleton_layer() {
        let p = LayerPartition::singletons(4).unwrap();
        let truth = GroundTruth::new(set(&[1]));
        let m = evaluate_selection(&set(&[1, 2]), &truth, &p).unwrap();
        assert_eq!(m[0].fdp, 0.5);
        assert_eq!(m[0].power, 1.0);
    }

    #[test]
    fn evaluate_selection_empty_guard() {
        let p = LayerPartition::singletons(4).unwrap();
        let truth = GroundTruth::new(set(&[1]));
        let m = evaluate_selection(&set(&[]), &truth, &p).unwrap();
        assert_eq!(m[0].fdp, 0.0);
        assert_eq!(m[0].power, 0.0);
    }

    // A group containing any relevant feature is non-null, so selecting a null
    // feature from such a group is still a true group discovery.
    #[test]
    fn evaluate_selection_group_null_definition() {
        let p = two_layer();
        let truth = GroundTruth::new(set(&[2]));
        let m = evaluate_selection(&set(&[1]), &truth, &p).unwrap();
        assert_eq!(m[1].fdp, 0.0);
        assert_eq!(m[1].power, 1.0);
    }

    #[test]
    fn null_groups_require_all_members_null() {
        let p = two_layer();
        let truth = GroundTruth::new(set(&[2]));
        assert_eq!(truth.null_groups(&p, 2).unwrap(), set(&[2]));
        assert_eq!(truth.relevant_groups(&p, 2).unwrap(), set(&[1]));
    }

    #[test]
    fn selection_result_consistency() {
        let p = two_layer();
        let ok = SelectionResult {
            selected_features: set(&[1]),
            per_layer_groups: vec![set(&[1]), set(&[1])],
            thresholds: ThresholdVector::new(vec![2.0, 2.0]).unwrap(),
            per_layer_fdp_hat: vec![0.0, 0.0],
        };
        assert!(ok.is_consistent(&p));
        let bad = SelectionResult { per_layer_groups: vec![set(&[1]), set(&[2])], ..ok };
        assert!(!bad.is_consistent(&p));
    }
}
