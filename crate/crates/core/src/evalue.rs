//! Generalized e-value construction from base-procedure outcomes and
//! weighted aggregation of replicated runs.

use std::collections::BTreeSet;

use crate::efilter::EValueTable;
use crate::error::{Error, Result};
use crate::model::LayerPartition;

/// One run of a base detection procedure at one layer: the rejected groups
/// and the estimated count of false rejections at the chosen threshold.
///
/// `v_hat` is a real, not an integer: knockoff-style estimates carry a +1
/// offset and multilayer-knockoff ones a multiplicative constant.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub layer_size: usize,
    pub rejections: BTreeSet<usize>,
    pub v_hat: f64,
    pub original_level: f64,
}

impl DetectionOutcome {
    pub fn new(
        layer_size: usize,
        rejections: BTreeSet<usize>,
        v_hat: f64,
        original_level: f64,
    ) -> Result<Self> {
        if layer_size == 0 {
            return Err(Error::invalid_input("layer size must be positive"));
        }
        if let Some(&max) = rejections.iter().next_back() {
            if max > layer_size {
                return Err(Error::invalid_input(format!(
                    "rejection {max} out of range for {layer_size} hypotheses"
                )));
            }
        }
        if rejections.contains(&0) {
            return Err(Error::invalid_input("group indices are 1-based"));
        }
        if !(v_hat.is_finite() && v_hat >= 0.0) {
            return Err(Error::invalid_input("v_hat must be finite and nonnegative"));
        }
        if !(original_level > 0.0 && original_level < 1.0) {
            return Err(Error::invalid_input("original level must lie in (0, 1)"));
        }
        Ok(DetectionOutcome { layer_size, rejections, v_hat, original_level })
    }
}

/// e_g = G · 1{g ∈ rejections} / (v_hat ∨ α₀).
pub fn evalues_from_outcome(outcome: &DetectionOutcome) -> Vec<f64> {
    let g_count = outcome.layer_size as f64;
    let denom = outcome.v_hat.max(outcome.original_level);
    (1..=outcome.layer_size)
        .map(|g| if outcome.rejections.contains(&g) { g_count / denom } else { 0.0 })
        .collect()
}

/// The conservative alternative e′_g = G · 1{g ∈ rejections} / (α₀ · (R ∨ 1)),
/// which never exceeds [`evalues_from_outcome`] when the outcome satisfies
/// its own FDP constraint.
pub fn conservative_evalues_from_outcome(outcome: &DetectionOutcome) -> Vec<f64> {
    let g_count = outcome.layer_size as f64;
    let denom = outcome.original_level * outcome.rejections.len().max(1) as f64;
    (1..=outcome.layer_size)
        .map(|g| if outcome.rejections.contains(&g) { g_count / denom } else { 0.0 })
        .collect()
}

/// Normalized replication weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationWeights {
    weights: Vec<f64>,
}

impl ReplicationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid_input("at least one weight required"));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::invalid_input("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid_input(format!("weights sum to {sum}, expected 1")));
        }
        Ok(ReplicationWeights { weights })
    }

    pub fn uniform(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid_input("at least one replication required"));
        }
        ReplicationWeights::new(vec![1.0 / r as f64; r])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Weighted average of per-replication e-value vectors: ē_g = Σ_r ω_r e_{g,r}.
pub fn aggregate_evalues(tables: &[Vec<f64>], weights: &ReplicationWeights) -> Result<Vec<f64>> {
    if tables.is_empty() {
        return Err(Error::invalid_input("no e-value vectors to aggregate"));
    }
    if tables.len() != weights.len() {
        return Err(Error::invalid_input(format!(
            "{} e-value vectors but {} weights",
            tables.len(),
            weights.len()
        )));
    }
    let len = tables[0].len();
    if tables.iter().any(|t| t.len() != len) {
        return Err(Error::invalid_input("e-value vectors differ in length"));
    }
    let mut out = vec![0.0; len];
    for (table, &w) in tables.iter().zip(weights.as_slice()) {
        for (acc, &e) in out.iter_mut().zip(table) {
            *acc += w * e;
        }
    }
    Ok(out)
}

/// E-values from ONE complete multilayer run: the per-layer outcomes must
/// carry the layer-m rejected groups and layer-m V-hat of that joint run.
/// e_g^(m) = G^(m) · 1{g ∈ rejections^(m)} / (V-hat^(m) ∨ γ^(m)).
pub fn evalues_from_multilayer_run(
    per_layer: &[DetectionOutcome],
    gammas: &[f64],
    partition: &LayerPartition,
) -> Result<EValueTable> {
    if per_layer.len() != partition.num_layers() {
        return Err(Error::invalid_input(format!(
            "{} layer outcomes for {} layers",
            per_layer.len(),
            partition.num_layers()
        )));
    }
    if gammas.len() != per_layer.len() {
        return Err(Error::invalid_input("one gamma per layer required"));
    }
    let mut layers = Vec::with_capacity(per_layer.len());
    for (mi, (outcome, &gamma)) in per_layer.iter().zip(gammas).enumerate() {
        let expected = partition.layer(mi + 1)?.group_count();
        if outcome.layer_size != expected {
            return Err(Error::invalid_input(format!(
                "layer {}: outcome covers {} groups, partition has {}",
                mi + 1,
                outcome.layer_size,
                expected
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid_input("gamma levels must lie in (0, 1)"));
        }
        let g_count = outcome.layer_size as f64;
        let denom = outcome.v_hat.max(gamma);
        layers.push(
            (1..=outcome.layer_size)
                .map(|g| if outcome.rejections.contains(&g) { g_count / denom } else { 0.0 })
                .collect(),
        );
    }
    EValueTable::new(layers, partition)
}
