//! End-to-end detection pipelines: single-pass and derandomized multilayer
//! filtering, the data-splitting and knockoff specializations, and the
//! alternate derandomization that replicates a whole multilayer run.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::efilter::{generalized_efilter, EValueTable, FilterLevels};
use crate::error::{Error, Result};
use crate::evalue::{
    aggregate_evalues, evalues_from_multilayer_run, evalues_from_outcome, DetectionOutcome,
    ReplicationWeights,
};
use crate::knockoff::{knockoff_detect, mkf_plus};
use crate::mirror::{ds_detect, GroupStatMode};
use crate::model::{Dataset, LayerPartition, SelectionResult};
use crate::regression::ols;
use crate::seeds;

/// Which single-layer detector a layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseProcedure {
    /// Data splitting with Lasso+OLS mirror statistics.
    Ds { mode: GroupStatMode },
    /// Fixed-design group knockoffs with entry-time statistics.
    Knockoff,
    /// Benjamini-Hochberg on OLS t-test p-values (needs n > N + 1).
    Bh,
}

/// Per-layer pipeline settings.
#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub base: BaseProcedure,
    /// Original FDR level α₀ the base procedure runs at.
    pub alpha0: f64,
    /// Target FDR level α for the final filter.
    pub alpha: f64,
    pub replications: usize,
    /// Aggregation weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub partition: LayerPartition,
    pub layers: Vec<LayerConfig>,
    /// Expansion factor c ≥ 1 applied to the target levels.
    pub expansion: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.partition.num_layers() {
            return Err(Error::invalid_input(format!(
                "{} layer configs for {} partition layers",
                self.layers.len(),
                self.partition.num_layers()
            )));
        }
        if !(self.expansion >= 1.0 && self.expansion.is_finite()) {
            return Err(Error::invalid_input("expansion factor must be ≥ 1"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !(layer.alpha0 > 0.0 && layer.alpha0 < 1.0) {
                return Err(Error::invalid_input(format!("layer {}: alpha0 out of (0,1)", i + 1)));
            }
            if !(layer.alpha > 0.0 && layer.alpha < 1.0) {
                return Err(Error::invalid_input(format!("layer {}: alpha out of (0,1)", i + 1)));
            }
            if !(self.expansion * layer.alpha < 1.0) {
                return Err(Error::invalid_input(format!(
                    "layer {}: expanded target level {} not below 1",
                    i + 1,
                    self.expansion * layer.alpha
                )));
            }
            if layer.replications == 0 {
                return Err(Error::invalid_input(format!("layer {}: needs ≥ 1 replication", i + 1)));
            }
            if let Some(w) = &layer.weights {
                if w.len() != layer.replications {
                    return Err(Error::invalid_input(format!(
                        "layer {}: {} weights for {} replications",
                        i + 1,
                        w.len(),
                        layer.replications
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target levels after the expansion factor.
    pub fn effective_alphas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| self.expansion * l.alpha).collect()
    }

    fn layer_weights(&self, m: usize) -> Result<ReplicationWeights> {
        let layer = &self.layers[m - 1];
        match &layer.weights {
            Some(w) => ReplicationWeights::new(w.clone()),
            None => ReplicationWeights::uniform(layer.replications),
        }
    }
}

/// One pipeline run: the selection, the evidence that produced it, and
/// run diagnostics.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub selection: SelectionResult,
    pub aggregated_evalues: EValueTable,
    pub effective_alphas: Vec<f64>,
    pub per_layer_outcomes: Vec<Vec<DetectionOutcome>>,
    pub diagnostics: PipelineDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineDiagnostics {
    /// Support columns dropped from half-B OLS fits, per layer then replication.
    pub dropped_collinear: Vec<Vec<Vec<usize>>>,
    /// For single-replication runs: whether t̂^(m)·V̂^(m) ≤ G^(m) held, the
    /// condition under which binary e-values can coordinate across layers.
    pub threshold_vhat_ok: Option<Vec<bool>>,
    pub elapsed: Duration,
}

impl PipelineReport {
    /// The report invariant: its selection must equal the generalized
    /// e-filter applied to its own aggregated e-values at its own levels.
    pub fn verify_internal_consistency(&self, partition: &LayerPartition) -> Result<bool> {
        let levels = FilterLevels::new(self.effective_alphas.clone())?;
        let redo = generalized_efilter(&self.aggregated_evalues, &levels, partition)?;
        Ok(redo.selected_features == self.selection.selected_features
            && self.selection.is_consistent(partition))
    }
}

/// Two-sided OLS t-test p-values on the centered full design, then BH input
/// p-values per group via Simes combination for non-singleton layers.
fn ols_t_pvalues(dataset: &Dataset) -> Result<Vec<f64>> {
    let n = dataset.n();
    let p = dataset.num_features();
    if n <= p + 1 {
        return Err(Error::invalid_input(
            "the BH base needs n > N + 1 for full-design OLS t-tests",
        ));
    }
    let mut x = dataset.design.clone();
    for j in 0..p {
        let mean = x.column(j).iter().sum::<f64>() / n as f64;
        x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
    }
    let y_mean = dataset.response.iter().sum::<f64>() / n as f64;
    let y = dataset.response.map(|v| v - y_mean);
    let support: BTreeSet<usize> = (1..=p).collect();
    let beta = ols(&x, &y, &support)?;
    let residual = &y - &x * &beta;
    let df = (n - p - 1) as f64;
    let sigma2 = residual.norm_squared() / df;
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::numerical("Gram matrix not invertible for t-tests"))?;
    let mut pvals = Vec::with_capacity(p);
    for j in 0..p {
        let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
        let t = beta[j] / se;
        pvals.push(student_t_two_sided(t, df));
    }
    Ok(pvals)
}

/// Two-sided tail of Student's t via the regularized incomplete beta
/// function (continued-fraction evaluation).
fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    (incomplete_beta_reg(df / 2.0, 0.5, x)).clamp(0.0, 1.0)
}

fn incomplete_beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - (front * beta_continued_fraction(b, a, 1.0 - x) / b)
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let num1 = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num1 * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num1 / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let num2 = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num2 * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num2 / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-12 {
            break;
        }
    }
    h
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Simes p-value for a group: min_k (|g|/k) p_(k).
fn simes(pvals: &[f64]) -> f64 {
    let mut sorted = pvals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let g = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| g * p / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min)
        .min(1.0)
}

/// BH step-up at level α₀ with V̂ = N·t_α (t_α the selected p-value cut),
/// plus the corresponding e-values.
pub fn bh_detect(p_values: &[f64], alpha0: f64) -> Result<(DetectionOutcome, Vec<f64>)> {
    if !(alpha0 > 0.0 && alpha0 < 1.0) {
        return Err(Error::invalid_input("alpha0 must lie in (0, 1)"));
    }
    if p_values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid_input("p-values must lie in [0, 1]"));
    }
    let n = p_values.len();
    if n == 0 {
        return Err(Error::invalid_input("no p-values supplied"));
    }
    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut k_hat = 0usize;
    for k in (1..=n).rev() {
        if sorted[k - 1] <= alpha0 * k as f64 / n as f64 {
            k_hat = k;
            break;
        }
    }
    let (rejections, v_hat): (BTreeSet<usize>, f64) = if k_hat == 0 {
        (BTreeSet::new(), 0.0)
    } else {
        let cut = alpha0 * k_hat as f64 / n as f64;
        ((1..=n).filter(|&j| p_values[j - 1] <= cut).collect(), alpha0 * k_hat as f64)
    };
    let outcome = DetectionOutcome::new(n, rejections, v_hat, alpha0)?;
    let evalues = evalues_from_outcome(&outcome);
    Ok((outcome, evalues))
}

struct BaseRun {
    outcome: DetectionOutcome,
    evalues: Vec<f64>,
    dropped_collinear: Vec<usize>,
}

fn run_base_once(
    dataset: &Dataset,
    partition: &LayerPartition,
    m: usize,
    base: &BaseProcedure,
    alpha0: f64,
    seed: u64,
) -> Result<BaseRun> {
    match base {
        BaseProcedure::Ds { mode } => {
            let det = ds_detect(dataset, partition, m, alpha0, *mode, seed)?;
            Ok(BaseRun {
                outcome: det.outcome,
                evalues: det.evalues,
                dropped_collinear: det.dropped_collinear,
            })
        }
        BaseProcedure::Knockoff => {
            let det = knockoff_detect(dataset, partition, m, alpha0)?;
            Ok(BaseRun { outcome: det.outcome, evalues: det.evalues, dropped_collinear: vec![] })
        }
        BaseProcedure::Bh => {
            let feature_pvals = ols_t_pvalues(dataset)?;
            let layer = partition.layer(m)?;
            let group_pvals: Vec<f64> = layer
                .groups()
                .iter()
                .map(|members| {
                    let ps: Vec<f64> = members.iter().map(|&j| feature_pvals[j - 1]).collect();
                    simes(&ps)
                })
                .collect();
            let (outcome, evalues) = bh_detect(&group_pvals, alpha0)?;
            Ok(BaseRun { outcome, evalues, dropped_collinear: vec![] })
        }
    }
}

/// The derandomized flexible e-filter: each layer's base procedure runs
/// R^(m) times with derived seeds, the per-run e-values are averaged with
/// the layer's weights, and the generalized e-filter is applied at the
/// (expanded) target levels.
pub fn run_dfefp(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    if dataset.num_features() != config.partition.num_features() {
        return Err(Error::invalid_input("dataset and partition disagree on feature count"));
    }
    let start = Instant::now();
    let m_count = config.partition.num_layers();
    let mut aggregated_layers = Vec::with_capacity(m_count);
    let mut per_layer_outcomes = Vec::with_capacity(m_count);
    let mut dropped = Vec::with_capacity(m_count);
    for m in 1..=m_count {
        let layer_cfg = &config.layers[m - 1];
        let runs: Vec<Result<BaseRun>> = (0..layer_cfg.replications)
            .into_par_iter()
            .map(|r| {
                let seed = seeds::derive(config.seed, m as u64, r as u64);
                run_base_once(dataset, &config.partition, m, &layer_cfg.base, layer_cfg.alpha0, seed)
            })
            .collect();
        let mut outcomes = Vec::with_capacity(layer_cfg.replications);
        let mut tables = Vec::with_capacity(layer_cfg.replications);
        let mut layer_dropped = Vec::with_capacity(layer_cfg.replications);
        for run in runs {
            let run = run.map_err(|e| e.in_layer(m))?;
            tables.push(run.evalues);
            outcomes.push(run.outcome);
            layer_dropped.push(run.dropped_collinear);
        }
        let weights = config.layer_weights(m)?;
        aggregated_layers.push(aggregate_evalues(&tables, &weights)?);
        per_layer_outcomes.push(outcomes);
        dropped.push(layer_dropped);
    }

    let aggregated = EValueTable::new(aggregated_layers, &config.partition)?;
    let effective_alphas = config.effective_alphas();
    let levels = FilterLevels::new(effective_alphas.clone())?;
    let selection = generalized_efilter(&aggregated, &levels, &config.partition)?;

    let threshold_vhat_ok = if config.layers.iter().all(|l| l.replications == 1) {
        Some(
            (0..m_count)
                .map(|m0| {
                    let g = config.partition.layers()[m0].group_count() as f64;
                    selection.thresholds.values[m0] * per_layer_outcomes[m0][0].v_hat <= g
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(PipelineReport {
        selection,
        aggregated_evalues: aggregated,
        effective_alphas,
        per_layer_outcomes,
        diagnostics: PipelineDiagnostics {
            dropped_collinear: dropped,
            threshold_vhat_ok,
            elapsed: start.elapsed(),
        },
    })
}

/// Single-pass variant: every layer runs its base procedure exactly once.
pub fn run_fefp(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineReport> {
    if config.layers.iter().any(|l| l.replications != 1) {
        return Err(Error::invalid_input("single-pass pipeline requires one replication per layer"));
    }
    run_dfefp(dataset, config)
}

/// Data splitting at every layer.
pub fn run_eds_filter(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineReport> {
    if config.layers.iter().any(|l| !matches!(l.base, BaseProcedure::Ds { .. })) {
        return Err(Error::invalid_input("this pipeline requires the data-splitting base everywhere"));
    }
    run_dfefp(dataset, config)
}

/// Data splitting at the feature layer, group knockoffs above, with the
/// target levels expanded by `c`.
pub fn run_eds_gkf(dataset: &Dataset, config: &PipelineConfig, c: f64) -> Result<PipelineReport> {
    if config.partition.num_layers() < 2 {
        return Err(Error::invalid_input("this pipeline needs at least two layers"));
    }
    if !matches!(config.layers[0].base, BaseProcedure::Ds { .. }) {
        return Err(Error::invalid_input("layer 1 must use the data-splitting base"));
    }
    if config.layers[1..].iter().any(|l| !matches!(l.base, BaseProcedure::Knockoff)) {
        return Err(Error::invalid_input("layers above the first must use the knockoff base"));
    }
    let cfg = PipelineConfig { expansion: c, ..config.clone() };
    run_dfefp(dataset, &cfg)
}

/// The inner multilayer procedure replicated by [`run_alt_derand`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AltInner {
    Fefp,
    Mkf { c: f64 },
}

/// Alternate derandomization: replicate a COMPLETE multilayer procedure R
/// times at the original levels γ^(m) = α₀^(m), convert each run's
/// per-layer rejections and V̂ into e-values, average, and filter at the
/// target levels.
pub fn run_alt_derand(
    dataset: &Dataset,
    config: &PipelineConfig,
    inner: AltInner,
) -> Result<PipelineReport> {
    config.validate()?;
    let replications = config.layers[0].replications;
    if config.layers.iter().any(|l| l.replications != replications) {
        return Err(Error::invalid_input(
            "whole-procedure derandomization uses one replication count across layers",
        ));
    }
    let start = Instant::now();
    let partition = &config.partition;
    let m_count = partition.num_layers();
    let gammas: Vec<f64> = config.layers.iter().map(|l| l.alpha0).collect();

    let runs: Vec<Result<Vec<DetectionOutcome>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let seed = seeds::derive(config.seed, 0xA17D, r as u64);
            match inner {
                AltInner::Fefp => {
                    let inner_cfg = PipelineConfig {
                        partition: partition.clone(),
                        layers: config
                            .layers
                            .iter()
                            .map(|l| LayerConfig {
                                base: l.base,
                                alpha0: l.alpha0,
                                alpha: l.alpha0,
                                replications: 1,
                                weights: None,
                            })
                            .collect(),
                        expansion: 1.0,
                        seed,
                    };
                    let report = run_dfefp(dataset, &inner_cfg)?;
                    // V̂^[m] = G^(m)/t̂^(m) for a filter-produced selection.
                    (1..=m_count)
                        .map(|m| {
                            let g = partition.layer(m)?.group_count();
                            let v_hat = g as f64 / report.selection.thresholds.values[m - 1];
                            DetectionOutcome::new(
                                g,
                                report.selection.per_layer_groups[m - 1].clone(),
                                v_hat,
                                gammas[m - 1],
                            )
                        })
                        .collect()
                }
                AltInner::Mkf { c } => {
                    let mkf = mkf_plus(dataset, partition, &gammas, c)?;
                    (1..=m_count)
                        .map(|m| {
                            DetectionOutcome::new(
                                partition.layer(m)?.group_count(),
                                mkf.per_layer_groups[m - 1].clone(),
                                mkf.per_layer_v_hat[m - 1],
                                gammas[m - 1],
                            )
                        })
                        .collect()
                }
            }
        })
        .collect();

    let mut tables: Vec<EValueTable> = Vec::with_capacity(replications);
    let mut per_run_outcomes: Vec<Vec<DetectionOutcome>> = Vec::with_capacity(replications);
    for run in runs {
        let outcomes = run?;
        tables.push(evalues_from_multilayer_run(&outcomes, &gammas, partition)?);
        per_run_outcomes.push(outcomes);
    }

    let mut aggregated_layers = Vec::with_capacity(m_count);
    for m in 1..=m_count {
        let weights = config.layer_weights(m)?;
        let layer_tables: Vec<Vec<f64>> =
            tables.iter().map(|t| t.layer(m).to_vec()).collect();
        aggregated_layers.push(aggregate_evalues(&layer_tables, &weights)?);
    }
    let aggregated = EValueTable::new(aggregated_layers, partition)?;
    let effective_alphas = config.effective_alphas();
    let levels = FilterLevels::new(effective_alphas.clone())?;
    let selection = generalized_efilter(&aggregated, &levels, partition)?;

    // Transpose run-major outcomes into the layer-major report shape.
    let per_layer_outcomes: Vec<Vec<DetectionOutcome>> = (0..m_count)
        .map(|m0| per_run_outcomes.iter().map(|run| run[m0].clone()).collect())
        .collect();

    Ok(PipelineReport {
        selection,
        aggregated_evalues: aggregated,
        effective_alphas,
        per_layer_outcomes,
        diagnostics: PipelineDiagnostics {
            dropped_collinear: vec![],
            threshold_vhat_ok: None,
            elapsed: start.elapsed(),
        },
    })
}

/// Convenience builder for the common "DS below, knockoffs above" layout.
pub fn eds_gkf_config(
    partition: &LayerPartition,
    alphas: &[f64],
    alpha0s: &[f64],
    ds_replications: usize,
    seed: u64,
) -> Result<PipelineConfig> {
    if alphas.len() != partition.num_layers() || alpha0s.len() != partition.num_layers() {
        return Err(Error::invalid_input("one level per layer required"));
    }
    let layers = (0..partition.num_layers())
        .map(|m0| LayerConfig {
            base: if m0 == 0 {
                BaseProcedure::Ds { mode: GroupStatMode::Mean }
            } else {
                BaseProcedure::Knockoff
            },
            alpha0: alpha0s[m0],
            alpha: alphas[m0],
            replications: if m0 == 0 { ds_replications } else { 1 },
            weights: None,
        })
        .collect();
    Ok(PipelineConfig { partition: partition.clone(), layers, expansion: 1.0, seed })
}

/// A dataset whose centered design is reusable across pipelines.
pub fn centered_design(dataset: &Dataset) -> DMatrix<f64> {
    let mut x = dataset.design.clone();
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let mean = x.column(j).iter().sum::<f64>() / n;
        x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
    }
    x
}
