//! TOML run configuration. Every field a CLI flag can set has a config
//! counterpart; flags override the file.

use std::path::Path;

use efdr::error::{Error, Result};
use efdr::simlab::{ExperimentPoint, SimDesign};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional sanity check against the invoked subcommand.
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub formats: Option<Vec<String>>,
    pub simulate: Option<SimulateSection>,
    pub analyze: Option<AnalyzeSection>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Option<String>,
    pub trials: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub ds_replications: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub alpha0s: Option<Vec<f64>>,
    pub design: Option<DesignSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub n: usize,
    pub features: usize,
    pub groups: usize,
    pub signals: usize,
    pub signal_groups: usize,
    pub noise_sd: Option<f64>,
    /// Grids; the sweep parameter is whichever list has length > 1
    /// (or rho when both are singletons).
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub data: Option<String>,
    pub groups: Option<String>,
    pub response: Option<String>,
    pub panel: Option<bool>,
    pub min_count: Option<usize>,
    pub method: Option<String>,
    pub c: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub alpha0s: Option<Vec<f64>>,
    pub replications: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

impl DesignSection {
    /// Expands the rho × delta grids into experiment points. Exactly one of
    /// the two lists may have length > 1.
    pub fn points(&self) -> Result<Vec<ExperimentPoint>> {
        if self.rho.is_empty() || self.delta.is_empty() {
            return Err(Error::invalid_input("design grids must be nonempty"));
        }
        if self.rho.len() > 1 && self.delta.len() > 1 {
            return Err(Error::invalid_input("sweep either rho or delta, not both"));
        }
        let noise_sd = self.noise_sd.unwrap_or(1.0);
        let mk = |rho: f64, delta: f64| SimDesign {
            n: self.n,
            num_features: self.features,
            num_groups: self.groups,
            rho,
            delta,
            n_signals: self.signals,
            n_signal_groups: self.signal_groups,
            noise_sd,
        };
        let points = if self.rho.len() > 1 {
            self.rho
                .iter()
                .map(|&rho| ExperimentPoint {
                    param_name: "rho".into(),
                    param_value: rho,
                    design: mk(rho, self.delta[0]),
                })
                .collect()
        } else {
            self.delta
                .iter()
                .map(|&delta| ExperimentPoint {
                    param_name: "delta".into(),
                    param_value: delta,
                    design: mk(self.rho[0], delta),
                })
                .collect()
        };
        Ok(points)
    }
}
