//! Named simulation presets: correlation and signal-strength sweeps on the
//! block-correlated two-layer design, a desk-scale variant, and the
//! single-layer method comparison.

use efdr::error::{Error, Result};
use efdr::simlab::{ExperimentPoint, MethodSettings, SimDesign, SimMethod};

pub struct SimulatePlan {
    pub points: Vec<ExperimentPoint>,
    pub methods: Vec<SimMethod>,
    pub settings: MethodSettings,
    pub trials: usize,
}

fn two_layer_design(n: usize, features: usize, groups: usize, rho: f64, delta: f64) -> SimDesign {
    SimDesign {
        n,
        num_features: features,
        num_groups: groups,
        rho,
        delta,
        n_signals: 60,
        n_signal_groups: 20,
        noise_sd: 1.0,
    }
}

const MULTILAYER_METHODS: [SimMethod; 3] =
    [SimMethod::MkfPlus { c: 1.0 }, SimMethod::EdsGkf { c: 1.0 }, SimMethod::EdsGkf { c: 1.93 }];

pub fn preset(name: &str) -> Result<SimulatePlan> {
    match name {
        // Correlation sweep at medium signal strength.
        "corr-sweep" => Ok(SimulatePlan {
            points: [0.0, 0.2, 0.4, 0.6, 0.8]
                .iter()
                .map(|&rho| ExperimentPoint {
                    param_name: "rho".into(),
                    param_value: rho,
                    design: two_layer_design(1600, 800, 80, rho, 5.0),
                })
                .collect(),
            methods: MULTILAYER_METHODS.to_vec(),
            settings: MethodSettings::default(),
            trials: 50,
        }),
        // Signal-strength sweep at high correlation.
        "signal-sweep" => Ok(SimulatePlan {
            points: [3.0, 4.0, 5.0, 6.0, 7.0]
                .iter()
                .map(|&delta| ExperimentPoint {
                    param_name: "delta".into(),
                    param_value: delta,
                    design: two_layer_design(1600, 800, 80, 0.7, delta),
                })
                .collect(),
            methods: MULTILAYER_METHODS.to_vec(),
            settings: MethodSettings::default(),
            trials: 50,
        }),
        // Correlation sweep at weak signal strength.
        "corr-sweep-weak" => Ok(SimulatePlan {
            points: [0.0, 0.2, 0.4, 0.6, 0.8]
                .iter()
                .map(|&rho| ExperimentPoint {
                    param_name: "rho".into(),
                    param_value: rho,
                    design: two_layer_design(1600, 800, 80, rho, 3.0),
                })
                .collect(),
            methods: MULTILAYER_METHODS.to_vec(),
            settings: MethodSettings::default(),
            trials: 50,
        }),
        // Reduced-size single point for quick runs and CI.
        "desk" => Ok(SimulatePlan {
            points: vec![ExperimentPoint {
                param_name: "rho".into(),
                param_value: 0.6,
                design: SimDesign {
                    n: 600,
                    num_features: 300,
                    num_groups: 30,
                    rho: 0.6,
                    delta: 5.0,
                    n_signals: 24,
                    n_signal_groups: 8,
                    noise_sd: 1.0,
                },
            }],
            methods: MULTILAYER_METHODS.to_vec(),
            settings: MethodSettings {
                alphas: vec![0.2, 0.2],
                alpha0s: vec![0.1, 0.1],
                ds_replications: 20,
            },
            trials: 30,
        }),
        // Feature-resolution comparison of one-shot, multiple, and e-value
        // data splitting across signal strengths.
        "single-layer-compare" => Ok(SimulatePlan {
            points: [4.0, 5.0, 6.0, 7.0, 8.0, 9.0]
                .iter()
                .map(|&delta| ExperimentPoint {
                    param_name: "delta".into(),
                    param_value: delta,
                    design: SimDesign {
                        n: 1000,
                        num_features: 800,
                        num_groups: 10,
                        rho: 0.5,
                        delta,
                        n_signals: 80,
                        n_signal_groups: 10,
                        noise_sd: 1.0,
                    },
                })
                .collect(),
            methods: vec![SimMethod::Ds, SimMethod::Mds, SimMethod::EdsFilter],
            settings: MethodSettings {
                alphas: vec![0.1, 0.1],
                alpha0s: vec![0.05, 0.05],
                ds_replications: 50,
            },
            trials: 50,
        }),
        other => Err(Error::invalid_input(format!(
            "unknown preset '{other}' (expected corr-sweep, signal-sweep, corr-sweep-weak, desk, or single-layer-compare)"
        ))),
    }
}
