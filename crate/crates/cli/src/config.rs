//! Experiment configuration: a single human-editable TOML document per run.
//! Every numeric parameter echoes into the run record; validation reports
//! every violated field at once.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// simulate | pressure | rate | oracle | couple | probes | entropy
    pub kind: String,
    pub master_seed: u64,
    /// Output directory; when absent, a directory under DVNS_OUTPUT_ROOT
    /// (default `runs/`) named from the config hash.
    pub output: Option<PathBuf>,
    pub model: Option<ModelRef>,
    pub chain: Option<ChainRef>,
    pub simulate: Option<SimulateParams>,
    pub pressure: Option<PressureParams>,
    pub rate: Option<RateParams>,
    pub oracle: Option<OracleParams>,
    pub couple: Option<CoupleParams>,
    pub probes: Option<ProbesParams>,
    pub entropy: Option<EntropyParams>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    /// "torus" builds the 2D torus truncation; "file" loads a model document.
    pub source: String,
    pub max_wavenumber: Option<u32>,
    pub noise_amplitude: Option<f64>,
    pub forcing_amplitude: Option<f64>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRef {
    /// "discrete" or "continuous"; ignored when `path` is given.
    pub clocking: Option<String>,
    pub rows: Option<Vec<Vec<f64>>>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub count: usize,
    pub dt: f64,
    pub horizon: f64,
    /// "gaussian" (scale required) or "fixed" (u0 required).
    pub initial: String,
    pub initial_scale: Option<f64>,
    pub u0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PressureParams {
    /// State potential values per chain state (chain-mode pressure).
    pub potential: Vec<f64>,
    pub t_list: Vec<f64>,
    pub count: usize,
    pub initial_state: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    pub lambda: Vec<f64>,
    pub budget: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    pub potential: Vec<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleParams {
    pub n_level: usize,
    pub a: f64,
    pub separation: f64,
    pub horizon: f64,
    pub dt: f64,
    pub slack_coefficient: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesParams {
    /// "recurrence" | "moment"
    pub probe: String,
    pub count: usize,
    pub dt: f64,
    pub u0: Vec<f64>,
    // recurrence
    pub kappa: Option<f64>,
    pub radius: Option<f64>,
    pub horizon: Option<f64>,
    // moment
    pub exponent: Option<u32>,
    pub t_grid: Option<Vec<f64>>,
    pub window: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyParams {
    /// Rows of the perturbed kernel Q (the reference chain comes from
    /// `[chain]`).
    pub q_rows: Vec<Vec<f64>>,
    pub horizon_t: u32,
    pub budget: Option<usize>,
}

pub const KINDS: [&str; 7] = [
    "simulate", "pressure", "rate", "oracle", "couple", "probes", "entropy",
];

/// Validate the configuration shape; returns every violated field.
pub fn validate(config: &Config) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    if !KINDS.contains(&config.kind.as_str()) {
        errors.push(format!(
            "kind: unknown experiment kind {:?} (expected one of {:?})",
            config.kind, KINDS
        ));
    }
    let needs_model = matches!(config.kind.as_str(), "simulate" | "couple" | "probes");
    let needs_chain = matches!(
        config.kind.as_str(),
        "pressure" | "rate" | "oracle" | "entropy"
    );
    if needs_model && config.model.is_none() {
        errors.push("model: required for this kind".into());
    }
    if needs_chain && config.chain.is_none() {
        errors.push("chain: required for this kind".into());
    }
    if let Some(model) = &config.model {
        match model.source.as_str() {
            "torus" => {
                if model.max_wavenumber.is_none() {
                    errors.push("model.max_wavenumber: required for source = \"torus\"".into());
                }
                if model.noise_amplitude.map_or(true, |b| b <= 0.0) {
                    errors.push("model.noise_amplitude: must be positive".into());
                }
            }
            "file" => {
                if model.path.is_none() {
                    errors.push("model.path: required for source = \"file\"".into());
                }
            }
            other => errors.push(format!("model.source: unknown source {other:?}")),
        }
    }
    if let Some(chain) = &config.chain {
        if chain.path.is_none() {
            if chain.rows.is_none() {
                errors.push("chain.rows: required without chain.path".into());
            }
            match chain.clocking.as_deref() {
                Some("discrete") | Some("continuous") => {}
                other => errors.push(format!(
                    "chain.clocking: expected \"discrete\" or \"continuous\", got {other:?}"
                )),
            }
        }
    }
    match config.kind.as_str() {
        "simulate" => match &config.simulate {
            None => errors.push("simulate: section required".into()),
            Some(p) => {
                if p.count == 0 {
                    errors.push("simulate.count: must be at least 1".into());
                }
                if p.dt <= 0.0 {
                    errors.push("simulate.dt: must be positive".into());
                }
                if p.horizon < 0.0 {
                    errors.push("simulate.horizon: must be nonnegative".into());
                }
                match p.initial.as_str() {
                    "gaussian" => {
                        if p.initial_scale.is_none() {
                            errors.push("simulate.initial_scale: required for gaussian".into());
                        }
                    }
                    "fixed" => {
                        if p.u0.is_none() {
                            errors.push("simulate.u0: required for fixed".into());
                        }
                    }
                    other => errors.push(format!("simulate.initial: unknown sampler {other:?}")),
                }
            }
        },
        "pressure" => {
            if let Some(p) = &config.pressure {
                if p.t_list.len() < 3 {
                    errors.push("pressure.t_list: needs at least 3 increasing times".into());
                }
                if p.count < 2 {
                    errors.push("pressure.count: needs at least 2 samples".into());
                }
            } else {
                errors.push("pressure: section required".into());
            }
        }
        "rate" => {
            if config.rate.is_none() {
                errors.push("rate: section required".into());
            }
        }
        "oracle" => {
            if config.oracle.is_none() {
                errors.push("oracle: section required".into());
            }
        }
        "couple" => {
            if let Some(p) = &config.couple {
                if p.dt <= 0.0 {
                    errors.push("couple.dt: must be positive".into());
                }
                if p.separation > 1.0 {
                    errors.push("couple.separation: must be at most 1".into());
                }
            } else {
                errors.push("couple: section required".into());
            }
        }
        "probes" => match &config.probes {
            None => errors.push("probes: section required".into()),
            Some(p) => match p.probe.as_str() {
                "recurrence" => {
                    for (field, present) in [
                        ("probes.kappa", p.kappa.is_some()),
                        ("probes.radius", p.radius.is_some()),
                        ("probes.horizon", p.horizon.is_some()),
                    ] {
                        if !present {
                            errors.push(format!("{field}: required for recurrence"));
                        }
                    }
                }
                "moment" => {
                    for (field, present) in [
                        ("probes.exponent", p.exponent.is_some()),
                        ("probes.t_grid", p.t_grid.is_some()),
                        ("probes.window", p.window.is_some()),
                    ] {
                        if !present {
                            errors.push(format!("{field}: required for moment"));
                        }
                    }
                }
                other => errors.push(format!("probes.probe: unknown probe {other:?}")),
            },
        },
        "entropy" => {
            if config.entropy.is_none() {
                errors.push("entropy: section required".into());
            }
        }
        _ => {}
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
