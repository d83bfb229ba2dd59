//! Run dispatch and artifact management: deterministic outputs, a content
//! manifest per run, quarantine of failing runs, and a directory lock
//! against interleaved writers.

use crate::config::{self, Config};
use dvns_core::chain::{self, FiniteChain};
use dvns_core::empirical;
use dvns_core::feynman_kac::{self, ChainInitialLaw};
use dvns_core::fingerprint;
use dvns_core::galerkin::{build_torus_model, ForcingSpec, GalerkinModel, NoiseSpec};
use dvns_core::probes;
use dvns_core::rate;
use dvns_core::sde;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum RunError {
    Config(Vec<String>),
    Io(String),
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(errs) => {
                writeln!(f, "configuration invalid:")?;
                for e in errs {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
            RunError::Io(e) => write!(f, "io error: {e}"),
            RunError::Failed(e) => write!(f, "run failed: {e}"),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssertionRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub fnv64: String,
}

/// The persisted record of one run. `created_unix` is excluded from all
/// content hashing, so reruns of the same configuration produce identical
/// manifests.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub created_unix: u64,
    pub passed: bool,
    pub assertions: Vec<AssertionRecord>,
    pub artifacts: Vec<ArtifactRecord>,
}

/// Directory lock; removed on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, RunError> {
        let path = dir.join(".dvns-lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) => Err(RunError::Io(format!(
                "output directory is locked ({}): {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Collects artifacts as they are produced.
struct Workspace {
    dir: PathBuf,
    artifacts: Vec<ArtifactRecord>,
    assertions: Vec<AssertionRecord>,
}

impl Workspace {
    fn write(&mut self, name: &str, content: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, content)?;
        self.artifacts.push(ArtifactRecord {
            path: name.to_string(),
            fnv64: fingerprint::fingerprint_str(content),
        });
        Ok(())
    }

    fn assert(&mut self, name: &str, passed: bool, detail: String) {
        self.assertions.push(AssertionRecord {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os("DVNS_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_model(reference: &config::ModelRef) -> Result<GalerkinModel, RunError> {
    match reference.source.as_str() {
        "torus" => {
            let forcing = match reference.forcing_amplitude {
                Some(a) if a != 0.0 => ForcingSpec::LowestShellCos { amplitude: a },
                _ => ForcingSpec::None,
            };
            build_torus_model(
                reference.max_wavenumber.unwrap(),
                &forcing,
                &NoiseSpec::Uniform {
                    amplitude: reference.noise_amplitude.unwrap(),
                },
            )
            .map_err(|e| RunError::Failed(e.to_string()))
        }
        "file" => {
            let doc = fs::read_to_string(reference.path.as_ref().unwrap())?;
            GalerkinModel::from_document(&doc).map_err(|e| RunError::Failed(e.to_string()))
        }
        other => Err(RunError::Config(vec![format!(
            "model.source: unknown source {other:?}"
        )])),
    }
}

fn load_chain(reference: &config::ChainRef) -> Result<FiniteChain, RunError> {
    if let Some(path) = &reference.path {
        let doc = fs::read_to_string(path)?;
        return FiniteChain::from_document(&doc).map_err(|e| RunError::Failed(e.to_string()));
    }
    let rows = reference.rows.as_ref().unwrap();
    match reference.clocking.as_deref() {
        Some("discrete") => {
            FiniteChain::discrete(rows).map_err(|e| RunError::Failed(e.to_string()))
        }
        Some("continuous") => {
            FiniteChain::continuous(rows).map_err(|e| RunError::Failed(e.to_string()))
        }
        _ => unreachable!("validated"),
    }
}

/// Execute a configuration file. Returns the record; `passed` mirrors the
/// assertion summary. Artifacts of failing runs are quarantined under
/// `failed/` inside the output directory.
pub fn run(config_path: &Path) -> Result<(RunRecord, PathBuf), RunError> {
    let text = fs::read_to_string(config_path)?;
    let config: Config =
        toml::from_str(&text).map_err(|e| RunError::Config(vec![format!("parse: {e}")]))?;
    run_parsed(config, text)
}

/// Execute an in-memory configuration; `text` is the canonical document the
/// run was built from (persisted and hashed alongside the artifacts).
pub fn run_parsed(config: Config, text: String) -> Result<(RunRecord, PathBuf), RunError> {
    config::validate(&config).map_err(RunError::Config)?;
    let config_hash = fingerprint::fingerprint_str(&text);
    let out_dir = config
        .output
        .clone()
        .unwrap_or_else(|| output_root().join(format!("{}-{}", config.kind, &config_hash[..8])));
    fs::create_dir_all(&out_dir)?;
    if out_dir.join("run.toml").exists() {
        return Err(RunError::Config(vec![format!(
            "output: directory {} already holds a run record",
            out_dir.display()
        )]));
    }
    let _lock = DirLock::acquire(&out_dir)?;
    let mut ws = Workspace {
        dir: out_dir.clone(),
        artifacts: Vec::new(),
        assertions: Vec::new(),
    };
    ws.write("config.toml", &text)?;

    let outcome = dispatch(&config, &mut ws);
    if let Err(e) = &outcome {
        ws.assert("completed", false, format!("{e}"));
    }
    let passed = outcome.is_ok() && ws.all_passed();
    if !passed {
        quarantine(&mut ws)?;
    }
    let record = RunRecord {
        config_hash,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        passed,
        assertions: std::mem::take(&mut ws.assertions),
        artifacts: std::mem::take(&mut ws.artifacts),
    };
    let record_text = toml::to_string_pretty(&record).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(out_dir.join("run.toml"), record_text)?;
    Ok((record, out_dir))
}

fn quarantine(ws: &mut Workspace) -> Result<(), RunError> {
    let failed = ws.dir.join("failed");
    fs::create_dir_all(&failed)?;
    for artifact in &mut ws.artifacts {
        let from = ws.dir.join(&artifact.path);
        let to = failed.join(&artifact.path);
        if from.exists() {
            fs::rename(&from, &to)?;
        }
        artifact.path = format!("failed/{}", artifact.path);
    }
    Ok(())
}

fn dispatch(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    match config.kind.as_str() {
        "simulate" => run_simulate(config, ws),
        "oracle" => run_oracle(config, ws),
        "pressure" => run_pressure(config, ws),
        "rate" => run_rate(config, ws),
        "couple" => run_couple(config, ws),
        "probes" => run_probes(config, ws),
        "entropy" => run_entropy(config, ws),
        _ => unreachable!("validated"),
    }
}

fn run_simulate(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let model = load_model(config.model.as_ref().unwrap())?;
    let p = config.simulate.as_ref().unwrap();
    let sampler = match p.initial.as_str() {
        "gaussian" => sde::InitialSampler::GaussianIsotropic {
            scale: p.initial_scale.unwrap(),
        },
        "fixed" => sde::InitialSampler::Fixed(p.u0.clone().unwrap()),
        _ => unreachable!("validated"),
    };
    let ensemble = sde::ensemble(
        &model,
        &sampler,
        p.count,
        p.horizon,
        p.dt,
        config.master_seed,
    )
    .map_err(|e| RunError::Failed(e.to_string()))?;
    ws.write("model.txt", &model.to_document())?;
    let mut index = String::new();
    writeln!(index, "dvns-ensemble v1").unwrap();
    writeln!(index, "master_seed {}", ensemble.master_seed()).unwrap();
    writeln!(index, "requested {}", ensemble.requested()).unwrap();
    writeln!(index, "members {}", ensemble.members().len()).unwrap();
    for (i, tr) in ensemble.members().iter().enumerate() {
        let name = format!("traj_{i:05}.txt");
        ws.write(&name, &tr.to_document())?;
        writeln!(index, "member {i} {name}").unwrap();
    }
    for failure in ensemble.failures() {
        writeln!(index, "blowup {} step {}", failure.member, failure.step).unwrap();
    }
    writeln!(index, "end").unwrap();
    ws.write("ensemble.txt", &index)?;
    ws.assert(
        "no-blowups",
        ensemble.failures().is_empty(),
        format!(
            "{} of {} members blew up",
            ensemble.failures().len(),
            p.count
        ),
    );
    Ok(())
}

fn run_oracle(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let chain = load_chain(config.chain.as_ref().unwrap())?;
    let p = config.oracle.as_ref().unwrap();
    let tol = p.tolerance.unwrap_or(1e-13);
    let tilted = chain::tilt(&chain, &p.potential).map_err(|e| RunError::Failed(e.to_string()))?;
    let pf = chain::pf_eigen(&tilted, tol, 400_000).map_err(|e| RunError::Failed(e.to_string()))?;
    ws.write("chain.txt", &chain.to_document())?;
    let mut out = String::new();
    writeln!(out, "dvns-pf v1").unwrap();
    writeln!(out, "c {}", pf.c).unwrap();
    writeln!(out, "log_c {}", pf.log_c()).unwrap();
    writeln!(out, "residual {}", pf.residual).unwrap();
    writeln!(out, "iterations {}", pf.iterations).unwrap();
    write!(out, "h").unwrap();
    for v in &pf.h {
        write!(out, " {v}").unwrap();
    }
    writeln!(out).unwrap();
    write!(out, "mu").unwrap();
    for v in &pf.mu {
        write!(out, " {v}").unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "end").unwrap();
    ws.write("pf.txt", &out)?;
    ws.assert(
        "pf-residual",
        pf.residual <= 1e-10,
        format!("residual {} (tol 1e-10)", pf.residual),
    );
    Ok(())
}

fn run_pressure(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let chain = load_chain(config.chain.as_ref().unwrap())?;
    let p = config.pressure.as_ref().unwrap();
    let est = feynman_kac::chain_pressure_mc(
        &chain,
        &p.potential,
        &p.t_list,
        p.count,
        config.master_seed,
        &ChainInitialLaw::Fixed(p.initial_state),
    )
    .map_err(|e| RunError::Failed(e.to_string()))?;
    let exact =
        chain::exact_pressure(&chain, &p.potential).map_err(|e| RunError::Failed(e.to_string()))?;
    ws.write("chain.txt", &chain.to_document())?;
    let mut table = String::from("t\tlog_mean\tstd_error\tjackknife_bias\n");
    for point in &est.per_t {
        writeln!(
            table,
            "{}\t{}\t{}\t{}",
            point.t, point.log_mean, point.std_error, point.jackknife_bias
        )
        .unwrap();
    }
    ws.write("pressure.tsv", &table)?;
    let z = (est.value - exact).abs() / est.std_error.max(1e-12);
    let mut summary = String::new();
    writeln!(summary, "value {}", est.value).unwrap();
    writeln!(summary, "std_error {}", est.std_error).unwrap();
    writeln!(summary, "exact {exact}").unwrap();
    writeln!(summary, "z {z}").unwrap();
    ws.write("summary.txt", &summary)?;
    ws.assert(
        "pressure-vs-exact",
        z <= 3.0,
        format!("mc {} vs exact {exact}, |z| = {z:.2} (tol 3)", est.value),
    );
    Ok(())
}

fn run_rate(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let chain = load_chain(config.chain.as_ref().unwrap())?;
    let p = config.rate.as_ref().unwrap();
    let leg =
        rate::legendre_rate_chain(&chain, &p.lambda, p.budget, p.restarts, config.master_seed)
            .map_err(|e| RunError::Failed(e.to_string()))?;
    let var =
        rate::variational_rate_chain(&chain, &p.lambda, p.budget, p.restarts, config.master_seed)
            .map_err(|e| RunError::Failed(e.to_string()))?;
    ws.write("chain.txt", &chain.to_document())?;
    let mut out = String::new();
    write!(out, "target_measure").unwrap();
    for l in &p.lambda {
        write!(out, " {l}").unwrap();
    }
    writeln!(out).unwrap();
    for est in [&leg, &var] {
        writeln!(out, "mode {:?}", est.mode).unwrap();
        writeln!(out, "value {}", est.value).unwrap();
        write!(out, "argmax").unwrap();
        for v in &est.argmax {
            write!(out, " {v}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "converged {}", est.converged).unwrap();
        writeln!(out, "evaluations {}", est.evaluations).unwrap();
        writeln!(out, "diagnostics {}", est.diagnostics).unwrap();
    }
    ws.write("rate.txt", &out)?;
    let gap = (leg.value - var.value).abs();
    ws.assert(
        "legendre-variational-agreement",
        gap <= 1e-6,
        format!(
            "legendre {} vs variational {}, gap {gap:.2e}",
            leg.value, var.value
        ),
    );
    ws.assert(
        "nonnegative",
        leg.value >= -1e-8 && var.value >= -1e-8,
        format!("values {} / {}", leg.value, var.value),
    );
    Ok(())
}

fn run_couple(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let model = load_model(config.model.as_ref().unwrap())?;
    let p = config.couple.as_ref().unwrap();
    let n = model.n_modes();
    let u0 = vec![0.1; n];
    let mut u0p = u0.clone();
    u0p[0] += p.separation;
    let slack = p.slack_coefficient.unwrap_or(10.0);
    ws.write("model.txt", &model.to_document())?;
    match probes::foias_decay_check(
        &model,
        &u0,
        &u0p,
        p.n_level,
        p.a,
        p.horizon,
        p.dt,
        slack,
        config.master_seed,
    ) {
        Ok(rep) => {
            let mut out = String::new();
            writeln!(out, "coupling synchronous-noise surrogate").unwrap();
            writeln!(out, "n_level {}", rep.n_level).unwrap();
            writeln!(out, "a {}", rep.a).unwrap();
            writeln!(out, "separation {}", rep.initial_separation).unwrap();
            writeln!(out, "max_ratio {}", rep.max_ratio).unwrap();
            writeln!(out, "allowed_ratio {}", rep.allowed_ratio).unwrap();
            writeln!(out, "steps {}", rep.steps).unwrap();
            ws.write("couple.txt", &out)?;
            ws.assert(
                "pn-contraction",
                true,
                format!(
                    "max ratio {} (allowed {})",
                    rep.max_ratio, rep.allowed_ratio
                ),
            );
        }
        Err(e) => ws.assert("pn-contraction", false, format!("{e}")),
    }
    Ok(())
}

fn run_probes(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let model = load_model(config.model.as_ref().unwrap())?;
    let p = config.probes.as_ref().unwrap();
    ws.write("model.txt", &model.to_document())?;
    match p.probe.as_str() {
        "recurrence" => {
            match probes::recurrence_moment(
                &model,
                &p.u0,
                p.kappa.unwrap(),
                p.radius.unwrap(),
                p.count,
                p.horizon.unwrap(),
                p.dt,
                config.master_seed,
            ) {
                Ok(rep) => {
                    let mut out = String::new();
                    writeln!(out, "estimate {}", rep.estimate).unwrap();
                    writeln!(out, "std_error {}", rep.std_error).unwrap();
                    writeln!(out, "timeout_fraction {}", rep.timeout_fraction).unwrap();
                    writeln!(out, "half1 {}", rep.half_estimates.0).unwrap();
                    writeln!(out, "half2 {}", rep.half_estimates.1).unwrap();
                    writeln!(
                        out,
                        "seed {} dt {} count {}",
                        config.master_seed, p.dt, p.count
                    )
                    .unwrap();
                    ws.write("recurrence.txt", &out)?;
                    ws.assert(
                        "recurrence-stable",
                        true,
                        format!("estimate {} +- {}", rep.estimate, rep.std_error),
                    );
                }
                Err(e) => ws.assert("recurrence-stable", false, format!("{e}")),
            }
        }
        "moment" => {
            match probes::moment_probe(
                &model,
                p.exponent.unwrap(),
                p.t_grid.as_ref().unwrap(),
                p.window.unwrap(),
                p.count,
                config.master_seed,
                &p.u0,
                None,
            ) {
                Ok(rep) => {
                    let mut table = String::from("t\tmoment\tmoment_se\tsup_moment\n");
                    for row in &rep.rows {
                        writeln!(
                            table,
                            "{}\t{}\t{}\t{}",
                            row.t, row.moment, row.moment_se, row.sup_moment
                        )
                        .unwrap();
                    }
                    writeln!(table, "# decay_rate {}", rep.decay_rate).unwrap();
                    writeln!(table, "# offset {}", rep.offset).unwrap();
                    writeln!(table, "# seed {} count {}", config.master_seed, p.count).unwrap();
                    ws.write("moment.tsv", &table)?;
                    ws.assert("moment-computed", true, format!("decay {}", rep.decay_rate));
                }
                Err(e) => ws.assert("moment-computed", false, format!("{e}")),
            }
        }
        _ => unreachable!("validated"),
    }
    Ok(())
}

fn run_entropy(config: &Config, ws: &mut Workspace) -> Result<(), RunError> {
    let reference = load_chain(config.chain.as_ref().unwrap())?;
    let p = config.entropy.as_ref().unwrap();
    let kernel = FiniteChain::discrete(&p.q_rows).map_err(|e| RunError::Failed(e.to_string()))?;
    let report = rate::level3_rate_markov(&reference, &kernel)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let process = rate::MarkovProcessMeasure::new(kernel.clone())
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let h_t = rate::dv_entropy(&process, &reference, p.horizon_t)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let gap = rate::contraction_gap(&reference, &kernel, p.budget.unwrap_or(40_000))
        .map_err(|e| RunError::Failed(e.to_string()))?;
    ws.write("chain.txt", &reference.to_document())?;
    let mut out = String::new();
    writeln!(out, "level3 Markov process measures only").unwrap();
    writeln!(out, "h1 {}", report.value).unwrap();
    writeln!(out, "h_t {} (t = {})", h_t, p.horizon_t).unwrap();
    write!(out, "past_window_values").unwrap();
    for v in &report.past_window_values {
        write!(out, " {v}").unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "contraction_gap {gap}").unwrap();
    ws.write("entropy.txt", &out)?;
    let windows_ok = report
        .past_window_values
        .iter()
        .all(|v| (v - report.value).abs() <= 1e-12);
    ws.assert(
        "past-window-reduction",
        windows_ok,
        format!("{:?}", report.past_window_values),
    );
    ws.assert(
        "scaling",
        h_t == p.horizon_t as f64 * report.value,
        format!(
            "H({}) = {h_t} vs t*H(1) = {}",
            p.horizon_t,
            p.horizon_t as f64 * report.value
        ),
    );
    ws.assert("contraction", gap >= -1e-8, format!("gap {gap}"));
    Ok(())
}

/// Re-read a run record and re-hash its artifacts.
pub fn inspect(run_dir: &Path) -> Result<(RunRecord, Vec<String>), RunError> {
    let record_text = fs::read_to_string(run_dir.join("run.toml"))?;
    let record: RunRecord =
        toml::from_str(&record_text).map_err(|e| RunError::Io(e.to_string()))?;
    let mut mismatches = Vec::new();
    for artifact in &record.artifacts {
        let path = run_dir.join(&artifact.path);
        match fs::read_to_string(&path) {
            Ok(content) => {
                let hash = fingerprint::fingerprint_str(&content);
                if hash != artifact.fnv64 {
                    mismatches.push(format!(
                        "{}: recorded {} found {hash}",
                        artifact.path, artifact.fnv64
                    ));
                }
            }
            Err(e) => mismatches.push(format!("{}: unreadable ({e})", artifact.path)),
        }
    }
    Ok((record, mismatches))
}

/// `empirical` subcommand backends: construct measures from trajectory files
/// and evaluate dual-Lipschitz distances between measure files.
pub mod empirical_cmd {
    use super::*;
    use dvns_core::empirical::{EmpiricalMeasure, MetricKind, WindowMode};

    fn load_trajectory(path: &Path) -> Result<sde::Trajectory, RunError> {
        let doc = fs::read_to_string(path)?;
        sde::Trajectory::from_document(&doc).map_err(|e| RunError::Failed(e.to_string()))
    }

    pub fn occupation(traj: &Path, t: f64) -> Result<String, RunError> {
        let tr = load_trajectory(traj)?;
        let mu =
            empirical::occupation_measure(&tr, t).map_err(|e| RunError::Failed(e.to_string()))?;
        Ok(mu.to_document())
    }

    pub fn window(traj: &Path, t: f64, window: f64, backward: bool) -> Result<String, RunError> {
        let tr = load_trajectory(traj)?;
        let mode = if backward {
            WindowMode::BackwardPadded
        } else {
            WindowMode::Forward
        };
        let mu = empirical::windowed_empirical(&tr, window, t, mode)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        Ok(mu.to_document())
    }

    pub fn periodize(traj: &Path, t: f64, window: f64) -> Result<String, RunError> {
        let tr = load_trajectory(traj)?;
        let mu = empirical::periodized_empirical(&tr, t, window)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        Ok(mu.to_document())
    }

    pub fn distance(a: &Path, b: &Path, metric: &str) -> Result<f64, RunError> {
        let mu1 = EmpiricalMeasure::from_document(&fs::read_to_string(a)?)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        let mu2 = EmpiricalMeasure::from_document(&fs::read_to_string(b)?)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        let kind = match metric {
            "state" => MetricKind::StateH,
            "window-sup" => MetricKind::WindowSup,
            "window-weighted" => MetricKind::WindowWeighted,
            other => {
                return Err(RunError::Config(vec![format!(
                    "metric: unknown metric {other:?}"
                )]))
            }
        };
        empirical::dual_lipschitz(&mu1, &mu2, kind).map_err(|e| RunError::Failed(e.to_string()))
    }
}
