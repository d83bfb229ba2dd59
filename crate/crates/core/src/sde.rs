//! Time integration of the spectral SDE
//! `du = (-Lu - B(u,u) + h) dt + sum_j b_j dbeta_j e_j`,
//! ensemble generation, and the energy-identity residual.
//!
//! The scheme is an exponential Euler step: the Stokes-plus-noise part is
//! advanced by the exact law of the stochastic Stokes solution (per mode an
//! Ornstein-Uhlenbeck transition), while forcing and the advection term enter
//! through the damped explicit increment. Splitting the dynamics this way
//! keeps the stochastic convolution statistically exact, so scheme error
//! comes from the nonlinear term alone.

use crate::galerkin::{h_norm_sq, GalerkinModel};
use crate::rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("time {t} is not on the dt={dt} grid")]
    GridMismatch { t: f64, dt: f64 },
    #[error("horizon {horizon} is not an integer multiple of dt={dt}")]
    BadHorizon { horizon: f64, dt: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("trajectory belongs to model {traj}, not {model}")]
    ModelMismatch { traj: String, model: String },
    #[error("no surviving trajectories in the ensemble")]
    AllBlownUp,
    #[error("trajectory document parse error: {0}")]
    Parse(String),
}

/// Exact standard deviation of the per-mode Ornstein-Uhlenbeck increment over
/// a step of length `dt`: `b * sqrt((1 - e^{-2 alpha dt}) / (2 alpha))`.
pub fn ou_increment_std(alpha: f64, b: f64, dt: f64) -> f64 {
    b * ((-(-2.0 * alpha * dt).exp_m1()) / (2.0 * alpha)).sqrt()
}

/// Per-step coefficients shared by every step of a fixed-(model, dt) run.
#[derive(Debug, Clone)]
pub struct StepCoefficients {
    pub dt: f64,
    decay: Vec<f64>,
    sigma: Vec<f64>,
}

impl StepCoefficients {
    pub fn new(model: &GalerkinModel, dt: f64) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        let decay: Vec<f64> = model
            .eigenvalues()
            .iter()
            .map(|a| (-a * dt).exp())
            .collect();
        let sigma: Vec<f64> = model
            .eigenvalues()
            .iter()
            .zip(model.noise_amps())
            .map(|(&a, &b)| ou_increment_std(a, b, dt))
            .collect();
        StepCoefficients { dt, decay, sigma }
    }

    /// Per-mode decay factors `e^{-alpha_j dt}`.
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    /// Per-mode noise increment standard deviations.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// One exponential-Euler step. Deterministic given `(u, increments)`:
/// `u'_j = e^{-a_j dt} (u_j + dt (h_j - B(u,u)_j)) + b_j sigma_j(dt) xi_j`.
pub fn step(
    model: &GalerkinModel,
    u: &[f64],
    dt: f64,
    increments: &[f64],
) -> Result<Vec<f64>, SimError> {
    let n = model.n_modes();
    if u.len() != n {
        return Err(SimError::Dimension {
            expected: n,
            got: u.len(),
        });
    }
    if increments.len() != n {
        return Err(SimError::Dimension {
            expected: n,
            got: increments.len(),
        });
    }
    let coeffs = StepCoefficients::new(model, dt);
    let mut out = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    step_into(model, &coeffs, u, increments, &mut scratch, &mut out)
        .map_err(|_| SimError::NonFiniteState { step: 0 })?;
    Ok(out)
}

/// Hot-path step; `scratch` receives `B(u,u)`.
fn step_into(
    model: &GalerkinModel,
    coeffs: &StepCoefficients,
    u: &[f64],
    increments: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) -> Result<(), ()> {
    model.nonlinearity_into(u, scratch);
    let h = model.forcing();
    let mut finite = true;
    for j in 0..u.len() {
        let v = coeffs.decay[j] * (u[j] + coeffs.dt * (h[j] - scratch[j]))
            + coeffs.sigma[j] * increments[j];
        finite &= v.is_finite();
        out[j] = v;
    }
    if finite {
        Ok(())
    } else {
        Err(())
    }
}

/// Time-gridded spectral trajectory. States are stored row-major; the time of
/// state `i` is `i * dt` exactly (index-derived, never accumulated).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    n_modes: usize,
    data: Vec<f64>,
    seed: u64,
    model_id: String,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn n_states(&self) -> usize {
        self.data.len() / self.n_modes
    }

    pub fn horizon(&self) -> f64 {
        (self.n_states() - 1) as f64 * self.dt
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.n_states() - 1)
    }

    /// Grid index of time `t`; rejects off-grid times.
    pub fn time_index(&self, t: f64) -> Result<usize, SimError> {
        let idx = (t / self.dt).round();
        if idx < 0.0 || (t - idx * self.dt).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(SimError::GridMismatch { t, dt: self.dt });
        }
        let i = idx as usize;
        if i >= self.n_states() {
            return Err(SimError::GridMismatch { t, dt: self.dt });
        }
        Ok(i)
    }

    /// Shift `theta_s`: drop the first `steps` states, so the new trajectory
    /// evaluates at `u(s + .)`. Seed and model id are carried along as
    /// provenance.
    pub fn shifted(&self, steps: usize) -> Option<Trajectory> {
        if steps >= self.n_states() {
            return None;
        }
        Some(Trajectory {
            dt: self.dt,
            n_modes: self.n_modes,
            data: self.data[steps * self.n_modes..].to_vec(),
            seed: self.seed,
            model_id: self.model_id.clone(),
        })
    }

    /// Assemble a trajectory from raw gridded states; test fixture support.
    #[cfg(test)]
    pub(crate) fn from_states(
        dt: f64,
        n_modes: usize,
        data: Vec<f64>,
        seed: u64,
        model_id: String,
    ) -> Trajectory {
        assert!(!data.is_empty() && data.len() % n_modes == 0);
        Trajectory {
            dt,
            n_modes,
            data,
            seed,
            model_id,
        }
    }

    pub fn to_document(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dvns-trajectory v1").unwrap();
        writeln!(out, "model_id {}", self.model_id).unwrap();
        writeln!(out, "n_modes {}", self.n_modes).unwrap();
        writeln!(out, "dt {}", self.dt).unwrap();
        writeln!(out, "n_states {}", self.n_states()).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        for i in 0..self.n_states() {
            write!(out, "state").unwrap();
            for v in self.state(i) {
                write!(out, " {v}").unwrap();
            }
            writeln!(out).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_document(doc: &str) -> Result<Trajectory, SimError> {
        let parse = |m: &str| SimError::Parse(m.to_string());
        let mut lines = doc.lines();
        if lines.next().map(str::trim) != Some("dvns-trajectory v1") {
            return Err(parse("missing trajectory header"));
        }
        let field = |lines: &mut std::str::Lines, key: &str| -> Result<String, SimError> {
            lines
                .next()
                .and_then(|l| l.trim().strip_prefix(key).map(|r| r.trim().to_string()))
                .ok_or_else(|| parse(&format!("missing {key}")))
        };
        let model_id = field(&mut lines, "model_id")?;
        let n_modes: usize = field(&mut lines, "n_modes")?
            .parse()
            .map_err(|e| parse(&format!("n_modes: {e}")))?;
        let dt: f64 = field(&mut lines, "dt")?
            .parse()
            .map_err(|e| parse(&format!("dt: {e}")))?;
        let n_states: usize = field(&mut lines, "n_states")?
            .parse()
            .map_err(|e| parse(&format!("n_states: {e}")))?;
        let seed: u64 = field(&mut lines, "seed")?
            .parse()
            .map_err(|e| parse(&format!("seed: {e}")))?;
        let mut data = Vec::with_capacity(n_states * n_modes);
        for _ in 0..n_states {
            let line = lines.next().ok_or_else(|| parse("truncated states"))?;
            let body = line
                .trim()
                .strip_prefix("state")
                .ok_or_else(|| parse("expected state line"))?;
            let before = data.len();
            for tok in body.split_whitespace() {
                data.push(
                    tok.parse()
                        .map_err(|e| parse(&format!("state value: {e}")))?,
                );
            }
            if data.len() - before != n_modes {
                return Err(SimError::Dimension {
                    expected: n_modes,
                    got: data.len() - before,
                });
            }
        }
        if lines.next().map(str::trim) != Some("end") {
            return Err(parse("missing end marker"));
        }
        Ok(Trajectory {
            dt,
            n_modes,
            data,
            seed,
            model_id,
        })
    }
}

/// Integrate one trajectory. Bit-exactly reproducible from
/// `(model, u0, horizon, dt, seed)`.
pub fn simulate(
    model: &GalerkinModel,
    u0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let n = model.n_modes();
    if u0.len() != n {
        return Err(SimError::Dimension {
            expected: n,
            got: u0.len(),
        });
    }
    let steps = steps_for(horizon, dt)?;
    let coeffs = StepCoefficients::new(model, dt);
    let mut rng = rng::stream(seed);
    let mut data = Vec::with_capacity((steps + 1) * n);
    data.extend_from_slice(u0);
    let mut xi = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut cur = u0.to_vec();
    let mut next = vec![0.0; n];
    for step_idx in 0..steps {
        rng::fill_standard_normal(&mut rng, &mut xi);
        step_into(model, &coeffs, &cur, &xi, &mut scratch, &mut next)
            .map_err(|_| SimError::NonFiniteState { step: step_idx + 1 })?;
        data.extend_from_slice(&next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(Trajectory {
        dt,
        n_modes: n,
        data,
        seed,
        model_id: model.id().to_string(),
    })
}

fn steps_for(horizon: f64, dt: f64) -> Result<usize, SimError> {
    assert!(dt > 0.0, "dt must be positive");
    assert!(horizon >= 0.0, "horizon must be nonnegative");
    let m = (horizon / dt).round();
    if (m * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(SimError::BadHorizon { horizon, dt });
    }
    Ok(m as usize)
}

/// Initial condition law for ensembles; sampled from the member's own stream
/// so member `i` is a pure function of `(master_seed, i)`.
#[derive(Debug, Clone)]
pub enum InitialSampler {
    Fixed(Vec<f64>),
    /// Independent centered Gaussians with a common scale on every mode.
    GaussianIsotropic {
        scale: f64,
    },
}

impl InitialSampler {
    fn sample<R: rand::Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InitialSampler::Fixed(u0) => u0.clone(),
            InitialSampler::GaussianIsotropic { scale } => {
                let mut u = vec![0.0; n];
                rng::fill_standard_normal(rng, &mut u);
                u.iter_mut().for_each(|x| *x *= scale);
                u
            }
        }
    }
}

/// A member that failed to integrate, with the first bad step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlowUp {
    pub member: usize,
    pub step: usize,
}

/// A batch of trajectories over a common (model, dt, horizon), with
/// per-member seeds derived from the master seed.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    trajectories: Vec<Trajectory>,
    failures: Vec<BlowUp>,
    master_seed: u64,
    requested: usize,
}

impl TrajectoryEnsemble {
    pub fn members(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn failures(&self) -> &[BlowUp] {
        &self.failures
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn blowup_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.requested as f64
    }

    /// Mean of a per-trajectory statistic, reduced in member-index order so
    /// the result is deterministic in floating point.
    pub fn mean_over_members<F: Fn(&Trajectory) -> f64>(&self, f: F) -> Result<f64, SimError> {
        if self.trajectories.is_empty() {
            return Err(SimError::AllBlownUp);
        }
        let mut acc = 0.0;
        for t in &self.trajectories {
            acc += f(t);
        }
        Ok(acc / self.trajectories.len() as f64)
    }
}

/// Generate `count` trajectories; member `i` uses `split_seed(master_seed, i)`
/// for both its initial condition and its noise, so the stored ensemble is
/// independent of execution order. Blow-ups are collected, not fatal.
pub fn ensemble(
    model: &GalerkinModel,
    initial: &InitialSampler,
    count: usize,
    horizon: f64,
    dt: f64,
    master_seed: u64,
) -> Result<TrajectoryEnsemble, SimError> {
    assert!(count >= 1, "ensemble needs at least one member");
    steps_for(horizon, dt)?;
    let n = model.n_modes();
    let mut trajectories = Vec::with_capacity(count);
    let mut failures = Vec::new();
    for i in 0..count {
        let seed = rng::split_seed(master_seed, i as u64);
        let mut init_rng = rng::stream(seed);
        let u0 = initial.sample(n, &mut init_rng);
        // The path stream is split again so Fixed and sampled initial laws
        // consume the same number of draws.
        match simulate(model, &u0, horizon, dt, rng::split_seed(seed, 1)) {
            Ok(t) => trajectories.push(t),
            Err(SimError::NonFiniteState { step }) => failures.push(BlowUp { member: i, step }),
            Err(e) => return Err(e),
        }
    }
    Ok(TrajectoryEnsemble {
        trajectories,
        failures,
        master_seed,
        requested: count,
    })
}

/// Trapezoid integral of a per-state function along a trajectory over
/// `[0, t]` on the state grid.
pub fn trapezoid_along<F: Fn(&[f64]) -> f64>(
    traj: &Trajectory,
    t: f64,
    f: F,
) -> Result<f64, SimError> {
    let m = traj.time_index(t)?;
    if m == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.5 * f(traj.state(0));
    for i in 1..m {
        acc += f(traj.state(i));
    }
    acc += 0.5 * f(traj.state(m));
    Ok(acc * traj.dt)
}

/// Relative residual of the mean energy identity at time `t`:
/// `E||u(t)||^2 + 2 E int_0^t ||u||_1^2 ds` against
/// `2 E int_0^t <u, h> ds + E||u0||^2 + B_0 t`, time integrals by the
/// trapezoid rule, normalized by `max(|RHS|, 1)`.
pub fn energy_identity_residual(
    model: &GalerkinModel,
    ensemble: &TrajectoryEnsemble,
    t: f64,
) -> Result<f64, SimError> {
    if let Some(traj) = ensemble.members().first() {
        if traj.model_id() != model.id() {
            return Err(SimError::ModelMismatch {
                traj: traj.model_id().to_string(),
                model: model.id().to_string(),
            });
        }
    }
    let h = model.forcing().to_vec();
    // Validate the grid first so the closures below cannot panic.
    if let Some(first) = ensemble.members().first() {
        first.time_index(t)?;
    }
    let end_energy = ensemble.mean_over_members(|tr| {
        let i = tr.time_index(t).expect("grid validated above");
        h_norm_sq(tr.state(i))
    })?;
    let dissipation = ensemble
        .mean_over_members(|tr| trapezoid_along(tr, t, |u| model.u1_norm_sq(u)).unwrap())?;
    let work = ensemble
        .mean_over_members(|tr| trapezoid_along(tr, t, |u| crate::galerkin::dot(u, &h)).unwrap())?;
    let initial_energy = ensemble.mean_over_members(|tr| h_norm_sq(tr.state(0)))?;
    let lhs = end_energy + 2.0 * dissipation;
    let rhs = 2.0 * work + initial_energy + model.b0() * t;
    Ok((lhs - rhs) / rhs.abs().max(1.0))
}
