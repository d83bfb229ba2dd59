//! Numerical probes of the dynamical estimates: synchronous-noise coupling
//! at level `(N, a)` with its exact `P_N`-contraction, hitting-time and
//! recurrence statistics, and the moment suites for the energy functional.
//!
//! The coupling is a surrogate for the maximal coupling: both components are
//! driven by the same Gaussian increments, and the second integrates the
//! auxiliary system with the `P_N`-penalty `a(v - u) + B(u) - B(v)`. On the
//! first `N` modes the difference then obeys a closed linear contraction,
//! which is exactly the quantitative content the decay check asserts. Every
//! report names the construction a synchronous surrogate.

use crate::galerkin::{h_norm_sq, GalerkinModel};
use crate::rng;
use crate::sde::{self, SimError, StepCoefficients};
use crate::stats;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("initial separation {d} exceeds 1")]
    SeparationTooLarge { d: f64 },
    #[error("coupling penalty a*dt = {a_dt} must stay below 1")]
    PenaltyTooStiff { a_dt: f64 },
    #[error(
        "P_N contraction violated at t = {t}: ||P_N w|| = {observed} > {allowed} (ratio {ratio})"
    )]
    ContractionViolated {
        t: f64,
        observed: f64,
        allowed: f64,
        ratio: f64,
    },
    #[error("recurrence estimate unstable: halves {half1} and {half2}, tolerance {tol}")]
    RecurrenceUnstable { half1: f64, half2: f64, tol: f64 },
    #[error("timeout fraction {fraction:.3} exceeds 1%")]
    TooManyTimeouts { fraction: f64 },
    #[error("decay fit {fitted} below required {required}")]
    DecayTooSlow { fitted: f64, required: f64 },
    #[error("doubly-log statistic escapes its affine envelope at ||u0||^2 = {x}: {y} > {allowed}")]
    EnvelopeViolated { x: f64, y: f64, allowed: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Weight function `w_m(u) = ||u||^{2m} + 1` on states, or the sup-norm
/// version on windows; at least 1 everywhere.
#[derive(Debug, Clone, Copy)]
pub struct WeightFunction {
    pub exponent: u32,
}

impl WeightFunction {
    pub fn eval_state(&self, u: &[f64]) -> f64 {
        h_norm_sq(u).powi(self.exponent as i32) + 1.0
    }

    /// `||.||_{X^T}^{2m} + 1` with the sup over the window grid.
    pub fn eval_window(&self, window: &[f64], n_modes: usize) -> f64 {
        let sup_sq = window
            .chunks_exact(n_modes)
            .map(h_norm_sq)
            .fold(0.0, f64::max);
        sup_sq.powi(self.exponent as i32) + 1.0
    }
}

/// A pair of states advanced with shared noise at coupling level `(N, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// One synchronous step of the coupled system. The first component follows
/// the plain dynamics; the second integrates
/// `dv + (Lv + B(v) + P_N[a(v - u) + B(u) - B(v)]) dt = (h + noise) dt`
/// with the same increments, via the same exponential-Euler update as
/// [`sde::step`]. Deterministic given `(pair, increments)`.
pub fn coupled_step(
    model: &GalerkinModel,
    pair: &CoupledPair,
    n_level: usize,
    a: f64,
    dt: f64,
    increments: &[f64],
) -> Result<CoupledPair, ProbeError> {
    let coeffs = StepCoefficients::new(model, dt);
    let n = model.n_modes();
    assert!(n_level <= n);
    assert_eq!(pair.u.len(), n);
    assert_eq!(pair.v.len(), n);
    assert_eq!(increments.len(), n);
    let mut bu = vec![0.0; n];
    let mut bv = vec![0.0; n];
    let mut out = CoupledPair {
        u: vec![0.0; n],
        v: vec![0.0; n],
    };
    step_pair_into(
        model, &coeffs, n_level, a, pair, increments, &mut bu, &mut bv, &mut out,
    )
    .map_err(|_| ProbeError::NonFiniteState { step: 0 })?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step_pair_into(
    model: &GalerkinModel,
    coeffs: &StepCoefficients,
    n_level: usize,
    a: f64,
    pair: &CoupledPair,
    xi: &[f64],
    bu: &mut [f64],
    bv: &mut [f64],
    out: &mut CoupledPair,
) -> Result<(), ()> {
    model.nonlinearity_into(&pair.u, bu);
    model.nonlinearity_into(&pair.v, bv);
    let h = model.forcing();
    let decay = coeffs.decay();
    let sigma = coeffs.sigma();
    let dt = coeffs.dt;
    let mut finite = true;
    for j in 0..pair.u.len() {
        let du = h[j] - bu[j];
        let nu = decay[j] * (pair.u[j] + dt * du) + sigma[j] * xi[j];
        // On the penalized range the B(v) terms cancel inside the bracket:
        // h - B(v) - [a(v-u) + B(u) - B(v)] = h - a(v-u) - B(u).
        let dv = if j < n_level {
            h[j] - a * (pair.v[j] - pair.u[j]) - bu[j]
        } else {
            h[j] - bv[j]
        };
        let nv = decay[j] * (pair.v[j] + dt * dv) + sigma[j] * xi[j];
        finite &= nu.is_finite() && nv.is_finite();
        out.u[j] = nu;
        out.v[j] = nv;
    }
    if finite {
        Ok(())
    } else {
        Err(())
    }
}

/// Outcome of the `P_N`-contraction check along a coupled run.
#[derive(Debug, Clone)]
pub struct FoiasReport {
    pub n_level: usize,
    pub a: f64,
    pub initial_separation: f64,
    /// Largest observed `||P_N w(t)|| / (e^{-at} d)` over the grid.
    pub max_ratio: f64,
    pub steps: usize,
    /// Slack factor `1 + slack_coefficient * dt` the ratios were held to.
    pub allowed_ratio: f64,
}

/// Integrate the coupled pair and assert the exact contraction
/// `||P_N(u_t - v_t)|| <= e^{-at} d (1 + c dt)` at every grid time.
#[allow(clippy::too_many_arguments)]
pub fn foias_decay_check(
    model: &GalerkinModel,
    u0: &[f64],
    u0_prime: &[f64],
    n_level: usize,
    a: f64,
    horizon: f64,
    dt: f64,
    slack_coefficient: f64,
    seed: u64,
) -> Result<FoiasReport, ProbeError> {
    let d: f64 = u0
        .iter()
        .zip(u0_prime)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if d > 1.0 {
        return Err(ProbeError::SeparationTooLarge { d });
    }
    if a * dt >= 1.0 {
        return Err(ProbeError::PenaltyTooStiff { a_dt: a * dt });
    }
    let steps = (horizon / dt).round() as usize;
    let coeffs = StepCoefficients::new(model, dt);
    let n = model.n_modes();
    let mut pair = CoupledPair {
        u: u0.to_vec(),
        v: u0_prime.to_vec(),
    };
    let mut next = pair.clone();
    let mut bu = vec![0.0; n];
    let mut bv = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut rng = rng::stream(seed);
    let allowed_ratio = 1.0 + slack_coefficient * dt;
    let mut max_ratio = 0.0f64;
    for step_idx in 1..=steps {
        rng::fill_standard_normal(&mut rng, &mut xi);
        step_pair_into(
            model, &coeffs, n_level, a, &pair, &xi, &mut bu, &mut bv, &mut next,
        )
        .map_err(|_| ProbeError::NonFiniteState { step: step_idx })?;
        std::mem::swap(&mut pair, &mut next);
        let t = step_idx as f64 * dt;
        let pn_w: f64 = pair
            .u
            .iter()
            .zip(&pair.v)
            .take(n_level)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let bound = (-a * t).exp() * d;
        if d > 0.0 {
            let ratio = pn_w / bound;
            max_ratio = max_ratio.max(ratio);
            if ratio > allowed_ratio {
                return Err(ProbeError::ContractionViolated {
                    t,
                    observed: pn_w,
                    allowed: bound * allowed_ratio,
                    ratio,
                });
            }
        } else if pn_w != 0.0 {
            return Err(ProbeError::ContractionViolated {
                t,
                observed: pn_w,
                allowed: 0.0,
                ratio: f64::INFINITY,
            });
        }
    }
    Ok(FoiasReport {
        n_level,
        a,
        initial_separation: d,
        max_ratio,
        steps,
        allowed_ratio,
    })
}

/// First grid time at which the state (or the trailing window sup-norm)
/// enters the closed ball of the given radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HittingTime {
    Hit(f64),
    Timeout,
}

/// Simulate until `||u_t|| <= radius`; with `window_steps > 0` the criterion
/// is the sup-norm of the trailing window of that many grid steps.
#[allow(clippy::too_many_arguments)]
pub fn hitting_time(
    model: &GalerkinModel,
    u0: &[f64],
    radius: f64,
    window_steps: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<HittingTime, ProbeError> {
    assert!(radius > 0.0);
    let n = model.n_modes();
    let coeffs = StepCoefficients::new(model, dt);
    let mut recent: std::collections::VecDeque<f64> =
        std::collections::VecDeque::with_capacity(window_steps + 1);
    let steps = (horizon / dt).round() as usize;
    let mut u = u0.to_vec();
    let mut next = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut rng = rng::stream(seed);
    let entered = |recent: &std::collections::VecDeque<f64>, norm: f64| -> bool {
        if window_steps == 0 {
            norm <= radius
        } else {
            recent.len() == window_steps + 1 && recent.iter().all(|&r| r <= radius)
        }
    };
    let push = |recent: &mut std::collections::VecDeque<f64>, norm: f64| {
        if recent.len() == window_steps + 1 {
            recent.pop_front();
        }
        recent.push_back(norm);
    };
    let norm0 = h_norm_sq(&u).sqrt();
    push(&mut recent, norm0);
    if entered(&recent, norm0) {
        return Ok(HittingTime::Hit(0.0));
    }
    for step_idx in 1..=steps {
        rng::fill_standard_normal(&mut rng, &mut xi);
        sde_step(model, &coeffs, &u, &xi, &mut scratch, &mut next)
            .map_err(|_| ProbeError::NonFiniteState { step: step_idx })?;
        std::mem::swap(&mut u, &mut next);
        let norm = h_norm_sq(&u).sqrt();
        push(&mut recent, norm);
        if entered(&recent, norm) {
            return Ok(HittingTime::Hit(step_idx as f64 * dt));
        }
    }
    Ok(HittingTime::Timeout)
}

// Local alias of the sde step kernel; keeps the probe loops allocation-free.
fn sde_step(
    model: &GalerkinModel,
    coeffs: &StepCoefficients,
    u: &[f64],
    xi: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) -> Result<(), ()> {
    model.nonlinearity_into(u, scratch);
    let h = model.forcing();
    let decay = coeffs.decay();
    let sigma = coeffs.sigma();
    let mut finite = true;
    for j in 0..u.len() {
        let v = decay[j] * (u[j] + coeffs.dt * (h[j] - scratch[j])) + sigma[j] * xi[j];
        finite &= v.is_finite();
        out[j] = v;
    }
    if finite {
        Ok(())
    } else {
        Err(())
    }
}

/// Monte Carlo estimate of the hyper-exponential recurrence moment
/// `E exp(kappa tau_0(r))`, with a two-half stability check and a timeout
/// budget of 1%.
#[derive(Debug, Clone)]
pub struct RecurrenceReport {
    pub estimate: f64,
    pub std_error: f64,
    pub timeout_fraction: f64,
    pub half_estimates: (f64, f64),
}

#[allow(clippy::too_many_arguments)]
pub fn recurrence_moment(
    model: &GalerkinModel,
    u0: &[f64],
    kappa: f64,
    radius: f64,
    count: usize,
    horizon: f64,
    dt: f64,
    master_seed: u64,
) -> Result<RecurrenceReport, ProbeError> {
    assert!(count >= 100, "recurrence_moment needs at least 100 paths");
    let mut weights = Vec::with_capacity(count);
    let mut timeouts = 0usize;
    for i in 0..count {
        let seed = rng::split_seed(master_seed, i as u64);
        match hitting_time(model, u0, radius, 0, horizon, dt, seed)? {
            HittingTime::Hit(tau) => weights.push((kappa * tau).exp()),
            HittingTime::Timeout => timeouts += 1,
        }
    }
    let timeout_fraction = timeouts as f64 / count as f64;
    if timeout_fraction >= 0.01 {
        return Err(ProbeError::TooManyTimeouts {
            fraction: timeout_fraction,
        });
    }
    let estimate = stats::mean(&weights);
    let std_error = stats::std_error(&weights);
    let mid = weights.len() / 2;
    let half1 = stats::mean(&weights[..mid]);
    let half2 = stats::mean(&weights[mid..]);
    let tol = 3.0
        * (stats::std_error(&weights[..mid]).powi(2) + stats::std_error(&weights[mid..]).powi(2))
            .sqrt();
    if (half1 - half2).abs() > tol.max(1e-12) {
        return Err(ProbeError::RecurrenceUnstable { half1, half2, tol });
    }
    Ok(RecurrenceReport {
        estimate,
        std_error,
        timeout_fraction,
        half_estimates: (half1, half2),
    })
}

/// One row of the polynomial moment table.
#[derive(Debug, Clone, Copy)]
pub struct MomentRow {
    pub t: f64,
    /// `E ||u_t||^{2m}`.
    pub moment: f64,
    pub moment_se: f64,
    /// `E sup_{[t, t+T]} ||u||^{2m}`.
    pub sup_moment: f64,
}

#[derive(Debug, Clone)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    /// Fitted exponential decay rate of the transient part.
    pub decay_rate: f64,
    /// Fitted plateau.
    pub offset: f64,
    /// Integration step the probe chose for the horizon.
    pub dt: f64,
}

/// Estimate `E ||u_t||^{2m}` and the trailing sup-moment on a time grid and
/// fit `(decay_rate, offset)`; the fixture assertion
/// `decay_rate >= 0.8 m alpha_1` is enforced when `required_rate` is set.
#[allow(clippy::too_many_arguments)]
pub fn moment_probe(
    model: &GalerkinModel,
    exponent: u32,
    t_grid: &[f64],
    window: f64,
    count: usize,
    master_seed: u64,
    u0: &[f64],
    required_rate: Option<f64>,
) -> Result<MomentReport, ProbeError> {
    assert!(count >= 1000, "moment_probe needs at least 10^3 paths");
    assert!(!t_grid.is_empty());
    let t_max = t_grid.last().unwrap() + window;
    let dt = pick_dt(t_max);
    let ens = sde::ensemble(
        model,
        &sde::InitialSampler::Fixed(u0.to_vec()),
        count,
        t_max,
        dt,
        master_seed,
    )?;
    let w = WeightFunction { exponent };
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut moments = Vec::with_capacity(ens.members().len());
        let mut sups = Vec::with_capacity(ens.members().len());
        for tr in ens.members() {
            let i = tr.time_index(t)?;
            let j = tr.time_index(t + window)?;
            moments.push(w.eval_state(tr.state(i)) - 1.0);
            let sup = (i..=j)
                .map(|k| h_norm_sq(tr.state(k)))
                .fold(0.0, f64::max)
                .powi(exponent as i32);
            sups.push(sup);
        }
        rows.push(MomentRow {
            t,
            moment: stats::mean(&moments),
            moment_se: stats::std_error(&moments),
            sup_moment: stats::mean(&sups),
        });
    }
    // Plateau from the tail, decay from the early transient.
    let offset = rows.last().unwrap().moment;
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for r in &rows {
        let excess = r.moment - offset;
        if excess > offset.max(1e-300) {
            ts.push(r.t);
            logs.push(excess.ln());
        }
    }
    let decay_rate = if ts.len() >= 2 {
        -stats::fit_line(&ts, &logs).slope
    } else {
        f64::NAN
    };
    if let Some(required) = required_rate {
        if !(decay_rate >= required) {
            return Err(ProbeError::DecayTooSlow {
                fitted: decay_rate,
                required,
            });
        }
    }
    Ok(MomentReport {
        rows,
        decay_rate,
        offset,
        dt,
    })
}

fn pick_dt(t_max: f64) -> f64 {
    // Keep roughly 1e3..4e3 steps regardless of the horizon.
    let steps = (t_max / 2e-3).clamp(1000.0, 4000.0);
    t_max / steps.round()
}

/// One kappa row of the exponential moment table.
#[derive(Debug, Clone, Copy)]
pub struct ExpMomentRow {
    pub kappa: f64,
    /// `(1/t) log E exp(kappa E(t))` with `E` the energy functional.
    pub log_moment_rate: f64,
    pub std_error: f64,
    pub jackknife_bias: f64,
    /// Fraction of the sample mean carried by the single largest weight; a
    /// dominance above 1/2 marks the estimate as destabilized.
    pub top_sample_share: f64,
}

#[derive(Debug, Clone)]
pub struct ExpMomentReport {
    pub rows: Vec<ExpMomentRow>,
    /// Smallest kappa whose estimate is dominated by one sample, if any: the
    /// empirical proxy for the exponential-moment threshold.
    pub destabilization_kappa: Option<f64>,
    /// Fitted linear growth rate of the mean energy functional.
    pub k_hat: f64,
    /// Exceedance curve of `sup_t (E(t) - K t) - ||u0||^2` over the rho grid:
    /// `(rho, empirical frequency)`, nonincreasing by construction.
    pub exceedance: Vec<(f64, f64)>,
    /// Log-linear fit of the exceedance decay (the empirical gamma_0 proxy),
    /// when enough positive frequencies exist.
    pub gamma0_hat: Option<f64>,
}

/// Exponential moment probe of the energy functional
/// `E(t) = ||u_t||^2 + int_0^t ||u_s||_1^2 ds`, plus the sup-exceedance
/// frequencies over a rho grid.
#[allow(clippy::too_many_arguments)]
pub fn exp_moment_probe(
    model: &GalerkinModel,
    kappa_list: &[f64],
    t: f64,
    dt: f64,
    count: usize,
    master_seed: u64,
    u0: &[f64],
    rho_grid: &[f64],
) -> Result<ExpMomentReport, ProbeError> {
    assert!(kappa_list.windows(2).all(|w| w[1] > w[0]));
    let ens = sde::ensemble(
        model,
        &sde::InitialSampler::Fixed(u0.to_vec()),
        count,
        t,
        dt,
        master_seed,
    )?;
    // Per path: energy functional at final time, its running supremum
    // adjusted by the fitted linear growth, and the mean curve for K-hat.
    let steps = (t / dt).round() as usize;
    let mut energies = Vec::with_capacity(ens.members().len());
    let mut mean_curve = vec![0.0; steps + 1];
    let mut sup_stats = Vec::with_capacity(ens.members().len());
    for tr in ens.members() {
        let mut cumulative = 0.0;
        let mut prev = model.u1_norm_sq(tr.state(0));
        let mut path_energy = vec![0.0; steps + 1];
        path_energy[0] = h_norm_sq(tr.state(0));
        for k in 1..=steps {
            let cur = model.u1_norm_sq(tr.state(k));
            cumulative += 0.5 * dt * (prev + cur);
            prev = cur;
            path_energy[k] = h_norm_sq(tr.state(k)) + cumulative;
        }
        for (m, e) in mean_curve.iter_mut().zip(&path_energy) {
            *m += e;
        }
        energies.push(path_energy[steps]);
        sup_stats.push(path_energy);
    }
    let n_members = ens.members().len() as f64;
    mean_curve.iter_mut().for_each(|m| *m /= n_members);
    let ts: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let k_hat = stats::fit_line(&ts, &mean_curve).slope;

    let mut rows = Vec::with_capacity(kappa_list.len());
    let mut destabilization_kappa = None;
    for &kappa in kappa_list {
        let weights: Vec<f64> = energies.iter().map(|e| kappa * e).collect();
        let lme = stats::log_mean_exp(&weights);
        let top = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let top_share = ((top - lme).exp() / n_members).min(1.0);
        let row = ExpMomentRow {
            kappa,
            log_moment_rate: lme / t,
            std_error: stats::log_mean_exp_se(&weights) / t,
            jackknife_bias: stats::log_mean_exp_jackknife_bias(&weights) / t,
            top_sample_share: top_share,
        };
        if top_share > 0.5 && destabilization_kappa.is_none() {
            destabilization_kappa = Some(kappa);
        }
        rows.push(row);
    }

    // Exceedance of sup_t (E(t) - K t) over ||u0||^2 + rho.
    let u0_sq = h_norm_sq(u0);
    let mut exceedance = Vec::with_capacity(rho_grid.len());
    let sups: Vec<f64> = sup_stats
        .iter()
        .map(|path| {
            path.iter()
                .enumerate()
                .map(|(k, e)| e - k_hat * (k as f64 * dt))
                .fold(f64::NEG_INFINITY, f64::max)
                - u0_sq
        })
        .collect();
    for &rho in rho_grid {
        let freq = sups.iter().filter(|&&s| s >= rho).count() as f64 / n_members;
        exceedance.push((rho, freq));
    }
    let positive: Vec<(f64, f64)> = exceedance
        .iter()
        .filter(|(_, f)| *f > 0.0)
        .cloned()
        .collect();
    let gamma0_hat = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|(r, _)| *r).collect();
        let ys: Vec<f64> = positive.iter().map(|(_, f)| f.ln()).collect();
        Some(-stats::fit_line(&xs, &ys).slope)
    } else {
        None
    };
    Ok(ExpMomentReport {
        rows,
        destabilization_kappa,
        k_hat,
        exceedance,
        gamma0_hat,
    })
}

/// One initial condition of the doubly-logarithmic probe.
#[derive(Debug, Clone, Copy)]
pub struct DoublyLogRow {
    pub u0_norm_sq: f64,
    /// `E log(1 + log(1 + t sup_{[t,t+T]} ||u||_1^2))`.
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct DoublyLogReport {
    pub rows: Vec<DoublyLogRow>,
    /// Affine envelope `a + b (||u0||^2 + t)` fitted on the lower half of the
    /// fixture family.
    pub envelope_intercept: f64,
    pub envelope_slope: f64,
    pub margin: f64,
}

/// Doubly-logarithmic moment probe of the `H^1` window norm: estimates the
/// statistic for each initial state, fits an affine envelope in `||u0||^2` on
/// the lower half of the family, and checks that the upper half stays below
/// the extrapolated envelope plus a positive margin.
#[allow(clippy::too_many_arguments)]
pub fn doubly_log_probe(
    model: &GalerkinModel,
    t: f64,
    window: f64,
    dt: f64,
    count: usize,
    master_seed: u64,
    u0_list: &[Vec<f64>],
) -> Result<DoublyLogReport, ProbeError> {
    assert!(count >= 1000, "doubly_log_probe needs at least 10^3 paths");
    assert!(u0_list.len() >= 4, "need a family of initial states");
    let mut rows = Vec::with_capacity(u0_list.len());
    for (i, u0) in u0_list.iter().enumerate() {
        let ens = sde::ensemble(
            model,
            &sde::InitialSampler::Fixed(u0.clone()),
            count,
            t + window,
            dt,
            rng::split_seed(master_seed, i as u64),
        )?;
        let mut vals = Vec::with_capacity(ens.members().len());
        for tr in ens.members() {
            let a = tr.time_index(t)?;
            let b = tr.time_index(t + window)?;
            let sup = (a..=b)
                .map(|k| model.u1_norm_sq(tr.state(k)))
                .fold(0.0, f64::max);
            vals.push((1.0 + (1.0 + t * sup).ln()).ln());
        }
        rows.push(DoublyLogRow {
            u0_norm_sq: h_norm_sq(u0),
            value: stats::mean(&vals),
            std_error: stats::std_error(&vals),
        });
    }
    let mut sorted: Vec<&DoublyLogRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.u0_norm_sq.partial_cmp(&b.u0_norm_sq).unwrap());
    let lower = &sorted[..sorted.len() / 2];
    let xs: Vec<f64> = lower.iter().map(|r| r.u0_norm_sq + t).collect();
    let ys: Vec<f64> = lower.iter().map(|r| r.value).collect();
    let fit = stats::fit_line(&xs, &ys);
    let resid_sd = {
        let mean_sq = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - fit.intercept - fit.slope * x;
                r * r
            })
            .sum::<f64>()
            / xs.len() as f64;
        mean_sq.sqrt()
    };
    let spread = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin = (3.0 * resid_sd + 0.2 * spread.abs()).max(0.05);
    for r in &sorted {
        let allowed = fit.intercept + fit.slope * (r.u0_norm_sq + t) + margin;
        if r.value > allowed {
            return Err(ProbeError::EnvelopeViolated {
                x: r.u0_norm_sq,
                y: r.value,
                allowed,
            });
        }
    }
    Ok(DoublyLogReport {
        rows,
        envelope_intercept: fit.intercept,
        envelope_slope: fit.slope,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::{build_custom_model, build_torus_model, ForcingSpec, NoiseSpec};

    const SILENT: f64 = 1e-100;

    fn torus() -> GalerkinModel {
        build_torus_model(
            2,
            &ForcingSpec::None,
            &NoiseSpec::Uniform { amplitude: 0.1 },
        )
        .unwrap()
    }

    #[test]
    fn equal_pair_stays_equal_bitwise() {
        let m = torus();
        let n = m.n_modes();
        let u0 = vec![0.2; n];
        let mut pair = CoupledPair {
            u: u0.clone(),
            v: u0,
        };
        let mut rng = rng::stream(5);
        let mut xi = vec![0.0; n];
        for _ in 0..50 {
            rng::fill_standard_normal(&mut rng, &mut xi);
            pair = coupled_step(&m, &pair, n / 2, 5.0, 0.01, &xi).unwrap();
            assert_eq!(pair.u, pair.v);
        }
    }

    #[test]
    fn zero_tensor_difference_decays_per_mode() {
        // With no advection the difference obeys
        // w'_j = e^{-a_j dt} (1 - a dt) w_j on penalized modes and
        // w'_j = e^{-a_j dt} w_j above the level.
        let m = build_custom_model(vec![1.0, 2.0], vec![], vec![0.0; 2], vec![SILENT; 2]).unwrap();
        let dt = 0.01;
        let a = 3.0;
        let pair = CoupledPair {
            u: vec![0.5, 0.5],
            v: vec![0.4, 0.3],
        };
        let next = coupled_step(&m, &pair, 1, a, dt, &[0.0, 0.0]).unwrap();
        let w0 = next.u[0] - next.v[0];
        let w1 = next.u[1] - next.v[1];
        let want0 = (-dt).exp() * (1.0 - a * dt) * 0.1;
        let want1 = (-2.0f64 * dt).exp() * 0.2;
        assert!((w0 - want0).abs() < 1e-15, "{w0} vs {want0}");
        assert!((w1 - want1).abs() < 1e-14, "{w1} vs {want1}");
    }

    #[test]
    fn foias_decay_holds_on_torus() {
        let m = torus();
        let n = m.n_modes();
        let mut u0 = vec![0.15; n];
        u0[1] = -0.1;
        let mut u0p = u0.clone();
        // separation 0.1 split across two modes
        u0p[0] += 0.1 / 2.0f64.sqrt();
        u0p[2] -= 0.1 / 2.0f64.sqrt();
        for (n_level, a) in [(1usize, 1.0), (n / 2, 5.0), (n, 5.0)] {
            let report = foias_decay_check(&m, &u0, &u0p, n_level, a, 1.0, 1e-3, 10.0, 77).unwrap();
            assert!(
                report.max_ratio <= report.allowed_ratio,
                "N={n_level} a={a}: ratio {}",
                report.max_ratio
            );
        }
    }

    #[test]
    fn foias_initial_separation_guard() {
        let m = torus();
        let n = m.n_modes();
        let u0 = vec![0.0; n];
        let mut far = vec![0.0; n];
        far[0] = 1.5;
        assert!(matches!(
            foias_decay_check(&m, &u0, &far, 2, 1.0, 0.5, 1e-3, 10.0, 1).unwrap_err(),
            ProbeError::SeparationTooLarge { .. }
        ));
        assert!(matches!(
            foias_decay_check(&m, &u0, &u0, 2, 2000.0, 0.5, 1e-3, 10.0, 1).unwrap_err(),
            ProbeError::PenaltyTooStiff { .. }
        ));
    }

    #[test]
    fn hitting_time_examples() {
        let m = build_custom_model(vec![1.0], vec![], vec![0.0], vec![SILENT]).unwrap();
        // inside the ball at t = 0
        assert_eq!(
            hitting_time(&m, &[0.5], 1.0, 0, 5.0, 1e-3, 1).unwrap(),
            HittingTime::Hit(0.0)
        );
        // huge radius
        assert_eq!(
            hitting_time(&m, &[100.0], 1e6, 0, 5.0, 1e-3, 1).unwrap(),
            HittingTime::Hit(0.0)
        );
        // pure decay from 2 e_1 hits radius 1 at log 2
        match hitting_time(&m, &[2.0], 1.0, 0, 5.0, 1e-3, 1).unwrap() {
            HittingTime::Hit(tau) => {
                assert!((tau - 2.0f64.ln()).abs() <= 1e-3 + 1e-9, "tau {tau}")
            }
            HittingTime::Timeout => panic!("should hit"),
        }
        // unreachable radius within the horizon
        assert_eq!(
            hitting_time(&m, &[2.0], 0.5, 0, 0.1, 1e-3, 1).unwrap(),
            HittingTime::Timeout
        );
    }

    #[test]
    fn weight_function_bounds() {
        let w = WeightFunction { exponent: 3 };
        assert_eq!(w.eval_state(&[0.0, 0.0]), 1.0);
        let a = w.eval_state(&[0.5, 0.0]);
        let b = w.eval_state(&[0.9, 0.0]);
        assert!(1.0 <= a && a < b);
        let window = [0.1, 0.0, 2.0, 0.0]; // two states of two modes
        assert_eq!(w.eval_window(&window, 2), (4.0f64).powi(3) + 1.0);
    }

    #[test]
    fn recurrence_trivial_cases() {
        let m = build_custom_model(vec![2.0], vec![], vec![0.0], vec![0.2]).unwrap();
        // start inside the ball: tau = 0, estimate exactly 1
        let r = recurrence_moment(&m, &[0.1], 0.7, 1.0, 200, 5.0, 1e-2, 3).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.timeout_fraction, 0.0);
        // kappa = 0 gives exactly 1 regardless of tau
        let r = recurrence_moment(&m, &[2.0], 0.0, 1.0, 200, 50.0, 1e-2, 3).unwrap();
        assert_eq!(r.estimate, 1.0);
    }

    #[test]
    fn recurrence_matches_ou_first_passage_bvp() {
        // One OU mode with strong damping; the reference value solves the
        // exterior boundary-value problem
        //   (b^2/2) psi'' - alpha u psi' + kappa psi = 0 on [r, R],
        //   psi(r) = 1, psi'(R) = (kappa/alpha) psi(R)/R,
        // by finite differences on a fine grid.
        let (alpha, b, kappa, r) = (2.0, 0.3, 0.3, 1.0);
        let model = build_custom_model(vec![alpha], vec![], vec![0.0], vec![b]).unwrap();
        let u0 = 2.0;

        // Tridiagonal solve (Thomas algorithm) for the BVP.
        let nn = 4000usize;
        let rmax = 8.0;
        let h = (rmax - r) / nn as f64;
        let mut sub = vec![0.0; nn + 1];
        let mut diag = vec![0.0; nn + 1];
        let mut sup = vec![0.0; nn + 1];
        let mut rhs = vec![0.0; nn + 1];
        diag[0] = 1.0;
        rhs[0] = 1.0;
        for i in 1..nn {
            let u = r + i as f64 * h;
            sub[i] = b * b / (2.0 * h * h) + alpha * u / (2.0 * h);
            diag[i] = -b * b / (h * h) + kappa;
            sup[i] = b * b / (2.0 * h * h) - alpha * u / (2.0 * h);
        }
        // psi'(R) = (kappa/alpha) psi(R)/R via a one-sided difference.
        sub[nn] = -1.0 / h;
        diag[nn] = 1.0 / h - kappa / (alpha * rmax);
        for i in 1..=nn {
            let m = sub[i] / diag[i - 1];
            diag[i] -= m * sup[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        let mut psi = vec![0.0; nn + 1];
        psi[nn] = rhs[nn] / diag[nn];
        for i in (0..nn).rev() {
            psi[i] = (rhs[i] - sup[i] * psi[i + 1]) / diag[i];
        }
        let idx = ((u0 - r) / h).round() as usize;
        let reference = psi[idx];

        let rep = recurrence_moment(&model, &[u0], kappa, r, 4000, 50.0, 5e-4, 11).unwrap();
        assert!(
            (rep.estimate - reference).abs() < 4.0 * rep.std_error + 0.02,
            "mc {} vs bvp {reference} (se {})",
            rep.estimate,
            rep.std_error
        );
    }

    #[test]
    fn moment_probe_decay_on_deterministic_mode() {
        // Silent noise, zero tensor: E||u_t||^{2m} = e^{-2 m alpha t} u0^{2m},
        // comfortably above the required 0.8 m alpha_1.
        let model = build_custom_model(vec![1.0], vec![], vec![0.0], vec![SILENT]).unwrap();
        let exponent = 2u32;
        let report = moment_probe(
            &model,
            exponent,
            &[0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            0.5,
            1000,
            5,
            &[1.0],
            Some(0.8 * exponent as f64 * 1.0),
        )
        .unwrap();
        assert!(
            (report.decay_rate - 4.0).abs() < 0.2,
            "rate {}",
            report.decay_rate
        );
    }

    #[test]
    fn moment_probe_plateaus_under_forcing() {
        let model = build_torus_model(
            1,
            &ForcingSpec::LowestShellCos { amplitude: 0.2 },
            &NoiseSpec::Uniform { amplitude: 0.15 },
        )
        .unwrap();
        let report = moment_probe(
            &model,
            1,
            &[0.5, 1.0, 2.0, 4.0, 6.0],
            0.5,
            1000,
            6,
            &vec![0.0; model.n_modes()],
            None,
        )
        .unwrap();
        // From rest the moment climbs to a plateau; the offset estimate is
        // positive and the late rows agree with it to a few standard errors.
        assert!(report.offset > 0.0);
        let last = report.rows.last().unwrap();
        assert!((last.moment - report.offset).abs() <= 4.0 * last.moment_se + 1e-12);
    }

    #[test]
    fn exp_moment_probe_deterministic_energy() {
        // Silent noise: E(t) is deterministic, so the rate is exactly
        // kappa E(t) / t and every top-sample share is 1/count... actually the
        // weights are equal, so no sample dominates.
        let model = build_custom_model(vec![1.0], vec![], vec![0.0], vec![SILENT]).unwrap();
        let report = exp_moment_probe(
            &model,
            &[0.1, 0.2, 0.4],
            1.0,
            1e-3,
            64,
            9,
            &[1.0],
            &[0.0, 0.5, 1.0],
        )
        .unwrap();
        // E(1) = e^{-2} + int_0^1 e^{-2s} ds = e^{-2} + (1 - e^{-2})/2
        let e1 = (-2.0f64).exp() + (1.0 - (-2.0f64).exp()) / 2.0;
        for row in &report.rows {
            assert!(
                (row.log_moment_rate - row.kappa * e1).abs() < 1e-3,
                "kappa {}: {} vs {}",
                row.kappa,
                row.log_moment_rate,
                row.kappa * e1
            );
            assert!(row.top_sample_share < 0.5);
        }
        assert!(report.destabilization_kappa.is_none());
        // doubling kappa doubles the rate for deterministic energy
        let r = &report.rows;
        assert!((r[1].log_moment_rate / r[0].log_moment_rate - 2.0).abs() < 1e-6);
    }

    #[test]
    fn exp_moment_exceedance_is_monotone() {
        let model = build_torus_model(
            1,
            &ForcingSpec::None,
            &NoiseSpec::Uniform { amplitude: 0.25 },
        )
        .unwrap();
        let report = exp_moment_probe(
            &model,
            &[0.2, 0.5],
            2.0,
            2e-3,
            256,
            21,
            &vec![0.1; model.n_modes()],
            &[0.0, 0.05, 0.1, 0.2, 0.4, 0.8],
        )
        .unwrap();
        for w in report.exceedance.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12, "exceedance not monotone: {w:?}");
        }
    }

    #[test]
    fn doubly_log_probe_envelope_on_linear_model() {
        let model =
            build_custom_model(vec![1.0, 2.0], vec![], vec![0.0; 2], vec![0.15, 0.1]).unwrap();
        let u0_list: Vec<Vec<f64>> = (1..=8)
            .map(|k| vec![0.25 * k as f64, -0.1 * k as f64])
            .collect();
        let report = doubly_log_probe(&model, 1.0, 0.5, 5e-3, 1000, 13, &u0_list).unwrap();
        assert!(report.margin > 0.0);
        assert_eq!(report.rows.len(), 8);
    }
}
