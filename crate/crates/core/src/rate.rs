//! Rate-function machinery: relative entropy, the level-3 Donsker-Varadhan
//! entropy of Markov process measures with its scaling and contraction
//! properties, resolvent and generator approximation, and the Legendre and
//! variational forms of the level-2 rate function.
//!
//! Chain-backed computations are exact (matrix powers and exponentials);
//! model-backed computations are Monte Carlo lower bounds over the bounded
//! potential family, and say so in their estimates. Level-3 entropy is
//! computed for Markov process measures only, where conditioning on the
//! infinite past reduces to conditioning on the current state; outputs are
//! labelled accordingly.

use crate::chain::{self, ChainError, ClockingKind, FiniteChain};
use crate::empirical::EmpiricalMeasure;
use crate::feynman_kac::{self, FkError, Observable, Potential};
use crate::galerkin::GalerkinModel;
use crate::linalg::Mat;
use crate::rng;
use crate::sde;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    BadProbability(String),
    #[error("operation requires {required:?} clocking")]
    WrongClocking { required: ClockingKind },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Fk(#[from] FkError),
}

/// Relative entropy `sum p log(p/q)` with the conventions `0 log 0 = 0` and
/// `+inf` when `p` charges a `q`-null atom. On finite spaces this equals the
/// variational definition `sup_F (<F, p> - log <e^F, q>)`.
pub fn relative_entropy(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "measures live on a common finite space");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// A stationary Markov process measure: a discrete kernel together with its
/// stationary law.
#[derive(Debug, Clone)]
pub struct MarkovProcessMeasure {
    kernel: FiniteChain,
    stationary: Vec<f64>,
}

impl MarkovProcessMeasure {
    pub fn new(kernel: FiniteChain) -> Result<Self, RateError> {
        if kernel.clocking() != ClockingKind::Discrete {
            return Err(RateError::WrongClocking {
                required: ClockingKind::Discrete,
            });
        }
        let stationary = chain::stationary(&kernel)?;
        Ok(MarkovProcessMeasure { kernel, stationary })
    }

    pub fn kernel(&self) -> &FiniteChain {
        &self.kernel
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Mean one-step relative entropy against the reference kernel:
    /// `sum_x pi_Q(x) KL(Q(x,.) | P(x,.))`.
    fn mean_step_entropy(&self, reference: &FiniteChain) -> Result<f64, RateError> {
        let n = self.kernel.n_states();
        if reference.n_states() != n {
            return Err(RateError::Dimension {
                expected: n,
                got: reference.n_states(),
            });
        }
        if reference.clocking() != ClockingKind::Discrete {
            return Err(RateError::WrongClocking {
                required: ClockingKind::Discrete,
            });
        }
        let mut acc = 0.0;
        for x in 0..n {
            let kl = relative_entropy(self.kernel.matrix().row(x), reference.matrix().row(x));
            if kl.is_infinite() {
                return Ok(f64::INFINITY);
            }
            acc += self.stationary[x] * kl;
        }
        Ok(acc)
    }
}

/// Level-3 Donsker-Varadhan entropy of a stationary Markov process measure
/// over `t` steps against the reference chain: by the chain rule this is
/// exactly `t` times the mean one-step relative entropy, so the linear
/// scaling `H(t) = t H(1)` holds bit-for-bit.
pub fn dv_entropy(
    process: &MarkovProcessMeasure,
    reference: &FiniteChain,
    t: u32,
) -> Result<f64, RateError> {
    assert!(t >= 1, "entropy horizon must be a positive integer");
    Ok(t as f64 * process.mean_step_entropy(reference)?)
}

/// Level-3 rate of a Markov kernel with the past-window reduction check: the
/// conditional law given a length-k past depends only on the current state,
/// so the k-window computations must agree for every k.
#[derive(Debug, Clone)]
pub struct Level3Report {
    pub value: f64,
    /// Entropy computed by conditioning on past windows of length 1, 2, 3;
    /// all equal for Markov process measures.
    pub past_window_values: Vec<f64>,
}

pub fn level3_rate_markov(
    reference: &FiniteChain,
    kernel: &FiniteChain,
) -> Result<Level3Report, RateError> {
    let process = MarkovProcessMeasure::new(kernel.clone())?;
    let value = dv_entropy(&process, reference, 1)?;
    let n = kernel.n_states();
    let q = kernel.matrix();
    let pi = process.stationary();
    let mut past_window_values = Vec::with_capacity(3);
    for k in 1..=3usize {
        // Enumerate stationary paths (x_1, ..., x_k); the conditional next-step
        // law of a Markov measure given the window is Q(x_k, .).
        let mut acc = 0.0;
        let mut idx = vec![0usize; k];
        loop {
            let mut prob = pi[idx[0]];
            for w in 1..k {
                prob *= q.get(idx[w - 1], idx[w]);
            }
            if prob > 0.0 {
                let last = idx[k - 1];
                let kl = relative_entropy(q.row(last), reference.matrix().row(last));
                if kl.is_infinite() {
                    acc = f64::INFINITY;
                    break;
                }
                acc += prob * kl;
            }
            // advance the multi-index
            let mut pos = k;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < n {
                    break;
                }
                idx[pos] = 0;
            }
            if pos == 0 && idx[0] == 0 {
                break;
            }
        }
        past_window_values.push(acc);
    }
    Ok(Level3Report {
        value,
        past_window_values,
    })
}

/// Contraction gap `H(Q-process) - I(pi_Q)`, nonnegative by the contraction
/// inequality; zero exactly when `Q` is the Doob h-transform of an optimally
/// tilted kernel.
pub fn contraction_gap(
    reference: &FiniteChain,
    kernel: &FiniteChain,
    budget: usize,
) -> Result<f64, RateError> {
    let process = MarkovProcessMeasure::new(kernel.clone())?;
    let h = dv_entropy(&process, reference, 1)?;
    let i = chain::exact_rate_legendre(reference, process.stationary(), budget)?;
    Ok(h - i)
}

/// Quadrature plan for the resolvent integral, in the substituted variable
/// `s = alpha t`: composite Simpson on `[0, s_max]` with `panels` intervals.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub s_max: f64,
    pub panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            s_max: 40.0,
            panels: 8000,
        }
    }
}

/// Resolvent values on all chain states, with the reported truncation tail.
#[derive(Debug, Clone)]
pub struct ResolventApprox {
    pub alpha: f64,
    pub values: Vec<f64>,
    /// `e^{-s_max} ||f||_inf / alpha`, an upper bound on the dropped tail.
    pub tail_bound: f64,
    pub tail_flagged: bool,
}

/// `R_alpha f = int_0^inf e^{-alpha t} P_t f dt` on a continuous-clocking
/// chain, by exact semigroup evaluation and Simpson quadrature in
/// `s = alpha t`.
pub fn resolvent(
    chain: &FiniteChain,
    f: &[f64],
    alpha: f64,
    spec: QuadratureSpec,
) -> Result<ResolventApprox, RateError> {
    if chain.clocking() != ClockingKind::Continuous {
        return Err(RateError::WrongClocking {
            required: ClockingKind::Continuous,
        });
    }
    let n = chain.n_states();
    if f.len() != n {
        return Err(RateError::Dimension {
            expected: n,
            got: f.len(),
        });
    }
    assert!(alpha > 0.0, "resolvent needs alpha > 0");
    let m = spec.panels + spec.panels % 2;
    let h = spec.s_max / m as f64;
    let step = chain.semigroup(h / alpha)?;
    let mut g = f.to_vec();
    let mut acc: Vec<f64> = g.iter().map(|x| x * 1.0).collect(); // w_0 e^0 g_0
    for k in 1..=m {
        g = step.matvec(&g);
        let w = if k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let damp = (-(k as f64) * h).exp();
        for (a, gg) in acc.iter_mut().zip(&g) {
            *a += w * damp * gg;
        }
    }
    let scale = h / 3.0 / alpha;
    let values: Vec<f64> = acc.iter().map(|a| a * scale).collect();
    let f_inf = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tail_bound = (-spec.s_max).exp() * f_inf / alpha;
    Ok(ResolventApprox {
        alpha,
        values,
        tail_bound,
        tail_flagged: tail_bound > 1e-10 * f_inf.max(1.0),
    })
}

/// Exact resolvent `(alpha I - G)^{-1} f`; the independent cross-check of the
/// quadrature route.
pub fn resolvent_exact(chain: &FiniteChain, f: &[f64], alpha: f64) -> Result<Vec<f64>, RateError> {
    if chain.clocking() != ClockingKind::Continuous {
        return Err(RateError::WrongClocking {
            required: ClockingKind::Continuous,
        });
    }
    let n = chain.n_states();
    let mut a = Mat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = -chain.matrix().get(i, j) + if i == j { alpha } else { 0.0 };
            a.set(i, j, v);
        }
    }
    a.solve(f)
        .map_err(|e| RateError::Chain(ChainError::Parse(e.to_string())))
}

/// Exact generator action on a chain: `Pf - f` (discrete) or `Gf`
/// (continuous).
pub fn generator_apply_chain(chain: &FiniteChain, f: &[f64]) -> Result<Vec<f64>, RateError> {
    let n = chain.n_states();
    if f.len() != n {
        return Err(RateError::Dimension {
            expected: n,
            got: f.len(),
        });
    }
    let mf = chain.matrix().matvec(f);
    Ok(match chain.clocking() {
        ClockingKind::Discrete => mf.iter().zip(f).map(|(a, b)| a - b).collect(),
        ClockingKind::Continuous => mf,
    })
}

/// Generator action on a resolvent-range function via the exact identity
/// `L R_alpha f = alpha R_alpha f - f`.
pub fn generator_on_resolvent(rf: &ResolventApprox, f: &[f64]) -> Vec<f64> {
    rf.values
        .iter()
        .zip(f)
        .map(|(r, ff)| rf.alpha * r - ff)
        .collect()
}

/// Richardson-refined forward difference of the Monte Carlo semigroup on the
/// spectral model: `2 (P_{d/2} f - f)/d - (P_d f - f)/d` per probe state.
#[allow(clippy::too_many_arguments)]
pub fn generator_apply_model_fd(
    model: &GalerkinModel,
    f: &Observable,
    probes: &[Vec<f64>],
    dt_fd: f64,
    dt_sim: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>, RateError> {
    let zero = Potential::constant_only(0.0);
    let mut out = Vec::with_capacity(probes.len());
    for (i, u0) in probes.iter().enumerate() {
        let pseed = rng::split_seed(seed, i as u64);
        let f0 = f.eval_state(u0);
        let full = feynman_kac::fk_expectation(model, &zero, f, u0, dt_fd, dt_sim, count, pseed)?;
        let half = feynman_kac::fk_expectation(
            model,
            &zero,
            f,
            u0,
            dt_fd / 2.0,
            dt_sim,
            count,
            rng::split_seed(pseed, 1),
        )?;
        let d_full = (full.mean - f0) / dt_fd;
        let d_half = (half.mean - f0) / (dt_fd / 2.0);
        out.push(2.0 * d_half - d_full);
    }
    Ok(out)
}

/// Integrand of the cutoff-resolvent approximation pipeline:
/// `int -L R_alpha f_N / R_alpha f_N d(lambda)` with
/// `f_N = (f ∧ N) ∨ (1/N)`, resolvents exact.
pub fn resolvent_cutoff_integrand(
    chain: &FiniteChain,
    f: &[f64],
    alpha: f64,
    n_cut: f64,
    lambda: &[f64],
) -> Result<f64, RateError> {
    let fn_cut: Vec<f64> = f.iter().map(|x| x.min(n_cut).max(1.0 / n_cut)).collect();
    let rf = resolvent_exact(chain, &fn_cut, alpha)?;
    let lrf: Vec<f64> = rf
        .iter()
        .zip(&fn_cut)
        .map(|(r, ff)| alpha * r - ff)
        .collect();
    Ok(lambda
        .iter()
        .zip(lrf.iter().zip(&rf))
        .map(|(l, (num, den))| l * (-num / den))
        .sum())
}

/// How a rate estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    Legendre,
    Variational,
}

/// Outcome of a derivative-free rate ascent. Values are certified lower
/// bounds on the rate function (each evaluated objective value is one);
/// `converged` records whether the search collapsed its step rather than
/// exhausting the budget.
#[derive(Debug, Clone)]
pub struct RateEstimate {
    pub value: f64,
    pub mode: RateMode,
    pub argmax: Vec<f64>,
    pub converged: bool,
    pub evaluations: usize,
    pub diagnostics: String,
}

/// Coordinate pattern search with step expansion, shared by every
/// derivative-free ascent here. Maximizes `obj`, spending at most `budget`
/// evaluations; deterministic given the start.
fn pattern_search<F: FnMut(&[f64]) -> f64>(
    start: &[f64],
    init_step: f64,
    budget: usize,
    mut obj: F,
) -> (Vec<f64>, f64, usize, bool) {
    let dim = start.len();
    let mut x = start.to_vec();
    let mut best = obj(&x);
    let mut evals = 1;
    let mut step = init_step;
    let mut converged = false;
    while evals < budget {
        if step < 1e-9 {
            converged = true;
            break;
        }
        let mut improved = false;
        for d in 0..dim {
            for sign in [1.0, -1.0] {
                if evals >= budget {
                    break;
                }
                let mut cand = x.clone();
                cand[d] += sign * step;
                let v = obj(&cand);
                evals += 1;
                if v > best {
                    best = v;
                    x = cand;
                    improved = true;
                    break;
                }
            }
        }
        step *= if improved { 1.6 } else { 0.5 };
    }
    (x, best, evals, converged)
}

fn check_probability(lambda: &[f64], n: usize) -> Result<(), RateError> {
    if lambda.len() != n {
        return Err(RateError::Dimension {
            expected: n,
            got: lambda.len(),
        });
    }
    let sum: f64 = lambda.iter().sum();
    if lambda.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(RateError::BadProbability(format!("mass sums to {sum}")));
    }
    Ok(())
}

/// Legendre-form rate lower bound on a chain by derivative-free ascent of
/// `<V, lambda> - Q(V)` with the exact pressure oracle. Restarts are seeded
/// and the flat start `V = 0` (value exactly zero) is always included.
pub fn legendre_rate_chain(
    chain: &FiniteChain,
    lambda: &[f64],
    budget: usize,
    restarts: usize,
    seed: u64,
) -> Result<RateEstimate, RateError> {
    let n = chain.n_states();
    check_probability(lambda, n)?;
    let mut total_evals = 0usize;
    let mut best_v = vec![0.0; n];
    let mut best = 0.0; // objective at V = 0 is exactly zero
    let mut any_converged = false;
    let per_start = budget / (restarts + 1).max(1);
    let run = |start: Vec<f64>, total_evals: &mut usize, any: &mut bool| -> (Vec<f64>, f64) {
        let mut failed = false;
        let (x, v, e, c) =
            pattern_search(&start, 1.0, per_start, |vv| {
                match chain::exact_pressure(chain, vv) {
                    Ok(q) => lambda.iter().zip(vv).map(|(l, w)| l * w).sum::<f64>() - q,
                    Err(_) => {
                        failed = true;
                        f64::NEG_INFINITY
                    }
                }
            });
        *total_evals += e;
        *any |= c && !failed;
        (x, v)
    };
    let (x0, v0) = run(vec![0.0; n], &mut total_evals, &mut any_converged);
    if v0 > best {
        best = v0;
        best_v = x0;
    }
    let mut restart_rng = rng::stream(seed);
    for _ in 0..restarts {
        let mut start = vec![0.0; n];
        rng::fill_standard_normal(&mut restart_rng, &mut start);
        let (x, v) = run(start, &mut total_evals, &mut any_converged);
        if v > best {
            best = v;
            best_v = x;
        }
    }
    Ok(RateEstimate {
        value: best,
        mode: RateMode::Legendre,
        argmax: best_v,
        converged: any_converged,
        evaluations: total_evals,
        diagnostics: format!(
            "pattern search, {} restarts, seed {seed}, {total_evals} evaluations",
            restarts
        ),
    })
}

/// Variational-form rate lower bound on a chain: derivative-free ascent of
/// the positive-test-function objective over `phi = log f`,
/// discrete `sum lambda log(f/Pf)`, continuous `sum lambda (-Gf/f)`.
pub fn variational_rate_chain(
    chain: &FiniteChain,
    lambda: &[f64],
    budget: usize,
    restarts: usize,
    seed: u64,
) -> Result<RateEstimate, RateError> {
    let n = chain.n_states();
    check_probability(lambda, n)?;
    let m = chain.matrix().clone();
    let clocking = chain.clocking();
    let objective = move |phi: &[f64]| -> f64 {
        let f: Vec<f64> = phi.iter().map(|p| p.clamp(-600.0, 600.0).exp()).collect();
        match clocking {
            ClockingKind::Discrete => {
                let pf = m.matvec(&f);
                lambda
                    .iter()
                    .zip(phi.iter().zip(&pf))
                    .map(|(l, (p, s))| {
                        if *l == 0.0 {
                            0.0
                        } else {
                            l * (p.clamp(-600.0, 600.0) - s.ln())
                        }
                    })
                    .sum()
            }
            ClockingKind::Continuous => {
                let gf = m.matvec(&f);
                lambda
                    .iter()
                    .zip(gf.iter().zip(&f))
                    .map(|(l, (g, ff))| if *l == 0.0 { 0.0 } else { -l * g / ff })
                    .sum()
            }
        }
    };
    let mut total_evals = 0usize;
    let mut best = 0.0; // phi = 0 gives exactly zero
    let mut best_phi = vec![0.0; n];
    let mut any_converged = false;
    let per_start = budget / (restarts + 1).max(1);
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n]];
    let mut restart_rng = rng::stream(seed);
    for _ in 0..restarts {
        let mut s = vec![0.0; n];
        rng::fill_standard_normal(&mut restart_rng, &mut s);
        starts.push(s);
    }
    for start in starts {
        let (x, v, e, c) = pattern_search(&start, 1.0, per_start, &objective);
        total_evals += e;
        any_converged |= c;
        if v > best {
            best = v;
            best_phi = x;
        }
    }
    Ok(RateEstimate {
        value: best,
        mode: RateMode::Variational,
        argmax: best_phi,
        converged: any_converged,
        evaluations: total_evals,
        diagnostics: format!(
            "pattern search over log f, {restarts} restarts, seed {seed}, {total_evals} evaluations"
        ),
    })
}

/// Feature basis for model-mode rate searches: fixed saturated directions
/// whose coefficients are the search parameters.
#[derive(Debug, Clone)]
pub struct PotentialFamily {
    pub n_proj: usize,
    /// `(offset, weights)` of each tanh direction.
    pub directions: Vec<(f64, Vec<f64>)>,
}

impl PotentialFamily {
    pub fn instantiate(&self, coeffs: &[f64]) -> Result<Potential, FkError> {
        assert_eq!(coeffs.len(), self.directions.len());
        let terms = self
            .directions
            .iter()
            .zip(coeffs)
            .map(|((offset, weights), c)| feynman_kac::FeatureTerm {
                coeff: *c,
                offset: *offset,
                weights: weights.clone(),
            })
            .collect();
        Potential::state(self.n_proj, 0.0, terms)
    }
}

/// Monte Carlo pressure parameters for model-mode rate searches.
#[derive(Debug, Clone)]
pub struct McPressureParams {
    pub t_list: Vec<f64>,
    pub dt: f64,
    pub count: usize,
    pub seed: u64,
    pub initial: sde::InitialSampler,
}

/// Model-mode Legendre rate lower bound: derivative-free ascent of
/// `<V, lambda> - Q_mc(V)` over the coefficients of a fixed potential
/// family. The Monte Carlo seed is fixed per run so the objective is
/// deterministic; the estimate is a lower bound up to MC error.
pub fn legendre_rate_model(
    model: &GalerkinModel,
    lambda: &EmpiricalMeasure,
    family: &PotentialFamily,
    params: &McPressureParams,
    budget: usize,
    restarts: usize,
    seed: u64,
) -> Result<RateEstimate, RateError> {
    let dim = family.directions.len();
    let mut total_evals = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut best_theta = vec![0.0; dim];
    let mut any_converged = false;
    let per_start = budget / (restarts + 1).max(1);
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; dim]];
    let mut restart_rng = rng::stream(seed);
    for _ in 0..restarts {
        let mut s = vec![0.0; dim];
        rng::fill_standard_normal(&mut restart_rng, &mut s);
        starts.push(s);
    }
    for start in starts {
        let (x, v, e, c) = pattern_search(&start, 0.5, per_start, |theta| {
            let pot = match family.instantiate(theta) {
                Ok(p) => p,
                Err(_) => return f64::NEG_INFINITY,
            };
            let q = match feynman_kac::pressure_mc(
                model,
                &pot,
                &params.t_list,
                params.dt,
                params.count,
                params.seed,
                &params.initial,
            ) {
                Ok(est) => est.value,
                Err(_) => return f64::NEG_INFINITY,
            };
            lambda.integrate(|u| pot.eval_state(u)) - q
        });
        total_evals += e;
        any_converged |= c;
        if v > best {
            best = v;
            best_theta = x;
        }
    }
    Ok(RateEstimate {
        value: best.max(0.0),
        mode: RateMode::Legendre,
        argmax: best_theta,
        converged: any_converged,
        evaluations: total_evals,
        diagnostics: format!(
            "mc pressure objective, {restarts} restarts, search seed {seed}, mc seed {}",
            params.seed
        ),
    })
}

/// Model-mode variational rate lower bound over `f = exp(W)`: the generator
/// acts through the Richardson finite difference of the Monte Carlo
/// semigroup on the support of `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn variational_rate_model(
    model: &GalerkinModel,
    lambda: &EmpiricalMeasure,
    family: &PotentialFamily,
    dt_fd: f64,
    dt_sim: f64,
    count: usize,
    budget: usize,
    seed: u64,
) -> Result<RateEstimate, RateError> {
    let probes: Vec<Vec<f64>> = lambda.atoms().iter().map(|(p, _)| p.clone()).collect();
    let weights: Vec<f64> = lambda.atoms().iter().map(|(_, w)| *w).collect();
    let dim = family.directions.len();
    let mut eval_count = 0usize;
    let objective = |theta: &[f64], eval_count: &mut usize| -> f64 {
        let w_pot = match family.instantiate(theta) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let f = Observable::Exp(w_pot);
        let lf = match generator_apply_model_fd(
            model,
            &f,
            &probes,
            dt_fd,
            dt_sim,
            count,
            rng::split_seed(seed, *eval_count as u64),
        ) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        *eval_count += 1;
        probes
            .iter()
            .zip(weights.iter().zip(&lf))
            .map(|(u, (w, l))| -w * l / f.eval_state(u))
            .sum()
    };
    let (theta, value, evals, converged) = pattern_search(&vec![0.0; dim], 0.5, budget, |t| {
        objective(t, &mut eval_count)
    });
    Ok(RateEstimate {
        value: value.max(0.0),
        mode: RateMode::Variational,
        argmax: theta,
        converged,
        evaluations: evals,
        diagnostics: format!("fd generator over exp(W), seed {seed}"),
    })
}
