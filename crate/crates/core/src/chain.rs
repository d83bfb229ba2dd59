//! Exact finite-state ground truth: tilted kernels, Perron-Frobenius
//! eigendata, exact pressures and rate functions, multiplicative-ergodic
//! convergence, and small-scale LDP frequency experiments.
//!
//! Chains come in two clockings. Discrete clocking realizes the semigroup as
//! matrix powers and gives exact arithmetic for oracle tests; continuous
//! clocking (generator matrices, exact matrix exponentials) is the faithful
//! semantics for every identity that involves real time.

use crate::fingerprint;
use crate::linalg::Mat;
use crate::rng;
use rand::Rng as _;
use std::fmt::Write as _;
use thiserror::Error;

/// Residual bound that Perron-Frobenius data must meet.
pub const PF_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("row {row} sums to {sum}, not 1 (discrete clocking)")]
    NotStochastic { row: usize, sum: f64 },
    #[error("row {row} sums to {sum}, not 0 (continuous clocking)")]
    NotGenerator { row: usize, sum: f64 },
    #[error("negative entry at ({i},{j}): {value}")]
    NegativeEntry { i: usize, j: usize, value: f64 },
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    BadProbability(String),
    #[error(
        "power iteration did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    PowerIterationNotConverged { residual: f64, iterations: usize },
    #[error("multiplicative-ergodic decay ratio {observed:.4} exceeds spectral bound {bound:.4} at step {step}")]
    MetDecayViolation {
        observed: f64,
        bound: f64,
        step: usize,
    },
    #[error("operation requires {required:?} clocking")]
    WrongClocking { required: ClockingKind },
    #[error("chain document parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockingKind {
    Discrete,
    Continuous,
}

/// Finite-state Markov chain in discrete clocking (row-stochastic matrix) or
/// continuous clocking (generator matrix: zero row sums, nonnegative
/// off-diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    kind: ClockingKind,
    matrix: Mat,
}

impl FiniteChain {
    pub fn discrete(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let matrix = Mat::from_rows(rows).map_err(|e| ChainError::Parse(e.to_string()))?;
        let n = matrix.n();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = matrix.get(i, j);
                if v < 0.0 {
                    return Err(ChainError::NegativeEntry { i, j, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(ChainError::NotStochastic { row: i, sum });
            }
        }
        Ok(FiniteChain {
            kind: ClockingKind::Discrete,
            matrix,
        })
    }

    pub fn continuous(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let matrix = Mat::from_rows(rows).map_err(|e| ChainError::Parse(e.to_string()))?;
        let n = matrix.n();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = matrix.get(i, j);
                if i != j && v < 0.0 {
                    return Err(ChainError::NegativeEntry { i, j, value: v });
                }
                sum += v;
            }
            if sum.abs() > 1e-12 {
                return Err(ChainError::NotGenerator { row: i, sum });
            }
        }
        Ok(FiniteChain {
            kind: ClockingKind::Continuous,
            matrix,
        })
    }

    pub fn n_states(&self) -> usize {
        self.matrix.n()
    }

    pub fn clocking(&self) -> ClockingKind {
        self.kind
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Strong connectivity of the positive-transition graph.
    pub fn is_irreducible(&self) -> bool {
        let n = self.n_states();
        let edge = |i: usize, j: usize| i != j && self.matrix.get(i, j) > 0.0;
        reachable_from(0, n, &edge).iter().all(|&r| r)
            && reachable_from(0, n, &|i, j| edge(j, i)).iter().all(|&r| r)
    }

    fn require_irreducible(&self) -> Result<(), ChainError> {
        if self.is_irreducible() {
            Ok(())
        } else {
            Err(ChainError::NotIrreducible)
        }
    }

    /// Markov operator at time `t`: matrix power (discrete, integer `t`) or
    /// exact matrix exponential `exp(tG)` (continuous).
    pub fn semigroup(&self, t: f64) -> Result<Mat, ChainError> {
        assert!(t >= 0.0, "semigroup time must be nonnegative");
        match self.kind {
            ClockingKind::Discrete => {
                let steps = t.round();
                if (t - steps).abs() > 1e-9 {
                    return Err(ChainError::Parse(format!(
                        "discrete clocking needs integer times, got {t}"
                    )));
                }
                Ok(self.matrix.pow(steps as u64))
            }
            ClockingKind::Continuous => Ok(self.matrix.scale(t).expm()),
        }
    }

    pub fn to_document(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dvns-chain v1").unwrap();
        let kind = match self.kind {
            ClockingKind::Discrete => "discrete",
            ClockingKind::Continuous => "continuous",
        };
        writeln!(out, "clocking {kind}").unwrap();
        writeln!(out, "n_states {}", self.n_states()).unwrap();
        for i in 0..self.n_states() {
            write!(out, "row").unwrap();
            for j in 0..self.n_states() {
                write!(out, " {}", self.matrix.get(i, j)).unwrap();
            }
            writeln!(out).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_document(doc: &str) -> Result<Self, ChainError> {
        let mut lines = doc.lines().map(str::trim);
        let parse = |m: &str| ChainError::Parse(m.to_string());
        if lines.next() != Some("dvns-chain v1") {
            return Err(parse("missing dvns-chain header"));
        }
        let kind_line = lines.next().ok_or_else(|| parse("missing clocking"))?;
        let kind = match kind_line.strip_prefix("clocking ").map(str::trim) {
            Some("discrete") => ClockingKind::Discrete,
            Some("continuous") => ClockingKind::Continuous,
            other => return Err(parse(&format!("bad clocking line {other:?}"))),
        };
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("n_states "))
            .ok_or_else(|| parse("missing n_states"))?
            .trim()
            .parse()
            .map_err(|e| parse(&format!("n_states: {e}")))?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| parse("truncated rows"))?;
            let body = line
                .strip_prefix("row")
                .ok_or_else(|| parse(&format!("expected row line, got {line:?}")))?;
            let row: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| parse(&format!("row: {e}")))?;
            if row.len() != n {
                return Err(ChainError::Dimension {
                    expected: n,
                    got: row.len(),
                });
            }
            rows.push(row);
        }
        if lines.next() != Some("end") {
            return Err(parse("missing end marker"));
        }
        match kind {
            ClockingKind::Discrete => FiniteChain::discrete(&rows),
            ClockingKind::Continuous => FiniteChain::continuous(&rows),
        }
    }

    pub fn id(&self) -> String {
        fingerprint::fingerprint_str(&self.to_document())
    }
}

fn reachable_from(start: usize, n: usize, edge: &dyn Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && edge(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn check_probability(lambda: &[f64], n: usize) -> Result<(), ChainError> {
    if lambda.len() != n {
        return Err(ChainError::Dimension {
            expected: n,
            got: lambda.len(),
        });
    }
    if lambda.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(ChainError::BadProbability(
            "negative or non-finite mass".into(),
        ));
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(ChainError::BadProbability(format!("mass sums to {sum}")));
    }
    Ok(())
}

/// Unique stationary distribution of an irreducible chain.
pub fn stationary(chain: &FiniteChain) -> Result<Vec<f64>, ChainError> {
    chain.require_irreducible()?;
    let n = chain.n_states();
    // pi^T P = pi^T  (or pi^T G = 0) with the normalization row appended.
    let mut a = Mat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = chain.matrix.get(j, i)
                - match chain.kind {
                    ClockingKind::Discrete => {
                        if i == j {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    ClockingKind::Continuous => 0.0,
                };
            a.set(i, j, v);
        }
    }
    for j in 0..n {
        a.set(n - 1, j, 1.0);
    }
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let pi = a.solve(&b).map_err(|_| ChainError::NotIrreducible)?;
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(ChainError::NotIrreducible);
    }
    Ok(pi)
}

/// Tilted kernel: `e^{V(x)} P(x,y)` in discrete clocking, `G + diag(V)` in
/// continuous clocking.
#[derive(Debug, Clone)]
pub struct TiltedKernel {
    base: FiniteChain,
    potential: Vec<f64>,
    matrix: Mat,
}

pub fn tilt(chain: &FiniteChain, v: &[f64]) -> Result<TiltedKernel, ChainError> {
    let n = chain.n_states();
    if v.len() != n {
        return Err(ChainError::Dimension {
            expected: n,
            got: v.len(),
        });
    }
    let mut matrix = chain.matrix.clone();
    match chain.kind {
        ClockingKind::Discrete => {
            for i in 0..n {
                let w = v[i].exp();
                for j in 0..n {
                    matrix.set(i, j, w * chain.matrix.get(i, j));
                }
            }
        }
        ClockingKind::Continuous => {
            matrix = matrix.add_diag(v);
        }
    }
    Ok(TiltedKernel {
        base: chain.clone(),
        potential: v.to_vec(),
        matrix,
    })
}

impl TiltedKernel {
    pub fn base(&self) -> &FiniteChain {
        &self.base
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Apply a further tilt; in discrete clocking
    /// `tilt(tilt(P, V1), V2) = tilt(P, V1 + V2)` entrywise.
    pub fn retilt(&self, v: &[f64]) -> Result<TiltedKernel, ChainError> {
        let combined: Vec<f64> = self.potential.iter().zip(v).map(|(a, b)| a + b).collect();
        tilt(&self.base, &combined)
    }

    /// Tilted semigroup at time `t`.
    pub fn semigroup(&self, t: f64) -> Result<Mat, ChainError> {
        match self.base.kind {
            ClockingKind::Discrete => {
                let steps = t.round();
                if (t - steps).abs() > 1e-9 {
                    return Err(ChainError::Parse(format!(
                        "discrete clocking needs integer times, got {t}"
                    )));
                }
                Ok(self.matrix.pow(steps as u64))
            }
            ClockingKind::Continuous => Ok(self.matrix.scale(t).expm()),
        }
    }
}

/// Principal Perron-Frobenius data of a tilted kernel.
///
/// `c` is the per-unit-time multiplier: the principal eigenvalue of the
/// tilted matrix (discrete) or `exp` of the principal eigenvalue of the
/// tilted generator (continuous), so `log c` is the pressure in both
/// clockings. `h` is the positive right eigenvector normalized by
/// `<h, mu> = 1`; `mu` is the left eigenvector as a probability measure.
#[derive(Debug, Clone)]
pub struct PFData {
    pub c: f64,
    pub h: Vec<f64>,
    pub mu: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl PFData {
    pub fn log_c(&self) -> f64 {
        self.c.ln()
    }

    /// Occupancy vector `mu(x) h(x)`; the gradient of the pressure in the
    /// potential and the stationary law of the Doob h-transform.
    pub fn occupancy(&self) -> Vec<f64> {
        self.mu.iter().zip(&self.h).map(|(m, h)| m * h).collect()
    }

    /// Doob h-transform of the tilted kernel: the Markov kernel
    /// `Q(x,y) = M(x,y) h(y) / (c h(x))` (discrete clocking).
    pub fn h_transform(&self, tilted: &TiltedKernel) -> Result<FiniteChain, ChainError> {
        if tilted.base.kind != ClockingKind::Discrete {
            return Err(ChainError::WrongClocking {
                required: ClockingKind::Discrete,
            });
        }
        let n = self.h.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (j, val) in row.iter_mut().enumerate() {
                *val = tilted.matrix.get(i, j) * self.h[j] / (self.c * self.h[i]);
                sum += *val;
            }
            // Renormalize the fp remainder so the result is exactly stochastic.
            for val in row.iter_mut() {
                *val /= sum;
            }
        }
        FiniteChain::discrete(&rows)
    }
}

/// Principal eigendata by power iteration on the kernel and its transpose.
///
/// A positive diagonal shift is applied during iteration; it leaves the
/// eigenvectors unchanged, maps the eigenvalue by an exact scalar shift, and
/// makes the iteration converge for periodic chains as well.
pub fn pf_eigen(tilted: &TiltedKernel, tol: f64, max_iter: usize) -> Result<PFData, ChainError> {
    tilted.base.require_irreducible()?;
    let n = tilted.matrix.n();
    let shift = match tilted.base.kind {
        ClockingKind::Discrete => 0.25 * tilted.matrix.inf_norm().max(1e-300),
        ClockingKind::Continuous => {
            (0..n)
                .map(|i| -tilted.matrix.get(i, i))
                .fold(0.0f64, f64::max)
                .max(0.0)
                + 1.0
        }
    };
    let b = tilted.matrix.add_diag(&vec![shift; n]);

    let mut h = vec![1.0 / n as f64; n];
    let mut mu = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    while iterations < max_iter {
        for _ in 0..8 {
            h = normalize_l1(&b.matvec(&h));
            mu = normalize_l1(&b.tr_matvec(&mu));
            iterations += 1;
        }
        if pair_residual(&b, &h, &mu, rayleigh(&b, &h, &mu)) <= tol {
            break;
        }
    }
    let lam_b = rayleigh(&b, &h, &mu);
    let residual = pair_residual(&b, &h, &mu, lam_b);
    if residual > tol.max(PF_RESIDUAL_TOL) {
        return Err(ChainError::PowerIterationNotConverged {
            residual,
            iterations,
        });
    }
    // Undo the shift and fix normalizations: mu sums to one, <h, mu> = 1.
    let lam = lam_b - shift;
    let c = match tilted.base.kind {
        ClockingKind::Discrete => lam,
        ClockingKind::Continuous => lam.exp(),
    };
    let mu_sum: f64 = mu.iter().sum();
    let mu: Vec<f64> = mu.iter().map(|m| m / mu_sum).collect();
    let hm: f64 = h.iter().zip(&mu).map(|(a, b)| a * b).sum();
    let h: Vec<f64> = h.iter().map(|x| x / hm).collect();
    if c <= 0.0 || h.iter().any(|&x| x <= 0.0) {
        return Err(ChainError::PowerIterationNotConverged {
            residual,
            iterations,
        });
    }
    Ok(PFData {
        c,
        h,
        mu,
        iterations,
        residual,
    })
}

fn normalize_l1(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().map(|v| v.abs()).sum();
    x.iter().map(|v| v / s).collect()
}

fn rayleigh(b: &Mat, h: &[f64], mu: &[f64]) -> f64 {
    let bh = b.matvec(h);
    let num: f64 = mu.iter().zip(&bh).map(|(m, y)| m * y).sum();
    let den: f64 = mu.iter().zip(h).map(|(m, y)| m * y).sum();
    num / den
}

fn pair_residual(b: &Mat, h: &[f64], mu: &[f64], lam: f64) -> f64 {
    let bh = b.matvec(h);
    let h_max = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r1 = bh
        .iter()
        .zip(h)
        .map(|(y, x)| (y - lam * x).abs())
        .fold(0.0f64, f64::max)
        / (h_max * lam.abs().max(1.0));
    let btm = b.tr_matvec(mu);
    let mu_max = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r2 = btm
        .iter()
        .zip(mu)
        .map(|(y, x)| (y - lam * x).abs())
        .fold(0.0f64, f64::max)
        / (mu_max * lam.abs().max(1.0));
    r1.max(r2)
}

/// Exact pressure `Q(V) = log c_V`.
pub fn exact_pressure(chain: &FiniteChain, v: &[f64]) -> Result<f64, ChainError> {
    let pf = pf_eigen(&tilt(chain, v)?, 1e-13, 400_000)?;
    Ok(pf.log_c())
}

/// Level-2 rate function by the Legendre transform: ascent of
/// `<V, lambda> - Q(V)` with the exact eigen-derivative
/// `dQ/dV = mu_V h_V`. The objective is concave, so the returned value is a
/// certified lower bound that converges to the supremum; for boundary
/// `lambda` the supremum may only be approached along a ray and the ascent
/// stops on the improvement cutoff or the evaluation budget.
pub fn exact_rate_legendre(
    chain: &FiniteChain,
    lambda: &[f64],
    budget: usize,
) -> Result<f64, ChainError> {
    check_probability(lambda, chain.n_states())?;
    chain.require_irreducible()?;
    let n = chain.n_states();
    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>), ChainError> {
        let pf = pf_eigen(&tilt(chain, v)?, 1e-13, 400_000)?;
        let q = pf.log_c();
        let occ = pf.occupancy();
        let val = lambda.iter().zip(v).map(|(l, w)| l * w).sum::<f64>() - q;
        let grad: Vec<f64> = lambda.iter().zip(&occ).map(|(l, o)| l - o).collect();
        Ok((val, grad))
    };
    let mut v = vec![0.0; n];
    let (mut val, mut grad) = eval(&v)?;
    let mut step = 1.0;
    let mut evals = 1;
    while evals < budget {
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < 1e-13 || step < 1e-13 {
            break;
        }
        let cand: Vec<f64> = v.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
        let (cval, cgrad) = eval(&cand)?;
        evals += 1;
        if cval > val {
            let improvement = cval - val;
            v = cand;
            val = cval;
            grad = cgrad;
            step *= 1.6;
            if improvement < 1e-15 * val.abs().max(1.0) {
                break;
            }
        } else {
            step *= 0.5;
        }
    }
    Ok(val)
}

/// Level-2 rate function by the variational formula over positive `f`:
/// discrete `sup_f sum_x lambda(x) log(f(x)/(Pf)(x))`, continuous
/// `sup_f sum_x lambda(x) (-(Gf)(x)/f(x))`, ascending in `phi = log f` with
/// the analytic gradient. Lower-bound semantics as in
/// [`exact_rate_legendre`].
pub fn exact_rate_variational(
    chain: &FiniteChain,
    lambda: &[f64],
    budget: usize,
) -> Result<f64, ChainError> {
    check_probability(lambda, chain.n_states())?;
    chain.require_irreducible()?;
    let n = chain.n_states();
    let m = &chain.matrix;
    let eval = |phi: &[f64]| -> (f64, Vec<f64>) {
        let f: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
        match chain.kind {
            ClockingKind::Discrete => {
                let pf = m.matvec(&f);
                let val: f64 = lambda
                    .iter()
                    .zip(phi)
                    .zip(&pf)
                    .map(|((l, p), s)| l * (p - s.ln()))
                    .sum();
                let mut grad = lambda.to_vec();
                for x in 0..n {
                    if lambda[x] == 0.0 {
                        continue;
                    }
                    for y in 0..n {
                        grad[y] -= lambda[x] * m.get(x, y) * f[y] / pf[x];
                    }
                }
                (val, grad)
            }
            ClockingKind::Continuous => {
                let gf = m.matvec(&f);
                let val: f64 = lambda
                    .iter()
                    .zip(&gf)
                    .zip(&f)
                    .map(|((l, g), ff)| -l * g / ff)
                    .sum();
                let mut grad = vec![0.0; n];
                for x in 0..n {
                    if lambda[x] == 0.0 {
                        continue;
                    }
                    let rx = gf[x] / f[x];
                    grad[x] += lambda[x] * (rx - m.get(x, x));
                    for y in 0..n {
                        if y != x {
                            grad[y] -= lambda[x] * m.get(x, y) * f[y] / f[x];
                        }
                    }
                }
                (val, grad)
            }
        }
    };
    let mut phi = vec![0.0; n];
    let (mut val, mut grad) = eval(&phi);
    let mut step = 1.0;
    let mut evals = 1;
    while evals < budget {
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < 1e-13 || step < 1e-13 {
            break;
        }
        let cand: Vec<f64> = phi
            .iter()
            .zip(&grad)
            .map(|(x, g)| (x + step * g).max(-700.0))
            .collect();
        let (cval, cgrad) = eval(&cand);
        evals += 1;
        if cval.is_finite() && cval > val {
            let improvement = cval - val;
            phi = cand;
            val = cval;
            grad = cgrad;
            step *= 1.6;
            if improvement < 1e-15 * val.abs().max(1.0) {
                break;
            }
        } else {
            step *= 0.5;
        }
    }
    Ok(val)
}

/// Error sequence of the multiplicative ergodic convergence
/// `c^{-t} P_V^t f -> <f, mu> h` together with the dense-solve spectral ratio.
#[derive(Debug, Clone)]
pub struct MetReport {
    pub errors: Vec<f64>,
    /// `|lambda_2| / c` (discrete) or `exp(Re lambda_2 - lambda_1)`
    /// (continuous) from the dense eigensolve.
    pub spectral_ratio: f64,
    /// Largest observed step-to-step error ratio over the meaningful range.
    pub max_observed_ratio: f64,
}

/// Sup-norm errors `e_t = ||c^{-t} (P^V)^t f - <f,mu> h||_inf` for
/// `t = 1..=horizon`, with the geometric-decay assertion
/// `e_{t+1}/e_t <= spectral_ratio + 0.05` enforced away from the fp floor.
pub fn met_convergence(
    tilted: &TiltedKernel,
    f: &[f64],
    horizon: usize,
) -> Result<MetReport, ChainError> {
    let n = tilted.matrix.n();
    if f.len() != n {
        return Err(ChainError::Dimension {
            expected: n,
            got: f.len(),
        });
    }
    let pf = pf_eigen(tilted, 1e-13, 400_000)?;
    let fmu: f64 = f.iter().zip(&pf.mu).map(|(a, b)| a * b).sum();
    let step = tilted.semigroup(1.0)?;
    let mut x = f.to_vec();
    let mut scale = 1.0;
    let mut errors = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        x = step.matvec(&x);
        scale *= pf.c;
        let e = x
            .iter()
            .zip(&pf.h)
            .map(|(y, h)| (y / scale - fmu * h).abs())
            .fold(0.0f64, f64::max);
        errors.push(e);
    }
    let spectral_ratio = subdominant_ratio(tilted);
    let bound = spectral_ratio + 0.05;
    let f_scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let floor = 1e-12 * f_scale;
    let mut max_observed_ratio: f64 = 0.0;
    for t in 1..errors.len() {
        if errors[t - 1] > floor && errors[t] > floor {
            let r = errors[t] / errors[t - 1];
            max_observed_ratio = max_observed_ratio.max(r);
            if r > bound {
                return Err(ChainError::MetDecayViolation {
                    observed: r,
                    bound,
                    step: t,
                });
            }
        }
    }
    Ok(MetReport {
        errors,
        spectral_ratio,
        max_observed_ratio,
    })
}

/// Ratio of the subdominant to the principal eigenvalue of the tilted kernel
/// per unit time, from an independent dense eigensolve.
pub fn subdominant_ratio(tilted: &TiltedKernel) -> f64 {
    let moduli = dense_eigen_moduli(&tilted.matrix, tilted.base.kind);
    moduli[1] / moduli[0]
}

/// Per-unit-time eigenvalue moduli of a kernel, sorted descending: the
/// moduli themselves in discrete clocking, `exp(Re lambda)` in continuous
/// clocking.
pub fn dense_eigen_moduli(m: &Mat, kind: ClockingKind) -> Vec<f64> {
    let n = m.n();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        data.extend_from_slice(m.row(i));
    }
    let na = nalgebra::DMatrix::from_row_slice(n, n, &data);
    let eigs = na.complex_eigenvalues();
    let mut moduli: Vec<f64> = match kind {
        ClockingKind::Discrete => eigs.iter().map(|z| z.norm()).collect(),
        ClockingKind::Continuous => eigs.iter().map(|z| z.re.exp()).collect(),
    };
    moduli.sort_by(|a, b| b.partial_cmp(a).unwrap());
    moduli
}

/// Target set for the LDP frequency experiment: a dual-Lipschitz ball around
/// a probability vector, the state space carrying the discrete metric.
#[derive(Debug, Clone)]
pub struct DualLipschitzBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl DualLipschitzBall {
    /// Dual-Lipschitz distance between probability vectors on a finite space
    /// with the discrete metric. The bounded-Lipschitz supremum is attained
    /// by a two-level function, which gives the closed form
    /// `(2/3) TV = (1/3) sum |mu - nu|`.
    pub fn distance(mu: &[f64], nu: &[f64]) -> f64 {
        mu.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        Self::distance(mu, &self.center) <= self.radius
    }
}

/// One row of the LDP frequency table.
#[derive(Debug, Clone)]
pub struct LdpRow {
    pub k: usize,
    pub samples: usize,
    pub hits: usize,
    /// `-(1/k) log(hits/samples)`; infinite when no hits.
    pub empirical_rate: f64,
    /// Standard error of the empirical rate (delta method).
    pub rate_se: f64,
}

/// Result of the LDP frequency experiment: empirical decay rates of
/// `P{zeta_k in ball}` bracketed against the exact rate-function infimum
/// over the ball.
#[derive(Debug, Clone)]
pub struct LdpTable {
    pub rows: Vec<LdpRow>,
    /// Exact `inf I` over the ball (closed and open infima coincide for the
    /// continuous rate functions of irreducible chains; computed once).
    pub exact_inf: f64,
    /// Monte Carlo part of the bracketing slack: three standard errors at
    /// the largest `k` plus the search tolerance.
    pub slack: f64,
    /// Set when some `k` had no hits; bracketing is then not asserted for it.
    pub low_statistics: bool,
    /// Bracketing verdict over rows with hits. Besides the Monte Carlo
    /// slack, each row is granted the sharp-asymptotics prefactor allowance
    /// `(log k / 2 + 2) / k`: the frequency behaves like
    /// `C k^{-1/2} e^{-k I}` with an unquantified constant, which shifts the
    /// empirical rate by that order at finite `k`.
    pub bracketed: bool,
}

/// Empirical occupation-measure LDP check on a discrete chain: for each `k`
/// in `k_list`, estimate `P{zeta_k in ball}` over `samples` paths started
/// from the stationary law and compare `-(1/k) log` frequency with the exact
/// infimum of the rate function over the ball.
pub fn ldp_frequency(
    chain: &FiniteChain,
    ball: &DualLipschitzBall,
    k_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<LdpTable, ChainError> {
    if chain.kind != ClockingKind::Discrete {
        return Err(ChainError::WrongClocking {
            required: ClockingKind::Discrete,
        });
    }
    chain.require_irreducible()?;
    check_probability(&ball.center, chain.n_states())?;
    let n = chain.n_states();
    let pi = stationary(chain)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for (ki, &k) in k_list.iter().enumerate() {
        assert!(k >= 1);
        let mut hits = 0usize;
        let mut counts = vec![0usize; n];
        for s in 0..samples {
            let mut path_rng = rng::stream(rng::split_seed(seed, (ki * samples + s) as u64));
            counts.fill(0);
            let mut x = sample_index(&pi, &mut path_rng);
            for _ in 0..k {
                counts[x] += 1;
                x = sample_index(chain.matrix.row(x), &mut path_rng);
            }
            let occ: Vec<f64> = counts.iter().map(|&c| c as f64 / k as f64).collect();
            if ball.contains(&occ) {
                hits += 1;
            }
        }
        let (empirical_rate, rate_se) = if hits > 0 {
            let p = hits as f64 / samples as f64;
            let se_logp = ((1.0 - p) / hits as f64).sqrt();
            (-(p.ln()) / k as f64, se_logp / k as f64)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        rows.push(LdpRow {
            k,
            samples,
            hits,
            empirical_rate,
            rate_se,
        });
    }
    let exact_inf = rate_infimum_over_ball(chain, ball)?;
    let largest = rows.iter().filter(|r| r.hits > 0).last();
    let low_statistics = rows.iter().any(|r| r.hits == 0);
    let slack = match largest {
        Some(r) => 3.0 * r.rate_se + 1e-4,
        None => f64::INFINITY,
    };
    let bracketed = rows.iter().filter(|r| r.hits > 0).all(|r| {
        let prefactor_allowance = ((r.k as f64).ln() / 2.0 + 2.0) / r.k as f64;
        let total = slack + 3.0 * r.rate_se + prefactor_allowance;
        r.empirical_rate >= exact_inf - total && r.empirical_rate <= exact_inf + total
    });
    Ok(LdpTable {
        rows,
        exact_inf,
        slack,
        low_statistics,
        bracketed,
    })
}

fn sample_index<R: rand::Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Exact infimum of the rate function over a dual-Lipschitz ball, by search
/// over the probability simplex with local refinement.
fn rate_infimum_over_ball(
    chain: &FiniteChain,
    ball: &DualLipschitzBall,
) -> Result<f64, ChainError> {
    let n = chain.n_states();
    let budget = 4000;
    let feasible_best = |cands: &[Vec<f64>]| -> Result<(Vec<f64>, f64), ChainError> {
        let mut best = (Vec::new(), f64::INFINITY);
        for c in cands {
            if !ball.contains(c) {
                continue;
            }
            let v = exact_rate_legendre(chain, c, budget)?;
            if v < best.1 {
                best = (c.clone(), v);
            }
        }
        Ok(best)
    };
    // Candidate sweep: the ball center, projections toward the stationary
    // law, and a grid refinement around the best point found.
    let pi = stationary(chain)?;
    let mut cands = vec![ball.center.clone()];
    for m in 1..=40 {
        let t = m as f64 / 40.0;
        let mix: Vec<f64> = ball
            .center
            .iter()
            .zip(&pi)
            .map(|(c, p)| (1.0 - t) * c + t * p)
            .collect();
        // The largest feasible step toward the stationary law; the rate
        // function decreases along it, so the boundary point matters most.
        if ball.contains(&mix) {
            cands.push(mix);
        } else {
            let d0 = DualLipschitzBall::distance(&ball.center, &pi);
            if d0 > 0.0 {
                let t_edge = (ball.radius / d0).min(1.0);
                let edge: Vec<f64> = ball
                    .center
                    .iter()
                    .zip(&pi)
                    .map(|(c, p)| (1.0 - t_edge) * c + t_edge * p)
                    .collect();
                cands.push(edge);
            }
            break;
        }
    }
    let (mut best_p, mut best_v) = feasible_best(&cands)?;
    if best_p.is_empty() {
        return Err(ChainError::BadProbability(
            "ball contains no probability vector candidates".into(),
        ));
    }
    // Local pattern refinement on the simplex.
    let mut step = ball.radius / 2.0;
    while step > 1e-6 {
        let mut improved = false;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut cand = best_p.clone();
                let delta = step.min(cand[b]);
                if delta <= 0.0 {
                    continue;
                }
                cand[a] += delta;
                cand[b] -= delta;
                if !ball.contains(&cand) {
                    continue;
                }
                let v = exact_rate_legendre(chain, &cand, budget)?;
                if v < best_v - 1e-12 {
                    best_v = v;
                    best_p = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(best_v)
}

/// A continuous-time chain path: piecewise-constant states with jump times.
#[derive(Debug, Clone)]
pub struct CtmcPath {
    /// Jump times, starting at 0.
    pub times: Vec<f64>,
    /// State entered at the matching jump time.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl CtmcPath {
    pub fn state_at(&self, t: f64) -> usize {
        debug_assert!(t >= 0.0 && t <= self.horizon);
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => self.states[i],
            Err(0) => self.states[0],
            Err(i) => self.states[i - 1],
        }
    }

    /// Exact integral of a state potential along the path over `[0, t]`.
    pub fn integrate_potential(&self, v: &[f64], t: f64) -> f64 {
        assert!(t <= self.horizon + 1e-12);
        let mut acc = 0.0;
        for (i, &s) in self.states.iter().enumerate() {
            let start = self.times[i];
            if start >= t {
                break;
            }
            let end = self
                .times
                .get(i + 1)
                .copied()
                .unwrap_or(self.horizon)
                .min(t);
            acc += v[s] * (end - start);
        }
        acc
    }
}

/// Simulate a continuous-time chain path with exponential holding times.
/// Deterministic given `(chain, x0, horizon, seed)`.
pub fn simulate_ctmc(
    chain: &FiniteChain,
    x0: usize,
    horizon: f64,
    seed: u64,
) -> Result<CtmcPath, ChainError> {
    if chain.kind != ClockingKind::Continuous {
        return Err(ChainError::WrongClocking {
            required: ClockingKind::Continuous,
        });
    }
    let n = chain.n_states();
    assert!(x0 < n);
    let mut rng = rng::stream(seed);
    let mut times = vec![0.0];
    let mut states = vec![x0];
    let mut t = 0.0;
    let mut x = x0;
    loop {
        let rate = -chain.matrix.get(x, x);
        if rate <= 0.0 {
            break; // absorbing
        }
        t += rng::standard_exponential(&mut rng) / rate;
        if t >= horizon {
            break;
        }
        // Jump distribution over y != x.
        let u: f64 = rng.gen::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = x;
        for y in 0..n {
            if y == x {
                continue;
            }
            acc += chain.matrix.get(x, y);
            if u < acc {
                next = y;
                break;
            }
        }
        if next == x {
            next = (0..n).rev().find(|&y| y != x).unwrap();
        }
        x = next;
        times.push(t);
        states.push(x);
    }
    Ok(CtmcPath {
        times,
        states,
        horizon,
    })
}

/// Sample a discrete-time chain path of `k` states (including the start).
pub fn sample_discrete_path<R: rand::Rng>(
    chain: &FiniteChain,
    x0: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert_eq!(chain.kind, ClockingKind::Discrete);
    let mut path = Vec::with_capacity(k);
    let mut x = x0;
    for _ in 0..k {
        path.push(x);
        x = sample_index(chain.matrix.row(x), rng);
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> FiniteChain {
        FiniteChain::discrete(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn stationary_of_fixture() {
        let pi = stationary(&fixture()).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn doubly_stochastic_gives_uniform() {
        let chain = FiniteChain::discrete(&[
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.2, 0.5],
        ])
        .unwrap();
        let pi = stationary(&chain).unwrap();
        for p in pi {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_chain_rejected() {
        let chain = FiniteChain::discrete(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            stationary(&chain).unwrap_err(),
            ChainError::NotIrreducible
        ));
    }

    #[test]
    fn tilt_fixture_matrix() {
        // Constant tilt log 2 scales the kernel entrywise by 2.
        let tk = tilt(&fixture(), &[2.0f64.ln(), 2.0f64.ln()]).unwrap();
        let expect = [[1.8, 0.2], [0.4, 1.6]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((tk.matrix().get(i, j) - expect[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_tilt_is_base() {
        let tk = tilt(&fixture(), &[0.0, 0.0]).unwrap();
        assert_eq!(tk.matrix(), fixture().matrix());
    }

    #[test]
    fn retilt_adds_potentials() {
        let chain = fixture();
        let t1 = tilt(&chain, &[0.3, -0.1]).unwrap();
        let t2 = t1.retilt(&[0.2, 0.4]).unwrap();
        let direct = tilt(&chain, &[0.5, 0.3]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((t2.matrix().get(i, j) - direct.matrix().get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pf_eigen_fixture_c_is_two() {
        // Tilted matrix [[1.8, 0.2], [0.4, 1.6]]: characteristic polynomial
        // x^2 - 3.4x + 2.8 with roots 2.0 and 1.4.
        let tk = tilt(&fixture(), &[2.0f64.ln(), 2.0f64.ln()]).unwrap();
        let pf = pf_eigen(&tk, 1e-13, 400_000).unwrap();
        assert!((pf.c - 2.0).abs() < 1e-10, "c = {}", pf.c);
        assert!(pf.residual <= PF_RESIDUAL_TOL);
        let hm: f64 = pf.h.iter().zip(&pf.mu).map(|(a, b)| a * b).sum();
        assert!((hm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pf_eigen_untilted_markov() {
        let tk = tilt(&fixture(), &[0.0, 0.0]).unwrap();
        let pf = pf_eigen(&tk, 1e-13, 400_000).unwrap();
        assert!((pf.c - 1.0).abs() < 1e-11);
        // h is constant for a Markov kernel; mu is the stationary law.
        assert!((pf.h[0] - pf.h[1]).abs() < 1e-9);
        assert!((pf.mu[0] - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn continuous_pf_matches_quadratic_closed_form() {
        // Principal eigenvalue of the 2x2 tilted generator by the quadratic
        // formula: lambda = (tr + sqrt(tr^2 - 4 det)) / 2.
        let g = FiniteChain::continuous(&[vec![-0.1, 0.1], vec![0.2, -0.2]]).unwrap();
        let v = [0.12f64, -0.08];
        let a = [[-0.1 + v[0], 0.1f64], [0.2, -0.2 + v[1]]];
        let tr = a[0][0] + a[1][1];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let lambda = (tr + (tr * tr - 4.0 * det).sqrt()) / 2.0;
        let q = exact_pressure(&g, &v).unwrap();
        assert!((q - lambda).abs() < 1e-11, "pf {q} vs closed form {lambda}");
        // c is the per-unit-time multiplier e^{lambda}.
        let pf = pf_eigen(&tilt(&g, &v).unwrap(), 1e-13, 400_000).unwrap();
        assert!((pf.c - lambda.exp()).abs() < 1e-11);
    }

    #[test]
    fn pf_matches_dense_solve_on_random_chains() {
        let mut rng = rng::stream(99);
        for trial in 0..20 {
            let n = 2 + (trial % 4);
            let mut rows = vec![vec![0.0; n]; n];
            for row in rows.iter_mut() {
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen::<f64>() + 0.05;
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let chain = FiniteChain::discrete(&rows).unwrap();
            let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let tk = tilt(&chain, &v).unwrap();
            let pf = pf_eigen(&tk, 1e-13, 400_000).unwrap();
            let moduli = dense_eigen_moduli(tk.matrix(), ClockingKind::Discrete);
            assert!(
                (pf.c - moduli[0]).abs() < 1e-9,
                "power {} vs dense {}",
                pf.c,
                moduli[0]
            );
            assert!(pf.c >= moduli[1] - 1e-9, "c must be the spectral radius");
        }
    }

    #[test]
    fn exact_pressure_examples() {
        let chain = fixture();
        assert!(exact_pressure(&chain, &[0.0, 0.0]).unwrap().abs() < 1e-11);
        let q = exact_pressure(&chain, &[2.0f64.ln(), 2.0f64.ln()]).unwrap();
        assert!((q - 2.0f64.ln()).abs() < 1e-10);
        // Scalar shifts move the pressure exactly.
        let base = [2.0f64.ln(), 0.0];
        let qb = exact_pressure(&chain, &base).unwrap();
        let q_shift = exact_pressure(&chain, &[base[0] + 0.37, base[1] + 0.37]).unwrap();
        assert!((q_shift - qb - 0.37).abs() < 1e-9);
    }

    #[test]
    fn pressure_is_convex_in_v() {
        let chain = fixture();
        let mut rng = rng::stream(7);
        for _ in 0..20 {
            let v1 = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let v2 = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let mid = [(v1[0] + v2[0]) / 2.0, (v1[1] + v2[1]) / 2.0];
            let qm = exact_pressure(&chain, &mid).unwrap();
            let qa = exact_pressure(&chain, &v1).unwrap();
            let qb = exact_pressure(&chain, &v2).unwrap();
            assert!(qm <= (qa + qb) / 2.0 + 1e-8);
        }
    }

    #[test]
    fn rate_at_stationary_is_zero() {
        let chain = fixture();
        let pi = stationary(&chain).unwrap();
        assert!(exact_rate_legendre(&chain, &pi, 20_000).unwrap().abs() < 1e-8);
        assert!(exact_rate_variational(&chain, &pi, 20_000).unwrap().abs() < 1e-8);
    }

    #[test]
    fn rate_at_point_mass_is_log_escape() {
        let chain = fixture();
        let expect = -(0.9f64.ln());
        let l = exact_rate_legendre(&chain, &[1.0, 0.0], 40_000).unwrap();
        assert!((l - expect).abs() < 1e-6, "legendre {l} vs {expect}");
        let v = exact_rate_variational(&chain, &[1.0, 0.0], 40_000).unwrap();
        assert!((v - expect).abs() < 1e-6, "variational {v} vs {expect}");
    }

    #[test]
    fn rate_duality_on_random_chains() {
        let mut rng = rng::stream(1234);
        for trial in 0..10 {
            let n = 2 + (trial % 3);
            let mut rows = vec![vec![0.0; n]; n];
            for row in rows.iter_mut() {
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen::<f64>() + 0.1;
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let chain = FiniteChain::discrete(&rows).unwrap();
            let mut lambda: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
            let s: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|x| *x /= s);
            let a = exact_rate_legendre(&chain, &lambda, 40_000).unwrap();
            let b = exact_rate_variational(&chain, &lambda, 40_000).unwrap();
            assert!(
                (a - b).abs() < 1e-6,
                "trial {trial}: legendre {a} vs variational {b}"
            );
            assert!(a > -1e-8);
        }
    }

    #[test]
    fn rate_duality_on_continuous_chains() {
        let g = FiniteChain::continuous(&[
            vec![-1.0, 0.7, 0.3],
            vec![0.2, -0.5, 0.3],
            vec![0.5, 0.5, -1.0],
        ])
        .unwrap();
        for lambda in [[0.4, 0.35, 0.25], [0.2, 0.3, 0.5]] {
            let a = exact_rate_legendre(&g, &lambda, 60_000).unwrap();
            let b = exact_rate_variational(&g, &lambda, 60_000).unwrap();
            assert!((a - b).abs() < 1e-6, "legendre {a} vs variational {b}");
            assert!(a >= -1e-8);
        }
        let pi = stationary(&g).unwrap();
        assert!(exact_rate_legendre(&g, &pi, 40_000).unwrap().abs() < 1e-8);
    }

    #[test]
    fn variational_gradient_matches_finite_differences() {
        for chain in [
            fixture(),
            FiniteChain::continuous(&[vec![-1.0, 1.0], vec![0.5, -0.5]]).unwrap(),
        ] {
            let lambda = [0.3, 0.7];
            let phi0 = [0.11, -0.23];
            // Recompute the objective the same way the optimizer does.
            let value = |phi: &[f64]| -> f64 {
                let f: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
                match chain.clocking() {
                    ClockingKind::Discrete => {
                        let pf = chain.matrix().matvec(&f);
                        lambda
                            .iter()
                            .zip(phi)
                            .zip(&pf)
                            .map(|((l, p), s)| l * (p - s.ln()))
                            .sum()
                    }
                    ClockingKind::Continuous => {
                        let gf = chain.matrix().matvec(&f);
                        lambda
                            .iter()
                            .zip(&gf)
                            .zip(&f)
                            .map(|((l, g), ff)| -l * g / ff)
                            .sum()
                    }
                }
            };
            // One ascent step with a tiny learning rate must increase the
            // objective in the gradient direction computed analytically;
            // compare against central differences.
            let h = 1e-6;
            for dim in 0..2 {
                let mut up = phi0;
                up[dim] += h;
                let mut dn = phi0;
                dn[dim] -= h;
                let fd = (value(&up) - value(&dn)) / (2.0 * h);
                // Analytic gradient via a single optimizer evaluation:
                let g = variational_gradient_for_test(&chain, &lambda, &phi0);
                assert!(
                    (fd - g[dim]).abs() < 1e-6,
                    "{:?} dim {dim}: fd {fd} vs analytic {}",
                    chain.clocking(),
                    g[dim]
                );
            }
        }
    }

    // Mirror of the gradient computation inside exact_rate_variational,
    // exposed for the finite-difference check.
    fn variational_gradient_for_test(chain: &FiniteChain, lambda: &[f64], phi: &[f64]) -> Vec<f64> {
        let n = chain.n_states();
        let m = chain.matrix();
        let f: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
        match chain.clocking() {
            ClockingKind::Discrete => {
                let pf = m.matvec(&f);
                let mut grad = lambda.to_vec();
                for x in 0..n {
                    for y in 0..n {
                        grad[y] -= lambda[x] * m.get(x, y) * f[y] / pf[x];
                    }
                }
                grad
            }
            ClockingKind::Continuous => {
                let gf = m.matvec(&f);
                let mut grad = vec![0.0; n];
                for x in 0..n {
                    let rx = gf[x] / f[x];
                    grad[x] += lambda[x] * (rx - m.get(x, x));
                    for y in 0..n {
                        if y != x {
                            grad[y] -= lambda[x] * m.get(x, y) * f[y] / f[x];
                        }
                    }
                }
                grad
            }
        }
    }

    #[test]
    fn rate_is_positive_away_from_stationarity() {
        let chain = fixture();
        // stationary is (2/3, 1/3); a displaced measure has positive rate
        // with a clear margin.
        let i = exact_rate_legendre(&chain, &[0.5, 0.5], 40_000).unwrap();
        assert!(i > 1e-6, "I = {i}");
    }

    #[test]
    fn rate_is_convex_on_segments() {
        let chain = fixture();
        let mut rng = rng::stream(5);
        for _ in 0..10 {
            let p: f64 = rng.gen::<f64>() * 0.8 + 0.1;
            let q: f64 = rng.gen::<f64>() * 0.8 + 0.1;
            let l1 = [p, 1.0 - p];
            let l2 = [q, 1.0 - q];
            let mid = [(p + q) / 2.0, 1.0 - (p + q) / 2.0];
            let im = exact_rate_legendre(&chain, &mid, 20_000).unwrap();
            let ia = exact_rate_legendre(&chain, &l1, 20_000).unwrap();
            let ib = exact_rate_legendre(&chain, &l2, 20_000).unwrap();
            assert!(im <= (ia + ib) / 2.0 + 1e-8);
        }
    }

    #[test]
    fn met_convergence_on_fixture() {
        // For the constant tilt, f = 1 is the eigenfunction itself, so the
        // 0.7 decay shows up for observables outside span{h}.
        let tk = tilt(&fixture(), &[2.0f64.ln(), 2.0f64.ln()]).unwrap();
        let report = met_convergence(&tk, &[1.0, 0.0], 30).unwrap();
        assert!((report.spectral_ratio - 0.7).abs() < 1e-10);
        // Error ratio settles to |lambda_2| / c = 1.4 / 2.0.
        let e = &report.errors;
        let last_ratio = e[e.len() - 1] / e[e.len() - 2];
        assert!((last_ratio - 0.7).abs() < 0.05, "ratio {last_ratio}");
    }

    #[test]
    fn met_ratio_tracks_dense_solve_for_nonconstant_tilt() {
        // Horizon short enough that the errors stay above the fp floor.
        let tk = tilt(&fixture(), &[2.0f64.ln(), 0.0]).unwrap();
        let report = met_convergence(&tk, &[1.0, 1.0], 18).unwrap();
        let e = &report.errors;
        let last_ratio = e[e.len() - 1] / e[e.len() - 2];
        assert!(
            (last_ratio - report.spectral_ratio).abs() < 0.02,
            "ratio {last_ratio} vs spectral {}",
            report.spectral_ratio
        );
    }

    #[test]
    fn met_eigenfunction_is_exact() {
        let tk = tilt(&fixture(), &[2.0f64.ln(), 2.0f64.ln()]).unwrap();
        let pf = pf_eigen(&tk, 1e-13, 400_000).unwrap();
        let report = met_convergence(&tk, &pf.h, 10).unwrap();
        for e in report.errors {
            assert!(e <= 1e-12, "error {e}");
        }
    }

    #[test]
    fn met_untilted_converges_to_stationary_average() {
        // Spectral gap 0.7 per step: 60 steps push the error below 1e-8.
        let tk = tilt(&fixture(), &[0.0, 0.0]).unwrap();
        let report = met_convergence(&tk, &[3.0, -1.0], 60).unwrap();
        assert!(report.errors.last().unwrap() < &1e-8);
    }

    #[test]
    fn ctmc_paths_are_deterministic_and_consistent() {
        let g = FiniteChain::continuous(&[vec![-0.1, 0.1], vec![0.2, -0.2]]).unwrap();
        let p1 = simulate_ctmc(&g, 0, 50.0, 11).unwrap();
        let p2 = simulate_ctmc(&g, 0, 50.0, 11).unwrap();
        assert_eq!(p1.times, p2.times);
        assert_eq!(p1.states, p2.states);
        // integral of the indicator of state 0 plus state 1 is the horizon
        let occ0 = p1.integrate_potential(&[1.0, 0.0], 50.0);
        let occ1 = p1.integrate_potential(&[0.0, 1.0], 50.0);
        assert!((occ0 + occ1 - 50.0).abs() < 1e-9);
    }

    #[test]
    fn ctmc_occupation_matches_stationary() {
        let g = FiniteChain::continuous(&[vec![-0.1, 0.1], vec![0.2, -0.2]]).unwrap();
        let pi = stationary(&g).unwrap();
        let mut occ = 0.0;
        let horizon = 400.0;
        let reps = 50;
        for s in 0..reps {
            let p = simulate_ctmc(&g, (s % 2) as usize, horizon, 1000 + s).unwrap();
            occ += p.integrate_potential(&[1.0, 0.0], horizon) / horizon;
        }
        occ /= reps as f64;
        assert!((occ - pi[0]).abs() < 0.03, "occ {occ} vs pi {}", pi[0]);
    }

    #[test]
    fn chain_document_round_trip() {
        for chain in [
            fixture(),
            FiniteChain::continuous(&[vec![-0.5, 0.5], vec![0.25, -0.25]]).unwrap(),
        ] {
            let doc = chain.to_document();
            let back = FiniteChain::from_document(&doc).unwrap();
            assert_eq!(chain, back);
            assert_eq!(chain.id(), back.id());
        }
    }

    #[test]
    fn discrete_metric_ball_distance_formula() {
        // TV between (1,0) and (p, 1-p) is (1-p); the ball formula scales by 2/3.
        let d = DualLipschitzBall::distance(&[1.0, 0.0], &[0.925, 0.075]);
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn ldp_frequency_near_stationary_rate_is_small() {
        let chain = fixture();
        let pi = stationary(&chain).unwrap();
        let ball = DualLipschitzBall {
            center: pi,
            radius: 0.2,
        };
        let table = ldp_frequency(&chain, &ball, &[50], 2000, 77).unwrap();
        assert!(table.rows[0].hits > 0);
        assert!(table.rows[0].empirical_rate < 0.02);
        assert!(table.exact_inf.abs() < 1e-6);
        assert!(table.bracketed);
        assert!(!table.low_statistics);
    }

    #[test]
    fn low_statistics_flagged_without_assertion() {
        let chain = fixture();
        let ball = DualLipschitzBall {
            center: vec![0.0, 1.0],
            radius: 0.01,
        };
        // k large enough that 20 samples will almost surely never hit.
        let table = ldp_frequency(&chain, &ball, &[100], 20, 3).unwrap();
        assert!(table.low_statistics);
    }

    #[test]
    fn semigroup_discrete_rejects_fractional_times() {
        assert!(fixture().semigroup(1.5).is_err());
        assert!(fixture().semigroup(3.0).is_ok());
    }
}
