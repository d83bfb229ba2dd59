//! Occupation and empirical measures over states and trajectory windows,
//! shift and periodization operators, and the dual-Lipschitz geometry on
//! finitely supported measures.
//!
//! Continuous-time averages `(1/t) int delta ds` are realized as uniform
//! atoms on the left-endpoint grid, which makes the shift and periodization
//! identities exact at grid resolution. Infinite-horizon trajectory
//! comparisons use a truncated weighted metric
//! `sum_m 2^{-m} min(1, sup_{[m-1,m]} ||.||)` in place of the Skorokhod
//! metric; every report that involves it says so.

use crate::sde::Trajectory;
use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("time {t} is not on the dt={dt} grid")]
    GridMismatch { t: f64, dt: f64 },
    #[error("window of length {window} starting at {start} exceeds the horizon {horizon}")]
    WindowPastHorizon {
        window: f64,
        start: f64,
        horizon: f64,
    },
    #[error("empty support")]
    EmptySupport,
    #[error("weights sum to {sum}, not 1")]
    BadWeights { sum: f64 },
    #[error("space tags differ: {0} vs {1}")]
    SpaceMismatch(String, String),
    #[error("metric {metric} does not apply to {tag}")]
    MetricMismatch { metric: String, tag: String },
    #[error("linear program failed: {0}")]
    LpFailure(String),
    #[error(
        "exponential-equivalence gap {gap} exceeds 2 log 2 / t + slack = {allowed} at t = {t}"
    )]
    ExpEquivViolation { gap: f64, allowed: f64, t: f64 },
    #[error("periodization needs t > 0")]
    EmptyPeriod,
}

/// Space carrying the atoms of an empirical measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceTag {
    State {
        n_modes: usize,
    },
    /// Gridded windows of `steps + 1` states at spacing `dt`.
    Window {
        n_modes: usize,
        steps: usize,
        dt: f64,
    },
}

impl SpaceTag {
    fn describe(&self) -> String {
        match self {
            SpaceTag::State { n_modes } => format!("state({n_modes})"),
            SpaceTag::Window { n_modes, steps, dt } => {
                format!("window({n_modes} modes, {steps} steps, dt {dt})")
            }
        }
    }

    fn point_len(&self) -> usize {
        match self {
            SpaceTag::State { n_modes } => *n_modes,
            SpaceTag::Window { n_modes, steps, .. } => n_modes * (steps + 1),
        }
    }
}

/// Finitely supported probability measure over states or trajectory windows.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    tag: SpaceTag,
    atoms: Vec<(Vec<f64>, f64)>,
}

impl EmpiricalMeasure {
    /// Build from explicit atoms; weights must be positive and sum to 1
    /// within 1e-12 (checked with compensated summation).
    pub fn new(tag: SpaceTag, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::EmptySupport);
        }
        let expected = tag.point_len();
        for (p, w) in &atoms {
            assert_eq!(p.len(), expected, "atom dimension mismatch");
            if !(*w > 0.0) {
                return Err(MeasureError::BadWeights { sum: *w });
            }
        }
        // Neumaier-compensated sum keeps the check meaningful for large
        // supports.
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (_, w) in &atoms {
            let t = sum + w;
            comp += if sum.abs() >= w.abs() {
                (sum - t) + w
            } else {
                (w - t) + sum
            };
            sum = t;
        }
        let total = sum + comp;
        if (total - 1.0).abs() > 1e-12 {
            return Err(MeasureError::BadWeights { sum: total });
        }
        Ok(EmpiricalMeasure { tag, atoms })
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn atoms(&self) -> &[(Vec<f64>, f64)] {
        &self.atoms
    }

    /// `<f, mu> = sum w f(x)`.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|(p, w)| w * f(p)).sum()
    }

    /// Structured-text persistence: space tag, then one atom per line. Window
    /// documents carry the note that window metrics are the truncated
    /// weighted stand-in for the Skorokhod metric.
    pub fn to_document(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "dvns-measure v1").unwrap();
        match self.tag {
            SpaceTag::State { n_modes } => writeln!(out, "space state {n_modes}").unwrap(),
            SpaceTag::Window { n_modes, steps, dt } => {
                writeln!(out, "space window {n_modes} {steps} {dt}").unwrap();
                writeln!(
                    out,
                    "note window metrics use the truncated weighted metric in place of the Skorokhod metric"
                )
                .unwrap();
            }
        }
        writeln!(out, "atoms {}", self.atoms.len()).unwrap();
        for (p, w) in &self.atoms {
            write!(out, "atom {w}").unwrap();
            for v in p {
                write!(out, " {v}").unwrap();
            }
            writeln!(out).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_document(doc: &str) -> Result<EmpiricalMeasure, MeasureError> {
        let parse = |m: &str| MeasureError::LpFailure(format!("measure parse: {m}"));
        let mut lines = doc.lines().map(str::trim).peekable();
        if lines.next() != Some("dvns-measure v1") {
            return Err(parse("missing measure header"));
        }
        let space_line = lines.next().ok_or_else(|| parse("missing space line"))?;
        let mut tok = space_line.split_whitespace();
        if tok.next() != Some("space") {
            return Err(parse("expected space line"));
        }
        let tag = match tok.next() {
            Some("state") => SpaceTag::State {
                n_modes: tok
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse("bad state dims"))?,
            },
            Some("window") => {
                let n_modes = tok
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse("bad window dims"))?;
                let steps = tok
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse("bad window steps"))?;
                let dt = tok
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse("bad window dt"))?;
                SpaceTag::Window { n_modes, steps, dt }
            }
            other => return Err(parse(&format!("unknown space {other:?}"))),
        };
        while lines.peek().map_or(false, |l| l.starts_with("note ")) {
            lines.next();
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("atoms "))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse("missing atoms count"))?;
        let mut atoms = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| parse("truncated atoms"))?;
            let body = line
                .strip_prefix("atom ")
                .ok_or_else(|| parse("expected atom line"))?;
            let vals: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| parse(&format!("atom: {e}")))?;
            if vals.len() != tag.point_len() + 1 {
                return Err(parse("atom length mismatch"));
            }
            atoms.push((vals[1..].to_vec(), vals[0]));
        }
        if lines.next() != Some("end") {
            return Err(parse("missing end marker"));
        }
        EmpiricalMeasure::new(tag, atoms)
    }
}

fn grid_steps(traj: &Trajectory, t: f64) -> Result<usize, MeasureError> {
    traj.time_index(t)
        .map_err(|_| MeasureError::GridMismatch { t, dt: traj.dt() })
}

/// Occupation measure `zeta_t`: uniform weights on the states at times
/// `0, dt, ..., t - dt` (left-endpoint quadrature of `(1/t) int delta ds`).
pub fn occupation_measure(traj: &Trajectory, t: f64) -> Result<EmpiricalMeasure, MeasureError> {
    let m = grid_steps(traj, t)?;
    if m == 0 {
        return Err(MeasureError::EmptyPeriod);
    }
    let w = 1.0 / m as f64;
    let atoms = (0..m).map(|i| (traj.state(i).to_vec(), w)).collect();
    EmpiricalMeasure::new(
        SpaceTag::State {
            n_modes: traj.n_modes(),
        },
        atoms,
    )
}

/// Window orientation for [`windowed_empirical`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Atoms `u_{[s, s+T]}`; needs data up to `t + T`.
    Forward,
    /// Atoms `u_{[s-T, s]}` with the trajectory frozen at `u_0` before time
    /// zero, matching the shifted empirical measures of the T-process view.
    BackwardPadded,
}

/// Level-3 empirical measure of finite-length windows: uniform atoms on the
/// length-`window` segments starting (or ending) at `s = 0, dt, ..., t - dt`.
/// `window = 0` reduces to the occupation measure.
pub fn windowed_empirical(
    traj: &Trajectory,
    window: f64,
    t: f64,
    mode: WindowMode,
) -> Result<EmpiricalMeasure, MeasureError> {
    let m = grid_steps(traj, t)?;
    if m == 0 {
        return Err(MeasureError::EmptyPeriod);
    }
    let steps = grid_steps(traj, window)?;
    if steps == 0 {
        return occupation_measure(traj, t);
    }
    let n = traj.n_modes();
    if mode == WindowMode::Forward && m - 1 + steps >= traj.n_states() {
        return Err(MeasureError::WindowPastHorizon {
            window,
            start: (m - 1) as f64 * traj.dt(),
            horizon: traj.horizon(),
        });
    }
    let w = 1.0 / m as f64;
    let mut atoms = Vec::with_capacity(m);
    for s in 0..m {
        let mut data = Vec::with_capacity((steps + 1) * n);
        for k in 0..=steps {
            let idx = match mode {
                WindowMode::Forward => s + k,
                // index s - steps + k, clamped to 0 (frozen prefix)
                WindowMode::BackwardPadded => (s + k).saturating_sub(steps),
            };
            data.extend_from_slice(traj.state(idx));
        }
        atoms.push((data, w));
    }
    EmpiricalMeasure::new(
        SpaceTag::Window {
            n_modes: n,
            steps,
            dt: traj.dt(),
        },
        atoms,
    )
}

/// Periodic extension of a trajectory restricted to `[0, t)`; evaluation
/// anywhere on the doubly infinite grid goes through the index modulo the
/// period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodizedTrajectory {
    dt: f64,
    n_modes: usize,
    /// States at times `0, dt, ..., t - dt`.
    base: Vec<f64>,
    period_steps: usize,
}

pub fn periodize(traj: &Trajectory, t: f64) -> Result<PeriodizedTrajectory, MeasureError> {
    let m = grid_steps(traj, t)?;
    if m == 0 {
        return Err(MeasureError::EmptyPeriod);
    }
    let n = traj.n_modes();
    let mut base = Vec::with_capacity(m * n);
    for i in 0..m {
        base.extend_from_slice(traj.state(i));
    }
    Ok(PeriodizedTrajectory {
        dt: traj.dt(),
        n_modes: n,
        base,
        period_steps: m,
    })
}

impl PeriodizedTrajectory {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn period_steps(&self) -> usize {
        self.period_steps
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// State at grid index `i`, any integer.
    pub fn state_at(&self, i: i64) -> &[f64] {
        let m = self.period_steps as i64;
        let idx = i.rem_euclid(m) as usize;
        &self.base[idx * self.n_modes..(idx + 1) * self.n_modes]
    }

    /// Wrapped window of `steps + 1` states starting at grid index `start`.
    pub fn window(&self, start: i64, steps: usize) -> Vec<f64> {
        let mut data = Vec::with_capacity((steps + 1) * self.n_modes);
        for k in 0..=steps {
            data.extend_from_slice(self.state_at(start + k as i64));
        }
        data
    }

    /// Shift by `steps` grid points; shifting by a full period is the
    /// identity.
    pub fn shifted(&self, steps: i64) -> PeriodizedTrajectory {
        let m = self.period_steps;
        let off = steps.rem_euclid(m as i64) as usize;
        let n = self.n_modes;
        let mut base = Vec::with_capacity(m * n);
        for i in 0..m {
            let idx = (i + off) % m;
            base.extend_from_slice(&self.base[idx * n..(idx + 1) * n]);
        }
        PeriodizedTrajectory {
            dt: self.dt,
            n_modes: n,
            base,
            period_steps: m,
        }
    }
}

/// Level-3 empirical measure of the periodized trajectory: uniform atoms on
/// the wrapped length-`window` segments starting at every grid point of the
/// period. Exactly shift-invariant by wraparound.
pub fn periodized_empirical(
    traj: &Trajectory,
    t: f64,
    window: f64,
) -> Result<EmpiricalMeasure, MeasureError> {
    let per = periodize(traj, t)?;
    let steps = grid_steps(traj, window)?;
    let m = per.period_steps();
    let w = 1.0 / m as f64;
    let atoms = (0..m).map(|s| (per.window(s as i64, steps), w)).collect();
    EmpiricalMeasure::new(
        SpaceTag::Window {
            n_modes: traj.n_modes(),
            steps,
            dt: traj.dt(),
        },
        atoms,
    )
}

/// Metric on the support points of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// H-norm distance between states.
    StateH,
    /// Max over grid points of the H-distance: the `C([0,T]; H)` sup metric
    /// at grid resolution.
    WindowSup,
    /// Truncated weighted metric `sum_m 2^{-m} min(1, sup_{[m-1,m]} ||.||)`,
    /// the computable stand-in for the Skorokhod-space metric on
    /// infinite-horizon comparisons.
    WindowWeighted,
}

fn state_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn point_distance(metric: MetricKind, tag: &SpaceTag, a: &[f64], b: &[f64]) -> f64 {
    match (metric, tag) {
        (MetricKind::StateH, SpaceTag::State { .. }) => state_distance(a, b),
        (MetricKind::WindowSup, SpaceTag::Window { n_modes, steps, .. }) => (0..=*steps)
            .map(|k| {
                state_distance(
                    &a[k * n_modes..(k + 1) * n_modes],
                    &b[k * n_modes..(k + 1) * n_modes],
                )
            })
            .fold(0.0, f64::max),
        (MetricKind::WindowWeighted, SpaceTag::Window { n_modes, steps, dt }) => {
            let total_time = *steps as f64 * dt;
            let intervals = total_time.ceil().max(1.0) as usize;
            let mut acc = 0.0;
            for m in 1..=intervals {
                let lo = ((m - 1) as f64 / dt - 1e-9).ceil().max(0.0) as usize;
                let hi = ((m as f64 / dt + 1e-9).floor() as usize).min(*steps);
                if lo > hi {
                    continue;
                }
                let sup = (lo..=hi)
                    .map(|k| {
                        state_distance(
                            &a[k * n_modes..(k + 1) * n_modes],
                            &b[k * n_modes..(k + 1) * n_modes],
                        )
                    })
                    .fold(0.0, f64::max);
                acc += 0.5f64.powi(m as i32) * sup.min(1.0);
            }
            acc
        }
        _ => unreachable!("metric/tag compatibility checked before"),
    }
}

fn check_metric(metric: MetricKind, tag: &SpaceTag) -> Result<(), MeasureError> {
    let ok = matches!(
        (metric, tag),
        (MetricKind::StateH, SpaceTag::State { .. })
            | (MetricKind::WindowSup, SpaceTag::Window { .. })
            | (MetricKind::WindowWeighted, SpaceTag::Window { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(MeasureError::MetricMismatch {
            metric: format!("{metric:?}"),
            tag: tag.describe(),
        })
    }
}

/// Exact dual-Lipschitz distance
/// `sup { <f, mu1> - <f, mu2> : ||f||_inf + Lip(f) <= 1 }`
/// as a single linear program over the union support: variables are the
/// f-values and the sup-norm budget `M`, with constraints `|f(x)| <= M` and
/// `|f(x) - f(y)| <= (1 - M) d(x, y)`.
///
/// Coinciding atoms are merged and points with zero net weight are dropped
/// first; by McShane extension along the (triangle-inequality) metric this
/// does not change the supremum.
pub fn dual_lipschitz(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    metric: MetricKind,
) -> Result<f64, MeasureError> {
    if mu1.tag != mu2.tag {
        return Err(MeasureError::SpaceMismatch(
            mu1.tag.describe(),
            mu2.tag.describe(),
        ));
    }
    check_metric(metric, &mu1.tag)?;

    // Union support with net coefficients w1 - w2, merged by bit pattern.
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points: Vec<&[f64]> = Vec::new();
    let mut coeff: Vec<f64> = Vec::new();
    let signed = mu1
        .atoms
        .iter()
        .map(|(p, w)| (p, *w))
        .chain(mu2.atoms.iter().map(|(p, w)| (p, -*w)));
    for (p, w) in signed {
        let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        let i = match index.get(&key) {
            Some(&i) => i,
            None => {
                index.insert(key, points.len());
                points.push(p.as_slice());
                coeff.push(0.0);
                points.len() - 1
            }
        };
        coeff[i] += w;
    }
    let live: Vec<usize> = (0..points.len()).filter(|&i| coeff[i] != 0.0).collect();
    if live.len() <= 1 {
        return Ok(0.0);
    }

    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let m_var = problem.add_var(0.0, (0.0, 1.0));
    let f_vars: Vec<_> = live
        .iter()
        .map(|&i| problem.add_var(coeff[i], (-1.0, 1.0)))
        .collect();
    for (a, &ia) in live.iter().enumerate() {
        // |f| <= M
        let mut up = LinearExpr::empty();
        up.add(f_vars[a], 1.0);
        up.add(m_var, -1.0);
        problem.add_constraint(up, ComparisonOp::Le, 0.0);
        let mut dn = LinearExpr::empty();
        dn.add(f_vars[a], -1.0);
        dn.add(m_var, -1.0);
        problem.add_constraint(dn, ComparisonOp::Le, 0.0);
        for (b, &ib) in live.iter().enumerate().skip(a + 1) {
            let d = point_distance(metric, &mu1.tag, points[ia], points[ib]);
            // f_a - f_b <= (1 - M) d, both orientations.
            let mut c1 = LinearExpr::empty();
            c1.add(f_vars[a], 1.0);
            c1.add(f_vars[b], -1.0);
            c1.add(m_var, d);
            problem.add_constraint(c1, ComparisonOp::Le, d);
            let mut c2 = LinearExpr::empty();
            c2.add(f_vars[b], 1.0);
            c2.add(f_vars[a], -1.0);
            c2.add(m_var, d);
            problem.add_constraint(c2, ComparisonOp::Le, d);
        }
    }
    let solution = problem
        .solve()
        .map_err(|e| MeasureError::LpFailure(e.to_string()))?;
    Ok(solution.objective().max(0.0))
}

/// Result of the exponential-equivalence check between the windowed
/// restrictions of the periodized and plain level-3 empirical measures.
#[derive(Debug, Clone)]
pub struct ExpEquivReport {
    pub t: f64,
    pub window: f64,
    pub gap: f64,
    /// `2 log 2 / t`.
    pub bound: f64,
    /// Discretization allowance `2 dt`.
    pub slack: f64,
}

/// Dual-Lipschitz gap between the length-`window` restrictions of the
/// periodized and plain trajectory empirical measures at time `t`, asserted
/// against the bound `2 log 2 / t` plus discretization slack `2 dt`.
pub fn exp_equiv_gap(
    traj: &Trajectory,
    t: f64,
    window: f64,
) -> Result<ExpEquivReport, MeasureError> {
    let plain = windowed_empirical(traj, window, t, WindowMode::Forward)?;
    let per = periodized_empirical(traj, t, window)?;
    let gap = dual_lipschitz(&plain, &per, MetricKind::WindowWeighted)?;
    let bound = 2.0 * std::f64::consts::LN_2 / t;
    let slack = 2.0 * traj.dt();
    if gap > bound + slack {
        return Err(MeasureError::ExpEquivViolation {
            gap,
            allowed: bound + slack,
            t,
        });
    }
    Ok(ExpEquivReport {
        t,
        window,
        gap,
        bound,
        slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::{build_custom_model, build_torus_model, ForcingSpec, NoiseSpec};
    use crate::sde::{simulate, InitialSampler};

    fn short_traj() -> Trajectory {
        let m = build_custom_model(vec![1.0, 2.0], vec![], vec![0.0; 2], vec![0.4, 0.3]).unwrap();
        simulate(&m, &[0.5, -0.3], 2.0, 0.25, 11).unwrap()
    }

    fn constant_traj(value: &[f64], steps: usize, dt: f64) -> Trajectory {
        let data: Vec<f64> = (0..=steps).flat_map(|_| value.to_vec()).collect();
        Trajectory::from_states(dt, value.len(), data, 0, "test".into())
    }

    fn delta(state: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(
            SpaceTag::State {
                n_modes: state.len(),
            },
            vec![(state.to_vec(), 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn occupation_of_constant_trajectory_is_point_mass() {
        let tr = constant_traj(&[1.0, 2.0], 8, 0.5);
        let mu = occupation_measure(&tr, 4.0).unwrap();
        // all atoms identical; integrate any f to get f at the atom
        let v = mu.integrate(|u| u[0] * 10.0 + u[1]);
        assert!((v - 12.0).abs() < 1e-12);
    }

    #[test]
    fn occupation_two_steps() {
        let tr = short_traj();
        let mu = occupation_measure(&tr, 0.5).unwrap();
        assert_eq!(mu.atoms().len(), 2);
        for (_, w) in mu.atoms() {
            assert!((w - 0.5).abs() < 1e-15);
        }
        // <V, zeta> equals the direct average for any V.
        let direct = ((tr.state(0)[0] - tr.state(0)[1]) + (tr.state(1)[0] - tr.state(1)[1])) / 2.0;
        assert!((mu.integrate(|u| u[0] - u[1]) - direct).abs() < 1e-15);
    }

    #[test]
    fn occupation_rejects_off_grid() {
        let tr = short_traj();
        assert!(occupation_measure(&tr, 0.3).is_err());
        assert!(occupation_measure(&tr, 0.0).is_err());
    }

    #[test]
    fn weights_sum_check_uses_compensation() {
        // 30_000 atoms of weight 1/30_000 must pass the 1e-12 gate.
        let atoms: Vec<(Vec<f64>, f64)> = (0..30_000)
            .map(|i| (vec![i as f64], 1.0 / 30_000.0))
            .collect();
        assert!(EmpiricalMeasure::new(SpaceTag::State { n_modes: 1 }, atoms).is_ok());
        let bad = vec![(vec![0.0], 0.5), (vec![1.0], 0.6)];
        assert!(matches!(
            EmpiricalMeasure::new(SpaceTag::State { n_modes: 1 }, bad).unwrap_err(),
            MeasureError::BadWeights { .. }
        ));
    }

    #[test]
    fn windowed_zero_window_is_occupation() {
        let tr = short_traj();
        let a = windowed_empirical(&tr, 0.0, 1.0, WindowMode::Forward).unwrap();
        let b = occupation_measure(&tr, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn windowed_forward_needs_lookahead() {
        let tr = short_traj(); // horizon 2.0
        assert!(windowed_empirical(&tr, 1.0, 1.0, WindowMode::Forward).is_ok());
        assert!(windowed_empirical(&tr, 1.5, 1.0, WindowMode::BackwardPadded).is_ok());
        assert!(matches!(
            windowed_empirical(&tr, 1.5, 1.0, WindowMode::Forward).unwrap_err(),
            MeasureError::WindowPastHorizon { .. }
        ));
    }

    #[test]
    fn backward_windows_freeze_initial_state() {
        let tr = short_traj();
        let mu = windowed_empirical(&tr, 0.5, 0.5, WindowMode::BackwardPadded).unwrap();
        // s = 0 and s = 0.25; for s = 0 the whole window is u_0.
        let (w0, _) = &mu.atoms()[0];
        assert_eq!(&w0[0..2], tr.state(0));
        assert_eq!(&w0[2..4], tr.state(0));
        assert_eq!(&w0[4..6], tr.state(0));
        // s = 0.25: (u_0, u_0, u_{0.25})
        let (w1, _) = &mu.atoms()[1];
        assert_eq!(&w1[0..2], tr.state(0));
        assert_eq!(&w1[2..4], tr.state(0));
        assert_eq!(&w1[4..6], tr.state(1));
    }

    #[test]
    fn periodize_wraps_exactly() {
        let tr = short_traj();
        let per = periodize(&tr, 1.0).unwrap(); // 4 steps
        for r in -9i64..9 {
            assert_eq!(per.state_at(r), per.state_at(r + 4));
        }
        // window [t-dt, t+dt] wraps to (u_{t-dt}, u_0, u_dt)
        let w = per.window(3, 2);
        assert_eq!(&w[0..2], tr.state(3));
        assert_eq!(&w[2..4], tr.state(0));
        assert_eq!(&w[4..6], tr.state(1));
        assert!(periodize(&tr, 0.0).is_err());
    }

    #[test]
    fn periodize_constant_is_constant() {
        let tr = constant_traj(&[0.7], 8, 0.5);
        let per = periodize(&tr, 2.0).unwrap();
        for r in -4i64..8 {
            assert_eq!(per.state_at(r), &[0.7]);
        }
    }

    #[test]
    fn shift_composition_on_trajectories() {
        let tr = short_traj();
        let a = tr.shifted(2).unwrap().shifted(3).unwrap();
        let b = tr.shifted(5).unwrap();
        assert_eq!(a, b);
        assert_eq!(tr.shifted(0).unwrap(), tr);
        // Shift by the full period is the identity on periodized data.
        let per = periodize(&tr, 1.0).unwrap();
        assert_eq!(per.shifted(4), per);
        assert_eq!(per.shifted(1).shifted(3), per);
    }

    #[test]
    fn periodized_empirical_shift_invariance_is_exact() {
        let tr = short_traj();
        let t = 1.5;
        let window = 0.5;
        let base = periodized_empirical(&tr, t, window).unwrap();
        // Build the same measure from the shifted periodization; the atom
        // multiset must be a permutation of the original, bit for bit.
        let per = periodize(&tr, t).unwrap();
        let steps = 2usize;
        let shifted = per.shifted(2);
        let m = per.period_steps();
        let mut originals: Vec<Vec<u64>> = base
            .atoms()
            .iter()
            .map(|(p, _)| p.iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut rotated: Vec<Vec<u64>> = (0..m)
            .map(|s| {
                shifted
                    .window(s as i64, steps)
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            })
            .collect();
        originals.sort();
        rotated.sort();
        assert_eq!(originals, rotated);
    }

    #[test]
    fn periodized_atoms_are_all_cyclic_rotations() {
        let tr = short_traj();
        let t = 1.0; // 4 steps
        let mu = periodized_empirical(&tr, t, 1.0).unwrap();
        assert_eq!(mu.atoms().len(), 4);
        let per = periodize(&tr, t).unwrap();
        for (s, (atom, _)) in mu.atoms().iter().enumerate() {
            assert_eq!(atom, &per.window(s as i64, 4));
        }
    }

    #[test]
    fn point_mass_distance_formula() {
        // sup over ||f||_inf + Lip(f) <= 1 gives 2d/(2+d) for two point
        // masses at distance d.
        for d in [0.1, 0.5, 1.0, 2.0, 5.0, 100.0] {
            let a = delta(&[0.0]);
            let b = delta(&[d]);
            let got = dual_lipschitz(&a, &b, MetricKind::StateH).unwrap();
            let want = 2.0 * d / (2.0 + d);
            assert!((got - want).abs() < 1e-8, "d={d}: {got} vs {want}");
            assert!(got <= 2.0);
        }
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let tr = short_traj();
        let mu = occupation_measure(&tr, 1.0).unwrap();
        assert_eq!(dual_lipschitz(&mu, &mu, MetricKind::StateH).unwrap(), 0.0);
    }

    #[test]
    fn dual_lipschitz_metric_axioms_on_random_triples() {
        let mut rng = crate::rng::stream(31);
        use rand::Rng as _;
        for _ in 0..10 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let k = 2 + (rng.gen::<u64>() % 3) as usize;
                let mut weights: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.1).collect();
                let s: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= s);
                // make the sum exactly 1 by assigning the remainder
                let excess: f64 = weights.iter().sum::<f64>() - 1.0;
                weights[0] -= excess;
                let atoms: Vec<(Vec<f64>, f64)> = weights
                    .into_iter()
                    .map(|w| (vec![rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>()], w))
                    .collect();
                EmpiricalMeasure::new(SpaceTag::State { n_modes: 2 }, atoms).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let c = mk(&mut rng);
            let dab = dual_lipschitz(&a, &b, MetricKind::StateH).unwrap();
            let dba = dual_lipschitz(&b, &a, MetricKind::StateH).unwrap();
            let dac = dual_lipschitz(&a, &c, MetricKind::StateH).unwrap();
            let dcb = dual_lipschitz(&c, &b, MetricKind::StateH).unwrap();
            assert!((dab - dba).abs() < 1e-8, "symmetry");
            assert!(dab <= dac + dcb + 1e-8, "triangle");
            assert!(dab >= 0.0 && dab <= 2.0);
        }
    }

    #[test]
    fn distinct_point_masses_have_positive_distance() {
        let a = delta(&[0.0]);
        let b = delta(&[1e-3]);
        assert!(dual_lipschitz(&a, &b, MetricKind::StateH).unwrap() > 1e-4);
    }

    #[test]
    fn integration_is_linear_and_bounded() {
        let tr = short_traj();
        let mu = occupation_measure(&tr, 1.0).unwrap();
        let f = |u: &[f64]| (u[0] * 3.0).tanh();
        let g = |u: &[f64]| u[1].cos();
        let lhs = mu.integrate(|u| 2.0 * f(u) + g(u));
        let rhs = 2.0 * mu.integrate(f) + mu.integrate(g);
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(mu.integrate(f).abs() <= 1.0 + 1e-12); // ||tanh||_inf = 1
    }

    #[test]
    fn space_and_metric_mismatches_rejected() {
        let tr = short_traj();
        let occ = occupation_measure(&tr, 1.0).unwrap();
        let win = windowed_empirical(&tr, 0.5, 1.0, WindowMode::Forward).unwrap();
        assert!(matches!(
            dual_lipschitz(&occ, &win, MetricKind::StateH).unwrap_err(),
            MeasureError::SpaceMismatch(..)
        ));
        assert!(matches!(
            dual_lipschitz(&occ, &occ, MetricKind::WindowSup).unwrap_err(),
            MeasureError::MetricMismatch { .. }
        ));
    }

    #[test]
    fn exp_equiv_gap_constant_trajectory_is_zero() {
        let tr = constant_traj(&[0.4, 0.1], 40, 0.25);
        let report = exp_equiv_gap(&tr, 5.0, 2.0).unwrap();
        assert_eq!(report.gap, 0.0);
        assert!((report.bound - 2.0 * std::f64::consts::LN_2 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn exp_equiv_bound_value_at_t_ten() {
        let tr = constant_traj(&[0.0], 100, 0.25);
        let report = exp_equiv_gap(&tr, 10.0, 2.0).unwrap();
        assert!((report.bound - 0.13862943611198905).abs() < 1e-12);
    }

    #[test]
    fn exp_equiv_gap_on_simulated_torus() {
        let model = build_torus_model(
            1,
            &ForcingSpec::None,
            &NoiseSpec::Uniform { amplitude: 0.15 },
        )
        .unwrap();
        let dt = 0.05;
        let t = 5.0;
        let window = 2.0;
        let e = crate::sde::ensemble(
            &model,
            &InitialSampler::GaussianIsotropic { scale: 0.1 },
            1,
            t + window,
            dt,
            4242,
        )
        .unwrap();
        let report = exp_equiv_gap(&e.members()[0], t, window).unwrap();
        assert!(report.gap > 0.0, "simulated path should wrap differently");
        assert!(report.gap <= report.bound + report.slack);
    }

    #[test]
    fn measure_document_round_trip() {
        let tr = short_traj();
        for mu in [
            occupation_measure(&tr, 1.0).unwrap(),
            windowed_empirical(&tr, 0.5, 1.0, WindowMode::Forward).unwrap(),
        ] {
            let doc = mu.to_document();
            let back = EmpiricalMeasure::from_document(&doc).unwrap();
            assert_eq!(mu, back);
        }
        // Window documents carry the metric-substitution note.
        let win = windowed_empirical(&tr, 0.5, 1.0, WindowMode::Forward).unwrap();
        assert!(win.to_document().contains("note window metrics"));
    }

    #[test]
    fn weighted_window_metric_is_capped_and_truncated() {
        // Two constant windows differing by a huge state distance: each unit
        // interval contributes at most 2^{-m}, so the total is below 1.
        let steps = 12usize; // 3 time units at dt = 0.25
        let dt = 0.25;
        let tag = SpaceTag::Window {
            n_modes: 1,
            steps,
            dt,
        };
        let w1: Vec<f64> = vec![0.0; steps + 1];
        let w2: Vec<f64> = vec![100.0; steps + 1];
        let a = EmpiricalMeasure::new(tag, vec![(w1.clone(), 1.0)]).unwrap();
        let b = EmpiricalMeasure::new(tag, vec![(w2.clone(), 1.0)]).unwrap();
        let d = point_distance(MetricKind::WindowWeighted, &tag, &w1, &w2);
        // 1/2 + 1/4 + 1/8 with the cap at 1 per interval
        assert!((d - 0.875).abs() < 1e-12);
        let dl = dual_lipschitz(&a, &b, MetricKind::WindowWeighted).unwrap();
        assert!((dl - 2.0 * d / (2.0 + d)).abs() < 1e-8);
    }
}
