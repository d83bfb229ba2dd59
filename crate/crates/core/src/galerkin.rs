//! Spectral truncation of the forced 2D Navier-Stokes system: Stokes
//! eigenbasis, noise amplitudes, deterministic forcing, and the sparse
//! trilinear form of the advection term with its exact energy cancellation.
//!
//! The concrete instantiation uses divergence-free real Fourier modes on the
//! 2D torus (two real modes, cosine and sine, per retained wavevector pair
//! `{k, -k}`), with the Stokes eigenvalue of a mode equal to `|k|^2` and
//! viscosity normalized to 1. Arbitrary validated `(alpha, T, h, b)` data is
//! accepted through [`build_custom_model`], so everything downstream depends
//! only on the abstract structure.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::fingerprint;
use crate::rng;
use thiserror::Error;

/// Relative tolerance for the energy-cancellation identity of the advection
/// tensor: `|<B(u,u), u>| <= CANCELLATION_TOL * ||u|| * max(||B(u,u)||, 1)`.
pub const CANCELLATION_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(
        "eigenvalue spectrum must be positive and nondecreasing (index {index}, value {value})"
    )]
    SpectrumViolation { index: usize, value: f64 },
    #[error("noise amplitude b[{index}] = {value} violates non-degeneracy (b_j > 0 required)")]
    NonDegenerateNoise { index: usize, value: f64 },
    #[error("tensor violates cancellation: |<B(u,u),u>| = {residual:.3e} exceeds {limit:.3e} on a probe state")]
    CancellationViolation { residual: f64, limit: f64 },
    #[error("tensor entry ({i},{j},{k}) out of range for {n} modes")]
    TensorIndex {
        i: usize,
        j: usize,
        k: usize,
        n: usize,
    },
    #[error("non-finite value in model data: {0}")]
    NonFinite(String),
    #[error("invalid projection level {level} for {n} modes")]
    ProjectionLevel { level: usize, n: usize },
    #[error("model document parse error: {0}")]
    Parse(String),
}

/// Parity of a real torus Fourier mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Cos,
    Sin,
}

/// Wavevector and parity of one real mode; part of the documented index map
/// emitted with torus models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeIndex {
    pub kx: i64,
    pub ky: i64,
    pub parity: Parity,
}

impl ModeIndex {
    fn k_sq(&self) -> i64 {
        self.kx * self.kx + self.ky * self.ky
    }

    /// Unit vector along `k_perp = (-ky, kx)`; the velocity direction of the
    /// divergence-free mode.
    fn unit_perp(&self) -> (f64, f64) {
        let norm = ((self.kx * self.kx + self.ky * self.ky) as f64).sqrt();
        (-(self.ky as f64) / norm, self.kx as f64 / norm)
    }
}

/// One entry of the sparse trilinear advection tensor:
/// `B(u,u)_k = sum_{i,j} T[i][j][k] u_i u_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorEntry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

/// Spectral truncation of the stochastic Navier-Stokes system.
///
/// Immutable after construction; all operations are pure, so a model can be
/// shared freely across concurrent workers.
#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinModel {
    eigenvalues: Vec<f64>,
    noise_amps: Vec<f64>,
    forcing: Vec<f64>,
    tensor: Vec<TensorEntry>,
    index_map: Vec<ModeIndex>,
    id: String,
}

/// Deterministic forcing profile for the torus builder.
#[derive(Debug, Clone)]
pub enum ForcingSpec {
    None,
    /// Force the cosine modes of the lowest Stokes shell with this amplitude.
    LowestShellCos {
        amplitude: f64,
    },
    Coefficients(Vec<f64>),
}

/// Noise amplitude profile for the torus builder.
#[derive(Debug, Clone)]
pub enum NoiseSpec {
    Uniform {
        amplitude: f64,
    },
    /// `b_j = amplitude * alpha_j^{-exponent}`.
    SpectralDecay {
        amplitude: f64,
        exponent: f64,
    },
    Coefficients(Vec<f64>),
}

/// `||u||^2 = sum u_j^2` (H-norm squared).
pub fn h_norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum()
}

/// Euclidean inner product, summed in index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Split `u` into `(P_N u, Q_N u)`: the first `n` coefficients and the rest,
/// both zero-padded to full length so that `P_N u + Q_N u = u` bit-exactly.
pub fn project(u: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if n > u.len() {
        return Err(ModelError::ProjectionLevel {
            level: n,
            n: u.len(),
        });
    }
    let mut p = vec![0.0; u.len()];
    let mut q = vec![0.0; u.len()];
    p[..n].copy_from_slice(&u[..n]);
    q[n..].copy_from_slice(&u[n..]);
    Ok((p, q))
}

impl GalerkinModel {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn noise_amps(&self) -> &[f64] {
        &self.noise_amps
    }

    pub fn forcing(&self) -> &[f64] {
        &self.forcing
    }

    pub fn tensor_entries(&self) -> &[TensorEntry] {
        &self.tensor
    }

    /// Wavevector bookkeeping for torus models; empty for custom models.
    pub fn index_map(&self) -> &[ModeIndex] {
        &self.index_map
    }

    /// Content fingerprint of the model document; referenced by trajectory
    /// headers.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// `B_0 = sum b_j^2`.
    pub fn b0(&self) -> f64 {
        self.noise_amps.iter().map(|b| b * b).sum()
    }

    /// `B_1 = sum alpha_j b_j^2`; finite by construction, stored for reporting.
    pub fn b1(&self) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.noise_amps)
            .map(|(a, b)| a * b * b)
            .sum()
    }

    /// `||h||_1` of the forcing, recorded for reporting.
    pub fn forcing_u1_norm(&self) -> f64 {
        self.u1_norm_sq(&self.forcing).sqrt()
    }

    /// `||u||_1^2 = sum alpha_j u_j^2`, summed exactly as `<Lu, u>`.
    pub fn u1_norm_sq(&self, u: &[f64]) -> f64 {
        assert_eq!(u.len(), self.n_modes());
        self.eigenvalues
            .iter()
            .zip(u)
            .map(|(a, x)| (a * x) * x)
            .sum()
    }

    /// `||u||_{-1}^2 = sum u_j^2 / alpha_j`.
    pub fn dual_norm_sq(&self, u: &[f64]) -> f64 {
        assert_eq!(u.len(), self.n_modes());
        self.eigenvalues.iter().zip(u).map(|(a, x)| x * x / a).sum()
    }

    /// `(Lu)_j = alpha_j u_j`.
    pub fn apply_stokes(&self, u: &[f64]) -> Result<Vec<f64>, ModelError> {
        if u.len() != self.n_modes() {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_modes(),
                got: u.len(),
            });
        }
        Ok(self.eigenvalues.iter().zip(u).map(|(a, x)| a * x).collect())
    }

    /// `B(u,u)` by sparse tensor contraction.
    pub fn apply_nonlinearity(&self, u: &[f64]) -> Result<Vec<f64>, ModelError> {
        if u.len() != self.n_modes() {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_modes(),
                got: u.len(),
            });
        }
        let mut out = vec![0.0; self.n_modes()];
        self.nonlinearity_into(u, &mut out);
        Ok(out)
    }

    /// Contraction kernel; dimensions are the caller's responsibility.
    pub(crate) fn nonlinearity_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n_modes());
        out.fill(0.0);
        for e in &self.tensor {
            out[e.k] += e.value * u[e.i] * u[e.j];
        }
    }

    /// Canonical text document; round-trips bit-exactly through
    /// [`GalerkinModel::from_document`] for finite values.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let s = &mut out;
        writeln!(s, "dvns-model v1").unwrap();
        writeln!(s, "n_modes {}", self.n_modes()).unwrap();
        write_f64_line(s, "eigenvalues", &self.eigenvalues);
        write_f64_line(s, "noise_amps", &self.noise_amps);
        write_f64_line(s, "forcing", &self.forcing);
        writeln!(s, "tensor {}", self.tensor.len()).unwrap();
        for e in &self.tensor {
            writeln!(s, "{} {} {} {}", e.i, e.j, e.k, e.value).unwrap();
        }
        writeln!(s, "index_map {}", self.index_map.len()).unwrap();
        for m in &self.index_map {
            let p = match m.parity {
                Parity::Cos => "cos",
                Parity::Sin => "sin",
            };
            writeln!(s, "{} {} {}", m.kx, m.ky, p).unwrap();
        }
        writeln!(s, "end").unwrap();
        out
    }

    /// Parse a model document and re-validate every invariant.
    pub fn from_document(doc: &str) -> Result<GalerkinModel, ModelError> {
        let (eigenvalues, tensor, forcing, noise_amps, index_map) = Self::parse_parts(doc)?;
        validate_and_build(eigenvalues, tensor, forcing, noise_amps, index_map)
    }

    /// Parse a model document without invariant validation. Intended for
    /// diagnostic verification runs that must be able to load a broken model
    /// and exhibit the failure; everything else should use
    /// [`GalerkinModel::from_document`].
    pub fn from_document_unvalidated(doc: &str) -> Result<GalerkinModel, ModelError> {
        let (eigenvalues, tensor, forcing, noise_amps, index_map) = Self::parse_parts(doc)?;
        let tensor = symmetrize(tensor);
        let mut model = GalerkinModel {
            eigenvalues,
            noise_amps,
            forcing,
            tensor,
            index_map,
            id: String::new(),
        };
        model.id = fingerprint::fingerprint_str(&model.to_document());
        Ok(model)
    }

    #[allow(clippy::type_complexity)]
    fn parse_parts(
        doc: &str,
    ) -> Result<
        (
            Vec<f64>,
            Vec<TensorEntry>,
            Vec<f64>,
            Vec<f64>,
            Vec<ModeIndex>,
        ),
        ModelError,
    > {
        let mut lines = doc.lines();
        let header = lines.next().ok_or_else(|| parse_err("empty document"))?;
        if header.trim() != "dvns-model v1" {
            return Err(parse_err(&format!("unexpected header {header:?}")));
        }
        let n: usize = parse_kv(lines.next(), "n_modes")?
            .parse()
            .map_err(|e| parse_err(&format!("n_modes: {e}")))?;
        let eigenvalues = parse_f64_line(lines.next(), "eigenvalues", n)?;
        let noise_amps = parse_f64_line(lines.next(), "noise_amps", n)?;
        let forcing = parse_f64_line(lines.next(), "forcing", n)?;
        let n_tensor: usize = parse_kv(lines.next(), "tensor")?
            .parse()
            .map_err(|e| parse_err(&format!("tensor count: {e}")))?;
        let mut tensor = Vec::with_capacity(n_tensor);
        for _ in 0..n_tensor {
            let line = lines.next().ok_or_else(|| parse_err("truncated tensor"))?;
            let mut it = line.split_whitespace();
            let i = next_usize(&mut it, "tensor i")?;
            let j = next_usize(&mut it, "tensor j")?;
            let k = next_usize(&mut it, "tensor k")?;
            let value = next_f64(&mut it, "tensor value")?;
            tensor.push(TensorEntry { i, j, k, value });
        }
        let n_map: usize = parse_kv(lines.next(), "index_map")?
            .parse()
            .map_err(|e| parse_err(&format!("index_map count: {e}")))?;
        let mut index_map = Vec::with_capacity(n_map);
        for _ in 0..n_map {
            let line = lines
                .next()
                .ok_or_else(|| parse_err("truncated index_map"))?;
            let mut it = line.split_whitespace();
            let kx = next_i64(&mut it, "index kx")?;
            let ky = next_i64(&mut it, "index ky")?;
            let parity = match it.next() {
                Some("cos") => Parity::Cos,
                Some("sin") => Parity::Sin,
                other => return Err(parse_err(&format!("bad parity {other:?}"))),
            };
            index_map.push(ModeIndex { kx, ky, parity });
        }
        if lines.next().map(str::trim) != Some("end") {
            return Err(parse_err("missing end marker"));
        }
        Ok((eigenvalues, tensor, forcing, noise_amps, index_map))
    }
}

fn write_f64_line(s: &mut String, key: &str, vals: &[f64]) {
    write!(s, "{key}").unwrap();
    for v in vals {
        write!(s, " {v}").unwrap();
    }
    writeln!(s).unwrap();
}

fn parse_err(msg: &str) -> ModelError {
    ModelError::Parse(msg.to_string())
}

fn parse_kv(line: Option<&str>, key: &str) -> Result<String, ModelError> {
    let line = line.ok_or_else(|| parse_err(&format!("missing {key} line")))?;
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| parse_err(&format!("expected {key} line, got {line:?}")))?;
    Ok(rest.trim().to_string())
}

fn parse_f64_line(line: Option<&str>, key: &str, n: usize) -> Result<Vec<f64>, ModelError> {
    let body = parse_kv(line, key)?;
    let vals: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| parse_err(&format!("{key}: {e}")))?;
    if vals.len() != n {
        return Err(parse_err(&format!(
            "{key}: expected {n} values, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn next_usize(it: &mut std::str::SplitWhitespace, what: &str) -> Result<usize, ModelError> {
    it.next()
        .ok_or_else(|| parse_err(&format!("missing {what}")))?
        .parse()
        .map_err(|e| parse_err(&format!("{what}: {e}")))
}

fn next_i64(it: &mut std::str::SplitWhitespace, what: &str) -> Result<i64, ModelError> {
    it.next()
        .ok_or_else(|| parse_err(&format!("missing {what}")))?
        .parse()
        .map_err(|e| parse_err(&format!("{what}: {e}")))
}

fn next_f64(it: &mut std::str::SplitWhitespace, what: &str) -> Result<f64, ModelError> {
    it.next()
        .ok_or_else(|| parse_err(&format!("missing {what}")))?
        .parse()
        .map_err(|e| parse_err(&format!("{what}: {e}")))
}

/// Build a model with arbitrary spectral data, validating every invariant:
/// positive nondecreasing spectrum, non-degenerate noise, in-range tensor
/// indices, and the cancellation identity on a fixed suite of probe states.
/// The tensor is symmetrized in `(i, j)` on load.
pub fn build_custom_model(
    eigenvalues: Vec<f64>,
    tensor: Vec<TensorEntry>,
    forcing: Vec<f64>,
    noise_amps: Vec<f64>,
) -> Result<GalerkinModel, ModelError> {
    validate_and_build(eigenvalues, tensor, forcing, noise_amps, Vec::new())
}

fn validate_and_build(
    eigenvalues: Vec<f64>,
    tensor: Vec<TensorEntry>,
    forcing: Vec<f64>,
    noise_amps: Vec<f64>,
    index_map: Vec<ModeIndex>,
) -> Result<GalerkinModel, ModelError> {
    let n = eigenvalues.len();
    for (name, v) in [("forcing", &forcing), ("noise_amps", &noise_amps)] {
        if v.len() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite(format!("{name} contains {x}")));
        }
    }
    let mut prev = 0.0;
    for (i, &a) in eigenvalues.iter().enumerate() {
        if !(a.is_finite() && a > 0.0 && a >= prev) {
            return Err(ModelError::SpectrumViolation { index: i, value: a });
        }
        prev = a;
    }
    for (i, &b) in noise_amps.iter().enumerate() {
        if !(b.is_finite() && b > 0.0) {
            return Err(ModelError::NonDegenerateNoise { index: i, value: b });
        }
    }
    if !index_map.is_empty() && index_map.len() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: index_map.len(),
        });
    }
    for e in &tensor {
        if e.i >= n || e.j >= n || e.k >= n {
            return Err(ModelError::TensorIndex {
                i: e.i,
                j: e.j,
                k: e.k,
                n,
            });
        }
        if !e.value.is_finite() {
            return Err(ModelError::NonFinite(format!(
                "tensor entry ({},{},{})",
                e.i, e.j, e.k
            )));
        }
    }
    let tensor = symmetrize(tensor);
    let mut model = GalerkinModel {
        eigenvalues,
        noise_amps,
        forcing,
        tensor,
        index_map,
        id: String::new(),
    };
    check_cancellation(&model)?;
    model.id = fingerprint::fingerprint_str(&model.to_document());
    Ok(model)
}

/// Symmetrize in `(i, j)` and drop exact zeros; entry order is canonicalized
/// so that equal tensors serialize identically.
fn symmetrize(entries: Vec<TensorEntry>) -> Vec<TensorEntry> {
    let mut acc: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for e in entries {
        *acc.entry((e.i.min(e.j), e.i.max(e.j), e.k)).or_insert(0.0) += 0.5 * e.value;
    }
    let mut out = Vec::new();
    for (&(i, j, k), &v) in &acc {
        if v == 0.0 {
            continue;
        }
        if i == j {
            out.push(TensorEntry {
                i,
                j,
                k,
                value: 2.0 * v,
            });
        } else {
            out.push(TensorEntry { i, j, k, value: v });
            out.push(TensorEntry {
                i: j,
                j: i,
                k,
                value: v,
            });
        }
    }
    out.sort_by(|a, b| (a.i, a.j, a.k).cmp(&(b.i, b.j, b.k)));
    out
}

const VALIDATION_SEED: u64 = 0x6a09_e667_f3bc_c908;
const VALIDATION_PROBES: usize = 20;

fn check_cancellation(model: &GalerkinModel) -> Result<(), ModelError> {
    let n = model.n_modes();
    let mut rng = rng::stream(VALIDATION_SEED);
    let mut u = vec![0.0; n];
    let mut b = vec![0.0; n];
    for _ in 0..VALIDATION_PROBES {
        rng::fill_standard_normal(&mut rng, &mut u);
        model.nonlinearity_into(&u, &mut b);
        let residual = dot(&b, &u).abs();
        let limit = CANCELLATION_TOL * h_norm_sq(&u).sqrt() * h_norm_sq(&b).sqrt().max(1.0);
        if residual > limit {
            return Err(ModelError::CancellationViolation { residual, limit });
        }
    }
    Ok(())
}

/// Build the 2D torus model: divergence-free real Fourier modes with
/// `|k| <= max_wavenumber`, Stokes eigenvalue `|k|^2` per mode, and the
/// advection tensor assembled in closed form from the convolution structure
/// of the projected nonlinearity.
pub fn build_torus_model(
    max_wavenumber: u32,
    forcing: &ForcingSpec,
    noise: &NoiseSpec,
) -> Result<GalerkinModel, ModelError> {
    assert!(max_wavenumber >= 1, "max_wavenumber must be at least 1");
    let index_map = torus_modes(max_wavenumber);
    let n = index_map.len();
    let eigenvalues: Vec<f64> = index_map.iter().map(|m| m.k_sq() as f64).collect();
    let noise_amps = match noise {
        NoiseSpec::Uniform { amplitude } => vec![*amplitude; n],
        NoiseSpec::SpectralDecay {
            amplitude,
            exponent,
        } => eigenvalues
            .iter()
            .map(|a| amplitude * a.powf(-exponent))
            .collect(),
        NoiseSpec::Coefficients(v) => v.clone(),
    };
    let alpha_min = eigenvalues.first().copied().unwrap_or(1.0);
    let forcing = match forcing {
        ForcingSpec::None => vec![0.0; n],
        ForcingSpec::LowestShellCos { amplitude } => index_map
            .iter()
            .map(|m| {
                if m.k_sq() as f64 == alpha_min && m.parity == Parity::Cos {
                    *amplitude
                } else {
                    0.0
                }
            })
            .collect(),
        ForcingSpec::Coefficients(v) => v.clone(),
    };
    let tensor = torus_tensor(&index_map);
    validate_and_build(eigenvalues, tensor, forcing, noise_amps, index_map)
}

/// Retained wavevector representatives (half-plane convention), sorted by
/// `(|k|^2, kx, ky)`, each contributing a cosine and a sine mode.
fn torus_modes(max_wavenumber: u32) -> Vec<ModeIndex> {
    let kmax = max_wavenumber as i64;
    let k2max = kmax * kmax;
    let mut vecs = Vec::new();
    for kx in 0..=kmax {
        for ky in -kmax..=kmax {
            if kx == 0 && ky <= 0 {
                continue;
            }
            if kx * kx + ky * ky > k2max {
                continue;
            }
            vecs.push((kx, ky));
        }
    }
    vecs.sort_by_key(|&(x, y)| (x * x + y * y, x, y));
    let mut modes = Vec::with_capacity(2 * vecs.len());
    for (kx, ky) in vecs {
        modes.push(ModeIndex {
            kx,
            ky,
            parity: Parity::Cos,
        });
        modes.push(ModeIndex {
            kx,
            ky,
            parity: Parity::Sin,
        });
    }
    modes
}

/// Closed-form assembly of `T[i][j][k] = <(psi_i . grad) psi_j, psi_k>` via
/// product-to-sum identities: the product of two modes excites only the
/// wavevectors `k_i + k_j` and `k_i - k_j`, and the Leray projection reduces
/// to an inner product with the (divergence-free) target mode.
fn torus_tensor(modes: &[ModeIndex]) -> Vec<TensorEntry> {
    let n = modes.len();
    let mut lookup: HashMap<(i64, i64, Parity), usize> = HashMap::new();
    for (m, mi) in modes.iter().enumerate() {
        lookup.insert((mi.kx, mi.ky, mi.parity), m);
    }
    let mut acc: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for i in 0..n {
        let e_i = modes[i].unit_perp();
        for j in 0..n {
            let kj = (modes[j].kx, modes[j].ky);
            // Advection coefficient e_i . k_j; zero iff k_i || k_j.
            let coupling = e_i.0 * kj.0 as f64 + e_i.1 * kj.1 as f64;
            if coupling == 0.0 {
                continue;
            }
            let e_j = modes[j].unit_perp();
            let kplus = (modes[i].kx + kj.0, modes[i].ky + kj.1);
            let kminus = (modes[i].kx - kj.0, modes[i].ky - kj.1);
            // trig_i(th_i) * d/dth_j[trig_j](th_j) expanded into half-angle
            // sums over th_i + th_j and th_i - th_j.
            let terms: [(f64, Parity, (i64, i64)); 2] = match (modes[i].parity, modes[j].parity) {
                (Parity::Cos, Parity::Cos) => {
                    [(-0.5, Parity::Sin, kplus), (0.5, Parity::Sin, kminus)]
                }
                (Parity::Cos, Parity::Sin) => {
                    [(0.5, Parity::Cos, kplus), (0.5, Parity::Cos, kminus)]
                }
                (Parity::Sin, Parity::Cos) => {
                    [(0.5, Parity::Cos, kplus), (-0.5, Parity::Cos, kminus)]
                }
                (Parity::Sin, Parity::Sin) => {
                    [(0.5, Parity::Sin, kplus), (0.5, Parity::Sin, kminus)]
                }
            };
            for (raw_coeff, parity, kvec) in terms {
                if kvec == (0, 0) {
                    continue;
                }
                let (kvec, coeff) = canonicalize(kvec, parity, raw_coeff);
                let Some(&m) = lookup.get(&(kvec.0, kvec.1, parity)) else {
                    continue; // outside the truncation
                };
                let e_m = modes[m].unit_perp();
                let projection = e_j.0 * e_m.0 + e_j.1 * e_m.1;
                if projection == 0.0 {
                    continue;
                }
                let value = std::f64::consts::SQRT_2 * coupling * coeff * projection;
                *acc.entry((i, j, m)).or_insert(0.0) += value;
            }
        }
    }
    acc.iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|(&(i, j, k), &value)| TensorEntry { i, j, k, value })
        .collect()
}

/// Flip a wavevector into the representative half-plane; cosine is even and
/// sine is odd under the flip.
fn canonicalize(kvec: (i64, i64), parity: Parity, coeff: f64) -> ((i64, i64), f64) {
    if kvec.0 < 0 || (kvec.0 == 0 && kvec.1 < 0) {
        let flipped = (-kvec.0, -kvec.1);
        match parity {
            Parity::Cos => (flipped, coeff),
            Parity::Sin => (flipped, -coeff),
        }
    } else {
        (kvec, coeff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus(k: u32) -> GalerkinModel {
        build_torus_model(
            k,
            &ForcingSpec::None,
            &NoiseSpec::Uniform { amplitude: 0.1 },
        )
        .unwrap()
    }

    #[test]
    fn lowest_truncation_has_four_unit_modes() {
        let m = torus(1);
        assert_eq!(m.n_modes(), 4);
        assert!(m.eigenvalues().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn wavenumber_two_spectrum_is_1_2_4() {
        // Enumerating |k|^2 <= 4 over the integer lattice gives only {1, 2, 4}.
        let m = torus(2);
        assert_eq!(m.n_modes(), 12);
        let mut seen: Vec<f64> = m.eigenvalues().to_vec();
        seen.dedup();
        assert_eq!(seen, vec![1.0, 2.0, 4.0]);
        for mode in m.index_map() {
            assert_eq!(
                (mode.kx * mode.kx + mode.ky * mode.ky) as f64,
                m.eigenvalues()[m.index_map().iter().position(|x| x == mode).unwrap()]
            );
        }
    }

    #[test]
    fn cancellation_on_random_states() {
        let m = torus(3);
        let mut rng = crate::rng::stream(17);
        let mut u = vec![0.0; m.n_modes()];
        for _ in 0..50 {
            crate::rng::fill_standard_normal(&mut rng, &mut u);
            let b = m.apply_nonlinearity(&u).unwrap();
            let res = dot(&b, &u).abs();
            let lim = CANCELLATION_TOL * h_norm_sq(&u).sqrt() * h_norm_sq(&b).sqrt().max(1.0);
            assert!(res <= lim, "residual {res} exceeds {lim}");
        }
    }

    #[test]
    fn single_mode_state_orthogonal_to_its_advection() {
        let m = torus(2);
        for j in 0..m.n_modes() {
            let mut u = vec![0.0; m.n_modes()];
            u[j] = 1.3;
            let b = m.apply_nonlinearity(&u).unwrap();
            assert!(dot(&b, &u).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_matches_grid_quadrature() {
        // Independent evaluation of <(u.grad)u, psi_m> by exact trigonometric
        // quadrature on a grid fine enough for the product frequencies.
        for kmax in [1u32, 2, 3] {
            let m = torus(kmax);
            let n = m.n_modes();
            let grid = (4 * kmax + 2) as usize;
            let mut rng = crate::rng::stream(23 + kmax as u64);
            let mut u = vec![0.0; n];
            crate::rng::fill_standard_normal(&mut rng, &mut u);

            let b_tensor = m.apply_nonlinearity(&u).unwrap();

            let two_pi = std::f64::consts::TAU;
            let mut b_grid = vec![0.0; n];
            for (target, bg) in b_grid.iter_mut().enumerate() {
                let mut acc = 0.0;
                for gx in 0..grid {
                    for gy in 0..grid {
                        let x = two_pi * gx as f64 / grid as f64;
                        let y = two_pi * gy as f64 / grid as f64;
                        // velocity and gradient at (x, y)
                        let mut vel = [0.0f64; 2];
                        let mut grad = [[0.0f64; 2]; 2]; // grad[a][c] = d_a U_c
                        for (idx, mode) in m.index_map().iter().enumerate() {
                            let e = mode.unit_perp();
                            let th = mode.kx as f64 * x + mode.ky as f64 * y;
                            let sqrt2 = std::f64::consts::SQRT_2;
                            let (val, dval) = match mode.parity {
                                Parity::Cos => (th.cos(), -th.sin()),
                                Parity::Sin => (th.sin(), th.cos()),
                            };
                            let amp = u[idx] * sqrt2;
                            vel[0] += amp * e.0 * val;
                            vel[1] += amp * e.1 * val;
                            for (a, kk) in [(0, mode.kx as f64), (1, mode.ky as f64)] {
                                grad[a][0] += amp * e.0 * kk * dval;
                                grad[a][1] += amp * e.1 * kk * dval;
                            }
                        }
                        let adv = [
                            vel[0] * grad[0][0] + vel[1] * grad[1][0],
                            vel[0] * grad[0][1] + vel[1] * grad[1][1],
                        ];
                        let mode = &m.index_map()[target];
                        let e = mode.unit_perp();
                        let th = mode.kx as f64 * x + mode.ky as f64 * y;
                        let val = match mode.parity {
                            Parity::Cos => th.cos(),
                            Parity::Sin => th.sin(),
                        };
                        let psi = [
                            std::f64::consts::SQRT_2 * e.0 * val,
                            std::f64::consts::SQRT_2 * e.1 * val,
                        ];
                        acc += adv[0] * psi[0] + adv[1] * psi[1];
                    }
                }
                *bg = acc / (grid * grid) as f64;
            }

            for k in 0..n {
                assert!(
                    (b_tensor[k] - b_grid[k]).abs() < 1e-10,
                    "kmax={kmax} mode {k}: tensor {} vs quadrature {}",
                    b_tensor[k],
                    b_grid[k]
                );
            }
        }
    }

    #[test]
    fn zero_tensor_gives_valid_linear_model() {
        let m = build_custom_model(vec![1.0, 2.0], vec![], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = m.apply_nonlinearity(&[0.3, -0.4]).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn diagonal_tensor_entry_rejected() {
        // T[0][0][0] = 1 makes <B(u,u), u> = u_0^3 != 0.
        let err = build_custom_model(
            vec![1.0, 2.0],
            vec![TensorEntry {
                i: 0,
                j: 0,
                k: 0,
                value: 1.0,
            }],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::CancellationViolation { .. }));
    }

    #[test]
    fn decreasing_spectrum_rejected() {
        let err = build_custom_model(vec![2.0, 1.0], vec![], vec![0.0; 2], vec![1.0; 2]);
        assert!(matches!(
            err.unwrap_err(),
            ModelError::SpectrumViolation { index: 1, .. }
        ));
    }

    #[test]
    fn degenerate_noise_rejected() {
        let err = build_custom_model(vec![1.0, 2.0], vec![], vec![0.0; 2], vec![1.0, 0.0]);
        assert!(matches!(
            err.unwrap_err(),
            ModelError::NonDegenerateNoise { index: 1, .. }
        ));
    }

    #[test]
    fn torus_tensor_revalidates_through_custom_builder() {
        let m = torus(2);
        let again = build_custom_model(
            m.eigenvalues().to_vec(),
            m.tensor_entries().to_vec(),
            m.forcing().to_vec(),
            m.noise_amps().to_vec(),
        )
        .unwrap();
        assert_eq!(m.tensor_entries(), again.tensor_entries());
    }

    #[test]
    fn stokes_examples() {
        let m = torus(2);
        let n = m.n_modes();
        let mut e1 = vec![0.0; n];
        e1[0] = 1.0;
        let l = m.apply_stokes(&e1).unwrap();
        assert_eq!(l[0], m.eigenvalues()[0]);
        assert!(l[1..].iter().all(|&x| x == 0.0));
        assert_eq!(m.apply_stokes(&vec![0.0; n]).unwrap(), vec![0.0; n]);

        let mut rng = crate::rng::stream(5);
        let mut u = vec![0.0; n];
        crate::rng::fill_standard_normal(&mut rng, &mut u);
        // Same summation order on both sides: bit-exact.
        assert_eq!(dot(&m.apply_stokes(&u).unwrap(), &u), m.u1_norm_sq(&u));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let m = torus(1);
        assert!(matches!(
            m.apply_stokes(&[1.0]).unwrap_err(),
            ModelError::DimensionMismatch {
                expected: 4,
                got: 1
            }
        ));
        assert!(m.apply_nonlinearity(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn projection_identities() {
        let m = torus(2);
        let mut rng = crate::rng::stream(7);
        let mut u = vec![0.0; m.n_modes()];
        crate::rng::fill_standard_normal(&mut rng, &mut u);

        let (p0, q0) = project(&u, 0).unwrap();
        assert!(p0.iter().all(|&x| x == 0.0));
        assert_eq!(q0, u);
        let (pn, qn) = project(&u, u.len()).unwrap();
        assert_eq!(pn, u);
        assert!(qn.iter().all(|&x| x == 0.0));

        let (p, q) = project(&u, 5).unwrap();
        let sum: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
        assert_eq!(sum, u); // bit-exact: one side of each pair is 0.0
        let (pp, _) = project(&p, 5).unwrap();
        assert_eq!(pp, p); // idempotent
        let norms = h_norm_sq(&p) + h_norm_sq(&q);
        assert!((norms - h_norm_sq(&u)).abs() < 1e-12 * h_norm_sq(&u).max(1.0));

        assert!(project(&u, u.len() + 1).is_err());
    }

    #[test]
    fn document_round_trip_is_bit_exact() {
        let m = build_torus_model(
            2,
            &ForcingSpec::LowestShellCos { amplitude: 0.25 },
            &NoiseSpec::SpectralDecay {
                amplitude: 0.1,
                exponent: 0.5,
            },
        )
        .unwrap();
        let doc = m.to_document();
        let back = GalerkinModel::from_document(&doc).unwrap();
        assert_eq!(m, back);
        assert_eq!(doc, back.to_document());
        assert_eq!(m.id(), back.id());
    }

    #[test]
    fn reporting_quantities() {
        let m = torus(2);
        assert!((m.b0() - 12.0 * 0.01).abs() < 1e-14);
        // B_1 = sum alpha_j b_j^2 over 12 modes with alphas 1,1,1,1,2,2,2,2,4,4,4,4
        assert!((m.b1() - 0.01 * (4.0 + 8.0 + 16.0)).abs() < 1e-14);
        assert_eq!(m.forcing_u1_norm(), 0.0);
    }
}
