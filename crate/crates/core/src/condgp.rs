//! Per-frequency complex Gaussian conditioning on the SPDE precision.
//!
//! At frequency `k` the scaled map `Z(ω_k) = Y(ω_k) / f̂(ω_k)^{1/2}` is
//! modeled as `CN(0, Q(κ)^{-1})`: real and imaginary parts independent, each
//! with covariance `Q^{-1}/2`. At k = 0 and Nyquist the map is real with
//! covariance `Q^{-1}`. All vectors here are indexed by mesh vertex.
//!
//! Likelihoods drop additive constants (powers of π and 2), so values are
//! comparable only within one frequency.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::spde::{CholeskyFactor, CscMatrix, PrecisionOperator, SubmatrixPlan};
use crate::spectral::SpectralField;
use crate::specmodel::FittedSpectra;
use crate::{Error, Result};

pub const KAPPA_MIN: f64 = 1e-3;
pub const KAPPA_MAX: f64 = 1e3;
pub const LOG_KAPPA_TOL: f64 = 1e-3;
pub const PINNED_KAPPA: f64 = 0.01;
/// Frequencies `k < PINNED_FREQUENCIES` keep `κ = PINNED_KAPPA`.
pub const PINNED_FREQUENCIES: usize = 3;

/// `Z = Y / √f̂`, entrywise.
pub fn scale_field(field: &SpectralField, spectra: &FittedSpectra) -> Result<SpectralField> {
    rescale(field, spectra, -0.5)
}

/// `Y = Z √f̂`, entrywise.
pub fn unscale_field(field: &SpectralField, spectra: &FittedSpectra) -> Result<SpectralField> {
    rescale(field, spectra, 0.5)
}

fn rescale(field: &SpectralField, spectra: &FittedSpectra, power: f64) -> Result<SpectralField> {
    if spectra.n_freq() != field.n_freq() {
        return Err(Error::Shape("spectra and field disagree on the number of frequencies".into()));
    }
    let mut out = field.clone();
    let kk = field.n_freq();
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        let f = spectra.get(i / kk, i % kk);
        if !(f > 0.0) {
            return Err(Error::Degenerate(format!("non-positive spectral density at pixel {}", i / kk)));
        }
        *c *= f.powf(power);
    }
    Ok(out)
}

/// Stored/unstored split of the mesh vertices at one frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyPartition {
    stored: Vec<usize>,
    unstored: Vec<usize>,
    is_stored: Vec<bool>,
    slot: Vec<usize>,
}

impl FrequencyPartition {
    /// `stored` must be sorted ascending without duplicates.
    pub fn new(n_vertices: usize, stored: Vec<usize>) -> Result<Self> {
        if stored.windows(2).any(|w| w[1] <= w[0]) || stored.last().is_some_and(|&s| s >= n_vertices) {
            return Err(Error::InvalidParameter("stored vertices must be sorted, unique and in range".into()));
        }
        let mut is_stored = vec![false; n_vertices];
        let mut slot = vec![0; n_vertices];
        for (i, &s) in stored.iter().enumerate() {
            is_stored[s] = true;
            slot[s] = i;
        }
        let unstored: Vec<usize> = (0..n_vertices).filter(|&v| !is_stored[v]).collect();
        for (i, &u) in unstored.iter().enumerate() {
            slot[u] = i;
        }
        Ok(Self {
            stored,
            unstored,
            is_stored,
            slot,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.is_stored.len()
    }

    pub fn stored(&self) -> &[usize] {
        &self.stored
    }

    pub fn unstored(&self) -> &[usize] {
        &self.unstored
    }

    pub fn is_stored(&self, v: usize) -> bool {
        self.is_stored[v]
    }

    /// Position of `v` within its own list (stored or unstored).
    pub fn slot(&self, v: usize) -> usize {
        self.slot[v]
    }
}

/// κ per frequency, with pinned entries the estimators must not touch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceParams {
    pub kappa: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl CoherenceParams {
    /// Pins `k < PINNED_FREQUENCIES` at `PINNED_KAPPA`; other entries start at `initial`.
    pub fn new(n_freq: usize, initial: f64) -> Self {
        let fixed: Vec<bool> = (0..n_freq).map(|k| k < PINNED_FREQUENCIES).collect();
        let kappa = fixed.iter().map(|&f| if f { PINNED_KAPPA } else { initial }).collect();
        Self { kappa, fixed }
    }

    /// Rounds every κ to single precision, as stored in an archive.
    pub fn quantize(&mut self) {
        for k in &mut self.kappa {
            *k = f64::from(*k as f32);
        }
    }
}

/// `Q21 z1` on the unstored vertices, applied separately to real and imaginary parts.
fn cross_term(q: &CscMatrix, part: &FrequencyPartition, z1: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); part.unstored.len()];
    for (&s, &z) in part.stored.iter().zip(z1) {
        let (rows, vals) = q.col(s);
        for (&i, &v) in rows.iter().zip(vals) {
            if !part.is_stored[i] {
                out[part.slot[i]] += z * v;
            }
        }
    }
    out
}

fn solve_complex(factor: &CholeskyFactor, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = b.iter().map(|c| c.re).collect();
    let im: Vec<f64> = b.iter().map(|c| c.im).collect();
    let xr = factor.solve(&re)?;
    let xi = if im.iter().all(|&v| v == 0.0) { vec![0.0; im.len()] } else { factor.solve(&im)? };
    Ok(xr.into_iter().zip(xi).map(|(a, b)| Complex64::new(a, b)).collect())
}

/// `Ẑ2 = −Q22^{-1} Q21 Z1` given a factor of `Q22` and the assembled `Q`.
pub fn conditional_expectation_with(
    q: &CscMatrix,
    factor: Option<&CholeskyFactor>,
    part: &FrequencyPartition,
    z1: &[Complex64],
) -> Result<Vec<Complex64>> {
    if z1.len() != part.stored.len() {
        return Err(Error::Shape(format!("{} stored values for {} stored vertices", z1.len(), part.stored.len())));
    }
    if part.unstored.is_empty() {
        return Ok(Vec::new());
    }
    let factor = factor.ok_or_else(|| Error::InvalidParameter("missing factor for the unstored block".into()))?;
    let rhs: Vec<Complex64> = cross_term(q, part, z1).into_iter().map(|c| -c).collect();
    solve_complex(factor, &rhs)
}

/// Conditional mean of the unstored vertices given `z1` on the stored ones.
pub fn conditional_expectation(
    op: &PrecisionOperator,
    kappa: f64,
    part: &FrequencyPartition,
    z1: &[Complex64],
) -> Result<Vec<Complex64>> {
    let q = op.assemble(kappa)?.matrix;
    if part.unstored.is_empty() {
        return conditional_expectation_with(&q, None, part, z1);
    }
    let factor = op.plan(&part.unstored)?.factor(op, kappa)?;
    conditional_expectation_with(&q, Some(&factor), part, z1)
}

/// `Ẑ2 + e2` with `Lᵀ e2' = ε`. Complex noise has independent real and
/// imaginary parts of variance 1/2; with `real` the noise is N(0, 1).
/// Draws all real parts first, then all imaginary parts.
pub fn conditional_simulation<R: Rng + ?Sized>(
    factor: &CholeskyFactor,
    zhat2: &[Complex64],
    real: bool,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let n = zhat2.len();
    let scale = if real { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
    let eps_re: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let eps_im: Vec<f64> = if real {
        vec![0.0; n]
    } else {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    conditional_simulation_from_noise(factor, zhat2, &eps_re, &eps_im)
}

/// Deterministic core of [`conditional_simulation`] for given noise.
pub fn conditional_simulation_from_noise(
    factor: &CholeskyFactor,
    zhat2: &[Complex64],
    eps_re: &[f64],
    eps_im: &[f64],
) -> Result<Vec<Complex64>> {
    let er = factor.sample(eps_re)?;
    let ei = if eps_im.iter().all(|&v| v == 0.0) { vec![0.0; er.len()] } else { factor.sample(eps_im)? };
    if zhat2.len() != er.len() {
        return Err(Error::Shape("conditional mean and factor differ in size".into()));
    }
    Ok(zhat2
        .iter()
        .zip(er.iter().zip(&ei))
        .map(|(m, (&a, &b))| m + Complex64::new(a, b))
        .collect())
}

fn check_vertex_vectors(part_n: usize, z: &[Complex64], log_f: &[f64]) -> Result<()> {
    if z.len() != part_n || log_f.len() != part_n {
        return Err(Error::Shape(format!(
            "expected {part_n} vertex values, got {} coefficients and {} log densities",
            z.len(),
            log_f.len()
        )));
    }
    Ok(())
}

/// `CL = −½ Σ_unstored log f̂ + ½ log det Q22 − ½ (Z2 − Ẑ2)† Q22 (Z2 − Ẑ2)`,
/// using a prepared plan for the unstored block. `z` and `log_f` cover all
/// vertices. The same expression serves real frequencies.
pub fn conditional_loglik_with(
    op: &PrecisionOperator,
    plan: &SubmatrixPlan,
    kappa: f64,
    part: &FrequencyPartition,
    z: &[Complex64],
    log_f: &[f64],
) -> Result<f64> {
    check_vertex_vectors(part.n_vertices(), z, log_f)?;
    if part.unstored.is_empty() {
        return Ok(0.0);
    }
    if plan.keep() != part.unstored() {
        return Err(Error::InvalidParameter("plan does not match the unstored set".into()));
    }
    let q = op.assemble(kappa)?.matrix;
    let factor = plan.factor(op, kappa)?;
    let z1: Vec<Complex64> = part.stored.iter().map(|&s| z[s]).collect();
    let zhat = conditional_expectation_with(&q, Some(&factor), part, &z1)?;
    // Q22 (Z2 − Ẑ2) = Q22 Z2 + Q21 Z1 = (Q Z)_2
    let re: Vec<f64> = z.iter().map(|c| c.re).collect();
    let im: Vec<f64> = z.iter().map(|c| c.im).collect();
    let (qr, qi) = (q.mul_vec(&re), q.mul_vec(&im));
    let mut quad = 0.0;
    let mut sum_log_f = 0.0;
    for (slot, &u) in part.unstored.iter().enumerate() {
        let r = z[u] - zhat[slot];
        quad += r.re * qr[u] + r.im * qi[u];
        sum_log_f += log_f[u];
    }
    Ok(-0.5 * sum_log_f + 0.5 * factor.logdet() - 0.5 * quad)
}

pub fn conditional_loglik(
    op: &PrecisionOperator,
    kappa: f64,
    part: &FrequencyPartition,
    z: &[Complex64],
    log_f: &[f64],
) -> Result<f64> {
    check_vertex_vectors(part.n_vertices(), z, log_f)?;
    if part.unstored.is_empty() {
        return Ok(0.0);
    }
    let plan = op.plan(&part.unstored)?;
    conditional_loglik_with(op, &plan, kappa, part, z, log_f)
}

/// `½ log det Q − ½ Z† Q Z − ½ Σ log f̂` over all vertices.
pub fn marginal_loglik(op: &PrecisionOperator, kappa: f64, z: &[Complex64], log_f: &[f64]) -> Result<f64> {
    check_vertex_vectors(op.n(), z, log_f)?;
    let q = op.assemble(kappa)?.matrix;
    let factor = op.factor(kappa)?;
    let re: Vec<f64> = z.iter().map(|c| c.re).collect();
    let im: Vec<f64> = z.iter().map(|c| c.im).collect();
    let (qr, qi) = (q.mul_vec(&re), q.mul_vec(&im));
    let quad: f64 = (0..z.len()).map(|i| re[i] * qr[i] + im[i] * qi[i]).sum();
    let sum_log_f: f64 = log_f.iter().sum();
    Ok(0.5 * factor.logdet() - 0.5 * quad - 0.5 * sum_log_f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaObjective {
    Marginal,
    Conditional,
}

/// A maximized κ. `at_bound` flags a maximizer pinned at a search bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaEstimate {
    pub kappa: f64,
    pub loglik: f64,
    pub at_bound: bool,
    pub evaluations: usize,
}

/// Maximizes `objective(κ)` over `log κ ∈ [log 1e-3, log 1e3]`: an
/// expanding bracket from `start`, then Brent's method to `LOG_KAPPA_TOL`.
pub fn maximize_log_kappa(start: f64, mut objective: impl FnMut(f64) -> Result<f64>) -> Result<KappaEstimate> {
    let (lo, hi) = (KAPPA_MIN.ln(), KAPPA_MAX.ln());
    let mut evals = 0usize;
    // minimize h(s) = −objective(e^s)
    let mut h = |s: f64| -> Result<f64> {
        evals += 1;
        let v = objective(s.exp())?;
        Ok(if v.is_nan() { f64::INFINITY } else { -v })
    };
    let s0 = if start > 0.0 && start.is_finite() { start.ln().clamp(lo, hi) } else { 0.0 };

    // bracket [left, right] around the best point b, clipped at the bounds
    let clip = |s: f64| s.clamp(lo, hi);
    let mut step = 0.5;
    let mut b = s0;
    let mut fb = h(b)?;
    let (mut left, mut right) = (clip(b - step), clip(b + step));
    let fr = if right > b { h(right)? } else { f64::INFINITY };
    let dir = if fr < fb {
        1.0
    } else {
        let fl = if left < b { h(left)? } else { f64::INFINITY };
        if fl < fb {
            -1.0
        } else {
            0.0
        }
    };
    if dir != 0.0 {
        let mut prev = b;
        b = if dir > 0.0 { right } else { left };
        fb = h(b)?;
        loop {
            step *= 2.0;
            let next = clip(b + dir * step);
            if next == b {
                (left, right) = if dir > 0.0 { (prev, b) } else { (b, prev) };
                break;
            }
            let fnext = h(next)?;
            if fnext >= fb {
                (left, right) = if dir > 0.0 { (prev, next) } else { (next, prev) };
                break;
            }
            prev = b;
            b = next;
            fb = fnext;
        }
    }

    // Brent minimization on [left, right] seeded at b
    let golden = 0.381_966_011_250_105_1;
    let (mut x, mut w, mut v) = (b, b, b);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (left + right);
        let tol1 = LOG_KAPPA_TOL / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (right - left) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (left - x) && p < q * (right - x) {
                d = p / q;
                let u = x + d;
                if u - left < tol2 || right - u < tol2 {
                    d = if mid > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= mid { left - x } else { right - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = h(u)?;
        if fu <= fx {
            if u >= x {
                left = x;
            } else {
                right = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                left = u;
            } else {
                right = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    if !fx.is_finite() {
        return Err(Error::Degenerate("likelihood is not finite anywhere on the κ search path".into()));
    }
    let at_bound = x - lo <= LOG_KAPPA_TOL || hi - x <= LOG_KAPPA_TOL;
    Ok(KappaEstimate {
        kappa: x.exp(),
        loglik: -fx,
        at_bound,
        evaluations: evals,
    })
}

/// Estimates κ at frequency `k` from the full map (marginal) or given a
/// stored set (conditional). Refuses pinned frequencies.
#[allow(clippy::too_many_arguments)]
pub fn estimate_kappa(
    objective: KappaObjective,
    k: usize,
    params: &CoherenceParams,
    op: &PrecisionOperator,
    part: Option<&FrequencyPartition>,
    z: &[Complex64],
    log_f: &[f64],
    start: f64,
) -> Result<KappaEstimate> {
    if params.fixed.get(k).copied().unwrap_or(false) {
        return Err(Error::InvalidParameter(format!("kappa at frequency {k} is pinned")));
    }
    match objective {
        KappaObjective::Marginal => maximize_log_kappa(start, |kappa| marginal_loglik(op, kappa, z, log_f)),
        KappaObjective::Conditional => {
            let part = part.ok_or_else(|| Error::InvalidParameter("conditional estimation needs a partition".into()))?;
            check_vertex_vectors(part.n_vertices(), z, log_f)?;
            if part.unstored.is_empty() {
                return Ok(KappaEstimate {
                    kappa: start,
                    loglik: 0.0,
                    at_bound: false,
                    evaluations: 0,
                });
            }
            let plan = op.plan(&part.unstored)?;
            maximize_log_kappa(start, |kappa| conditional_loglik_with(op, &plan, kappa, part, z, log_f))
        }
    }
}
