//! Semiparametric spectral model: global mean, the frequency basis, and
//! per-pixel Whittle estimates of the basis coefficients.
//!
//! The spectral density of pixel `x` is
//! `f(ω_k; x) = exp(u0(ω_k) + θ1(x) u1(ω_k) + θ2(x) u2(ω_k) + θ3(x) u3(ω_k))`,
//! where `u0` is the log mean periodogram over pixels and `u1..u3` are the
//! leading principal components of smoothed, normalized log periodograms.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::spectral::{half_len, mirror_half, multiplicity, SmoothingKernel, SpectralField};
use crate::{Error, Result};

/// Global mean `μ(x, t) = μ0 + μ1 e^{iω_1 t} + μ1* e^{iω_{T−1} t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanModel {
    pub mu0: f64,
    pub mu1: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelWeighting {
    /// Pixel-area (cos latitude) weights.
    #[default]
    Area,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub mean_weighting: PixelWeighting,
    pub pca_weighting: PixelWeighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mean_weighting: PixelWeighting::Area,
            pca_weighting: PixelWeighting::Uniform,
        }
    }
}

pub fn estimate_mean(field: &SpectralField, weights: &[f64]) -> MeanModel {
    let total: f64 = weights.iter().sum();
    let norm = 1.0 / (field.n_time() as f64).sqrt();
    let (mut mu0, mut mu1) = (0.0, Complex64::new(0.0, 0.0));
    for (p, &w) in weights.iter().enumerate() {
        mu0 += w * field.get(p, 0).re;
        mu1 += field.get(p, 1) * w;
    }
    MeanModel {
        mu0: mu0 * norm / total,
        mu1: mu1 * norm / total,
    }
}

/// Subtracts `√T μ0` at k = 0 and `√T μ1` at k = 1 from every pixel.
pub fn remove_mean(field: &mut SpectralField, mean: &MeanModel) {
    shift_mean(field, mean, -1.0);
}

/// Inverse of [`remove_mean`].
pub fn add_mean(field: &mut SpectralField, mean: &MeanModel) {
    shift_mean(field, mean, 1.0);
}

fn shift_mean(field: &mut SpectralField, mean: &MeanModel, sign: f64) {
    let rt = (field.n_time() as f64).sqrt();
    for p in 0..field.n_pixels() {
        let c0 = field.get(p, 0) + Complex64::new(sign * rt * mean.mu0, 0.0);
        let c1 = field.get(p, 1) + mean.mu1 * (sign * rt);
        field.set(p, 0, c0);
        field.set(p, 1, c1);
    }
}

/// `u0(ω_k) = log(n^{-1} Σ_i |Y(ω_k; x_i)|²)`.
pub fn compute_u0(field: &SpectralField) -> Result<Vec<f64>> {
    let n = field.n_pixels();
    if n == 0 {
        return Err(Error::Degenerate("no pixels".into()));
    }
    (0..field.n_freq())
        .map(|k| {
            let avg = (0..n).map(|p| field.get(p, k).norm_sqr()).sum::<f64>() / n as f64;
            if avg > 0.0 && avg.is_finite() {
                Ok(avg.ln())
            } else {
                Err(Error::Degenerate(format!("average periodogram is zero at frequency {k}")))
            }
        })
        .collect()
}

/// `g(ω_k, x) = log Σ_ℓ α(ℓ − k) |Y(ω_ℓ, x)|² / exp(u0(ω_ℓ))` with the
/// `exp(100 (cos ω − 1))` kernel, returned as `[pixel * K + k]`.
pub fn smoothed_normalized_logpgram(field: &SpectralField, u0: &[f64]) -> Result<Vec<f64>> {
    let n_time = field.n_time();
    let kk = field.n_freq();
    let kernel = SmoothingKernel::exp_cosine(n_time);
    let inv_scale: Vec<f64> = u0.iter().map(|u| (-u).exp()).collect();
    let rows: Vec<Vec<f64>> = (0..field.n_pixels())
        .into_par_iter()
        .map(|p| {
            let ratio: Vec<f64> = (0..kk).map(|k| field.get(p, k).norm_sqr() * inv_scale[k]).collect();
            let smooth = kernel.convolve(&mirror_half(&ratio, n_time));
            smooth[..kk].iter().map(|v| v.ln()).collect()
        })
        .collect();
    let g: Vec<f64> = rows.into_iter().flatten().collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("a pixel has an all-zero periodogram".into()));
    }
    Ok(g)
}

/// Three leading eigenvectors of the frequency covariance of `g`
/// (`n_pixels x n_freq`, row-major), columns centered across pixels.
/// `weights` optionally weights pixels; `None` is the plain covariance.
pub fn principal_components(
    g: &[f64],
    n_pixels: usize,
    n_freq: usize,
    weights: Option<&[f64]>,
) -> Result<[Vec<f64>; 3]> {
    if n_pixels < 4 {
        return Err(Error::RankDeficient(format!("need at least 4 pixels, got {n_pixels}")));
    }
    if n_freq < 3 {
        return Err(Error::RankDeficient(format!("need at least 3 frequencies, got {n_freq}")));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        }
        None => vec![1.0 / n_pixels as f64; n_pixels],
    };
    let mut mean = vec![0.0; n_freq];
    for p in 0..n_pixels {
        for k in 0..n_freq {
            mean[k] += w[p] * g[p * n_freq + k];
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n_freq, n_freq);
    let mut centered = vec![0.0; n_freq];
    for p in 0..n_pixels {
        for k in 0..n_freq {
            centered[k] = g[p * n_freq + k] - mean[k];
        }
        for a in 0..n_freq {
            let ca = w[p] * centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..n_freq {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..n_freq {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n_freq).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lead = eig.eigenvalues[order[0]];
    let third = eig.eigenvalues[order[2]];
    let scale: f64 = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
    if lead <= 1e-12 * scale.max(f64::MIN_POSITIVE) || third <= 1e-10 * lead {
        return Err(Error::RankDeficient(format!(
            "centered log periodograms have fewer than 3 significant components (eigenvalues {lead:e}, {third:e})"
        )));
    }
    let pick = |j: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[j]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let big = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1.abs() { (i, x) } else { acc });
        let sign = if big.1 < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / norm);
        v
    };
    Ok([pick(0), pick(1), pick(2)])
}

/// The frequency basis `u0..u3`, each of length K.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub u0: Vec<f64>,
    pub u: [Vec<f64>; 3],
}

impl SpectralBasis {
    pub fn n_freq(&self) -> usize {
        self.u0.len()
    }

    #[inline]
    pub fn log_density(&self, theta: &[f64; 3], k: usize) -> f64 {
        self.u0[k] + theta[0] * self.u[0][k] + theta[1] * self.u[1][k] + theta[2] * self.u[2][k]
    }

    /// Rounds every entry to single precision, as stored in an archive.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|&x| f64::from(x as f32)).collect::<Vec<f64>>();
        Self {
            u0: q(&self.u0),
            u: [q(&self.u[0]), q(&self.u[1]), q(&self.u[2])],
        }
    }
}

/// `f(ω_k; θ) = exp(u0(ω_k) + θ·u(ω_k))`.
pub fn spectral_density(theta: &[f64; 3], basis: &SpectralBasis, k: usize) -> f64 {
    basis.log_density(theta, k).exp()
}

/// Builds `u0` and the principal-component basis from a mean-removed field.
pub fn build_basis(field: &SpectralField, weights: Option<&[f64]>) -> Result<SpectralBasis> {
    let u0 = compute_u0(field)?;
    let g = smoothed_normalized_logpgram(field, &u0)?;
    let u = principal_components(&g, field.n_pixels(), field.n_freq(), weights)?;
    Ok(SpectralBasis { u0, u })
}

/// Result of one per-pixel Whittle fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhittleFit {
    pub theta: [f64; 3],
    pub grad_norm: f64,
    pub iterations: usize,
}

pub const WHITTLE_MAX_ITER: usize = 100;
pub const WHITTLE_GRAD_TOL: f64 = 1e-8;

/// Whittle log likelihood `Σ_{k≥1} w_k [−log f_k − I_k / f_k]` with its
/// gradient and Hessian in θ. `w_k` counts conjugate partners.
pub fn whittle_objective(pgram_row: &[f64], basis: &SpectralBasis, theta: &[f64; 3], n_time: usize) -> (f64, Vector3<f64>, Matrix3<f64>) {
    let kk = basis.n_freq();
    let mut obj = 0.0;
    let mut grad = Vector3::zeros();
    let mut hess = Matrix3::zeros();
    for k in 1..kk {
        let w = multiplicity(k, n_time);
        let eta = basis.log_density(theta, k);
        let r = pgram_row[k] * (-eta).exp();
        obj += w * (-eta - r);
        let u = Vector3::new(basis.u[0][k], basis.u[1][k], basis.u[2][k]);
        grad += u * (w * (r - 1.0));
        hess -= u * u.transpose() * (w * r);
    }
    (obj, grad, hess)
}

/// Damped Newton ascent on the Whittle objective for a series of length
/// `n_time` (needed to tell whether the last stored frequency is Nyquist).
pub fn fit_theta_whittle(pgram_row: &[f64], basis: &SpectralBasis, n_time: usize) -> Result<WhittleFit> {
    if half_len(n_time) != basis.n_freq() || pgram_row.len() != basis.n_freq() {
        return Err(Error::Shape("periodogram, basis, and series length disagree".into()));
    }
    let mut theta = [0.0; 3];
    let (mut obj, mut grad, mut hess) = whittle_objective(pgram_row, basis, &theta, n_time);
    for it in 0..WHITTLE_MAX_ITER {
        let gn = grad.norm();
        if gn < WHITTLE_GRAD_TOL {
            return Ok(WhittleFit {
                theta,
                grad_norm: gn,
                iterations: it,
            });
        }
        let neg = -hess;
        let dir = match neg.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad,
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        loop {
            let cand = [
                theta[0] + step * dir[0],
                theta[1] + step * dir[1],
                theta[2] + step * dir[2],
            ];
            let (o, g, h) = whittle_objective(pgram_row, basis, &cand, n_time);
            // near the optimum the objective change drowns in rounding, so a
            // full step that shrinks the gradient is taken as well
            let armijo = o >= obj + 1e-4 * step * slope;
            let newton = step == 1.0 && g.norm() < 0.5 * grad.norm();
            if o.is_finite() && (armijo || newton) {
                theta = cand;
                obj = o;
                grad = g;
                hess = h;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                // no ascent left at working precision
                let gn = grad.norm();
                if gn < WHITTLE_GRAD_TOL {
                    return Ok(WhittleFit {
                        theta,
                        grad_norm: gn,
                        iterations: it,
                    });
                }
                return Err(Error::NoConvergence {
                    iterations: it,
                    grad_norm: gn,
                    last: theta,
                });
            }
        }
    }
    let gn = grad.norm();
    if gn < WHITTLE_GRAD_TOL {
        return Ok(WhittleFit {
            theta,
            grad_norm: gn,
            iterations: WHITTLE_MAX_ITER,
        });
    }
    Err(Error::NoConvergence {
        iterations: WHITTLE_MAX_ITER,
        grad_norm: gn,
        last: theta,
    })
}

/// Per-pixel θ estimates, `theta[pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub theta: Vec<[f64; 3]>,
}

impl ThetaField {
    pub fn quantized(&self) -> Self {
        Self {
            theta: self
                .theta
                .iter()
                .map(|t| t.map(|v| f64::from(v as f32)))
                .collect(),
        }
    }
}

/// Whittle fits at every pixel of a mean-removed field.
pub fn fit_theta_all(field: &SpectralField, basis: &SpectralBasis) -> Result<(ThetaField, Vec<WhittleFit>)> {
    let n_time = field.n_time();
    let fits: Vec<WhittleFit> = (0..field.n_pixels())
        .into_par_iter()
        .map(|p| {
            let row: Vec<f64> = field.row(p).iter().map(|c| c.norm_sqr()).collect();
            fit_theta_whittle(&row, basis, n_time)
        })
        .collect::<Result<_>>()?;
    Ok((
        ThetaField {
            theta: fits.iter().map(|f| f.theta).collect(),
        },
        fits,
    ))
}

/// `f̂(ω_k; x)` for every pixel and stored frequency, `[pixel * K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSpectra {
    n_freq: usize,
    values: Vec<f64>,
}

impl FittedSpectra {
    pub fn new(theta: &ThetaField, basis: &SpectralBasis) -> Self {
        let kk = basis.n_freq();
        let values = theta
            .theta
            .iter()
            .flat_map(|t| (0..kk).map(move |k| spectral_density(t, basis, k)))
            .collect();
        Self { n_freq: kk, values }
    }

    /// Spectra from explicit values, `[pixel * K + k]`.
    pub fn from_values(n_freq: usize, values: Vec<f64>) -> Self {
        Self { n_freq, values }
    }

    #[inline]
    pub fn get(&self, pixel: usize, k: usize) -> f64 {
        self.values[pixel * self.n_freq + k]
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    /// f̂ at frequency k over all pixels.
    pub fn frequency(&self, k: usize) -> Vec<f64> {
        let n = self.values.len() / self.n_freq;
        (0..n).map(|p| self.get(p, k)).collect()
    }
}

/// Everything fitted before coefficient selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub mean: MeanModel,
    pub basis: SpectralBasis,
    pub theta: ThetaField,
}

impl FittedModel {
    pub fn spectra(&self) -> FittedSpectra {
        FittedSpectra::new(&self.theta, &self.basis)
    }
}

/// Fits the full time-series model to a raw field. Returns the model (with
/// parameters rounded to single precision, as archived) and the mean-removed
/// field every downstream step works on.
pub fn fit_model(
    field: &SpectralField,
    area_weights: &[f64],
    config: &ModelConfig,
) -> Result<(FittedModel, SpectralField)> {
    if field.n_time() < 4 {
        return Err(Error::Shape("model fitting needs T >= 4".into()));
    }
    let uniform = vec![1.0; field.n_pixels()];
    let mean_w = match config.mean_weighting {
        PixelWeighting::Area => area_weights,
        PixelWeighting::Uniform => &uniform,
    };
    let raw_mean = estimate_mean(field, mean_w);
    let mean = MeanModel {
        mu0: f64::from(raw_mean.mu0 as f32),
        mu1: Complex64::new(f64::from(raw_mean.mu1.re as f32), f64::from(raw_mean.mu1.im as f32)),
    };
    let mut anomalies = field.clone();
    remove_mean(&mut anomalies, &mean);
    let pca_w = match config.pca_weighting {
        PixelWeighting::Area => Some(area_weights),
        PixelWeighting::Uniform => None,
    };
    let basis = build_basis(&anomalies, pca_w)?.quantized();
    let (theta, _) = fit_theta_all(&anomalies, &basis)?;
    Ok((
        FittedModel {
            mean,
            basis,
            theta: theta.quantized(),
        },
        anomalies,
    ))
}
