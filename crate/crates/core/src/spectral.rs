//! Per-pixel discrete Fourier transforms, periodograms, smoothing, and the
//! exploratory summary maps.
//!
//! Coefficients follow `Y(ω_k; x) = T^{-1/2} Σ_{t=1}^{T} Y(x, t) e^{-iω_k t}`
//! with `ω_k = 2πk/T`. Only the half spectrum `k = 0..=T/2` is stored; the
//! rest follows by conjugate symmetry.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::gridio::{save_cube, Grid, TimeCube};
use crate::{Error, Result};

/// Daniell half-width used for the exploratory spectra.
pub const DEFAULT_DANIELL_BANDWIDTH: usize = 17;

/// Number of stored frequencies for a series of length `n_time`.
#[inline]
pub fn half_len(n_time: usize) -> usize {
    n_time / 2 + 1
}

/// True for frequencies whose coefficient is real for real input (k = 0 and
/// the Nyquist frequency when T is even).
#[inline]
pub fn is_real_frequency(k: usize, n_time: usize) -> bool {
    k == 0 || (n_time % 2 == 0 && k == n_time / 2)
}

/// How many times frequency `k` appears in the full spectrum.
#[inline]
pub fn multiplicity(k: usize, n_time: usize) -> f64 {
    if is_real_frequency(k, n_time) {
        1.0
    } else {
        2.0
    }
}

/// Half-spectrum Fourier coefficients of every pixel, `coeffs[pixel * K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    n_pixels: usize,
    n_time: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(n_pixels: usize, n_time: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != n_pixels * half_len(n_time) {
            return Err(Error::Shape(format!(
                "{} coefficients for {n_pixels} pixels x {} frequencies",
                coeffs.len(),
                half_len(n_time)
            )));
        }
        Ok(Self {
            n_pixels,
            n_time,
            coeffs,
        })
    }

    pub fn zeros(n_pixels: usize, n_time: usize) -> Self {
        Self {
            n_pixels,
            n_time,
            coeffs: vec![Complex64::new(0.0, 0.0); n_pixels * half_len(n_time)],
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_freq(&self) -> usize {
        half_len(self.n_time)
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn get(&self, pixel: usize, k: usize) -> Complex64 {
        self.coeffs[pixel * self.n_freq() + k]
    }

    #[inline]
    pub fn set(&mut self, pixel: usize, k: usize, v: Complex64) {
        let kk = self.n_freq();
        self.coeffs[pixel * kk + k] = v;
    }

    /// Half spectrum of one pixel.
    pub fn row(&self, pixel: usize) -> &[Complex64] {
        let kk = self.n_freq();
        &self.coeffs[pixel * kk..(pixel + 1) * kk]
    }

    /// Map of coefficients at frequency `k` over all pixels.
    pub fn frequency_map(&self, k: usize) -> Vec<Complex64> {
        (0..self.n_pixels).map(|p| self.get(p, k)).collect()
    }
}

fn plan(n_time: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n_time)
    } else {
        planner.plan_fft_forward(n_time)
    }
}

/// `e^{-iω_k}` for every stored frequency; corrects 0-based FFT output to the
/// t = 1..T phase convention.
fn phase_shift(n_time: usize) -> Vec<Complex64> {
    (0..half_len(n_time))
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n_time as f64))
        .collect()
}

/// Forward transform of every pixel's series.
pub fn forward_dft_all(cube: &TimeCube) -> SpectralField {
    let n_time = cube.n_time();
    let kk = half_len(n_time);
    let fft = plan(n_time, false);
    let phase = phase_shift(n_time);
    let norm = 1.0 / (n_time as f64).sqrt();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); cube.n_pixels() * kk];
    coeffs
        .par_chunks_mut(kk)
        .enumerate()
        .for_each_init(
            || vec![Complex64::new(0.0, 0.0); n_time],
            |buf, (p, out)| {
                for (b, &v) in buf.iter_mut().zip(cube.series(p)) {
                    *b = Complex64::new(f64::from(v), 0.0);
                }
                fft.process(buf);
                for k in 0..kk {
                    let mut c = buf[k] * phase[k] * norm;
                    if is_real_frequency(k, n_time) {
                        c.im = 0.0;
                    }
                    out[k] = c;
                }
            },
        );
    SpectralField {
        n_pixels: cube.n_pixels(),
        n_time,
        coeffs,
    }
}

/// Largest allowed imaginary part on the real frequencies, relative to the
/// row norm.
const RESIDUE_TOL: f64 = 1e-6;

/// Inverse transform to double precision, `out[pixel * T + t]`.
pub fn inverse_dft_values(field: &SpectralField) -> Result<Vec<f64>> {
    let n_time = field.n_time;
    let kk = field.n_freq();
    let fft = plan(n_time, true);
    let phase = phase_shift(n_time);
    let norm = 1.0 / (n_time as f64).sqrt();
    let mut out = vec![0.0; field.n_pixels * n_time];
    out.par_chunks_mut(n_time)
        .enumerate()
        .try_for_each_init(
            || vec![Complex64::new(0.0, 0.0); n_time],
            |buf, (p, series)| -> Result<()> {
                let row = field.row(p);
                let scale = row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                for k in (0..kk).filter(|&k| is_real_frequency(k, n_time)) {
                    if row[k].im.abs() > RESIDUE_TOL * scale {
                        return Err(Error::ImaginaryResidue(row[k].im.abs() / scale));
                    }
                }
                for k in 0..kk {
                    let mut c = row[k] * phase[k].conj();
                    if is_real_frequency(k, n_time) {
                        // shifting by e^{iω_k} keeps k = 0 and Nyquist real
                        c = Complex64::new(row[k].re * phase[k].re, 0.0);
                    }
                    buf[k] = c;
                    if k > 0 && k < n_time - k {
                        buf[n_time - k] = c.conj();
                    }
                }
                fft.process(buf);
                for (s, b) in series.iter_mut().zip(buf.iter()) {
                    *s = b.re * norm;
                }
                Ok(())
            },
        )?;
    Ok(out)
}

/// Inverse transform back to a single-precision cube on `grid`.
pub fn inverse_dft_all(field: &SpectralField, grid: &Grid) -> Result<TimeCube> {
    if grid.n_pixels() != field.n_pixels {
        return Err(Error::Shape("grid and spectral field disagree on pixel count".into()));
    }
    let values = inverse_dft_values(field)?;
    TimeCube::new(grid.clone(), field.n_time, values.into_iter().map(|v| v as f32).collect())
}

/// Squared modulus of every coefficient, `[pixel * K + k]`.
pub fn periodogram(field: &SpectralField) -> Vec<f64> {
    field.coeffs.iter().map(|c| c.norm_sqr()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Daniell { bandwidth: usize },
    /// `α(ℓ) ∝ exp(100 (cos ω_ℓ − 1))`.
    ExpCosine,
}

/// Circular smoothing weights indexed by lag `ℓ mod T`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernel {
    kind: KernelKind,
    weights: Vec<f64>,
}

impl SmoothingKernel {
    /// Centered moving average over `2 * bandwidth + 1` frequencies.
    pub fn daniell(n_time: usize, bandwidth: usize) -> Self {
        let mut weights = vec![0.0; n_time];
        let w = 1.0 / (2 * bandwidth + 1) as f64;
        for l in -(bandwidth as isize)..=(bandwidth as isize) {
            weights[l.rem_euclid(n_time as isize) as usize] += w;
        }
        Self {
            kind: KernelKind::Daniell { bandwidth },
            weights,
        }
    }

    pub fn exp_cosine(n_time: usize) -> Self {
        let raw: Vec<f64> = (0..n_time)
            .map(|l| (100.0 * ((2.0 * PI * l as f64 / n_time as f64).cos() - 1.0)).exp())
            .collect();
        let c: f64 = raw.iter().sum();
        Self {
            kind: KernelKind::ExpCosine,
            weights: raw.into_iter().map(|w| w / c).collect(),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// α(ℓ) for any signed lag.
    pub fn weight(&self, lag: isize) -> f64 {
        self.weights[lag.rem_euclid(self.weights.len() as isize) as usize]
    }

    /// Circular convolution `out[k] = Σ_j α(k − j) full[j]` over a full
    /// T-length spectrum.
    pub fn convolve(&self, full: &[f64]) -> Vec<f64> {
        let n = self.weights.len();
        debug_assert_eq!(full.len(), n);
        let taps: Vec<(usize, f64)> = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(l, &w)| (l, w))
            .collect();
        (0..n)
            .map(|k| {
                taps.iter()
                    .map(|&(l, w)| w * full[(k + n - l) % n])
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Expands a half-spectrum row of real values (periodogram, log spectrum) to
/// all T frequencies using `v(ω_{T−k}) = v(ω_k)`.
pub fn mirror_half(half: &[f64], n_time: usize) -> Vec<f64> {
    (0..n_time).map(|j| half[j.min(n_time - j)]).collect()
}

/// Smoothed spectrum estimate `(1/2π) Σ_j α(k − j) |Y(ω_j)|²` at all T
/// frequencies, from one pixel's half-spectrum periodogram.
pub fn smooth_periodogram(pgram_row: &[f64], n_time: usize, kernel: &SmoothingKernel) -> Vec<f64> {
    let full = mirror_half(pgram_row, n_time);
    kernel
        .convolve(&full)
        .into_iter()
        .map(|v| v / (2.0 * PI))
        .collect()
}

/// The four exploratory maps. Missing forecast values (constant
/// deseasonalized series, up to round-off) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryMaps {
    pub mean_map: Vec<f64>,
    pub seasonal_map: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
    pub norm_forecast_sd: Vec<Option<f64>>,
}

pub fn summary_maps(field: &SpectralField, kernel: &SmoothingKernel) -> Result<SummaryMaps> {
    let n_time = field.n_time;
    if n_time < 5 {
        return Err(Error::Shape(format!("summary maps need T >= 5, got {n_time}")));
    }
    let tf = n_time as f64;
    let rows: Vec<(f64, f64, f64, Option<f64>)> = (0..field.n_pixels)
        .into_par_iter()
        .map(|p| {
            let row = field.row(p);
            let mean = row[0].re / tf.sqrt();
            let seasonal = 2.0 * row[1].re / tf.sqrt();
            let pg: Vec<f64> = row.iter().map(|c| c.norm_sqr()).collect();
            let ss: f64 = (2..=n_time - 2).map(|k| pg[k.min(n_time - k)]).sum();
            let sigma = (ss / (tf - 3.0)).sqrt();
            let total: f64 = (0..pg.len()).map(|k| multiplicity(k, n_time) * pg[k]).sum();
            let rms = (total / tf).sqrt();
            // FFT round-off leaves ~1e-16 relative leakage in constant series
            let forecast = if sigma > 1e-10 * rms {
                let smooth = smooth_periodogram(&pg, n_time, kernel);
                let mean_log: f64 = (2..=n_time - 2).map(|k| smooth[k].ln()).sum::<f64>() / tf;
                Some((2.0 * PI * mean_log.exp()).sqrt() / sigma)
            } else {
                None
            };
            (mean, seasonal, sigma, forecast)
        })
        .collect();
    Ok(SummaryMaps {
        mean_map: rows.iter().map(|r| r.0).collect(),
        seasonal_map: rows.iter().map(|r| r.1).collect(),
        sigma_tilde: rows.iter().map(|r| r.2).collect(),
        norm_forecast_sd: rows.iter().map(|r| r.3).collect(),
    })
}

/// Writes `summary.csv` (`pixel,lat,lon,mean,seasonal,sigma_tilde,norm_forecast_sd`)
/// plus one single-step cube file per map. Missing forecast values are empty
/// in the CSV and zero in the cube file.
pub fn write_summary_maps(maps: &SummaryMaps, grid: &Grid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = String::from("pixel,lat,lon,mean,seasonal,sigma_tilde,norm_forecast_sd\n");
    for p in 0..grid.n_pixels() {
        let (lat, lon) = grid.lat_lon(p);
        let fsd = maps.norm_forecast_sd[p].map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{p},{lat},{lon},{},{},{},{fsd}\n",
            maps.mean_map[p], maps.seasonal_map[p], maps.sigma_tilde[p]
        ));
    }
    fs::File::create(dir.join("summary.csv"))?.write_all(csv.as_bytes())?;
    let single = |name: &str, vals: Vec<f64>| -> Result<()> {
        let cube = TimeCube::new(grid.clone(), 1, vals.into_iter().map(|v| v as f32).collect())?;
        save_cube(grid, &cube, dir.join(name))
    };
    single("mean.cube", maps.mean_map.clone())?;
    single("seasonal.cube", maps.seasonal_map.clone())?;
    single("sigma_tilde.cube", maps.sigma_tilde.clone())?;
    single(
        "norm_forecast_sd.cube",
        maps.norm_forecast_sd.iter().map(|v| v.unwrap_or(0.0)).collect(),
    )?;
    Ok(())
}
