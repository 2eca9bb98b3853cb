//! Unconditional simulation from a fully specified model.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gridio::{Grid, TimeCube};
use crate::rng::frequency_rng;
use crate::spde::{build_mesh, PrecisionOperator};
use crate::spectral::{half_len, inverse_dft_all, is_real_frequency, SpectralField};
use crate::specmodel::{add_mean, FittedSpectra, MeanModel, SpectralBasis, ThetaField};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_time: usize,
    #[serde(default)]
    pub poles: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mean: MeanSpec,
    #[serde(default)]
    pub spectrum: SpectrumSpec,
    #[serde(default)]
    pub coherence: CoherenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanSpec {
    pub mu0: f64,
    pub mu1_re: f64,
    pub mu1_im: f64,
}

impl Default for MeanSpec {
    fn default() -> Self {
        Self {
            mu0: 10.0,
            mu1_re: -3.0,
            mu1_im: 1.0,
        }
    }
}

/// `log f = level − log|1 − φ e^{−iω}|² + θ(x)·u(ω)`, where `u` holds a
/// constant (overall log level), a spectral tilt and a curvature curve, and θ
/// is a smooth pattern scaled by `theta_amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSpec {
    pub level: f64,
    pub ar: f64,
    pub theta_amplitude: f64,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        Self {
            level: 0.0,
            ar: 0.6,
            theta_amplitude: 1.0,
        }
    }
}

/// κ rises geometrically from `kappa_low` at k = 0 to `kappa_high` at the last frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceSpec {
    pub kappa_low: f64,
    pub kappa_high: f64,
}

impl Default for CoherenceSpec {
    fn default() -> Self {
        Self {
            kappa_low: 2.0,
            kappa_high: 60.0,
        }
    }
}

impl GeneratorSpec {
    pub fn new(n_lat: usize, n_lon: usize, n_time: usize, seed: u64) -> Self {
        Self {
            n_lat,
            n_lon,
            n_time,
            poles: false,
            seed,
            mean: MeanSpec::default(),
            spectrum: SpectrumSpec::default(),
            coherence: CoherenceSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_time < 4 {
            return Err(Error::Spec("n_time must be at least 4".into()));
        }
        if !(self.spectrum.ar.abs() < 1.0) {
            return Err(Error::Spec("ar must lie in (-1, 1)".into()));
        }
        let c = &self.coherence;
        if !(c.kappa_low > 0.0 && c.kappa_high > 0.0 && c.kappa_low.is_finite() && c.kappa_high.is_finite()) {
            return Err(Error::Spec("kappa bounds must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::global(self.n_lat, self.n_lon, self.poles)
    }

    pub fn mean_model(&self) -> MeanModel {
        MeanModel {
            mu0: self.mean.mu0,
            mu1: Complex64::new(self.mean.mu1_re, self.mean.mu1_im),
        }
    }

    pub fn basis(&self) -> SpectralBasis {
        let kk = half_len(self.n_time);
        let phi = self.spectrum.ar;
        let u0 = (0..kk)
            .map(|k| {
                let w = 2.0 * PI * k as f64 / self.n_time as f64;
                self.spectrum.level - (1.0 - 2.0 * phi * w.cos() + phi * phi).ln()
            })
            .collect();
        SpectralBasis { u0, u: stand_in_basis(kk) }
    }

    pub fn theta(&self, grid: &Grid) -> ThetaField {
        let a = self.spectrum.theta_amplitude;
        let theta = (0..grid.n_pixels())
            .map(|p| {
                let (lat, lon) = grid.lat_lon(p);
                let (phi, lam) = (lat.to_radians(), lon.to_radians());
                // louder toward the poles and over one "continent", redder in the north
                let level = 0.8 * phi.sin().powi(2) - 0.3 + 0.4 * phi.cos() * lam.cos();
                [a * level, 0.5 * a * phi.sin(), 0.3 * a * phi.cos() * (2.0 * lam).sin()]
            })
            .collect();
        ThetaField { theta }
    }

    pub fn kappa(&self) -> Vec<f64> {
        let kk = half_len(self.n_time);
        let (lo, hi) = (self.coherence.kappa_low.ln(), self.coherence.kappa_high.ln());
        (0..kk)
            .map(|k| {
                let s = if kk > 1 { k as f64 / (kk - 1) as f64 } else { 0.0 };
                (lo + s * (hi - lo)).exp()
            })
            .collect()
    }
}

/// Level, tilt and curvature curves over `kk` frequencies:
/// `1`, `cos(πs)` and `cos(2πs)` with `s = k / (kk − 1)`.
pub fn stand_in_basis(kk: usize) -> [Vec<f64>; 3] {
    let s = |k: usize| k as f64 / (kk.max(2) - 1) as f64;
    [
        vec![1.0; kk],
        (0..kk).map(|k| (PI * s(k)).cos()).collect(),
        (0..kk).map(|k| (2.0 * PI * s(k)).cos()).collect(),
    ]
}

pub fn generate(spec: &GeneratorSpec) -> Result<TimeCube> {
    spec.validate()?;
    let grid = spec.grid()?;
    let spectra = FittedSpectra::new(&spec.theta(&grid), &spec.basis());
    generate_from_model(&grid, spec.n_time, &spec.mean_model(), &spectra, &spec.kappa(), spec.seed)
}

/// Draws `Z(ω_k) ~ N(0, Q(κ_k)^{-1})` at every frequency, scales by `√f`,
/// adds the mean terms and transforms back.
pub fn generate_from_model(
    grid: &Grid,
    n_time: usize,
    mean: &MeanModel,
    spectra: &FittedSpectra,
    kappa: &[f64],
    seed: u64,
) -> Result<TimeCube> {
    let kk = half_len(n_time);
    if kappa.len() != kk || spectra.n_freq() != kk {
        return Err(Error::Shape(format!("expected {kk} frequencies")));
    }
    let mesh = build_mesh(grid)?;
    let op = PrecisionOperator::new(&mesh)?;
    let nv = mesh.n_vertices();
    let maps: Vec<Vec<Complex64>> = (0..kk)
        .into_par_iter()
        .map(|k| {
            let factor = op.factor(kappa[k])?;
            let mut rng = frequency_rng(seed, k);
            let real = is_real_frequency(k, n_time);
            let scale = if real { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
            let mut draw = |_| -> f64 { scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) };
            let er: Vec<f64> = (0..nv).map(&mut draw).collect();
            let ei: Vec<f64> = if real { vec![0.0; nv] } else { (0..nv).map(&mut draw).collect() };
            let zr = factor.sample(&er)?;
            let zi = if real { vec![0.0; nv] } else { factor.sample(&ei)? };
            Ok(mesh
                .vertex_of_pixel()
                .iter()
                .enumerate()
                .map(|(p, &v)| Complex64::new(zr[v], zi[v]) * spectra.get(p, k).sqrt())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut field = SpectralField::zeros(grid.n_pixels(), n_time);
    for (k, map) in maps.iter().enumerate() {
        for (p, &c) in map.iter().enumerate() {
            field.set(p, k, c);
        }
    }
    add_mean(&mut field, mean);
    inverse_dft_all(&field, grid)
}
