//! Fidelity diagnostics for a decompressed cube against its original.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::gridio::{save_cube, Grid, TimeCube};
use crate::{Error, Result};

/// Area-weighted RMSPE over the land, ocean and full pixel sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspeSummary {
    /// `s(x) = sqrt(T^{-1} Σ_t (Y − Ŷ)²)`.
    pub map: Vec<f64>,
    pub land: Option<f64>,
    pub ocean: Option<f64>,
    pub all: f64,
}

/// Raw contrast variances per pixel; `NaN` where the neighbour is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMaps {
    pub north_south: Vec<f64>,
    pub east_west: Vec<f64>,
    pub temporal: Vec<f64>,
}

impl ContrastMaps {
    /// Natural log of each map; zero variance maps to `-inf`, missing stays `NaN`.
    pub fn log(&self) -> Self {
        let l = |v: &[f64]| v.iter().map(|x| x.ln()).collect();
        Self {
            north_south: l(&self.north_south),
            east_west: l(&self.east_west),
            temporal: l(&self.temporal),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub rmspe: RmspeSummary,
    pub original: ContrastMaps,
    pub decompressed: ContrastMaps,
    pub runtime_seconds: Option<f64>,
}

fn check_shapes(a: &TimeCube, b: &TimeCube) -> Result<()> {
    if a.n_pixels() != b.n_pixels() || a.n_time() != b.n_time() {
        return Err(Error::Shape(format!(
            "cubes differ in shape: {}x{} vs {}x{}",
            a.n_pixels(),
            a.n_time(),
            b.n_pixels(),
            b.n_time()
        )));
    }
    Ok(())
}

/// `sqrt(Σ w s² / Σ w)` over the pixels where `keep` holds; `None` if empty.
pub fn weighted_rms(map: &[f64], weights: &[f64], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (&s, &w)) in map.iter().zip(weights).enumerate() {
        if keep(i) {
            num += w * s * s;
            den += w;
        }
    }
    (den > 0.0).then(|| (num / den).sqrt())
}

pub fn rmspe(original: &TimeCube, decompressed: &TimeCube, weights: &[f64], mask: Option<&[bool]>) -> Result<RmspeSummary> {
    check_shapes(original, decompressed)?;
    if weights.len() != original.n_pixels() || mask.is_some_and(|m| m.len() != weights.len()) {
        return Err(Error::Shape("weights or mask do not match the pixel count".into()));
    }
    let t = original.n_time() as f64;
    let map: Vec<f64> = (0..original.n_pixels())
        .into_par_iter()
        .map(|p| {
            let ss: f64 = original
                .series(p)
                .iter()
                .zip(decompressed.series(p))
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            (ss / t).sqrt()
        })
        .collect();
    let all = weighted_rms(&map, weights, |_| true).unwrap_or(0.0);
    let (land, ocean) = match mask {
        Some(m) => (weighted_rms(&map, weights, |i| m[i]), weighted_rms(&map, weights, |i| !m[i])),
        None => (None, None),
    };
    Ok(RmspeSummary { map, land, ocean, all })
}

/// North-south (northern neighbour), east-west (with wraparound) and
/// one-step temporal contrast variances.
pub fn contrast_variances(cube: &TimeCube) -> Result<ContrastMaps> {
    let n_time = cube.n_time();
    if n_time < 2 {
        return Err(Error::Shape("contrast variances need T >= 2".into()));
    }
    let grid = cube.grid();
    let t = n_time as f64;
    let diff = |p: usize, q: usize| -> f64 {
        cube.series(p)
            .iter()
            .zip(cube.series(q))
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            / t
    };
    let n = cube.n_pixels();
    let north_south = (0..n)
        .into_par_iter()
        .map(|p| {
            let (r, c) = grid.row_col(p);
            if r + 1 < grid.n_lat() {
                diff(p, grid.pixel(r + 1, c))
            } else {
                f64::NAN
            }
        })
        .collect();
    let east_west = (0..n)
        .into_par_iter()
        .map(|p| {
            let (r, c) = grid.row_col(p);
            if grid.n_lon() < 2 {
                f64::NAN
            } else {
                diff(p, grid.pixel(r, (c + 1) % grid.n_lon()))
            }
        })
        .collect();
    let temporal = (0..n)
        .into_par_iter()
        .map(|p| {
            let s = cube.series(p);
            s.windows(2).map(|w| (f64::from(w[0]) - f64::from(w[1])).powi(2)).sum::<f64>() / (t - 1.0)
        })
        .collect();
    Ok(ContrastMaps {
        north_south,
        east_west,
        temporal,
    })
}

/// Pearson correlation over entries finite in both maps.
pub fn map_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(&x, &y)| (x, y)).collect();
    if pairs.len() < 2 {
        return None;
    }
    let m = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / m, my / m);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn fidelity_report(original: &TimeCube, decompressed: &TimeCube, weights: &[f64]) -> Result<FidelityReport> {
    let mask = original.grid().land_mask();
    Ok(FidelityReport {
        rmspe: rmspe(original, decompressed, weights, mask)?,
        original: contrast_variances(original)?,
        decompressed: contrast_variances(decompressed)?,
        runtime_seconds: None,
    })
}

/// CSV body with columns `metric,subset,value`.
pub fn report_csv(report: &FidelityReport) -> String {
    let mut s = String::from("metric,subset,value\n");
    let r = &report.rmspe;
    for (subset, v) in [("land", r.land), ("ocean", r.ocean), ("all", Some(r.all))] {
        if let Some(v) = v {
            let _ = writeln!(s, "rmspe,{subset},{v}");
        }
    }
    let (o, d) = (report.original.log(), report.decompressed.log());
    for (name, a, b) in [
        ("north_south", &o.north_south, &d.north_south),
        ("east_west", &o.east_west, &d.east_west),
        ("temporal", &o.temporal, &d.temporal),
    ] {
        if let Some(c) = map_correlation(a, b) {
            let _ = writeln!(s, "log_contrast_correlation,{name},{c}");
        }
    }
    if let Some(t) = report.runtime_seconds {
        let _ = writeln!(s, "runtime_seconds,all,{t}");
    }
    s
}

fn map_cube(grid: &Grid, map: &[f64]) -> Result<TimeCube> {
    // missing neighbours are written as zero so the file stays finite
    let values = map.iter().map(|&v| if v.is_finite() { v as f32 } else { 0.0 }).collect();
    TimeCube::new(grid.clone(), 1, values)
}

/// Writes `metrics.csv` and one single-step cube per map into `dir`.
pub fn emit_report(report: &FidelityReport, grid: &Grid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report_csv(report))?;
    save_cube(grid, &map_cube(grid, &report.rmspe.map)?, dir.join("rmspe.cube"))?;
    for (tag, maps) in [("original", &report.original), ("decompressed", &report.decompressed)] {
        for (name, m) in [
            ("north_south", &maps.north_south),
            ("east_west", &maps.east_west),
            ("temporal", &maps.temporal),
        ] {
            save_cube(grid, &map_cube(grid, m)?, dir.join(format!("contrast_{name}_{tag}.cube")))?;
        }
    }
    Ok(())
}
