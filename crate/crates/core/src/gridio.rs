//! Grid geometry, area weights, and the raw cube file format.
//!
//! A cube file is a UTF-8 header of `key value...` lines terminated by an
//! empty line, followed by `nlat * nlon * ntime` little-endian `f32` values in
//! pixel-major order (all time steps of pixel 0, then pixel 1, ...).
//!
//! ```text
//! nlat 2
//! nlon 4
//! ntime 365
//! lat0 -45
//! dlat 90
//! lon0 0
//! dlon 90
//! mask 01100110
//!
//! <payload>
//! ```
//!
//! `lats`/`lons` may replace the `lat0 dlat`/`lon0 dlon` pairs with an
//! explicit list of values. Pixels are ordered latitude-major: pixel
//! `i * nlon + j` sits at latitude row `i`, longitude column `j`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Latitude/longitude grid with an optional land mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
    land_mask: Option<Vec<bool>>,
}

impl Grid {
    pub fn new(latitudes: Vec<f64>, longitudes: Vec<f64>, land_mask: Option<Vec<bool>>) -> Result<Self> {
        if latitudes.is_empty() || longitudes.is_empty() {
            return Err(Error::Grid("grid needs at least one latitude and one longitude".into()));
        }
        if latitudes.iter().any(|l| !l.is_finite() || !(-90.0..=90.0).contains(l)) {
            return Err(Error::Grid("latitudes must lie in [-90, 90]".into()));
        }
        if latitudes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("latitudes must be strictly increasing".into()));
        }
        if longitudes.iter().any(|l| !l.is_finite()) || longitudes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("longitudes must be finite and strictly increasing".into()));
        }
        if longitudes[longitudes.len() - 1] - longitudes[0] >= 360.0 {
            return Err(Error::Grid("longitude span must be below 360 degrees".into()));
        }
        let n = latitudes.len() * longitudes.len();
        if let Some(mask) = &land_mask {
            if mask.len() != n {
                return Err(Error::Grid(format!("land mask has {} entries, grid has {n} pixels", mask.len())));
            }
        }
        Ok(Self {
            latitudes,
            longitudes,
            land_mask,
        })
    }

    /// Global grid with `n_lat` equally spaced latitude rows and `n_lon`
    /// longitude columns starting at 0. With `poles`, the first and last rows
    /// sit exactly on the poles; otherwise rows are band centers.
    pub fn global(n_lat: usize, n_lon: usize, poles: bool) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 || (poles && n_lat < 2) {
            return Err(Error::Grid(format!("cannot build a global {n_lat}x{n_lon} grid")));
        }
        let latitudes = if poles {
            let d = 180.0 / (n_lat - 1) as f64;
            (0..n_lat)
                .map(|i| if i == n_lat - 1 { 90.0 } else { -90.0 + i as f64 * d })
                .collect()
        } else {
            let d = 180.0 / n_lat as f64;
            (0..n_lat).map(|i| -90.0 + (i as f64 + 0.5) * d).collect()
        };
        let dlon = 360.0 / n_lon as f64;
        let longitudes = (0..n_lon).map(|j| j as f64 * dlon).collect();
        Self::new(latitudes, longitudes, None)
    }

    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    pub fn n_lon(&self) -> usize {
        self.longitudes.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.latitudes.len() * self.longitudes.len()
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    pub fn land_mask(&self) -> Option<&[bool]> {
        self.land_mask.as_deref()
    }

    pub fn set_land_mask(&mut self, mask: Option<Vec<bool>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.n_pixels() {
                return Err(Error::Grid("land mask length does not match grid".into()));
            }
        }
        self.land_mask = mask;
        Ok(())
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> usize {
        row * self.longitudes.len() + col
    }

    /// (latitude row, longitude column) of a pixel.
    #[inline]
    pub fn row_col(&self, pixel: usize) -> (usize, usize) {
        (pixel / self.longitudes.len(), pixel % self.longitudes.len())
    }

    /// Latitude and longitude of a pixel, in degrees.
    pub fn lat_lon(&self, pixel: usize) -> (f64, f64) {
        let (r, c) = self.row_col(pixel);
        (self.latitudes[r], self.longitudes[c])
    }

    pub fn is_pole_row(&self, row: usize) -> bool {
        self.latitudes[row].abs() == 90.0
    }
}

/// Real field on a grid, `values[pixel * n_time + t]`, single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCube {
    grid: Grid,
    n_time: usize,
    values: Vec<f32>,
}

impl TimeCube {
    pub fn new(grid: Grid, n_time: usize, values: Vec<f32>) -> Result<Self> {
        if n_time == 0 {
            return Err(Error::Shape("cube needs at least one time step".into()));
        }
        let n = grid.n_pixels();
        if values.len() != n * n_time {
            return Err(Error::Shape(format!(
                "{} values for {n} pixels x {n_time} steps",
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                pixel: idx / n_time,
                time: idx % n_time,
            });
        }
        Ok(Self { grid, n_time, values })
    }

    pub fn zeros(grid: Grid, n_time: usize) -> Result<Self> {
        let len = grid.n_pixels() * n_time;
        Self::new(grid, n_time, vec![0.0; len])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_pixels(&self) -> usize {
        self.grid.n_pixels()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Time series of one pixel.
    pub fn series(&self, pixel: usize) -> &[f32] {
        &self.values[pixel * self.n_time..(pixel + 1) * self.n_time]
    }

    pub fn get(&self, pixel: usize, t: usize) -> f32 {
        self.values[pixel * self.n_time + t]
    }

    /// max - min over all values.
    pub fn data_range(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        f64::from(hi) - f64::from(lo)
    }
}

/// Unit-sphere embedding of every pixel, one `[x, y, z]` row per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSphereCoords {
    pub xyz: Vec<[f64; 3]>,
}

pub fn lat_lon_to_xyz(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let (phi, lam) = (lat_deg.to_radians(), lon_deg.to_radians());
    if lat_deg.abs() == 90.0 {
        // cos(pi/2) is not exactly zero in floating point
        return [0.0, 0.0, lat_deg.signum()];
    }
    [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
}

pub fn sphere_coords(grid: &Grid) -> UnitSphereCoords {
    let xyz = (0..grid.n_pixels())
        .map(|p| {
            let (lat, lon) = grid.lat_lon(p);
            lat_lon_to_xyz(lat, lon)
        })
        .collect();
    UnitSphereCoords { xyz }
}

/// Euclidean distance in R^3 between two points on the unit sphere.
#[inline]
pub fn chordal_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// cos(latitude) weights normalized to sum to one. Pole rows weigh zero.
pub fn pixel_area_weights(grid: &Grid) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.n_pixels())
        .map(|p| {
            let (r, _) = grid.row_col(p);
            if grid.is_pole_row(r) {
                0.0
            } else {
                grid.latitudes[r].to_radians().cos().max(0.0)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        let n = raw.len() as f64;
        return vec![1.0 / n; raw.len()];
    }
    raw.into_iter().map(|w| w / total).collect()
}

fn parse_values(key: &str, rest: &[&str]) -> Result<Vec<f64>> {
    rest.iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Header(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn axis_from_header(
    n: usize,
    list: Option<Vec<f64>>,
    start: Option<f64>,
    step: Option<f64>,
    name: &str,
) -> Result<Vec<f64>> {
    match (list, start, step) {
        (Some(v), None, None) => {
            if v.len() != n {
                return Err(Error::Header(format!("{name}s lists {} values, expected {n}", v.len())));
            }
            Ok(v)
        }
        (None, Some(s), Some(d)) => Ok((0..n).map(|i| s + i as f64 * d).collect()),
        (None, Some(s), None) if n == 1 => Ok(vec![s]),
        _ => Err(Error::Header(format!(
            "need either {name}s or {name}0 and d{name}"
        ))),
    }
}

/// Splits a cube file into header text and payload bytes.
fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let pos = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Header("no blank line terminating the header".into()))?;
    let header = std::str::from_utf8(&bytes[..pos + 1]).map_err(|_| Error::Header("header is not UTF-8".into()))?;
    Ok((header, &bytes[pos + 2..]))
}

/// Parses a cube from an in-memory file image.
pub fn parse_cube(bytes: &[u8]) -> Result<(Grid, TimeCube)> {
    let (header, payload) = split_header(bytes)?;
    let (mut nlat, mut nlon, mut ntime) = (None, None, None);
    let (mut lats, mut lons) = (None, None);
    let (mut lat0, mut dlat, mut lon0, mut dlon) = (None, None, None, None);
    let mut mask = None;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        let single = |rest: &[&str]| -> Result<f64> {
            match rest {
                [v] => v
                    .parse::<f64>()
                    .map_err(|_| Error::Header(format!("{key}: cannot parse {v:?}"))),
                _ => Err(Error::Header(format!("{key} expects one value"))),
            }
        };
        let count = |rest: &[&str]| -> Result<usize> {
            match rest {
                [v] => v
                    .parse::<usize>()
                    .map_err(|_| Error::Header(format!("{key}: cannot parse {v:?}"))),
                _ => Err(Error::Header(format!("{key} expects one value"))),
            }
        };
        match key {
            "nlat" => nlat = Some(count(&rest)?),
            "nlon" => nlon = Some(count(&rest)?),
            "ntime" => ntime = Some(count(&rest)?),
            "lats" => lats = Some(parse_values(key, &rest)?),
            "lons" => lons = Some(parse_values(key, &rest)?),
            "lat0" => lat0 = Some(single(&rest)?),
            "dlat" => dlat = Some(single(&rest)?),
            "lon0" => lon0 = Some(single(&rest)?),
            "dlon" => dlon = Some(single(&rest)?),
            "mask" => {
                let [m] = rest.as_slice() else {
                    return Err(Error::Header("mask expects one token".into()));
                };
                let bits = m
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(Error::Header(format!("mask character {c:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                mask = Some(bits);
            }
            other => return Err(Error::Header(format!("unknown key {other:?}"))),
        }
    }
    let nlat = nlat.ok_or_else(|| Error::Header("missing nlat".into()))?;
    let nlon = nlon.ok_or_else(|| Error::Header("missing nlon".into()))?;
    let ntime = ntime.ok_or_else(|| Error::Header("missing ntime".into()))?;
    let latitudes = axis_from_header(nlat, lats, lat0, dlat, "lat")?;
    let longitudes = axis_from_header(nlon, lons, lon0, dlon, "lon")?;
    let grid = Grid::new(latitudes, longitudes, mask)?;

    let expected = grid.n_pixels() * ntime * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let cube = TimeCube::new(grid.clone(), ntime, values)?;
    Ok((grid, cube))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<(Grid, TimeCube)> {
    let bytes = fs::read(path)?;
    parse_cube(&bytes)
}

fn axis_header(out: &mut String, name: &str, axis: &[f64]) {
    let uniform = axis.len() >= 2 && {
        let (s, d) = (axis[0], axis[1] - axis[0]);
        axis.iter().enumerate().all(|(i, &v)| s + i as f64 * d == v)
    };
    if uniform {
        out.push_str(&format!("{name}0 {}\nd{name} {}\n", axis[0], axis[1] - axis[0]));
    } else {
        out.push_str(&format!("{name}s"));
        for v in axis {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
}

/// Serializes a cube into the file image written by [`save_cube`].
pub fn encode_cube(grid: &Grid, cube: &TimeCube) -> Result<Vec<u8>> {
    if grid != cube.grid() {
        return Err(Error::Shape("grid does not match the cube's grid".into()));
    }
    let mut header = format!("nlat {}\nnlon {}\nntime {}\n", grid.n_lat(), grid.n_lon(), cube.n_time());
    axis_header(&mut header, "lat", grid.latitudes());
    axis_header(&mut header, "lon", grid.longitudes());
    if let Some(mask) = grid.land_mask() {
        let m: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        header.push_str(&format!("mask {m}\n"));
    }
    header.push('\n');
    let mut bytes = Vec::with_capacity(header.len() + cube.values().len() * 4);
    bytes.extend_from_slice(header.as_bytes());
    for v in cube.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn save_cube(grid: &Grid, cube: &TimeCube, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_cube(grid, cube)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
