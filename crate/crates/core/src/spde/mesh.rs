use std::collections::HashSet;

use crate::gridio::{lat_lon_to_xyz, Grid, UnitSphereCoords};
use crate::{Error, Result};

/// Triangulation of a latitude/longitude grid on the unit sphere. Each pixel
/// is a vertex, except that all pixels of a pole row share one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereMesh {
    vertices: UnitSphereCoords,
    triangles: Vec<[usize; 3]>,
    vertex_of_pixel: Vec<usize>,
    pixel_of_vertex: Vec<usize>,
}

/// Whether the longitude axis closes on itself: the gap across the date line
/// is no wider than the widest interior step (up to rounding).
fn wraps(lons: &[f64]) -> bool {
    let widest = lons.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
    let gap = lons[0] + 360.0 - lons[lons.len() - 1];
    gap <= widest * (1.0 + 1e-9)
}

pub fn build_mesh(grid: &Grid) -> Result<SphereMesh> {
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    if n_lat < 2 || n_lon < 3 {
        return Err(Error::Grid(format!("mesh needs at least 2x3 pixels, grid is {n_lat}x{n_lon}")));
    }
    let lats = grid.latitudes();
    let lons = grid.longitudes();

    let mut xyz = Vec::new();
    let mut vertex_of_pixel = vec![0; grid.n_pixels()];
    let mut pixel_of_vertex = Vec::new();
    let mut row_vertices: Vec<Vec<usize>> = Vec::with_capacity(n_lat);
    for r in 0..n_lat {
        if grid.is_pole_row(r) {
            let v = xyz.len();
            xyz.push(lat_lon_to_xyz(lats[r], 0.0));
            pixel_of_vertex.push(grid.pixel(r, 0));
            for c in 0..n_lon {
                vertex_of_pixel[grid.pixel(r, c)] = v;
            }
            row_vertices.push(vec![v]);
        } else {
            let mut row = Vec::with_capacity(n_lon);
            for c in 0..n_lon {
                let v = xyz.len();
                xyz.push(lat_lon_to_xyz(lats[r], lons[c]));
                pixel_of_vertex.push(grid.pixel(r, c));
                vertex_of_pixel[grid.pixel(r, c)] = v;
                row.push(v);
            }
            row_vertices.push(row);
        }
    }

    let closed = wraps(lons);
    let n_quads = if closed { n_lon } else { n_lon - 1 };
    let mut triangles = Vec::new();
    for r in 0..n_lat - 1 {
        let (lo, hi) = (&row_vertices[r], &row_vertices[r + 1]);
        for c in 0..n_quads {
            let c1 = (c + 1) % n_lon;
            match (lo.len(), hi.len()) {
                (1, 1) => {}
                (1, _) => triangles.push([lo[0], hi[c], hi[c1]]),
                (_, 1) => triangles.push([lo[c], lo[c1], hi[0]]),
                _ => {
                    triangles.push([lo[c], lo[c1], hi[c1]]);
                    triangles.push([lo[c], hi[c1], hi[c]]);
                }
            }
        }
    }
    // outward orientation
    for t in &mut triangles {
        let [a, b, c] = [xyz[t[0]], xyz[t[1]], xyz[t[2]]];
        let n = cross(sub(b, a), sub(c, a));
        let centroid = [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]];
        if dot(n, centroid) < 0.0 {
            t.swap(1, 2);
        }
    }
    let mesh = SphereMesh {
        vertices: UnitSphereCoords { xyz },
        triangles,
        vertex_of_pixel,
        pixel_of_vertex,
    };
    for (i, _) in mesh.triangles.iter().enumerate() {
        if mesh.triangle_area(i) <= 1e-14 {
            return Err(Error::DegenerateTriangle(i));
        }
    }
    Ok(mesh)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SphereMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.xyz.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices.xyz
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertex_of_pixel(&self) -> &[usize] {
        &self.vertex_of_pixel
    }

    /// Lowest pixel index mapped to vertex `v`.
    pub fn representative_pixel(&self, v: usize) -> usize {
        self.pixel_of_vertex[v]
    }

    /// Flat area of triangle `i`.
    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangles[i].map(|v| self.vertices.xyz[v]);
        let n = cross(sub(b, a), sub(c, a));
        0.5 * dot(n, n).sqrt()
    }

    pub fn n_edges(&self) -> usize {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// `V − E + F`.
    pub fn euler_characteristic(&self) -> isize {
        self.n_vertices() as isize - self.n_edges() as isize + self.n_triangles() as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_open_mesh_counts() {
        let m = build_mesh(&Grid::global(3, 4, false).unwrap()).unwrap();
        assert_eq!(m.n_vertices(), 12);
        assert_eq!(m.n_triangles(), 16);
        // a cylinder: two boundary loops
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn poles_merge_and_close() {
        let g = Grid::global(5, 8, true).unwrap();
        let m = build_mesh(&g).unwrap();
        assert_eq!(m.n_vertices(), 3 * 8 + 2);
        assert_eq!(m.euler_characteristic(), 2);
        let north: Vec<usize> = (0..8).map(|c| m.vertex_of_pixel()[g.pixel(4, c)]).collect();
        assert!(north.iter().all(|&v| v == north[0]));
        assert_eq!(m.representative_pixel(north[0]), g.pixel(4, 0));
        for v in 0..m.n_vertices() {
            assert_eq!(m.vertex_of_pixel()[m.representative_pixel(v)], v);
        }
    }

    #[test]
    fn outward_orientation() {
        let m = build_mesh(&Grid::global(7, 12, true).unwrap()).unwrap();
        for t in m.triangles() {
            let [a, b, c] = t.map(|v| m.vertices()[v]);
            assert!(dot(cross(sub(b, a), sub(c, a)), a) > 0.0);
        }
    }

    #[test]
    fn regional_grid_stays_open() {
        let g = Grid::new(vec![0.0, 5.0, 10.0], vec![0.0, 5.0, 10.0, 15.0], None).unwrap();
        let m = build_mesh(&g).unwrap();
        assert_eq!(m.n_triangles(), 2 * 2 * 3);
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn too_small() {
        assert!(build_mesh(&Grid::global(1, 8, false).unwrap()).is_err());
        assert!(build_mesh(&Grid::global(4, 2, false).unwrap()).is_err());
    }
}
