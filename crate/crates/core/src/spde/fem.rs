use super::mesh::{cross, dot, sub, SphereMesh};
use super::sparse::CscMatrix;
use crate::{Error, Result};

/// Lumped mass diagonal and cotangent stiffness matrix of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FemMatrices {
    pub mass: Vec<f64>,
    pub stiffness: CscMatrix,
}

/// Linear-element stiffness of one flat triangle: off-diagonal `(j, k)` is
/// `−½ cot` of the angle opposite that edge, rows sum to zero.
pub fn triangle_stiffness(p: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        let (j, l) = ((i + 1) % 3, (i + 2) % 3);
        let (a, b) = (sub(p[j], p[i]), sub(p[l], p[i]));
        let c = cross(a, b);
        let s = dot(c, c).sqrt();
        if !(s > 1e-300) {
            return None;
        }
        let w = -0.5 * dot(a, b) / s;
        k[j][l] += w;
        k[l][j] += w;
        k[j][j] -= w;
        k[l][l] -= w;
    }
    Some(k)
}

pub fn assemble_fem(mesh: &SphereMesh) -> Result<FemMatrices> {
    let n = mesh.n_vertices();
    let mut mass = vec![0.0; n];
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for (ti, t) in mesh.triangles().iter().enumerate() {
        let area = mesh.triangle_area(ti);
        if area <= 1e-14 {
            return Err(Error::DegenerateTriangle(ti));
        }
        let k = triangle_stiffness(t.map(|v| mesh.vertices()[v])).ok_or(Error::DegenerateTriangle(ti))?;
        for a in 0..3 {
            mass[t[a]] += area / 3.0;
            for b in 0..3 {
                trip.push((t[a], t[b], k[a][b]));
            }
        }
    }
    Ok(FemMatrices {
        mass,
        stiffness: CscMatrix::from_triplets(n, n, &trip)?,
    })
}
