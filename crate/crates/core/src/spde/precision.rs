use std::f64::consts::PI;
use std::sync::Arc;

use super::cholesky::{CholeskyFactor, SymbolicCholesky};
use super::fem::{assemble_fem, FemMatrices};
use super::mesh::SphereMesh;
use super::ordering::minimum_degree;
use super::sparse::CscMatrix;
use crate::{Error, Result};

const NONE: usize = usize::MAX;

/// `Q(κ) = τ² (κ²C + G) C⁻¹ (κ²C + G)` with `τ² = 1 / (4πκ²)`, which gives
/// unit marginal variance in the planar limit.
#[derive(Debug, Clone)]
pub struct SparsePrecision {
    pub kappa: f64,
    pub tau: f64,
    pub matrix: CscMatrix,
}

impl SparsePrecision {
    pub fn factorize(&self) -> Result<CholeskyFactor> {
        super::cholesky::factorize(&self.matrix)
    }
}

/// The κ-independent pieces of `Q(κ)`: `C`, `G` and `G C⁻¹ G` on one shared
/// two-hop pattern, plus a fill-reducing ordering of that pattern.
#[derive(Debug, Clone)]
pub struct PrecisionOperator {
    pattern: CscMatrix,
    c_vals: Vec<f64>,
    g_vals: Vec<f64>,
    gcg_vals: Vec<f64>,
    order: Vec<usize>,
    symbolic: Arc<SymbolicCholesky>,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be positive and finite, got {kappa}")));
    }
    Ok(())
}

impl PrecisionOperator {
    pub fn new(mesh: &SphereMesh) -> Result<Self> {
        Self::from_fem(&assemble_fem(mesh)?)
    }

    pub fn from_fem(fem: &FemMatrices) -> Result<Self> {
        let g = &fem.stiffness;
        let n = g.n_cols();
        if fem.mass.len() != n || fem.mass.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Degenerate("every vertex needs positive mass".into()));
        }
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut gcg_vals = Vec::new();
        let mut acc = vec![0.0; n];
        let mut seen = vec![NONE; n];
        let mut rows = Vec::new();
        for j in 0..n {
            rows.clear();
            let (kr, kv) = g.col(j);
            for (&k, &gkj) in kr.iter().zip(kv) {
                let s = gkj / fem.mass[k];
                let (ir, iv) = g.col(k);
                for (&i, &gik) in ir.iter().zip(iv) {
                    if seen[i] != j {
                        seen[i] = j;
                        acc[i] = 0.0;
                        rows.push(i);
                    }
                    acc[i] += gik * s;
                }
            }
            if seen[j] != j {
                seen[j] = j;
                acc[j] = 0.0;
                rows.push(j);
            }
            rows.sort_unstable();
            for &i in &rows {
                row_idx.push(i);
                gcg_vals.push(acc[i]);
            }
            col_ptr[j + 1] = row_idx.len();
        }
        let pattern = CscMatrix::new(n, n, col_ptr, row_idx, vec![0.0; gcg_vals.len()])?;
        let mut c_vals = vec![0.0; pattern.nnz()];
        let mut g_vals = vec![0.0; pattern.nnz()];
        for j in 0..n {
            c_vals[pattern.position(j, j).expect("diagonal present")] = fem.mass[j];
            let (r, v) = g.col(j);
            for (&i, &gij) in r.iter().zip(v) {
                g_vals[pattern.position(i, j).expect("one-hop inside two-hop")] = gij;
            }
        }
        let order = minimum_degree(&pattern);
        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern, order.clone())?);
        Ok(Self {
            pattern,
            c_vals,
            g_vals,
            gcg_vals,
            order,
            symbolic,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.n_cols()
    }

    pub fn pattern(&self) -> &CscMatrix {
        &self.pattern
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn tau(kappa: f64) -> f64 {
        1.0 / (kappa * (4.0 * PI).sqrt())
    }

    /// Weights of `C`, `G` and `G C⁻¹ G` in `Q(κ)`.
    pub fn coefficients(kappa: f64) -> Result<[f64; 3]> {
        check_kappa(kappa)?;
        let tau2 = Self::tau(kappa).powi(2);
        Ok([tau2 * kappa.powi(4), 2.0 * tau2 * kappa * kappa, tau2])
    }

    #[inline]
    fn value_at(&self, w: &[f64; 3], p: usize) -> f64 {
        w[0] * self.c_vals[p] + w[1] * self.g_vals[p] + w[2] * self.gcg_vals[p]
    }

    pub fn values(&self, kappa: f64) -> Result<Vec<f64>> {
        let w = Self::coefficients(kappa)?;
        Ok((0..self.pattern.nnz()).map(|p| self.value_at(&w, p)).collect())
    }

    pub fn assemble(&self, kappa: f64) -> Result<SparsePrecision> {
        Ok(SparsePrecision {
            kappa,
            tau: Self::tau(kappa),
            matrix: self.pattern.with_values(self.values(kappa)?),
        })
    }

    /// Factor of the full `Q(κ)`, reusing the stored analysis.
    pub fn factor(&self, kappa: f64) -> Result<CholeskyFactor> {
        self.symbolic.factor(&self.values(kappa)?)
    }

    /// Analysis of the principal submatrix on the sorted vertex list `keep`,
    /// ordered by restricting the full ordering.
    pub fn plan(&self, keep: &[usize]) -> Result<SubmatrixPlan> {
        let n = self.n();
        let mut local = vec![NONE; n];
        for (l, &v) in keep.iter().enumerate() {
            if v >= n || local[v] != NONE || (l > 0 && keep[l - 1] >= v) {
                return Err(Error::InvalidParameter("submatrix vertices must be sorted, unique and in range".into()));
            }
            local[v] = l;
        }
        let m = keep.len();
        let mut col_ptr = vec![0usize; m + 1];
        let mut row_idx = Vec::new();
        let mut src = Vec::new();
        for (lj, &j) in keep.iter().enumerate() {
            let start = self.pattern.col_ptr()[j];
            for (off, &i) in self.pattern.col(j).0.iter().enumerate() {
                if local[i] != NONE {
                    row_idx.push(local[i]);
                    src.push(start + off);
                }
            }
            col_ptr[lj + 1] = row_idx.len();
        }
        let pattern = CscMatrix::new(m, m, col_ptr, row_idx, vec![0.0; src.len()])?;
        let order: Vec<usize> = self.order.iter().filter(|&&v| local[v] != NONE).map(|&v| local[v]).collect();
        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern, order)?);
        Ok(SubmatrixPlan {
            keep: keep.to_vec(),
            pattern,
            src,
            symbolic,
        })
    }
}

/// Reusable analysis of one principal submatrix of `Q(κ)`.
#[derive(Debug, Clone)]
pub struct SubmatrixPlan {
    keep: Vec<usize>,
    pattern: CscMatrix,
    src: Vec<usize>,
    symbolic: Arc<SymbolicCholesky>,
}

impl SubmatrixPlan {
    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn values(&self, op: &PrecisionOperator, kappa: f64) -> Result<Vec<f64>> {
        let w = PrecisionOperator::coefficients(kappa)?;
        Ok(self.src.iter().map(|&p| op.value_at(&w, p)).collect())
    }

    pub fn matrix(&self, op: &PrecisionOperator, kappa: f64) -> Result<CscMatrix> {
        Ok(self.pattern.with_values(self.values(op, kappa)?))
    }

    pub fn factor(&self, op: &PrecisionOperator, kappa: f64) -> Result<CholeskyFactor> {
        self.symbolic.factor(&self.values(op, kappa)?)
    }
}

pub fn assemble_precision(mesh: &SphereMesh, kappa: f64) -> Result<SparsePrecision> {
    check_kappa(kappa)?;
    PrecisionOperator::new(mesh)?.assemble(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridio::Grid;
    use crate::spde::{build_mesh, factorize_with_order, fill_in};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn op(n_lat: usize, n_lon: usize, poles: bool) -> (SphereMesh, PrecisionOperator) {
        let mesh = build_mesh(&Grid::global(n_lat, n_lon, poles).unwrap()).unwrap();
        let op = PrecisionOperator::new(&mesh).unwrap();
        (mesh, op)
    }

    fn dense_q(mesh: &SphereMesh, kappa: f64) -> DMatrix<f64> {
        let fem = assemble_fem(mesh).unwrap();
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(fem.mass.clone()));
        let cinv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(fem.mass.iter().map(|m| 1.0 / m).collect()));
        let k = &c * (kappa * kappa) + fem.stiffness.to_dense();
        (&k * cinv * &k) / (4.0 * PI * kappa * kappa)
    }

    #[test]
    fn matches_dense_product() {
        let (mesh, op) = op(6, 10, true);
        for kappa in [0.5, 3.0, 40.0] {
            let q = op.assemble(kappa).unwrap().matrix.to_dense();
            let d = dense_q(&mesh, kappa);
            let scale = d.amax();
            assert!((q - &d).amax() < 1e-12 * scale);
        }
    }

    #[test]
    fn symmetric_and_pd() {
        let (mesh, _) = op(10, 20, false);
        let q = assemble_precision(&mesh, 10.0).unwrap();
        assert!(q.matrix.asymmetry() < 1e-12);
        assert!(q.factorize().is_ok());
        assert!(assemble_precision(&mesh, 0.0).is_err());
        assert!(assemble_precision(&mesh, -1.0).is_err());
    }

    #[test]
    fn pd_down_to_small_kappa() {
        let (_, op) = op(8, 16, true);
        for kappa in [1e-3, 1e-2, 1.0, 1e3] {
            let f = op.factor(kappa).unwrap();
            assert!(f.diag().all(|d| d > 0.0));
        }
    }

    #[test]
    fn ordering_reduces_fill() {
        let (_, op) = op(19, 36, true);
        let natural: Vec<usize> = (0..op.n()).collect();
        let md = fill_in(op.pattern(), op.order()).unwrap();
        let nat = fill_in(op.pattern(), &natural).unwrap();
        assert!(md <= nat, "{md} > {nat}");
    }

    #[test]
    fn submatrix_plan_matches_dense_block() {
        let (_, op) = op(7, 12, true);
        let keep: Vec<usize> = (0..op.n()).filter(|v| v % 3 != 1).collect();
        let plan = op.plan(&keep).unwrap();
        let kappa = 4.0;
        let full = op.assemble(kappa).unwrap().matrix.to_dense();
        let sub = plan.matrix(&op, kappa).unwrap().to_dense();
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(sub[(a, b)], full[(i, j)]);
            }
        }
        let f = plan.factor(&op, kappa).unwrap();
        let dense = sub.clone().cholesky().unwrap();
        let expect = 2.0 * dense.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((f.logdet() - expect).abs() < 1e-6 * expect.abs());
        assert!(op.plan(&[3, 2]).is_err());
    }

    #[test]
    fn logdet_of_small_submatrix_matches_dense() {
        let (_, op) = op(8, 12, false);
        let keep: Vec<usize> = (0..50).map(|i| i * 96 / 50).collect();
        let plan = op.plan(&keep).unwrap();
        let m = plan.matrix(&op, 7.0).unwrap();
        let det = m.to_dense().determinant();
        let f = plan.factor(&op, 7.0).unwrap();
        assert!((f.logdet() - det.ln()).abs() < 1e-6 * det.ln().abs().max(1.0));
    }

    #[test]
    fn residual_of_solve() {
        let (_, op) = op(12, 24, true);
        let q = op.assemble(10.0).unwrap();
        let f = op.factor(10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b: Vec<f64> = (0..op.n()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = f.solve(&b).unwrap();
        let r: f64 = q.matrix.mul_vec(&x).iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r / bn < 1e-8);
        let natural = factorize_with_order(&q.matrix, (0..op.n()).collect()).unwrap();
        assert!((natural.logdet() - f.logdet()).abs() < 1e-8 * f.logdet().abs());
    }

    #[test]
    fn sampler_covariance_matches_inverse() {
        let (_, op) = op(10, 10, false);
        assert_eq!(op.n(), 100);
        let q = op.assemble(3.0).unwrap();
        let f = op.factor(3.0).unwrap();
        let cov = q.matrix.to_dense().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 20_000;
        let mut acc = DMatrix::<f64>::zeros(100, 100);
        for _ in 0..draws {
            let eps: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e = nalgebra::DVector::from_vec(f.sample(&eps).unwrap());
            acc.ger(1.0, &e, &e, 1.0);
        }
        acc /= draws as f64;
        let err = (acc - cov).amax();
        assert!(err < 0.05, "{err}");
        assert_eq!(f.sample(&vec![0.0; 100]).unwrap(), vec![0.0; 100]);
    }

    #[test]
    fn neighbor_correlation_falls_with_kappa() {
        let (mesh, op) = op(10, 20, false);
        let (a, b) = (mesh.vertex_of_pixel()[4 * 20 + 3], mesh.vertex_of_pixel()[4 * 20 + 4]);
        let mut last = f64::INFINITY;
        for kappa in [0.5, 2.0, 8.0, 32.0] {
            let s = op.assemble(kappa).unwrap().matrix.to_dense().try_inverse().unwrap();
            let rho = s[(a, b)] / (s[(a, a)] * s[(b, b)]).sqrt();
            assert!(rho < last, "{kappa}: {rho} !< {last}");
            last = rho;
        }
    }

    /// Modified Bessel function K1 by polynomial approximation (|error| < 1e-7).
    fn bessel_k1(x: f64) -> f64 {
        if x <= 2.0 {
            let t = x / 3.75;
            let t2 = t * t;
            let i1 = x * (0.5 + t2 * (0.87890594 + t2 * (0.51498869 + t2 * (0.15084934 + t2 * (0.02658733 + t2 * (0.00301532 + t2 * 0.00032411))))));
            let y = x * x / 4.0;
            let poly = 1.0 + y * (0.15443144 + y * (-0.67278579 + y * (-0.18156897 + y * (-0.01919402 + y * (-0.00110404 + y * -0.00004686)))));
            (x / 2.0).ln() * i1 + poly / x
        } else {
            let y = 2.0 / x;
            let poly = 1.25331414 + y * (0.23498619 + y * (-0.03655620 + y * (0.01504268 + y * (-0.00780353 + y * (0.00325614 + y * -0.00068245)))));
            poly * (-x).exp() / x.sqrt()
        }
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_k1(1.0) - 0.6019072302).abs() < 1e-7);
        assert!((bessel_k1(2.5) - 0.07389081635).abs() < 1e-7);
        assert!((bessel_k1(0.1) - 9.853844780).abs() < 1e-6);
    }

    #[test]
    fn correlation_follows_matern_shape() {
        let grid = Grid::global(32, 64, false).unwrap();
        let mesh = build_mesh(&grid).unwrap();
        let op = PrecisionOperator::new(&mesh).unwrap();
        let kappa = 10.0;
        let f = op.factor(kappa).unwrap();
        let variance = |v: usize| {
            let mut e = vec![0.0; op.n()];
            e[v] = 1.0;
            f.solve(&e).unwrap()
        };
        let origin = mesh.vertex_of_pixel()[grid.pixel(16, 0)];
        let col = variance(origin);
        for c in 1..12 {
            let v = mesh.vertex_of_pixel()[grid.pixel(16, c)];
            let d = crate::gridio::chordal_distance(&mesh.vertices()[origin], &mesh.vertices()[v]);
            let x = kappa * d;
            if !(0.3..=2.5).contains(&x) {
                continue;
            }
            let rho = col[v] / (col[origin] * variance(v)[v]).sqrt();
            let matern = x * bessel_k1(x);
            assert!((rho - matern).abs() < 0.1, "kappa d = {x}: {rho} vs {matern}");
        }
    }
}
