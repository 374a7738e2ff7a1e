//! FEM discretization of the anisotropic SPDE, covariance, sampling and the
//! reduced-order representation ψ^m.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};

use crate::basis_fields::BasisMatrix;
use crate::error::{Error, Result};
use crate::geometry::{cross, dot, fe_basis_at, norm, scale, sub, Mesh, SurfacePoint, Vec3};
use crate::sparse::Csr;

/// Largest node count for which the dense covariance path is allowed.
pub const DENSE_LIMIT: usize = 4000;

#[derive(Clone, Debug)]
pub struct AnisotropySpec {
    pub h1: f64,
    pub h2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub basis1: BasisMatrix,
    pub basis2: BasisMatrix,
    /// Lower clamps c_star^(k), one per field.
    pub c_lo: [f64; 2],
    /// Upper clamps c^(k)*, one per field.
    pub c_hi: [f64; 2],
}

impl AnisotropySpec {
    /// Constant fields h^(k) = h_k (n_h = 0) with default clamps.
    pub fn constant(n_o: usize, h1: f64, h2: f64) -> Self {
        use crate::basis_fields::BasisKind;
        Self {
            h1,
            h2,
            beta1: Vec::new(),
            beta2: Vec::new(),
            basis1: BasisMatrix::empty(n_o, BasisKind::Smooth),
            basis2: BasisMatrix::empty(n_o, BasisKind::Smooth),
            c_lo: [1e-12; 2],
            c_hi: [f64::INFINITY; 2],
        }
    }

    /// Nodal values of h^(1) and h^(2), checked against the clamps.
    pub fn nodal_fields(&self) -> Result<[Vec<f64>; 2]> {
        let mut out = [Vec::new(), Vec::new()];
        let parts = [
            (self.h1, &self.beta1, &self.basis1),
            (self.h2, &self.beta2, &self.basis2),
        ];
        for (k, (h, beta, basis)) in parts.into_iter().enumerate() {
            if beta.len() != basis.n_h() {
                return Err(Error::Shape(format!(
                    "beta{} has length {} but the basis has {} columns",
                    k + 1,
                    beta.len(),
                    basis.n_h()
                )));
            }
            let vals: Vec<f64> = basis.combine(beta).into_iter().map(|d| h + d).collect();
            for (p, &v) in vals.iter().enumerate() {
                if !(v >= self.c_lo[k] && v <= self.c_hi[k]) || self.c_lo[k] <= 0.0 {
                    return Err(Error::ClampViolation {
                        field: k + 1,
                        node: p,
                        value: v,
                        lo: self.c_lo[k],
                        hi: self.c_hi[k],
                    });
                }
            }
            out[k] = vals;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct FemSystem {
    pub mass: Csr,
    pub stiffness: Csr,
    pub tau0: f64,
}

impl FemSystem {
    pub fn new(mesh: &Mesh, spec: &AnisotropySpec, tau0: f64) -> Result<Self> {
        if !(tau0 > 0.0) {
            return Err(Error::InvalidParameter(format!("tau0 must be positive, got {tau0}")));
        }
        Ok(Self {
            mass: assemble_mass(mesh)?,
            stiffness: assemble_stiffness(mesh, spec)?,
            tau0,
        })
    }

    /// τ0 [g] + [κ].
    pub fn operator(&self) -> Csr {
        self.mass.axpby(self.tau0, &self.stiffness, 1.0)
    }
}

fn check_areas(mesh: &Mesh) -> Result<()> {
    match mesh.areas.iter().position(|&a| !(a > 0.0)) {
        Some(e) => Err(Error::DegenerateTriangle {
            element: e,
            area: mesh.areas[e],
        }),
        None => Ok(()),
    }
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &Mesh) -> Result<Csr> {
    check_areas(mesh)?;
    let mut t = Vec::with_capacity(9 * mesh.n_elements());
    for (tri, &a) in mesh.triangles.iter().zip(&mesh.areas) {
        for i in 0..3 {
            for j in 0..3 {
                let v = if i == j { a / 6.0 } else { a / 12.0 };
                t.push((tri[i], tri[j], v));
            }
        }
    }
    let n = mesh.n_nodes();
    Ok(Csr::from_triplets(n, n, &t))
}

/// Orthonormal tangent frame (e1, e2) of element `e`. On a torus e1 follows
/// the azimuthal direction ∂x/∂u at the centroid; otherwise the first edge.
pub fn tangent_frame(mesh: &Mesh, e: usize) -> (Vec3, Vec3) {
    let n = mesh.normal(e);
    let raw = if mesh.torus.is_some() {
        let c = mesh.centroid(e);
        [-c[1], c[0], 0.0]
    } else {
        let t = mesh.triangles[e];
        sub(mesh.nodes[t[1]], mesh.nodes[t[0]])
    };
    let proj = sub(raw, scale(n, dot(raw, n)));
    let e1 = scale(proj, 1.0 / norm(proj));
    (e1, cross(n, e1))
}

/// Element-constant surface gradients of the three P1 basis functions.
fn element_gradients(mesh: &Mesh, e: usize) -> [Vec3; 3] {
    let t = mesh.triangles[e];
    let x = [mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]];
    let n = mesh.normal(e);
    let s = 1.0 / (2.0 * mesh.areas[e]);
    let mut g = [[0.0; 3]; 3];
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = scale(cross(n, sub(x[(i + 2) % 3], x[(i + 1) % 3])), s);
    }
    g
}

/// Anisotropic stiffness with one-point (centroid) quadrature of h^(1), h^(2).
pub fn assemble_stiffness(mesh: &Mesh, spec: &AnisotropySpec) -> Result<Csr> {
    check_areas(mesh)?;
    let n = mesh.n_nodes();
    if spec.basis1.values.nrows() != n || spec.basis2.values.nrows() != n {
        return Err(Error::Shape("anisotropy basis rows differ from node count".into()));
    }
    let [hn1, hn2] = spec.nodal_fields()?;
    let mut t = Vec::with_capacity(9 * mesh.n_elements());
    for (e, tri) in mesh.triangles.iter().enumerate() {
        let h1 = tri.iter().map(|&p| hn1[p]).sum::<f64>() / 3.0;
        let h2 = tri.iter().map(|&p| hn2[p]).sum::<f64>() / 3.0;
        let (e1, e2) = tangent_frame(mesh, e);
        let g = element_gradients(mesh, e);
        let a = mesh.areas[e];
        let g1: Vec<f64> = g.iter().map(|&gi| dot(gi, e1)).collect();
        let g2: Vec<f64> = g.iter().map(|&gi| dot(gi, e2)).collect();
        for i in 0..3 {
            for j in 0..3 {
                t.push((tri[i], tri[j], a * (h1 * g1[i] * g1[j] + h2 * g2[i] * g2[j])));
            }
        }
    }
    Ok(Csr::from_triplets(n, n, &t))
}

fn check_dense(n: usize, limit: usize) -> Result<()> {
    if n > limit {
        return Err(Error::TooLargeForDense { n, limit });
    }
    Ok(())
}

fn sparse_times_dense(a: &Csr, x: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows, x.ncols());
    for j in 0..x.ncols() {
        let col = x.col(j);
        for i in 0..a.nrows {
            let mut s = 0.0;
            for (k, v) in a.row(i) {
                s += v * col[k];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// [C_U] = A⁻¹ [g] A⁻¹ with A = τ0[g] + [κ].
pub fn covariance_direct(sys: &FemSystem, limit: usize) -> Result<Mat<f64>> {
    let n = sys.mass.nrows;
    check_dense(n, limit)?;
    let a = sys.operator().to_dense();
    let llt = a
        .llt(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let x = llt.solve(Mat::<f64>::identity(n, n));
    let gx = sparse_times_dense(&sys.mass, &x);
    let c = &x * &gx;
    Ok(Mat::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MassMode {
    Cholesky,
    Lumped,
}

/// Columns u^ℓ solving A u = R γ^ℓ, with R = L_g (g = L_g L_gᵀ) or the
/// square root of the row-sum lumped mass.
pub fn sample_field_vectors(sys: &FemSystem, germs: &Mat<f64>, mode: MassMode) -> Result<Mat<f64>> {
    let n = sys.mass.nrows;
    if germs.nrows() != n {
        return Err(Error::Shape(format!(
            "germs have {} rows, expected {n}",
            germs.nrows()
        )));
    }
    check_dense(n, DENSE_LIMIT)?;
    let rhs = match mode {
        MassMode::Cholesky => {
            let g = sys
                .mass
                .to_dense()
                .llt(Side::Lower)
                .map_err(|e| Error::Factorization(format!("{e:?}")))?;
            g.L() * germs
        }
        MassMode::Lumped => {
            let d: Vec<f64> = sys.mass.row_sums().into_iter().map(f64::sqrt).collect();
            Mat::from_fn(n, germs.ncols(), |i, j| d[i] * germs[(i, j)])
        }
    };
    let llt = sys
        .operator()
        .to_dense()
        .llt(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    Ok(llt.solve(rhs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    DirectEig,
    SvdOfSamples,
}

#[derive(Clone, Debug)]
pub struct ReducedField {
    /// n_o × m eigenvectors [Φ^m].
    pub phi: Mat<f64>,
    /// m eigenvalues, decreasing.
    pub lambda: Vec<f64>,
    pub provenance: Provenance,
    /// Row-major n_o × m table of ψ^m at the nodes, [Φ^m] diag(λ)^{1/2}.
    psi_nodes: Vec<f64>,
}

fn sign_reference(n: usize) -> Vec<f64> {
    (0..n).map(|p| 1.0 + (p as f64 * 0.618_033_988_749_895).fract()).collect()
}

impl ReducedField {
    /// Builds the field from eigenpairs, normalizing eigenvector signs against
    /// a fixed reference vector so results do not depend on the LAPACK path.
    pub fn new(mut phi: Mat<f64>, lambda: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let (n, m) = (phi.nrows(), phi.ncols());
        if lambda.len() != m {
            return Err(Error::Shape("eigenvalue count differs from eigenvector count".into()));
        }
        let r = sign_reference(n);
        for a in 0..m {
            let d: f64 = (0..n).map(|p| phi[(p, a)] * r[p]).sum();
            if d < 0.0 {
                for p in 0..n {
                    phi[(p, a)] = -phi[(p, a)];
                }
            }
        }
        let mut psi_nodes = vec![0.0; n * m];
        for p in 0..n {
            for a in 0..m {
                psi_nodes[p * m + a] = lambda[a].max(0.0).sqrt() * phi[(p, a)];
            }
        }
        Ok(Self {
            phi,
            lambda,
            provenance,
            psi_nodes,
        })
    }

    pub fn m(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.phi.nrows()
    }

    pub fn psi_node(&self, p: usize) -> &[f64] {
        let m = self.m();
        &self.psi_nodes[p * m..(p + 1) * m]
    }
}

/// Top-m eigenpairs of a dense covariance.
pub fn reduce_direct(cov: &Mat<f64>, m: usize) -> Result<ReducedField> {
    let n = cov.nrows();
    if m == 0 || m >= n {
        return Err(Error::InvalidParameter(format!(
            "reduction order must satisfy 1 <= m <= n_o - 1 (m = {m}, n_o = {n})"
        )));
    }
    let eig = cov
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let (u, s) = (eig.U(), eig.S());
    let lambda: Vec<f64> = (0..m).map(|a| s[n - 1 - a]).collect();
    if !(lambda[m - 1] > 0.0) {
        return Err(Error::RankDeficient(format!(
            "eigenvalue {m} of the covariance is {:e}",
            lambda[m - 1]
        )));
    }
    let phi = Mat::from_fn(n, m, |p, a| u[(p, n - 1 - a)]);
    ReducedField::new(phi, lambda, Provenance::DirectEig)
}

/// Centered thin SVD of n_o × n_sim samples; λ = S² / (n_sim − 1).
pub fn reduce_samples(samples: &Mat<f64>, m: usize) -> Result<ReducedField> {
    let (n, ns) = (samples.nrows(), samples.ncols());
    if ns < 2 || m == 0 || m >= n || m > ns - 1 {
        return Err(Error::InvalidParameter(format!(
            "svd reduction needs 1 <= m <= min(n_o, n_sim) - 1 (m = {m}, n_o = {n}, n_sim = {ns})"
        )));
    }
    let means: Vec<f64> = (0..n)
        .map(|i| (0..ns).map(|j| samples[(i, j)]).sum::<f64>() / ns as f64)
        .collect();
    let centered = Mat::from_fn(n, ns, |i, j| samples[(i, j)] - means[i]);
    let svd = centered
        .thin_svd()
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let (u, s) = (svd.U(), svd.S());
    let lambda: Vec<f64> = (0..m).map(|a| s[a] * s[a] / (ns as f64 - 1.0)).collect();
    if !(lambda[m - 1] > 0.0) {
        return Err(Error::RankDeficient(format!("sample rank below {m}")));
    }
    let phi = Mat::from_fn(n, m, |p, a| u[(p, a)]);
    ReducedField::new(phi, lambda, Provenance::SvdOfSamples)
}

pub fn trace(c: &Mat<f64>) -> f64 {
    (0..c.nrows()).map(|i| c[(i, i)]).sum()
}

/// 1 − Σλ / tr C_U.
pub fn pca_error(field: &ReducedField, trace_cu: f64) -> f64 {
    1.0 - field.lambda.iter().sum::<f64>() / trace_cu
}

/// ψ^m(x) = diag(λ)^{1/2} [Φ^m]ᵀ φ(x).
pub fn psi_m(field: &ReducedField, phi_x: &[(usize, f64); 3]) -> Vec<f64> {
    let mut out = vec![0.0; field.m()];
    for &(p, w) in phi_x {
        for (o, &v) in out.iter_mut().zip(field.psi_node(p)) {
            *o += w * v;
        }
    }
    out
}

pub fn psi_at(field: &ReducedField, mesh: &Mesh, p: &SurfacePoint) -> Result<Vec<f64>> {
    Ok(psi_m(field, &fe_basis_at(mesh, p)?))
}

/// U^m(x) = ⟨ψ^m(x), η⟩.
pub fn evaluate_field(field: &ReducedField, mesh: &Mesh, eta: &[f64], p: &SurfacePoint) -> Result<f64> {
    if eta.len() != field.m() {
        return Err(Error::Shape(format!("eta has length {}, expected {}", eta.len(), field.m())));
    }
    Ok(psi_at(field, mesh, p)?.iter().zip(eta).map(|(a, b)| a * b).sum())
}
