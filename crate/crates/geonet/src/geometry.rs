//! Triangulated torus, P1 basis evaluation and area-uniform surface sampling.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusParams {
    pub major_radius: f64,
    pub minor_radius: f64,
    pub n_u: usize,
    pub n_v: usize,
}

impl Default for TorusParams {
    fn default() -> Self {
        Self {
            major_radius: 2.0,
            minor_radius: 0.7,
            n_u: 80,
            n_v: 24,
        }
    }
}

impl TorusParams {
    pub fn new(major_radius: f64, minor_radius: f64, n_u: usize, n_v: usize) -> Self {
        Self {
            major_radius,
            minor_radius,
            n_u,
            n_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.major_radius > self.minor_radius && self.minor_radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "torus radii must satisfy R > r > 0 (R = {}, r = {})",
                self.major_radius, self.minor_radius
            )));
        }
        if self.n_u < 3 || self.n_v < 3 {
            return Err(Error::InvalidParameter(format!(
                "torus subdivisions must be >= 3 (n_u = {}, n_v = {})",
                self.n_u, self.n_v
            )));
        }
        Ok(())
    }

    /// Surface area of the smooth torus, 4π²Rr.
    pub fn analytic_area(&self) -> f64 {
        4.0 * PI * PI * self.major_radius * self.minor_radius
    }

    /// Parameter values (u_i, v_j) of node `p` under row-major ordering.
    pub fn node_uv(&self, p: usize) -> (f64, f64) {
        let i = p / self.n_v;
        let j = p % self.n_v;
        (
            2.0 * PI * i as f64 / self.n_u as f64,
            2.0 * PI * j as f64 / self.n_v as f64,
        )
    }

    pub fn point(&self, u: f64, v: f64) -> Vec3 {
        let (r_big, r) = (self.major_radius, self.minor_radius);
        [
            (r_big + r * v.cos()) * u.cos(),
            (r_big + r * v.cos()) * u.sin(),
            r * v.sin(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub nodes: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub areas: Vec<f64>,
    pub cumulative_area: Vec<f64>,
    /// Set when the mesh was generated from a torus parameterization.
    pub torus: Option<TorusParams>,
}

/// A point on the mesh given by its element and barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub element: usize,
    pub bary: [f64; 3],
}

impl SurfacePoint {
    pub fn new(element: usize, bary: [f64; 3]) -> Result<Self> {
        let s: f64 = bary.iter().sum();
        if bary.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "barycentric weights {bary:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(Self { element, bary })
    }

    pub fn centroid(element: usize) -> Self {
        let t = 1.0 / 3.0;
        Self {
            element,
            bary: [t, t, t],
        }
    }
}

impl Mesh {
    /// Builds a mesh from raw nodes and triangles, computing areas.
    pub fn new(nodes: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = nodes.len();
        let mut areas = Vec::with_capacity(triangles.len());
        for (e, t) in triangles.iter().enumerate() {
            if t.iter().any(|&p| p >= n) {
                return Err(Error::InvalidParameter(format!(
                    "triangle {e} references a node >= {n}"
                )));
            }
            let a = 0.5 * norm(cross(sub(nodes[t[1]], nodes[t[0]]), sub(nodes[t[2]], nodes[t[0]])));
            if !(a > 0.0) {
                return Err(Error::DegenerateTriangle { element: e, area: a });
            }
            areas.push(a);
        }
        let mut cumulative_area = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for &a in &areas {
            acc += a;
            cumulative_area.push(acc);
        }
        Ok(Self {
            nodes,
            triangles,
            areas,
            cumulative_area,
            torus: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn total_area(&self) -> f64 {
        self.cumulative_area.last().copied().unwrap_or(0.0)
    }

    pub fn centroid(&self, e: usize) -> Vec3 {
        let t = self.triangles[e];
        let mut c = [0.0; 3];
        for &p in &t {
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += self.nodes[p][k] / 3.0;
            }
        }
        c
    }

    /// Unit normal of element `e` following its vertex orientation.
    pub fn normal(&self, e: usize) -> Vec3 {
        let t = self.triangles[e];
        let x = &self.nodes;
        let n = cross(sub(x[t[1]], x[t[0]]), sub(x[t[2]], x[t[0]]));
        scale(n, 1.0 / norm(n))
    }

    pub fn position(&self, p: &SurfacePoint) -> Vec3 {
        let t = self.triangles[p.element];
        let mut out = [0.0; 3];
        for (w, &q) in p.bary.iter().zip(&t) {
            for (k, o) in out.iter_mut().enumerate() {
                *o += w * self.nodes[q][k];
            }
        }
        out
    }

    /// Unique undirected edges `(p, q)` with `p < q`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self.edge_use_counts().into_keys().collect();
        e.sort_unstable();
        e
    }

    fn edge_use_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_use_counts().values().all(|&c| c == 2)
    }

    /// Writes `v x y z` then `f i j k` (1-based) lines.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for x in &self.nodes {
            writeln!(w, "v {} {} {}", x[0], x[1], x[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

pub fn build_torus_mesh(params: &TorusParams) -> Result<Mesh> {
    params.validate()?;
    let (nu, nv) = (params.n_u, params.n_v);
    let nodes: Vec<Vec3> = (0..nu * nv)
        .map(|p| {
            let (u, v) = params.node_uv(p);
            params.point(u, v)
        })
        .collect();
    let idx = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut triangles = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let p00 = idx(i, j);
            let p10 = idx(i + 1, j);
            let p11 = idx(i + 1, j + 1);
            let p01 = idx(i, j + 1);
            triangles.push([p00, p10, p11]);
            triangles.push([p00, p11, p01]);
        }
    }
    let mut mesh = Mesh::new(nodes, triangles)?;
    mesh.torus = Some(*params);
    Ok(mesh)
}

/// Nonzero entries of φ(x): the three vertices of the element and their weights.
pub fn fe_basis_at(mesh: &Mesh, p: &SurfacePoint) -> Result<[(usize, f64); 3]> {
    let t = mesh
        .triangles
        .get(p.element)
        .ok_or(Error::InvalidElement(p.element))?;
    Ok([(t[0], p.bary[0]), (t[1], p.bary[1]), (t[2], p.bary[2])])
}

/// Index of the first entry whose cumulative weight reaches `u * total`,
/// skipping zero-weight entries that tie at the target.
pub fn invert_cumulative(cumulative: &[f64], u: f64) -> usize {
    let n = cumulative.len();
    debug_assert!(n > 0);
    let total = cumulative[n - 1];
    let target = u * total;
    let mut j = cumulative.partition_point(|&c| c < target).min(n - 1);
    loop {
        let prev = if j == 0 { 0.0 } else { cumulative[j - 1] };
        if cumulative[j] > prev || j == n - 1 {
            return j;
        }
        j += 1;
    }
}

/// Maps three germ vectors to area-uniform points on the mesh.
pub fn sample_uniform_candidates(
    mesh: &Mesh,
    u_elem: &[f64],
    u_a: &[f64],
    u_b: &[f64],
) -> Result<Vec<SurfacePoint>> {
    if u_elem.len() != u_a.len() || u_a.len() != u_b.len() {
        return Err(Error::Shape(format!(
            "germ lengths differ: {}, {}, {}",
            u_elem.len(),
            u_a.len(),
            u_b.len()
        )));
    }
    Ok(u_elem
        .iter()
        .zip(u_a)
        .zip(u_b)
        .map(|((&ue, &a), &b)| {
            let element = invert_cumulative(&mesh.cumulative_area, ue);
            let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
            SurfacePoint {
                element,
                bary: [1.0 - a - b, a, b],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_mesh_counts() {
        let m = build_torus_mesh(&TorusParams::default()).unwrap();
        assert_eq!(m.n_nodes(), 1920);
        assert_eq!(m.n_elements(), 3840);
        assert!(m.is_closed());
    }

    #[test]
    fn smallest_torus_is_closed() {
        let m = build_torus_mesh(&TorusParams::new(2.0, 0.7, 3, 3)).unwrap();
        assert_eq!(m.n_nodes(), 9);
        assert_eq!(m.n_elements(), 18);
        assert!(m.is_closed());
        assert_eq!(m.edges().len(), 27);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(build_torus_mesh(&TorusParams::new(0.5, 0.7, 10, 10)).is_err());
        assert!(build_torus_mesh(&TorusParams::new(2.0, 0.7, 2, 10)).is_err());
    }

    #[test]
    fn normals_point_outward() {
        let p = TorusParams::new(2.0, 0.7, 20, 10);
        let m = build_torus_mesh(&p).unwrap();
        for e in 0..m.n_elements() {
            let c = m.centroid(e);
            let rho = (c[0] * c[0] + c[1] * c[1]).sqrt();
            let tube = [c[0] - 2.0 * c[0] / rho, c[1] - 2.0 * c[1] / rho, c[2]];
            assert!(dot(m.normal(e), tube) > 0.0);
        }
    }

    #[test]
    fn area_converges_to_analytic() {
        let fine = TorusParams::new(2.0, 0.7, 160, 48);
        let m = build_torus_mesh(&fine).unwrap();
        let rel = (m.total_area() - fine.analytic_area()).abs() / fine.analytic_area();
        assert!(rel < 5e-3, "{rel}");
        let mut last = 0.0;
        for k in [1, 2, 4] {
            let a = build_torus_mesh(&TorusParams::new(2.0, 0.7, 20 * k, 6 * k))
                .unwrap()
                .total_area();
            assert!(a > last);
            last = a;
        }
    }

    #[test]
    fn basis_at_node_and_centroid() {
        let m = build_torus_mesh(&TorusParams::new(2.0, 0.7, 4, 4)).unwrap();
        let b = fe_basis_at(&m, &SurfacePoint::new(3, [1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(b[0], (m.triangles[3][0], 1.0));
        let c = fe_basis_at(&m, &SurfacePoint::centroid(5)).unwrap();
        assert!(c.iter().all(|&(_, w)| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!(fe_basis_at(&m, &SurfacePoint::centroid(999)).is_err());
    }

    #[test]
    fn single_triangle_first_vertex() {
        let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let pts = sample_uniform_candidates(&m, &[0.3], &[0.0], &[0.0]).unwrap();
        assert_eq!(m.position(&pts[0]), [0.0; 3]);
        assert!(sample_uniform_candidates(&m, &[], &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn inversion_equal_weights() {
        let cum: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        assert_eq!(invert_cumulative(&cum, 0.0), 0);
        assert_eq!(invert_cumulative(&cum, 0.5), 4);
        assert_eq!(invert_cumulative(&cum, 1.0), 9);
        let with_zeros = [0.0, 0.0, 1.0, 1.0, 2.0];
        assert_eq!(invert_cumulative(&with_zeros, 0.0), 2);
        assert_eq!(invert_cumulative(&with_zeros, 0.75), 4);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let r = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]);
        assert!(matches!(r, Err(Error::DegenerateTriangle { .. })));
    }

    proptest! {
        #[test]
        fn partition_of_unity(e in 0usize..3840, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = build_torus_mesh(&TorusParams::default()).unwrap();
            let p = sample_uniform_candidates(&m, &[(e as f64 + 0.5) / 3840.0], &[a], &[b]).unwrap()[0];
            prop_assert!(p.bary.iter().all(|&w| w >= 0.0));
            let s: f64 = fe_basis_at(&m, &p).unwrap().iter().map(|&(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
