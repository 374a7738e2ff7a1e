//! Orthonormal zero-mean bases for the anisotropy fields and the bias basis.

use std::f64::consts::PI;

use faer::Mat;

use crate::error::{Error, Result};
use crate::geometry::TorusParams;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Nonsmooth,
    Smooth,
}

/// Which of the two anisotropy fields a basis belongs to. The families use
/// different seeds (nonsmooth) or different starting phases (smooth).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    First,
    Second,
}

#[derive(Clone, Debug)]
pub struct BasisMatrix {
    /// n_o × n_h nodal values.
    pub values: Mat<f64>,
    pub kind: BasisKind,
}

impl BasisMatrix {
    /// An n_o × 0 basis (constant anisotropy fields).
    pub fn empty(n_o: usize, kind: BasisKind) -> Self {
        Self {
            values: Mat::zeros(n_o, 0),
            kind,
        }
    }

    pub fn n_h(&self) -> usize {
        self.values.ncols()
    }

    /// Nodal field Σ_j β_j h^(j)(x_p).
    pub fn combine(&self, beta: &[f64]) -> Vec<f64> {
        let v = &self.values;
        (0..v.nrows())
            .map(|p| (0..v.ncols()).map(|j| beta[j] * v[(p, j)]).sum())
            .collect()
    }
}

fn center_columns(m: &mut Mat<f64>) {
    let n = m.nrows() as f64;
    for j in 0..m.ncols() {
        let mean = (0..m.nrows()).map(|i| m[(i, j)]).sum::<f64>() / n;
        for i in 0..m.nrows() {
            m[(i, j)] -= mean;
        }
    }
}

/// Thin-QR orthonormalization; flips signs so that R has a positive diagonal.
fn orthonormalize(m: &Mat<f64>) -> Result<Mat<f64>> {
    let qr = m.qr();
    let r = qr.thin_R();
    let mut q = qr.compute_thin_Q();
    let rmax = (0..r.ncols()).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    for k in 0..r.ncols() {
        let d = r[(k, k)];
        if !(d.abs() > 1e-10 * rmax.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient(format!("column {k} is dependent")));
        }
        if d < 0.0 {
            for i in 0..q.nrows() {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok(q)
}

pub fn build_nonsmooth_basis(n_o: usize, n_h: usize, seed: u64) -> Result<BasisMatrix> {
    if n_h == 0 || n_h >= n_o {
        return Err(Error::InvalidParameter(format!(
            "nonsmooth basis needs 1 <= n_h < n_o (n_h = {n_h}, n_o = {n_o})"
        )));
    }
    let g = rng::normals(&mut rng::stream(seed, 0), n_o * n_h);
    let mut m = Mat::from_fn(n_o, n_h, |i, j| g[j * n_o + i]);
    center_columns(&mut m);
    Ok(BasisMatrix {
        values: orthonormalize(&m)?,
        kind: BasisKind::Nonsmooth,
    })
}

/// (m, n) pairs by shells max(m, n) = k, lexicographic within a shell.
fn mode_pairs() -> impl Iterator<Item = (usize, usize)> {
    (1usize..).flat_map(|k| {
        (1..=k).flat_map(move |m| (1..=k).filter(move |&n| m.max(n) == k).map(move |n| (m, n)))
    })
}

fn trig_product(l: usize, m: usize, n: usize, u: f64, v: f64) -> f64 {
    let (mu, nv) = (m as f64 * u, n as f64 * v);
    let c = 1.0 / PI.sqrt();
    c * match l {
        1 => mu.cos() * nv.cos(),
        2 => mu.sin() * nv.cos(),
        3 => mu.cos() * nv.sin(),
        _ => mu.sin() * nv.sin(),
    }
}

fn family_phases(family: Family) -> [usize; 4] {
    match family {
        Family::First => [1, 2, 3, 4],
        Family::Second => [2, 3, 4, 1],
    }
}

/// The first `count` raw trigonometric columns at the mesh nodes, before
/// centering and orthonormalization.
pub fn smooth_raw_columns(params: &TorusParams, count: usize, family: Family) -> Mat<f64> {
    let n_o = params.n_u * params.n_v;
    let phases = family_phases(family);
    let terms: Vec<(usize, usize, usize)> = mode_pairs()
        .flat_map(|(m, n)| phases.into_iter().map(move |l| (l, m, n)))
        .take(count)
        .collect();
    Mat::from_fn(n_o, count, |p, c| {
        let (u, v) = params.node_uv(p);
        let (l, m, n) = terms[c];
        trig_product(l, m, n, u, v)
    })
}

/// Smooth basis from trigonometric products. Raw columns that vanish or fall
/// into the span of earlier ones on the node grid (aliasing) are skipped, so
/// the enumeration continues until `n_h` independent columns are found.
pub fn build_smooth_basis(params: &TorusParams, n_h: usize, family: Family) -> Result<BasisMatrix> {
    params.validate()?;
    let n_o = params.n_u * params.n_v;
    if n_h == 0 || n_h >= n_o {
        return Err(Error::InvalidParameter(format!(
            "smooth basis needs 1 <= n_h < n_o (n_h = {n_h}, n_o = {n_o})"
        )));
    }
    let phases = family_phases(family);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(n_h);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(n_h);
    let terms = mode_pairs().flat_map(|(m, n)| phases.into_iter().map(move |l| (l, m, n)));
    for (tried, (l, m, n)) in terms.enumerate() {
        if accepted.len() == n_h {
            break;
        }
        if tried > 64 * n_o {
            return Err(Error::RankDeficient(format!(
                "only {} independent smooth columns found",
                accepted.len()
            )));
        }
        let mut col: Vec<f64> = (0..n_o)
            .map(|p| {
                let (u, v) = params.node_uv(p);
                trig_product(l, m, n, u, v)
            })
            .collect();
        let mean = col.iter().sum::<f64>() / n_o as f64;
        col.iter_mut().for_each(|x| *x -= mean);
        let raw_norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if raw_norm < 1e-8 {
            continue;
        }
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &ortho {
                let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn < 1e-8 * raw_norm {
            continue;
        }
        r.iter_mut().for_each(|x| *x /= rn);
        ortho.push(r);
        accepted.push(col);
    }
    let m = Mat::from_fn(n_o, n_h, |i, j| accepted[j][i]);
    Ok(BasisMatrix {
        values: orthonormalize(&m)?,
        kind: BasisKind::Smooth,
    })
}

/// Bias basis [h] expressed directly in free-neuron coordinates (n̂ × n_b).
#[derive(Clone, Debug)]
pub struct BiasBasis {
    pub values: Mat<f64>,
    pub identity: bool,
}

impl BiasBasis {
    pub fn n_hat(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_b(&self) -> usize {
        self.values.ncols()
    }

    /// b = [h] β.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        if self.identity {
            return beta.to_vec();
        }
        let v = &self.values;
        (0..v.nrows())
            .map(|i| (0..v.ncols()).map(|j| v[(i, j)] * beta[j]).sum())
            .collect()
    }

    /// [h]ᵀ r.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        if self.identity {
            return r.to_vec();
        }
        let v = &self.values;
        (0..v.ncols())
            .map(|j| (0..v.nrows()).map(|i| v[(i, j)] * r[i]).sum())
            .collect()
    }
}

pub fn build_bias_basis(n_hat: usize, n_b: usize, seed: u64) -> Result<BiasBasis> {
    if n_b == 0 || n_b > n_hat {
        return Err(Error::InvalidParameter(format!(
            "bias basis needs 1 <= n_b <= n_hat (n_b = {n_b}, n_hat = {n_hat})"
        )));
    }
    if n_b == n_hat {
        return Ok(BiasBasis {
            values: Mat::identity(n_hat, n_hat),
            identity: true,
        });
    }
    let g = rng::normals(&mut rng::stream(seed, 0), n_hat * n_b);
    let m = Mat::from_fn(n_hat, n_b, |i, j| g[j * n_hat + i]);
    Ok(BiasBasis {
        values: orthonormalize(&m)?,
        identity: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_orthonormal_zero_mean(m: &Mat<f64>) {
        let g = m.transpose() * m;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-10);
            }
            let mean = (0..m.nrows()).map(|p| m[(p, i)]).sum::<f64>() / m.nrows() as f64;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn nonsmooth_properties() {
        let a = build_nonsmooth_basis(1920, 10, 1).unwrap();
        check_orthonormal_zero_mean(&a.values);
        let b = build_nonsmooth_basis(1920, 10, 2).unwrap();
        check_orthonormal_zero_mean(&b.values);
        assert!((a.values[(0, 0)] - b.values[(0, 0)]).abs() > 0.0);
        let one = build_nonsmooth_basis(50, 1, 3).unwrap();
        check_orthonormal_zero_mean(&one.values);
        assert!(build_nonsmooth_basis(10, 10, 1).is_err());
    }

    #[test]
    fn mode_enumeration_order() {
        let first: Vec<_> = mode_pairs().take(9).collect();
        assert_eq!(
            first,
            vec![(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (2, 3), (3, 1), (3, 2), (3, 3)]
        );
    }

    #[test]
    fn smooth_first_raw_column() {
        let p = TorusParams::default();
        let raw = smooth_raw_columns(&p, 4, Family::First);
        for q in [0, 17, 500] {
            let (u, v) = p.node_uv(q);
            assert!((raw[(q, 0)] - u.cos() * v.cos() / PI.sqrt()).abs() < 1e-15);
            assert!((raw[(q, 1)] - u.sin() * v.cos() / PI.sqrt()).abs() < 1e-15);
        }
        let second = smooth_raw_columns(&p, 1, Family::Second);
        assert_eq!(second[(5, 0)], raw[(5, 1)]);
    }

    #[test]
    fn smooth_raw_norm_scaling() {
        // With c = 1/√π the continuous integral of |φ|² over [0, 2π]² is π
        // (not 1); the node-grid Riemann sum reproduces it exactly, so the
        // discrete squared norm is n_o π / (4π²) = n_o / (4π).
        let p = TorusParams::default();
        let raw = smooth_raw_columns(&p, 8, Family::First);
        let n_o = 1920.0;
        for j in 0..8 {
            let s: f64 = (0..1920).map(|i| raw[(i, j)].powi(2)).sum();
            assert!((s * 4.0 * PI / n_o - 1.0).abs() < 1e-10, "{j}: {s}");
        }
    }

    #[test]
    fn smooth_properties() {
        for n_h in [1, 4, 10] {
            for fam in [Family::First, Family::Second] {
                let b = build_smooth_basis(&TorusParams::default(), n_h, fam).unwrap();
                assert_eq!(b.n_h(), n_h);
                check_orthonormal_zero_mean(&b.values);
            }
        }
        // coarse grid forces aliased columns to be skipped
        let b = build_smooth_basis(&TorusParams::new(2.0, 0.7, 6, 4), 12, Family::First).unwrap();
        check_orthonormal_zero_mean(&b.values);
    }

    #[test]
    fn bias_basis() {
        let id = build_bias_basis(180, 180, 0).unwrap();
        assert!(id.identity);
        assert_eq!(id.values, Mat::<f64>::identity(180, 180));
        let one = build_bias_basis(30, 1, 5).unwrap();
        assert_eq!(one.n_b(), 1);
        let b = build_bias_basis(30, 7, 5).unwrap();
        let s = b.values.thin_svd().unwrap();
        assert!((0..7).all(|k| s.S()[k] > 1e-6));
        let beta: Vec<f64> = (0..7).map(|k| k as f64).collect();
        let back = b.apply_transpose(&b.apply(&beta));
        assert!(back.iter().zip(&beta).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(build_bias_basis(5, 6, 0).is_err());
    }
}
