//! Random synaptic weights from the geometric kernel and field similarity.

use faer::Mat;

use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::topology::EdgeMask;

#[derive(Clone, Debug)]
pub struct WeightRealization {
    pub dense: Mat<f64>,
    pub sparse: Csr,
    pub germ_index: usize,
}

/// S_i = ⟨ψ^m(x^i), η⟩.
pub fn field_at_neurons(psi: &[Vec<f64>], eta: &[f64]) -> Result<Vec<f64>> {
    psi.iter()
        .map(|row| {
            if row.len() != eta.len() {
                return Err(Error::Shape(format!(
                    "eta has length {}, expected {}",
                    eta.len(),
                    row.len()
                )));
            }
            Ok(row.iter().zip(eta).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Exact field scale σ_S = (N⁻¹ Σ_i ‖ψ^m(x^i)‖²)^{1/2}.
pub fn sigma_s(psi: &[Vec<f64>]) -> Result<f64> {
    let n = psi.len() as f64;
    let s2 = psi
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n;
    if !(s2 > 0.0) {
        return Err(Error::DegenerateField);
    }
    Ok(s2.sqrt())
}

fn similarity(ds: f64, zeta: f64, sigma: f64) -> f64 {
    (-ds * ds / (2.0 * zeta * zeta * sigma * sigma)).exp()
}

pub fn weight_matrix(w_g: &Mat<f64>, s: &[f64], zeta: f64, sigma: f64) -> Result<Mat<f64>> {
    if !(zeta > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "zeta_s and sigma_S must be positive (zeta_s = {zeta}, sigma_S = {sigma})"
        )));
    }
    let n = w_g.nrows();
    Ok(Mat::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            w_g[(i, j)] * similarity(s[i] - s[j], zeta, sigma)
        }
    }))
}

pub fn sparsify(dense: &Mat<f64>, mask: &EdgeMask) -> Result<Csr> {
    let n = dense.nrows();
    if mask.n != n || dense.ncols() != n {
        return Err(Error::Shape("mask and weight matrix sizes differ".into()));
    }
    let mut t = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if mask.get(i, j) {
                t.push((i, j, dense[(i, j)]));
            }
        }
    }
    Ok(Csr::from_triplets(n, n, &t))
}

/// mask ⊙ W evaluated only on the mask edges; equals
/// `sparsify(weight_matrix(..), mask)` without forming the dense matrix.
pub fn sparse_weights(
    w_g: &Mat<f64>,
    edges: &[(usize, usize)],
    s: &[f64],
    zeta: f64,
    sigma: f64,
) -> Csr {
    let n = w_g.nrows();
    let mut t = Vec::with_capacity(2 * edges.len());
    for &(i, j) in edges {
        let w = w_g[(i, j)] * similarity(s[i] - s[j], zeta, sigma);
        t.push((i, j, w));
        t.push((j, i, w));
    }
    Csr::from_triplets(n, n, &t)
}

pub fn realize(
    w_g: &Mat<f64>,
    mask: &EdgeMask,
    s: &[f64],
    zeta: f64,
    sigma: f64,
    germ_index: usize,
) -> Result<WeightRealization> {
    let dense = weight_matrix(w_g, s, zeta, sigma)?;
    let sparse = sparsify(&dense, mask)?;
    Ok(WeightRealization {
        dense,
        sparse,
        germ_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kernel(n: usize) -> Mat<f64> {
        Mat::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (-((i as f64 - j as f64).powi(2)) / 9.0).exp()
            }
        })
    }

    #[test]
    fn field_values() {
        let psi = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        assert_eq!(field_at_neurons(&psi, &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(field_at_neurons(&psi, &[0.0, 1.0]).unwrap(), vec![0.0, 1.0, 0.5]);
        assert!(field_at_neurons(&psi, &[1.0]).is_err());
    }

    #[test]
    fn sigma_cases() {
        assert_eq!(sigma_s(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1.0);
        assert!(matches!(sigma_s(&vec![vec![0.0; 3]; 4]), Err(Error::DegenerateField)));
    }

    #[test]
    fn weight_arithmetic() {
        let w_g = Mat::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 0.5 });
        let w = weight_matrix(&w_g, &[0.0, 1.0], 1.0, 1.0).unwrap();
        assert!((w[(0, 1)] - 0.5 * (-0.5f64).exp()).abs() < 1e-16);
        assert!((w[(0, 1)] - 0.303_265_329_856_316_7).abs() < 1e-15);
        let k = kernel(6);
        let flat = weight_matrix(&k, &[0.3; 6], 0.2, 1.0).unwrap();
        assert_eq!(flat, k);
        let s: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let wide = weight_matrix(&k, &s, 1e6, 1.0).unwrap();
        assert!((&wide - &k).norm_max() < 1e-9);
    }

    #[test]
    fn sparsify_cases() {
        let k = kernel(5);
        let all = EdgeMask::from_fn(5, |_, _| true);
        assert_eq!(sparsify(&k, &all).unwrap().to_dense(), k);
        let none = EdgeMask::from_fn(5, |_, _| false);
        assert_eq!(sparsify(&k, &none).unwrap().nnz(), 0);
        let some = EdgeMask::from_fn(5, |i, j| i.abs_diff(j) == 1);
        assert_eq!(sparsify(&k, &some).unwrap().nnz(), 2 * some.edge_count());
    }

    proptest! {
        #[test]
        fn fast_path_matches_dense(s in proptest::collection::vec(-2.0f64..2.0, 8), zeta in 0.3f64..2.0) {
            let k = kernel(8);
            let mask = EdgeMask::from_fn(8, |i, j| (i * 3 + j * 3) % 4 != 1);
            let slow = sparsify(&weight_matrix(&k, &s, zeta, 0.7).unwrap(), &mask).unwrap();
            let fast = sparse_weights(&k, &mask.edges(), &s, zeta, 0.7);
            prop_assert_eq!(slow, fast);
            let d = weight_matrix(&k, &s, zeta, 0.7).unwrap();
            for i in 0..8 {
                prop_assert_eq!(d[(i, i)], 0.0);
                for j in 0..8 {
                    prop_assert_eq!(d[(i, j)], d[(j, i)]);
                    if i != j {
                        prop_assert!(d[(i, j)] > 0.0 && d[(i, j)] <= 1.0);
                    }
                }
            }
        }
    }
}
