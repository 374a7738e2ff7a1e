//! Partitioned network equation â = f(Ŵâ + b̂) solved by under-relaxed
//! fixed-point iteration.

use faer::Mat;

use crate::error::{Error, Result};
use crate::sparse::Csr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// x / (1 + |x|)
    Softsign,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softsign => x / (1.0 + x.abs()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
        }
    }
}

/// Index bookkeeping for the input/free split. All indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub n: usize,
    pub j_in: Vec<usize>,
    /// Sorted complement of `j_in`.
    pub j_free: Vec<usize>,
    /// Position of each output neuron inside `j_free`.
    pub out_pos: Vec<usize>,
}

impl Partition {
    pub fn n_hat(&self) -> usize {
        self.j_free.len()
    }

    pub fn gather_free(&self, v: &[f64]) -> Vec<f64> {
        self.j_free.iter().map(|&i| v[i]).collect()
    }

    pub fn gather_in(&self, v: &[f64]) -> Vec<f64> {
        self.j_in.iter().map(|&i| v[i]).collect()
    }

    /// A = Ôᵀ Â + (O^in)ᵀ x.
    pub fn scatter(&self, free: &[f64], x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for (&i, &a) in self.j_free.iter().zip(free) {
            v[i] = a;
        }
        for (&i, &a) in self.j_in.iter().zip(x) {
            v[i] = a;
        }
        v
    }
}

pub fn build_partition(j_in: &[usize], j_out: &[usize], n: usize) -> Result<Partition> {
    let mut role = vec![0u8; n];
    for &i in j_in {
        if i >= n || role[i] != 0 {
            return Err(Error::InvalidParameter(format!("bad or repeated input index {i}")));
        }
        role[i] = 1;
    }
    let j_free: Vec<usize> = (0..n).filter(|&i| role[i] == 0).collect();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in j_free.iter().enumerate() {
        pos[i] = k;
    }
    let mut out_pos = Vec::with_capacity(j_out.len());
    for &i in j_out {
        if i >= n || role[i] != 0 {
            return Err(Error::InvalidParameter(format!(
                "output index {i} is out of range or overlaps the inputs"
            )));
        }
        role[i] = 2;
        out_pos.push(pos[i]);
    }
    Ok(Partition {
        n,
        j_in: j_in.to_vec(),
        j_free,
        out_pos,
    })
}

/// Ŵ = Ô W Ôᵀ and the input coupling Ô W (O^in)ᵀ for one weight realization.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub w_hat: Csr,
    pub w_in: Csr,
}

impl ReducedSystem {
    pub fn new(w_sp: &Csr, part: &Partition) -> Result<Self> {
        if w_sp.nrows != part.n || w_sp.ncols != part.n {
            return Err(Error::Shape(format!(
                "weight matrix is {}×{}, partition has N = {}",
                w_sp.nrows, w_sp.ncols, part.n
            )));
        }
        let mut free_pos = vec![usize::MAX; part.n];
        let mut in_pos = vec![usize::MAX; part.n];
        for (k, &i) in part.j_free.iter().enumerate() {
            free_pos[i] = k;
        }
        for (k, &i) in part.j_in.iter().enumerate() {
            in_pos[i] = k;
        }
        let (mut tf, mut ti) = (Vec::new(), Vec::new());
        for (r, &i) in part.j_free.iter().enumerate() {
            for (j, v) in w_sp.row(i) {
                if free_pos[j] != usize::MAX {
                    tf.push((r, free_pos[j], v));
                } else {
                    ti.push((r, in_pos[j], v));
                }
            }
        }
        let nh = part.n_hat();
        Ok(Self {
            w_hat: Csr::from_triplets(nh, nh, &tf),
            w_in: Csr::from_triplets(nh, part.j_in.len(), &ti),
        })
    }

    /// b̂ = Ô W (O^in)ᵀ x + bias.
    pub fn rhs(&self, x: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w_in.ncols || bias.len() != self.w_hat.nrows {
            return Err(Error::Shape(format!(
                "x has length {} (expected {}), bias has length {} (expected {})",
                x.len(),
                self.w_in.ncols,
                bias.len(),
                self.w_hat.nrows
            )));
        }
        let mut b = self.w_in.mul_vec(x);
        b.iter_mut().zip(bias).for_each(|(b, c)| *b += c);
        Ok(b)
    }
}

pub fn assemble_system(w_sp: &Csr, part: &Partition, x: &[f64], bias: &[f64]) -> Result<(Csr, Vec<f64>)> {
    let r = ReducedSystem::new(w_sp, part)?;
    let b = r.rhs(x, bias)?;
    Ok((r.w_hat, b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveSettings {
    pub alpha: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub activation: Activation,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            eps: 0.01,
            max_iter: 500,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Runs the iteration and reports, without treating non-convergence as an
/// error. Fails only on non-finite values or iterates leaving [−1, 1].
pub fn iterate(w_hat: &Csr, b_hat: &[f64], s: &SolveSettings) -> Result<(Vec<f64>, SolveReport)> {
    if !(s.alpha > 0.0 && s.alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {} outside (0, 1]", s.alpha)));
    }
    let n = b_hat.len();
    let mut a = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=s.max_iter {
        w_hat.mul_vec_into(&a, &mut z);
        let mut step2 = 0.0;
        for i in 0..n {
            let next = (1.0 - s.alpha) * a[i] + s.alpha * s.activation.eval(z[i] + b_hat[i]);
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("iterate {it}, component {i}")));
            }
            if next.abs() > 1.0 {
                return Err(Error::NonFinite(format!("iterate {it} left [-1, 1] at component {i}")));
            }
            step2 += (next - a[i]) * (next - a[i]);
            a[i] = next;
        }
        residual = step2.sqrt();
        if residual < s.eps {
            return Ok((
                a,
                SolveReport {
                    iterations: it,
                    residual,
                    converged: true,
                },
            ));
        }
    }
    Ok((
        a,
        SolveReport {
            iterations: s.max_iter,
            residual,
            converged: false,
        },
    ))
}

pub fn solve_fixed_point(w_hat: &Csr, b_hat: &[f64], s: &SolveSettings) -> Result<(Vec<f64>, SolveReport)> {
    let (a, rep) = iterate(w_hat, b_hat, s)?;
    if !rep.converged {
        return Err(Error::NotConverged {
            iterations: rep.iterations,
            residual: rep.residual,
        });
    }
    Ok((a, rep))
}

pub fn extract_output(a_hat: &[f64], part: &Partition) -> Vec<f64> {
    part.out_pos.iter().map(|&k| a_hat[k]).collect()
}

/// Spectral radius of D_f Ŵ by 200 power iterations on (D_f Ŵ)².
pub fn spectral_diagnostic(w_hat: &Csr, a_hat: &[f64], b_hat: &[f64], act: Activation) -> f64 {
    let n = a_hat.len();
    if n == 0 {
        return 0.0;
    }
    let z = w_hat.mul_vec(a_hat);
    let d: Vec<f64> = (0..n).map(|i| act.derivative(z[i] + b_hat[i])).collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut y = w_hat.mul_vec(v);
        y.iter_mut().zip(&d).for_each(|(y, d)| *y *= d);
        y
    };
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut rho = 0.0;
    for _ in 0..200 {
        let w = apply(&apply(&v));
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        rho = nw.sqrt();
        v = w.into_iter().map(|x| x / nw).collect();
    }
    rho
}

/// One column per weight realization: outputs of the solved network.
pub fn forward_ensemble(
    part: &Partition,
    systems: &[ReducedSystem],
    x: &[f64],
    bias: &[f64],
    s: &SolveSettings,
) -> Result<Mat<f64>> {
    let mut out = Mat::zeros(part.out_pos.len(), systems.len());
    for (l, sys) in systems.iter().enumerate() {
        let b = sys.rhs(x, bias)?;
        let (a, _) = solve_fixed_point(&sys.w_hat, &b, s)?;
        for (k, &p) in part.out_pos.iter().enumerate() {
            out[(k, l)] = a[p];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random_symmetric(n: usize, density: f64, scale: f64, seed: u64) -> Csr {
        let mut r = rng::stream(seed, 0);
        let u = rng::uniforms(&mut r, n * n);
        let mut t = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if u[i * n + j] < density {
                    let w = scale * u[j * n + i];
                    t.push((i, j, w));
                    t.push((j, i, w));
                }
            }
        }
        Csr::from_triplets(n, n, &t)
    }

    #[test]
    fn partition_basics() {
        let p = build_partition(&[1, 4], &[0], 5).unwrap();
        assert_eq!(p.j_free, vec![0, 2, 3]);
        assert_eq!(p.n_hat(), 3);
        assert!(build_partition(&[1, 1], &[], 5).is_err());
        assert!(build_partition(&[1], &[1], 5).is_err());
        assert!(build_partition(&[7], &[], 5).is_err());
    }

    proptest! {
        #[test]
        fn scatter_gather_round_trip(v in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let p = build_partition(&[8, 2, 5], &[0, 1], 9).unwrap();
            let back = p.scatter(&p.gather_free(&v), &p.gather_in(&v));
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn assemble_matches_dense_permutation() {
        let n = 7;
        let w = random_symmetric(n, 0.6, 0.9, 4);
        let p = build_partition(&[5, 1], &[6, 0], n).unwrap();
        let x = [0.3, -0.8];
        let bias: Vec<f64> = (0..5).map(|k| 0.1 * k as f64).collect();
        let (wh, b) = assemble_system(&w, &p, &x, &bias).unwrap();
        let o_hat = Mat::from_fn(5, n, |r, c| if p.j_free[r] == c { 1.0 } else { 0.0 });
        let o_in = Mat::from_fn(2, n, |r, c| if p.j_in[r] == c { 1.0 } else { 0.0 });
        let wd = w.to_dense();
        let want_w = &o_hat * &wd * o_hat.transpose();
        assert!((wh.to_dense() - &want_w).norm_max() < 1e-15);
        let xm = Mat::from_fn(2, 1, |r, _| x[r]);
        let want_b = &o_hat * &wd * o_in.transpose() * &xm;
        for k in 0..5 {
            assert!((b[k] - want_b[(k, 0)] - bias[k]).abs() < 1e-15);
        }
        let zero = Csr::from_triplets(n, n, &[]);
        let (wz, bz) = assemble_system(&zero, &p, &x, &bias).unwrap();
        assert_eq!(wz.nnz(), 0);
        assert_eq!(bz, bias);
        let (_, b0) = assemble_system(&w, &p, &[0.0, 0.0], &[0.0; 5]).unwrap();
        assert!(b0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trivial_solves() {
        let z = Csr::from_triplets(3, 3, &[]);
        let b = [0.5, -1.0, 2.0];
        let s = SolveSettings { alpha: 1.0, eps: 1e-12, ..Default::default() };
        let (a, rep) = solve_fixed_point(&z, &b, &s).unwrap();
        assert!(rep.iterations <= 2);
        assert!(a.iter().zip(&b).all(|(a, b)| (a - b.tanh()).abs() < 1e-15));
        let (a0, _) = solve_fixed_point(&z, &[0.0; 3], &s).unwrap();
        assert_eq!(a0, vec![0.0; 3]);
        let bad = SolveSettings { alpha: 0.0, ..s };
        assert!(solve_fixed_point(&z, &b, &bad).is_err());
        let starve = SolveSettings { alpha: 0.01, eps: 1e-14, max_iter: 3, ..s };
        assert!(matches!(
            solve_fixed_point(&z, &b, &starve),
            Err(Error::NotConverged { iterations: 3, .. })
        ));
    }

    #[test]
    fn residual_contract_and_range() {
        let s = SolveSettings::default();
        for seed in 0..20 {
            let w = random_symmetric(180, 0.3, 0.2, seed);
            let b: Vec<f64> = rng::normals(&mut rng::stream(seed, 1), 180);
            let (a, rep) = solve_fixed_point(&w, &b, &s).unwrap();
            assert!(rep.iterations < 500);
            let z = w.mul_vec(&a);
            let res: f64 = (0..180).map(|i| (a[i] - (z[i] + b[i]).tanh()).powi(2)).sum::<f64>().sqrt();
            assert!(res <= s.eps / s.alpha * (1.0 + 1e-12));
            assert!(a.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn softsign_variant() {
        let w = random_symmetric(20, 0.5, 0.2, 9);
        let b = vec![0.4; 20];
        let s = SolveSettings { activation: Activation::Softsign, eps: 1e-10, max_iter: 5000, ..Default::default() };
        let (a, _) = solve_fixed_point(&w, &b, &s).unwrap();
        let z = w.mul_vec(&a);
        for i in 0..20 {
            let want = (z[i] + b[i]) / (1.0 + (z[i] + b[i]).abs());
            assert!((a[i] - want).abs() < 1e-8);
        }
        assert!((Activation::Softsign.derivative(1.0) - 0.25).abs() < 1e-16);
    }

    #[test]
    fn spectral_cases() {
        let z = Csr::from_triplets(3, 3, &[]);
        assert_eq!(spectral_diagnostic(&z, &[0.0; 3], &[0.0; 3], Activation::Tanh), 0.0);
        let w = Csr::from_triplets(2, 2, &[(0, 1, 0.5), (1, 0, 0.5)]);
        let rho = spectral_diagnostic(&w, &[0.0; 2], &[0.0; 2], Activation::Tanh);
        assert!((rho - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ensemble_columns() {
        let p = build_partition(&[0], &[2, 1], 3).unwrap();
        let zero = ReducedSystem::new(&Csr::from_triplets(3, 3, &[]), &p).unwrap();
        let s = SolveSettings { alpha: 1.0, eps: 1e-12, ..Default::default() };
        let out = forward_ensemble(&p, &[zero], &[0.7], &[0.2, -0.3], &s).unwrap();
        assert_eq!(out.ncols(), 1);
        assert!((out[(0, 0)] - (-0.3f64).tanh()).abs() < 1e-15);
        assert!((out[(1, 0)] - 0.2f64.tanh()).abs() < 1e-15);
        let w = random_symmetric(3, 1.0, 0.5, 2);
        let r = ReducedSystem::new(&w, &p).unwrap();
        let two = forward_ensemble(&p, &[r.clone(), r], &[0.7], &[0.2, -0.3], &s).unwrap();
        assert_eq!(two.col(0), two.col(1));
        let a = extract_output(&[0.1, 0.2], &p);
        assert_eq!(a, vec![0.2, 0.1]);
    }
}
