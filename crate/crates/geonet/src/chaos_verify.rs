//! Hermite chaos coefficients of F(Ξ) = exp(−bΞ²), Ξ ~ N(0, 1): closed form
//! against Gauss–Hermite quadrature.

use faer::{Mat, Side};
use statrs::function::gamma::ln_gamma;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::rng;

/// √((2α)!)/α! · (−b)^α / (1 + 2b)^{α + 1/2}.
pub fn hermite_coeff_closed(b: f64, alpha: usize) -> f64 {
    let a = alpha as f64;
    let sign = if alpha % 2 == 1 { -1.0 } else { 1.0 };
    if alpha > 20 {
        let ln = 0.5 * ln_gamma(2.0 * a + 1.0) - ln_gamma(a + 1.0) + a * b.ln() - (a + 0.5) * (1.0 + 2.0 * b).ln();
        return sign * ln.exp();
    }
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    fact(2 * alpha).sqrt() / fact(alpha) * (-b).powi(alpha as i32) / (1.0 + 2.0 * b).powf(a + 0.5)
}

/// Normalized probabilists' Hermite polynomials h_0..=h_deg at x.
pub fn normalized_hermite(deg: usize, x: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(deg + 1);
    h.push(1.0);
    if deg >= 1 {
        h.push(x);
    }
    for n in 1..deg {
        let nf = n as f64;
        let next = (x * h[n] - nf.sqrt() * h[n - 1]) / (nf + 1.0).sqrt();
        h.push(next);
    }
    h
}

/// Golub–Welsch nodes and weights for ∫ g(ξ) φ(ξ) dξ with φ the standard
/// normal density; weights sum to 1.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidParameter("quadrature needs at least one node".into()));
    }
    let j = Mat::from_fn(n, n, |r, c| {
        if r.abs_diff(c) == 1 {
            (r.max(c) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = j
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let nodes: Vec<f64> = (0..n).map(|k| eig.S()[k]).collect();
    let weights: Vec<f64> = (0..n).map(|k| eig.U()[(0, k)].powi(2)).collect();
    Ok((nodes, weights))
}

/// E{exp(−bΞ²) h_degree(Ξ)} with the Gaussian factor applied pointwise at
/// the `n_quad` double-precision nodes. Not exact: for large b the integrand
/// is too peaked for 64 nodes (relative error ~5e-3 at b = 5).
pub fn hermite_coeff_quadrature_literal(b: f64, degree: usize, n_quad: usize) -> Result<f64> {
    let (x, w) = gauss_hermite(n_quad)?;
    Ok(x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * (-b * xi * xi).exp() * normalized_hermite(degree, xi)[degree])
        .sum())
}

fn dd_sqrt_table(n: usize) -> Vec<TwoFloat> {
    (0..=n).map(|k| TwoFloat::from(k as f64).sqrt()).collect()
}

/// h_0..=h_deg at x in double-double.
fn hermite_dd(deg: usize, x: TwoFloat, sq: &[TwoFloat]) -> Vec<TwoFloat> {
    let mut h = Vec::with_capacity(deg + 1);
    h.push(TwoFloat::from(1.0));
    if deg >= 1 {
        h.push(x);
    }
    for n in 1..deg {
        let next = (x * h[n] - sq[n] * h[n - 1]) / sq[n + 1];
        h.push(next);
    }
    h
}

/// Gauss–Hermite rule in double-double: Golub–Welsch nodes polished by
/// Newton steps on h_n, weights from the Christoffel sum 1/Σ_{j<n} h_j(x)².
pub fn gauss_hermite_dd(n: usize) -> Result<(Vec<TwoFloat>, Vec<TwoFloat>)> {
    let (x0, _) = gauss_hermite(n)?;
    let sq = dd_sqrt_table(n + 1);
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &x in &x0 {
        let mut x = TwoFloat::from(x);
        for _ in 0..4 {
            let h = hermite_dd(n, x, &sq);
            x -= h[n] / (sq[n] * h[n - 1]);
        }
        let h = hermite_dd(n - 1, x, &sq);
        let s = h.iter().fold(TwoFloat::from(0.0), |acc, &v| acc + v * v);
        nodes.push(x);
        weights.push(s.recip());
    }
    Ok((nodes, weights))
}

/// E{exp(−bΞ²) h_degree(Ξ)} by `n_quad`-point Gauss–Hermite quadrature.
/// The Gaussian factor is absorbed into the weight through
/// E{exp(−bΞ²) h(Ξ)} = (1 + 2b)^{−1/2} E{h(Ξ / √(1 + 2b))}, so the rule is
/// exact for degree < 2 n_quad; the sum runs in double-double because the
/// high-degree coefficients are many orders smaller than the summands.
pub fn hermite_coeff_quadrature(b: f64, degree: usize, n_quad: usize) -> Result<f64> {
    if n_quad == 0 || degree >= 2 * n_quad {
        return Err(Error::InvalidParameter(format!(
            "degree {degree} needs more than {} quadrature nodes",
            degree / 2
        )));
    }
    let (x, w) = gauss_hermite_dd(n_quad)?;
    let sq = dd_sqrt_table(degree + 1);
    let c = (TwoFloat::from(1.0) + TwoFloat::from(b) * 2.0).sqrt();
    let sum = x.iter().zip(&w).fold(TwoFloat::from(0.0), |acc, (&xi, &wi)| {
        acc + wi * hermite_dd(degree, xi / c, &sq)[degree]
    });
    Ok((sum / c).hi())
}

/// E{F²} = (1 + 4b)^{−1/2}.
pub fn second_moment(b: f64) -> f64 {
    (1.0 + 4.0 * b).powf(-0.5)
}

/// Closed-form coefficients f_0..=f_order.
pub fn coefficients(b: f64, order: usize) -> Vec<f64> {
    (0..=order).map(|a| hermite_coeff_closed(b, a)).collect()
}

/// Monte Carlo L² error between F and its truncation Σ_{α ≤ order} f_α h_{2α}.
pub fn chaos_reconstruction_error(b: f64, order: usize, n_mc: usize, seed: u64) -> f64 {
    let f = coefficients(b, order);
    let xi = rng::normals(&mut rng::stream(seed, 0), n_mc);
    let sq: f64 = xi
        .iter()
        .map(|&x| {
            let h = normalized_hermite(2 * order, x);
            let approx: f64 = f.iter().enumerate().map(|(a, c)| c * h[2 * a]).sum();
            ((-b * x * x).exp() - approx).powi(2)
        })
        .sum();
    (sq / n_mc as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChaosRow {
    pub b: f64,
    pub alpha: usize,
    pub closed: f64,
    pub quadrature: f64,
    pub rel_err: f64,
}

/// Closed form against quadrature of the degree-2α polynomial for every
/// (b, α ≤ max_alpha).
pub fn comparison_table(bs: &[f64], max_alpha: usize, n_quad: usize) -> Result<Vec<ChaosRow>> {
    let mut rows = Vec::new();
    for &b in bs {
        for alpha in 0..=max_alpha {
            let closed = hermite_coeff_closed(b, alpha);
            let quadrature = hermite_coeff_quadrature(b, 2 * alpha, n_quad)?;
            rows.push(ChaosRow {
                b,
                alpha,
                closed,
                quadrature,
                rel_err: (closed - quadrature).abs() / closed.abs(),
            });
        }
    }
    Ok(rows)
}

/// Exact truncation error² = E{F²} − Σ f_α².
pub fn truncation_error_sq(b: f64, order: usize) -> f64 {
    second_moment(b) - coefficients(b, order).iter().map(|c| c * c).sum::<f64>()
}
