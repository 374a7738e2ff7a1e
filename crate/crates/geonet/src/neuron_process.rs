//! Neuron placement: intensity Λ = ‖ψ^m‖² and weighted CDF inversion over
//! area-uniform candidates.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, SurfacePoint};
use crate::latent_field::{psi_at, ReducedField};

pub use crate::geometry::invert_cumulative as cdf_invert;

#[derive(Clone, Debug)]
pub struct NeuronSet {
    pub points: Vec<SurfacePoint>,
    /// Candidate index each neuron was drawn from.
    pub candidate_index: Vec<usize>,
    /// N rows of ψ^m(x^i).
    pub psi: Vec<Vec<f64>>,
    pub intensity_at_candidates: Vec<f64>,
    /// max_j Λ(z^j); diagnostic only.
    pub lambda_max: f64,
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn intensity(field: &ReducedField, mesh: &Mesh, p: &SurfacePoint) -> Result<f64> {
    Ok(psi_at(field, mesh, p)?.iter().map(|v| v * v).sum())
}

/// Draws `n` distinct candidates with probability ∝ Λ. `germ` drives the
/// primary draws; duplicates consume entries of `redraw` in order.
pub fn sample_neurons(
    mesh: &Mesh,
    candidates: &[SurfacePoint],
    field: &ReducedField,
    n: usize,
    germ: &[f64],
    redraw: &[f64],
) -> Result<NeuronSet> {
    if germ.len() != n {
        return Err(Error::Shape(format!("germ has length {}, expected {n}", germ.len())));
    }
    if n > candidates.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot draw {n} neurons from {} candidates",
            candidates.len()
        )));
    }
    let lam: Vec<f64> = candidates
        .iter()
        .map(|p| intensity(field, mesh, p))
        .collect::<Result<_>>()?;
    let mut cum = Vec::with_capacity(lam.len());
    let mut acc = 0.0;
    for &l in &lam {
        acc += l;
        cum.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::DegenerateIntensity);
    }
    let chosen = draw_distinct(&cum, germ, redraw)?;
    let points: Vec<SurfacePoint> = chosen.iter().map(|&j| candidates[j]).collect();
    let psi = points
        .iter()
        .map(|p| psi_at(field, mesh, p))
        .collect::<Result<_>>()?;
    Ok(NeuronSet {
        points,
        candidate_index: chosen,
        psi,
        lambda_max: lam.iter().copied().fold(0.0, f64::max),
        intensity_at_candidates: lam,
    })
}

/// CDF inversion with rejection of repeated indices.
pub fn draw_distinct(cumulative: &[f64], germ: &[f64], redraw: &[f64]) -> Result<Vec<usize>> {
    let mut seen = HashSet::with_capacity(germ.len());
    let mut out = Vec::with_capacity(germ.len());
    let mut extra = redraw.iter();
    for &u in germ {
        let mut j = cdf_invert(cumulative, u);
        while !seen.insert(j) {
            match extra.next() {
                Some(&v) => j = cdf_invert(cumulative, v),
                None => {
                    return Err(Error::DistinctExhausted {
                        requested: germ.len(),
                        selected: out.len(),
                    })
                }
            }
        }
        out.push(j);
    }
    Ok(out)
}
