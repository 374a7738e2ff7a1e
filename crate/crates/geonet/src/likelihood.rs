//! Gaussian KDE of the network's conditional output law and the NLL loss.

use std::f64::consts::PI;

use faer::Mat;

use crate::error::{Error, Result};

/// s_SB = (4 / (n_sim (2 + n_out)))^{1/(4 + n_out)}.
pub fn silverman_bandwidth(n_sim: usize, n_out: usize) -> f64 {
    let (n, d) = (n_sim as f64, n_out as f64);
    (4.0 / (n * (2.0 + d))).powf(1.0 / (4.0 + d))
}

/// Unbiased standard deviation floored at 1e-8 · max(1, max |x|).
pub fn floored_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let floor = 1e-8 * x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    var.sqrt().max(floor)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pairwise (tree) summation; the reduction order depends only on length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KdeMode {
    /// Joint product kernel with one global Silverman bandwidth.
    #[default]
    Joint,
    /// Product of univariate KDEs, each with its own 1-D Silverman bandwidth.
    ProductOfMarginals,
}

#[derive(Clone, Debug)]
pub struct KdeModel {
    /// Row-major n_sim × n_out sample table.
    samples: Vec<f64>,
    pub n_sim: usize,
    pub n_out: usize,
    pub per_component_std: Vec<f64>,
    pub bandwidth: f64,
    pub mode: KdeMode,
}

impl KdeModel {
    /// `samples` is n_out × n_sim, one realization per column.
    pub fn new(samples: &Mat<f64>, mode: KdeMode) -> Result<Self> {
        let (n_out, n_sim) = (samples.nrows(), samples.ncols());
        if n_sim < 2 || n_out == 0 {
            return Err(Error::InvalidParameter(format!(
                "KDE needs n_sim >= 2 and n_out >= 1 (n_sim = {n_sim}, n_out = {n_out})"
            )));
        }
        let std = (0..n_out)
            .map(|k| floored_std(&(0..n_sim).map(|l| samples[(k, l)]).collect::<Vec<_>>()))
            .collect();
        let mut flat = Vec::with_capacity(n_out * n_sim);
        for l in 0..n_sim {
            flat.extend((0..n_out).map(|k| samples[(k, l)]));
        }
        let bandwidth = match mode {
            KdeMode::Joint => silverman_bandwidth(n_sim, n_out),
            KdeMode::ProductOfMarginals => silverman_bandwidth(n_sim, 1),
        };
        Ok(Self {
            samples: flat,
            n_sim,
            n_out,
            per_component_std: std,
            bandwidth,
            mode,
        })
    }

    pub fn sample(&self, l: usize) -> &[f64] {
        &self.samples[l * self.n_out..(l + 1) * self.n_out]
    }

    fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_component_std.iter().map(|s| s * self.bandwidth)
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        match self.mode {
            KdeMode::Joint => {
                let inv: Vec<f64> = self.scales().map(|h| 1.0 / h).collect();
                let terms: Vec<f64> = (0..self.n_sim)
                    .map(|l| {
                        let s = self.sample(l);
                        -0.5 * (0..self.n_out)
                            .map(|k| {
                                let z = (y[k] - s[k]) * inv[k];
                                z * z
                            })
                            .sum::<f64>()
                    })
                    .collect();
                let norm: f64 = self.scales().map(|h| ((2.0 * PI).sqrt() * h).ln()).sum();
                log_sum_exp(&terms) - (self.n_sim as f64).ln() - norm
            }
            KdeMode::ProductOfMarginals => (0..self.n_out).map(|k| self.marginal_log_density(k, y[k])).sum(),
        }
    }

    /// Component-k marginal of the mixture (a 1-D mixture with the same scales).
    pub fn marginal_log_density(&self, k: usize, y: f64) -> f64 {
        let h = self.per_component_std[k] * self.bandwidth;
        let terms: Vec<f64> = (0..self.n_sim)
            .map(|l| {
                let z = (y - self.sample(l)[k]) / h;
                -0.5 * z * z
            })
            .collect();
        log_sum_exp(&terms) - (self.n_sim as f64).ln() - ((2.0 * PI).sqrt() * h).ln()
    }
}

/// −Σ log p, summed pairwise.
pub fn nll(log_densities: &[f64]) -> f64 {
    -pairwise_sum(log_densities)
}
