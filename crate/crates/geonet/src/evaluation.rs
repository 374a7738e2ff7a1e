//! Validation of a trained model on held-out data: test NLL, the overfitting
//! ratio, confidence-interval discrepancies against a training-data
//! conditional KDE, CRPS scores and conditional pdf curves.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::data_io::{Dataset, ModelBundle};
use crate::error::{Error, Result};
use crate::likelihood::{floored_std, log_sum_exp, nll, silverman_bandwidth, KdeModel};
use crate::rng;
use crate::solver::{forward_ensemble, ReducedSystem};
use crate::training::{Architecture, Context};

/// Stream id of the weight germs used at evaluation time.
const EVAL_ETA_STREAM: u64 = 8;

/// Streams at or above this drive CRPS^train sampling, one per (point, component).
const TRAIN_SAMPLE_BASE: u64 = 1 << 40;

/// (j_min, j_max), 1-based order-statistic indices of the empirical interval.
pub fn ci_indices(n: usize, p_c: f64) -> (usize, usize) {
    let nf = n as f64;
    let lo = ((nf * (1.0 - p_c) / 2.0).ceil() as usize).max(1);
    let hi = ((nf * (1.0 + p_c) / 2.0).floor() as usize).min(n);
    (lo, hi.max(lo))
}

/// Empirical p_c interval from unsorted samples.
pub fn empirical_ci(samples: &[f64], p_c: f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = ci_indices(s.len(), p_c);
    (s[lo - 1], s[hi - 1])
}

/// |(n_test/n_d)·NLL_opt − NLL_test| / |NLL_test|.
pub fn cr_overfit(nll_train_opt: f64, nll_test: f64, n_d: usize, n_test: usize) -> Result<f64> {
    if nll_test == 0.0 || n_d == 0 {
        return Err(Error::InvalidParameter(
            "overfitting ratio needs a nonzero test NLL and n_d > 0".into(),
        ));
    }
    Ok(((n_test as f64 / n_d as f64) * nll_train_opt - nll_test).abs() / nll_test.abs())
}

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// A weighted one-dimensional Gaussian mixture with a common scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture1d {
    pub centers: Vec<f64>,
    /// Nonnegative, summing to 1.
    pub weights: Vec<f64>,
    pub scale: f64,
}

impl Mixture1d {
    pub fn pdf(&self, y: f64) -> f64 {
        let c = 1.0 / ((2.0 * PI).sqrt() * self.scale);
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let z = (y - m) / self.scale;
                w * c * (-0.5 * z * z).exp()
            })
            .sum()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w * phi((y - m) / self.scale))
            .sum()
    }

    /// Bracket [min − 6h, max + 6h] used for quantile inversion.
    pub fn bracket(&self) -> (f64, f64) {
        let lo = self.centers.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo - 6.0 * self.scale, hi + 6.0 * self.scale)
    }

    /// Inverse CDF by bisection, to 1e-8 in probability.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        let (mut lo, mut hi) = self.bracket();
        if !(self.cdf(lo) <= p && p <= self.cdf(hi)) {
            return Err(Error::InvalidParameter(format!(
                "probability {p} is not bracketed by [{lo}, {hi}]"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = self.cdf(mid);
            if (f - p).abs() < 1e-8 {
                return Ok(mid);
            }
            if f < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// One draw: kernel chosen by weight from `u`, offset by `z` scales.
    pub fn sample(&self, u: f64, z: f64) -> f64 {
        let mut acc = 0.0;
        let target = u * self.weights.iter().sum::<f64>();
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if acc > target {
                j = i;
                break;
            }
        }
        self.centers[j] + self.scale * z
    }
}

/// p_c interval of a mixture by numerical inversion of its CDF.
pub fn gkde_ci(mix: &Mixture1d, p_c: f64) -> Result<(f64, f64)> {
    Ok((mix.quantile((1.0 - p_c) / 2.0)?, mix.quantile((1.0 + p_c) / 2.0)?))
}

/// Conditional density of each output component given x, estimated from
/// training pairs: a Gaussian product kernel in x gives Nadaraya–Watson
/// weights over the training rows, and each component is the weighted
/// mixture of 1-D kernels at the training outputs.
#[derive(Clone, Debug)]
pub struct ConditionalKde {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    /// Per-input kernel widths s_x·std_j.
    pub hx: Vec<f64>,
    /// Per-output kernel widths s_1·std_k.
    pub hy: Vec<f64>,
}

impl ConditionalKde {
    pub fn new(train: &Dataset) -> Result<Self> {
        train.validate()?;
        let n = train.len();
        if n < 2 {
            return Err(Error::InvalidParameter("conditional KDE needs at least 2 training rows".into()));
        }
        let sx = silverman_bandwidth(n, train.n_in());
        let sy = silverman_bandwidth(n, 1);
        let col = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
        Ok(Self {
            hx: (0..train.n_in()).map(|j| sx * floored_std(&col(&train.inputs, j))).collect(),
            hy: (0..train.n_out()).map(|k| sy * floored_std(&col(&train.outputs, k))).collect(),
            x: train.inputs.clone(),
            y: train.outputs.clone(),
        })
    }

    /// Normalized Nadaraya–Watson weights of the training rows at x.
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .x
            .iter()
            .map(|xi| {
                -0.5 * xi
                    .iter()
                    .zip(x)
                    .zip(&self.hx)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let z = log_sum_exp(&logs);
        logs.iter().map(|l| (l - z).exp()).collect()
    }

    pub fn component(&self, x: &[f64], k: usize) -> Mixture1d {
        self.component_with(self.weights(x), k)
    }

    fn component_with(&self, weights: Vec<f64>, k: usize) -> Mixture1d {
        Mixture1d {
            centers: self.y.iter().map(|r| r[k]).collect(),
            weights,
            scale: self.hy[k],
        }
    }
}

/// Monte Carlo CRPS: mean|y − obs| − (1/(2n²)) ΣΣ|y − y'|.
pub fn crps_mc(samples: &[f64], obs: f64) -> f64 {
    let n = samples.len() as f64;
    let first = samples.iter().map(|y| (y - obs).abs()).sum::<f64>() / n;
    // ΣΣ|y − y'| = 2 Σ_i (2i − n + 1) (y_(i) − y_(0)) over the sorted sample (0-based i)
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pair: f64 = s
        .iter()
        .enumerate()
        .map(|(i, y)| (2.0 * i as f64 - n + 1.0) * (y - s[0]))
        .sum::<f64>()
        * 2.0;
    first - pair / (2.0 * n * n)
}

/// Mean of 2‖a−b‖/‖a+b‖ over points; points with ‖a+b‖ = 0 are excluded
/// and counted.
pub fn cr_bounds(ann: &[Vec<f64>], train: &[Vec<f64>]) -> (f64, usize) {
    let mut terms = Vec::new();
    let mut excluded = 0;
    for (a, b) in ann.iter().zip(train) {
        let diff = a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let sum = a.iter().zip(b).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        if sum == 0.0 {
            excluded += 1;
        } else {
            terms.push(2.0 * diff / sum);
        }
    }
    (mean(&terms), excluded)
}

/// Mean of 2|a−b|/(a+b) over every (point, component); zero sums are
/// excluded and counted.
pub fn cr_crps(ann: &[Vec<f64>], train: &[Vec<f64>]) -> (f64, usize) {
    let mut terms = Vec::new();
    let mut excluded = 0;
    for (a, b) in ann.iter().zip(train) {
        for (a, b) in a.iter().zip(b) {
            if a + b == 0.0 {
                excluded += 1;
            } else {
                terms.push(2.0 * (a - b).abs() / (a + b));
            }
        }
    }
    (mean(&terms), excluded)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The trained network rebuilt from a model bundle, with fresh weight germs.
pub struct Predictor {
    pub ctx: Context,
    pub arch: Architecture,
    pub systems: Vec<ReducedSystem>,
    pub bias: Vec<f64>,
}

impl Predictor {
    pub fn from_bundle(m: &ModelBundle) -> Result<Self> {
        let ctx = Context::new(m.config.clone(), m.germs.clone())?;
        let arch = ctx.architecture(&m.theta, Some(&m.io))?;
        let mut r = rng::stream(m.germs.seed, EVAL_ETA_STREAM);
        let etas: Vec<Vec<f64>> = (0..ctx.cfg.n_sim).map(|_| rng::normals(&mut r, ctx.cfg.m)).collect();
        let systems = arch.systems(m.theta.zeta_s, &etas)?;
        let bias = ctx.bias_basis.apply(&m.theta.beta);
        Ok(Self {
            ctx,
            arch,
            systems,
            bias,
        })
    }

    /// n_out × n_sim output realizations at x.
    pub fn ensemble(&self, x: &[f64]) -> Result<Mat<f64>> {
        forward_ensemble(&self.arch.partition, &self.systems, x, &self.bias, &self.ctx.cfg.solve_settings())
    }

    pub fn kde(&self, x: &[f64]) -> Result<KdeModel> {
        KdeModel::new(&self.ensemble(x)?, self.ctx.cfg.kde_mode)
    }
}

/// −Σ log p^ANN(y | x) over the test rows.
pub fn test_nll(p: &Predictor, test: &Dataset) -> Result<f64> {
    let logs: Vec<f64> = test
        .inputs
        .par_iter()
        .zip(&test.outputs)
        .map(|(x, y)| Ok(p.kde(x)?.log_density(y)))
        .collect::<Result<_>>()?;
    Ok(nll(&logs))
}

/// Per-test-point diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PointReport {
    pub log_density: f64,
    pub ci_ann: Vec<(f64, f64)>,
    pub ci_train: Vec<(f64, f64)>,
    pub crps_ann: Vec<f64>,
    pub crps_train: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_test: usize,
    pub p_c: f64,
    pub nll_test: f64,
    pub nll_train_opt: f64,
    pub cr_o: f64,
    pub cr_alpha: f64,
    pub cr_beta: f64,
    pub cr_alpha_excluded: usize,
    pub cr_beta_excluded: usize,
    pub crps_ann: f64,
    pub crps_train: f64,
    pub cr_crps: f64,
    pub cr_crps_excluded: usize,
    pub points: Vec<PointReport>,
}

fn point_report(p: &Predictor, ckde: &ConditionalKde, i: usize, x: &[f64], y: &[f64]) -> Result<PointReport> {
    let cfg = &p.ctx.cfg;
    let samples = p.ensemble(x)?;
    let kde = KdeModel::new(&samples, cfg.kde_mode)?;
    let w = ckde.weights(x);
    let n_out = y.len();
    let mut r = PointReport {
        log_density: kde.log_density(y),
        ci_ann: Vec::with_capacity(n_out),
        ci_train: Vec::with_capacity(n_out),
        crps_ann: Vec::with_capacity(n_out),
        crps_train: Vec::with_capacity(n_out),
    };
    for k in 0..n_out {
        let s: Vec<f64> = (0..samples.ncols()).map(|l| samples[(k, l)]).collect();
        let mix = ckde.component_with(w.clone(), k);
        let mut g = rng::stream(p.ctx.germs.seed, TRAIN_SAMPLE_BASE + (i * n_out + k) as u64);
        let u = rng::uniforms(&mut g, s.len());
        let z = rng::normals(&mut g, s.len());
        let draws: Vec<f64> = u.iter().zip(&z).map(|(u, z)| mix.sample(*u, *z)).collect();
        r.ci_ann.push(empirical_ci(&s, cfg.p_c));
        r.ci_train.push(gkde_ci(&mix, cfg.p_c)?);
        r.crps_ann.push(crps_mc(&s, y[k]));
        r.crps_train.push(crps_mc(&draws, y[k]));
    }
    Ok(r)
}

/// Every held-out criterion for the model in `m`.
pub fn evaluate(m: &ModelBundle, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
    let p = Predictor::from_bundle(m)?;
    evaluate_with(&p, m.nll_train_opt, m.n_d, train, test)
}

pub fn evaluate_with(
    p: &Predictor,
    nll_train_opt: f64,
    n_d: usize,
    train: &Dataset,
    test: &Dataset,
) -> Result<EvalReport> {
    test.validate()?;
    let cfg = &p.ctx.cfg;
    if test.n_in() != cfg.n_in || test.n_out() != cfg.n_out {
        return Err(Error::Shape("test data dimensions do not match the model".into()));
    }
    let ckde = ConditionalKde::new(train)?;
    let points: Vec<PointReport> = (0..test.len())
        .into_par_iter()
        .map(|i| point_report(p, &ckde, i, &test.inputs[i], &test.outputs[i]))
        .collect::<Result<_>>()?;
    let logs: Vec<f64> = points.iter().map(|r| r.log_density).collect();
    let nll_test = nll(&logs);
    let lower = |v: &[(f64, f64)]| v.iter().map(|c| c.0).collect::<Vec<_>>();
    let upper = |v: &[(f64, f64)]| v.iter().map(|c| c.1).collect::<Vec<_>>();
    let (cr_alpha, cr_alpha_excluded) = cr_bounds(
        &points.iter().map(|r| lower(&r.ci_ann)).collect::<Vec<_>>(),
        &points.iter().map(|r| lower(&r.ci_train)).collect::<Vec<_>>(),
    );
    let (cr_beta, cr_beta_excluded) = cr_bounds(
        &points.iter().map(|r| upper(&r.ci_ann)).collect::<Vec<_>>(),
        &points.iter().map(|r| upper(&r.ci_train)).collect::<Vec<_>>(),
    );
    let ann: Vec<Vec<f64>> = points.iter().map(|r| r.crps_ann.clone()).collect();
    let trn: Vec<Vec<f64>> = points.iter().map(|r| r.crps_train.clone()).collect();
    let (cr_crps_v, cr_crps_excluded) = cr_crps(&ann, &trn);
    Ok(EvalReport {
        n_test: test.len(),
        p_c: cfg.p_c,
        nll_test,
        nll_train_opt,
        cr_o: cr_overfit(nll_train_opt, nll_test, n_d, test.len()).unwrap_or(f64::NAN),
        cr_alpha,
        cr_beta,
        cr_alpha_excluded,
        cr_beta_excluded,
        crps_ann: mean(&ann.concat()),
        crps_train: mean(&trn.concat()),
        cr_crps: cr_crps_v,
        cr_crps_excluded,
        points,
    })
}

impl EvalReport {
    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n_test = {}", self.n_test)?;
        writeln!(w, "p_c = {}", self.p_c)?;
        writeln!(w, "nll_test = {:e}", self.nll_test)?;
        writeln!(w, "nll_train_opt = {:e}", self.nll_train_opt)?;
        writeln!(w, "cr_o = {:e}", self.cr_o)?;
        writeln!(w, "cr_alpha = {:e}", self.cr_alpha)?;
        writeln!(w, "cr_alpha_excluded = {}", self.cr_alpha_excluded)?;
        writeln!(w, "cr_beta = {:e}", self.cr_beta)?;
        writeln!(w, "cr_beta_excluded = {}", self.cr_beta_excluded)?;
        writeln!(w, "crps_ann = {:e}", self.crps_ann)?;
        writeln!(w, "crps_train = {:e}", self.crps_train)?;
        writeln!(w, "cr_crps = {:e}", self.cr_crps)?;
        writeln!(w, "cr_crps_excluded = {}", self.cr_crps_excluded)?;
        Ok(())
    }

    /// One row per (test point, component).
    pub fn write_points_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "point",
            "component",
            "log_density",
            "ci_ann_lo",
            "ci_ann_hi",
            "ci_train_lo",
            "ci_train_hi",
            "crps_ann",
            "crps_train",
        ])?;
        for (i, r) in self.points.iter().enumerate() {
            for k in 0..r.crps_ann.len() {
                out.write_record([
                    (i + 1).to_string(),
                    (k + 1).to_string(),
                    format!("{:e}", r.log_density),
                    format!("{:e}", r.ci_ann[k].0),
                    format!("{:e}", r.ci_ann[k].1),
                    format!("{:e}", r.ci_train[k].0),
                    format!("{:e}", r.ci_train[k].1),
                    format!("{:e}", r.crps_ann[k]),
                    format!("{:e}", r.crps_train[k]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary(std::fs::File::create(dir.join("report.txt"))?)?;
        self.write_points_csv(std::fs::File::create(dir.join("points.csv"))?)
    }
}

/// Evenly spaced grid covering the ANN samples of component k and the
/// mixture's quantile bracket.
pub fn pdf_grid(ann: &KdeModel, mix: &Mixture1d, k: usize, n: usize) -> Vec<f64> {
    let h = ann.per_component_std[k] * ann.bandwidth;
    let (mut lo, mut hi) = mix.bracket();
    for l in 0..ann.n_sim {
        let s = ann.sample(l)[k];
        lo = lo.min(s - 6.0 * h);
        hi = hi.max(s + 6.0 * h);
    }
    crate::training::linspace(lo, hi, n)
}

/// (y, p^ANN_k(y|x), p^train_k(y|x)) at each grid point.
pub fn pdf_curves(ann: &KdeModel, mix: &Mixture1d, k: usize, grid: &[f64]) -> Vec<(f64, f64, f64)> {
    grid.iter()
        .map(|&y| (y, ann.marginal_log_density(k, y).exp(), mix.pdf(y)))
        .collect()
}

pub fn write_pdf_curves<W: Write>(curves: &[(f64, f64, f64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["y", "p_ann", "p_train"])?;
    for (y, a, t) in curves {
        out.write_record([format!("{y:e}"), format!("{a:e}"), format!("{t:e}")])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Split;
    use proptest::prelude::*;

    fn crps_direct(s: &[f64], obs: f64) -> f64 {
        let n = s.len() as f64;
        let a = s.iter().map(|y| (y - obs).abs()).sum::<f64>() / n;
        let b: f64 = s.iter().flat_map(|y| s.iter().map(move |z| (y - z).abs())).sum();
        a - b / (2.0 * n * n)
    }

    #[test]
    fn ci_index_examples() {
        assert_eq!(ci_indices(100, 0.95), (3, 97));
        assert_eq!(ci_indices(100, 1.0), (1, 100));
        assert_eq!(empirical_ci(&[0.3; 7], 0.9), (0.3, 0.3));
    }

    #[test]
    fn overfit_examples() {
        let v = cr_overfit(76.0 * 200.0, 78.2 * 50.0, 200, 50).unwrap();
        assert!((v - 0.028).abs() < 5e-4, "{v}");
        assert_eq!(cr_overfit(10.0, 5.0, 20, 10).unwrap(), 0.0);
        let a = cr_overfit(30.0, 7.0, 60, 15).unwrap();
        let b = cr_overfit(90.0, 21.0, 180, 45).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(cr_overfit(1.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_mc(&[0.0, 1.0], 0.0), 0.25);
        assert_eq!(crps_mc(&[0.4; 5], 0.4), 0.0);
    }

    #[test]
    fn single_kernel_interval() {
        let mix = Mixture1d {
            centers: vec![0.3],
            weights: vec![1.0],
            scale: 0.2,
        };
        let (lo, hi) = gkde_ci(&mix, 0.95).unwrap();
        assert!((lo - (0.3 - 1.959964 * 0.2)).abs() < 1e-4);
        assert!((hi - (0.3 + 1.959964 * 0.2)).abs() < 1e-4);
    }

    #[test]
    fn symmetric_mixture_interval() {
        let mix = Mixture1d {
            centers: vec![-0.5, 0.9],
            weights: vec![0.5, 0.5],
            scale: 0.3,
        };
        let (lo, hi) = gkde_ci(&mix, 0.9).unwrap();
        assert!(((lo + hi) / 2.0 - 0.2).abs() < 1e-6);
    }

    #[test]
    fn bound_ratio_examples() {
        let a = vec![vec![0.1, -0.4, 0.3]];
        assert_eq!(cr_bounds(&a, &a), (0.0, 0));
        let b = vec![vec![0.3, -1.2, 0.9]];
        assert!((cr_bounds(&a, &b).0 - 1.0).abs() < 1e-12);
        let zero = vec![vec![0.0; 3]];
        assert_eq!(cr_bounds(&zero, &zero).1, 1);
        let dup = [a[0].clone(), a[0].clone()];
        let dup_b = [b[0].clone(), b[0].clone()];
        assert!((cr_bounds(&dup, &dup_b).0 - cr_bounds(&a, &b).0).abs() < 1e-15);
        assert_eq!(cr_crps(&a, &a).0, 0.0);
    }

    #[test]
    fn conditional_kde_localizes() {
        // two clusters of 20 rows at x ≈ 0 and x ≈ 1 with distinct outputs
        let ds = Dataset {
            inputs: (0..40).map(|i| vec![(i / 20) as f64 + 0.001 * i as f64]).collect(),
            outputs: (0..40).map(|i| vec![if i < 20 { -0.5 } else { 0.5 }]).collect(),
            split: Split::Train,
            seed: 0,
        };
        let c = ConditionalKde::new(&ds).unwrap();
        let w = c.weights(&[0.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[..20].iter().sum::<f64>() > 0.99);
        let mix = c.component(&[1.0], 0);
        assert!(mix.cdf(0.0) < 0.05 && mix.quantile(0.5).unwrap() > 0.45);
    }

    #[test]
    fn pdf_curves_integrate_to_one() {
        let samples = Mat::from_fn(2, 20, |k, l| (l as f64 * 0.37 + k as f64).sin() * 0.5);
        let ann = KdeModel::new(&samples, crate::likelihood::KdeMode::Joint).unwrap();
        let mix = Mixture1d {
            centers: vec![-0.2, 0.1, 0.6],
            weights: vec![0.2, 0.5, 0.3],
            scale: 0.1,
        };
        for k in 0..2 {
            let grid = pdf_grid(&ann, &mix, k, 4001);
            let c = pdf_curves(&ann, &mix, k, &grid);
            let trap = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
                c.windows(2).map(|w| 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].0 - w[0].0)).sum::<f64>()
            };
            assert!((trap(&|p| p.1) - 1.0).abs() < 1e-3);
            assert!((trap(&|p| p.2) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mixture_sampling_follows_weights() {
        let mix = Mixture1d {
            centers: vec![0.0, 10.0],
            weights: vec![0.25, 0.75],
            scale: 0.01,
        };
        let mut r = rng::stream(3, 0);
        let u = rng::uniforms(&mut r, 20000);
        let hi = u.iter().filter(|&&u| mix.sample(u, 0.0) > 5.0).count();
        assert!((hi as f64 / 20000.0 - 0.75).abs() < 0.015);
    }

    proptest! {
        #[test]
        fn crps_sorted_form_matches_double_sum(v in proptest::collection::vec(-2.0f64..2.0, 1..40), obs in -2.0f64..2.0) {
            let a = crps_mc(&v, obs);
            prop_assert!((a - crps_direct(&v, obs)).abs() < 1e-12);
            prop_assert!(a >= -1e-15);
        }

        #[test]
        fn empirical_ci_widens_with_level(v in proptest::collection::vec(-1.0f64..1.0, 2..60), p in 0.05f64..0.9) {
            let (a, b) = empirical_ci(&v, p);
            let (c, d) = empirical_ci(&v, (p + 0.09).min(0.99));
            prop_assert!(c <= a && b <= d);
        }
    }
}
