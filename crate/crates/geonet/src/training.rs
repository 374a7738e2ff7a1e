//! Two-stage learning: a trial grid over (h1, h2, ζ_s) with a least-squares
//! bias at every node, then projected Adam over (β^(1), β^(2), β) using
//! central finite-difference gradients.
//!
//! Every random draw comes from [`Germs`]. Architectures are cached by
//! (h1, h2, β^(1), β^(2)) and, under common random numbers, weight
//! realizations are cached by the same key plus ζ_s, so bias-only
//! perturbations never rebuild anything.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::basis_fields::{
    build_bias_basis, build_nonsmooth_basis, build_smooth_basis, BasisKind, BasisMatrix, BiasBasis, Family,
};
use crate::config::{hex, GermPolicy, RunConfig};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{build_torus_mesh, sample_uniform_candidates, Mesh, SurfacePoint};
use crate::latent_field::{covariance_direct, reduce_direct, AnisotropySpec, FemSystem, ReducedField, DENSE_LIMIT};
use crate::likelihood::{nll, KdeMode, KdeModel};
use crate::neuron_process::{sample_neurons, NeuronSet};
use crate::rng;
use crate::solver::{
    build_partition, forward_ensemble, solve_fixed_point, Activation, Partition, ReducedSystem, SolveSettings,
};
use crate::topology::{
    geometric_kernel, local_bandwidths, mesh_geodesics, neuron_geodesics, percentile_mask, select_io_neurons,
    validate_connectivity, GeodesicTable, GraphTopology, IoSets,
};
use crate::weights::{field_at_neurons, sigma_s, sparse_weights};

/// Loss assigned to a θ whose realization fails. Callers recognize a
/// penalized evaluation by exact equality with this value.
pub const PENALTY: f64 = 1e9;

/// Length of the duplicate re-draw stream, as a multiple of N.
const REDRAW_FACTOR: usize = 20;

/// Evaluation ids at or above this belong to the descent stage.
const DESCENT_EVAL_BASE: u64 = 1 << 24;

/// Stream ids at or above this hold per-evaluation weight germs.
const EVAL_STREAM_BASE: u64 = 1 << 32;

const BIAS_SEED_OFFSET: u64 = 0x5151;
const NONSMOOTH_SEED_OFFSET: [u64; 2] = [0x7171, 0x7172];

/// The fixed random inputs of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Germs {
    pub seed: u64,
    pub policy: GermPolicy,
    /// Standard normals (length m) for the architecture draw that ranks neurons.
    pub h_arch: Vec<f64>,
    /// Candidate element, and the two barycentric uniforms (length M each).
    pub u_elem: Vec<f64>,
    pub u_a: Vec<f64>,
    pub u_b: Vec<f64>,
    /// Primary neuron draws (length N).
    pub u_poisson: Vec<f64>,
    /// Uniforms consumed when a primary draw repeats a neuron.
    pub redraw: Vec<f64>,
    /// Weight germs η^1..η^n_sim (length m each).
    pub eta: Vec<Vec<f64>>,
}

fn draw_eta(seed: u64, id: u64, n_sim: usize, m: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, id);
    (0..n_sim).map(|_| rng::normals(&mut r, m)).collect()
}

impl Germs {
    pub fn draw(cfg: &RunConfig) -> Self {
        let s = cfg.seed;
        let mc = cfg.candidate_count();
        let n = cfg.n_neurons;
        Self {
            seed: s,
            policy: cfg.germ_policy,
            h_arch: rng::normals(&mut rng::stream(s, 1), cfg.m),
            u_elem: rng::uniforms(&mut rng::stream(s, 2), mc),
            u_a: rng::uniforms(&mut rng::stream(s, 3), mc),
            u_b: rng::uniforms(&mut rng::stream(s, 4), mc),
            u_poisson: rng::uniforms(&mut rng::stream(s, 5), n),
            redraw: rng::uniforms(&mut rng::stream(s, 6), REDRAW_FACTOR * n),
            eta: draw_eta(s, 7, cfg.n_sim, cfg.m),
        }
    }

    /// Weight germs for one θ evaluation. Under common random numbers every
    /// evaluation shares the stored set.
    pub fn eta_for(&self, eval_id: u64) -> Cow<'_, [Vec<f64>]> {
        match self.policy {
            GermPolicy::CommonRandomNumbers => Cow::Borrowed(&self.eta),
            GermPolicy::Independent => {
                let m = self.h_arch.len();
                Cow::Owned(draw_eta(self.seed, EVAL_STREAM_BASE + eval_id, self.eta.len(), m))
            }
        }
    }

    /// Hex sha256 over every stored value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([matches!(self.policy, GermPolicy::Independent) as u8]);
        let mut put = |v: &[f64]| {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        };
        put(&self.h_arch);
        put(&self.u_elem);
        put(&self.u_a);
        put(&self.u_b);
        put(&self.u_poisson);
        put(&self.redraw);
        for e in &self.eta {
            put(e);
        }
        hex(&h.finalize())
    }

    fn check(&self, cfg: &RunConfig) -> Result<()> {
        let mc = cfg.candidate_count();
        let ok = self.h_arch.len() == cfg.m
            && self.u_elem.len() == mc
            && self.u_a.len() == mc
            && self.u_b.len() == mc
            && self.u_poisson.len() == cfg.n_neurons
            && self.eta.len() == cfg.n_sim
            && self.eta.iter().all(|e| e.len() == cfg.m);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("germ lengths do not match the configuration".into()))
        }
    }
}

/// θ_t = (h1, h2, ζ_s, β^(1), β^(2), β).
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub h1: f64,
    pub h2: f64,
    pub zeta_s: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Theta {
    /// The coordinates moved by the descent stage: (β^(1), β^(2), β).
    pub fn free(&self) -> Vec<f64> {
        [&self.beta1[..], &self.beta2, &self.beta].concat()
    }

    pub fn with_free(&self, v: &[f64]) -> Theta {
        let nh = self.beta1.len();
        Theta {
            beta1: v[..nh].to_vec(),
            beta2: v[nh..2 * nh].to_vec(),
            beta: v[2 * nh..].to_vec(),
            ..self.clone()
        }
    }

    pub fn full(&self) -> Vec<f64> {
        [&[self.h1, self.h2, self.zeta_s][..], &self.free()].concat()
    }
}

/// Quantities shared by every θ evaluation of a run.
pub struct Context {
    pub cfg: RunConfig,
    pub mesh: Mesh,
    pub geodesics: GeodesicTable,
    pub candidates: Vec<SurfacePoint>,
    pub basis: [BasisMatrix; 2],
    pub bias_basis: BiasBasis,
    pub germs: Germs,
}

impl Context {
    pub fn new(cfg: RunConfig, germs: Germs) -> Result<Self> {
        cfg.validate()?;
        germs.check(&cfg)?;
        let mesh = build_torus_mesh(&cfg.torus())?;
        let geodesics = mesh_geodesics(&mesh)?;
        let candidates = sample_uniform_candidates(&mesh, &germs.u_elem, &germs.u_a, &germs.u_b)?;
        let basis = anisotropy_bases(&cfg)?;
        let bias_basis = build_bias_basis(cfg.n_hat(), cfg.bias_dim(), cfg.seed.wrapping_add(BIAS_SEED_OFFSET))?;
        Ok(Self {
            cfg,
            mesh,
            geodesics,
            candidates,
            basis,
            bias_basis,
            germs,
        })
    }

    pub fn from_config(cfg: RunConfig) -> Result<Self> {
        let germs = Germs::draw(&cfg);
        Self::new(cfg, germs)
    }

    pub fn anisotropy(&self, h1: f64, h2: f64, beta1: &[f64], beta2: &[f64]) -> AnisotropySpec {
        AnisotropySpec {
            h1,
            h2,
            beta1: beta1.to_vec(),
            beta2: beta2.to_vec(),
            basis1: self.basis[0].clone(),
            basis2: self.basis[1].clone(),
            c_lo: [self.cfg.c_lo; 2],
            c_hi: [self.cfg.c_hi; 2],
        }
    }

    /// Reduced latent field for the given anisotropy parameters.
    pub fn field(&self, h1: f64, h2: f64, beta1: &[f64], beta2: &[f64]) -> Result<ReducedField> {
        let sys = FemSystem::new(&self.mesh, &self.anisotropy(h1, h2, beta1, beta2), self.cfg.tau0)?;
        reduce_direct(&covariance_direct(&sys, DENSE_LIMIT)?, self.cfg.m)
    }

    /// Architecture at θ, optionally with selectors frozen to `io`.
    pub fn architecture(&self, theta: &Theta, frozen: Option<&IoSets>) -> Result<Architecture> {
        let field = self.field(theta.h1, theta.h2, &theta.beta1, &theta.beta2)?;
        architecture_from_field(&self.cfg, &self.mesh, &self.geodesics, &self.candidates, &self.germs, field, frozen)
    }
}

fn anisotropy_bases(cfg: &RunConfig) -> Result<[BasisMatrix; 2]> {
    let n_o = cfg.n_u * cfg.n_v;
    if cfg.n_h == 0 {
        return Ok([BasisMatrix::empty(n_o, cfg.basis), BasisMatrix::empty(n_o, cfg.basis)]);
    }
    Ok(match cfg.basis {
        BasisKind::Smooth => [
            build_smooth_basis(&cfg.torus(), cfg.n_h, Family::First)?,
            build_smooth_basis(&cfg.torus(), cfg.n_h, Family::Second)?,
        ],
        BasisKind::Nonsmooth => [
            build_nonsmooth_basis(n_o, cfg.n_h, cfg.seed.wrapping_add(NONSMOOTH_SEED_OFFSET[0]))?,
            build_nonsmooth_basis(n_o, cfg.n_h, cfg.seed.wrapping_add(NONSMOOTH_SEED_OFFSET[1]))?,
        ],
    })
}

/// Everything between the latent field and the weight germs.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub field: ReducedField,
    pub neurons: NeuronSet,
    pub topology: GraphTopology,
    pub edges: Vec<(usize, usize)>,
    pub sigma_s: f64,
    pub partition: Partition,
}

impl Architecture {
    /// One reduced system per weight germ.
    pub fn systems(&self, zeta: f64, etas: &[Vec<f64>]) -> Result<Vec<ReducedSystem>> {
        if !(zeta > 0.0) {
            return Err(Error::InvalidParameter(format!("zeta_s = {zeta} must be positive")));
        }
        etas.iter()
            .map(|eta| {
                let s = field_at_neurons(&self.neurons.psi, eta)?;
                let w = sparse_weights(&self.topology.kernel, &self.edges, &s, zeta, self.sigma_s);
                ReducedSystem::new(&w, &self.partition)
            })
            .collect()
    }
}

pub fn architecture_from_field(
    cfg: &RunConfig,
    mesh: &Mesh,
    geodesics: &GeodesicTable,
    candidates: &[SurfacePoint],
    germs: &Germs,
    field: ReducedField,
    frozen: Option<&IoSets>,
) -> Result<Architecture> {
    let n = cfg.n_neurons;
    let neurons = sample_neurons(mesh, candidates, &field, n, &germs.u_poisson, &germs.redraw)?;
    let d = neuron_geodesics(geodesics, mesh, &neurons.points)?;
    let bandwidths = local_bandwidths(&d)?;
    let kernel = geometric_kernel(&d, &bandwidths);
    let (mask, threshold) = percentile_mask(&kernel, cfg.tau_prc)?;
    if !validate_connectivity(&mask) {
        return Err(Error::Disconnected);
    }
    let io = match frozen {
        Some(io) => io.clone(),
        None => select_io_neurons(&field_at_neurons(&neurons.psi, &germs.h_arch)?, cfg.n_in, cfg.n_out)?,
    };
    let partition = build_partition(&io.j_in, &io.j_out, n)?;
    let sigma = sigma_s(&neurons.psi)?;
    let edges = mask.edges();
    Ok(Architecture {
        field,
        neurons,
        topology: GraphTopology {
            neuron_distances: d,
            bandwidths,
            kernel,
            mask,
            threshold,
            io,
        },
        edges,
        sigma_s: sigma,
        partition,
    })
}

/// log p(y_i | x_i) for every row, in row order.
pub fn point_log_densities(
    part: &Partition,
    systems: &[ReducedSystem],
    bias: &[f64],
    data: &Dataset,
    s: &SolveSettings,
    mode: KdeMode,
) -> Result<Vec<f64>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let y = forward_ensemble(part, systems, &data.inputs[i], bias, s)?;
            Ok(KdeModel::new(&y, mode)?.log_density(&data.outputs[i]))
        })
        .collect()
}

pub fn ensemble_nll(
    part: &Partition,
    systems: &[ReducedSystem],
    bias: &[f64],
    data: &Dataset,
    s: &SolveSettings,
    mode: KdeMode,
) -> Result<f64> {
    Ok(nll(&point_log_densities(part, systems, bias, data, s, mode)?))
}

fn is_realization_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Disconnected
            | Error::NotConverged { .. }
            | Error::NonFinite(_)
            | Error::DegenerateField
            | Error::DegenerateIntensity
            | Error::DistinctExhausted { .. }
            | Error::ZeroBandwidth(_)
            | Error::Unreachable(..)
            | Error::ClampViolation { .. }
            | Error::Factorization(_)
            | Error::RankDeficient(_)
    )
}

/// Maps realization failures and non-finite losses to [`PENALTY`].
pub fn penalized(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => {
            log::warn!("penalized evaluation: non-finite loss {v}");
            Ok(PENALTY)
        }
        Err(e) if is_realization_failure(&e) => {
            log::warn!("penalized evaluation: {e}");
            Ok(PENALTY)
        }
        Err(e) => Err(e),
    }
}

type Key = Vec<u64>;

fn arch_key(t: &Theta) -> Key {
    [t.h1, t.h2].iter().chain(&t.beta1).chain(&t.beta2).map(|v| v.to_bits()).collect()
}

const CACHE_LIMIT: usize = 512;

/// Loss evaluation with architecture and weight-realization caches.
pub struct Evaluator<'a> {
    pub ctx: &'a Context,
    pub data: &'a Dataset,
    frozen: Option<IoSets>,
    archs: Mutex<HashMap<Key, Arc<Architecture>>>,
    systems: Mutex<HashMap<Key, Arc<Vec<ReducedSystem>>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(ctx: &'a Context, data: &'a Dataset) -> Result<Self> {
        data.validate()?;
        if data.n_in() != ctx.cfg.n_in || data.n_out() != ctx.cfg.n_out {
            return Err(Error::Shape(format!(
                "data has {} inputs and {} outputs, configuration expects {} and {}",
                data.n_in(),
                data.n_out(),
                ctx.cfg.n_in,
                ctx.cfg.n_out
            )));
        }
        Ok(Self {
            ctx,
            data,
            frozen: None,
            archs: Mutex::new(HashMap::new()),
            systems: Mutex::new(HashMap::new()),
        })
    }

    /// Freezes the selectors to those of `theta0`, keeping only cache
    /// entries built at `theta0` (whose selectors already agree).
    pub fn freeze(&mut self, theta0: &Theta) -> Result<IoSets> {
        let arch = self.architecture(theta0)?;
        let io = arch.topology.io.clone();
        let key = arch_key(theta0);
        self.archs.get_mut().unwrap().retain(|k, _| *k == key);
        self.systems.get_mut().unwrap().retain(|k, _| k[..key.len()] == key[..]);
        self.frozen = Some(io.clone());
        Ok(io)
    }

    pub fn architecture(&self, theta: &Theta) -> Result<Arc<Architecture>> {
        let key = arch_key(theta);
        if let Some(a) = self.archs.lock().unwrap().get(&key) {
            return Ok(a.clone());
        }
        let a = Arc::new(self.ctx.architecture(theta, self.frozen.as_ref())?);
        let mut cache = self.archs.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, a.clone());
        Ok(a)
    }

    /// Architecture and weight realizations for one evaluation.
    pub fn realize(&self, theta: &Theta, eval_id: u64) -> Result<(Arc<Architecture>, Arc<Vec<ReducedSystem>>)> {
        let arch = self.architecture(theta)?;
        let germs = &self.ctx.germs;
        if germs.policy == GermPolicy::Independent {
            let sys = arch.systems(theta.zeta_s, &germs.eta_for(eval_id))?;
            return Ok((arch, Arc::new(sys)));
        }
        let mut key = arch_key(theta);
        key.push(theta.zeta_s.to_bits());
        if let Some(s) = self.systems.lock().unwrap().get(&key) {
            return Ok((arch, s.clone()));
        }
        let sys = Arc::new(arch.systems(theta.zeta_s, &germs.eta)?);
        let mut cache = self.systems.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, sys.clone());
        Ok((arch, sys))
    }

    pub fn try_loss(&self, theta: &Theta, eval_id: u64) -> Result<f64> {
        let (arch, sys) = self.realize(theta, eval_id)?;
        let bias = self.ctx.bias_basis.apply(&theta.beta);
        let cfg = &self.ctx.cfg;
        ensemble_nll(&arch.partition, &sys, &bias, self.data, &cfg.solve_settings(), cfg.kde_mode)
    }

    /// NLL at θ, with realization failures mapped to [`PENALTY`].
    pub fn loss(&self, theta: &Theta, eval_id: u64) -> Result<f64> {
        penalized(self.try_loss(theta, eval_id))
    }
}

/// Σ_{i,ℓ} ‖a⋆ − f(z + Hβ)‖² over the stored (target, pre-activation) pairs.
#[derive(Clone, Debug)]
pub struct BetaLsProblem {
    pub targets: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub basis: BiasBasis,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaLsSolution {
    pub beta: Vec<f64>,
    pub steps: usize,
    pub grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BetaLsProblem {
    pub fn objective(&self, beta: &[f64]) -> f64 {
        let hb = self.basis.apply(beta);
        let f = self.activation;
        self.targets
            .iter()
            .zip(&self.z)
            .map(|(t, z)| {
                t.iter()
                    .zip(z)
                    .zip(&hb)
                    .map(|((t, z), b)| (t - f.eval(z + b)).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// −2 Hᵀ Σ D_f r.
    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let hb = self.basis.apply(beta);
        let f = self.activation;
        let mut acc = vec![0.0; hb.len()];
        for (t, z) in self.targets.iter().zip(&self.z) {
            for i in 0..hb.len() {
                let u = z[i] + hb[i];
                acc[i] += f.derivative(u) * (t[i] - f.eval(u));
            }
        }
        self.basis.apply_transpose(&acc).into_iter().map(|g| -2.0 * g).collect()
    }

    /// Gradient descent with Barzilai–Borwein steps safeguarded by Armijo
    /// backtracking. Stops when ‖g‖ < `tol` or after `max_steps` steps.
    pub fn solve(&self, beta0: &[f64], tol: f64, max_steps: usize) -> BetaLsSolution {
        let mut beta = beta0.to_vec();
        let mut f = self.objective(&beta);
        let mut g = self.gradient(&beta);
        let mut gn = norm(&g);
        let mut step = 1.0 / gn.max(1.0);
        for k in 0..max_steps {
            if gn < tol {
                return BetaLsSolution {
                    beta,
                    steps: k,
                    grad_norm: gn,
                };
            }
            let mut t = step;
            let (cand, fc) = loop {
                let cand: Vec<f64> = beta.iter().zip(&g).map(|(b, g)| b - t * g).collect();
                let fc = self.objective(&cand);
                if fc <= f - 1e-4 * t * gn * gn {
                    break (cand, fc);
                }
                t *= 0.5;
                if t < 1e-30 {
                    return BetaLsSolution {
                        beta,
                        steps: k,
                        grad_norm: gn,
                    };
                }
            };
            let g_new = self.gradient(&cand);
            let s: Vec<f64> = cand.iter().zip(&beta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            step = if sy > 0.0 { dot(&s, &s) / sy } else { 2.0 * t };
            beta = cand;
            f = fc;
            g = g_new;
            gn = norm(&g);
        }
        BetaLsSolution {
            beta,
            steps: max_steps,
            grad_norm: gn,
        }
    }
}

/// Solves every (row, realization) system with zero bias and records the
/// fixed point a⋆ and z = Ŵ a⋆ + Ŵ_in x.
pub fn beta_ls_problem(
    systems: &[ReducedSystem],
    data: &Dataset,
    basis: &BiasBasis,
    s: &SolveSettings,
) -> Result<BetaLsProblem> {
    let nh = basis.n_hat();
    let zero = vec![0.0; nh];
    let pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = data
        .inputs
        .par_iter()
        .map(|x| {
            systems
                .iter()
                .map(|sys| {
                    let b = sys.rhs(x, &zero)?;
                    let (a, _) = solve_fixed_point(&sys.w_hat, &b, s)?;
                    let mut z = sys.w_hat.mul_vec(&a);
                    z.iter_mut().zip(&b).for_each(|(z, b)| *z += b);
                    Ok((a, z))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (targets, z) = pairs.into_iter().flatten().unzip();
    Ok(BetaLsProblem {
        targets,
        z,
        basis: basis.clone(),
        activation: s.activation,
    })
}

/// n points spanning [lo, hi] inclusive; a single point sits at lo.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Grid nodes (h1, h2, ζ_s) with h1 varying slowest.
pub fn grid_nodes(cfg: &RunConfig) -> Vec<[f64; 3]> {
    let a = linspace(cfg.grid_h1[0], cfg.grid_h1[1], cfg.grid_n);
    let b = linspace(cfg.grid_h2[0], cfg.grid_h2[1], cfg.grid_n);
    let c = linspace(cfg.grid_zeta[0], cfg.grid_zeta[1], cfg.grid_n);
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &h1 in &a {
        for &h2 in &b {
            for &z in &c {
                out.push([h1, h2, z]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub index: usize,
    pub node: [f64; 3],
    pub loss: f64,
    pub beta: Vec<f64>,
    pub beta_ls_steps: usize,
}

fn grid_theta(ctx: &Context, node: [f64; 3], beta: Vec<f64>) -> Theta {
    let nh = ctx.cfg.n_h;
    Theta {
        h1: node[0],
        h2: node[1],
        zeta_s: node[2],
        beta1: vec![0.0; nh],
        beta2: vec![0.0; nh],
        beta,
    }
}

/// β least squares and loss at one grid node, using the germs of evaluation `index`.
pub fn evaluate_grid_node(ev: &Evaluator, index: usize, node: [f64; 3]) -> Result<GridResult> {
    let ctx = ev.ctx;
    let cfg = &ctx.cfg;
    let nb = ctx.bias_basis.n_b();
    let failed = |e: Error| -> Result<GridResult> {
        penalized(Err(e))?;
        Ok(GridResult {
            index,
            node,
            loss: PENALTY,
            beta: vec![0.0; nb],
            beta_ls_steps: 0,
        })
    };
    let theta = grid_theta(ctx, node, vec![0.0; nb]);
    let (_, sys) = match ev.realize(&theta, index as u64) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let problem = match beta_ls_problem(&sys, ev.data, &ctx.bias_basis, &cfg.solve_settings()) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let sol = problem.solve(&vec![0.0; nb], cfg.beta_ls_tol, cfg.beta_ls_max_steps);
    let theta = grid_theta(ctx, node, sol.beta);
    let loss = ev.loss(&theta, index as u64)?;
    Ok(GridResult {
        index,
        node,
        loss,
        beta: theta.beta,
        beta_ls_steps: sol.steps,
    })
}

/// Evaluates every grid node and returns the index of the best one
/// (lowest loss, ties to the lowest index) alongside all results.
pub fn trial_grid_search(ev: &Evaluator) -> Result<(usize, Vec<GridResult>)> {
    let nodes = grid_nodes(&ev.ctx.cfg);
    if nodes.is_empty() {
        return Err(Error::InvalidParameter("empty trial grid".into()));
    }
    // build each distinct architecture once before fanning out over ζ_s
    let mut pairs: Vec<[f64; 3]> = Vec::new();
    for n in &nodes {
        if !pairs.iter().any(|p| p[0] == n[0] && p[1] == n[1]) {
            pairs.push(*n);
        }
    }
    pairs.par_iter().for_each(|n| {
        let _ = ev.architecture(&grid_theta(ev.ctx, *n, Vec::new()));
    });
    let results: Vec<GridResult> = nodes
        .par_iter()
        .enumerate()
        .map(|(j, n)| evaluate_grid_node(ev, j, *n))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for r in &results {
        if r.loss < results[best].loss {
            best = r.index;
        }
    }
    if results.iter().all(|r| r.loss == PENALTY) {
        return Err(Error::SearchFailed);
    }
    Ok((best, results))
}

/// B_k: the largest box radius that keeps h* + Σ_j β_j h^(k,j) inside
/// [c_lo, c_hi] at every mesh node.
pub fn projection_box(h_star: f64, basis: &BasisMatrix, c_lo: f64, c_hi: f64) -> f64 {
    let margin = (h_star - c_lo).min(c_hi - h_star).max(0.0);
    let v = &basis.values;
    let mut b = f64::INFINITY;
    for p in 0..v.nrows() {
        let denom: f64 = (0..v.ncols()).map(|j| v[(p, j)].abs()).sum();
        if denom > 0.0 {
            b = b.min(margin / denom);
        }
    }
    b
}

/// Δ_max at the last entry n of `history` (1-based): the largest step
/// ‖θ^(k+1) − θ^(k)‖ for k = n−n_wind+1..n−1, over max(1, ‖θ^(n)‖).
pub fn delta_max(history: &[Vec<f64>], n_wind: usize) -> Result<f64> {
    let n = history.len();
    if n <= n_wind || n_wind < 2 {
        return Err(Error::InsufficientHistory { needed: n_wind, got: n });
    }
    let mut m: f64 = 0.0;
    for k in n - n_wind + 1..n {
        // 1-based k maps to history[k - 1]
        let step: Vec<f64> = history[k].iter().zip(&history[k - 1]).map(|(a, b)| a - b).collect();
        m = m.max(norm(&step));
    }
    Ok(m / norm(&history[n - 1]).max(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSettings {
    /// Step size per free coordinate.
    pub lr: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub fd_rel_step: f64,
    pub n_wind: usize,
    pub delta_tol: f64,
    pub max_iters: usize,
}

/// Iterates θ^(1), θ^(2), … of the descent stage. `delta_max` is NaN where
/// the window is not yet full.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub theta: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
    pub delta_max: Vec<f64>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    pub fn last_delta(&self) -> Option<f64> {
        self.delta_max.last().copied().filter(|d| !d.is_nan())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let dim = self.theta.first().map_or(0, Vec::len);
        let mut header = vec!["iteration".to_string(), "loss".into(), "delta_max".into()];
        header.extend((1..=dim).map(|j| format!("theta_{j}")));
        out.write_record(&header)?;
        for n in 0..self.len() {
            let mut row = vec![(n + 1).to_string(), format!("{:.17e}", self.loss[n])];
            row.push(if self.delta_max[n].is_nan() { String::new() } else { format!("{:.17e}", self.delta_max[n]) });
            row.extend(self.theta[n].iter().map(|v| format!("{v:.17e}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentResult {
    /// Free coordinates of the lowest-loss iterate (earliest on ties).
    pub best: Vec<f64>,
    pub best_loss: f64,
    pub best_iter: usize,
    pub trace: TrainTrace,
}

/// Projected Adam on the free coordinates with central finite differences.
/// `loss(free, eval_id)` must be deterministic in its arguments; every call
/// gets a distinct id. Coordinates are clamped to [−bound_c, bound_c].
pub fn adam_projected_descent<F>(
    prefix: &[f64],
    free0: &[f64],
    bounds: &[f64],
    s: &AdamSettings,
    loss: F,
) -> Result<DescentResult>
where
    F: Fn(&[f64], u64) -> Result<f64> + Sync,
{
    let k = free0.len();
    if bounds.len() != k || s.lr.len() != k {
        return Err(Error::Shape(format!(
            "{k} free coordinates but {} bounds and {} step sizes",
            bounds.len(),
            s.lr.len()
        )));
    }
    let slots = 2 * k as u64 + 1;
    let id = |n: usize, slot: u64| DESCENT_EVAL_BASE + n as u64 * slots + slot;
    let full = |x: &[f64]| [prefix, x].concat();

    let mut x: Vec<f64> = free0.iter().zip(bounds).map(|(v, b)| v.clamp(-b, *b)).collect();
    let mut f = loss(&x, id(0, 2 * k as u64))?;
    let mut trace = TrainTrace::default();
    trace.theta.push(full(&x));
    trace.loss.push(f);
    trace.delta_max.push(f64::NAN);
    let (mut best, mut best_loss, mut best_iter) = (x.clone(), f, 0);
    let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);

    for n in 0..s.max_iters {
        let g: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|c| {
                let h = s.fd_rel_step * x[c].abs().max(1.0);
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let fp = loss(&xp, id(n, 2 * c as u64))?;
                let fm = loss(&xm, id(n, 2 * c as u64 + 1))?;
                Ok(if fp == PENALTY || fm == PENALTY {
                    0.0
                } else {
                    (fp - fm) / (2.0 * h)
                })
            })
            .collect::<Result<_>>()?;
        let t = (n + 1) as i32;
        for c in 0..k {
            m[c] = s.beta1 * m[c] + (1.0 - s.beta1) * g[c];
            v[c] = s.beta2 * v[c] + (1.0 - s.beta2) * g[c] * g[c];
            let mh = m[c] / (1.0 - s.beta1.powi(t));
            let vh = v[c] / (1.0 - s.beta2.powi(t));
            x[c] = (x[c] - s.lr[c] * mh / (vh.sqrt() + s.eps)).clamp(-bounds[c], bounds[c]);
        }
        f = loss(&x, id(n + 1, 2 * k as u64))?;
        trace.theta.push(full(&x));
        trace.loss.push(f);
        let d = delta_max(&trace.theta, s.n_wind).unwrap_or(f64::NAN);
        trace.delta_max.push(d);
        log::info!("descent iteration {}: loss {f:.6e}, delta_max {d:.3e}", n + 1);
        if f < best_loss {
            best.clone_from(&x);
            best_loss = f;
            best_iter = n + 1;
        }
        if d < s.delta_tol {
            break;
        }
    }
    Ok(DescentResult {
        best,
        best_loss,
        best_iter,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub grid: Vec<GridResult>,
    pub grid_best: usize,
    pub theta0: Theta,
    pub theta_opt: Theta,
    pub loss_opt: f64,
    pub trace: TrainTrace,
    pub io: IoSets,
}

impl TrainOutcome {
    pub fn write_grid_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "h1", "h2", "zeta_s", "loss", "beta_ls_steps"])?;
        for r in &self.grid {
            out.write_record([
                r.index.to_string(),
                format!("{:.17e}", r.node[0]),
                format!("{:.17e}", r.node[1]),
                format!("{:.17e}", r.node[2]),
                format!("{:.17e}", r.loss),
                r.beta_ls_steps.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn adam_settings(ctx: &Context) -> AdamSettings {
    let cfg = &ctx.cfg;
    let nh = cfg.n_h;
    let nb = ctx.bias_basis.n_b();
    let mut lr = vec![cfg.adam_lr_h; 2 * nh];
    lr.extend(std::iter::repeat(cfg.adam_lr_beta).take(nb));
    AdamSettings {
        lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        fd_rel_step: cfg.fd_rel_step,
        n_wind: cfg.n_wind,
        delta_tol: cfg.delta_tol,
        max_iters: cfg.max_iters,
    }
}

/// Grid search, then projected Adam from the grid optimum.
pub fn train(ctx: &Context, data: &Dataset) -> Result<TrainOutcome> {
    let cfg = &ctx.cfg;
    let mut ev = Evaluator::new(ctx, data)?;
    let (grid_best, grid) = trial_grid_search(&ev)?;
    let g = &grid[grid_best];
    log::info!(
        "trial optimum at node {grid_best}: (h1, h2, zeta_s) = ({}, {}, {}), loss {:.6e}",
        g.node[0],
        g.node[1],
        g.node[2],
        g.loss
    );
    let theta0 = grid_theta(ctx, g.node, g.beta.clone());
    let io = ev.freeze(&theta0)?;

    let nh = cfg.n_h;
    let b1 = projection_box(theta0.h1, &ctx.basis[0], cfg.c_lo, cfg.c_hi);
    let b2 = projection_box(theta0.h2, &ctx.basis[1], cfg.c_lo, cfg.c_hi);
    let mut bounds = vec![b1; nh];
    bounds.extend(std::iter::repeat(b2).take(nh));
    bounds.extend(std::iter::repeat(f64::INFINITY).take(ctx.bias_basis.n_b()));

    let prefix = [theta0.h1, theta0.h2, theta0.zeta_s];
    let res = adam_projected_descent(&prefix, &theta0.free(), &bounds, &adam_settings(ctx), |x, id| {
        ev.loss(&theta0.with_free(x), id)
    })?;
    let theta_opt = theta0.with_free(&res.best);
    Ok(TrainOutcome {
        grid,
        grid_best,
        theta0,
        theta_opt,
        loss_opt: res.best_loss,
        trace: res.trace,
        io,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::generate_synthetic;
    use faer::Mat;

    fn smoke_config() -> RunConfig {
        RunConfig {
            n_u: 20,
            n_v: 8,
            m: 30,
            n_neurons: 30,
            n_in: 3,
            n_out: 4,
            n_sim: 8,
            grid_n: 2,
            max_iters: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn quadratic_surrogate_converges() {
        let target = [0.3, -0.2, 0.15];
        let s = AdamSettings {
            lr: vec![0.01; 3],
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            fd_rel_step: 1e-6,
            n_wind: 3,
            delta_tol: 0.0,
            max_iters: 3000,
        };
        let r = adam_projected_descent(&[], &[0.0; 3], &[f64::INFINITY; 3], &s, |x, _| {
            Ok(x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .unwrap();
        for (b, t) in r.best.iter().zip(&target) {
            assert!((b - t).abs() < 1e-3, "{b} vs {t}");
        }
    }

    #[test]
    fn descent_respects_box() {
        let s = AdamSettings {
            lr: vec![0.1; 2],
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            fd_rel_step: 1e-6,
            n_wind: 3,
            delta_tol: 0.0,
            max_iters: 200,
        };
        let r = adam_projected_descent(&[], &[0.0; 2], &[0.05, f64::INFINITY], &s, |x, _| {
            Ok((x[0] - 1.0).powi(2) + (x[1] + 1.0).powi(2))
        })
        .unwrap();
        assert!(r.trace.theta.iter().all(|t| t[0].abs() <= 0.05));
        assert_eq!(r.best[0], 0.05);
    }

    #[test]
    fn delta_max_cases() {
        let constant = vec![vec![0.4, 0.1]; 5];
        assert_eq!(delta_max(&constant, 3).unwrap(), 0.0);
        let jump = vec![vec![0.0], vec![0.0], vec![0.0], vec![-1.5], vec![0.5]];
        assert_eq!(delta_max(&jump, 3).unwrap(), 2.0);
        // old jump between entries 1 and 2 falls outside the window
        let old = vec![vec![10.0], vec![0.0], vec![0.0], vec![0.1], vec![0.1]];
        assert!((delta_max(&old, 3).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(delta_max(&old[..3], 3), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn projection_box_cases() {
        let values = Mat::from_fn(4, 1, |i, _| [-2.0, 1.0, 0.5, 2.0][i]);
        let basis = BasisMatrix {
            values,
            kind: BasisKind::Nonsmooth,
        };
        assert!((projection_box(0.1, &basis, 0.0, f64::INFINITY) - 0.05).abs() < 1e-15);
        assert_eq!(projection_box(0.1, &basis, 0.2, f64::INFINITY), 0.0);
        let zero = BasisMatrix {
            values: Mat::zeros(3, 2),
            kind: BasisKind::Nonsmooth,
        };
        assert_eq!(projection_box(0.1, &zero, 0.0, f64::INFINITY), f64::INFINITY);
        assert!((projection_box(0.1, &basis, 0.0, 0.15) - 0.025).abs() < 1e-15);
    }

    fn random_problem(seed: u64, n_hat: usize, n_b: usize, rows: usize) -> (BetaLsProblem, Vec<f64>) {
        let mut r = rng::stream(seed, 0);
        let basis = build_bias_basis(n_hat, n_b, seed).unwrap();
        let beta_true: Vec<f64> = rng::normals(&mut r, n_b).iter().map(|v| 0.3 * v).collect();
        let hb = basis.apply(&beta_true);
        let z: Vec<Vec<f64>> = (0..rows)
            .map(|_| rng::normals(&mut r, n_hat).iter().map(|v| 0.5 * v).collect())
            .collect();
        let targets = z.iter().map(|z| z.iter().zip(&hb).map(|(z, b)| (z + b).tanh()).collect()).collect();
        (
            BetaLsProblem {
                targets,
                z,
                basis,
                activation: Activation::Tanh,
            },
            beta_true,
        )
    }

    #[test]
    fn beta_ls_recovers_zero_residual_truth() {
        for seed in 0..5 {
            let (p, truth) = random_problem(seed, 12, 5, 7);
            let sol = p.solve(&[0.0; 5], 1e-10, 5000);
            for (a, b) in sol.beta.iter().zip(&truth) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn beta_ls_closed_form() {
        let p = BetaLsProblem {
            targets: vec![vec![0.6, -0.3]],
            z: vec![vec![0.0, 0.0]],
            basis: build_bias_basis(2, 2, 0).unwrap(),
            activation: Activation::Tanh,
        };
        let sol = p.solve(&[0.0, 0.0], 1e-12, 2000);
        assert!((sol.beta[0] - 0.6f64.atanh()).abs() < 1e-9);
        assert!((sol.beta[1] - (-0.3f64).atanh()).abs() < 1e-9);
    }

    #[test]
    fn beta_ls_gradient_matches_central_differences() {
        for seed in 10..30 {
            let (mut p, _) = random_problem(seed, 9, 4, 3);
            p.targets.iter_mut().flatten().for_each(|t| *t *= 0.7);
            let beta: Vec<f64> = rng::normals(&mut rng::stream(seed, 1), 4);
            let g = p.gradient(&beta);
            for c in 0..4 {
                let h = 1e-5;
                let mut bp = beta.clone();
                bp[c] += h;
                let mut bm = beta.clone();
                bm[c] -= h;
                let fd = (p.objective(&bp) - p.objective(&bm)) / (2.0 * h);
                assert!((fd - g[c]).abs() <= 1e-6 * g[c].abs().max(1.0), "{fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn grid_layout() {
        let mut cfg = RunConfig::default();
        assert_eq!(grid_nodes(&cfg).len(), 216);
        let g = grid_nodes(&cfg);
        assert_eq!(g[0], [0.065, 0.034, 0.040]);
        assert_eq!(g[215], [0.120, 0.094, 0.107]);
        assert_eq!(g[1][0], 0.065);
        assert_eq!(g[36][0], linspace(0.065, 0.120, 6)[1]);
        cfg.grid_n = 1;
        assert_eq!(grid_nodes(&cfg), vec![[0.065, 0.034, 0.040]]);
    }

    #[test]
    fn theta_free_round_trip() {
        let t = Theta {
            h1: 0.1,
            h2: 0.2,
            zeta_s: 0.3,
            beta1: vec![1.0],
            beta2: vec![2.0],
            beta: vec![3.0, 4.0],
        };
        assert_eq!(t.free(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.full(), vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.with_free(&[5.0, 6.0, 7.0, 8.0]).beta, vec![7.0, 8.0]);
    }

    #[test]
    fn germ_policies() {
        let cfg = smoke_config();
        let g = Germs::draw(&cfg);
        assert_eq!(g, Germs::draw(&cfg));
        assert_eq!(g.eta_for(3).as_ref(), g.eta_for(4).as_ref());
        let ind = Germs {
            policy: GermPolicy::Independent,
            ..g.clone()
        };
        assert_ne!(ind.eta_for(3).as_ref(), ind.eta_for(4).as_ref());
        assert_eq!(ind.eta_for(3).as_ref(), ind.eta_for(3).as_ref());
        assert_ne!(g.digest(), ind.digest());
    }

    #[test]
    fn small_pipeline_properties() {
        let cfg = smoke_config();
        let ctx = Context::from_config(cfg.clone()).unwrap();
        let data = generate_synthetic(12, 1, cfg.n_in, cfg.n_out, 5).unwrap().0;
        let ev = Evaluator::new(&ctx, &data).unwrap();
        let theta = grid_theta(&ctx, [cfg.h1, cfg.h2, cfg.zeta_s], vec![0.0; ctx.bias_basis.n_b()]);

        // determinism under common random numbers
        let a = ev.loss(&theta, 1).unwrap();
        assert_eq!(a.to_bits(), ev.loss(&theta, 99).unwrap().to_bits());

        // additivity over rows
        let (arch, sys) = ev.realize(&theta, 0).unwrap();
        let s = cfg.solve_settings();
        let bias = vec![0.0; ctx.cfg.n_hat()];
        let whole = ensemble_nll(&arch.partition, &sys, &bias, &data, &s, cfg.kde_mode).unwrap();
        let first = data.select(&(0..5).collect::<Vec<_>>());
        let rest = data.select(&(5..12).collect::<Vec<_>>());
        let parts = ensemble_nll(&arch.partition, &sys, &bias, &first, &s, cfg.kde_mode).unwrap()
            + ensemble_nll(&arch.partition, &sys, &bias, &rest, &s, cfg.kde_mode).unwrap();
        assert!((whole - parts).abs() <= 1e-10 * whole.abs().max(1.0));

        // ± evaluations of a coordinate the pipeline ignores: exactly equal
        // under common random numbers, different under independent germs
        let ind_ctx = Context::new(
            cfg.clone(),
            Germs {
                policy: GermPolicy::Independent,
                ..ctx.germs.clone()
            },
        )
        .unwrap();
        let ind = Evaluator::new(&ind_ctx, &data).unwrap();
        assert_eq!(ev.loss(&theta, 7).unwrap() - ev.loss(&theta, 8).unwrap(), 0.0);
        assert_ne!(ind.loss(&theta, 7).unwrap(), ind.loss(&theta, 8).unwrap());
    }

    #[test]
    fn single_node_grid_returns_that_node() {
        let cfg = RunConfig {
            grid_n: 1,
            ..smoke_config()
        };
        let ctx = Context::from_config(cfg.clone()).unwrap();
        let data = generate_synthetic(10, 1, cfg.n_in, cfg.n_out, 2).unwrap().0;
        let ev = Evaluator::new(&ctx, &data).unwrap();
        let (best, all) = trial_grid_search(&ev).unwrap();
        assert_eq!(best, 0);
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].node, [cfg.grid_h1[0], cfg.grid_h2[0], cfg.grid_zeta[0]]);
    }
}
