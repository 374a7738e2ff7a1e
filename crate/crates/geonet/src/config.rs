//! Run configuration: every tunable in one `key = value` document.
//!
//! Defaults reproduce the torus experiment (80×24 mesh, N = 200, 20 inputs,
//! 100 outputs, 75th-percentile mask, n_sim = 100, m = 100).

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::basis_fields::BasisKind;
use crate::error::{Error, Result};
use crate::geometry::TorusParams;
use crate::likelihood::KdeMode;
use crate::solver::{Activation, SolveSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GermPolicy {
    /// One set of weight germs η^1..η^n_sim shared by every θ evaluation.
    #[default]
    CommonRandomNumbers,
    /// Fresh weight germs for every θ evaluation.
    Independent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub major_radius: f64,
    pub minor_radius: f64,
    pub n_u: usize,
    pub n_v: usize,
    pub tau0: f64,
    pub m: usize,
    pub n_h: usize,
    pub basis: BasisKind,
    pub c_lo: f64,
    pub c_hi: f64,
    pub h1: f64,
    pub h2: f64,
    pub zeta_s: f64,
    pub n_neurons: usize,
    pub n_in: usize,
    pub n_out: usize,
    /// Candidate count M; `None` means 2·n_elem.
    pub n_candidates: Option<usize>,
    pub tau_prc: f64,
    /// Bias dimension; `None` means n̂ = N − n_in.
    pub n_b: Option<usize>,
    pub n_sim: usize,
    pub alpha: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub activation: Activation,
    pub kde_mode: KdeMode,
    pub grid_h1: [f64; 2],
    pub grid_h2: [f64; 2],
    pub grid_zeta: [f64; 2],
    pub grid_n: usize,
    pub adam_lr_h: f64,
    pub adam_lr_beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub fd_rel_step: f64,
    pub n_wind: usize,
    pub delta_tol: f64,
    pub max_iters: usize,
    pub germ_policy: GermPolicy,
    pub beta_ls_tol: f64,
    pub beta_ls_max_steps: usize,
    pub p_c: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            major_radius: 2.0,
            minor_radius: 0.7,
            n_u: 80,
            n_v: 24,
            tau0: 1.0,
            m: 100,
            n_h: 0,
            basis: BasisKind::Smooth,
            c_lo: 1e-12,
            c_hi: f64::INFINITY,
            h1: 0.087,
            h2: 0.058,
            zeta_s: 0.0668,
            n_neurons: 200,
            n_in: 20,
            n_out: 100,
            n_candidates: None,
            tau_prc: 75.0,
            n_b: None,
            n_sim: 100,
            alpha: 0.5,
            eps: 0.01,
            max_iter: 500,
            activation: Activation::Tanh,
            kde_mode: KdeMode::Joint,
            grid_h1: [0.065, 0.120],
            grid_h2: [0.034, 0.094],
            grid_zeta: [0.040, 0.107],
            grid_n: 6,
            adam_lr_h: 0.001,
            adam_lr_beta: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.998,
            adam_eps: 1e-8,
            fd_rel_step: 1e-6,
            n_wind: 3,
            delta_tol: 5e-3,
            max_iters: 100,
            germ_policy: GermPolicy::CommonRandomNumbers,
            beta_ls_tol: 1e-6,
            beta_ls_max_steps: 2000,
            p_c: 0.95,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_pair(v: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected `lo, hi`, got `{v}`"));
    }
    Ok([parse(parts[0])?, parse(parts[1])?])
}

fn parse_auto(v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        Self::default().pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(v)?,
            "major_radius" => self.major_radius = parse(v)?,
            "minor_radius" => self.minor_radius = parse(v)?,
            "n_u" => self.n_u = parse(v)?,
            "n_v" => self.n_v = parse(v)?,
            "tau0" => self.tau0 = parse(v)?,
            "m" => self.m = parse(v)?,
            "n_h" => self.n_h = parse(v)?,
            "basis" => {
                self.basis = match v {
                    "smooth" => BasisKind::Smooth,
                    "nonsmooth" => BasisKind::Nonsmooth,
                    _ => return Err(format!("expected `smooth` or `nonsmooth`, got `{v}`")),
                }
            }
            "c_lo" => self.c_lo = parse(v)?,
            "c_hi" => self.c_hi = parse(v)?,
            "h1" => self.h1 = parse(v)?,
            "h2" => self.h2 = parse(v)?,
            "zeta_s" => self.zeta_s = parse(v)?,
            "n_neurons" => self.n_neurons = parse(v)?,
            "n_in" => self.n_in = parse(v)?,
            "n_out" => self.n_out = parse(v)?,
            "n_candidates" => self.n_candidates = parse_auto(v)?,
            "tau_prc" => self.tau_prc = parse(v)?,
            "n_b" => self.n_b = parse_auto(v)?,
            "n_sim" => self.n_sim = parse(v)?,
            "alpha" => self.alpha = parse(v)?,
            "eps" => self.eps = parse(v)?,
            "max_iter" => self.max_iter = parse(v)?,
            "activation" => {
                self.activation = match v {
                    "tanh" => Activation::Tanh,
                    "softsign" => Activation::Softsign,
                    _ => return Err(format!("expected `tanh` or `softsign`, got `{v}`")),
                }
            }
            "kde_mode" => {
                self.kde_mode = match v {
                    "joint" => KdeMode::Joint,
                    "marginals" => KdeMode::ProductOfMarginals,
                    _ => return Err(format!("expected `joint` or `marginals`, got `{v}`")),
                }
            }
            "grid_h1" => self.grid_h1 = parse_pair(v)?,
            "grid_h2" => self.grid_h2 = parse_pair(v)?,
            "grid_zeta" => self.grid_zeta = parse_pair(v)?,
            "grid_n" => self.grid_n = parse(v)?,
            "adam_lr_h" => self.adam_lr_h = parse(v)?,
            "adam_lr_beta" => self.adam_lr_beta = parse(v)?,
            "adam_beta1" => self.adam_beta1 = parse(v)?,
            "adam_beta2" => self.adam_beta2 = parse(v)?,
            "adam_eps" => self.adam_eps = parse(v)?,
            "fd_rel_step" => self.fd_rel_step = parse(v)?,
            "n_wind" => self.n_wind = parse(v)?,
            "delta_tol" => self.delta_tol = parse(v)?,
            "max_iters" => self.max_iters = parse(v)?,
            "germ_policy" => {
                self.germ_policy = match v {
                    "crn" => GermPolicy::CommonRandomNumbers,
                    "independent" => GermPolicy::Independent,
                    _ => return Err(format!("expected `crn` or `independent`, got `{v}`")),
                }
            }
            "beta_ls_tol" => self.beta_ls_tol = parse(v)?,
            "beta_ls_max_steps" => self.beta_ls_max_steps = parse(v)?,
            "p_c" => self.p_c = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Canonical `(key, value)` list, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let pair = |p: [f64; 2]| format!("{}, {}", p[0], p[1]);
        vec![
            ("seed", self.seed.to_string()),
            ("major_radius", self.major_radius.to_string()),
            ("minor_radius", self.minor_radius.to_string()),
            ("n_u", self.n_u.to_string()),
            ("n_v", self.n_v.to_string()),
            ("tau0", self.tau0.to_string()),
            ("m", self.m.to_string()),
            ("n_h", self.n_h.to_string()),
            (
                "basis",
                match self.basis {
                    BasisKind::Smooth => "smooth",
                    BasisKind::Nonsmooth => "nonsmooth",
                }
                .into(),
            ),
            ("c_lo", self.c_lo.to_string()),
            ("c_hi", self.c_hi.to_string()),
            ("h1", self.h1.to_string()),
            ("h2", self.h2.to_string()),
            ("zeta_s", self.zeta_s.to_string()),
            ("n_neurons", self.n_neurons.to_string()),
            ("n_in", self.n_in.to_string()),
            ("n_out", self.n_out.to_string()),
            ("n_candidates", auto(self.n_candidates)),
            ("tau_prc", self.tau_prc.to_string()),
            ("n_b", auto(self.n_b)),
            ("n_sim", self.n_sim.to_string()),
            ("alpha", self.alpha.to_string()),
            ("eps", self.eps.to_string()),
            ("max_iter", self.max_iter.to_string()),
            (
                "activation",
                match self.activation {
                    Activation::Tanh => "tanh",
                    Activation::Softsign => "softsign",
                }
                .into(),
            ),
            (
                "kde_mode",
                match self.kde_mode {
                    KdeMode::Joint => "joint",
                    KdeMode::ProductOfMarginals => "marginals",
                }
                .into(),
            ),
            ("grid_h1", pair(self.grid_h1)),
            ("grid_h2", pair(self.grid_h2)),
            ("grid_zeta", pair(self.grid_zeta)),
            ("grid_n", self.grid_n.to_string()),
            ("adam_lr_h", self.adam_lr_h.to_string()),
            ("adam_lr_beta", self.adam_lr_beta.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("fd_rel_step", self.fd_rel_step.to_string()),
            ("n_wind", self.n_wind.to_string()),
            ("delta_tol", self.delta_tol.to_string()),
            ("max_iters", self.max_iters.to_string()),
            (
                "germ_policy",
                match self.germ_policy {
                    GermPolicy::CommonRandomNumbers => "crn",
                    GermPolicy::Independent => "independent",
                }
                .into(),
            ),
            ("beta_ls_tol", self.beta_ls_tol.to_string()),
            ("beta_ls_max_steps", self.beta_ls_max_steps.to_string()),
            ("p_c", self.p_c.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex sha256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped. Every bad line and every failed check is
    /// reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let k = k.trim();
            if let Err(e) = cfg.set(k, v) {
                errors.push(format!("{k}: {e}"));
            }
        }
        if let Err(Error::Config(v)) = cfg.validate() {
            errors.extend(v);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut errors = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errors.push(format!("{}: {e}", k.trim()));
                    }
                }
                None => errors.push(format!("override `{o}`: expected `key=value`")),
            }
        }
        if let Err(Error::Config(v)) = self.validate() {
            errors.extend(v);
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                e.push(format!("{key}: {msg}"));
            }
        };
        check(
            self.major_radius > self.minor_radius && self.minor_radius > 0.0,
            "major_radius",
            "need major_radius > minor_radius > 0",
        );
        check(self.n_u >= 3, "n_u", "must be at least 3");
        check(self.n_v >= 3, "n_v", "must be at least 3");
        check(self.tau0 > 0.0, "tau0", "must be positive");
        check(self.m >= 1 && self.m <= self.n_u * self.n_v, "m", "must lie in 1..=n_o");
        check(self.c_lo > 0.0 && self.c_lo < self.c_hi, "c_lo", "need 0 < c_lo < c_hi");
        check(self.h1 > 0.0, "h1", "must be positive");
        check(self.h2 > 0.0, "h2", "must be positive");
        check(self.zeta_s > 0.0, "zeta_s", "must be positive");
        check(self.n_in >= 1, "n_in", "must be at least 1");
        check(self.n_out >= 1, "n_out", "must be at least 1");
        check(
            self.n_in + self.n_out <= self.n_neurons,
            "n_neurons",
            "must be at least n_in + n_out",
        );
        if let Some(mc) = self.n_candidates {
            check(mc >= self.n_neurons, "n_candidates", "must be at least n_neurons");
        }
        check((0.0..100.0).contains(&self.tau_prc), "tau_prc", "must lie in [0, 100)");
        if let Some(nb) = self.n_b {
            check(
                nb >= 1 && nb <= self.n_neurons.saturating_sub(self.n_in),
                "n_b",
                "must lie in 1..=N - n_in",
            );
        }
        check(self.n_sim >= 2, "n_sim", "must be at least 2");
        check(self.alpha > 0.0 && self.alpha <= 1.0, "alpha", "must lie in (0, 1]");
        check(self.eps > 0.0, "eps", "must be positive");
        check(self.max_iter >= 1, "max_iter", "must be at least 1");
        for (key, g) in [("grid_h1", self.grid_h1), ("grid_h2", self.grid_h2), ("grid_zeta", self.grid_zeta)] {
            check(0.0 < g[0] && g[0] <= g[1] && g[1].is_finite(), key, "need 0 < lo <= hi < inf");
        }
        check(self.grid_n >= 1, "grid_n", "must be at least 1");
        check(self.adam_lr_h > 0.0, "adam_lr_h", "must be positive");
        check(self.adam_lr_beta > 0.0, "adam_lr_beta", "must be positive");
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1", "must lie in [0, 1)");
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2", "must lie in [0, 1)");
        check(self.adam_eps > 0.0, "adam_eps", "must be positive");
        check(self.fd_rel_step > 0.0, "fd_rel_step", "must be positive");
        check(self.n_wind >= 2, "n_wind", "must be at least 2");
        check(self.delta_tol >= 0.0, "delta_tol", "must be nonnegative");
        check(self.beta_ls_tol > 0.0, "beta_ls_tol", "must be positive");
        check(self.p_c > 0.0 && self.p_c < 1.0, "p_c", "must lie in (0, 1)");
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn torus(&self) -> TorusParams {
        TorusParams::new(self.major_radius, self.minor_radius, self.n_u, self.n_v)
    }

    pub fn n_hat(&self) -> usize {
        self.n_neurons - self.n_in
    }

    pub fn bias_dim(&self) -> usize {
        self.n_b.unwrap_or(self.n_hat())
    }

    pub fn candidate_count(&self) -> usize {
        self.n_candidates.unwrap_or(4 * self.n_u * self.n_v)
    }

    pub fn solve_settings(&self) -> SolveSettings {
        SolveSettings {
            alpha: self.alpha,
            eps: self.eps,
            max_iter: self.max_iter,
            activation: self.activation,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.candidate_count(), 7680);
        assert_eq!(c.bias_dim(), 180);
        assert_eq!(c.c_hi, f64::INFINITY);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# smoke\nn_neurons = 60 # fewer\nn_in=6\nn_out = 20\ngrid_h1 = 0.07, 0.1\n").unwrap();
        assert_eq!((c.n_neurons, c.n_in, c.n_out), (60, 6, 20));
        assert_eq!(c.grid_h1, [0.07, 0.1]);
        let d = c.clone().with_overrides(["germ_policy=independent", "n_b=10"]).unwrap();
        assert_eq!(d.germ_policy, GermPolicy::Independent);
        assert_eq!(d.bias_dim(), 10);
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn every_bad_key_is_reported() {
        let err = RunConfig::parse("bogus = 1\nh1 = -2\nalpha = x\nn_in = 150\nn_out = 100\n").unwrap_err();
        let Error::Config(v) = err else { panic!() };
        let text = v.join("\n");
        for key in ["bogus", "h1", "alpha", "n_neurons"] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
        assert!(v.len() >= 4);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let mut c = RunConfig::default();
        for (k, v) in RunConfig::default().pairs() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::keys().len(), 43);
    }
}
