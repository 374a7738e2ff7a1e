//! Synthetic datasets, dataset CSV files and the trained-model file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use faer::Mat;

use crate::config::{GermPolicy, RunConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::topology::IoSets;
use crate::training::{Germs, Theta};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Row-wise input/output pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_in(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_out(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.outputs.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} output rows",
                self.inputs.len(),
                self.outputs.len()
            )));
        }
        let (ni, no) = (self.n_in(), self.n_out());
        for (i, (x, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            if x.len() != ni || y.len() != no {
                return Err(Error::Shape(format!("row {i} is ragged")));
            }
            if !x.iter().chain(y).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("row {i}")));
            }
        }
        Ok(())
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: rows.iter().map(|&i| self.inputs[i].clone()).collect(),
            outputs: rows.iter().map(|&i| self.outputs[i].clone()).collect(),
            split: self.split,
            seed: self.seed,
        }
    }
}

/// The fixed random maps behind the synthetic data.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    /// n_out × n_in, entries N(0, 4/n_in).
    pub a: Mat<f64>,
    /// n_out × 4, entries N(0, 1/4).
    pub b: Mat<f64>,
    /// n_out × 4, entries N(0, 1/4).
    pub c: Mat<f64>,
}

pub const N_GERMS: usize = 4;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticModel {
    pub fn new(n_in: usize, n_out: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0);
        let sa = 2.0 / (n_in as f64).sqrt();
        let ga = rng::normals(&mut r, n_out * n_in);
        let gb = rng::normals(&mut r, n_out * N_GERMS);
        let gc = rng::normals(&mut r, n_out * N_GERMS);
        Self {
            a: Mat::from_fn(n_out, n_in, |k, j| sa * ga[k * n_in + j]),
            b: Mat::from_fn(n_out, N_GERMS, |k, j| 0.5 * gb[k * N_GERMS + j]),
            c: Mat::from_fn(n_out, N_GERMS, |k, j| 0.5 * gc[k * N_GERMS + j]),
        }
    }

    /// y = 0.9 tanh(raw) with
    /// raw_k = tanh(a_k) + 0.3 (Bξ)_k / (1 + a_k²) + 0.2 ((Cξ)_k² − ‖C_k‖²) σ(a_k), a = Ax.
    pub fn output(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        (0..self.a.nrows())
            .map(|k| {
                let a: f64 = (0..self.a.ncols()).map(|j| self.a[(k, j)] * x[j]).sum();
                let bx: f64 = (0..N_GERMS).map(|j| self.b[(k, j)] * xi[j]).sum();
                let cx: f64 = (0..N_GERMS).map(|j| self.c[(k, j)] * xi[j]).sum();
                let cn: f64 = (0..N_GERMS).map(|j| self.c[(k, j)].powi(2)).sum();
                let raw = a.tanh() + 0.3 * bx / (1.0 + a * a) + 0.2 * (cx * cx - cn) * sigmoid(a);
                0.9 * raw.tanh()
            })
            .collect()
    }
}

/// Train and test sets drawn row by row from one seeded stream; the first
/// `n_d` rows go to training.
pub fn generate_synthetic(n_d: usize, n_test: usize, n_in: usize, n_out: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_d == 0 || n_test == 0 || n_in == 0 || n_out == 0 {
        return Err(Error::InvalidParameter("dataset sizes must be at least 1".into()));
    }
    let model = SyntheticModel::new(n_in, n_out, seed);
    let mut r = rng::stream(seed, 1);
    let mut rows = |n: usize, split: Split| {
        let mut ds = Dataset {
            inputs: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            split,
            seed,
        };
        for _ in 0..n {
            let x = rng::uniforms(&mut r, n_in);
            let xi = rng::normals(&mut r, N_GERMS);
            ds.outputs.push(model.output(&x, &xi));
            ds.inputs.push(x);
        }
        ds
    };
    let train = rows(n_d, Split::Train);
    let test = rows(n_test, Split::Test);
    Ok((train, test))
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<String> = (1..=ds.n_in())
        .map(|j| format!("x_{j}"))
        .chain((1..=ds.n_out()).map(|k| format!("y_{k}")))
        .collect();
    wr.write_record(&header)?;
    for (x, y) in ds.inputs.iter().zip(&ds.outputs) {
        wr.write_record(x.iter().chain(y).map(|v| format!("{v:.16e}")))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R, split: Split) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rd.headers()?.clone();
    let n_in = header.iter().take_while(|h| h.starts_with("x_")).count();
    for (j, h) in header.iter().enumerate() {
        let want = if j < n_in {
            format!("x_{}", j + 1)
        } else {
            format!("y_{}", j + 1 - n_in)
        };
        if h.trim() != want {
            return Err(Error::Parse(format!("header column {}: expected `{want}`, found `{h}`", j + 1)));
        }
    }
    let n_out = header.len() - n_in;
    if n_in == 0 || n_out == 0 {
        return Err(Error::Parse("header needs at least one x_ and one y_ column".into()));
    }
    let mut ds = Dataset {
        inputs: Vec::new(),
        outputs: Vec::new(),
        split,
        seed: 0,
    };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != n_in + n_out {
            return Err(Error::Parse(format!("row {}: {} cells, expected {}", i + 1, rec.len(), n_in + n_out)));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(j, c)| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}, column `{}`: `{c}` is not a number", i + 1, &header[j])))
            })
            .collect::<Result<Vec<f64>>>()?;
        ds.inputs.push(vals[..n_in].to_vec());
        ds.outputs.push(vals[n_in..].to_vec());
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?), split)
}

/// Everything needed to rebuild the trained network exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub theta: Theta,
    /// Input/output selection frozen at θ_0.
    pub io: IoSets,
    pub germs: Germs,
    /// Training NLL at θ_opt and the training-set size.
    pub nll_train_opt: f64,
    pub n_d: usize,
}

pub const MODEL_FORMAT: &str = "geonet-model";
pub const MODEL_VERSION: &str = "1";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

fn ints(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_floats(key: &str, s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Parse(format!("{key}: `{t}` is not a number"))))
        .collect()
}

fn parse_ints(key: &str, s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Parse(format!("{key}: `{t}` is not an index"))))
        .collect()
}

pub fn write_model<W: Write>(m: &ModelBundle, mut w: W) -> Result<()> {
    writeln!(w, "format = {MODEL_FORMAT}")?;
    writeln!(w, "version = {MODEL_VERSION}")?;
    for (k, v) in m.config.pairs() {
        writeln!(w, "config.{k} = {v}")?;
    }
    let t = &m.theta;
    writeln!(w, "theta.h1 = {:e}", t.h1)?;
    writeln!(w, "theta.h2 = {:e}", t.h2)?;
    writeln!(w, "theta.zeta_s = {:e}", t.zeta_s)?;
    writeln!(w, "theta.beta1 = {}", floats(&t.beta1))?;
    writeln!(w, "theta.beta2 = {}", floats(&t.beta2))?;
    writeln!(w, "theta.beta = {}", floats(&t.beta))?;
    writeln!(w, "io.j_in = {}", ints(&m.io.j_in))?;
    writeln!(w, "io.j_int = {}", ints(&m.io.j_int))?;
    writeln!(w, "io.j_out = {}", ints(&m.io.j_out))?;
    writeln!(w, "train.nll_opt = {:e}", m.nll_train_opt)?;
    writeln!(w, "train.n_d = {}", m.n_d)?;
    let g = &m.germs;
    writeln!(
        w,
        "germ.policy = {}",
        match g.policy {
            GermPolicy::CommonRandomNumbers => "crn",
            GermPolicy::Independent => "independent",
        }
    )?;
    writeln!(w, "germ.seed = {}", g.seed)?;
    writeln!(w, "germ.sha256 = {}", g.digest())?;
    writeln!(w, "germ.h_arch = {}", floats(&g.h_arch))?;
    writeln!(w, "germ.u_elem = {}", floats(&g.u_elem))?;
    writeln!(w, "germ.u_a = {}", floats(&g.u_a))?;
    writeln!(w, "germ.u_b = {}", floats(&g.u_b))?;
    writeln!(w, "germ.u_poisson = {}", floats(&g.u_poisson))?;
    writeln!(w, "germ.redraw = {}", floats(&g.redraw))?;
    let eta: Vec<String> = g.eta.iter().map(|r| floats(r)).collect();
    writeln!(w, "germ.eta = {}", eta.join(";"))?;
    Ok(())
}

pub fn read_model<R: BufRead>(r: R) -> Result<ModelBundle> {
    let mut kv = BTreeMap::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected `key = value`, got `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::MissingKey(k.into()));
    if get("format")? != MODEL_FORMAT {
        return Err(Error::Parse(format!("not a model file (format = {})", get("format")?)));
    }
    let version = get("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version.into(),
            expected: MODEL_VERSION.into(),
        });
    }
    let mut config = RunConfig::default();
    let mut errors = Vec::new();
    for key in RunConfig::keys() {
        let full = format!("config.{key}");
        match kv.get(&full) {
            Some(v) => {
                if let Err(e) = config.set(key, v) {
                    errors.push(format!("{full}: {e}"));
                }
            }
            None => errors.push(format!("{full}: missing")),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let f = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Parse(format!("{k}: not a number")))
    };
    let theta = Theta {
        h1: f("theta.h1")?,
        h2: f("theta.h2")?,
        zeta_s: f("theta.zeta_s")?,
        beta1: parse_floats("theta.beta1", get("theta.beta1")?)?,
        beta2: parse_floats("theta.beta2", get("theta.beta2")?)?,
        beta: parse_floats("theta.beta", get("theta.beta")?)?,
    };
    let io = IoSets {
        j_in: parse_ints("io.j_in", get("io.j_in")?)?,
        j_int: parse_ints("io.j_int", get("io.j_int")?)?,
        j_out: parse_ints("io.j_out", get("io.j_out")?)?,
    };
    let policy = match get("germ.policy")? {
        "crn" => GermPolicy::CommonRandomNumbers,
        "independent" => GermPolicy::Independent,
        p => return Err(Error::Parse(format!("germ.policy: unknown policy `{p}`"))),
    };
    let eta_text = get("germ.eta")?;
    let eta = if eta_text.is_empty() {
        Vec::new()
    } else {
        eta_text
            .split(';')
            .map(|r| parse_floats("germ.eta", r))
            .collect::<Result<Vec<_>>>()?
    };
    let germs = Germs {
        seed: get("germ.seed")?
            .parse()
            .map_err(|_| Error::Parse("germ.seed: not an integer".into()))?,
        policy,
        h_arch: parse_floats("germ.h_arch", get("germ.h_arch")?)?,
        u_elem: parse_floats("germ.u_elem", get("germ.u_elem")?)?,
        u_a: parse_floats("germ.u_a", get("germ.u_a")?)?,
        u_b: parse_floats("germ.u_b", get("germ.u_b")?)?,
        u_poisson: parse_floats("germ.u_poisson", get("germ.u_poisson")?)?,
        redraw: parse_floats("germ.redraw", get("germ.redraw")?)?,
        eta,
    };
    let digest = get("germ.sha256")?;
    if germs.digest() != digest {
        return Err(Error::Parse("germ block does not match its sha256".into()));
    }
    Ok(ModelBundle {
        config,
        theta,
        io,
        germs,
        nll_train_opt: f("train.nll_opt")?,
        n_d: get("train.n_d")?
            .parse()
            .map_err(|_| Error::Parse("train.n_d: not an integer".into()))?,
    })
}

pub fn save_model(m: &ModelBundle, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn germ_off_path() {
        let m = SyntheticModel::new(3, 5, 4);
        let x = [0.2, 0.5, 0.9];
        let y = m.output(&x, &[0.0; 4]);
        for k in 0..5 {
            let a: f64 = (0..3).map(|j| m.a[(k, j)] * x[j]).sum();
            let cn: f64 = (0..4).map(|j| m.c[(k, j)].powi(2)).sum();
            let want = 0.9 * (a.tanh() - 0.2 * cn * sigmoid(a)).tanh();
            assert!((y[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (a, b) = generate_synthetic(30, 10, 4, 6, 9).unwrap();
        let (c, d) = generate_synthetic(30, 10, 4, 6, 9).unwrap();
        assert_eq!((&a, &b), (&c, &d));
        assert_eq!((a.len(), b.len(), a.n_in(), a.n_out()), (30, 10, 4, 6));
        assert!(a.outputs.iter().flatten().all(|y| y.abs() < 0.9));
        assert!(a.inputs.iter().flatten().all(|x| (0.0..1.0).contains(x)));
        assert_ne!(a.inputs[0], b.inputs[0]);
        let (e, _) = generate_synthetic(30, 10, 4, 6, 10).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn outputs_are_skewed() {
        let m = SyntheticModel::new(5, 20, 2);
        let x = [0.3, 0.6, 0.1, 0.8, 0.5];
        let mut r = rng::stream(77, 0);
        let n = 50_000;
        let ys: Vec<Vec<f64>> = (0..n).map(|_| m.output(&x, &rng::normals(&mut r, 4))).collect();
        let skewed = (0..20)
            .filter(|&k| {
                let v: Vec<f64> = ys.iter().map(|y| y[k]).collect();
                let mu = v.iter().sum::<f64>() / n as f64;
                let m2 = v.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / n as f64;
                let m3 = v.iter().map(|y| (y - mu).powi(3)).sum::<f64>() / n as f64;
                (m3 / m2.powf(1.5)).abs() > 0.05
            })
            .count();
        assert!(skewed >= 6, "only {skewed} skewed components");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (a, _) = generate_synthetic(12, 1, 3, 4, 5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_1,x_2,x_3,y_1,y_2,y_3,y_4\n"));
        let b = read_dataset(&buf[..], Split::Train).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let e = read_dataset("x_1,x_3,y_1\n1,2,3\n".as_bytes(), Split::Test).unwrap_err();
        assert!(e.to_string().contains("x_2"), "{e}");
        let e = read_dataset("x_1,y_1\n1,2\n3\n".as_bytes(), Split::Test).unwrap_err();
        assert!(matches!(e, Error::Parse(_) | Error::Csv(_)));
        let e = read_dataset("x_1,y_1\n1,abc\n".as_bytes(), Split::Test).unwrap_err();
        assert!(e.to_string().contains("y_1"), "{e}");
    }
}
