use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use geonet::basis_fields::BasisMatrix;
use geonet::chaos_verify::comparison_table;
use geonet::config::RunConfig;
use geonet::data_io::{generate_synthetic, load_dataset, load_model, save_dataset, save_model, ModelBundle, Split};
use geonet::evaluation::{evaluate_with, pdf_curves, pdf_grid, write_pdf_curves, ConditionalKde, Predictor};
use geonet::geometry::build_torus_mesh;
use geonet::latent_field::trace;
use geonet::training::{train, Context, Germs, Theta};

#[derive(Parser)]
#[command(name = "geonet", version, about = "Random neural architectures on a torus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set n_sim=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(self.overrides.iter().map(String::as_str))?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the torus mesh and report its size and area.
    Mesh {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the mesh as `v`/`f` lines.
        #[arg(long)]
        mesh_out: Option<PathBuf>,
        /// Write the anisotropy basis columns as CSV.
        #[arg(long)]
        basis_out: Option<PathBuf>,
    },
    /// Compute the reduced latent field at the configured θ.
    Field {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write eigenvalues and the truncation-error curve as CSV.
        #[arg(long)]
        spectrum_out: Option<PathBuf>,
    },
    /// Realize one architecture at the configured θ.
    Architecture {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Neuron coordinates and intensity as CSV.
        #[arg(long)]
        neurons_out: Option<PathBuf>,
        /// Every neuron pair with its kernel weight and mask flag as CSV.
        #[arg(long)]
        edges_out: Option<PathBuf>,
    },
    /// Write a seeded synthetic train/test split.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3000)]
        n_train: usize,
        #[arg(long, default_value_t = 600)]
        n_test: usize,
        /// Defaults to the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trial grid search followed by projected Adam.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on held-out data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Training data for the reference conditional density.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1-based test row for a pdf comparison curve.
        #[arg(long, requires = "pdf_component")]
        pdf_point: Option<usize>,
        /// 1-based output component for the pdf comparison curve.
        #[arg(long, requires = "pdf_point")]
        pdf_component: Option<usize>,
    },
    /// Run a numerical self-check.
    Verify {
        #[arg(value_enum, default_value_t = Check::Chaos)]
        check: Check,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    /// Hermite chaos coefficients, closed form against quadrature.
    Chaos,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Records everything needed to rerun a command bit-for-bit.
fn write_manifest(dir: &Path, cfg: Option<&RunConfig>, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("manifest.txt"))?;
    writeln!(w, "tool = geonet {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "command = {}", std::env::args().collect::<Vec<_>>().join(" "))?;
    if let Some(cfg) = cfg {
        writeln!(w, "config_sha256 = {}", cfg.hash())?;
        writeln!(w, "seed = {}", cfg.seed)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    for (k, v) in extra {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_basis<W: Write>(mut w: W, b: &[BasisMatrix; 2]) -> Result<()> {
    let nh = b[0].n_h();
    let mut header = vec!["node".to_string()];
    for k in 1..=2 {
        header.extend((1..=nh).map(|j| format!("h{k}_{j}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for p in 0..b[0].values.nrows() {
        let mut row = vec![p.to_string()];
        for m in b {
            row.extend((0..nh).map(|j| format!("{:e}", m.values[(p, j)])));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn config_theta(cfg: &RunConfig, ctx: &Context) -> Theta {
    Theta {
        h1: cfg.h1,
        h2: cfg.h2,
        zeta_s: cfg.zeta_s,
        beta1: vec![0.0; cfg.n_h],
        beta2: vec![0.0; cfg.n_h],
        beta: vec![0.0; ctx.bias_basis.n_b()],
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Mesh {
            cfg,
            out,
            mesh_out,
            basis_out,
        } => {
            let cfg = cfg.load()?;
            let params = cfg.torus();
            let mesh = build_torus_mesh(&params)?;
            println!("nodes = {}", mesh.n_nodes());
            println!("elements = {}", mesh.n_elements());
            println!("area = {:.10}", mesh.total_area());
            println!("analytic_area = {:.10}", params.analytic_area());
            let mesh_out = mesh_out.or_else(|| out.as_ref().map(|d| d.join("mesh.obj")));
            if let Some(p) = &mesh_out {
                mesh.write_obj(create(p)?)?;
            }
            if let Some(p) = &basis_out {
                let ctx = Context::from_config(cfg.clone())?;
                write_basis(create(p)?, &ctx.basis)?;
            }
            if let Some(d) = &out {
                write_manifest(d, Some(&cfg), &[])?;
            }
        }
        Cmd::Field { cfg, out, spectrum_out } => {
            let cfg = cfg.load()?;
            let ctx = Context::from_config(cfg.clone())?;
            let sys = geonet::latent_field::FemSystem::new(
                &ctx.mesh,
                &ctx.anisotropy(cfg.h1, cfg.h2, &vec![0.0; cfg.n_h], &vec![0.0; cfg.n_h]),
                cfg.tau0,
            )?;
            let cov = geonet::latent_field::covariance_direct(&sys, geonet::latent_field::DENSE_LIMIT)?;
            let total = trace(&cov);
            let field = geonet::latent_field::reduce_direct(&cov, cfg.m)?;
            println!("m = {}", field.m());
            println!("trace = {total:e}");
            println!("lambda_1 = {:e}", field.lambda[0]);
            println!("lambda_m = {:e}", field.lambda[field.m() - 1]);
            println!("pca_error = {:e}", geonet::latent_field::pca_error(&field, total));
            let spectrum_out = spectrum_out.or_else(|| out.as_ref().map(|d| d.join("spectrum.csv")));
            if let Some(p) = &spectrum_out {
                let mut w = create(p)?;
                writeln!(w, "index,lambda,pca_error")?;
                let mut acc = 0.0;
                for (a, l) in field.lambda.iter().enumerate() {
                    acc += l;
                    writeln!(w, "{},{l:e},{:e}", a + 1, (1.0 - acc / total).max(0.0))?;
                }
            }
            if let Some(d) = &out {
                write_manifest(d, Some(&cfg), &[])?;
            }
        }
        Cmd::Architecture {
            cfg,
            out,
            neurons_out,
            edges_out,
        } => {
            let cfg = cfg.load()?;
            let ctx = Context::from_config(cfg.clone())?;
            let arch = ctx.architecture(&config_theta(&cfg, &ctx), None)?;
            let io = &arch.topology.io;
            println!("neurons = {}", cfg.n_neurons);
            println!("inputs = {}", io.j_in.len());
            println!("hidden = {}", io.j_int.len());
            println!("outputs = {}", io.j_out.len());
            println!("edges = {}", arch.edges.len());
            println!("mask_threshold = {:e}", arch.topology.threshold);
            let neurons_out = neurons_out.or_else(|| out.as_ref().map(|d| d.join("neurons.csv")));
            if let Some(p) = &neurons_out {
                let mut w = create(p)?;
                writeln!(w, "neuron,x,y,z,intensity,role")?;
                for (i, pt) in arch.neurons.points.iter().enumerate() {
                    let x = ctx.mesh.position(pt);
                    let lam: f64 = arch.neurons.psi[i].iter().map(|v| v * v).sum();
                    let role = if io.j_in.contains(&i) {
                        "input"
                    } else if io.j_out.contains(&i) {
                        "output"
                    } else {
                        "hidden"
                    };
                    writeln!(w, "{},{:e},{:e},{:e},{lam:e},{role}", i + 1, x[0], x[1], x[2])?;
                }
            }
            let edges_out = edges_out.or_else(|| out.as_ref().map(|d| d.join("edges.csv")));
            if let Some(p) = &edges_out {
                let mut w = create(p)?;
                writeln!(w, "i,j,w_g,masked")?;
                let n = cfg.n_neurons;
                for i in 0..n {
                    for j in i + 1..n {
                        let m = arch.topology.mask.get(i, j) as u8;
                        writeln!(w, "{},{},{:e},{m}", i + 1, j + 1, arch.topology.kernel[(i, j)])?;
                    }
                }
            }
            if let Some(d) = &out {
                write_manifest(d, Some(&cfg), &[("germ_sha256", ctx.germs.digest())])?;
            }
        }
        Cmd::GenerateData {
            cfg,
            n_train,
            n_test,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let seed = seed.unwrap_or(cfg.seed);
            let (tr, te) = generate_synthetic(n_train, n_test, cfg.n_in, cfg.n_out, seed)?;
            fs::create_dir_all(&out)?;
            save_dataset(&tr, &out.join("train.csv"))?;
            save_dataset(&te, &out.join("test.csv"))?;
            println!("train = {} rows, test = {} rows", tr.len(), te.len());
            write_manifest(
                &out,
                Some(&cfg),
                &[
                    ("data_seed", seed.to_string()),
                    ("train_sha256", file_sha256(&out.join("train.csv"))?),
                    ("test_sha256", file_sha256(&out.join("test.csv"))?),
                ],
            )?;
        }
        Cmd::Train { cfg, data, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, Split::Train)?;
            let germs = Germs::draw(&cfg);
            let ctx = Context::new(cfg.clone(), germs)?;
            let res = train(&ctx, &ds)?;
            fs::create_dir_all(&out)?;
            res.trace.save(&out.join("trace.csv"))?;
            res.write_grid_csv(create(&out.join("grid.csv"))?)?;
            let bundle = ModelBundle {
                config: cfg.clone(),
                theta: res.theta_opt.clone(),
                io: res.io.clone(),
                germs: ctx.germs.clone(),
                nll_train_opt: res.loss_opt,
                n_d: ds.len(),
            };
            save_model(&bundle, &out.join("model.txt"))?;
            let g = &res.grid[res.grid_best];
            println!(
                "trial optimum: h1 = {}, h2 = {}, zeta_s = {}, loss = {:e}",
                g.node[0], g.node[1], g.node[2], g.loss
            );
            println!("final loss = {:e} after {} iterations", res.loss_opt, res.trace.len() - 1);
            if let Some(d) = res.trace.last_delta() {
                println!("delta_max = {d:e}");
            }
            write_manifest(
                &out,
                Some(&cfg),
                &[
                    ("germ_sha256", ctx.germs.digest()),
                    ("data_sha256", file_sha256(&data)?),
                    ("model_sha256", file_sha256(&out.join("model.txt"))?),
                ],
            )?;
        }
        Cmd::Evaluate {
            model,
            test,
            train,
            out,
            pdf_point,
            pdf_component,
        } => {
            let bundle = load_model(&model)?;
            let te = load_dataset(&test, Split::Test)?;
            let tr = load_dataset(&train, Split::Train)?;
            let p = Predictor::from_bundle(&bundle)?;
            let rep = evaluate_with(&p, bundle.nll_train_opt, bundle.n_d, &tr, &te)?;
            rep.save(&out)?;
            rep.write_summary(std::io::stdout().lock())?;
            if let (Some(i), Some(k)) = (pdf_point, pdf_component) {
                if i == 0 || i > te.len() || k == 0 || k > te.n_out() {
                    bail!("pdf point {i} / component {k} out of range");
                }
                let x = &te.inputs[i - 1];
                let ann = p.kde(x)?;
                let mix = ConditionalKde::new(&tr)?.component(x, k - 1);
                let grid = pdf_grid(&ann, &mix, k - 1, 401);
                write_pdf_curves(&pdf_curves(&ann, &mix, k - 1, &grid), create(&out.join("pdf.csv"))?)?;
            }
            write_manifest(
                &out,
                Some(&bundle.config),
                &[
                    ("model_sha256", file_sha256(&model)?),
                    ("test_sha256", file_sha256(&test)?),
                    ("train_sha256", file_sha256(&train)?),
                ],
            )?;
        }
        Cmd::Verify { check } => match check {
            Check::Chaos => {
                let rows = comparison_table(&[0.1, 1.0, 5.0], 10, 64)?;
                println!("{:>5} {:>3} {:>24} {:>24} {:>10}", "b", "a", "closed", "quadrature", "rel_err");
                let mut worst: f64 = 0.0;
                for r in &rows {
                    println!(
                        "{:>5} {:>3} {:>24.16e} {:>24.16e} {:>10.2e}",
                        r.b, r.alpha, r.closed, r.quadrature, r.rel_err
                    );
                    worst = worst.max(r.rel_err);
                }
                println!("max relative deviation = {worst:.3e}");
                if worst > 1e-8 {
                    bail!("chaos check failed: deviation {worst:e} exceeds 1e-8");
                }
            }
        },
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
