//! One function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smoothflow::diffengine::Matrix;
use smoothflow::dynamics::{energy_stats, run_md, select_dt, FlowPotential, Frame, Potential};
use smoothflow::flow::{log_density_and_force, sample, FlowModel};
use smoothflow::rootfind::{bench_rootfind, BENCH_HEADER};
use smoothflow::training::data::{generate_dataset, mh_sample, split, write_matrix_csv, Dataset, SamplerConfig};
use smoothflow::training::losses::{kld_and_efficiency, nll_fme};
use smoothflow::training::potential::{Support, ToyPotential};
use smoothflow::training::{train as fit, MetricRow, TrainError, ValidationRow};

use crate::config::{RunConfig, Seeds};
use crate::CliError;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Rows evaluated per chunk when scoring a dataset.
const EVAL_CHUNK: usize = 1000;

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Config(e.to_string()))
}

fn load_model(path: &Path) -> Result<FlowModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
    FlowModel::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn check_compatible(model: &FlowModel, data: &Dataset) -> Result<(), CliError> {
    if model.domain_tags != data.meta.domain_tags {
        return Err(CliError::Config(format!(
            "model domains {:?} do not match dataset domains {:?}",
            model.domain_tags, data.meta.domain_tags
        )));
    }
    Ok(())
}

pub fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<String, CliError> {
    let cfg = load_config(config, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::runtime)?;
    }
    let data = generate_dataset(&cfg.potential, &cfg.sampler_config()).map_err(CliError::runtime)?;
    data.save(out).map_err(CliError::runtime)?;
    Ok(format!(
        "wrote {} samples ({} dropped, acceptance {:.3}) to {}",
        data.samples.len(),
        data.meta.n_dropped,
        data.meta.acceptance_rate,
        out.display()
    ))
}

/// Files written by [`train`].
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub final_model: PathBuf,
    pub metrics: PathBuf,
    pub validation: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.json"),
            final_model: dir.join("final.json"),
            metrics: dir.join("metrics.csv"),
            validation: dir.join("validation.csv"),
        }
    }
}

pub fn train(config: &Path, data: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<String, CliError> {
    let cfg = load_config(config, seed)?;
    let dataset = load_dataset(data)?;
    let spec = cfg.flow_spec();
    if spec.domain_tags != dataset.meta.domain_tags {
        return Err(CliError::Config(format!(
            "config potential has domains {:?}, dataset has {:?}",
            spec.domain_tags, dataset.meta.domain_tags
        )));
    }
    let seeds = cfg.seeds();
    let mut model = FlowModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(seeds.init)).map_err(CliError::runtime)?;
    let (train_set, valid) = split(&dataset.samples, seeds.train);
    let target = dataset.unit_potential();
    let tc = cfg.train_config();
    let report = fit(&mut model, &train_set, &valid, Some(&target), &tc, |_| {}).map_err(|e| match e {
        TrainError::Config(_) | TrainError::NoTarget => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;

    let dir = out.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    let files = TrainOutputs::in_dir(&dir);
    let with_kld = tc.weights().1 > 0.0;
    let mut metrics = format!("{}\n", MetricRow::header(with_kld));
    for r in &report.metrics {
        let _ = writeln!(metrics, "{}", r.csv_line());
    }
    let mut validation = format!("{}\n", ValidationRow::header(with_kld));
    for r in &report.validation {
        let _ = writeln!(validation, "{}", r.csv_line());
    }
    write_text(&files.metrics, &metrics)?;
    write_text(&files.validation, &validation)?;
    write_text(&files.checkpoint, &(report.best.to_json().map_err(CliError::runtime)? + "\n"))?;
    write_text(&files.final_model, &(model.to_json().map_err(CliError::runtime)? + "\n"))?;

    let best = report.validation.iter().find(|r| r.iter == report.best_iteration);
    let last = report.validation.last();
    let mut s = format!("trained {} parameters for {} iterations\n", model.n_params(), tc.iterations);
    if let Some(l) = last {
        let _ = writeln!(s, "final validation: nll {:.6} fme {:.6}", l.nll, l.fme);
    }
    if let Some(b) = best {
        let _ = writeln!(s, "best validation (iteration {}): nll {:.6} fme {:.6}", b.iter, b.nll, b.fme);
    }
    let _ = write!(s, "wrote {}", dir.display());
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub schema_version: u32,
    pub n_samples: usize,
    pub nll: f64,
    pub fme: f64,
    /// Reverse KL divergence up to the unknown log partition function.
    pub kld: f64,
    /// Kish effective sample size over the number of flow samples.
    pub efficiency: f64,
    pub kld_samples: usize,
}

/// Returns the summary and, when `out` is `None`, the metrics JSON to print.
pub fn eval(model: &Path, data: &Path, out: Option<&Path>, kld_samples: usize, seed: u64) -> Result<(String, Option<String>), CliError> {
    let model = load_model(model)?;
    let data = load_dataset(data)?;
    check_compatible(&model, &data)?;
    if kld_samples == 0 {
        return Err(CliError::Config("--kld-samples must be positive".into()));
    }
    let (nll, fme) = nll_fme(&model, &data.samples.x, &data.samples.f, EVAL_CHUNK).map_err(CliError::runtime)?;
    let (kld, efficiency) =
        kld_and_efficiency(&model, &data.unit_potential(), kld_samples, Seeds::from_master(seed).eval).map_err(CliError::runtime)?;
    let m = EvalMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        n_samples: data.samples.len(),
        nll,
        fme,
        kld,
        efficiency,
        kld_samples,
    };
    let json = serde_json::to_string_pretty(&m).map_err(CliError::runtime)? + "\n";
    let summary = format!("nll {nll:.6} fme {fme:.6} kld {kld:.6} efficiency {efficiency:.4}");
    match out {
        Some(p) => {
            write_text(p, &json)?;
            Ok((format!("{summary}\nwrote {}", p.display()), None))
        }
        None => Ok((summary, Some(json))),
    }
}

pub enum MdSource<'a> {
    Model(&'a Path),
    /// The analytic potential of the run config, in its native coordinates.
    Potential,
}

pub struct MdArgs<'a> {
    pub md_config: &'a Path,
    pub source: MdSource<'a>,
    pub out: &'a Path,
    pub replicas: usize,
    /// Halve `dt` until a short NVE run meets this per-DOF energy spread.
    pub auto_dt: Option<f64>,
    pub seed: Option<u64>,
}

/// Maximum number of `dt` halvings in an automatic sweep.
const MAX_HALVINGS: usize = 8;

pub fn sweep_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".dt_sweep.csv");
    out.with_file_name(name)
}

pub fn mdsim(args: &MdArgs) -> Result<String, CliError> {
    if args.replicas == 0 {
        return Err(CliError::Config("--replicas must be positive".into()));
    }
    let cfg = load_config(args.md_config, args.seed)?;
    let mut md = cfg.md_config();
    let model;
    let (potential, initial): (Box<dyn Potential + '_>, Matrix) = match args.source {
        MdSource::Model(path) => {
            model = load_model(path)?;
            let (x, _) = sample(&model, args.replicas, md.seed).map_err(CliError::runtime)?;
            (Box::new(FlowPotential { model: &model }), x)
        }
        MdSource::Potential => {
            let sampler = SamplerConfig { n_chains: args.replicas, thin_steps: 1, seed: md.seed, ..cfg.dataset };
            let chains = mh_sample(&cfg.potential, &sampler).map_err(CliError::runtime)?;
            (Box::new(cfg.potential.clone()), chains.x)
        }
    };
    let d = potential.dims();
    let mut s = String::new();
    if let Some(target) = args.auto_dt {
        let probe = md.prod_steps.min(1000);
        let (dt, rows) = select_dt(&initial, potential.as_ref(), &md, probe, target, MAX_HALVINGS).map_err(CliError::runtime)?;
        let mut csv = String::from("dt,worst_std_per_dof\n");
        for r in &rows {
            let _ = writeln!(csv, "{:?},{:?}", r.dt, r.worst_std_per_dof);
        }
        write_text(&sweep_path(args.out), &csv)?;
        let _ = writeln!(s, "dt sweep selected dt = {dt} after {} trial(s)", rows.len());
        md.dt = dt;
    }
    let frames = run_md(&initial, potential.as_ref(), &md).map_err(CliError::runtime)?;
    let mut csv = Frame::header(d) + "\n";
    for f in &frames {
        csv.push_str(&f.csv_line());
        csv.push('\n');
    }
    write_text(args.out, &csv)?;
    let stats = energy_stats(&frames, d);
    let worst = stats.iter().map(|e| e.std_per_dof).fold(0.0, f64::max);
    let slope = stats.iter().map(|e| e.slope_per_step.abs()).fold(0.0, f64::max);
    let _ = write!(
        s,
        "{} replicas x {} NVE steps at dt {}: max energy std per DOF {worst:.3e}, max |drift| {slope:.3e} per step\nwrote {}",
        args.replicas,
        md.prod_steps,
        md.dt,
        args.out.display()
    );
    Ok(s)
}

pub fn bench(dims: &[usize], bins: &[usize], batch: usize, reps: usize, seed: u64, out: &Path) -> Result<String, CliError> {
    if dims.is_empty() || bins.is_empty() || batch == 0 {
        return Err(CliError::Config("--dims, --bins and --batch must be non-empty and positive".into()));
    }
    if let Some(&k) = bins.iter().find(|&&k| k < 2) {
        return Err(CliError::Config(format!("bin count must be >= 2, got {k}")));
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    let mut s = String::new();
    for &dim in dims {
        for row in bench_rootfind(dim, bins, batch, reps, seed).map_err(CliError::runtime)? {
            let _ = writeln!(s, "dim {:>4} K {:>4}: {:>5.1} iterations, {:.3} ms", row.dim, row.bins, row.mean_iters, row.mean_ms);
            csv.push_str(&row.csv_line());
            csv.push('\n');
        }
    }
    write_text(out, &csv)?;
    let _ = write!(s, "wrote {}", out.display());
    Ok(s)
}

pub enum GridSource<'a> {
    Model(&'a Path),
    /// The analytic potential of a run config.
    Potential(&'a Path),
}

/// Cell centres of an `r^d` grid over `[lo, hi]^d`, first coordinate
/// varying slowest.
pub fn grid_points(d: usize, r: usize, lo: f64, hi: f64) -> Matrix {
    let h = (hi - lo) / r as f64;
    Array2::from_shape_fn((r.pow(d as u32), d), |(i, j)| {
        let k = (i / r.pow((d - 1 - j) as u32)) % r;
        lo + (k as f64 + 0.5) * h
    })
}

pub fn export_grid(source: GridSource, resolution: usize, out: &Path) -> Result<String, CliError> {
    if resolution == 0 {
        return Err(CliError::Config("--resolution must be positive".into()));
    }
    let (x, value, force, label) = match source {
        GridSource::Model(path) => {
            let model = load_model(path)?;
            let x = grid_points(model.dims, resolution, 0.0, 1.0);
            let (lp, f) = log_density_and_force(&model, &x).map_err(CliError::runtime)?;
            (x, lp, f, "log_density")
        }
        GridSource::Potential(config) => {
            let cfg = RunConfig::load(config)?;
            let p: &ToyPotential = &cfg.potential;
            let (lo, hi) = match p.support() {
                Support::Periodic { lo, hi } => (lo, hi),
                Support::Unbounded { half_width } => (-half_width, half_width),
            };
            let x = grid_points(p.dims(), resolution, lo, hi);
            let (u, f) = p.eval_batch(&x);
            (x, u, f, "u")
        }
    };
    let d = x.ncols();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push(label.into());
    header.extend((1..=d).map(|j| format!("f{j}")));
    let v = Array2::from_shape_vec((value.len(), 1), value).expect("column");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::runtime)?;
    }
    write_matrix_csv(out, &header, &[&x, &v, &force]).map_err(CliError::runtime)?;
    Ok(format!("wrote {} grid rows to {}", x.nrows(), out.display()))
}
