//! Metropolis–Hastings data generation and the dataset file format.
//!
//! A dataset is a CSV `x1,…,xd,f1,…,fd` in unit coordinates plus a JSON
//! sidecar recording the potential, the affine chart from native
//! coordinates and the sampler settings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::potential::{PotentialError, Support, ToyPotential, UnitPotential};
use crate::diffengine::Matrix;
use crate::transform::Domain;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Interval coordinates are mapped from `[−w, w]` onto this sub-interval.
pub const INTERVAL_MARGIN: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}, line {line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },
    #[error("unsupported dataset schema version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub burn_steps: usize,
    pub thin_steps: usize,
    pub proposal_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_chains: 1000, burn_steps: 100, thin_steps: 10, proposal_std: 0.1, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_chains == 0 {
            return Err(DataError::NonPositive("n_chains"));
        }
        if self.thin_steps == 0 {
            return Err(DataError::NonPositive("thin_steps"));
        }
        if !(self.proposal_std > 0.0) {
            return Err(DataError::NonPositive("proposal_std"));
        }
        Ok(())
    }
}

/// `unit = scale·native + shift`, per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Compactification {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Compactification {
    /// Periodic boxes map onto `[0, 1)`; unbounded supports map
    /// `[−w, w]` onto [`INTERVAL_MARGIN`].
    pub fn for_potential(p: &ToyPotential) -> Self {
        let d = p.dims();
        let (scale, shift) = match p.support() {
            Support::Periodic { lo, hi } => (1.0 / (hi - lo), -lo / (hi - lo)),
            Support::Unbounded { half_width } => {
                let (a, b) = INTERVAL_MARGIN;
                let scale = (b - a) / (2.0 * half_width);
                (scale, a + scale * half_width)
            }
        };
        Self { scale: vec![scale; d], shift: vec![shift; d] }
    }

    pub fn unit_potential(&self, p: &ToyPotential) -> UnitPotential {
        UnitPotential { potential: p.clone(), scale: self.scale.clone(), shift: self.shift.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub potential: ToyPotential,
    pub compactification: Compactification,
    pub domain_tags: Vec<Domain>,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    /// Samples that fell outside `[0, 1]` after compactification.
    pub n_dropped: usize,
    pub acceptance_rate: f64,
}

/// Positions and reference forces in unit coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Matrix,
    pub f: Matrix,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples { x: self.x.select(ndarray::Axis(0), rows), f: self.f.select(ndarray::Axis(0), rows) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Samples,
    pub meta: DatasetMeta,
}

/// Raw chain output in native coordinates.
#[derive(Debug, Clone)]
pub struct ChainSamples {
    pub x: Matrix,
    pub forces: Matrix,
    pub acceptance_rate: f64,
}

/// Parallel Metropolis chains started on a regular grid over the support.
/// After `burn_steps`, every state of the next `thin_steps` steps is kept,
/// chain-major per step.
pub fn mh_sample(p: &ToyPotential, cfg: &SamplerConfig) -> Result<ChainSamples, DataError> {
    p.validate()?;
    cfg.validate()?;
    let d = p.dims();
    let (lo, hi, periodic) = match p.support() {
        Support::Periodic { lo, hi } => (lo, hi, true),
        Support::Unbounded { half_width } => (-half_width, half_width, false),
    };
    let side = (cfg.n_chains as f64).powf(1.0 / d as f64).ceil() as usize;
    let mut state: Vec<Vec<f64>> = (0..cfg.n_chains)
        .map(|c| {
            let mut k = c;
            (0..d)
                .map(|_| {
                    let i = k % side;
                    k /= side;
                    lo + (hi - lo) * (i as f64 + 0.5) / side as f64
                })
                .collect()
        })
        .collect();
    let mut energy: Vec<f64> = state.iter().map(|x| p.eval(x).0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_out = cfg.n_chains * cfg.thin_steps;
    let mut xs = Matrix::zeros((n_out, d));
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut row = 0;
    for step in 0..cfg.burn_steps + cfg.thin_steps {
        for c in 0..cfg.n_chains {
            let mut y: Vec<f64> = state[c]
                .iter()
                .map(|v| v + cfg.proposal_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if periodic {
                for v in &mut y {
                    *v = lo + (*v - lo).rem_euclid(hi - lo);
                }
            }
            let uy = p.eval(&y).0;
            let threshold: f64 = rng.random();
            proposed += 1;
            if threshold < (energy[c] - uy).exp() {
                state[c] = y;
                energy[c] = uy;
                accepted += 1;
            }
            if step >= cfg.burn_steps {
                xs.row_mut(row).assign(&ndarray::Array1::from(state[c].clone()));
                row += 1;
            }
        }
    }
    let (_, forces) = p.eval_batch(&xs);
    Ok(ChainSamples { x: xs, forces, acceptance_rate: accepted as f64 / proposed as f64 })
}

/// Sample `p` and map the result into unit coordinates.
pub fn generate_dataset(p: &ToyPotential, cfg: &SamplerConfig) -> Result<Dataset, DataError> {
    let chains = mh_sample(p, cfg)?;
    let chart = Compactification::for_potential(p);
    let d = p.dims();
    let mut keep = Vec::new();
    for (i, row) in chains.x.rows().into_iter().enumerate() {
        if row.iter().enumerate().all(|(j, v)| (0.0..=1.0).contains(&(chart.scale[j] * v + chart.shift[j]))) {
            keep.push(i);
        }
    }
    let mut x = Matrix::zeros((keep.len(), d));
    let mut f = Matrix::zeros((keep.len(), d));
    for (r, &i) in keep.iter().enumerate() {
        for j in 0..d {
            x[[r, j]] = chart.scale[j] * chains.x[[i, j]] + chart.shift[j];
            f[[r, j]] = chains.forces[[i, j]] / chart.scale[j];
        }
        if p.domain() == Domain::Circle {
            x.row_mut(r).mapv_inplace(|v| v.rem_euclid(1.0));
        }
    }
    let meta = DatasetMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        potential: p.clone(),
        compactification: chart,
        domain_tags: vec![p.domain(); d],
        sampler: *cfg,
        n_samples: keep.len(),
        n_dropped: chains.x.nrows() - keep.len(),
        acceptance_rate: chains.acceptance_rate,
    };
    Ok(Dataset { samples: Samples { x, f }, meta })
}

/// Deterministic 90/10 split after a seeded shuffle.
pub fn split(samples: &Samples, seed: u64) -> (Samples, Samples) {
    let n = samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (n * 9).div_ceil(10);
    (samples.select(&idx[..n_train]), samples.select(&idx[n_train..]))
}

/// Metadata path for a dataset CSV: `data.csv` → `data.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Shortest round-tripping decimal for every value.
pub fn write_matrix_csv(path: &Path, header: &[String], cols: &[&Matrix]) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    let n = cols.first().map_or(0, |m| m.nrows());
    for i in 0..n {
        let mut first = true;
        for m in cols {
            for v in m.row(i) {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&format!("{v:?}"));
            }
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Parse a numeric CSV with a header line; returns the header and rows.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Matrix), DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| DataError::Csv { path: path.into(), line: 1, msg: "empty file".into() })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(DataError::Csv {
                path: path.into(),
                line: k + 2,
                msg: format!("{} fields, header has {}", fields.len(), header.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Csv {
                path: path.into(),
                line: k + 2,
                msg: format!("not a number: {f:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), values).expect("row lengths checked");
    Ok((header, m))
}

impl Dataset {
    pub fn dims(&self) -> usize {
        self.samples.x.ncols()
    }

    pub fn header(d: usize) -> Vec<String> {
        (1..=d).map(|j| format!("x{j}")).chain((1..=d).map(|j| format!("f{j}"))).collect()
    }

    /// Writes `path` and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_matrix_csv(path, &Self::header(self.dims()), &[&self.samples.x, &self.samples.f])?;
        let meta = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta).map_err(|source| DataError::Json { path: meta.clone(), source })?;
        fs::write(&meta, json + "\n").map_err(io_err(&meta))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let meta_file = meta_path(path);
        let text = fs::read_to_string(&meta_file).map_err(io_err(&meta_file))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|source| DataError::Json { path: meta_file.clone(), source })?;
        if meta.schema_version != DATASET_SCHEMA_VERSION {
            return Err(DataError::Version(meta.schema_version));
        }
        let (header, m) = read_numeric_csv(path)?;
        let d = meta.domain_tags.len();
        if header != Self::header(d) {
            return Err(DataError::Csv { path: path.into(), line: 1, msg: format!("expected header {}", Self::header(d).join(",")) });
        }
        let samples = Samples { x: m.slice(s![.., ..d]).to_owned(), f: m.slice(s![.., d..]).to_owned() };
        Ok(Dataset { samples, meta })
    }

    pub fn unit_potential(&self) -> UnitPotential {
        self.meta.compactification.unit_potential(&self.meta.potential)
    }
}
