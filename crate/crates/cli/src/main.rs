use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use smoothflow_cli::commands::{self, GridSource, MdArgs, MdSource};
use smoothflow_cli::CliError;

const SCHEMAS: &str = "Schema versions: run config 1 (`schema_version` field required), \
dataset metadata 1, model checkpoint 1, eval metrics 1.

Exit codes: 0 success, 2 usage or config error, 3 runtime error.";

#[derive(Parser)]
#[command(name = "smoothflow", version, about = "Smooth normalizing flows: data, training, evaluation, simulation", after_help = SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a toy potential with Metropolis chains; writes CSV plus `.meta.json`.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a flow; writes checkpoint.json, final.json, metrics.csv, validation.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// NLL, FME, reverse KLD and sampling efficiency of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        kld_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Langevin equilibration then NVE production; writes a trajectory CSV.
    #[command(group(ArgGroup::new("source").required(true).args(["model", "potential"])))]
    Mdsim {
        /// Flow checkpoint used as the potential `u = -log p`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use the analytic potential of the config instead of a model.
        #[arg(long)]
        potential: bool,
        /// Run config providing the `md` section (and the potential).
        #[arg(long)]
        md_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        replicas: usize,
        /// Halve dt until the per-DOF energy std of a short run is below this.
        #[arg(long)]
        auto_dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Multi-bin root-finding iteration counts and timings.
    BenchRootfind {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128,256")]
        bins: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density (or energy) and forces on a regular grid of cell centres.
    #[command(group(ArgGroup::new("source").required(true).args(["model", "potential"])))]
    ExportGrid {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Run config whose analytic potential is exported.
        #[arg(long)]
        potential: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data(&config, &out, seed),
        Command::Train { config, data, out, seed } => commands::train(&config, &data, out.as_deref(), seed),
        Command::Eval { model, data, out, kld_samples, seed } => {
            let (summary, json) = commands::eval(&model, &data, out.as_deref(), kld_samples, seed)?;
            Ok(json.unwrap_or(summary))
        }
        Command::Mdsim { model, potential: _, md_config, out, replicas, auto_dt, seed } => {
            let source = match &model {
                Some(m) => MdSource::Model(m),
                None => MdSource::Potential,
            };
            commands::mdsim(&MdArgs { md_config: &md_config, source, out: &out, replicas, auto_dt, seed })
        }
        Command::BenchRootfind { dims, bins, batch, reps, seed, out } => commands::bench(&dims, &bins, batch, reps, seed, &out),
        Command::ExportGrid { model, potential, resolution, out } => {
            let source = match (&model, &potential) {
                (Some(m), _) => GridSource::Model(m),
                (None, Some(p)) => GridSource::Potential(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            commands::export_grid(source, resolution, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
