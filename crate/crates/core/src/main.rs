//! Command-line interface for registration, benchmarking, and debugging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rpm_align::cli::{cmd_bench, cmd_lap, cmd_register, RegistrationRequest};
use rpm_align::ModelKind;

#[derive(Parser)]
#[command(
    name = "rpm-align",
    about = "Globally optimal alignment of partially overlapping point sets",
    version
)]
struct Cli {
    /// Worker threads for benchmark suites (default: all processors).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a model point file against a scene point file.
    Register {
        /// Model point file (one point per line).
        #[arg(long)]
        model: PathBuf,
        /// Scene point file.
        #[arg(long)]
        scene: PathBuf,
        /// Transformation family.
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        /// Number of matches: a fraction of min(n_x, n_y) when < 1, an
        /// absolute count when ≥ 1.
        #[arg(long, default_value_t = 0.9)]
        np: f64,
        /// Per-dimension termination tolerance.
        #[arg(long, default_value_t = 0.3)]
        eps0: f64,
        /// Cut budget.
        #[arg(long = "max-iters", default_value_t = 10_000)]
        max_iters: usize,
        /// Seed for randomized retries.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a benchmark suite described by a JSON config.
    Bench {
        /// Suite config (JSON: trial specs plus solver settings).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for trials.csv and aggregate.json.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Solve a k-cardinality assignment over a CSV cost matrix.
    Lap {
        /// Rectangular numeric CSV of costs.
        #[arg(long)]
        cost: PathBuf,
        /// Required number of matches.
        #[arg(long)]
        k: usize,
    },
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("RPM_LOG_LEVEL")
            .default_filter_or("warn"),
    )
    .init();

    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size worker pool: {e}");
        }
    }

    let outcome = match cli.command {
        Command::Register {
            model,
            scene,
            kind,
            np,
            eps0,
            max_iters,
            seed,
            out,
        } => cmd_register(&RegistrationRequest {
            model_path: model,
            scene_path: scene,
            kind,
            np,
            eps0,
            max_iterations: max_iters,
            seed,
            output_path: out,
        }),
        Command::Bench { config, out_dir } => cmd_bench(&config, &out_dir),
        Command::Lap { cost, k } => cmd_lap(&cost, k),
    };

    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
