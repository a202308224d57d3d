use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbnas::experiment::{
    cmd_bench_gen, cmd_gain, cmd_hist, cmd_search, load_config, ConfigError, ExperimentConfig, ExperimentError,
    RunOptions,
};
use pbnas::SpaceSpec;

#[derive(Parser)]
#[command(name = "pbnas", version, about = "Predictor-based architecture search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate a space and write a synthetic tabular benchmark.
    BenchGen {
        #[arg(long, default_value_t = 5)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        ops: usize,
        /// Edge budget; 0 means unlimited.
        #[arg(long, default_value_t = 0)]
        max_edges: usize,
        /// Allow several sources or sinks.
        #[arg(long)]
        multi_source_sink: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.tsv")]
        out: PathBuf,
    },
    /// Run every variant and write traces.csv, curves.csv and summary.json.
    Search(RunArgs),
    /// Histogram of candidate errors per variant (hist.csv).
    Hist(RunArgs),
    /// Sampling-efficiency gain curves per variant (gain.csv).
    Gain(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir, then ./pbnas-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run a single variant.
    #[arg(long)]
    variant: Option<String>,
    /// Write wall-clock phase timings into traces.csv.
    #[arg(long)]
    timings: bool,
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    type Cmd = fn(ExperimentConfig, &RunOptions) -> Result<Vec<PathBuf>, ExperimentError>;
    let (args, cmd): (RunArgs, Cmd) = match cli.command {
        Command::BenchGen {
            layers,
            ops,
            max_edges,
            multi_source_sink,
            seed,
            out,
        } => {
            let spec = SpaceSpec::new(layers, ops, max_edges, !multi_source_sink).map_err(|e| {
                ExperimentError::Config(ConfigError {
                    path: "bench-gen".into(),
                    msg: e.to_string(),
                })
            })?;
            let n = cmd_bench_gen(&spec, seed, &out)?;
            println!("wrote {n} architectures to {}", out.display());
            return Ok(());
        }
        Command::Search(a) => (a, cmd_search),
        Command::Hist(a) => (a, cmd_hist),
        Command::Gain(a) => (a, cmd_gain),
    };
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.timings |= args.timings;
    let opts = RunOptions {
        out_dir: args.out,
        jobs: args.jobs,
        variant: args.variant,
    };
    let files = cmd(cfg, &opts)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pbnas: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
