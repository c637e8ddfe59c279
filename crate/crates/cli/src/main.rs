use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use det_core::config::TrainConfig;
use det_core::dataset::{Dataset, Split};
use det_core::gradcheck;
use det_core::graph::Graph;
use det_core::io::{load_edge_list, resolve_data_path, write_dataset};
use det_core::pipeline;
use det_core::synth::{generate_synthetic, SynthKind, SynthParams};
use det_core::{Error, Result};

/// Environment variable naming the directory relative data paths resolve
/// against.
const DATA_ROOT_VAR: &str = "DET_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "det", version, about = "Train and inspect dual-encoding graph transformers")]
struct Cli {
    /// Worker threads for parallel work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's data path.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset bundle; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print a node's semantic neighbors with their scores.
    Neighbors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        node: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the mean number of nodes at each hop distance.
    Stats {
        /// Edge list file or dataset bundle directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_hop: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write a synthetic dataset bundle.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator parameter as `key=value`; repeatable.
        #[arg(long = "param")]
        params: Vec<String>,
    },
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from)
}

fn stats_graph(path: &Path) -> Result<Graph> {
    if path.is_file() {
        return load_edge_list(path, None);
    }
    match pipeline::load_data(path, None)? {
        Dataset::Nodes(ds) => Ok(ds.graph),
        Dataset::Kg(ds) => Ok(ds.kg.graph),
        Dataset::Graphs(_) => Err(Error::Mode("hop statistics need a single graph, not a graph set".into())),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let root = data_root();
    let root = root.as_deref();
    match cli.command {
        Command::Train { config, seed, data, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if data.is_some() {
                cfg.data = data;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let outcome = pipeline::run_train(&cfg, root)?;
            println!(
                "trained {} epochs ({} steps); best epoch {}",
                outcome.epochs_run, outcome.steps, outcome.best_epoch
            );
            for row in outcome.report.rows().iter().filter(|r| r.split == Split::Test) {
                println!("test {} {:?}", row.metric, row.value);
            }
        }
        Command::Eval { checkpoint, data, split } => {
            log::info!("eval checkpoint={} split={split}", checkpoint.display());
            for (name, value) in pipeline::run_eval(&checkpoint, data.as_deref(), root, split)? {
                println!("{name} {value:?}");
            }
        }
        Command::Neighbors { checkpoint, node, data } => {
            log::info!("neighbors checkpoint={} node={node}", checkpoint.display());
            for (u, score) in pipeline::run_neighbors(&checkpoint, data.as_deref(), root, node)? {
                println!("{node}\t{u}\t{score:?}");
            }
        }
        Command::Stats { data, max_hop } => {
            log::info!("stats data={} max_hop={max_hop}", data.display());
            let g = stats_graph(&resolve_data_path(&data, root))?;
            let line: Vec<String> = g
                .hop_statistics(max_hop)?
                .iter()
                .enumerate()
                .map(|(i, v)| format!("{}:{v:?}", i + 1))
                .collect();
            println!("{}", line.join(" "));
        }
        Command::Gradcheck { seed } => {
            log::info!("gradcheck seed={seed} step={} tolerance={}", gradcheck::STEP, gradcheck::TOLERANCE);
            let results = gradcheck::run_suite(seed)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                ok &= r.passed();
                println!("{verdict:<4} {:<40} values={:<6} max_rel_err={:.3e}", r.name, r.values, r.max_relative_error);
            }
            return Ok(ok);
        }
        Command::Synth { kind, out, seed, params } => {
            let mut p = SynthParams::new();
            for pair in &params {
                p.insert_pair(pair)?;
            }
            log::info!("synth kind={kind} seed={seed} params={params:?}");
            write_dataset(&out, &generate_synthetic(kind, &p, seed)?)?;
            println!("wrote {kind} bundle to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
