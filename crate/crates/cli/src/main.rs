mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ParamArgs;

#[derive(Debug, Parser)]
#[command(name = "streamfetch", version, about = "Block prefetching for streamed applications")]
struct Cli {
    #[command(flatten)]
    params: ParamArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic traces.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: u64,
        /// Defaults to the configured seed.
        #[arg(long)]
        first_seed: Option<u64>,
        /// Scene-graph description (JSON); the built-in game otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train an application model from traces.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Replay test traces in the simulator.
    Simulate {
        #[arg(long, required_unless_present = "train")]
        model: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        train: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        test: Vec<PathBuf>,
        /// Use the block-pair predictor instead of the model.
        #[arg(long, requires = "train")]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate over a grid of one parameter.
    Sweep {
        #[arg(long, required_unless_present = "train")]
        model: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        train: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        test: Vec<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a block root from a directory tree.
    Shard {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        root: PathBuf,
        /// Keep this model's file ids.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build a block root of synthetic content for a model's files.
    Materialize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        root: PathBuf,
    },
    /// Serve a block root.
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// e.g. 17.4Mbps; unthrottled when absent.
        #[arg(long, value_parser = config::parse_bandwidth)]
        bandwidth_cap: Option<f64>,
        /// Round trip added to every response, in milliseconds.
        #[arg(long, default_value_t = 0.0)]
        rtt_sim: f64,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
    /// Replay a trace against a running server.
    Replay {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Must not hold a cache yet; a temporary directory otherwise.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Also report the simulator's figures for the same trace.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let params = match cli.params.resolve() {
        Ok(p) => p,
        Err(e) => {
            log::error!("{e}");
            return e.exit_code();
        }
    };
    log::info!("config {}", params.to_json());
    let res = match cli.cmd {
        Command::Synth {
            out_dir,
            count,
            first_seed,
            spec,
        } => commands::synth(&params, &out_dir, first_seed.unwrap_or(params.seed), count, spec.as_deref()),
        Command::Train { out, traces } => commands::train(&params, &out, &traces),
        Command::Simulate {
            model,
            train,
            test,
            baseline,
            out,
        } => commands::simulate(&params, model.as_deref(), &train, &test, baseline, out.as_deref()),
        Command::Sweep {
            model,
            train,
            test,
            param,
            values,
            out,
        } => commands::sweep(&params, model.as_deref(), &train, &test, &param, &values, out.as_deref()),
        Command::Shard { src, root, model } => commands::shard(&params, &src, &root, model.as_deref()),
        Command::Materialize { model, root } => commands::materialize(&params, &model, &root),
        Command::Serve {
            root,
            listen,
            bandwidth_cap,
            rtt_sim,
            time_scale,
        } => commands::serve(&params, &root, &listen, bandwidth_cap, rtt_sim, time_scale),
        Command::Replay {
            model,
            trace,
            server,
            time_scale,
            cache_dir,
            compare,
            out,
        } => commands::replay(
            &params,
            &model,
            &trace,
            &server,
            time_scale,
            cache_dir.as_deref(),
            compare,
            out.as_deref(),
        ),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
