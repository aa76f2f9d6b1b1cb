use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use streamfetch_core::bundle::{train_app_model, AppModel};
use streamfetch_core::sim::{self, simulate_trace, train_pair_model, SimModel, SweepParam};
use streamfetch_core::synth::{synth_trace, SynthSpec};
use streamfetch_core::trace::{parse_trace, write_trace, FileTable, ParseOptions, Trace};
use streamfetch_net::{
    materialize_synthetic, replay_live, shard_tree, BlockRoot, ClientConfig, LinkConfig, LiveConfig, LiveReport,
    ServerConfig,
};

use crate::config::Params;
use crate::error::CliError;

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::data(p.display(), e)),
        None => {
            let mut o = io::stdout().lock();
            o.write_all(text.as_bytes())
                .and_then(|_| o.flush())
                .map_err(|e| CliError::data("stdout", e))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn load_trace(path: &Path, table: &mut FileTable) -> Result<Trace, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(path.display(), e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let parsed = parse_trace(BufReader::new(f), &id, table, ParseOptions::default())
        .map_err(|e| CliError::data(path.display(), e))?;
    if parsed.resorted {
        log::warn!("{}: records were out of order and have been sorted", path.display());
    }
    Ok(parsed.trace)
}

fn load_traces(paths: &[impl AsRef<Path>], table: &mut FileTable) -> Result<Vec<Trace>, CliError> {
    paths.iter().map(|p| load_trace(p.as_ref(), table)).collect()
}

fn load_model(path: &Path) -> Result<AppModel, CliError> {
    AppModel::load(path).map_err(|e| CliError::data(path.display(), e))
}

struct Inputs {
    model: AppModel,
    table: FileTable,
    training: Vec<Trace>,
    tests: Vec<Trace>,
}

/// Loads or trains the model, then reads the test traces against its file
/// table.
fn inputs(params: &Params, model: Option<&Path>, train: &[impl AsRef<Path>], test: &[impl AsRef<Path>]) -> Result<Inputs, CliError> {
    let (model, mut table, training) = match model {
        Some(path) => {
            let model = load_model(path)?;
            let mut table = model.file_table();
            let training = load_traces(train, &mut table)?;
            (model, table, training)
        }
        None => {
            let mut table = FileTable::new();
            let training = load_traces(train, &mut table)?;
            let model = train_app_model(&training, &table, &params.grouping(), params.block_size)?;
            (model, table, training)
        }
    };
    let tests = load_traces(test, &mut table)?;
    Ok(Inputs {
        model,
        table,
        training,
        tests,
    })
}

pub fn synth(params: &Params, out_dir: &Path, first_seed: u64, count: u64, spec: Option<&Path>) -> Result<(), CliError> {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::reference_game(),
    };
    spec.validate()?;
    if spec.block_size != params.block_size {
        log::warn!("scene spec block size {} differs from configured {}", spec.block_size, params.block_size);
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::data(out_dir.display(), e))?;
    for seed in first_seed..first_seed + count {
        let mut table = FileTable::new();
        let trace = synth_trace(&spec, seed, &mut table)?;
        let path = out_dir.join(format!("{}.trace", trace.id));
        let f = File::create(&path).map_err(|e| CliError::data(path.display(), e))?;
        let mut w = BufWriter::new(f);
        write_trace(&trace, &table, &mut w)?;
        w.flush().map_err(|e| CliError::data(path.display(), e))?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn train(params: &Params, out: &Path, traces: &[impl AsRef<Path>]) -> Result<(), CliError> {
    let mut table = FileTable::new();
    let traces = load_traces(traces, &mut table)?;
    let model = train_app_model(&traces, &table, &params.grouping(), params.block_size)?;
    model.save(out).map_err(|e| CliError::data(out.display(), e))?;
    let summary = json!({
        "model": out.display().to_string(),
        "files": model.files.len(),
        "superblocks": model.superblocks.len(),
        "transitions": model.ctmc.transition_count(),
        "resident_ranking_blocks": model.resident_ranking.len(),
        "training": model.training,
    });
    emit(None, &to_json(&summary))
}

pub fn simulate(
    params: &Params,
    model: Option<&Path>,
    train: &[impl AsRef<Path>],
    test: &[impl AsRef<Path>],
    baseline: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = params.sim();
    let inp = inputs(params, model, train, test)?;
    let report = if baseline {
        let pairs = train_pair_model(
            &inp.training,
            &inp.table,
            (params.lookahead_s * 1000.0).round() as u64,
            inp.model.block_size,
        );
        log::info!(
            "pair model: {} pairs over {} blocks, {} bytes",
            pairs.pair_count(),
            pairs.distinct_blocks(),
            pairs.memory_bytes()
        );
        sim::simulate(SimModel::Pairs(&pairs), &inp.tests, &cfg)?
    } else {
        sim::simulate(SimModel::Markov(&inp.model), &inp.tests, &cfg)?
    };
    emit(out, &to_json(&report))
}

pub fn sweep(
    params: &Params,
    model: Option<&Path>,
    train: &[impl AsRef<Path>],
    test: &[impl AsRef<Path>],
    param: &str,
    values: &[f64],
    out: Option<&Path>,
) -> Result<(), CliError> {
    let param: SweepParam = param.parse().map_err(CliError::Config)?;
    if param.retrains() && train.is_empty() {
        return Err(CliError::Config(format!("sweeping {param} retrains the model and needs --train")));
    }
    let inp = inputs(params, model, train, test)?;
    let rows = sim::sweep(&params.sim(), &inp.model, &inp.training, &inp.table, &inp.tests, param, values)?;
    let mut buf = Vec::new();
    sim::write_csv(&rows, &mut buf).expect("writing to memory");
    emit(out, &String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn shard(params: &Params, src: &Path, root: &Path, model: Option<&Path>) -> Result<(), CliError> {
    let table = match model {
        Some(p) => load_model(p)?.file_table(),
        None => FileTable::new(),
    };
    let table = shard_tree(src, root, &table)?;
    BlockRoot::open(root, params.block_size)?;
    println!("{} files in {}", table.len(), root.display());
    Ok(())
}

pub fn materialize(params: &Params, model: &Path, root: &Path) -> Result<(), CliError> {
    let model = load_model(model)?;
    materialize_synthetic(&model.file_table(), root, params.seed)?;
    let r = BlockRoot::open(root, model.block_size)?;
    println!("{} files in {}", r.file_table().len(), root.display());
    Ok(())
}

fn check_scale(time_scale: f64) -> Result<(), CliError> {
    if time_scale > 0.0 && time_scale.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("time scale {time_scale} must be positive")))
    }
}

pub fn serve(
    params: &Params,
    root: &Path,
    listen: &str,
    bandwidth_cap: Option<f64>,
    rtt_ms: f64,
    time_scale: f64,
) -> Result<(), CliError> {
    check_scale(time_scale)?;
    if !(rtt_ms >= 0.0 && rtt_ms.is_finite()) {
        return Err(CliError::Config(format!("rtt {rtt_ms} ms")));
    }
    let root = BlockRoot::open(root, params.block_size)?;
    let link = LinkConfig {
        rtt: Duration::from_secs_f64(rtt_ms / 1000.0),
        bandwidth_bps: bandwidth_cap,
    }
    .scaled(time_scale);
    let server = streamfetch_net::serve(
        root,
        listen,
        ServerConfig {
            link,
            record_events: false,
        },
    )
    .map_err(|e| CliError::Network(format!("binding {listen}: {e}")))?;
    println!("listening on {}", server.addr());
    io::stdout().flush().ok();
    server.wait();
    Ok(())
}

fn live_json(r: &LiveReport) -> serde_json::Value {
    let u = &r.urgent;
    let s = &r.speculative;
    json!({
        "run": r.run,
        "urgent": {
            "fetches": u.fetches,
            "blocks": u.blocks,
            "retries": u.retries,
            "total_latency_ms": u.total_latency.as_secs_f64() * 1000.0,
            "max_latency_ms": u.max_latency.as_secs_f64() * 1000.0,
        },
        "speculative": {
            "batches": s.batches,
            "requests": s.requests,
            "blocks": s.blocks,
            "skipped_cached": s.skipped_cached,
            "retried": s.retried,
            "abandoned": s.abandoned,
        },
        "resident_blocks": r.resident_blocks,
        "wall_ms": r.wall.as_secs_f64() * 1000.0,
    })
}

fn resolve(server: &str) -> Result<SocketAddr, CliError> {
    server
        .to_socket_addrs()
        .map_err(|e| CliError::Network(format!("{server}: {e}")))?
        .next()
        .ok_or_else(|| CliError::Network(format!("{server}: no address")))
}

#[allow(clippy::too_many_arguments)]
pub fn replay(
    params: &Params,
    model: &Path,
    trace: &Path,
    server: &str,
    time_scale: f64,
    cache_dir: Option<&Path>,
    compare: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    check_scale(time_scale)?;
    let model = load_model(model)?;
    let mut table = model.file_table();
    let trace = load_trace(trace, &mut table)?;
    let addr = resolve(server)?;
    let cfg = LiveConfig {
        sim: params.sim(),
        time_scale,
        client: ClientConfig {
            block_size: model.block_size,
            ..Default::default()
        },
    };
    let tmp;
    let dir = match cache_dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir().map_err(|e| CliError::data("temporary cache dir", e))?;
            tmp.path()
        }
    };
    let live = replay_live(SimModel::Markov(&model), &trace, &cfg, addr, dir)?;
    let mut v = json!({ "live": live_json(&live) });
    if compare {
        let sim = simulate_trace(SimModel::Markov(&model), &trace, &cfg.sim)?;
        v["sim"] = serde_json::to_value(&sim).expect("report serializes");
    }
    emit(out, &to_json(&v))
}
