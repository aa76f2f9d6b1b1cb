//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a criterion fails that is not listed in `KNOWN_FAILURES`.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamfetch_core::bundle::{train_app_model, AppModel};
use streamfetch_core::cache::{storage_saving, CacheError, CachePolicy, Lookup};
use streamfetch_core::ctmc::{CtmcModel, Transition};
use streamfetch_core::grouping::{find_largest_overlap, BlockSet, EquivalentPartition, GroupingParams};
use streamfetch_core::predictor::{Predictor, PredictorConfig};
use streamfetch_core::sim::{self, simulate_trace, train_pair_model, SimConfig, SimModel, SweepParam};
use streamfetch_core::synth::{synth_trace, SynthSpec};
use streamfetch_core::trace::{write_trace, BlockId, FileId, FileTable, ReadRecord, Trace, BLOCK_SIZE};
use streamfetch_net::{materialize_synthetic, replay_live, serve, BlockRoot, ClientConfig, LiveConfig, ServerConfig};

/// Criteria expected to fail, with the reason recorded in the decisions
/// ledger. A listed criterion is still reported as FAIL.
const KNOWN_FAILURES: &[u32] = &[7];

const MIB: u64 = 1 << 20;
const DESK_B_INITIAL: u64 = 4 * MIB;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn run(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t0 = Instant::now();
    let (ok, detail) = f();
    let elapsed = t0.elapsed();
    let pass = ok && elapsed <= budget;
    let timing = if elapsed <= budget { "" } else { " (over time budget)" };
    println!(
        "{} {id} {name}: {detail} [{:.2} s of {} s{timing}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    Outcome {
        id,
        pass,
        detail: detail.clone(),
        elapsed,
        budget,
    }
}

struct Corpus {
    table: FileTable,
    train: Vec<Trace>,
    test: Vec<Trace>,
}

fn corpus() -> Corpus {
    let spec = SynthSpec::reference_game();
    let mut table = FileTable::new();
    let train = (0..10).map(|s| synth_trace(&spec, s, &mut table).unwrap()).collect();
    let test = (1000..1002).map(|s| synth_trace(&spec, s, &mut table).unwrap()).collect();
    Corpus { table, train, test }
}

fn desk_config() -> SimConfig {
    SimConfig {
        b_initial_bytes: DESK_B_INITIAL,
        ..Default::default()
    }
}

// 1. Urgent fetch arithmetic.

fn latency(c: &Corpus, model: &AppModel) -> (bool, String) {
    let cfg = SimConfig {
        b_initial_bytes: 0,
        ..Default::default()
    };
    // 100 ms + 4096 * 8 bits / 17.4 Mbit/s.
    let oracle = 100.0 + 4096.0 * 8.0 / 17.4e6 * 1000.0;
    let cost = cfg.urgent_block_ms(BLOCK_SIZE);

    let big = (0..c.table.len() as u32)
        .map(FileId)
        .max_by_key(|&f| c.table.size(f).unwrap_or(0))
        .unwrap();
    let blocks = c.table.size(big).unwrap() / BLOCK_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut picks: Vec<u64> = (0..blocks).collect();
    picks.shuffle(&mut rng);
    let n = 20;
    let records = picks[..n]
        .iter()
        .enumerate()
        .map(|(i, &b)| ReadRecord {
            timestamp_ms: i as u64 * 5_000,
            file: big,
            offset: b * BLOCK_SIZE,
            length: BLOCK_SIZE,
        })
        .collect();
    let trace = Trace::new("isolated", records);
    let r = simulate_trace(SimModel::Markov(model), &trace, &cfg).unwrap();
    let want = n as f64 * oracle;
    let ok = (cost - 101.8).abs() <= 0.2
        && (cost - oracle).abs() < 1e-9
        && r.misses == n as u64
        && (r.total_delay_ms - want).abs() <= 0.01 * want;
    (
        ok,
        format!(
            "per-block cost {cost:.3} ms (101.8 ± 0.2), {} misses -> {:.2} ms vs {want:.2} ms ± 1%",
            r.misses, r.total_delay_ms
        ),
    )
}

// 2. Storage saving.

fn saving() -> (bool, String) {
    let s = storage_saving(146.22, 1139.07);
    ((s - 0.87).abs() <= 0.005, format!("saving {:.4} (0.87 ± 0.005)", s))
}

// 3. Overlap search against exhaustive search.

fn exhaustive_overlap(eq: &[Vec<BTreeSet<u32>>]) -> usize {
    let mut best = 0;
    // Each trace picks nothing (0) or one of its partitions (1..).
    let mut choice = vec![0usize; eq.len()];
    loop {
        let mut inter: Option<BTreeSet<u32>> = None;
        let mut n = 0;
        for (t, &c) in choice.iter().enumerate() {
            if c > 0 {
                n += 1;
                let s = &eq[t][c - 1];
                inter = Some(match inter {
                    None => s.clone(),
                    Some(i) => i.intersection(s).copied().collect(),
                });
            }
        }
        if let Some(i) = inter {
            best = best.max(i.len() * n);
        }
        let mut t = 0;
        loop {
            if t == eq.len() {
                return best;
            }
            choice[t] += 1;
            if choice[t] <= eq[t].len() {
                break;
            }
            choice[t] = 0;
            t += 1;
        }
    }
}

fn grouping_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 500;
    let mut bad = 0;
    for _ in 0..instances {
        let traces = rng.random_range(1..=3);
        let eq: Vec<Vec<BTreeSet<u32>>> = (0..traces)
            .map(|_| {
                (0..rng.random_range(0..=4))
                    .map(|_| (0..12u32).filter(|_| rng.random_bool(0.5)).collect())
                    .collect()
            })
            .collect();
        let input: Vec<Vec<EquivalentPartition>> = eq
            .iter()
            .map(|t| {
                t.iter()
                    .map(|s| EquivalentPartition {
                        blocks: s.iter().map(|&i| BlockId::new(0, i)).collect::<BlockSet>(),
                        occurrences: vec![0],
                    })
                    .collect()
            })
            .collect();
        let got = find_largest_overlap(&input);
        let mut consistent = true;
        if got.score() > 0 {
            let mut inter: Option<BlockSet> = None;
            for &(t, j) in &got.contributors {
                let s = &input[t][j].blocks;
                inter = Some(match inter {
                    None => s.clone(),
                    Some(i) => i.intersection(s).copied().collect(),
                });
            }
            consistent = inter.as_ref() == Some(&got.blocks);
        }
        if got.score() != exhaustive_overlap(&eq) || !consistent {
            bad += 1;
        }
    }
    (bad == 0, format!("{instances} instances, {bad} mismatches"))
}

// 4. Prediction against explicit path enumeration.

fn random_model(rng: &mut ChaCha8Rng, lookahead: f64) -> CtmcModel {
    let n = rng.random_range(2..=6usize);
    let transitions = (0..n)
        .map(|_| {
            let targets: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            let weights: Vec<f64> = targets.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            targets
                .iter()
                .zip(&weights)
                .map(|(&to, &w)| Transition {
                    to: to as u32,
                    probability: w / total,
                    mean_ms: rng.random_range(lookahead / 8.0..lookahead * 1.2),
                    stddev_ms: 0.0,
                    count: 1,
                })
                .collect()
        })
        .collect();
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    CtmcModel { initial, transitions }
}

/// Sums, per state, the probability of every path from `start` that stays
/// within `lookahead` and above `p_stop` and reaches the state for the first
/// time at its last step.
fn enumerate_paths(m: &CtmcModel, start: u32, lookahead: f64, p_stop: f64) -> BTreeMap<u32, f64> {
    let edge = |a: u32, b: u32| m.transitions[a as usize].iter().find(|t| t.to == b);
    let mut out = BTreeMap::new();
    // (path, probability, summed mean duration)
    let mut frontier = vec![(vec![start], 1.0f64, 0.0f64)];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for (path, p, d) in &frontier {
            let last = *path.last().unwrap();
            for s in 0..m.initial.len() as u32 {
                let Some(t) = edge(last, s) else { continue };
                let (p2, d2) = (p * t.probability, d + t.mean_ms);
                if p2 < p_stop || d2 > lookahead {
                    continue;
                }
                if !path.contains(&s) {
                    *out.entry(s).or_insert(0.0) += p2;
                }
                let mut longer = path.clone();
                longer.push(s);
                next.push((longer, p2, d2));
            }
        }
        frontier = next;
    }
    for v in out.values_mut() {
        *v = v.min(1.0);
    }
    out
}

fn ctmc_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let models = 500;
    let (mut bad, mut worst) = (0, 0.0f64);
    for _ in 0..models {
        let lookahead = 1_000.0;
        let m = random_model(&mut rng, lookahead);
        let p_stop = [0.001, 0.01, 0.05, 0.2][rng.random_range(0..4)];
        let start = rng.random_range(0..m.initial.len() as u32);
        let want = enumerate_paths(&m, start, lookahead, p_stop);
        let got = m.predict(start, lookahead, p_stop).unwrap().probabilities;
        let same_keys = got.keys().eq(want.keys());
        let err = want
            .iter()
            .map(|(s, p)| (got.get(s).copied().unwrap_or(f64::NAN) - p).abs())
            .fold(0.0, f64::max);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        if !same_keys || !(err <= 1e-9) {
            bad += 1;
        }
    }
    (bad == 0, format!("{models} models, {bad} mismatches, max error {worst:.2e}"))
}

// 5. Monotonicity.

fn grid(rows: &[sim::SweepRow]) -> Vec<(f64, f64, u64)> {
    rows.iter()
        .map(|r| (r.value, r.report.total_delay_ms, r.report.false_positive_bytes))
        .collect()
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-9)
}

fn monotonicity(c: &Corpus, model: &AppModel) -> (bool, String) {
    let base = desk_config();
    let sweep = |p: SweepParam, values: &[f64]| {
        grid(&sim::sweep(&base, model, &c.train, &c.table, &c.test, p, values).unwrap())
    };
    let bw = sweep(SweepParam::BandwidthBps, &[10.8e6, 13.95e6, 17.4e6]);
    let bi = sweep(
        SweepParam::BInitialBytes,
        &[0.0, (2 * MIB) as f64, (4 * MIB) as f64, (8 * MIB) as f64, (16 * MIB) as f64],
    );
    let pd = sweep(SweepParam::PDownload, &[0.005, 0.01, 0.02, 0.05, 0.1]);
    let la = sweep(SweepParam::LookaheadS, &[60.0, 120.0]);

    let delays = |g: &[(f64, f64, u64)]| g.iter().map(|r| r.1).collect::<Vec<_>>();
    let bw_ok = non_increasing(&delays(&bw));
    let bi_ok = non_increasing(&delays(&bi));
    let fps: Vec<f64> = pd.iter().map(|r| r.2 as f64).collect();
    let pd_ok = non_increasing(&fps);
    let (d60, d120) = (la[0].1, la[1].1);
    let la_ok = (d60 - d120).abs() <= 0.1 * d120;
    let fmt = |g: &[(f64, f64, u64)], fp: bool| {
        g.iter()
            .map(|r| if fp { format!("{}", r.2) } else { format!("{:.0}", r.1) })
            .collect::<Vec<_>>()
            .join("/")
    };
    (
        bw_ok && bi_ok && pd_ok && la_ok,
        format!(
            "delay vs bandwidth {} ms [{}]; delay vs b_initial {} ms [{}]; FP bytes vs p_download {} [{}]; L=60s {d60:.0} ms vs L=120s {d120:.0} ms [{}]",
            fmt(&bw, false),
            ok(bw_ok),
            fmt(&bi, false),
            ok(bi_ok),
            fmt(&pd, true),
            ok(pd_ok),
            ok(la_ok)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

// 6. Self-replay.

fn self_replay(c: &Corpus) -> (bool, String) {
    let cfg = desk_config();
    let rates: Vec<f64> = c
        .train
        .iter()
        .map(|t| {
            let own = train_app_model(std::slice::from_ref(t), &c.table, &GroupingParams::default(), BLOCK_SIZE).unwrap();
            simulate_trace(SimModel::Markov(&own), t, &cfg).unwrap().hit_rate
        })
        .collect();
    let min = rates.iter().copied().fold(1.0, f64::min);
    (min >= 0.99, format!("{} traces, lowest hit rate {min:.5} (>= 0.99)", rates.len()))
}

// 7. Pair baseline contrast.

fn pair_contrast(c: &Corpus, model: &AppModel) -> (bool, String) {
    let cfg = PredictorConfig {
        adapt_speed: false,
        ..Default::default()
    };
    let pairs = train_pair_model(&c.train, &c.table, cfg.lookahead_ms as u64, BLOCK_SIZE);
    let transitions = model.ctmc.transition_count() as u64;
    let ratio = pairs.pair_count() as f64 / transitions as f64;

    // At every partition close, the blocks of the predicted superblocks
    // against the pair rows of the blocks read in that partition.
    let (mut predicted, mut covered, mut closures, mut full) = (0usize, 0usize, 0usize, 0usize);
    for t in c.train.iter().chain(&c.test) {
        let mut p = Predictor::new(&model.superblocks, &model.ctmc, cfg);
        let mut part: BTreeSet<BlockId> = BTreeSet::new();
        let mut last: Option<u64> = None;
        for r in t.block_reads(BLOCK_SIZE) {
            let closes = last.is_some_and(|l| r.timestamp_ms - l >= cfg.delta_ms);
            p.observe(r, |_| false);
            if closes {
                let cl = p.last_closure().unwrap();
                let sb: BTreeSet<BlockId> = cl
                    .predicted
                    .iter()
                    .flat_map(|s| model.superblocks.get(*s).unwrap().blocks.iter().copied())
                    .collect();
                let n = sb
                    .iter()
                    .filter(|b| part.iter().any(|a| pairs.contains_pair(a, b)))
                    .count();
                predicted += sb.len();
                covered += n;
                closures += 1;
                full += usize::from(n == sb.len());
                part.clear();
            }
            part.insert(r.block);
            last = Some(r.timestamp_ms);
        }
    }
    let superset = covered == predicted;
    (
        ratio >= 10.0 && superset,
        format!(
            "{} pairs vs {transitions} transitions = {ratio:.0}x (>= 10x) [{}]; pair rows cover {covered}/{predicted} superblock-predicted blocks ({:.3}%), {full}/{closures} closures fully covered [{}]",
            pairs.pair_count(),
            ok(ratio >= 10.0),
            100.0 * covered as f64 / predicted.max(1) as f64,
            if superset { "superset" } else { "not a superset" }
        ),
    )
}

// 8. Simulator against a loopback replay.

fn live_vs_sim(c: &Corpus, model: &AppModel) -> (bool, String) {
    const SCALE: f64 = 10.0;
    let root_dir = tempfile::tempdir().unwrap();
    materialize_synthetic(&model.file_table(), root_dir.path(), 7).unwrap();
    let cfg = LiveConfig {
        sim: desk_config(),
        time_scale: SCALE,
        client: ClientConfig::default(),
    };
    let results: Vec<(String, f64, f64, f64, f64)> = thread::scope(|s| {
        let handles: Vec<_> = c
            .test
            .iter()
            .map(|t| {
                let root = BlockRoot::open(root_dir.path(), BLOCK_SIZE).unwrap();
                let server = serve(
                    root,
                    "127.0.0.1:0",
                    ServerConfig {
                        link: cfg.server_link(),
                        record_events: false,
                    },
                )
                .unwrap();
                s.spawn(move || {
                    let cache = tempfile::tempdir().unwrap();
                    let live = replay_live(SimModel::Markov(model), t, &cfg, server.addr(), cache.path()).unwrap();
                    let sim = simulate_trace(SimModel::Markov(model), t, &cfg.sim).unwrap();
                    server.shutdown();
                    (
                        t.id.clone(),
                        sim.hit_rate,
                        live.run.hit_rate,
                        sim.total_delay_ms,
                        live.run.total_delay_ms,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut pass = true;
    let parts: Vec<String> = results
        .iter()
        .map(|(id, sh, lh, sd, ld)| {
            let hit_ok = (sh - lh).abs() <= 0.02;
            let delay_ok = (ld - sd).abs() <= 0.15 * sd;
            pass &= hit_ok && delay_ok;
            format!(
                "{id}: hit {sh:.4}/{lh:.4}, delay {sd:.0}/{ld:.0} ms ({:+.1}%)",
                100.0 * (ld - sd) / sd
            )
        })
        .collect();
    (pass, format!("sim/live at {SCALE}x time: {}", parts.join("; ")))
}

// 9. Cache policy against an explicit recency list.

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Recent,
    Pinned(u64),
}

struct RefCache {
    cap: usize,
    resident: BTreeSet<BlockId>,
    /// Least recent first.
    order: Vec<(BlockId, Slot)>,
}

impl RefCache {
    fn read(&mut self, b: BlockId) -> Lookup {
        if self.resident.contains(&b) {
            return Lookup::Resident;
        }
        match self.order.iter().position(|e| e.0 == b) {
            Some(i) => {
                self.order.remove(i);
                self.order.push((b, Slot::Recent));
                Lookup::Temporary
            }
            None => Lookup::Miss,
        }
    }

    fn insert(&mut self, b: BlockId, pinned: bool, now: u64) -> Option<Vec<BlockId>> {
        if self.resident.contains(&b) {
            return Some(Vec::new());
        }
        let slot = if pinned { Slot::Pinned(now) } else { Slot::Recent };
        if let Some(i) = self.order.iter().position(|e| e.0 == b) {
            if self.order[i].1 == Slot::Recent {
                self.order.remove(i);
                self.order.push((b, slot));
            }
            return Some(Vec::new());
        }
        let pinned_now = self.order.iter().filter(|e| e.1 != Slot::Recent).count();
        if pinned_now + 1 > self.cap {
            return None;
        }
        let mut out = Vec::new();
        while self.order.len() + 1 > self.cap {
            let i = self.order.iter().position(|e| e.1 == Slot::Recent).unwrap();
            out.push(self.order.remove(i).0);
        }
        self.order.push((b, slot));
        Some(out)
    }

    fn unpin(&mut self, now: u64, age: u64) -> usize {
        let mut n = 0;
        for e in &mut self.order {
            if let Slot::Pinned(since) = e.1 {
                if now - since > age {
                    e.1 = Slot::Recent;
                    n += 1;
                }
            }
        }
        n
    }
}

fn cache_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bs = 4096u64;
    let (mut ops, mut problems, mut evictions) = (0usize, Vec::new(), 0usize);
    for run in 0..12 {
        let cap = rng.random_range(1..=24usize);
        let universe = rng.random_range(4..64u32);
        let limit = cap as u64 * bs;
        let mut c = CachePolicy::new(bs, Some(limit));
        let mut r = RefCache {
            cap,
            resident: BTreeSet::new(),
            order: Vec::new(),
        };
        for i in 0..universe / 8 {
            c.add_resident(BlockId::new(1, i));
            r.resident.insert(BlockId::new(1, i));
        }
        let block = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.1) {
                BlockId::new(1, rng.random_range(0..universe / 8 + 1))
            } else {
                BlockId::new(0, rng.random_range(0..universe))
            }
        };
        let mut now = 0u64;
        for _ in 0..1_000 {
            ops += 1;
            now += rng.random_range(0..50);
            match rng.random_range(0..10) {
                0..=4 => {
                    let b = block(&mut rng);
                    if c.lookup(&b) != r.read(b) {
                        problems.push(format!("run {run}: lookup of {b} differs"));
                    }
                }
                5..=8 => {
                    let b = block(&mut rng);
                    let pinned = rng.random_bool(0.3);
                    let pinned_before: BTreeSet<BlockId> =
                        r.order.iter().filter(|e| e.1 != Slot::Recent).map(|e| e.0).collect();
                    match (c.insert(b, pinned, now), r.insert(b, pinned, now)) {
                        (Ok(got), Some(want)) => {
                            if got.iter().any(|e| pinned_before.contains(e) || r.resident.contains(e)) {
                                problems.push(format!("run {run}: evicted a pinned or resident block"));
                            }
                            if got != want {
                                problems.push(format!("run {run}: evictions {got:?} vs {want:?}"));
                            }
                            evictions += got.len();
                        }
                        (Err(CacheError::Exhausted { .. }), None) => {}
                        (g, w) => problems.push(format!("run {run}: insert {g:?} vs {w:?}")),
                    }
                }
                _ => {
                    let age = rng.random_range(0..400);
                    if c.unpin_stale(now, age) != r.unpin(now, age) {
                        problems.push(format!("run {run}: unpin count differs"));
                    }
                }
            }
            if c.temp_occupancy_bytes() > limit {
                problems.push(format!("run {run}: occupancy {} over {limit}", c.temp_occupancy_bytes()));
            }
            if !r.resident.iter().all(|b| c.is_resident(b)) {
                problems.push(format!("run {run}: lost a resident block"));
            }
            let want: Vec<BlockId> = r.order.iter().filter(|e| e.1 == Slot::Recent).map(|e| e.0).collect();
            if c.lru_order() != want {
                problems.push(format!("run {run}: recency order differs"));
            }
        }
    }
    problems.truncate(3);
    (
        problems.is_empty() && ops >= 10_000,
        format!(
            "{ops} operations, {evictions} evictions, {}",
            if problems.is_empty() {
                "no violations".to_string()
            } else {
                problems.join("; ")
            }
        ),
    )
}

// 10. Determinism of the command-line tool.

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_streamfetch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running streamfetch");
    assert!(out.status.success(), "streamfetch {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism(c: &Corpus) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    for t in c.train.iter().take(4).chain(&c.test[..1]) {
        let f = std::fs::File::create(d.join(format!("{}.trace", t.id))).unwrap();
        write_trace(t, &c.table, std::io::BufWriter::new(f)).unwrap();
    }
    let train: Vec<String> = c.train.iter().take(4).map(|t| path(&format!("{}.trace", t.id))).collect();
    let test = path(&format!("{}.trace", c.test[0].id));
    let model = path("model.bin");

    let mut mismatched = Vec::new();
    let mut twice = |what: &str, args: Vec<String>, file: Option<&str>| {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let read = |p: Option<&str>| p.map(|p| std::fs::read(p).unwrap()).unwrap_or_default();
        let (o1, f1) = (cli(&a), read(file));
        let (o2, f2) = (cli(&a), read(file));
        if o1 != o2 || f1 != f2 || o1.is_empty() {
            mismatched.push(what.to_string());
        }
    };
    let mut targs = vec!["--seed".to_string(), "5".into(), "train".into(), "--out".into(), model.clone()];
    targs.extend(train.iter().cloned());
    twice("train", targs, Some(&model));
    let b = DESK_B_INITIAL.to_string();
    twice(
        "simulate",
        vec![
            "--b-initial-bytes".into(),
            b.clone(),
            "simulate".into(),
            "--model".into(),
            model.clone(),
            "--test".into(),
            test.clone(),
        ],
        None,
    );
    twice(
        "sweep",
        vec![
            "--b-initial-bytes".into(),
            b,
            "sweep".into(),
            "--train".into(),
            train.join(","),
            "--test".into(),
            test,
            "--param".into(),
            "tau".into(),
            "--values".into(),
            "0.8,0.9".into(),
        ],
        None,
    );
    (
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "train, simulate and sweep outputs byte-identical across runs".into()
        } else {
            format!("outputs differ for {}", mismatched.join(", "))
        },
    )
}

fn main() {
    // Test harness flags such as --nocapture are accepted and ignored.
    let t0 = Instant::now();
    let c = corpus();
    let model = train_app_model(&c.train, &c.table, &GroupingParams::default(), BLOCK_SIZE).unwrap();
    let secs = Duration::from_secs;
    let outcomes = vec![
        run(1, "urgent fetch cost", secs(1), || latency(&c, &model)),
        run(2, "storage saving", secs(1), saving),
        run(3, "overlap search vs exhaustive", secs(10), grouping_oracle),
        run(4, "prediction vs path enumeration", secs(10), ctmc_oracle),
        run(5, "monotonicity", secs(120), || monotonicity(&c, &model)),
        run(6, "self-replay", secs(30), || self_replay(&c)),
        run(7, "pair baseline contrast", secs(60), || pair_contrast(&c, &model)),
        run(8, "simulator vs loopback replay", secs(300), || live_vs_sim(&c, &model)),
        run(9, "cache invariants", secs(30), cache_invariants),
        run(10, "determinism", secs(60), || determinism(&c)),
    ];
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "{passed}/{} criteria passed in {:.1} s",
        outcomes.len(),
        t0.elapsed().as_secs_f64()
    );
    let unexpected: Vec<&Outcome> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.id))
        .collect();
    for o in &unexpected {
        eprintln!(
            "criterion {} failed: {} ({:.1} s, budget {} s)",
            o.id,
            o.detail,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs()
        );
    }
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
