use streamfetch_core::bundle::train_app_model;
use streamfetch_core::grouping::GroupingParams;
use streamfetch_core::sim::{simulate_trace, train_pair_model, SimConfig, SimModel};
use streamfetch_core::synth::{synth_trace, SynthSpec};
use streamfetch_core::trace::FileTable;
use streamfetch_net::{
    materialize_synthetic, replay_live, serve, BlockRoot, ClientConfig, LiveConfig, LiveError, ServerConfig,
};

#[test]
fn loopback_replay_tracks_simulation() {
    let spec = SynthSpec::reference_game();
    let mut table = FileTable::new();
    let train: Vec<_> = (0..4).map(|s| synth_trace(&spec, s, &mut table).unwrap()).collect();
    let test = synth_trace(&spec, 1001, &mut table).unwrap();
    let model = train_app_model(&train, &table, &GroupingParams::default(), 4096).unwrap();
    let root = tempfile::tempdir().unwrap();
    materialize_synthetic(&table, root.path(), 5).unwrap();

    let live = LiveConfig {
        sim: SimConfig {
            b_initial_bytes: 4 << 20,
            ..Default::default()
        },
        time_scale: 25.0,
        client: ClientConfig::default(),
    };
    let server = serve(
        BlockRoot::open(root.path(), 4096).unwrap(),
        "127.0.0.1:0",
        ServerConfig {
            link: live.server_link(),
            record_events: false,
        },
    )
    .unwrap();
    let cache = tempfile::tempdir().unwrap();
    let got = replay_live(SimModel::Markov(&model), &test, &live, server.addr(), cache.path()).unwrap();
    let want = simulate_trace(SimModel::Markov(&model), &test, &live.sim).unwrap();
    let r = &got.run;
    assert_eq!(r.accesses, want.accesses);
    assert_eq!(r.accesses, r.resident_hits + r.temp_hits + r.misses);
    assert_eq!(r.urgent_bytes, r.miss_bytes);
    assert_eq!(r.downloaded_bytes, r.speculative_bytes + r.urgent_bytes);
    assert!((r.hit_rate - want.hit_rate).abs() <= 0.02, "{} vs {}", r.hit_rate, want.hit_rate);
    assert!(got.resident_blocks > 0);

    // A second run may not reuse the populated cache directory.
    assert!(matches!(
        replay_live(SimModel::Markov(&model), &test, &live, server.addr(), cache.path()),
        Err(LiveError::Config(_))
    ));

    let pairs = train_pair_model(&train, &table, 60_000, 4096);
    let cache = tempfile::tempdir().unwrap();
    let p = replay_live(SimModel::Pairs(&pairs), &test, &live, server.addr(), cache.path()).unwrap();
    assert_eq!(p.run.accesses, want.accesses);
}
