//! Networked side: a block server with a throttled two-priority link, the
//! urgent and speculative fetch client, and live trace replay.

pub mod client;
pub mod link;
pub mod live;
pub mod protocol;
pub mod root;
pub mod server;

pub use client::{ClientConfig, FetchError, SpecFetcher, SpecQueue, SpecSink, SpecStats, UrgentClient, UrgentStats};
pub use link::{priority_violation, Link, LinkConfig, LinkEvent};
pub use live::{replay_live, LiveConfig, LiveError, LiveReport};
pub use root::{materialize_synthetic, shard_tree, BlockRoot, RootError};
pub use server::{serve, Server, ServerConfig, ServerStats};
