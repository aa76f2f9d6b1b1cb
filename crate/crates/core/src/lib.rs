//! Block-level access grouping, duration-annotated Markov prediction and
//! the cache/simulation machinery built around them.

pub mod bundle;
pub mod cache;
pub mod ctmc;
pub mod grouping;
pub mod predictor;
pub mod queue;
pub mod sim;
pub mod synth;
pub mod trace;
