//! Markov chain over superblock states with per-transition duration
//! statistics, and the pruned depth-first prediction search.
//!
//! Binary model format (little-endian):
//!
//! ```text
//! magic    8 bytes  "SFCTMC\0\0"
//! version  u16      = 1
//! states   u32
//! initial  states x f64
//! per state:
//!   count  u32
//!   count x { to u32, probability f64, mean_ms f64, stddev_ms f64, samples u64 }
//! crc32    u32      over everything before it
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::SuperblockSequence;

const MAGIC: &[u8; 8] = b"SFCTMC\0\0";
pub const MODEL_VERSION: u16 = 1;

/// Hard limit on DFS path length.
pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub to: u32,
    pub probability: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmcModel {
    pub initial: Vec<f64>,
    /// Outgoing transitions per state, sorted by target.
    pub transitions: Vec<Vec<Transition>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CtmcError {
    #[error("no training sequence has any step")]
    EmptyCorpus,
    #[error("state {state} out of range for {states} states")]
    UnknownState { state: u32, states: usize },
    #[error("invalid prediction parameters: {0}")]
    InvalidParams(String),
    #[error("model data is empty")]
    EmptyInput,
    #[error("bad magic, not a model file")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u16),
    #[error("model data truncated")]
    Truncated,
    #[error("model checksum mismatch")]
    Checksum,
    #[error("model is inconsistent: {0}")]
    Inconsistent(String),
}

// Welford accumulator.
#[derive(Default, Clone, Copy)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn stddev(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

impl CtmcModel {
    /// Frequency-count training. `num_states` must cover every id used.
    pub fn train(sequences: &[SuperblockSequence], num_states: usize) -> Result<CtmcModel, CtmcError> {
        let mut first = vec![0u64; num_states];
        let mut pairs: Vec<BTreeMap<u32, Running>> = vec![BTreeMap::new(); num_states];
        let mut starts = 0u64;
        for seq in sequences {
            for &(s, _) in &seq.steps {
                if s as usize >= num_states {
                    return Err(CtmcError::UnknownState {
                        state: s,
                        states: num_states,
                    });
                }
            }
            let Some(&(s0, _)) = seq.steps.first() else { continue };
            first[s0 as usize] += 1;
            starts += 1;
            for w in seq.steps.windows(2) {
                let (a, ta) = w[0];
                let (b, tb) = w[1];
                pairs[a as usize]
                    .entry(b)
                    .or_default()
                    .push(tb.saturating_sub(ta) as f64);
            }
        }
        if starts == 0 {
            return Err(CtmcError::EmptyCorpus);
        }
        let initial = first.iter().map(|&c| c as f64 / starts as f64).collect();
        let transitions = pairs
            .into_iter()
            .map(|row| {
                let total: u64 = row.values().map(|r| r.n).sum();
                row.into_iter()
                    .map(|(to, r)| Transition {
                        to,
                        probability: r.n as f64 / total as f64,
                        mean_ms: r.mean,
                        stddev_ms: r.stddev(),
                        count: r.n,
                    })
                    .collect()
            })
            .collect();
        Ok(CtmcModel {
            initial,
            transitions,
        })
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }

    pub fn transition(&self, from: u32, to: u32) -> Option<&Transition> {
        let row = self.transitions.get(from as usize)?;
        row.binary_search_by_key(&to, |t| t.to).ok().map(|i| &row[i])
    }

    /// Probability of each state being reached within `lookahead_ms`.
    ///
    /// Paths are explored depth-first from `current`. A path is cut as soon
    /// as its probability drops below `p_stop` or its summed mean duration
    /// exceeds `lookahead_ms`. A state collects the probability of every
    /// surviving path on which it appears for the first time.
    pub fn predict(&self, current: u32, lookahead_ms: f64, p_stop: f64) -> Result<Prediction, CtmcError> {
        if current as usize >= self.num_states() {
            return Err(CtmcError::UnknownState {
                state: current,
                states: self.num_states(),
            });
        }
        if !(lookahead_ms >= 0.0) {
            return Err(CtmcError::InvalidParams(format!("lookahead {lookahead_ms}")));
        }
        if !(p_stop > 0.0 && p_stop < 1.0) {
            return Err(CtmcError::InvalidParams(format!("p_stop {p_stop}")));
        }
        let mut out = Prediction::default();
        let mut visits = vec![0u32; self.num_states()];
        visits[current as usize] = 1;
        let mut search = Dfs {
            model: self,
            lookahead_ms,
            p_stop,
            visits,
            out: &mut out,
        };
        search.walk(current, 1.0, 0.0, 0);
        for p in out.probabilities.values_mut() {
            *p = p.min(1.0);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CtmcError> {
        let n = self.num_states();
        if self.transitions.len() != n {
            return Err(CtmcError::Inconsistent("transition table size".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let sum: f64 = row.iter().map(|t| t.probability).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtmcError::Inconsistent(format!("row {i} sums to {sum}")));
            }
            for t in row {
                if t.to as usize >= n || !(0.0..=1.0).contains(&t.probability) || !(t.mean_ms >= 0.0) {
                    return Err(CtmcError::Inconsistent(format!("transition {i}->{}", t.to)));
                }
            }
            if row.windows(2).any(|w| w[0].to >= w[1].to) {
                return Err(CtmcError::Inconsistent(format!("row {i} not sorted")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_states() as u32).to_le_bytes());
        for p in &self.initial {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for row in &self.transitions {
            out.extend_from_slice(&(row.len() as u32).to_le_bytes());
            for t in row {
                out.extend_from_slice(&t.to.to_le_bytes());
                out.extend_from_slice(&t.probability.to_le_bytes());
                out.extend_from_slice(&t.mean_ms.to_le_bytes());
                out.extend_from_slice(&t.stddev_ms.to_le_bytes());
                out.extend_from_slice(&t.count.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CtmcModel, CtmcError> {
        if bytes.is_empty() {
            return Err(CtmcError::EmptyInput);
        }
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CtmcError::Truncated
            } else {
                CtmcError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CtmcError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = u16::from_le_bytes(r.take()?);
        if version != MODEL_VERSION {
            return Err(CtmcError::UnsupportedVersion(version));
        }
        let n = u32::from_le_bytes(r.take()?) as usize;
        // Each state needs at least 12 bytes; reject absurd counts early.
        if n > bytes.len() {
            return Err(CtmcError::Truncated);
        }
        let mut initial = Vec::with_capacity(n);
        for _ in 0..n {
            initial.push(f64::from_le_bytes(r.take()?));
        }
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let k = u32::from_le_bytes(r.take()?) as usize;
            if k > bytes.len() {
                return Err(CtmcError::Truncated);
            }
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                row.push(Transition {
                    to: u32::from_le_bytes(r.take()?),
                    probability: f64::from_le_bytes(r.take()?),
                    mean_ms: f64::from_le_bytes(r.take()?),
                    stddev_ms: f64::from_le_bytes(r.take()?),
                    count: u64::from_le_bytes(r.take()?),
                });
            }
            transitions.push(row);
        }
        let body_end = r.pos;
        let crc = u32::from_le_bytes(r.take()?);
        if r.pos != bytes.len() {
            return Err(CtmcError::Inconsistent("trailing bytes".into()));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(CtmcError::Checksum);
        }
        let model = CtmcModel {
            initial,
            transitions,
        };
        model.validate()?;
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CtmcError> {
        let end = self.pos.checked_add(N).ok_or(CtmcError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CtmcError::Truncated)?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }
}

/// Per-state probability of being reached within the lookahead.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    pub probabilities: BTreeMap<u32, f64>,
    /// Smallest summed mean duration over the counted paths to each state.
    pub earliest_ms: BTreeMap<u32, f64>,
}

impl Prediction {
    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn get(&self, state: u32) -> f64 {
        self.probabilities.get(&state).copied().unwrap_or(0.0)
    }

    /// States at or above `threshold`, soonest first.
    pub fn above(&self, threshold: f64) -> Vec<u32> {
        let mut v: Vec<(u32, f64, f64)> = self
            .probabilities
            .iter()
            .filter(|(_, &p)| p >= threshold)
            .map(|(&s, &p)| (s, p, self.earliest_ms[&s]))
            .collect();
        v.sort_by(|a, b| {
            a.2.total_cmp(&b.2)
                .then(b.1.total_cmp(&a.1))
                .then(a.0.cmp(&b.0))
        });
        v.into_iter().map(|x| x.0).collect()
    }
}

struct Dfs<'a> {
    model: &'a CtmcModel,
    lookahead_ms: f64,
    p_stop: f64,
    visits: Vec<u32>,
    out: &'a mut Prediction,
}

impl Dfs<'_> {
    fn walk(&mut self, state: u32, prob: f64, elapsed: f64, depth: usize) {
        if depth >= MAX_DEPTH {
            return;
        }
        for t in &self.model.transitions[state as usize] {
            let p = prob * t.probability;
            let d = elapsed + t.mean_ms;
            if p < self.p_stop || d > self.lookahead_ms {
                continue;
            }
            let j = t.to as usize;
            if self.visits[j] == 0 {
                *self.out.probabilities.entry(t.to).or_insert(0.0) += p;
                let e = self.out.earliest_ms.entry(t.to).or_insert(d);
                *e = e.min(d);
            }
            self.visits[j] += 1;
            self.walk(t.to, p, d, depth + 1);
            self.visits[j] -= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;

    fn seq(id: &str, steps: &[(u32, u64)]) -> SuperblockSequence {
        SuperblockSequence {
            trace_id: id.into(),
            steps: steps.to_vec(),
        }
    }

    /// [A,B,C] and [A,C] with A→B 10 s, B→C 10 s, A→C 5 s.
    fn abc() -> CtmcModel {
        CtmcModel::train(
            &[
                seq("1", &[(A, 0), (B, 10_000), (C, 20_000)]),
                seq("2", &[(A, 0), (C, 5_000)]),
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn train_frequencies() {
        let m = abc();
        assert_eq!(m.initial, vec![1.0, 0.0, 0.0]);
        assert_eq!(m.transition(A, B).unwrap().probability, 0.5);
        assert_eq!(m.transition(A, C).unwrap().probability, 0.5);
        assert_eq!(m.transition(B, C).unwrap().probability, 1.0);
        assert!(m.transitions[C as usize].is_empty());
        m.validate().unwrap();
    }

    #[test]
    fn train_single_duration() {
        let m = CtmcModel::train(&[seq("x", &[(A, 0), (B, 10_000)])], 2).unwrap();
        let t = m.transition(A, B).unwrap();
        assert_eq!((t.mean_ms, t.stddev_ms, t.count), (10_000.0, 0.0, 1));
    }

    #[test]
    fn train_duration_stats() {
        let m = CtmcModel::train(
            &[
                seq("x", &[(A, 0), (B, 1_000)]),
                seq("y", &[(A, 0), (B, 3_000)]),
            ],
            2,
        )
        .unwrap();
        let t = m.transition(A, B).unwrap();
        assert_eq!((t.mean_ms, t.stddev_ms, t.count), (2_000.0, 1_000.0, 2));
    }

    #[test]
    fn train_absorbing_single_state() {
        let m = CtmcModel::train(&[seq("x", &[(A, 0)])], 1).unwrap();
        assert_eq!(m.initial, vec![1.0]);
        assert_eq!(m.transition_count(), 0);
    }

    #[test]
    fn train_errors() {
        assert_eq!(CtmcModel::train(&[], 1).unwrap_err(), CtmcError::EmptyCorpus);
        assert_eq!(
            CtmcModel::train(&[seq("x", &[])], 1).unwrap_err(),
            CtmcError::EmptyCorpus
        );
        assert!(matches!(
            CtmcModel::train(&[seq("x", &[(5, 0)])], 2),
            Err(CtmcError::UnknownState { state: 5, .. })
        ));
    }

    #[test]
    fn predict_both_paths() {
        let p = abc().predict(A, 60_000.0, 0.01).unwrap();
        assert_eq!(p.get(B), 0.5);
        assert_eq!(p.get(C), 1.0);
        assert_eq!(p.earliest_ms[&C], 5_000.0);
    }

    #[test]
    fn predict_duration_pruning() {
        let p = abc().predict(A, 5_000.0, 0.01).unwrap();
        assert_eq!(p.probabilities, BTreeMap::from([(C, 0.5)]));
    }

    #[test]
    fn predict_probability_pruning() {
        assert!(abc().predict(A, 60_000.0, 0.6).unwrap().is_empty());
    }

    #[test]
    fn predict_unknown_state() {
        assert_eq!(
            abc().predict(9, 1.0, 0.5).unwrap_err(),
            CtmcError::UnknownState { state: 9, states: 3 }
        );
        assert!(abc().predict(C, 1000.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn predict_cycles_terminate() {
        let m = CtmcModel::train(
            &[seq("x", &[(A, 0), (B, 1), (A, 2), (B, 3), (A, 4), (C, 5)])],
            3,
        )
        .unwrap();
        let p = m.predict(A, 1e12, 1e-300).unwrap();
        assert!((p.get(B) - 2.0 / 3.0).abs() < 1e-12);
        assert!(p.get(C) > 0.9 && p.get(C) <= 1.0);
    }

    #[test]
    fn above_orders_soonest_first() {
        let p = abc().predict(A, 60_000.0, 0.01).unwrap();
        assert_eq!(p.above(0.0), vec![C, B]);
        assert_eq!(p.above(0.6), vec![C]);
    }

    #[test]
    fn bytes_round_trip() {
        let m = abc();
        assert_eq!(CtmcModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn bytes_errors() {
        let bytes = abc().to_bytes();
        assert_eq!(CtmcModel::from_bytes(&[]).unwrap_err(), CtmcError::EmptyInput);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(CtmcModel::from_bytes(&bad).unwrap_err(), CtmcError::BadMagic);
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(CtmcModel::from_bytes(&v2).unwrap_err(), CtmcError::UnsupportedVersion(2));
        assert_eq!(
            CtmcModel::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err(),
            CtmcError::Truncated
        );
        let mut flip = bytes.clone();
        flip[20] ^= 0x40;
        assert_eq!(CtmcModel::from_bytes(&flip).unwrap_err(), CtmcError::Checksum);
    }

    // Independent oracle: enumerate every state sequence up to a depth and
    // apply the pruning and first-visit rules directly.
    fn enumerate(m: &CtmcModel, start: u32, l: f64, p_stop: f64, max_len: usize) -> (BTreeMap<u32, f64>, bool) {
        let n = m.num_states() as u32;
        let mut out = BTreeMap::new();
        let mut alive_at_max = false;
        let mut stack: Vec<Vec<u32>> = vec![vec![start]];
        // Iterate over all sequences of length 1..=max_len (excluding start).
        for len in 1..=max_len {
            let mut next_stack = Vec::new();
            for prefix in &stack {
                for s in 0..n {
                    let mut path = prefix.clone();
                    path.push(s);
                    let mut p = 1.0;
                    let mut d = 0.0;
                    let mut ok = true;
                    for w in path.windows(2) {
                        match m.transition(w[0], w[1]) {
                            Some(t) => {
                                p *= t.probability;
                                d += t.mean_ms;
                                if p < p_stop || d > l {
                                    ok = false;
                                    break;
                                }
                            }
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    if !path[..path.len() - 1].contains(&s) {
                        *out.entry(s).or_insert(0.0) += p;
                    }
                    if len == max_len {
                        alive_at_max = true;
                    }
                    next_stack.push(path);
                }
            }
            stack = next_stack;
        }
        for v in out.values_mut() {
            *v = f64::min(*v, 1.0);
        }
        (out, alive_at_max)
    }

    #[test]
    fn oracle_agrees_on_worked_example() {
        let m = abc();
        let (o, _) = enumerate(&m, A, 60_000.0, 0.01, 4);
        assert_eq!(o, m.predict(A, 60_000.0, 0.01).unwrap().probabilities);
    }

    fn arb_model() -> impl Strategy<Value = (CtmcModel, u32, f64)> {
        (2usize..=6).prop_flat_map(|n| {
            let row = prop::collection::vec((0.0f64..1.0, 26.0f64..100.0, any::<bool>()), n);
            (prop::collection::vec(row, n), 0..n as u32, prop::sample::select(vec![0.001, 0.01, 0.05, 0.2]))
                .prop_map(move |(rows, start, p_stop)| {
                    let transitions = rows
                        .into_iter()
                        .map(|row| {
                            let kept: Vec<(usize, f64, f64)> = row
                                .into_iter()
                                .enumerate()
                                .filter(|(_, (_, _, keep))| *keep)
                                .map(|(j, (w, d, _))| (j, w + 0.01, d))
                                .collect();
                            let total: f64 = kept.iter().map(|k| k.1).sum();
                            kept.into_iter()
                                .map(|(j, w, d)| Transition {
                                    to: j as u32,
                                    probability: w / total,
                                    mean_ms: d,
                                    stddev_ms: 0.0,
                                    count: 1,
                                })
                                .collect()
                        })
                        .collect();
                    let mut initial = vec![0.0; n];
                    initial[0] = 1.0;
                    (CtmcModel { initial, transitions }, start, p_stop)
                })
        })
    }

    proptest! {
        #[test]
        fn predict_matches_enumeration((m, start, p_stop) in arb_model()) {
            // Durations exceed L/4, so no path survives 4 steps.
            let l = 100.0;
            let (oracle, deeper) = enumerate(&m, start, l, p_stop, 4);
            prop_assert!(!deeper);
            let got = m.predict(start, l, p_stop).unwrap().probabilities;
            prop_assert_eq!(got.len(), oracle.len());
            for (s, p) in &oracle {
                prop_assert!((got[s] - p).abs() <= 1e-9, "state {} {} vs {}", s, got[s], p);
            }
        }

        #[test]
        fn predict_is_monotone((m, start, p_stop) in arb_model(), l in 30.0f64..300.0, extra in 0.0f64..200.0) {
            let small = m.predict(start, l, p_stop).unwrap();
            let large = m.predict(start, l + extra, p_stop).unwrap();
            let looser = m.predict(start, l, p_stop / 2.0).unwrap();
            for (s, p) in &small.probabilities {
                prop_assert!(large.get(*s) >= *p - 1e-12);
                prop_assert!(looser.get(*s) >= *p - 1e-12);
            }
            for p in small.probabilities.values() {
                prop_assert!(*p >= p_stop && *p <= 1.0);
            }
        }

        #[test]
        fn trained_rows_are_stochastic(steps in prop::collection::vec(prop::collection::vec(0u32..5, 1..20), 1..6)) {
            let seqs: Vec<SuperblockSequence> = steps.iter().enumerate().map(|(i, s)| SuperblockSequence {
                trace_id: i.to_string(),
                steps: s.iter().enumerate().map(|(k, &x)| (x, k as u64 * 10)).collect(),
            }).collect();
            let m = CtmcModel::train(&seqs, 5).unwrap();
            m.validate().unwrap();
            let init: f64 = m.initial.iter().sum();
            prop_assert!((init - 1.0).abs() < 1e-9);
            prop_assert_eq!(CtmcModel::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }
}
