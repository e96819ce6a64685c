//! Event-sequence datasets: loading, splitting, and padded batching with
//! causal masks and quadrature samples for the survival integral.
//!
//! The on-disk format is a single JSON document
//! `{"dim_process": K, "sequences": [[{"time": t, "type": c}, ...], ...]}`
//! with timestamps in sequence-local units (first event at its recorded time,
//! no re-zeroing on load).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One ordered sequence of (timestamp, type) events.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    times: Vec<f64>,
    types: Vec<usize>,
}

impl EventSequence {
    /// Validates non-decreasing, non-negative timestamps and equal lengths.
    pub fn new(times: Vec<f64>, types: Vec<usize>) -> Result<Self> {
        if times.is_empty() || times.len() != types.len() {
            return Err(Error::Contract(format!(
                "event sequence needs matching non-empty times/types, got {}/{}",
                times.len(),
                types.len()
            )));
        }
        let mut prev = 0.0;
        for &t in &times {
            if !t.is_finite() || t < 0.0 || t < prev {
                return Err(Error::NonMonotone { index: 0 });
            }
            prev = t;
        }
        Ok(EventSequence { times, types })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least one event
    }

    /// Prefix of the first `n` events.
    pub fn prefix(&self, n: usize) -> EventSequence {
        EventSequence {
            times: self.times[..n].to_vec(),
            types: self.types[..n].to_vec(),
        }
    }
}

/// A collection of sequences over a shared type vocabulary.
#[derive(Clone, Debug)]
pub struct EventDataset {
    pub num_types: usize,
    pub sequences: Vec<EventSequence>,
    pub name: String,
}

impl EventDataset {
    pub fn new(num_types: usize, sequences: Vec<EventSequence>, name: impl Into<String>) -> Result<Self> {
        for (i, seq) in sequences.iter().enumerate() {
            for &c in seq.types() {
                if c >= num_types {
                    return Err(Error::TypeOutOfRange {
                        index: i,
                        found: c,
                        num_types,
                    });
                }
            }
        }
        Ok(EventDataset {
            num_types,
            sequences,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Mean gap between consecutive events, pooled over sequences.
    /// Falls back to 1.0 when no sequence has two events.
    pub fn mean_inter_event_time(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for seq in &self.sequences {
            for w in seq.times().windows(2) {
                sum += w[1] - w[0];
                count += 1;
            }
        }
        if count == 0 {
            1.0
        } else {
            sum / count as f64
        }
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> EventDataset {
        EventDataset {
            num_types: self.num_types,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            name: name.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FileEvent {
    time: f64,
    #[serde(rename = "type")]
    ty: usize,
}

#[derive(Serialize, Deserialize)]
struct FileDataset {
    dim_process: usize,
    sequences: Vec<Vec<FileEvent>>,
}

/// Loads and validates the JSON dataset format.
pub fn load_dataset(path: &Path) -> Result<EventDataset> {
    let text = std::fs::read_to_string(path)?;
    let file: FileDataset = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut sequences = Vec::with_capacity(file.sequences.len());
    for (i, raw) in file.sequences.iter().enumerate() {
        if raw.is_empty() {
            return Err(Error::Parse {
                context: format!("{} sequence {}", path.display(), i),
                message: "empty sequence".into(),
            });
        }
        let times: Vec<f64> = raw.iter().map(|e| e.time).collect();
        let types: Vec<usize> = raw.iter().map(|e| e.ty).collect();
        let seq = EventSequence::new(times, types).map_err(|_| Error::NonMonotone { index: i })?;
        sequences.push(seq);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EventDataset::new(file.dim_process, sequences, name)
}

/// Writes the JSON dataset format.
pub fn write_dataset(ds: &EventDataset, path: &Path) -> Result<()> {
    let file = FileDataset {
        dim_process: ds.num_types,
        sequences: ds
            .sequences
            .iter()
            .map(|s| {
                s.times()
                    .iter()
                    .zip(s.types())
                    .map(|(&time, &ty)| FileEvent { time, ty })
                    .collect()
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// CSV inspection dump: `seq_id,time,type`.
pub fn write_csv(ds: &EventDataset, path: &Path) -> Result<()> {
    let mut out = String::from("seq_id,time,type\n");
    for (i, seq) in ds.sequences.iter().enumerate() {
        for (&t, &c) in seq.times().iter().zip(seq.types()) {
            out.push_str(&format!("{i},{t},{c}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministic, disjoint, exhaustive train/valid/test index split.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::derive(seed, 0, 0);
    rng::shuffle(&mut idx, &mut r);
    let b1 = ((n as f64 * ratios.0).round() as usize).min(n);
    let b2 = ((n as f64 * (ratios.0 + ratios.1)).round() as usize).clamp(b1, n);
    let train = idx[..b1].to_vec();
    let valid = idx[b1..b2].to_vec();
    let test = idx[b2..].to_vec();
    Ok((train, valid, test))
}

/// Node placement for the survival-integral quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureMode {
    /// Uniform random nodes per interval; unbiased, used for training.
    Uniform,
    /// Equally spaced midpoints; deterministic, used for validation/tests.
    Midpoint,
}

/// Padded batch of sequences plus quadrature nodes per inter-event interval.
///
/// Interval `i` of a row is `(t_{i-1}, t_i]` with `t_{-1} = 0`, so the
/// integral term starts at time zero. Weights are `(t_i - t_{i-1})/S`;
/// summing `w_s · f(node_s)` over a row estimates the integral of `f` from 0
/// to the row's last event time.
#[derive(Clone, Debug)]
pub struct BatchedEvents {
    pub batch: usize,
    pub max_len: usize,
    pub s_samples: usize,
    /// `[B × m_max]`, padded with 0.
    pub times: Vec<f64>,
    /// `[B × m_max]`, padded with 0.
    pub types: Vec<usize>,
    /// `[B × m_max]`, true at real events.
    pub pad_mask: Vec<bool>,
    /// `[B × m_max × m_max]`, `(j,k)` true iff `k < j` and both unpadded.
    /// Strict in index order, so ties never attend to each other.
    pub causal_mask: Vec<bool>,
    /// `[B × m_max × S]` quadrature nodes, zero at padded intervals.
    pub mc_times: Vec<f64>,
    /// `[B × m_max × S]` quadrature weights, zero at padded intervals.
    pub mc_weights: Vec<f64>,
    pub lens: Vec<usize>,
}

/// Borrowed view of one batch row (unpadded portion only).
#[derive(Clone, Copy)]
pub struct RowView<'a> {
    pub times: &'a [f64],
    pub types: &'a [usize],
    /// `len × S` nodes, interval-major.
    pub mc_times: &'a [f64],
    pub mc_weights: &'a [f64],
    pub s_samples: usize,
}

impl BatchedEvents {
    pub fn row(&self, b: usize) -> RowView<'_> {
        let len = self.lens[b];
        let m = self.max_len;
        let s = self.s_samples;
        RowView {
            times: &self.times[b * m..b * m + len],
            types: &self.types[b * m..b * m + len],
            mc_times: &self.mc_times[b * m * s..b * m * s + len * s],
            mc_weights: &self.mc_weights[b * m * s..b * m * s + len * s],
            s_samples: s,
        }
    }

    pub fn total_events(&self) -> usize {
        self.lens.iter().sum()
    }
}

/// Builds a padded batch with `s_samples` quadrature nodes per interval.
///
/// Uniform nodes are drawn from a (seed, row, interval) lane, so a row's
/// early intervals do not depend on later events or on the other batch
/// members.
pub fn batch(
    ds: &EventDataset,
    indices: &[usize],
    s_samples: usize,
    mode: QuadratureMode,
    seed: u64,
) -> Result<BatchedEvents> {
    if indices.is_empty() {
        return Err(Error::Contract("batch over empty index list".into()));
    }
    if s_samples == 0 {
        return Err(Error::Contract("need at least one quadrature sample per interval".into()));
    }
    let b = indices.len();
    let m = indices.iter().map(|&i| ds.sequences[i].len()).max().unwrap();

    let mut out = BatchedEvents {
        batch: b,
        max_len: m,
        s_samples,
        times: vec![0.0; b * m],
        types: vec![0; b * m],
        pad_mask: vec![false; b * m],
        causal_mask: vec![false; b * m * m],
        mc_times: vec![0.0; b * m * s_samples],
        mc_weights: vec![0.0; b * m * s_samples],
        lens: Vec::with_capacity(b),
    };

    for (bi, &si) in indices.iter().enumerate() {
        let seq = &ds.sequences[si];
        let len = seq.len();
        out.lens.push(len);
        out.times[bi * m..bi * m + len].copy_from_slice(seq.times());
        out.types[bi * m..bi * m + len].copy_from_slice(seq.types());
        for j in 0..len {
            out.pad_mask[bi * m + j] = true;
            for k in 0..j {
                out.causal_mask[bi * m * m + j * m + k] = true;
            }
        }
        for i in 0..len {
            let lo = if i == 0 { 0.0 } else { seq.times()[i - 1] };
            let hi = seq.times()[i];
            let w = (hi - lo) / s_samples as f64;
            let base = bi * m * s_samples + i * s_samples;
            match mode {
                QuadratureMode::Midpoint => {
                    for s in 0..s_samples {
                        out.mc_times[base + s] = lo + (s as f64 + 0.5) * (hi - lo) / s_samples as f64;
                        out.mc_weights[base + s] = w;
                    }
                }
                QuadratureMode::Uniform => {
                    let mut r = rng::derive(seed, bi as u64, i as u64);
                    for s in 0..s_samples {
                        let u = rng::uniform_open_closed(&mut r);
                        out.mc_times[base + s] = lo + u * (hi - lo);
                        out.mc_weights[base + s] = w;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ha-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy_dataset() -> EventDataset {
        EventDataset::new(
            2,
            vec![
                EventSequence::new(vec![0.5, 1.2], vec![0, 1]).unwrap(),
                EventSequence::new(vec![0.1, 0.4, 0.9, 2.0], vec![1, 0, 0, 1]).unwrap(),
            ],
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn load_simple_file() {
        let path = tmp("simple.json");
        std::fs::write(
            &path,
            r#"{"dim_process": 2, "sequences": [[{"time": 0.5, "type": 0}, {"time": 1.2, "type": 1}]]}"#,
        )
        .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.num_types, 2);
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(ds.sequences[0].len(), 2);
    }

    #[test]
    fn non_monotone_sequence_rejected() {
        let path = tmp("bad_order.json");
        std::fs::write(
            &path,
            r#"{"dim_process": 1, "sequences": [[{"time": 1.0, "type": 0}, {"time": 0.5, "type": 0}]]}"#,
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::NonMonotone { index }) => assert_eq!(index, 0),
            other => panic!("expected NonMonotone, got {other:?}"),
        }
    }

    #[test]
    fn type_out_of_range_rejected() {
        let path = tmp("bad_type.json");
        std::fs::write(
            &path,
            r#"{"dim_process": 2, "sequences": [[{"time": 0.5, "type": 2}]]}"#,
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::TypeOutOfRange { found, num_types, .. }) => {
                assert_eq!(found, 2);
                assert_eq!(num_types, 2);
            }
            other => panic!("expected TypeOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn taxi_shaped_file_loads() {
        // 10 types, sequence lengths between 36 and 38
        let mut sequences = Vec::new();
        for (s, len) in [(0u64, 36usize), (1, 37), (2, 38)] {
            let mut events = Vec::new();
            for i in 0..len {
                events.push(FileEvent {
                    time: i as f64 * 0.5 + s as f64 * 0.01,
                    ty: (i + s as usize) % 10,
                });
            }
            sequences.push(events);
        }
        let path = tmp("taxi_like.json");
        std::fs::write(
            &path,
            serde_json::to_string(&FileDataset { dim_process: 10, sequences }).unwrap(),
        )
        .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.num_types, 10);
        for seq in &ds.sequences {
            assert!((36..=38).contains(&seq.len()));
        }
    }

    #[test]
    fn midpoint_nodes_single_sample() {
        let ds = toy_dataset();
        let b = batch(&ds, &[0], 1, QuadratureMode::Midpoint, 0).unwrap();
        let row = b.row(0);
        // intervals (0, 0.5] and (0.5, 1.2]
        assert!((row.mc_times[0] - 0.25).abs() < 1e-15);
        assert!((row.mc_times[1] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn constant_integrand_is_exact() {
        let ds = toy_dataset();
        for mode in [QuadratureMode::Midpoint, QuadratureMode::Uniform] {
            for s in [1, 3, 17] {
                let b = batch(&ds, &[1], s, mode, 9).unwrap();
                let row = b.row(0);
                let lambda = 2.75;
                let est: f64 = row.mc_weights.iter().map(|w| w * lambda).sum();
                let expected = lambda * ds.sequences[1].times().last().unwrap();
                assert!((est - expected).abs() < 1e-12, "mode {mode:?} s {s}");
            }
        }
    }

    #[test]
    fn pad_mask_counts_events() {
        let ds = toy_dataset();
        let b = batch(&ds, &[0, 1], 2, QuadratureMode::Midpoint, 0).unwrap();
        let count = b.pad_mask.iter().filter(|&&x| x).count();
        assert_eq!(count, 6);
        assert_eq!(b.total_events(), 6);
    }

    #[test]
    fn causal_mask_strictly_lower_triangular() {
        let ds = toy_dataset();
        let b = batch(&ds, &[1, 0], 1, QuadratureMode::Midpoint, 0).unwrap();
        for bi in 0..b.batch {
            let len = b.lens[bi];
            for j in 0..b.max_len {
                for k in 0..b.max_len {
                    let allowed = b.causal_mask[bi * b.max_len * b.max_len + j * b.max_len + k];
                    assert_eq!(allowed, k < j && j < len && k < len);
                }
            }
        }
    }

    #[test]
    fn uniform_nodes_stay_in_interval() {
        let ds = toy_dataset();
        let b = batch(&ds, &[1], 50, QuadratureMode::Uniform, 3).unwrap();
        let row = b.row(0);
        let times = ds.sequences[1].times();
        for i in 0..times.len() {
            let lo = if i == 0 { 0.0 } else { times[i - 1] };
            let hi = times[i];
            for s in 0..50 {
                let t = row.mc_times[i * 50 + s];
                assert!(t > lo && t <= hi, "node {t} outside ({lo}, {hi}]");
            }
        }
    }

    #[test]
    fn curved_integrand_error_shrinks_quadratically() {
        // integral of t^2 over (0, 2]: midpoint error scales 1/S^2
        let ds = EventDataset::new(1, vec![EventSequence::new(vec![2.0], vec![0]).unwrap()], "one").unwrap();
        let exact = 8.0 / 3.0;
        let estimate = |s: usize| {
            let b = batch(&ds, &[0], s, QuadratureMode::Midpoint, 0).unwrap();
            let row = b.row(0);
            row.mc_times
                .iter()
                .zip(row.mc_weights)
                .map(|(t, w)| w * t * t)
                .sum::<f64>()
        };
        let e1 = (estimate(4) - exact).abs();
        let e2 = (estimate(8) - exact).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn linear_integrand_exact_under_midpoint() {
        let ds = toy_dataset();
        let b = batch(&ds, &[1], 3, QuadratureMode::Midpoint, 0).unwrap();
        let row = b.row(0);
        let est: f64 = row.mc_times.iter().zip(row.mc_weights).map(|(t, w)| w * t).sum();
        let t_m = ds.sequences[1].times().last().unwrap();
        assert!((est - t_m * t_m / 2.0).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (tr, va, te) = split_indices(10, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let (tr2, va2, te2) = split_indices(10, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let (tr, va, te) = split_indices(23, (0.6, 0.2, 0.2), 1).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(split_indices(10, (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let ds = toy_dataset();
        assert!(batch(&ds, &[], 1, QuadratureMode::Midpoint, 0).is_err());
    }

    proptest! {
        #[test]
        fn dataset_roundtrip(raw in proptest::collection::vec(
            proptest::collection::vec((0.0f64..100.0, 0usize..4), 1..20),
            1..8,
        )) {
            let sequences: Vec<EventSequence> = raw
                .into_iter()
                .map(|mut evs| {
                    evs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    let times = evs.iter().map(|e| e.0).collect();
                    let types = evs.iter().map(|e| e.1).collect();
                    EventSequence::new(times, types).unwrap()
                })
                .collect();
            let ds = EventDataset::new(4, sequences, "prop").unwrap();
            let path = tmp(&format!("roundtrip_{}.json", std::process::id()));
            write_dataset(&ds, &path).unwrap();
            let loaded = load_dataset(&path).unwrap();
            prop_assert_eq!(loaded.num_types, ds.num_types);
            prop_assert_eq!(loaded.sequences.len(), ds.sequences.len());
            for (a, b) in loaded.sequences.iter().zip(&ds.sequences) {
                prop_assert_eq!(a.types(), b.types());
                for (x, y) in a.times().iter().zip(b.times()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
