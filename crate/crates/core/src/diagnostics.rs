//! Gradient-conflict analysis over encoder gradients recorded during
//! training, and the random-vector concentration experiment.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::format::{Reader, Writer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trace iterations must strictly increase: {prev} then {next}")]
    NonIncreasing { prev: u64, next: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `⟨u,v⟩ / (‖u‖·‖v‖)`, clamped to [−1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, DiagnosticsError> {
    if u.len() != v.len() {
        return Err(DiagnosticsError::LengthMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(DiagnosticsError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `1 − cosine_similarity`, in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, DiagnosticsError> {
    cosine_similarity(u, v).map(|s| 1.0 - s)
}

/// How encoder gradients are retained in a [`GradTrace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TraceMode {
    Off,
    #[default]
    Exact,
    /// Count-sketch projection to `dim` buckets. For unit vectors the
    /// sketched inner product is unbiased with variance at most `2 / dim`,
    /// so at the default 4096 buckets the cosine error has standard
    /// deviation ≲ 0.022.
    Sketch { dim: usize, seed: u64 },
}

impl TraceMode {
    pub const DEFAULT_SKETCH_DIM: usize = 4096;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded count-sketch: coordinate `j` lands in bucket `h(j)` with sign `s(j)`.
pub fn count_sketch(v: &[f64], dim: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (j, &x) in v.iter().enumerate() {
        let h = splitmix64(seed ^ splitmix64(j as u64));
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign * x;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub t: u64,
    pub task: usize,
    pub grad: Vec<f64>,
}

/// Encoder gradients in iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTrace {
    pub mode: TraceMode,
    entries: Vec<TraceEntry>,
}

impl GradTrace {
    pub fn new(mode: TraceMode) -> Self {
        GradTrace { mode, entries: Vec::new() }
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.grad.len())
    }

    /// Appends a raw gradient, sketching it if the mode asks for it.
    pub fn record(&mut self, t: u64, task: usize, grad: &[f64]) -> Result<(), DiagnosticsError> {
        let retained = match self.mode {
            TraceMode::Sketch { dim, seed } => count_sketch(grad, dim, seed),
            _ => grad.to_vec(),
        };
        self.push(TraceEntry { t, task, grad: retained })
    }

    /// Appends an entry as stored (no sketching).
    pub fn push(&mut self, entry: TraceEntry) -> Result<(), DiagnosticsError> {
        if let Some(last) = self.entries.last() {
            if entry.t <= last.t {
                return Err(DiagnosticsError::NonIncreasing { prev: last.t, next: entry.t });
            }
            if entry.grad.len() != last.grad.len() {
                return Err(DiagnosticsError::LengthMismatch(last.grad.len(), entry.grad.len()));
            }
        }
        self.entries.push(entry);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsecutivePoint {
    /// Iteration of the later gradient.
    pub t: u64,
    pub task_prev: usize,
    pub task_curr: usize,
    pub similarity: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConsecutiveSeries {
    pub points: Vec<ConsecutivePoint>,
    /// Later-iteration index of every pair skipped because a gradient was zero.
    pub skipped: Vec<u64>,
}

/// Cosine between each gradient and its predecessor in the trace.
pub fn consecutive_trace(trace: &GradTrace) -> ConsecutiveSeries {
    let mut series = ConsecutiveSeries::default();
    for pair in trace.entries.windows(2) {
        let (prev, curr) = (&pair[0], &pair[1]);
        match cosine_similarity(&prev.grad, &curr.grad) {
            Ok(similarity) => series.points.push(ConsecutivePoint {
                t: curr.t,
                task_prev: prev.task,
                task_curr: curr.task,
                similarity,
                distance: 1.0 - similarity,
            }),
            Err(_) => series.skipped.push(curr.t),
        }
    }
    series
}

/// k×k rolling-mean cosine distances. Cell (i, j) aggregates consecutive
/// pairs where task i was sampled at t−1 and task j at t.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseCosMatrix {
    pub k: usize,
    /// Row-major; `None` where no pair was observed.
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl PairwiseCosMatrix {
    pub fn get(&self, prev: usize, curr: usize) -> Option<f64> {
        self.cells[prev * self.k + curr]
    }

    pub fn count(&self, prev: usize, curr: usize) -> usize {
        self.counts[prev * self.k + curr]
    }
}

/// Final value of a trailing window of `window` pairs per cell; `None`
/// for the window means all pairs.
pub fn pairwise_matrix(
    trace: &GradTrace,
    k: usize,
    window: Option<usize>,
) -> Result<PairwiseCosMatrix, DiagnosticsError> {
    if window == Some(0) {
        return Err(DiagnosticsError::InvalidArgument("window must be at least 1".into()));
    }
    let series = consecutive_trace(trace);
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); k * k];
    for p in &series.points {
        if p.task_prev >= k || p.task_curr >= k {
            return Err(DiagnosticsError::InvalidArgument(format!(
                "task index {} out of range for k = {k}",
                p.task_prev.max(p.task_curr)
            )));
        }
        per_cell[p.task_prev * k + p.task_curr].push(p.distance);
    }
    let counts = per_cell.iter().map(Vec::len).collect();
    let cells = per_cell
        .iter()
        .map(|d| {
            if d.is_empty() {
                return None;
            }
            let take = window.unwrap_or(d.len()).min(d.len());
            let tail = &d[d.len() - take..];
            Some(tail.iter().sum::<f64>() / take as f64)
        })
        .collect();
    Ok(PairwiseCosMatrix { k, cells, counts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationStats {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    pub p05: f64,
    pub p95: f64,
    /// Counts over [`HISTOGRAM_BINS`] equal bins spanning [−1, 1].
    pub histogram: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 40;
const PAIRS_PER_CHUNK: usize = 1024;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Cosine similarity of `n_pairs` independent standard-normal vector pairs
/// per dimension. Each chunk of pairs has its own seeded generator, so results
/// do not depend on the thread count.
pub fn concentration_experiment(
    dims: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<ConcentrationStats>, DiagnosticsError> {
    if let Some(&d) = dims.iter().find(|&&d| d < 2) {
        return Err(DiagnosticsError::InvalidArgument(format!("dimension {d} below 2")));
    }
    if n_pairs < 1000 {
        return Err(DiagnosticsError::InvalidArgument(format!("need at least 1000 pairs, got {n_pairs}")));
    }
    dims.iter()
        .enumerate()
        .map(|(di, &dim)| {
            let chunks = n_pairs.div_ceil(PAIRS_PER_CHUNK);
            let mut sims: Vec<f64> = (0..chunks)
                .into_par_iter()
                .flat_map_iter(|c| {
                    let stream = splitmix64(((di as u64) << 32) | c as u64);
                    let mut rng = Xoshiro256PlusPlus::seed_from_u64(splitmix64(seed ^ stream));
                    let count = PAIRS_PER_CHUNK.min(n_pairs - c * PAIRS_PER_CHUNK);
                    let mut u = vec![0.0; dim];
                    let mut v = vec![0.0; dim];
                    (0..count)
                        .map(|_| {
                            fill_normal(&mut rng, &mut u);
                            fill_normal(&mut rng, &mut v);
                            cosine_similarity(&u, &v).unwrap_or(0.0)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            let n = sims.len() as f64;
            let mean = sims.iter().sum::<f64>() / n;
            let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let mut histogram = vec![0usize; HISTOGRAM_BINS];
            for &s in &sims {
                let bin = (((s + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
                histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
            }
            sims.sort_by(f64::total_cmp);
            Ok(ConcentrationStats {
                dim,
                mean,
                std: var.sqrt(),
                p05: quantile(&sims, 0.05),
                p95: quantile(&sims, 0.95),
                histogram,
            })
        })
        .collect()
}

fn fill_normal(rng: &mut impl RngCore, out: &mut [f64]) {
    for x in out {
        *x = StandardNormal.sample(rng);
    }
}

/// Least-squares slope of `ln(std)` against `ln(dim)`.
pub fn loglog_slope(stats: &[ConcentrationStats]) -> f64 {
    let pts: Vec<(f64, f64)> = stats.iter().map(|s| ((s.dim as f64).ln(), s.std.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub const TRACE_MAGIC: &[u8; 4] = b"MTLG";
pub const TRACE_VERSION: u16 = 1;

/// Layout: mode `u8` (1 exact, 2 sketch, followed by dim `u64` and seed
/// `u64`), entry count `u64`, vector length `u32`, then per entry `t` `u64`,
/// task `u32` and the vector as raw `f64`s.
pub fn encode_trace(trace: &GradTrace) -> Vec<u8> {
    let mut w = Writer::new(TRACE_MAGIC, TRACE_VERSION);
    match trace.mode {
        TraceMode::Off | TraceMode::Exact => w.u8(1),
        TraceMode::Sketch { dim, seed } => {
            w.u8(2);
            w.u64(dim as u64);
            w.u64(seed);
        }
    }
    w.u64(trace.entries.len() as u64);
    w.u32(trace.dim().unwrap_or(0) as u32);
    for e in &trace.entries {
        w.u64(e.t);
        w.u32(e.task as u32);
        for &v in &e.grad {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn decode_trace(bytes: &[u8]) -> Result<GradTrace, FormatError> {
    let mut r = Reader::open(bytes, TRACE_MAGIC, TRACE_VERSION)?;
    let mode = match r.u8()? {
        1 => TraceMode::Exact,
        2 => {
            let dim = r.u64()? as usize;
            TraceMode::Sketch { dim, seed: r.u64()? }
        }
        m => return Err(r.malformed(format!("unknown trace mode {m}"))),
    };
    let n = r.u64()?;
    let dim = r.u32()? as usize;
    // Every entry takes at least 12 bytes, which bounds a corrupt count.
    if n > (bytes.len() / 12) as u64 {
        return Err(r.malformed(format!("entry count {n} exceeds the file size")));
    }
    let mut trace = GradTrace::new(mode);
    for _ in 0..n {
        let t = r.u64()?;
        let task = r.u32()? as usize;
        let grad = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        trace.push(TraceEntry { t, task, grad }).map_err(|e| r.malformed(e.to_string()))?;
    }
    r.finish()?;
    Ok(trace)
}

pub fn save_trace(path: &Path, trace: &GradTrace) -> Result<(), FormatError> {
    std::fs::write(path, encode_trace(trace))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<GradTrace, FormatError> {
    decode_trace(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -0.5];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine_distance(&u, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&u, &[0.0; 3]), Err(DiagnosticsError::ZeroVector));
    }

    fn trace_of(grads: &[(usize, Vec<f64>)]) -> GradTrace {
        let mut tr = GradTrace::new(TraceMode::Exact);
        for (t, (task, g)) in grads.iter().enumerate() {
            tr.record(t as u64, *task, g).unwrap();
        }
        tr
    }

    #[test]
    fn constant_and_alternating_traces() {
        let v = vec![0.5, -1.0, 2.0];
        let same = trace_of(&vec![(0, v.clone()); 5]);
        let s = consecutive_trace(&same);
        assert_eq!(s.points.len(), 4);
        assert!(s.points.iter().all(|p| p.distance.abs() < 1e-12));

        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let alt = trace_of(&[(0, v.clone()), (1, neg.clone()), (0, v.clone()), (1, neg)]);
        let s = consecutive_trace(&alt);
        assert!(s.points.iter().all(|p| (p.distance - 2.0).abs() < 1e-12));
        assert_eq!(s.points[0].t, 1);
    }

    #[test]
    fn zero_gradients_are_skipped() {
        let tr = trace_of(&[(0, vec![1.0, 0.0]), (0, vec![0.0, 0.0]), (0, vec![1.0, 1.0]), (0, vec![2.0, 1.0])]);
        let s = consecutive_trace(&tr);
        assert_eq!(s.skipped, vec![1, 2]);
        assert_eq!(s.points.len(), 4 - 1 - 2);
    }

    #[test]
    fn trace_rejects_bad_order_and_dims() {
        let mut tr = GradTrace::new(TraceMode::Exact);
        tr.record(3, 0, &[1.0]).unwrap();
        assert!(tr.record(3, 0, &[1.0]).is_err());
        assert!(tr.record(4, 0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_task_matrix() {
        let tr = trace_of(&[(0, vec![1.0, 0.0]), (0, vec![1.0, 1.0]), (0, vec![0.0, 1.0])]);
        let m = pairwise_matrix(&tr, 1, Some(10)).unwrap();
        assert_eq!(m.count(0, 0), 2);
        assert!(m.get(0, 0).is_some());

        let m3 = pairwise_matrix(&tr, 3, Some(10)).unwrap();
        assert_eq!(m3.cells.iter().filter(|c| c.is_some()).count(), 1);
    }

    #[test]
    fn window_keeps_final_values() {
        // distances: 0 (t=1), 1 (t=2), 1 (t=3)
        let tr = trace_of(&[(0, vec![1.0, 0.0]), (0, vec![1.0, 0.0]), (0, vec![0.0, 1.0]), (0, vec![1.0, 0.0])]);
        let last_two = pairwise_matrix(&tr, 1, Some(2)).unwrap();
        assert!((last_two.get(0, 0).unwrap() - 1.0).abs() < 1e-12);
        let all = pairwise_matrix(&tr, 1, None).unwrap();
        assert!((all.get(0, 0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sketch_preserves_dimension_and_approximates_cosine() {
        let u: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 101) as f64 - 50.0).collect();
        let v: Vec<f64> = (0..2000).map(|i| ((i * 104_729) % 89) as f64 - 44.0 + 0.5 * u[i]).collect();
        let exact = cosine_similarity(&u, &v).unwrap();
        let su = count_sketch(&u, 4096, 11);
        let sv = count_sketch(&v, 4096, 11);
        assert_eq!(su.len(), 4096);
        assert!((cosine_similarity(&su, &sv).unwrap() - exact).abs() < 0.1);
    }

    #[test]
    fn concentration_small_run_is_deterministic() {
        let a = concentration_experiment(&[4, 64], 3000, 5).unwrap();
        let b = concentration_experiment(&[4, 64], 3000, 5).unwrap();
        assert_eq!(a, b);
        assert!(a[1].std < a[0].std);
        assert_eq!(a[0].histogram.iter().sum::<usize>(), 3000);
        assert!(concentration_experiment(&[1], 3000, 5).is_err());
    }

    #[test]
    fn trace_file_roundtrip() {
        let mut tr = GradTrace::new(TraceMode::Sketch { dim: 3, seed: 9 });
        tr.record(0, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        tr.record(2, 0, &[-1.0, 0.5, 0.0, 2.0]).unwrap();
        let bytes = encode_trace(&tr);
        assert_eq!(decode_trace(&bytes).unwrap(), tr);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_trace(&bad), Err(FormatError::Checksum { .. })));
        assert!(decode_trace(&bytes[..bytes.len() - 5]).is_err());
        let empty = GradTrace::new(TraceMode::Exact);
        assert_eq!(decode_trace(&encode_trace(&empty)).unwrap(), empty);
    }
}
