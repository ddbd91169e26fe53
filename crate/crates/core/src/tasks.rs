//! Synthetic task generators, batch sampling and the dataset file format.
//!
//! Every example is generated from its own ChaCha stream keyed by
//! `(seed, example index)`, so the parallel generators produce the same
//! bytes as a serial loop would.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, TaskError};
use crate::format::{Reader, Writer};
use crate::metrics::InstanceMask;
use crate::model::{OutputActivation, Targets};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MTLD";
pub const DATASET_VERSION: u16 = 1;
pub const MASK_MAGIC: &[u8; 4] = b"MTLM";
pub const MASK_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    BinarySegmentation,
    InstanceSegmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    SoftmaxCe,
    SigmoidBce,
    PixelSoftmaxCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Pq,
}

impl TaskKind {
    fn code(self) -> u8 {
        match self {
            TaskKind::Classification => 0,
            TaskKind::BinarySegmentation => 1,
            TaskKind::InstanceSegmentation => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TaskKind::Classification,
            1 => TaskKind::BinarySegmentation,
            2 => TaskKind::InstanceSegmentation,
            _ => return None,
        })
    }

    pub fn is_segmentation(self) -> bool {
        self != TaskKind::Classification
    }
}

impl LossSpec {
    fn code(self) -> u8 {
        match self {
            LossSpec::SoftmaxCe => 0,
            LossSpec::SigmoidBce => 1,
            LossSpec::PixelSoftmaxCe => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LossSpec::SoftmaxCe,
            1 => LossSpec::SigmoidBce,
            2 => LossSpec::PixelSoftmaxCe,
            _ => return None,
        })
    }
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Pq => "pq",
        }
    }
}

/// Task metadata. For segmentation, `num_classes` counts foreground classes
/// (1 for binary tasks).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub loss: LossSpec,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::InvalidParams(format!("task '{}': {msg}", self.name)));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        let consistent = match self.kind {
            TaskKind::Classification => {
                matches!(self.loss, LossSpec::SoftmaxCe | LossSpec::SigmoidBce) && self.metric == MetricKind::Accuracy
            }
            TaskKind::BinarySegmentation => {
                matches!(self.loss, LossSpec::SigmoidBce | LossSpec::PixelSoftmaxCe) && self.metric == MetricKind::Pq
            }
            TaskKind::InstanceSegmentation => self.loss == LossSpec::PixelSoftmaxCe && self.metric == MetricKind::Pq,
        };
        if !consistent {
            return bad(format!("{:?} / {:?} / {:?} is not a valid combination", self.kind, self.loss, self.metric));
        }
        match self.kind {
            TaskKind::Classification if self.num_classes < 2 => bad("classification needs K ≥ 2".into()),
            TaskKind::BinarySegmentation if self.num_classes != 1 => bad("binary segmentation has K = 1".into()),
            TaskKind::InstanceSegmentation if self.num_classes < 1 => bad("instance segmentation needs K ≥ 1".into()),
            _ => Ok(()),
        }
    }

    /// Number of decoder output channels.
    pub fn decoder_arity(&self) -> usize {
        match (self.kind, self.loss) {
            (TaskKind::Classification, _) => self.num_classes,
            (TaskKind::BinarySegmentation, LossSpec::SigmoidBce) => 1,
            // Background plus each foreground class.
            _ => self.num_classes + 1,
        }
    }

    pub fn output_activation(&self) -> OutputActivation {
        match self.loss {
            LossSpec::SigmoidBce => OutputActivation::Sigmoid,
            LossSpec::SoftmaxCe | LossSpec::PixelSoftmaxCe => OutputActivation::Softmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Row-major `H×W` instance labelling; binary tasks use class 0 only.
    Mask(InstanceMask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `C×H×W`.
    pub input: Tensor,
    pub target: Target,
    pub split: Split,
}

/// One task's examples. Each example carries its split tag, so the splits are
/// disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub seed: u64,
    examples: Vec<Example>,
    train: Vec<usize>,
    eval: Vec<usize>,
}

impl TaskDataset {
    pub fn new(spec: TaskSpec, seed: u64, examples: Vec<Example>) -> Result<Self, TaskError> {
        spec.validate()?;
        let [c, h, w] = spec.input_shape;
        for (i, ex) in examples.iter().enumerate() {
            let bad = |msg: String| Err(TaskError::InvalidParams(format!("example {i}: {msg}")));
            if ex.input.shape() != [c, h, w] {
                return bad(format!("input shape {:?}, expected {:?}", ex.input.shape(), spec.input_shape));
            }
            match (&ex.target, spec.kind) {
                (Target::Class(label), TaskKind::Classification) if *label < spec.num_classes => {}
                (Target::Mask(mask), kind) if kind.is_segmentation() => {
                    if (mask.height(), mask.width()) != (h, w) {
                        return bad(format!("mask is {}×{}, expected {h}×{w}", mask.height(), mask.width()));
                    }
                    if let Some(c) = mask.classes().values().find(|&&c| c as usize >= spec.num_classes) {
                        return bad(format!("instance class {c} out of range"));
                    }
                }
                _ => return bad("target does not match the task kind".into()),
            }
        }
        let pick = |s: Split| examples.iter().enumerate().filter(|(_, e)| e.split == s).map(|(i, _)| i).collect();
        let (train, eval) = (pick(Split::Train), pick(Split::Eval));
        Ok(TaskDataset { spec, seed, examples, train, eval })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// `floor(u · n)` for a uniform 64-bit `u`; bias is below 2⁻⁶⁴·n.
pub fn uniform_index(rng: &mut (impl RngCore + ?Sized), n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// A sampled batch ready for the decoder loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N×C×H×W`.
    pub x: Tensor,
    pub targets: Targets,
    pub indices: Vec<usize>,
}

/// Encodes one mask as the decoder target: `{0,1}` floats for sigmoid
/// heads, `class + 1` labels (0 = background) for softmax heads.
fn mask_targets(spec: &TaskSpec, mask: &InstanceMask, dense: &mut Vec<f64>, labels: &mut Vec<usize>) {
    for &id in mask.ids() {
        match spec.loss {
            LossSpec::SigmoidBce => dense.push(if id == 0 { 0.0 } else { 1.0 }),
            _ => labels.push(if id == 0 { 0 } else { mask.class_of(id).expect("validated") as usize + 1 }),
        }
    }
}

/// Assembles the batch for the given example indices.
pub fn make_batch(ds: &TaskDataset, indices: Vec<usize>) -> Result<Batch, TaskError> {
    let [c, h, w] = ds.spec.input_shape;
    let mut x = Vec::with_capacity(indices.len() * c * h * w);
    let mut labels = Vec::new();
    let mut dense = Vec::new();
    for &i in &indices {
        let ex = ds
            .examples
            .get(i)
            .ok_or_else(|| TaskError::InvalidParams(format!("example index {i} out of range")))?;
        x.extend_from_slice(ex.input.data());
        match &ex.target {
            Target::Class(label) => labels.push(*label),
            Target::Mask(mask) => mask_targets(&ds.spec, mask, &mut dense, &mut labels),
        }
    }
    let n = indices.len();
    if n == 0 {
        return Err(TaskError::EmptySplit);
    }
    let x = Tensor::new(vec![n, c, h, w], x).map_err(|e| TaskError::InvalidParams(e.to_string()))?;
    let targets = if ds.spec.loss == LossSpec::SigmoidBce && ds.spec.kind.is_segmentation() {
        Targets::Dense(Tensor::new(vec![n, 1, h, w], dense).map_err(|e| TaskError::InvalidParams(e.to_string()))?)
    } else if ds.spec.loss == LossSpec::SigmoidBce {
        // Sigmoid classification: one-hot rows.
        let k = ds.spec.num_classes;
        let mut t = vec![0.0; n * k];
        for (row, &l) in labels.iter().enumerate() {
            t[row * k + l] = 1.0;
        }
        Targets::Dense(Tensor::new(vec![n, k], t).map_err(|e| TaskError::InvalidParams(e.to_string()))?)
    } else {
        Targets::Labels(labels)
    };
    Ok(Batch { x, targets, indices })
}

/// Uniform sampling with replacement from one split.
pub fn sample_batch(
    ds: &TaskDataset,
    split: Split,
    batch_size: usize,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<Batch, TaskError> {
    let pool = ds.split_indices(split);
    if pool.is_empty() {
        return Err(TaskError::EmptySplit);
    }
    if batch_size == 0 {
        return Err(TaskError::InvalidParams("batch_size must be at least 1".into()));
    }
    let indices = (0..batch_size).map(|_| pool[uniform_index(rng, pool.len())]).collect();
    make_batch(ds, indices)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rejection-samples `n` points in `[lo, hi]^dim` with pairwise distance at
/// least `min_dist` from each other and from `avoid`. The distance is relaxed
/// by 10% whenever 2000 consecutive draws fail.
fn separated_points(
    n: usize,
    dim: usize,
    (lo, hi): (f64, f64),
    mut min_dist: f64,
    avoid: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut fails = 0;
    while pts.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..hi)).collect();
        let far = |q: &Vec<f64>| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist;
        if pts.iter().chain(avoid).all(far) {
            pts.push(p);
            fails = 0;
        } else {
            fails += 1;
            if fails == 2000 {
                min_dist *= 0.9;
                fails = 0;
            }
        }
    }
    pts
}

/// Gaussian noise smoothed by two box blurs of radius 2, rescaled to unit
/// standard deviation.
fn smooth_texture(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..h * w).map(|_| normal(rng)).collect();
    for _ in 0..2 {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut c) = (0.0, 0.0);
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        s += t[yy * w + xx];
                        c += 1.0;
                    }
                }
                out[y * w + x] = s / c;
            }
        }
        t = out;
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let std = (t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    t.iter().map(|v| (v - mean) / std).collect()
}

fn split_of(index: usize, n_train: usize) -> (Split, usize) {
    if index < n_train {
        (Split::Train, index)
    } else {
        (Split::Eval, index - n_train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationParams {
    pub id: u32,
    pub name: String,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(default)]
    pub difficulty: f64,
    pub seed: u64,
}

/// K class prototypes, each a colour plus a smooth Gaussian texture; an
/// example is its class prototype plus i.i.d. pixel noise with standard
/// deviation `0.5 + difficulty`. Labels cycle through the classes within each
/// split, so class counts differ by at most one.
pub fn gen_classification_task(p: &ClassificationParams) -> Result<TaskDataset, TaskError> {
    let k = p.num_classes;
    if k < 2 {
        return Err(TaskError::InvalidParams(format!("classification needs K ≥ 2, got {k}")));
    }
    if p.n_train < k || p.n_eval < k {
        return Err(TaskError::InvalidParams(format!(
            "need at least K = {k} examples per split, got {} train / {} eval",
            p.n_train, p.n_eval
        )));
    }
    if !(p.difficulty >= 0.0 && p.difficulty.is_finite()) {
        return Err(TaskError::InvalidParams(format!("difficulty {} must be ≥ 0", p.difficulty)));
    }
    let [c, h, w] = p.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(TaskError::InvalidParams(format!("input shape {:?}", p.input_shape)));
    }
    let mut rng = stream_rng(p.seed, 0);
    let colours = separated_points(k, c, (-1.5, 1.5), 1.0, &[], &mut rng);
    let prototypes: Vec<Vec<f64>> = colours
        .iter()
        .map(|colour| {
            let mut proto = Vec::with_capacity(c * h * w);
            for &base in colour {
                let tex = smooth_texture(h, w, &mut rng);
                proto.extend(tex.iter().map(|t| base + 0.5 * t));
            }
            proto
        })
        .collect();
    let sigma = 0.5 + p.difficulty;
    let examples = (0..p.n_train + p.n_eval)
        .into_par_iter()
        .map(|i| {
            let (split, local) = split_of(i, p.n_train);
            let label = local % k;
            let mut rng = stream_rng(p.seed, i as u64 + 1);
            let data = prototypes[label].iter().map(|&v| v + sigma * normal(&mut rng)).collect();
            Example { input: Tensor::from_parts(vec![c, h, w], data), target: Target::Class(label), split }
        })
        .collect();
    let spec = TaskSpec {
        id: p.id,
        name: p.name.clone(),
        kind: TaskKind::Classification,
        num_classes: k,
        input_shape: p.input_shape,
        loss: LossSpec::SoftmaxCe,
        metric: MetricKind::Accuracy,
    };
    TaskDataset::new(spec, p.seed, examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeStyle {
    Rects,
    Disks,
    #[default]
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub id: u32,
    pub name: String,
    pub kind: TaskKind,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub max_instances: usize,
    /// Foreground classes; forced to 1 for binary tasks.
    #[serde(default = "one")]
    pub num_classes: usize,
    #[serde(default)]
    pub shapes: ShapeStyle,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Minimum number of background pixels between two instances.
const INSTANCE_GAP: usize = 2;
const PLACEMENT_RETRIES: usize = 100;

/// Pixel indices of one random shape lying fully inside an `s×s` image.
fn random_shape(s: usize, disk: bool, rng: &mut impl Rng) -> Vec<usize> {
    if disk {
        let r = rng.random_range((s / 12).max(1)..=(s / 6).max(1)) as i64;
        let cy = rng.random_range(r..s as i64 - r);
        let cx = rng.random_range(r..s as i64 - r);
        let mut px = Vec::new();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                    px.push(y as usize * s + x as usize);
                }
            }
        }
        px
    } else {
        let lo = (s / 8).max(2);
        let hi = (s / 3).max(lo);
        let (rh, rw) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let y0 = rng.random_range(0..=s - rh);
        let x0 = rng.random_range(0..=s - rw);
        (y0..y0 + rh).flat_map(|y| (x0..x0 + rw).map(move |x| y * s + x)).collect()
    }
}

/// Places up to `count` non-overlapping shapes with at least
/// `INSTANCE_GAP` background pixels between them. Returns the id map.
fn place_instances(s: usize, count: usize, style: ShapeStyle, rng: &mut impl Rng) -> (Vec<u32>, usize) {
    let mut ids = vec![0u32; s * s];
    // Pixels within the gap of some instance.
    let mut blocked = vec![false; s * s];
    let mut placed = 0;
    for _ in 0..count {
        for _ in 0..PLACEMENT_RETRIES {
            let disk = match style {
                ShapeStyle::Rects => false,
                ShapeStyle::Disks => true,
                ShapeStyle::Mixed => rng.random_bool(0.5),
            };
            let px = random_shape(s, disk, rng);
            if px.iter().any(|&i| blocked[i]) {
                continue;
            }
            placed += 1;
            for &i in &px {
                ids[i] = placed as u32;
                let (y, x) = (i / s, i % s);
                for yy in y.saturating_sub(INSTANCE_GAP)..(y + INSTANCE_GAP + 1).min(s) {
                    for xx in x.saturating_sub(INSTANCE_GAP)..(x + INSTANCE_GAP + 1).min(s) {
                        blocked[yy * s + xx] = true;
                    }
                }
            }
            break;
        }
    }
    (ids, placed)
}

/// Images of non-overlapping rectangles and/or disks on a dark textured
/// background. Instance tasks colour each instance by its class; binary tasks
/// give every instance its own random bright colour.
pub fn gen_segmentation_task(p: &SegmentationParams) -> Result<TaskDataset, TaskError> {
    let s = p.image_size;
    if s < 8 {
        return Err(TaskError::InvalidParams(format!("image_size must be ≥ 8, got {s}")));
    }
    if p.max_instances < 1 {
        return Err(TaskError::InvalidParams("max_instances must be ≥ 1".into()));
    }
    if p.channels == 0 {
        return Err(TaskError::InvalidParams("channels must be ≥ 1".into()));
    }
    if p.n_train == 0 || p.n_eval == 0 {
        return Err(TaskError::InvalidParams("both splits need at least one example".into()));
    }
    let (num_classes, loss) = match p.kind {
        TaskKind::BinarySegmentation => (1, LossSpec::SigmoidBce),
        TaskKind::InstanceSegmentation if p.num_classes >= 1 => (p.num_classes, LossSpec::PixelSoftmaxCe),
        TaskKind::InstanceSegmentation => {
            return Err(TaskError::InvalidParams("instance segmentation needs K ≥ 1".into()))
        }
        TaskKind::Classification => {
            return Err(TaskError::InvalidParams("segmentation generator got a classification kind".into()))
        }
    };
    let c = p.channels;
    let background = vec![-0.75; c];
    let mut rng = stream_rng(p.seed, 0);
    let class_colours = separated_points(num_classes, c, (0.0, 1.5), 0.9, &[background.clone()], &mut rng);
    let examples = (0..p.n_train + p.n_eval)
        .into_par_iter()
        .map(|i| {
            let (split, _) = split_of(i, p.n_train);
            let mut rng = stream_rng(p.seed, i as u64 + 1);
            let count = rng.random_range(1..=p.max_instances);
            let (ids, placed) = place_instances(s, count, p.shapes, &mut rng);
            let mut classes = BTreeMap::new();
            let mut colours = Vec::with_capacity(placed);
            for id in 1..=placed as u32 {
                let class = rng.random_range(0..num_classes) as u32;
                classes.insert(id, class);
                colours.push(match p.kind {
                    TaskKind::InstanceSegmentation => class_colours[class as usize].clone(),
                    _ => (0..c).map(|_| rng.random_range(0.25..1.5)).collect(),
                });
            }
            let mut data = vec![0.0; c * s * s];
            for ch in 0..c {
                for (px, &id) in ids.iter().enumerate() {
                    let base = if id == 0 { background[ch] } else { colours[id as usize - 1][ch] };
                    data[ch * s * s + px] = base + 0.15 * normal(&mut rng);
                }
            }
            let mask = InstanceMask::new(s, s, ids, classes).expect("generator builds valid masks");
            Example { input: Tensor::from_parts(vec![c, s, s], data), target: Target::Mask(mask), split }
        })
        .collect();
    let spec = TaskSpec {
        id: p.id,
        name: p.name.clone(),
        kind: p.kind,
        num_classes,
        input_shape: [c, s, s],
        loss,
        metric: MetricKind::Pq,
    };
    TaskDataset::new(spec, p.seed, examples)
}

/// Parameters for either generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum TaskParams {
    Classification(ClassificationParams),
    Segmentation(SegmentationParams),
}

impl TaskParams {
    pub fn name(&self) -> &str {
        match self {
            TaskParams::Classification(p) => &p.name,
            TaskParams::Segmentation(p) => &p.name,
        }
    }

    pub fn generate(&self) -> Result<TaskDataset, TaskError> {
        match self {
            TaskParams::Classification(p) => gen_classification_task(p),
            TaskParams::Segmentation(p) => gen_segmentation_task(p),
        }
    }
}

/// Derives a per-task seed from the suite seed.
pub fn task_seed(suite_seed: u64, task: u32) -> u64 {
    let mut z = suite_seed ^ (u64::from(task).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DEFAULT_CLASS_COUNTS: [usize; 7] = [2, 9, 6, 3, 4, 3, 5];

/// Seven classification tasks with the given arities, one instance
/// segmentation task with two classes and three binary segmentation tasks.
pub fn default_suite(seed: u64, n_train: usize, n_eval: usize) -> Vec<TaskParams> {
    let mut suite = Vec::new();
    for (i, &k) in DEFAULT_CLASS_COUNTS.iter().enumerate() {
        let id = i as u32;
        suite.push(TaskParams::Classification(ClassificationParams {
            id,
            name: format!("cls{id}_k{k}"),
            num_classes: k,
            input_shape: [3, 32, 32],
            n_train,
            n_eval,
            difficulty: 0.0,
            seed: task_seed(seed, id),
        }));
    }
    let seg = [
        ("inst_k2", TaskKind::InstanceSegmentation, 2, ShapeStyle::Mixed, 4),
        ("bin_rects", TaskKind::BinarySegmentation, 1, ShapeStyle::Rects, 4),
        ("bin_disks", TaskKind::BinarySegmentation, 1, ShapeStyle::Disks, 5),
        ("bin_mixed", TaskKind::BinarySegmentation, 1, ShapeStyle::Mixed, 3),
    ];
    for (j, (name, kind, k, shapes, max_instances)) in seg.into_iter().enumerate() {
        let id = (DEFAULT_CLASS_COUNTS.len() + j) as u32;
        suite.push(TaskParams::Segmentation(SegmentationParams {
            id,
            name: format!("seg{id}_{name}"),
            kind,
            image_size: 32,
            channels: 3,
            max_instances,
            num_classes: k,
            shapes,
            n_train,
            n_eval,
            seed: task_seed(seed, id),
        }));
    }
    suite
}

fn write_spec(w: &mut Writer, spec: &TaskSpec) {
    w.u8(spec.kind.code());
    w.u16(u16::try_from(spec.num_classes).expect("K fits in u16"));
    w.u8(3);
    for d in spec.input_shape {
        w.u32(d as u32);
    }
    w.u32(spec.id);
    w.u8(spec.loss.code());
    w.u8(match spec.metric {
        MetricKind::Accuracy => 0,
        MetricKind::Pq => 1,
    });
    w.str(&spec.name);
}

fn read_spec(r: &mut Reader) -> Result<TaskSpec, FormatError> {
    let kind = r.u8()?;
    let kind = TaskKind::from_code(kind).ok_or_else(|| r.malformed(format!("unknown task kind {kind}")))?;
    let num_classes = r.u16()? as usize;
    if r.u8()? != 3 {
        return Err(r.malformed("input shape must have 3 dims"));
    }
    let mut input_shape = [0; 3];
    for d in &mut input_shape {
        *d = r.u32()? as usize;
    }
    let id = r.u32()?;
    let loss = r.u8()?;
    let loss = LossSpec::from_code(loss).ok_or_else(|| r.malformed(format!("unknown loss {loss}")))?;
    let metric = match r.u8()? {
        0 => MetricKind::Accuracy,
        1 => MetricKind::Pq,
        m => return Err(r.malformed(format!("unknown metric {m}"))),
    };
    let name = r.str()?;
    Ok(TaskSpec { id, name, kind, num_classes, input_shape, loss, metric })
}

/// Instance masks as an i32 id map `[H, W]` plus an i32 `[n, 2]` table of
/// `(id, class)` rows.
fn write_mask_blocks(w: &mut Writer, masks: &[&InstanceMask], h: usize, wd: usize) {
    let ids: Vec<i32> = masks.iter().flat_map(|m| m.ids().iter().map(|&id| id as i32)).collect();
    let mut shape = vec![h, wd];
    if masks.len() != 1 {
        shape.insert(0, masks.len());
    }
    w.tensor_i32(&shape, &ids);
    let mut table = Vec::new();
    for (n, m) in masks.iter().enumerate() {
        for (&id, &class) in m.classes() {
            if masks.len() != 1 {
                table.push(n as i32);
            }
            table.extend([id as i32, class as i32]);
        }
    }
    let cols = if masks.len() != 1 { 3 } else { 2 };
    w.tensor_i32(&[table.len() / cols, cols], &table);
}

fn read_mask_blocks(r: &mut Reader, n: Option<usize>, h: usize, w: usize) -> Result<Vec<InstanceMask>, FormatError> {
    let at = r.offset();
    let (shape, ids) = r.tensor_i32()?;
    let expected: Vec<usize> = match n {
        Some(n) => vec![n, h, w],
        None => shape.clone(),
    };
    if shape != expected || shape.len() != n.map_or(2, |_| 3) {
        return Err(FormatError::Malformed { offset: at, reason: format!("mask block has shape {shape:?}") });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let count = n.unwrap_or(1);
    let at = r.offset();
    let (tshape, table) = r.tensor_i32()?;
    let cols = if n.is_some() { 3 } else { 2 };
    if tshape.len() != 2 || tshape[1] != cols {
        return Err(FormatError::Malformed { offset: at, reason: format!("class table has shape {tshape:?}") });
    }
    let mut classes = vec![BTreeMap::new(); count];
    for row in table.chunks_exact(cols) {
        let (m, id, class) = if cols == 3 { (row[0], row[1], row[2]) } else { (0, row[0], row[1]) };
        if m < 0 || m as usize >= count || id <= 0 || class < 0 {
            return Err(FormatError::Malformed { offset: at, reason: format!("invalid class row {row:?}") });
        }
        classes[m as usize].insert(id as u32, class as u32);
    }
    let mut masks = Vec::with_capacity(count);
    for (m, classes) in classes.into_iter().enumerate() {
        let slice = &ids[m * h * w..(m + 1) * h * w];
        if slice.iter().any(|&v| v < 0) {
            return Err(FormatError::Malformed { offset: at, reason: "negative instance id".into() });
        }
        let mask = InstanceMask::new(h, w, slice.iter().map(|&v| v as u32).collect(), classes)
            .map_err(|e| FormatError::Malformed { offset: at, reason: e.to_string() })?;
        masks.push(mask);
    }
    Ok(masks)
}

pub fn encode_dataset(ds: &TaskDataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    write_spec(&mut w, &ds.spec);
    w.u64(ds.seed);
    let n = ds.examples.len();
    w.u32(u32::try_from(n).expect("example count fits in u32"));
    let [c, h, wd] = ds.spec.input_shape;
    if n > 0 {
        let data: Vec<f64> = ds.examples.iter().flat_map(|e| e.input.data().iter().copied()).collect();
        w.tensor_f64(&Tensor::from_parts(vec![n, c, h, wd], data));
    }
    let splits: Vec<i32> = ds.examples.iter().map(|e| i32::from(e.split == Split::Eval)).collect();
    w.tensor_i32(&[n], &splits);
    match ds.spec.kind {
        TaskKind::Classification => {
            let labels: Vec<i32> = ds
                .examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(l) => l as i32,
                    Target::Mask(_) => unreachable!("validated on construction"),
                })
                .collect();
            w.tensor_i32(&[n], &labels);
        }
        _ => {
            let masks: Vec<&InstanceMask> = ds
                .examples
                .iter()
                .map(|e| match &e.target {
                    Target::Mask(m) => m,
                    Target::Class(_) => unreachable!("validated on construction"),
                })
                .collect();
            write_mask_blocks(&mut w, &masks, h, wd);
        }
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TaskDataset, TaskError> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let spec = read_spec(&mut r)?;
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let [c, h, w] = spec.input_shape;
    let at = r.offset();
    let inputs = if n > 0 {
        let t = r.tensor_f64()?;
        if t.shape() != [n, c, h, w] {
            return Err(FormatError::Malformed { offset: at, reason: format!("input block shape {:?}", t.shape()) }.into());
        }
        t.into_data()
    } else {
        Vec::new()
    };
    let at = r.offset();
    let (sshape, splits) = r.tensor_i32()?;
    if sshape != [n] || splits.iter().any(|&s| s != 0 && s != 1) {
        return Err(FormatError::Malformed { offset: at, reason: "invalid split block".into() }.into());
    }
    let targets: Vec<Target> = match spec.kind {
        TaskKind::Classification => {
            let at = r.offset();
            let (lshape, labels) = r.tensor_i32()?;
            if lshape != [n] || labels.iter().any(|&l| l < 0) {
                return Err(FormatError::Malformed { offset: at, reason: "invalid label block".into() }.into());
            }
            labels.into_iter().map(|l| Target::Class(l as usize)).collect()
        }
        _ => read_mask_blocks(&mut r, Some(n), h, w)?.into_iter().map(Target::Mask).collect(),
    };
    r.finish()?;
    let size = c * h * w;
    let examples = targets
        .into_iter()
        .enumerate()
        .map(|(i, target)| Example {
            input: Tensor::from_parts(vec![c, h, w], inputs[i * size..(i + 1) * size].to_vec()),
            target,
            split: if splits[i] == 0 { Split::Train } else { Split::Eval },
        })
        .collect();
    TaskDataset::new(spec, seed, examples)
}

pub fn save_dataset(path: &Path, ds: &TaskDataset) -> Result<(), TaskError> {
    std::fs::write(path, encode_dataset(ds)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset, TaskError> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    decode_dataset(&bytes)
}

pub fn encode_mask(mask: &InstanceMask) -> Vec<u8> {
    let mut w = Writer::new(MASK_MAGIC, MASK_VERSION);
    write_mask_blocks(&mut w, &[mask], mask.height(), mask.width());
    w.finish()
}

pub fn decode_mask(bytes: &[u8]) -> Result<InstanceMask, FormatError> {
    let mut r = Reader::open(bytes, MASK_MAGIC, MASK_VERSION)?;
    let mask = read_mask_blocks(&mut r, None, 0, 0)?.pop().expect("one mask");
    r.finish()?;
    Ok(mask)
}

pub fn save_mask(path: &Path, mask: &InstanceMask) -> Result<(), FormatError> {
    std::fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<InstanceMask, FormatError> {
    decode_mask(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls(k: usize, seed: u64) -> ClassificationParams {
        ClassificationParams {
            id: 0,
            name: "c".into(),
            num_classes: k,
            input_shape: [3, 8, 8],
            n_train: 20,
            n_eval: 7,
            difficulty: 0.0,
            seed,
        }
    }

    fn seg(kind: TaskKind, max_instances: usize) -> SegmentationParams {
        SegmentationParams {
            id: 1,
            name: "s".into(),
            kind,
            image_size: 16,
            channels: 3,
            max_instances,
            num_classes: 2,
            shapes: ShapeStyle::Mixed,
            n_train: 12,
            n_eval: 4,
            seed: 5,
        }
    }

    #[test]
    fn classification_is_deterministic_and_balanced() {
        let a = gen_classification_task(&cls(3, 9)).unwrap();
        let b = gen_classification_task(&cls(3, 9)).unwrap();
        assert_eq!(encode_dataset(&a), encode_dataset(&b));
        for split in [Split::Train, Split::Eval] {
            let mut hist = [0usize; 3];
            for &i in a.split_indices(split) {
                let Target::Class(l) = a.examples()[i].target else { panic!() };
                hist[l] += 1;
            }
            assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn classification_rejects_bad_params() {
        assert!(gen_classification_task(&cls(1, 0)).is_err());
        let mut p = cls(3, 0);
        p.n_eval = 2;
        assert!(gen_classification_task(&p).is_err());
    }

    #[test]
    fn segmentation_single_instance() {
        let ds = gen_segmentation_task(&seg(TaskKind::InstanceSegmentation, 1)).unwrap();
        for ex in ds.examples() {
            let Target::Mask(m) = &ex.target else { panic!() };
            assert!(m.instance_ids().len() <= 1);
        }
    }

    #[test]
    fn segmentation_rejects_small_images() {
        let mut p = seg(TaskKind::BinarySegmentation, 2);
        p.image_size = 7;
        assert!(gen_segmentation_task(&p).is_err());
        p.image_size = 8;
        p.max_instances = 0;
        assert!(gen_segmentation_task(&p).is_err());
    }

    #[test]
    fn roundtrip_and_corruption() {
        for ds in [
            gen_classification_task(&cls(4, 1)).unwrap(),
            gen_segmentation_task(&seg(TaskKind::InstanceSegmentation, 3)).unwrap(),
            gen_segmentation_task(&seg(TaskKind::BinarySegmentation, 3)).unwrap(),
        ] {
            let bytes = encode_dataset(&ds);
            assert_eq!(decode_dataset(&bytes).unwrap(), ds);
            let mut flipped = bytes.clone();
            flipped[200] ^= 0x01;
            assert!(matches!(decode_dataset(&flipped), Err(TaskError::Format(FormatError::Checksum { .. }))));
            let mut magic = bytes.clone();
            magic[..4].copy_from_slice(b"XXXX");
            assert!(matches!(decode_dataset(&magic), Err(TaskError::Format(FormatError::BadMagic { .. }))));
            let mut version = bytes.clone();
            version[4] = 9;
            assert!(matches!(decode_dataset(&version), Err(TaskError::Format(FormatError::Version { .. }))));
            assert!(matches!(
                decode_dataset(&bytes[..bytes.len() / 2]),
                Err(TaskError::Format(FormatError::Truncated { .. }))
            ));
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = gen_segmentation_task(&seg(TaskKind::InstanceSegmentation, 3)).unwrap();
        let a = sample_batch(&ds, Split::Train, 5, &mut stream_rng(3, 0)).unwrap();
        let b = sample_batch(&ds, Split::Train, 5, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.shape(), &[5, 3, 16, 16]);
        let Targets::Labels(l) = &a.targets else { panic!() };
        assert_eq!(l.len(), 5 * 256);
        assert!(l.iter().all(|&v| v <= 2));
        assert!(a.indices.iter().all(|i| ds.split_indices(Split::Train).contains(i)));
    }

    #[test]
    fn binary_targets_are_dense() {
        let ds = gen_segmentation_task(&seg(TaskKind::BinarySegmentation, 3)).unwrap();
        let b = sample_batch(&ds, Split::Eval, 2, &mut stream_rng(1, 0)).unwrap();
        let Targets::Dense(t) = &b.targets else { panic!() };
        assert_eq!(t.shape(), &[2, 1, 16, 16]);
        assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn mask_file_roundtrip() {
        let classes = BTreeMap::from([(1, 0), (4, 2)]);
        let m = InstanceMask::new(2, 3, vec![0, 1, 1, 4, 4, 0], classes).unwrap();
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
        let empty = InstanceMask::new(2, 2, vec![0; 4], BTreeMap::new()).unwrap();
        assert_eq!(decode_mask(&encode_mask(&empty)).unwrap(), empty);
    }

    #[test]
    fn default_suite_shape() {
        let suite = default_suite(0, 16, 16);
        assert_eq!(suite.len(), 11);
        let ks: Vec<usize> = suite
            .iter()
            .filter_map(|p| match p {
                TaskParams::Classification(c) => Some(c.num_classes),
                _ => None,
            })
            .collect();
        assert_eq!(ks, DEFAULT_CLASS_COUNTS);
    }
}
