//! The sampled-task training loop: at each iteration draw a task from
//! `Cat(k, α)`, a batch from that task, and update the shared encoder and
//! that task's decoder with Adam.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph};
use crate::diagnostics::{GradTrace, TraceMode};
use crate::error::{TensorError, TrainError};
use crate::metrics::{accuracy, InstanceMask, PqAccumulator};
use crate::model::{
    build_classification_decoder, build_encoder, build_segmentation_decoder, forward_task, DecoderModel,
    EncoderModel, Group, LayerSpec, ParamStore, UpsampleSpec,
};
use crate::optim::{AdamConfig, AdamState};
use crate::tasks::{make_batch, sample_batch, Batch, LossSpec, MetricKind, Split, Target, TaskDataset, TaskKind, TaskSpec};
use crate::tensor::Tensor;

/// Task-sampling distribution `α`, normalised on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    alpha: Vec<f64>,
    cdf: Vec<f64>,
}

impl SamplerConfig {
    pub fn new(weights: &[f64]) -> Result<Self, TrainError> {
        if weights.is_empty() {
            return Err(TrainError::Config("α needs at least one task".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(TrainError::Config(format!("α entry {w} is not a finite non-negative weight")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TrainError::Config("α sums to zero".into()));
        }
        let alpha: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cdf = alpha
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(SamplerConfig { alpha, cdf })
    }

    pub fn uniform(k: usize) -> Result<Self, TrainError> {
        Self::new(&vec![1.0; k])
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Inverse-CDF draw over `α` in index order.
pub fn sample_task(alpha: &SamplerConfig, rng: &mut (impl RngCore + ?Sized)) -> usize {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    match alpha.cdf.iter().position(|&c| u < c) {
        Some(i) => i,
        // Rounding left the last cumulative value below u.
        None => alpha.alpha.iter().rposition(|&p| p > 0.0).expect("α has positive mass"),
    }
}

/// RNG for iteration `t`: one ChaCha stream per iteration, so a run can
/// resume from `(seed, t)` alone.
pub fn iteration_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// T, the number of iterations.
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_cadence")]
    pub log_every: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub trace: TraceMode,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_batch() -> usize {
    8
}

fn default_cadence() -> u64 {
    100
}

impl TrainConfig {
    pub fn new(iterations: u64, seed: u64) -> Self {
        TrainConfig {
            iterations,
            batch_size: default_batch(),
            seed,
            log_every: default_cadence(),
            checkpoint_every: None,
            trace: TraceMode::default(),
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return Err(TrainError::Config("cadences must be at least 1".into()));
        }
        if let TraceMode::Sketch { dim: 0, .. } = self.trace {
            return Err(TrainError::Config("sketch dimension must be at least 1".into()));
        }
        self.adam.validate()?;
        Ok(())
    }
}

/// Encoder layers plus the shared layout of segmentation heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub encoder: Vec<LayerSpec>,
    pub segmentation_head: UpsampleSpec,
}

impl Default for ArchSpec {
    /// Two full-resolution 3×3 convolutions and a global average pool.
    fn default() -> Self {
        ArchSpec {
            encoder: vec![
                LayerSpec::conv(3, 8, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::conv(8, 16, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::GlobalAvgPool,
            ],
            segmentation_head: UpsampleSpec::new(Vec::new(), 16),
        }
    }
}

/// Shared encoder, one decoder per task, and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    pub encoder: EncoderModel,
    pub decoders: Vec<DecoderModel>,
    pub store: ParamStore,
}

const INIT_STREAM: u64 = u64::MAX;

/// Builds and initialises the model; decoder `i` serves `specs[i]`.
pub fn build_model(specs: &[TaskSpec], arch: &ArchSpec, seed: u64) -> Result<MultiTaskModel, TrainError> {
    let first = specs.first().ok_or_else(|| TrainError::Config("no tasks".into()))?;
    if let Some(s) = specs.iter().find(|s| s.input_shape != first.input_shape) {
        return Err(TrainError::Config(format!(
            "task '{}' has input shape {:?}, the shared encoder takes {:?}",
            s.name, s.input_shape, first.input_shape
        )));
    }
    let mut rng = iteration_rng(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    let encoder = build_encoder(&arch.encoder, &first.input_shape, &mut store, &mut rng)?;
    let mut decoders = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let decoder = match spec.kind {
            TaskKind::Classification => {
                let dim = encoder
                    .feature_dim()
                    .ok_or_else(|| TrainError::Config("encoder does not produce a feature vector".into()))?;
                build_classification_decoder(i, dim, spec.decoder_arity(), spec.output_activation(), &mut store, &mut rng)?
            }
            _ => {
                let map = encoder
                    .spatial_shape()
                    .ok_or_else(|| TrainError::Config("encoder does not produce a spatial map".into()))?
                    .to_vec();
                let hw = (spec.input_shape[1], spec.input_shape[2]);
                build_segmentation_decoder(
                    i,
                    &map,
                    spec.decoder_arity(),
                    spec.output_activation(),
                    &arch.segmentation_head,
                    hw,
                    &mut store,
                    &mut rng,
                )?
            }
        };
        decoders.push(decoder);
    }
    store.verify_partition(&encoder, &decoders)?;
    Ok(MultiTaskModel { encoder, decoders, store })
}

/// One Adam state for the encoder and one per decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub encoder: AdamState,
    pub decoders: Vec<AdamState>,
}

impl Optimizers {
    pub fn new(model: &MultiTaskModel, config: AdamConfig) -> Result<Self, TrainError> {
        let group = |g: Group| {
            AdamState::new(
                model.store.ids_in_group(g).into_iter().map(|id| (id, model.store.get(id).expect("listed id"))),
                config,
            )
        };
        let encoder = group(Group::Encoder)?;
        let decoders = (0..model.decoders.len()).map(|i| group(Group::Decoder(i))).collect::<Result<_, _>>()?;
        Ok(Optimizers { encoder, decoders })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    /// Raw pre-update encoder gradient, flattened in parameter-id order.
    pub encoder_grad: Vec<f64>,
}

/// Forward, backward and Adam update for one batch of task `task`. Only the
/// encoder and decoder `task` change.
pub fn train_step(
    model: &mut MultiTaskModel,
    optim: &mut Optimizers,
    task: usize,
    batch: &Batch,
) -> Result<StepOutput, TrainError> {
    let decoder = model
        .decoders
        .get(task)
        .ok_or_else(|| TrainError::Config(format!("task {task} out of range")))?;
    let mut graph = Graph::new();
    let out = forward_task(&model.encoder, decoder, &model.store, &batch.x, &mut graph)?;
    let loss = decoder.loss(&mut graph, out.logits, &batch.targets)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" }.into());
    }
    let grads = graph.backward(loss)?;
    let (mut enc, mut dec) = (GradMap::new(), GradMap::new());
    for (id, g) in grads {
        match model.store.param(id).map(|p| p.group) {
            Some(Group::Encoder) => enc.insert(id, g),
            Some(Group::Decoder(i)) if i == task => dec.insert(id, g),
            _ => return Err(TrainError::Config(format!("gradient for {id:?} outside encoder and decoder {task}"))),
        };
    }
    let mut encoder_grad = Vec::with_capacity(model.store.group_size(Group::Encoder));
    for id in model.store.ids_in_group(Group::Encoder) {
        match enc.get(&id) {
            Some(g) => encoder_grad.extend_from_slice(g.data()),
            None => encoder_grad.extend(std::iter::repeat_n(0.0, model.store.get(id).expect("listed id").len())),
        }
    }
    optim.encoder.step(&mut model.store, &enc)?;
    optim.decoders[task].step(&mut model.store, &dec)?;
    Ok(StepOutput { loss: value, encoder_grad })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub task: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub trace: Option<GradTrace>,
}

impl TrainLog {
    pub fn new(mode: TraceMode) -> Self {
        let trace = (mode != TraceMode::Off).then(|| GradTrace::new(mode));
        TrainLog { records: Vec::new(), trace }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Mutable training state: the model, optimiser states, the seed of the
/// per-iteration RNG streams and the next iteration to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub model: MultiTaskModel,
    pub optim: Optimizers,
    pub seed: u64,
    pub next_iter: u64,
}

impl Session {
    pub fn new(model: MultiTaskModel, adam: AdamConfig, seed: u64) -> Result<Self, TrainError> {
        let optim = Optimizers::new(&model, adam)?;
        Ok(Session { model, optim, seed, next_iter: 0 })
    }

    /// Iteration `t`: sample the task, sample the batch, take one step.
    pub fn step(
        &mut self,
        tasks: &[TaskDataset],
        sampler: &SamplerConfig,
        batch_size: usize,
    ) -> Result<(StepRecord, Vec<f64>), TrainError> {
        let t = self.next_iter;
        let run = || -> Result<_, TrainError> {
            let mut rng = iteration_rng(self.seed, t);
            let task = sample_task(sampler, &mut rng);
            let batch = sample_batch(&tasks[task], Split::Train, batch_size, &mut rng)?;
            Ok((task, batch))
        };
        let (task, batch) = run().map_err(|e| TrainError::Step { iteration: t, source: Box::new(e) })?;
        let out = train_step(&mut self.model, &mut self.optim, task, &batch)
            .map_err(|e| TrainError::Step { iteration: t, source: Box::new(e) })?;
        self.next_iter += 1;
        Ok((StepRecord { t, task, loss: out.loss }, out.encoder_grad))
    }

    /// Runs iterations until `next_iter == until`, appending to `log`.
    /// `after_step` sees the session after every completed iteration.
    pub fn run_until(
        &mut self,
        tasks: &[TaskDataset],
        sampler: &SamplerConfig,
        batch_size: usize,
        until: u64,
        log: &mut TrainLog,
        mut after_step: impl FnMut(&Session, &StepRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        check_suite(tasks, &self.model, sampler)?;
        while self.next_iter < until {
            let (record, grad) = self.step(tasks, sampler, batch_size)?;
            if let Some(trace) = log.trace.as_mut() {
                trace
                    .record(record.t, record.task, &grad)
                    .map_err(|e| TrainError::Config(format!("gradient trace: {e}")))?;
            }
            log.records.push(record);
            after_step(self, &record)?;
        }
        Ok(())
    }
}

fn check_suite(tasks: &[TaskDataset], model: &MultiTaskModel, sampler: &SamplerConfig) -> Result<(), TrainError> {
    let k = tasks.len();
    if model.decoders.len() != k || sampler.k() != k {
        return Err(TrainError::Config(format!(
            "{k} tasks, {} decoders and |α| = {} must agree",
            model.decoders.len(),
            sampler.k()
        )));
    }
    for (i, ds) in tasks.iter().enumerate() {
        let d = &model.decoders[i];
        if d.num_classes != ds.spec.decoder_arity() || d.activation != ds.spec.output_activation() {
            return Err(TrainError::Config(format!("decoder {i} does not match task '{}'", ds.spec.name)));
        }
    }
    Ok(())
}

/// Runs `config.iterations` iterations from a fresh optimiser state.
pub fn train(
    tasks: &[TaskDataset],
    model: MultiTaskModel,
    sampler: &SamplerConfig,
    config: &TrainConfig,
) -> Result<(TrainLog, MultiTaskModel), TrainError> {
    config.validate()?;
    let mut session = Session::new(model, config.adam, config.seed)?;
    let mut log = TrainLog::new(config.trace);
    session.run_until(tasks, sampler, config.batch_size, config.iterations, &mut log, |_, _| Ok(()))?;
    Ok((log, session.model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: usize,
    pub name: String,
    pub metric: MetricKind,
    pub value: f64,
}

const EVAL_CHUNK: usize = 32;

fn argmax_channels(data: &[f64], k: usize, inner: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if data[(b * k + c) * inner + i] > data[(b * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Instance masks read off a batch of segmentation outputs: thresholded
/// sigmoid or per-pixel argmax, then connected components.
pub fn predicted_masks(spec: &TaskSpec, prediction: &Tensor) -> Result<Vec<InstanceMask>, TrainError> {
    let [n, k, h, w] = *prediction.shape() else {
        return Err(TrainError::Config(format!("expected N×K×H×W predictions, got {:?}", prediction.shape())));
    };
    let labels = if spec.loss == LossSpec::SigmoidBce {
        prediction.data().iter().map(|&p| usize::from(p > 0.5)).collect()
    } else {
        argmax_channels(prediction.data(), k, h * w, n)
    };
    labels
        .chunks_exact(h * w)
        .map(|l| InstanceMask::from_semantic(h, w, l).map_err(|e| TrainError::Config(e.to_string())))
        .collect()
}

/// Accuracy or dataset-level PQ of decoder `task` on the eval split.
/// Instance tasks use class-aware PQ, binary tasks class-agnostic PQ.
pub fn evaluate(model: &MultiTaskModel, task: usize, ds: &TaskDataset) -> Result<EvalResult, TrainError> {
    let decoder = model
        .decoders
        .get(task)
        .ok_or_else(|| TrainError::Config(format!("task {task} out of range")))?;
    if decoder.num_classes != ds.spec.decoder_arity() || decoder.activation != ds.spec.output_activation() {
        return Err(TrainError::Config(format!("decoder {task} does not match task '{}'", ds.spec.name)));
    }
    let idx = ds.split_indices(Split::Eval);
    if idx.is_empty() {
        return Err(TrainError::Task(crate::error::TaskError::EmptySplit));
    }
    let preds: Vec<Tensor> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = make_batch(ds, chunk.to_vec())?;
            let mut graph = Graph::new();
            let out = forward_task(&model.encoder, decoder, &model.store, &batch.x, &mut graph)?;
            Ok(graph.value(out.prediction).clone())
        })
        .collect::<Result<_, TrainError>>()?;
    let examples = ds.examples();
    let value = match ds.spec.kind {
        TaskKind::Classification => {
            let k = ds.spec.decoder_arity();
            let predicted: Vec<usize> = preds.iter().flat_map(|p| argmax_channels(p.data(), k, 1, p.shape()[0])).collect();
            let truth: Vec<usize> = idx
                .iter()
                .map(|&i| match examples[i].target {
                    Target::Class(l) => l,
                    Target::Mask(_) => unreachable!("classification dataset"),
                })
                .collect();
            accuracy(&predicted, &truth).map_err(|e| TrainError::Config(e.to_string()))?
        }
        kind => {
            let mut acc = PqAccumulator::new(kind == TaskKind::InstanceSegmentation);
            let masks = preds.iter().map(|p| predicted_masks(&ds.spec, p)).collect::<Result<Vec<_>, _>>()?;
            for (pred, &i) in masks.iter().flatten().zip(idx) {
                let Target::Mask(gt) = &examples[i].target else { unreachable!("segmentation dataset") };
                acc.add(pred, gt).map_err(|e| TrainError::Config(e.to_string()))?;
            }
            acc.pq()
        }
    };
    Ok(EvalResult { task, name: ds.spec.name.clone(), metric: ds.spec.metric, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_sampler() {
        let s = SamplerConfig::new(&[1.0]).unwrap();
        let mut rng = iteration_rng(0, 0);
        assert!((0..1000).all(|_| sample_task(&s, &mut rng) == 0));
    }

    #[test]
    fn sampler_normalises_and_validates() {
        let s = SamplerConfig::new(&[2.0, 6.0]).unwrap();
        assert_eq!(s.alpha(), &[0.25, 0.75]);
        assert!(SamplerConfig::new(&[]).is_err());
        assert!(SamplerConfig::new(&[0.0, 0.0]).is_err());
        assert!(SamplerConfig::new(&[-1.0, 2.0]).is_err());
        assert!(SamplerConfig::new(&[f64::NAN]).is_err());
    }

    #[test]
    fn zero_weight_never_drawn() {
        let s = SamplerConfig::new(&[0.0, 1.0, 0.0]).unwrap();
        let mut rng = iteration_rng(1, 0);
        assert!((0..10000).all(|_| sample_task(&s, &mut rng) == 1));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(10, 0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(10, 0);
        c.checkpoint_every = Some(0);
        assert!(c.validate().is_err());
    }
}
