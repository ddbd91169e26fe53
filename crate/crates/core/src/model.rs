//! Shared encoder, per-task decoders and the partitioned parameter store.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::ModelError;
use crate::tensor::{Activation, Tensor};

/// Owner of a parameter: the shared encoder or the decoder of one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Decoder(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Every trainable tensor of the model, keyed by a unique id and tagged with
/// exactly one owning [`Group`]. Iteration is in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<ParamId, Param>,
    next_id: u32,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        self.params.insert(id, Param { name: name.into(), group, value });
        id
    }

    /// Reinserts a parameter under a known id (checkpoint restore).
    pub fn insert(&mut self, id: ParamId, param: Param) {
        self.next_id = self.next_id.max(id.0 + 1);
        self.params.insert(id, param);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(&id).map(|p| &mut p.value)
    }

    pub fn param(&self, id: ParamId) -> Option<&Param> {
        self.params.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().map(|(&id, p)| (id, p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut gs: Vec<Group> = self.params.values().map(|p| p.group).collect();
        gs.sort();
        gs.dedup();
        gs
    }

    /// Total scalar count of a group.
    pub fn group_size(&self, group: Group) -> usize {
        self.params.values().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Concatenation of a group's tensors in id order.
    pub fn flatten_group(&self, group: Group) -> Vec<f64> {
        self.params
            .values()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Checks that the models' parameters are exactly the store, each owned
    /// by the group of the model that uses it.
    pub fn verify_partition(
        &self,
        encoder: &EncoderModel,
        decoders: &[DecoderModel],
    ) -> Result<(), ModelError> {
        let mut seen = BTreeMap::new();
        let owners = std::iter::once((Group::Encoder, encoder.param_ids()))
            .chain(decoders.iter().map(|d| (Group::Decoder(d.task), d.param_ids())));
        for (group, ids) in owners {
            for id in ids {
                let p = self.param(id).ok_or(ModelError::MissingParam(id))?;
                if p.group != group || seen.insert(id, group).is_some() {
                    return Err(ModelError::InvalidDimension(format!(
                        "parameter {id:?} is shared between groups or mislabelled"
                    )));
                }
            }
        }
        if seen.len() != self.len() {
            return Err(ModelError::InvalidDimension(format!(
                "store holds {} parameters but models use {}",
                self.len(),
                seen.len()
            )));
        }
        Ok(())
    }
}

/// One layer of an encoder or decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { in_features: usize, out_features: usize },
    Activation { kind: Activation },
    GlobalAvgPool,
    Upsample { factor: usize },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation { kind: Activation::Relu }
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = *input else {
                    return Err(format!("conv2d needs a C×H×W input, got {input:?}"));
                };
                if c != in_channels {
                    return Err(format!("conv2d expects {in_channels} input channels, got {c}"));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d channels, kernel and stride must be positive".into());
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(format!("conv2d kernel {kernel} larger than padded input {input:?}"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense { in_features, out_features } => {
                let flat: usize = input.iter().product();
                if flat != in_features {
                    return Err(format!("dense expects {in_features} features, got {flat}"));
                }
                if out_features == 0 {
                    return Err("dense output must be positive".into());
                }
                Ok(vec![out_features])
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => Err(format!("global_avg_pool needs a C×H×W input, got {input:?}")),
            },
            LayerSpec::Upsample { factor } => match *input {
                [c, h, w] if factor > 0 => Ok(vec![c, h * factor, w * factor]),
                _ => Err(format!("upsample needs a C×H×W input and factor ≥ 1, got {input:?}")),
            },
        }
    }

    /// `(fan_in, fan_out, weight shape, bias length)` for parameterised layers.
    fn param_layout(&self) -> Option<(usize, usize, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => Some((
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
                vec![out_channels, in_channels, kernel, kernel],
                out_channels,
            )),
            LayerSpec::Dense { in_features, out_features } => {
                Some((in_features, out_features, vec![in_features, out_features], out_features))
            }
            _ => None,
        }
    }
}

/// Weights ~ Uniform(−s, s), s = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-s..s))
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    params: Option<(ParamId, ParamId)>,
    output_shape: Vec<usize>,
}

/// Compiles a layer stack, registering parameters under `group`.
fn compile(
    specs: &[LayerSpec],
    input_shape: &[usize],
    group: Group,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<Vec<Layer>, ModelError> {
    // Validate the whole stack before registering anything.
    let mut shapes = Vec::with_capacity(specs.len());
    let mut shape = input_shape.to_vec();
    for (index, spec) in specs.iter().enumerate() {
        shape = spec
            .output_shape(&shape)
            .map_err(|reason| ModelError::IncompatibleLayer { index, reason })?;
        shapes.push(shape.clone());
    }
    let mut layers = Vec::with_capacity(specs.len());
    for (index, (spec, output_shape)) in specs.iter().zip(shapes).enumerate() {
        let params = spec.param_layout().map(|(fan_in, fan_out, wshape, blen)| {
            let w = glorot_uniform(&wshape, fan_in, fan_out, rng);
            let wid = store.register(format!("{prefix}.{index}.weight"), group, w);
            let bid = store.register(format!("{prefix}.{index}.bias"), group, Tensor::zeros(&[blen]));
            (wid, bid)
        });
        layers.push(Layer { spec: spec.clone(), params, output_shape });
    }
    Ok(layers)
}

fn param_value(store: &ParamStore, id: ParamId) -> Result<Tensor, ModelError> {
    store.get(id).cloned().ok_or(ModelError::MissingParam(id))
}

/// Runs a compiled stack on a batched input, returning every layer output.
fn run_layers(
    layers: &[Layer],
    mut x: Var,
    graph: &mut Graph,
    store: &ParamStore,
) -> Result<Vec<Var>, ModelError> {
    let mut outs = Vec::with_capacity(layers.len());
    for layer in layers {
        x = match (&layer.spec, layer.params) {
            (LayerSpec::Conv2d { stride, padding, .. }, Some((wid, bid))) => {
                let w = graph.param(wid, param_value(store, wid)?);
                let b = graph.param(bid, param_value(store, bid)?);
                let y = graph.conv2d(x, w, *stride, *padding)?;
                graph.bias_add(y, b, 1)?
            }
            (LayerSpec::Dense { in_features, .. }, Some((wid, bid))) => {
                let batch = graph.value(x).shape()[0];
                let flat = if graph.value(x).rank() == 2 {
                    x
                } else {
                    graph.reshape(x, &[batch, *in_features])?
                };
                let w = graph.param(wid, param_value(store, wid)?);
                let b = graph.param(bid, param_value(store, bid)?);
                let y = graph.matmul(flat, w)?;
                graph.bias_add(y, b, 1)?
            }
            (LayerSpec::Activation { kind }, _) => graph.activation(x, *kind)?,
            (LayerSpec::GlobalAvgPool, _) => graph.global_avg_pool(x)?,
            (LayerSpec::Upsample { factor }, _) => graph.upsample_nearest(x, *factor)?,
            (spec, None) => unreachable!("{spec:?} compiled without parameters"),
        };
        outs.push(x);
    }
    Ok(outs)
}

/// Shared feature extractor.
///
/// Exposes a flat feature vector (for classification heads) and the last
/// spatial `C×H×W` map before pooling (for segmentation heads).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    vector_dim: Option<usize>,
    spatial: Option<(usize, Vec<usize>)>,
}

/// Encoder outputs recorded on a graph, batched along axis 0.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFeatures {
    pub vector: Option<Var>,
    pub spatial: Option<Var>,
}

pub fn build_encoder(
    spec: &[LayerSpec],
    input_shape: &[usize],
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<EncoderModel, ModelError> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(ModelError::InvalidDimension(format!("encoder input shape {input_shape:?}")));
    }
    let layers = compile(spec, input_shape, Group::Encoder, "encoder", store, rng)?;
    let final_shape = layers.last().map_or(input_shape, |l| &l.output_shape);
    let vector_dim = match final_shape.len() {
        1 => Some(final_shape[0]),
        _ if layers.is_empty() => Some(input_shape.iter().product()),
        _ => None,
    };
    // Position 0 is the raw input; position i+1 is layer i's output.
    let spatial = std::iter::once(input_shape)
        .chain(layers.iter().map(|l| l.output_shape.as_slice()))
        .enumerate()
        .filter(|(_, s)| s.len() == 3)
        .last()
        .map(|(pos, s)| (pos, s.to_vec()));
    Ok(EncoderModel { layers, input_shape: input_shape.to_vec(), vector_dim, spatial })
}

impl EncoderModel {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Length of the flat feature vector, if the encoder produces one.
    pub fn feature_dim(&self) -> Option<usize> {
        self.vector_dim
    }

    /// Shape of the pre-pool spatial map, if any.
    pub fn spatial_shape(&self) -> Option<&[usize]> {
        self.spatial.as_ref().map(|(_, s)| s.as_slice())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().filter_map(|l| l.params).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Encodes a batch `[N×C×H×W]`.
    pub fn forward(
        &self,
        x: Var,
        graph: &mut Graph,
        store: &ParamStore,
    ) -> Result<EncodedFeatures, ModelError> {
        let found = graph.value(x).shape().to_vec();
        if found.len() != self.input_shape.len() + 1 || found[1..] != self.input_shape[..] {
            return Err(ModelError::InputMismatch { expected: self.input_shape.clone(), found });
        }
        let outs = run_layers(&self.layers, x, graph, store)?;
        let at = |pos: usize| if pos == 0 { x } else { outs[pos - 1] };
        let vector = match self.vector_dim {
            Some(_) if self.layers.is_empty() => {
                let dim: usize = self.input_shape.iter().product();
                Some(graph.reshape(x, &[found[0], dim])?)
            }
            Some(_) => outs.last().copied(),
            None => None,
        };
        let spatial = self.spatial.as_ref().map(|(pos, _)| at(*pos));
        Ok(EncodedFeatures { vector, spatial })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

/// Upsampling head: each factor is a nearest-neighbour upsample; stages are
/// separated by a 3×3 conv with `hidden_channels` and ReLU, and the head ends
/// with a 1×1 conv to the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleSpec {
    pub factors: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
}

fn default_hidden() -> usize {
    16
}

impl UpsampleSpec {
    pub fn new(factors: Vec<usize>, hidden_channels: usize) -> Self {
        UpsampleSpec { factors, hidden_channels }
    }

    fn layers(&self, in_channels: usize, num_classes: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut channels = in_channels;
        for (i, &factor) in self.factors.iter().enumerate() {
            if i > 0 {
                layers.push(LayerSpec::conv(channels, self.hidden_channels, 3, 1, 1));
                layers.push(LayerSpec::relu());
                channels = self.hidden_channels;
            }
            if factor > 1 {
                layers.push(LayerSpec::Upsample { factor });
            }
        }
        layers.push(LayerSpec::conv(channels, num_classes, 1, 1, 0));
        layers
    }
}

/// Loss targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class index per example (classification) or per pixel (segmentation).
    Labels(Vec<usize>),
    /// Per-element {0,1} targets for sigmoid heads, shaped like the logits.
    Dense(Tensor),
}

/// Task-specific output head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub task: usize,
    pub kind: DecoderKind,
    pub activation: OutputActivation,
    pub num_classes: usize,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
}

fn check_arity(activation: OutputActivation, num_classes: usize) -> Result<(), ModelError> {
    let min = match activation {
        OutputActivation::Softmax => 2,
        OutputActivation::Sigmoid => 1,
    };
    if num_classes < min {
        return Err(ModelError::InvalidDimension(format!(
            "{activation:?} head needs at least {min} classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// One fully-connected layer followed by softmax or sigmoid.
pub fn build_classification_decoder(
    task: usize,
    feature_dim: usize,
    num_classes: usize,
    activation: OutputActivation,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<DecoderModel, ModelError> {
    if feature_dim == 0 {
        return Err(ModelError::InvalidDimension("feature_dim must be positive".into()));
    }
    check_arity(activation, num_classes)?;
    let spec = [LayerSpec::Dense { in_features: feature_dim, out_features: num_classes }];
    let layers = compile(&spec, &[feature_dim], Group::Decoder(task), &format!("decoder{task}"), store, rng)?;
    Ok(DecoderModel {
        task,
        kind: DecoderKind::Classification,
        activation,
        num_classes,
        input_shape: vec![feature_dim],
        output_shape: vec![num_classes],
        layers,
    })
}

/// Per-pixel head that upsamples a `C×h×w` feature map back to `input_hw`.
pub fn build_segmentation_decoder(
    task: usize,
    feature_map_shape: &[usize],
    num_classes: usize,
    activation: OutputActivation,
    upsample: &UpsampleSpec,
    input_hw: (usize, usize),
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<DecoderModel, ModelError> {
    let [c, h, w] = *feature_map_shape else {
        return Err(ModelError::InvalidDimension(format!(
            "segmentation head needs a C×H×W feature map, got {feature_map_shape:?}"
        )));
    };
    if c == 0 || h == 0 || w == 0 || upsample.hidden_channels == 0 {
        return Err(ModelError::InvalidDimension("zero extent in segmentation head".into()));
    }
    check_arity(activation, num_classes)?;
    let scale: usize = upsample.factors.iter().product();
    if scale == 0 || (h * scale, w * scale) != input_hw {
        return Err(ModelError::ResolutionMismatch { produced: (h * scale, w * scale), expected: input_hw });
    }
    let spec = upsample.layers(c, num_classes);
    let layers = compile(&spec, feature_map_shape, Group::Decoder(task), &format!("decoder{task}"), store, rng)?;
    Ok(DecoderModel {
        task,
        kind: DecoderKind::Segmentation,
        activation,
        num_classes,
        input_shape: feature_map_shape.to_vec(),
        output_shape: vec![num_classes, input_hw.0, input_hw.1],
        layers,
    })
}

/// Logits and activated predictions of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    pub logits: Var,
    pub prediction: Var,
}

impl DecoderModel {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().filter_map(|l| l.params).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn forward(
        &self,
        features: &EncodedFeatures,
        graph: &mut Graph,
        store: &ParamStore,
    ) -> Result<TaskOutput, ModelError> {
        let input = match self.kind {
            DecoderKind::Classification => features.vector,
            DecoderKind::Segmentation => features.spatial,
        };
        let Some(input) = input else {
            return Err(ModelError::FeatureMismatch {
                expected: self.input_shape.clone(),
                found: Vec::new(),
            });
        };
        let found = &graph.value(input).shape()[1..];
        if found != self.input_shape.as_slice() {
            return Err(ModelError::FeatureMismatch {
                expected: self.input_shape.clone(),
                found: found.to_vec(),
            });
        }
        let logits = *run_layers(&self.layers, input, graph, store)?.last().expect("decoder has layers");
        let prediction = match self.activation {
            OutputActivation::Softmax => graph.softmax_axis(logits, 1)?,
            OutputActivation::Sigmoid => graph.activation(logits, Activation::Sigmoid)?,
        };
        Ok(TaskOutput { logits, prediction })
    }

    /// Mean loss of `logits` (batched) against `targets`: softmax
    /// cross-entropy for softmax heads, binary cross-entropy for sigmoid heads.
    pub fn loss(&self, graph: &mut Graph, logits: Var, targets: &Targets) -> Result<Var, ModelError> {
        let shape = graph.value(logits).shape().to_vec();
        Ok(match (self.activation, targets) {
            (OutputActivation::Softmax, Targets::Labels(labels)) => graph.cross_entropy(logits, labels)?,
            (OutputActivation::Sigmoid, Targets::Dense(t)) => {
                let t = t.reshape(&shape)?;
                graph.bce_with_logits(logits, &t)?
            }
            (OutputActivation::Sigmoid, Targets::Labels(labels)) => {
                // One-hot encoding along the class axis.
                let (k, inner) = (shape[1], shape[2..].iter().product::<usize>());
                let mut dense = Tensor::zeros(&shape);
                for (pos, &label) in labels.iter().enumerate() {
                    if label >= k && !(k == 1 && label == 1) {
                        return Err(crate::error::TensorError::LabelOutOfRange { label, classes: k }.into());
                    }
                    let (n, i) = (pos / inner, pos % inner);
                    if k == 1 {
                        dense.data_mut()[n * inner + i] = label as f64;
                    } else {
                        dense.data_mut()[(n * k + label) * inner + i] = 1.0;
                    }
                }
                graph.bce_with_logits(logits, &dense)?
            }
            (OutputActivation::Softmax, Targets::Dense(_)) => {
                return Err(ModelError::InvalidDimension("softmax heads need integer labels".into()))
            }
        })
    }
}

/// Records encoder then decoder on `graph`. `x` is one example `[C×H×W]` or
/// a batch `[N×C×H×W]`; the prediction has the matching (un)batched shape.
pub fn forward_task(
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    store: &ParamStore,
    x: &Tensor,
    graph: &mut Graph,
) -> Result<TaskOutput, ModelError> {
    let batched = x.rank() == encoder.input_shape.len() + 1;
    let input = if batched {
        graph.input(x.clone())
    } else {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        graph.input(x.reshape(&shape)?)
    };
    let features = encoder.forward(input, graph, store)?;
    let out = decoder.forward(&features, graph, store)?;
    if batched {
        return Ok(out);
    }
    let logits = graph.reshape(out.logits, &decoder.output_shape)?;
    let prediction = graph.reshape(out.prediction, &decoder.output_shape)?;
    Ok(TaskOutput { logits, prediction })
}
