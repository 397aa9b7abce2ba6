//! Layer specifications, parameter stores, and graph builders for the
//! encoder, generators, and two-headed discriminators.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ops::{BnStats, Op};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are kept this far inside (0,1) before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// Sigmoid clamped to [PROB_EPS, 1-PROB_EPS]; keeps discriminator
    /// probabilities strictly inside (0,1) under f32 rounding.
    ClampedSigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense {
        out_dim: usize,
    },
    Conv2d {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    /// Per-sample reshape (batch dim excluded).
    Reshape {
        shape: Vec<usize>,
    },
}

/// One layer: linear part, optional batch norm, then activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Layer {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        Layer {
            name: name.to_string(),
            kind,
            batch_norm: false,
            activation: Activation::Linear,
        }
    }
    pub fn bn(mut self) -> Self {
        self.batch_norm = true;
        self
    }
    pub fn act(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

/// Ordered layers plus validated input/output shapes (per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    layer_shapes: Vec<Vec<usize>>,
}

fn chain_shape(name: &str, kind: &LayerKind, shape: &[usize]) -> Result<Vec<usize>> {
    match kind {
        LayerKind::Dense { out_dim } => {
            if shape.len() != 1 {
                return Err(Error::shape(
                    "model_spec",
                    format!("dense `{name}` wants a vector input, got {shape:?}"),
                ));
            }
            Ok(vec![*out_dim])
        }
        LayerKind::Conv2d {
            out_ch,
            kernel,
            stride,
            pad,
        } => match shape {
            [_, h, w] => {
                let hp = h + 2 * pad;
                let wp = w + 2 * pad;
                if hp < *kernel || wp < *kernel {
                    return Err(Error::shape(
                        "model_spec",
                        format!("conv `{name}` kernel {kernel} exceeds {shape:?} with pad {pad}"),
                    ));
                }
                Ok(vec![
                    *out_ch,
                    (hp - kernel) / stride + 1,
                    (wp - kernel) / stride + 1,
                ])
            }
            _ => Err(Error::shape(
                "model_spec",
                format!("conv `{name}` wants CxHxW, got {shape:?}"),
            )),
        },
        LayerKind::ConvTranspose2d {
            out_ch,
            kernel,
            stride,
            pad,
        } => match shape {
            [_, h, w] => Ok(vec![
                *out_ch,
                (h - 1) * stride + kernel - 2 * pad,
                (w - 1) * stride + kernel - 2 * pad,
            ]),
            _ => Err(Error::shape(
                "model_spec",
                format!("conv_transpose `{name}` wants CxHxW, got {shape:?}"),
            )),
        },
        LayerKind::MaxPool2d { window, stride } => match shape {
            [c, h, w] => {
                if h < window || w < window {
                    return Err(Error::shape(
                        "model_spec",
                        format!("pool `{name}` window {window} on {shape:?}"),
                    ));
                }
                Ok(vec![
                    *c,
                    (h - window) / stride + 1,
                    (w - window) / stride + 1,
                ])
            }
            _ => Err(Error::shape(
                "model_spec",
                format!("pool `{name}` wants CxHxW, got {shape:?}"),
            )),
        },
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
        LayerKind::Reshape { shape: target } => {
            let n: usize = shape.iter().product();
            let m: usize = target.iter().product();
            if n != m {
                return Err(Error::shape(
                    "model_spec",
                    format!("reshape `{name}` {shape:?} -> {target:?}"),
                ));
            }
            Ok(target.clone())
        }
    }
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut names = BTreeSet::new();
        let mut shape = input_shape.clone();
        let mut layer_shapes = Vec::with_capacity(layers.len());
        for layer in &layers {
            if !names.insert(layer.name.clone()) {
                return Err(Error::shape(
                    "model_spec",
                    format!("duplicate layer `{}`", layer.name),
                ));
            }
            shape = chain_shape(&layer.name, &layer.kind, &shape)?;
            layer_shapes.push(shape.clone());
        }
        Ok(ModelSpec {
            output_shape: shape,
            layers,
            input_shape,
            layer_shapes,
        })
    }

    pub fn layer_output_shape(&self, idx: usize) -> &[usize] {
        &self.layer_shapes[idx]
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Sub-model spanning layers [from, to).
    pub fn slice(&self, from: usize, to: usize) -> Result<ModelSpec> {
        let input_shape = if from == 0 {
            self.input_shape.clone()
        } else {
            self.layer_shapes[from - 1].clone()
        };
        ModelSpec::new(input_shape, self.layers[from..to].to_vec())
    }

    /// Parameter slots as (name, shape, is_buffer), in layer order.
    pub fn param_slots(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut slots = Vec::new();
        let mut in_shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out_shape = &self.layer_shapes[i];
            match &layer.kind {
                LayerKind::Dense { out_dim } => {
                    slots.push((
                        format!("{}.weight", layer.name),
                        vec![in_shape[0], *out_dim],
                        false,
                    ));
                    slots.push((format!("{}.bias", layer.name), vec![*out_dim], false));
                }
                LayerKind::Conv2d { out_ch, kernel, .. } => {
                    slots.push((
                        format!("{}.weight", layer.name),
                        vec![*out_ch, in_shape[0], *kernel, *kernel],
                        false,
                    ));
                    slots.push((format!("{}.bias", layer.name), vec![*out_ch], false));
                }
                LayerKind::ConvTranspose2d { out_ch, kernel, .. } => {
                    slots.push((
                        format!("{}.weight", layer.name),
                        vec![in_shape[0], *out_ch, *kernel, *kernel],
                        false,
                    ));
                    slots.push((format!("{}.bias", layer.name), vec![*out_ch], false));
                }
                LayerKind::MaxPool2d { .. } | LayerKind::Flatten | LayerKind::Reshape { .. } => {}
            }
            if layer.batch_norm {
                let features = out_shape[0];
                slots.push((format!("{}.gamma", layer.name), vec![features], false));
                slots.push((format!("{}.beta", layer.name), vec![features], false));
                slots.push((format!("{}.running_mean", layer.name), vec![features], true));
                slots.push((format!("{}.running_var", layer.name), vec![features], true));
            }
            in_shape = out_shape.clone();
        }
        slots
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Named parameter tensors plus per-parameter Adam state. Batch-norm
/// running statistics are buffers: saved and loaded, never optimized.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
    adam: BTreeMap<String, AdamState<S>>,
    buffers: BTreeSet<String>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            adam: BTreeMap::new(),
            buffers: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, hyper: AdamHyper) {
        self.adam
            .insert(name.to_string(), AdamState::new(tensor.shape(), hyper));
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor<S>) {
        self.buffers.insert(name.to_string());
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<S>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    /// All entries in deterministic (sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Trainable parameter names in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !self.buffers.contains(*n))
            .cloned()
            .collect()
    }

    /// One Adam step over every trainable parameter; errors if `grads`
    /// misses any of them.
    pub fn adam_step_all(&mut self, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for name in self.trainable_names() {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let param = self.tensors.get_mut(&name).expect("trainable name exists");
            let state = self.adam.get_mut(&name).expect("adam state exists");
            adam_step(param, grad, state)?;
        }
        Ok(())
    }

    /// Exponential running update of batch-norm statistics.
    pub fn update_bn(&mut self, layer: &str, stats: &BnStats, momentum: f64) {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{layer}.{suffix}");
            if let Some(t) = self.tensors.get_mut(&name) {
                for (old, &new) in t.data_mut().iter_mut().zip(fresh) {
                    *old = S::of_f64((1.0 - momentum) * old.as_f64() + momentum * new);
                }
            }
        }
    }
}

impl ParamStore<f32> {
    /// f64 widening; lets tests drive the same model graph at f64 when
    /// probing finite differences.
    pub fn widen(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (name, t) in &self.tensors {
            if self.buffers.contains(name) {
                out.insert_buffer(name, t.to_f64());
            } else {
                let hyper = self.adam[name].hyper;
                out.insert(name, t.to_f64(), hyper);
            }
        }
        out
    }
}

/// Weights ~ N(0, 0.02^2), biases 0, batch-norm scale 1 / shift 0;
/// deterministic in the stream.
pub fn init_params<S: Scalar>(
    spec: &ModelSpec,
    stream: &mut RngStream,
    hyper: AdamHyper,
) -> ParamStore<S> {
    let mut store = ParamStore::new();
    for (name, shape, is_buffer) in spec.param_slots() {
        let tensor = if name.ends_with(".weight") {
            stream
                .normal_tensor::<S>(&shape)
                .map(|v| v * S::of_f64(0.02))
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        if is_buffer {
            store.insert_buffer(&name, tensor);
        } else {
            store.insert(&name, tensor, hyper);
        }
    }
    store
}

// ---------------------------------------------------------------------------
// Graph building
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape nodes for one store's parameters, bound once per graph so reuse
/// of a parameter accumulates its gradient on a single node.
pub struct Bindings {
    nodes: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Put every tensor of `store` on the tape; `trainable` decides whether
/// gradients flow to them (frozen encoders bind as constants). Buffers
/// always bind as constants.
pub fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    trainable: bool,
) -> Bindings {
    let mut nodes = BTreeMap::new();
    for (name, tensor) in store.iter() {
        let id = if trainable && !store.is_buffer(name) {
            tape.leaf(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        };
        nodes.insert(name.clone(), id);
    }
    Bindings { nodes }
}

pub struct ForwardPass {
    pub output: NodeId,
    /// Post-activation output of every layer, by layer name.
    pub named: BTreeMap<String, NodeId>,
    /// Batch statistics of train-mode batchnorm layers, for running updates.
    pub bn_batch_stats: Vec<(String, BnStats)>,
}

/// Run `spec` over the tape from `input`, reading parameters from `binds`.
pub fn forward_graph<S: Scalar>(
    spec: &ModelSpec,
    binds: &Bindings,
    tape: &mut Tape<S>,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardPass> {
    let in_shape = tape.value(input).shape();
    if in_shape.len() != spec.input_shape.len() + 1 || in_shape[1..] != spec.input_shape[..] {
        return Err(Error::shape(
            "forward_graph",
            format!(
                "input {:?} vs spec {:?} (batch leading)",
                in_shape, spec.input_shape
            ),
        ));
    }
    let batch = in_shape[0];
    let mut x = input;
    let mut named = BTreeMap::new();
    let mut bn_batch_stats = Vec::new();
    for layer in &spec.layers {
        // Linear part.
        x = match &layer.kind {
            LayerKind::Dense { .. } => {
                let w = binds.node(&format!("{}.weight", layer.name))?;
                let b = binds.node(&format!("{}.bias", layer.name))?;
                let y = tape.apply(Op::Matmul, &[x, w])?;
                tape.apply(Op::Add, &[y, b])?
            }
            LayerKind::Conv2d { stride, pad, .. } => {
                let w = binds.node(&format!("{}.weight", layer.name))?;
                let b = binds.node(&format!("{}.bias", layer.name))?;
                tape.apply(
                    Op::Conv2d {
                        stride: *stride,
                        pad: *pad,
                    },
                    &[x, w, b],
                )?
            }
            LayerKind::ConvTranspose2d { stride, pad, .. } => {
                let w = binds.node(&format!("{}.weight", layer.name))?;
                let b = binds.node(&format!("{}.bias", layer.name))?;
                tape.apply(
                    Op::ConvTranspose2d {
                        stride: *stride,
                        pad: *pad,
                    },
                    &[x, w, b],
                )?
            }
            LayerKind::MaxPool2d { window, stride } => tape.apply(
                Op::MaxPool2d {
                    window: *window,
                    stride: *stride,
                },
                &[x],
            )?,
            LayerKind::Flatten => {
                let n: usize = tape.value(x).shape()[1..].iter().product();
                tape.apply(
                    Op::Reshape {
                        shape: vec![batch, n],
                    },
                    &[x],
                )?
            }
            LayerKind::Reshape { shape } => {
                let mut full = vec![batch];
                full.extend_from_slice(shape);
                tape.apply(Op::Reshape { shape: full }, &[x])?
            }
        };
        // Normalization.
        if layer.batch_norm {
            let gamma = binds.node(&format!("{}.gamma", layer.name))?;
            let beta = binds.node(&format!("{}.beta", layer.name))?;
            x = match mode {
                Mode::Train => {
                    let y = tape.apply(
                        Op::BatchNorm {
                            eps: BN_EPS,
                            train: true,
                        },
                        &[x, gamma, beta],
                    )?;
                    if let Some(stats) = tape.bn_stats(y) {
                        bn_batch_stats.push((layer.name.clone(), stats.clone()));
                    }
                    y
                }
                Mode::Eval => {
                    let rm = binds.node(&format!("{}.running_mean", layer.name))?;
                    let rv = binds.node(&format!("{}.running_var", layer.name))?;
                    tape.apply(
                        Op::BatchNorm {
                            eps: BN_EPS,
                            train: false,
                        },
                        &[x, gamma, beta, rm, rv],
                    )?
                }
            };
        }
        // Activation.
        x = match layer.activation {
            Activation::Linear => x,
            Activation::Relu => tape.apply(Op::Relu, &[x])?,
            Activation::LeakyRelu(a) => tape.apply(Op::LeakyRelu { alpha: a }, &[x])?,
            Activation::Tanh => tape.apply(Op::Tanh, &[x])?,
            Activation::ClampedSigmoid => {
                let s = tape.apply(Op::Sigmoid, &[x])?;
                tape.apply(
                    Op::Clamp {
                        lo: PROB_EPS,
                        hi: 1.0 - PROB_EPS,
                    },
                    &[s],
                )?
            }
        };
        named.insert(layer.name.clone(), x);
    }
    Ok(ForwardPass {
        output: x,
        named,
        bn_batch_stats,
    })
}

/// Eval-mode forward on a throwaway tape; returns the output tensor.
pub fn forward_eval<S: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<S>,
    input: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let binds = bind_params(&mut tape, store, false);
    let x = tape.constant(input.clone());
    let pass = forward_graph(spec, &binds, &mut tape, x, Mode::Eval)?;
    Ok(tape.value(pass.output).clone())
}

// ---------------------------------------------------------------------------
// Architecture builders
// ---------------------------------------------------------------------------

/// Width knobs for the GAN models; paper gives layer sequences only, so
/// these stay configurable with CPU-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct GanArch {
    /// Channels of the projected feature map at H/4 x W/4 in G0.
    pub g0_project_ch: usize,
    /// Channels after the first transposed conv in G0.
    pub g0_mid_ch: usize,
    /// Hidden widths of the top generator MLP.
    pub g1_hidden: Vec<usize>,
    /// Channels of the two D0 convolutions.
    pub d0_ch: (usize, usize),
    /// Hidden widths of the top discriminator MLP trunk.
    pub d1_hidden: Vec<usize>,
}

impl Default for GanArch {
    fn default() -> Self {
        GanArch {
            g0_project_ch: 32,
            g0_mid_ch: 16,
            g1_hidden: vec![256, 256],
            d0_ch: (16, 32),
            d1_hidden: vec![256, 256],
        }
    }
}

/// conv1-pool1-conv2-pool2-fc3-fc4 with fc4 emitting pre-softmax scores.
/// fc3 (post-ReLU) is the stack cut point.
pub fn build_encoder_spec(
    image_shape: &[usize],
    num_classes: usize,
    fc3_dim: usize,
    conv_channels: (usize, usize),
) -> Result<ModelSpec> {
    let [c, h, w] = *image_shape else {
        return Err(Error::shape(
            "build_encoder_spec",
            format!("want CxHxW, got {image_shape:?}"),
        ));
    };
    if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "build_encoder_spec",
            format!("unsupported image size {h}x{w}: need H,W >= 8 and divisible by 4"),
        ));
    }
    let _ = c;
    let (c1, c2) = conv_channels;
    ModelSpec::new(
        image_shape.to_vec(),
        vec![
            Layer::new(
                "conv1",
                LayerKind::Conv2d {
                    out_ch: c1,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                },
            )
            .act(Activation::Relu),
            Layer::new(
                "pool1",
                LayerKind::MaxPool2d {
                    window: 2,
                    stride: 2,
                },
            ),
            Layer::new(
                "conv2",
                LayerKind::Conv2d {
                    out_ch: c2,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                },
            )
            .act(Activation::Relu),
            Layer::new(
                "pool2",
                LayerKind::MaxPool2d {
                    window: 2,
                    stride: 2,
                },
            ),
            Layer::new("flatten", LayerKind::Flatten),
            Layer::new("fc3", LayerKind::Dense { out_dim: fc3_dim }).act(Activation::Relu),
            Layer::new(
                "fc4",
                LayerKind::Dense {
                    out_dim: num_classes,
                },
            ),
        ],
    )
}

/// Generator for one stack level.
///
/// Level >= 1 maps concat(condition, noise) through an MLP to a feature
/// vector with ReLU output (matching the non-negative post-ReLU fc3
/// manifold). Level 0 projects to a spatial map and upsamples with
/// transposed convolutions to a tanh image.
pub fn build_generator_spec(
    level: usize,
    cond_dim: usize,
    noise_dim: usize,
    out_shape: &[usize],
    arch: &GanArch,
) -> Result<ModelSpec> {
    let in_dim = cond_dim + noise_dim;
    if level == 0 {
        let [c, h, w] = *out_shape else {
            return Err(Error::shape(
                "build_generator_spec",
                format!("level 0 wants CxHxW out, got {out_shape:?}"),
            ));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "build_generator_spec",
                format!("image {h}x{w} not divisible by 4"),
            ));
        }
        let (ph, pw) = (h / 4, w / 4);
        let pc = arch.g0_project_ch;
        ModelSpec::new(
            vec![in_dim],
            vec![
                Layer::new(
                    "g_project",
                    LayerKind::Dense {
                        out_dim: pc * ph * pw,
                    },
                )
                .bn()
                .act(Activation::Relu),
                Layer::new(
                    "g_reshape",
                    LayerKind::Reshape {
                        shape: vec![pc, ph, pw],
                    },
                ),
                Layer::new(
                    "g_deconv1",
                    LayerKind::ConvTranspose2d {
                        out_ch: arch.g0_mid_ch,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    },
                )
                .bn()
                .act(Activation::Relu),
                Layer::new(
                    "g_deconv2",
                    LayerKind::ConvTranspose2d {
                        out_ch: c,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    },
                )
                .act(Activation::Tanh),
            ],
        )
    } else if level == 1 {
        let [out_dim] = *out_shape else {
            return Err(Error::shape(
                "build_generator_spec",
                format!("level 1 wants vector out, got {out_shape:?}"),
            ));
        };
        let mut layers = Vec::new();
        for (i, &width) in arch.g1_hidden.iter().enumerate() {
            layers.push(
                Layer::new(
                    &format!("g_fc{}", i + 1),
                    LayerKind::Dense { out_dim: width },
                )
                .act(Activation::Relu),
            );
        }
        layers.push(Layer::new("g_out", LayerKind::Dense { out_dim }).act(Activation::Relu));
        ModelSpec::new(vec![in_dim], layers)
    } else {
        Err(Error::Unknown {
            what: "generator level",
            name: level.to_string(),
        })
    }
}

/// Shared discriminator trunk with a sigmoid D head and a linear Q head
/// predicting the posterior mean of the injected noise.
#[derive(Debug, Clone)]
pub struct DiscSpec {
    pub trunk: ModelSpec,
    pub d_head: ModelSpec,
    pub q_head: ModelSpec,
}

pub fn build_discriminator_spec(
    level: usize,
    in_shape: &[usize],
    noise_dim: usize,
    arch: &GanArch,
) -> Result<DiscSpec> {
    let trunk = if level == 0 {
        let [_, h, w] = *in_shape else {
            return Err(Error::shape(
                "build_discriminator_spec",
                format!("level 0 wants CxHxW, got {in_shape:?}"),
            ));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "build_discriminator_spec",
                format!("image {h}x{w} not divisible by 4"),
            ));
        }
        let (c1, c2) = arch.d0_ch;
        ModelSpec::new(
            in_shape.to_vec(),
            vec![
                Layer::new(
                    "d_conv1",
                    LayerKind::Conv2d {
                        out_ch: c1,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    },
                )
                .act(Activation::LeakyRelu(0.2)),
                Layer::new(
                    "d_conv2",
                    LayerKind::Conv2d {
                        out_ch: c2,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    },
                )
                .bn()
                .act(Activation::LeakyRelu(0.2)),
                Layer::new("d_flatten", LayerKind::Flatten),
            ],
        )?
    } else if level == 1 {
        let [in_dim] = *in_shape else {
            return Err(Error::shape(
                "build_discriminator_spec",
                format!("level 1 wants a vector, got {in_shape:?}"),
            ));
        };
        let _ = in_dim;
        let mut layers = Vec::new();
        for (i, &width) in arch.d1_hidden.iter().enumerate() {
            layers.push(
                Layer::new(
                    &format!("d_fc{}", i + 1),
                    LayerKind::Dense { out_dim: width },
                )
                .act(Activation::LeakyRelu(0.2)),
            );
        }
        ModelSpec::new(in_shape.to_vec(), layers)?
    } else {
        return Err(Error::Unknown {
            what: "discriminator level",
            name: level.to_string(),
        });
    };
    let feat = trunk.output_shape.clone();
    let d_head = ModelSpec::new(
        feat.clone(),
        vec![Layer::new("d_out", LayerKind::Dense { out_dim: 1 }).act(Activation::ClampedSigmoid)],
    )?;
    let q_head = ModelSpec::new(
        feat,
        vec![Layer::new("q_out", LayerKind::Dense { out_dim: noise_dim })],
    )?;
    Ok(DiscSpec {
        trunk,
        d_head,
        q_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_at;

    fn stream(n: u64) -> RngStream {
        RngStream::new(1000 + n, n)
    }

    #[test]
    fn init_biases_zero_weights_spread() {
        let spec = build_encoder_spec(&[1, 28, 28], 10, 256, (32, 64)).unwrap();
        let store: ParamStore = init_params(&spec, &mut stream(1), AdamHyper::CLASSIFIER);
        let bias = store.get("fc3.bias").unwrap();
        assert!(bias.data().iter().all(|&v| v == 0.0));
        let w = store.get("fc3.weight").unwrap();
        assert!(w.numel() >= 10_000);
        let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.numel() as f64;
        let std = (w
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / w.numel() as f64)
            .sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
        assert!(store
            .get("conv2.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn init_deterministic_per_stream() {
        let spec = build_generator_spec(1, 10, 50, &[256], &GanArch::default()).unwrap();
        let a: ParamStore = init_params(&spec, &mut stream(2), AdamHyper::GAN);
        let b: ParamStore = init_params(&spec, &mut stream(2), AdamHyper::GAN);
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn identity_spec_passes_input_through() {
        let spec = ModelSpec::new(
            vec![2, 3],
            vec![Layer::new("r", LayerKind::Reshape { shape: vec![2, 3] })],
        )
        .unwrap();
        let store: ParamStore = init_params(&spec, &mut stream(3), AdamHyper::GAN);
        let x = stream(4).normal_tensor::<f32>(&[5, 2, 3]);
        let y = forward_eval(&spec, &store, &x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn encoder_shapes_and_softmax() {
        let spec = build_encoder_spec(&[1, 28, 28], 10, 256, (32, 64)).unwrap();
        assert_eq!(spec.output_shape, vec![10]);
        let fc3_idx = spec.layer_index("fc3").unwrap();
        assert_eq!(spec.layer_output_shape(fc3_idx), &[256]);

        let store: ParamStore = init_params(&spec, &mut stream(5), AdamHyper::CLASSIFIER);
        let x = stream(6).normal_tensor::<f32>(&[8, 1, 28, 28]);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store, false);
        let xid = tape.constant(x);
        let pass = forward_graph(&spec, &binds, &mut tape, xid, Mode::Eval).unwrap();
        let logits = tape.value(pass.output);
        assert_eq!(logits.shape(), &[8, 10]);
        assert!(logits.is_finite());
        let fc3 = tape.value(pass.named["fc3"]);
        assert_eq!(fc3.shape(), &[8, 256]);
        assert!(fc3.data().iter().all(|&v| v >= 0.0));

        let sm = tape.apply(Op::Softmax, &[pass.output]).unwrap();
        for row in tape.value(sm).data().chunks(10) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = build_encoder_spec(&[1, 16, 16], 4, 64, (8, 8)).unwrap();
        let store: ParamStore = init_params(&spec, &mut stream(7), AdamHyper::CLASSIFIER);
        let x = stream(8).normal_tensor::<f32>(&[3, 1, 16, 16]);
        let a = forward_eval(&spec, &store, &x).unwrap();
        let b = forward_eval(&spec, &store, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn generator_output_ranges() {
        let arch = GanArch::default();
        // level 1: input 10+50, output 256, relu range
        let g1 = build_generator_spec(1, 10, 50, &[256], &arch).unwrap();
        assert_eq!(g1.input_shape, vec![60]);
        let store: ParamStore = init_params(&g1, &mut stream(9), AdamHyper::GAN);
        let z = stream(10).normal_tensor::<f32>(&[4, 60]);
        let y = forward_eval(&g1, &store, &z).unwrap();
        assert_eq!(y.shape(), &[4, 256]);
        assert!(y.data().iter().all(|&v| v >= 0.0));

        // level 0: tanh range
        let g0 = build_generator_spec(0, 256, 50, &[1, 28, 28], &arch).unwrap();
        let store: ParamStore = init_params(&g0, &mut stream(11), AdamHyper::GAN);
        let z = stream(12).normal_tensor::<f32>(&[2, 306]);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store, false);
        let zid = tape.constant(z);
        let pass = forward_graph(&g0, &binds, &mut tape, zid, Mode::Train).unwrap();
        let img = tape.value(pass.output);
        assert_eq!(img.shape(), &[2, 1, 28, 28]);
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));

        assert!(build_generator_spec(2, 10, 50, &[256], &arch).is_err());
    }

    #[test]
    fn discriminator_heads() {
        let arch = GanArch::default();
        let d0 = build_discriminator_spec(0, &[1, 28, 28], 50, &arch).unwrap();
        let mut rng = stream(13);
        let trunk_store: ParamStore = init_params(&d0.trunk, &mut rng, AdamHyper::GAN);
        let dh_store: ParamStore = init_params(&d0.d_head, &mut rng, AdamHyper::GAN);
        let qh_store: ParamStore = init_params(&d0.q_head, &mut rng, AdamHyper::GAN);
        let x = stream(14).normal_tensor::<f32>(&[3, 1, 28, 28]);
        let feat = forward_eval(&d0.trunk, &trunk_store, &x).unwrap();
        let d = forward_eval(&d0.d_head, &dh_store, &feat).unwrap();
        let q = forward_eval(&d0.q_head, &qh_store, &feat).unwrap();
        assert_eq!(d.shape(), &[3, 1]);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(q.shape(), &[3, 50]);

        let d1 = build_discriminator_spec(1, &[256], 50, &arch).unwrap();
        let mut rng = stream(15);
        let t1: ParamStore = init_params(&d1.trunk, &mut rng, AdamHyper::GAN);
        let h1: ParamStore = init_params(&d1.d_head, &mut rng, AdamHyper::GAN);
        let f = stream(16).normal_tensor::<f32>(&[5, 256]);
        let feat = forward_eval(&d1.trunk, &t1, &f).unwrap();
        let d = forward_eval(&d1.d_head, &h1, &feat).unwrap();
        assert_eq!(d.shape(), &[5, 1]);

        assert!(build_discriminator_spec(3, &[256], 50, &arch).is_err());
    }

    #[test]
    fn built_specs_forward_at_odd_batch_sizes() {
        let arch = GanArch::default();
        let specs: Vec<(ModelSpec, Vec<usize>)> = vec![
            (
                build_encoder_spec(&[1, 16, 16], 4, 32, (8, 8)).unwrap(),
                vec![1, 16, 16],
            ),
            (
                build_generator_spec(1, 4, 8, &[32], &arch).unwrap(),
                vec![12],
            ),
            (
                build_generator_spec(0, 32, 8, &[1, 16, 16], &arch).unwrap(),
                vec![40],
            ),
            (
                build_discriminator_spec(0, &[1, 16, 16], 8, &arch)
                    .unwrap()
                    .trunk,
                vec![1, 16, 16],
            ),
            (
                build_discriminator_spec(1, &[32], 8, &arch).unwrap().trunk,
                vec![32],
            ),
        ];
        for (i, (spec, in_shape)) in specs.iter().enumerate() {
            let store: ParamStore = init_params(spec, &mut stream(20 + i as u64), AdamHyper::GAN);
            for batch in [1usize, 7, 64] {
                let mut shape = vec![batch];
                shape.extend_from_slice(in_shape);
                let x = stream(30 + batch as u64).normal_tensor::<f32>(&shape);
                let y = forward_eval(spec, &store, &x).unwrap();
                assert_eq!(y.shape()[0], batch, "spec {i} batch {batch}");
                assert_eq!(&y.shape()[1..], &spec.output_shape[..], "spec {i}");
            }
        }
    }

    /// Trunk parameters feed both heads; their gradient must be the sum of
    /// both paths. Checked against central differences through an f64
    /// instantiation of the same graph.
    #[test]
    fn shared_trunk_gradient_accumulates_across_heads() {
        let arch = GanArch {
            g0_project_ch: 4,
            g0_mid_ch: 4,
            g1_hidden: vec![16],
            d0_ch: (4, 4),
            d1_hidden: vec![16],
        };
        let disc = build_discriminator_spec(0, &[1, 8, 8], 3, &arch).unwrap();
        let mut rng = stream(40);
        // Fatter-than-init random weights keep preactivations away from
        // relu kinks, where central differences are biased.
        let mut randomize = |spec: &ModelSpec| {
            let mut store: ParamStore = init_params(spec, &mut rng, AdamHyper::GAN);
            for name in store.trainable_names() {
                let shape = store.get(&name).unwrap().shape().to_vec();
                store.set(&name, rng.normal_tensor::<f32>(&shape).map(|v| v * 0.4));
            }
            store
        };
        let trunk = randomize(&disc.trunk);
        let dh = randomize(&disc.d_head);
        let qh = randomize(&disc.q_head);
        let x = stream(41).normal_tensor::<f32>(&[2, 1, 8, 8]);

        // Loss touching both heads: sum(D) + sum(Q^2).
        fn loss_of<S: Scalar>(
            disc: &DiscSpec,
            trunk: &ParamStore<S>,
            dh: &ParamStore<S>,
            qh: &ParamStore<S>,
            x: &Tensor<S>,
            trainable: bool,
        ) -> (Tape<S>, Bindings, NodeId) {
            let mut tape = Tape::new();
            let tb = bind_params(&mut tape, trunk, trainable);
            let db = bind_params(&mut tape, dh, false);
            let qb = bind_params(&mut tape, qh, false);
            let xid = tape.constant(x.clone());
            let feat = forward_graph(&disc.trunk, &tb, &mut tape, xid, Mode::Train).unwrap();
            let d = forward_graph(&disc.d_head, &db, &mut tape, feat.output, Mode::Train).unwrap();
            let q = forward_graph(&disc.q_head, &qb, &mut tape, feat.output, Mode::Train).unwrap();
            let q2 = tape.apply(Op::Mul, &[q.output, q.output]).unwrap();
            let sd = tape.apply(Op::ReduceSum, &[d.output]).unwrap();
            let sq = tape.apply(Op::ReduceSum, &[q2]).unwrap();
            let loss = tape.apply(Op::Add, &[sd, sq]).unwrap();
            (tape, tb, loss)
        }

        let (tape, tb, loss) = loss_of(&disc, &trunk, &dh, &qh, &x, true);
        let grads = tape.backward(loss).unwrap();

        let trunk64 = trunk.widen();
        let (dh64, qh64) = (dh.widen(), qh.widen());
        let x64 = x.to_f64();
        for name in ["d_conv1.weight", "d_conv2.weight", "d_conv1.bias"] {
            let gid = tb.node(name).unwrap();
            let analytic = grads.get(gid).unwrap();
            let w64 = trunk64.get(name).unwrap().clone();
            for coord in [0usize, 7, 19] {
                let fd = finite_diff_at(
                    |probe: &Tensor<f64>| {
                        let mut t2 = trunk64.clone();
                        t2.set(name, probe.clone());
                        let (tape2, _, l2) = loss_of(&disc, &t2, &dh64, &qh64, &x64, false);
                        Ok(tape2.value(l2).item())
                    },
                    &w64,
                    coord.min(w64.numel() - 1),
                    1e-3,
                )
                .unwrap();
                let an = analytic.data()[coord.min(w64.numel() - 1)] as f64;
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-2, "{name}[{coord}]: {an} vs {fd}");
            }
        }
    }
}
