//! Model graphs: layer specs, the two shipped architecture families, and
//! the network runtime that gathers every generated kernel from its ring on
//! each forward pass and funnels kernel gradients back through the
//! transposed generators.

use serde::{Deserialize, Serialize};

use crate::detrand::{self, SeedSchedule};
use crate::error::{Error, Result};
use crate::nn::batchnorm::{self, BatchNorm, BnCache};
use crate::nn::conv::{self, out_spatial};
use crate::nn::dense;
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::par;
use crate::real::Real;
use crate::ring::{
    self, GenMode, GeneratedLayer, GeneratorBinding, Grouping, IndexPlan, ParameterRing,
    RingAssembly, RingSizing,
};

/// One node of the model graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Indices of earlier nodes feeding this one. Node 0 is the input.
    pub inputs: Vec<usize>,
    /// Kernel comes from a parameter ring. Always false for batch norm.
    pub generated: bool,
    /// Ring group under per-block grouping.
    pub block: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Input,
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    ResidualAdd,
    Flatten,
}

/// Architecture description: the node list plus input/output contract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Input planes as (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub nodes: Vec<LayerSpec>,
}

/// Static per-node output extent (batch dimension elided).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl NodeShape {
    fn to_dims(self, batch: usize) -> Vec<usize> {
        match self {
            NodeShape::Chw(c, h, w) => vec![batch, c, h, w],
            NodeShape::Flat(f) => vec![batch, f],
        }
    }
}

impl ModelConfig {
    /// Infers every node's output shape, validating wiring along the way.
    pub fn infer_shapes(&self) -> Result<Vec<NodeShape>> {
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                if src >= i {
                    return Err(Error::Config(format!(
                        "node {i} reads from node {src}, which is not earlier"
                    )));
                }
            }
            let arity = match node.kind {
                LayerKind::Input => 0,
                LayerKind::ResidualAdd => 2,
                _ => 1,
            };
            if node.inputs.len() != arity {
                return Err(Error::Config(format!(
                    "node {i} expects {arity} inputs, has {}",
                    node.inputs.len()
                )));
            }
            let shape = match &node.kind {
                LayerKind::Input => {
                    if i != 0 {
                        return Err(Error::Config("input must be node 0".into()));
                    }
                    let (c, h, w) = self.input;
                    NodeShape::Chw(c, h, w)
                }
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => match shapes[node.inputs[0]] {
                    NodeShape::Chw(c, h, w) if c == *in_ch => NodeShape::Chw(
                        *out_ch,
                        out_spatial(h, *kernel, *stride, *padding),
                        out_spatial(w, *kernel, *stride, *padding),
                    ),
                    other => {
                        return Err(Error::Config(format!(
                            "node {i}: conv over incompatible input {other:?}"
                        )))
                    }
                },
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => match shapes[node.inputs[0]] {
                    NodeShape::Flat(f) if f == *in_features => NodeShape::Flat(*out_features),
                    other => {
                        return Err(Error::Config(format!(
                            "node {i}: dense over incompatible input {other:?}"
                        )))
                    }
                },
                LayerKind::BatchNorm { channels } => {
                    if node.generated {
                        return Err(Error::Config(format!(
                            "node {i}: batch norm is never ring-generated"
                        )));
                    }
                    match shapes[node.inputs[0]] {
                        s @ NodeShape::Chw(c, _, _) if c == *channels => s,
                        s @ NodeShape::Flat(f) if f == *channels => s,
                        other => {
                            return Err(Error::Config(format!(
                                "node {i}: batch norm channels {channels} vs input {other:?}"
                            )))
                        }
                    }
                }
                LayerKind::Relu => shapes[node.inputs[0]],
                LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                    match shapes[node.inputs[0]] {
                        NodeShape::Chw(c, h, w) if *size <= h && *size <= w && *stride > 0 => {
                            NodeShape::Chw(c, (h - size) / stride + 1, (w - size) / stride + 1)
                        }
                        other => {
                            return Err(Error::Config(format!(
                                "node {i}: pool {size}/{stride} over {other:?}"
                            )))
                        }
                    }
                }
                LayerKind::ResidualAdd => {
                    let a = shapes[node.inputs[0]];
                    let b = shapes[node.inputs[1]];
                    if a != b {
                        return Err(Error::Config(format!(
                            "node {i}: residual add over {a:?} vs {b:?}"
                        )));
                    }
                    a
                }
                LayerKind::Flatten => match shapes[node.inputs[0]] {
                    NodeShape::Chw(c, h, w) => NodeShape::Flat(c * h * w),
                    other => {
                        return Err(Error::Config(format!("node {i}: flatten over {other:?}")))
                    }
                },
            };
            if node.generated
                && !matches!(
                    node.kind,
                    LayerKind::Conv2d { .. } | LayerKind::Dense { .. }
                )
            {
                return Err(Error::Config(format!(
                    "node {i}: only conv/dense kernels can be generated"
                )));
            }
            shapes.push(shape);
        }
        match (shapes.last(), self.nodes.last()) {
            (Some(NodeShape::Flat(f)), Some(spec))
                if *f == self.classes && matches!(spec.kind, LayerKind::Dense { .. }) => {}
            _ => {
                return Err(Error::Config(
                    "model must end in a dense layer producing one logit per class".into(),
                ))
            }
        }
        Ok(shapes)
    }

    /// Flat kernel length and fan-in of a kernel-bearing node.
    pub fn kernel_dims(&self, node: usize) -> Option<(usize, usize)> {
        match self.nodes[node].kind {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((out_ch * in_ch * kernel * kernel, in_ch * kernel * kernel)),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((out_features * in_features, in_features)),
            _ => None,
        }
    }

    /// Generated layers in declaration order, as ring assignment sees them.
    pub fn generated_layers(&self) -> Vec<GeneratedLayer> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.generated)
            .map(|(i, n)| {
                let (len, fan_in) = self.kernel_dims(i).expect("generated layer has a kernel");
                GeneratedLayer {
                    node: i,
                    len,
                    fan_in,
                    block: n.block,
                }
            })
            .collect()
    }

    /// Total kernel parameters of the dense (ring-free) equivalent.
    pub fn dense_kernel_params(&self) -> usize {
        (0..self.nodes.len())
            .filter_map(|i| self.kernel_dims(i).map(|(len, _)| len))
            .sum()
    }
}

pub(crate) struct Builder {
    pub nodes: Vec<LayerSpec>,
}

impl Builder {
    pub fn new() -> Self {
        Self {
            nodes: vec![LayerSpec {
                kind: LayerKind::Input,
                inputs: vec![],
                generated: false,
                block: 0,
            }],
        }
    }

    pub fn push(
        &mut self,
        kind: LayerKind,
        inputs: Vec<usize>,
        generated: bool,
        block: usize,
    ) -> usize {
        self.nodes.push(LayerSpec {
            kind,
            inputs,
            generated,
            block,
        });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu(
        &mut self,
        from: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        block: usize,
    ) -> usize {
        let c = self.push(
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            },
            vec![from],
            true,
            block,
        );
        let b = self.push(
            LayerKind::BatchNorm { channels: out_ch },
            vec![c],
            false,
            block,
        );
        self.push(LayerKind::Relu, vec![b], false, block)
    }
}

/// Four conv-bn-relu stages (strides 1, 2, 1, 2) followed by global average
/// pooling and a dense head. Each stage is its own ring block; the head
/// joins the last block.
pub fn tiny_net(
    input: (usize, usize, usize),
    classes: usize,
    width: usize,
    head_generated: bool,
) -> ModelConfig {
    let (c, h, _) = input;
    let mut b = Builder::new();
    let s1 = b.conv_bn_relu(0, c, width, 3, 1, 1, 0);
    let s2 = b.conv_bn_relu(s1, width, 2 * width, 3, 2, 1, 1);
    let s3 = b.conv_bn_relu(s2, 2 * width, 2 * width, 3, 1, 1, 2);
    let s4 = b.conv_bn_relu(s3, 2 * width, 4 * width, 3, 2, 1, 3);
    let final_h = out_spatial(out_spatial(h, 3, 2, 1), 3, 2, 1);
    let p = b.push(
        LayerKind::AvgPool {
            size: final_h,
            stride: final_h,
        },
        vec![s4],
        false,
        3,
    );
    let f = b.push(LayerKind::Flatten, vec![p], false, 3);
    b.push(
        LayerKind::Dense {
            in_features: 4 * width,
            out_features: classes,
        },
        vec![f],
        head_generated,
        3,
    );
    ModelConfig {
        name: "tiny-net".into(),
        input,
        classes,
        nodes: b.nodes,
    }
}

/// Stem conv plus three residual blocks of two 3x3 convs each (the second
/// and third blocks downsample with stride 2 through a 1x1 projection
/// skip), global average pooling, dense head. Blocks 0-2 are the ring
/// groups; the stem joins block 0 and the head joins block 2.
pub fn micro_res_net(
    input: (usize, usize, usize),
    classes: usize,
    width: usize,
    head_generated: bool,
) -> ModelConfig {
    let (c, h, _) = input;
    let mut b = Builder::new();
    let stem = b.conv_bn_relu(0, c, width, 3, 1, 1, 0);

    // Block 0: identity skip.
    let c1 = b.push(
        LayerKind::Conv2d {
            in_ch: width,
            out_ch: width,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        vec![stem],
        true,
        0,
    );
    let b1 = b.push(LayerKind::BatchNorm { channels: width }, vec![c1], false, 0);
    let r1 = b.push(LayerKind::Relu, vec![b1], false, 0);
    let c2 = b.push(
        LayerKind::Conv2d {
            in_ch: width,
            out_ch: width,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        vec![r1],
        true,
        0,
    );
    let b2 = b.push(LayerKind::BatchNorm { channels: width }, vec![c2], false, 0);
    let add1 = b.push(LayerKind::ResidualAdd, vec![b2, stem], false, 0);
    let mut trunk = b.push(LayerKind::Relu, vec![add1], false, 0);

    // Blocks 1 and 2: stride-2 downsample with 1x1 projection skip.
    let mut ch = width;
    for block in 1..3usize {
        let out_ch = ch * 2;
        let ca = b.push(
            LayerKind::Conv2d {
                in_ch: ch,
                out_ch,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            vec![trunk],
            true,
            block,
        );
        let ba = b.push(
            LayerKind::BatchNorm { channels: out_ch },
            vec![ca],
            false,
            block,
        );
        let ra = b.push(LayerKind::Relu, vec![ba], false, block);
        let cb = b.push(
            LayerKind::Conv2d {
                in_ch: out_ch,
                out_ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            vec![ra],
            true,
            block,
        );
        let bb = b.push(
            LayerKind::BatchNorm { channels: out_ch },
            vec![cb],
            false,
            block,
        );
        let proj = b.push(
            LayerKind::Conv2d {
                in_ch: ch,
                out_ch,
                kernel: 1,
                stride: 2,
                padding: 0,
            },
            vec![trunk],
            true,
            block,
        );
        let bp = b.push(
            LayerKind::BatchNorm { channels: out_ch },
            vec![proj],
            false,
            block,
        );
        let add = b.push(LayerKind::ResidualAdd, vec![bb, bp], false, block);
        trunk = b.push(LayerKind::Relu, vec![add], false, block);
        ch = out_ch;
    }

    let final_h = out_spatial(out_spatial(h, 3, 2, 1), 3, 2, 1);
    let p = b.push(
        LayerKind::AvgPool {
            size: final_h,
            stride: final_h,
        },
        vec![trunk],
        false,
        2,
    );
    let f = b.push(LayerKind::Flatten, vec![p], false, 2);
    b.push(
        LayerKind::Dense {
            in_features: ch,
            out_features: classes,
        },
        vec![f],
        head_generated,
        2,
    );
    ModelConfig {
        name: "micro-res-net".into(),
        input,
        classes,
        nodes: b.nodes,
    }
}

/// Forward/backward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Cache<T> {
    None,
    /// Kernel materialized from a ring for this pass.
    Kernel(Tensor<T>),
    Bn(BnCache<T>),
    Argmax(Vec<u32>),
}

/// All node outputs and per-node caches of one forward pass.
pub struct ForwardPass<T> {
    pub values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    pub mode: Mode,
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.values.last().expect("non-empty graph")
    }
}

/// Parameter gradients produced by one backward pass, indexed by node.
pub struct BackwardOut<T> {
    pub kernel_grads: Vec<Option<Vec<T>>>,
    pub bias_grads: Vec<Option<Vec<T>>>,
    pub bn_grads: Vec<Option<(Vec<T>, Vec<T>)>>,
    pub bn_stats: Vec<Option<BnCache<T>>>,
}

/// A model instance: architecture plus every parameter store (rings for
/// generated kernels, direct tensors for conventional ones, batch norms,
/// biases).
#[derive(Clone)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub grouping: Grouping,
    pub mode: GenMode,
    pub master_seed: u64,
    pub rings: Vec<ParameterRing<T>>,
    pub plans: Vec<IndexPlan>,
    /// Binding index (into `bindings`) per node.
    pub binding_of: Vec<Option<usize>>,
    pub bindings: Vec<GeneratorBinding>,
    /// Direct kernel per non-generated conv/dense node.
    pub direct: Vec<Option<Tensor<T>>>,
    /// Dense bias per dense node (always raw, never generated).
    pub bias: Vec<Option<Vec<T>>>,
    pub bn: Vec<Option<BatchNorm<T>>>,
    shapes: Vec<NodeShape>,
}

impl<T: Real> Network<T> {
    /// Builds a fresh network: rings assigned and initialized, direct
    /// kernels Kaiming-initialized, batch norms at identity.
    pub fn build(
        config: ModelConfig,
        grouping: Grouping,
        sizing: RingSizing,
        mode: GenMode,
        master_seed: u64,
    ) -> Result<Self> {
        let shapes = config.infer_shapes()?;
        let gen_layers = config.generated_layers();
        let num_groups = match &grouping {
            Grouping::Global => 1,
            Grouping::PerBlock => gen_layers.iter().map(|l| l.block).max().unwrap_or(0) + 1,
            Grouping::Custom(map) => map.values().copied().max().unwrap_or(0) + 1,
        };
        let schedule = SeedSchedule::new(master_seed, config.nodes.len(), num_groups);

        let assembly: RingAssembly<T> = if gen_layers.is_empty() {
            RingAssembly {
                rings: vec![],
                plans: vec![],
                bindings: vec![],
            }
        } else {
            ring::assign_rings(&gen_layers, &grouping, &sizing, mode, &schedule)?
        };

        let mut net = Self {
            binding_of: vec![None; config.nodes.len()],
            direct: vec![None; config.nodes.len()],
            bias: vec![None; config.nodes.len()],
            bn: vec![None; config.nodes.len()],
            rings: assembly.rings,
            plans: assembly.plans,
            bindings: assembly.bindings,
            grouping,
            mode,
            master_seed,
            shapes,
            config,
        };
        for (bi, b) in net.bindings.iter().enumerate() {
            net.binding_of[b.node] = Some(bi);
        }

        for i in 0..net.config.nodes.len() {
            match net.config.nodes[i].kind {
                LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                    if !net.config.nodes[i].generated {
                        let (len, fan_in) = net.config.kernel_dims(i).unwrap();
                        let mut buf = vec![0.0f64; len];
                        detrand::fill_standard_normal(&mut buf, schedule.direct_init_seed(i));
                        let scale = (2.0 / fan_in as f64).sqrt();
                        let data: Vec<T> = buf.iter().map(|&v| T::from_f64(scale * v)).collect();
                        let shape = net.kernel_shape(i);
                        net.direct[i] = Some(Tensor::from_vec(&shape, data).unwrap());
                    }
                    if let LayerKind::Dense { out_features, .. } = net.config.nodes[i].kind {
                        net.bias[i] = Some(vec![T::ZERO; out_features]);
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    net.bn[i] = Some(BatchNorm::new(channels));
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// Reassembles a network from deserialized parts, revalidating the
    /// wiring and binding consistency.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: ModelConfig,
        grouping: Grouping,
        mode: GenMode,
        master_seed: u64,
        rings: Vec<ParameterRing<T>>,
        plans: Vec<IndexPlan>,
        bindings: Vec<GeneratorBinding>,
        direct: Vec<Option<Tensor<T>>>,
        bias: Vec<Option<Vec<T>>>,
        bn: Vec<Option<BatchNorm<T>>>,
    ) -> Result<Self> {
        let shapes = config.infer_shapes()?;
        let n_nodes = config.nodes.len();
        if direct.len() != n_nodes || bias.len() != n_nodes || bn.len() != n_nodes {
            return Err(Error::Config(
                "from_parts: per-node stores must match node count".into(),
            ));
        }
        let mut binding_of = vec![None; n_nodes];
        for (bi, b) in bindings.iter().enumerate() {
            if b.node >= n_nodes || !config.nodes[b.node].generated {
                return Err(Error::Config(format!(
                    "from_parts: binding targets non-generated node {}",
                    b.node
                )));
            }
            if b.ring_id >= rings.len() || b.ring_id >= plans.len() {
                return Err(Error::Config(format!(
                    "from_parts: binding names unknown ring {}",
                    b.ring_id
                )));
            }
            binding_of[b.node] = Some(bi);
        }
        for (i, node) in config.nodes.iter().enumerate() {
            if node.generated && binding_of[i].is_none() {
                return Err(Error::Config(format!(
                    "from_parts: generated node {i} has no binding"
                )));
            }
        }
        Ok(Self {
            config,
            grouping,
            mode,
            master_seed,
            rings,
            plans,
            binding_of,
            bindings,
            direct,
            bias,
            bn,
            shapes,
        })
    }

    pub fn kernel_shape(&self, node: usize) -> Vec<usize> {
        match self.config.nodes[node].kind {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![out_ch, in_ch, kernel, kernel],
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![out_features, in_features],
            _ => unreachable!("kernel_shape on non-kernel node"),
        }
    }

    pub fn node_shapes(&self) -> &[NodeShape] {
        &self.shapes
    }

    /// Materializes the kernel of a generated node from its ring.
    pub fn generate_node_kernel(&self, node: usize) -> Result<Tensor<T>> {
        let bi = self.binding_of[node].ok_or_else(|| {
            Error::InvalidArgument(format!("node {node} has no generator binding"))
        })?;
        let b = &self.bindings[bi];
        let flat = ring::generate_kernel(&self.rings[b.ring_id], b, &self.plans[b.ring_id])?;
        Tensor::from_vec(&self.kernel_shape(node), flat)
    }

    /// Stored parameters that generate kernels: ring sizes plus direct
    /// kernel sizes. `count_bn` folds batch-norm weights into the figure.
    pub fn backbone_params(&self, count_bn: bool) -> usize {
        let rings: usize = self.rings.iter().map(|r| r.size()).sum();
        let direct: usize = self.direct.iter().flatten().map(|t| t.numel()).sum();
        let bn = if count_bn { self.bn_param_count() } else { 0 };
        rings + direct + bn
    }

    fn bn_param_count(&self) -> usize {
        self.bn
            .iter()
            .flatten()
            .map(|b| b.gamma.len() + b.beta.len())
            .sum()
    }

    /// Every trainable parameter: backbone + batch norm + biases.
    pub fn total_params(&self) -> usize {
        let biases: usize = self.bias.iter().flatten().map(|b| b.len()).sum();
        self.backbone_params(false) + self.bn_param_count() + biases
    }

    /// Converts to a conventional network: every generated kernel is
    /// materialized once and detached into a direct parameter store.
    pub fn to_direct(&self) -> Result<Self> {
        let mut out = self.clone();
        for node in 0..self.config.nodes.len() {
            if self.config.nodes[node].generated {
                out.direct[node] = Some(self.generate_node_kernel(node)?);
                out.config.nodes[node].generated = false;
            }
        }
        out.rings = vec![];
        out.plans = vec![];
        out.bindings = vec![];
        out.binding_of = vec![None; self.config.nodes.len()];
        Ok(out)
    }

    /// Runs the graph. The returned pass owns every node value plus the
    /// caches backward needs. Pure: running statistics are not updated
    /// here (see [`crate::train`]).
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let batch = *x.shape.first().ok_or_else(|| {
            Error::Shape("forward: input tensor must have a batch dimension".into())
        })?;
        let expect = self.shapes[0].to_dims(batch);
        if x.shape != expect {
            return Err(Error::Shape(format!(
                "forward: input shape {:?}, model expects {:?}",
                x.shape, expect
            )));
        }

        let n_nodes = self.config.nodes.len();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(n_nodes);
        let mut caches: Vec<Cache<T>> = Vec::with_capacity(n_nodes);

        // Kernels for every generated layer, gathered up front (pure,
        // parallel across layers).
        let mut gen_kernels: Vec<Option<Tensor<T>>> = {
            let results = par::map_collect(self.bindings.len(), |bi| {
                self.generate_node_kernel(self.bindings[bi].node)
            });
            let mut slots: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
            for (bi, r) in results.into_iter().enumerate() {
                slots[self.bindings[bi].node] = Some(r?);
            }
            slots
        };

        for (i, node) in self.config.nodes.iter().enumerate() {
            let (value, cache) = match &node.kind {
                LayerKind::Input => (x.clone(), Cache::None),
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let input = &values[node.inputs[0]];
                    if node.generated {
                        let k = gen_kernels[i].take().expect("kernel generated above");
                        let y = conv::conv2d_forward(input, &k, *stride, *padding)?;
                        (y, Cache::Kernel(k))
                    } else {
                        let k = self.direct[i].as_ref().expect("direct kernel present");
                        (
                            conv::conv2d_forward(input, k, *stride, *padding)?,
                            Cache::None,
                        )
                    }
                }
                LayerKind::Dense { .. } => {
                    let input = &values[node.inputs[0]];
                    let bias = self.bias[i].as_ref().expect("dense bias present");
                    if node.generated {
                        let k = gen_kernels[i].take().expect("kernel generated above");
                        let y = dense::dense_forward(input, &k.data, bias)?;
                        (y, Cache::Kernel(k))
                    } else {
                        let k = self.direct[i].as_ref().expect("direct kernel present");
                        (dense::dense_forward(input, &k.data, bias)?, Cache::None)
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let bn = self.bn[i].as_ref().expect("bn params present");
                    let input = &values[node.inputs[0]];
                    match mode {
                        Mode::Train => {
                            let (y, cache) = batchnorm::forward_train(bn, input)?;
                            (y, Cache::Bn(cache))
                        }
                        Mode::Eval => (batchnorm::forward_eval(bn, input)?, Cache::None),
                    }
                }
                LayerKind::Relu => (ops::relu_forward(&values[node.inputs[0]]), Cache::None),
                LayerKind::MaxPool { size, stride } => {
                    let (y, argmax) =
                        ops::maxpool_forward(&values[node.inputs[0]], *size, *stride)?;
                    (y, Cache::Argmax(argmax))
                }
                LayerKind::AvgPool { size, stride } => (
                    ops::avgpool_forward(&values[node.inputs[0]], *size, *stride)?,
                    Cache::None,
                ),
                LayerKind::ResidualAdd => (
                    ops::residual_add(&values[node.inputs[0]], &values[node.inputs[1]])?,
                    Cache::None,
                ),
                LayerKind::Flatten => (ops::flatten(&values[node.inputs[0]])?, Cache::None),
            };
            values.push(value);
            caches.push(cache);
        }
        Ok(ForwardPass {
            values,
            caches,
            mode,
        })
    }

    fn kernel_for_backward<'a>(&'a self, fp: &'a ForwardPass<T>, node: usize) -> &'a Tensor<T> {
        match &fp.caches[node] {
            Cache::Kernel(k) => k,
            _ => self.direct[node].as_ref().expect("kernel-bearing node"),
        }
    }

    /// Backpropagates `grad_logits` through the pass, returning parameter
    /// gradients per node. Requires a train-mode pass (batch norm gradients
    /// flow through batch statistics).
    pub fn backward(&self, fp: &ForwardPass<T>, grad_logits: Tensor<T>) -> Result<BackwardOut<T>> {
        if fp.mode != Mode::Train {
            return Err(Error::InvalidArgument(
                "backward requires a train-mode forward pass".into(),
            ));
        }
        let n_nodes = self.config.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n_nodes).map(|_| None).collect();
        let mut out = BackwardOut {
            kernel_grads: (0..n_nodes).map(|_| None).collect(),
            bias_grads: (0..n_nodes).map(|_| None).collect(),
            bn_grads: (0..n_nodes).map(|_| None).collect(),
            bn_stats: (0..n_nodes).map(|_| None).collect(),
        };
        grads[n_nodes - 1] = Some(grad_logits);

        for i in (1..n_nodes).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.config.nodes[i];
            match &node.kind {
                LayerKind::Input => unreachable!("input is node 0"),
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let input = &fp.values[node.inputs[0]];
                    let kernel = self.kernel_for_backward(fp, i);
                    let (gx, gk) = conv::conv2d_backward(input, kernel, &gy, *stride, *padding)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                    out.kernel_grads[i] = Some(gk.data);
                }
                LayerKind::Dense { .. } => {
                    let input = &fp.values[node.inputs[0]];
                    let kernel = self.kernel_for_backward(fp, i);
                    let (gx, gw, gb) = dense::dense_backward(input, &kernel.data, &gy)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                    out.kernel_grads[i] = Some(gw);
                    out.bias_grads[i] = Some(gb);
                }
                LayerKind::BatchNorm { .. } => {
                    let bn = self.bn[i].as_ref().expect("bn params present");
                    let input = &fp.values[node.inputs[0]];
                    let Cache::Bn(cache) = &fp.caches[i] else {
                        return Err(Error::InvalidArgument(
                            "batch norm cache missing from forward pass".into(),
                        ));
                    };
                    let (gx, gg, gb) = batchnorm::backward(bn, input, cache, &gy)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                    out.bn_grads[i] = Some((gg, gb));
                    out.bn_stats[i] = Some(cache.clone());
                }
                LayerKind::Relu => {
                    let gx = ops::relu_backward(&fp.values[node.inputs[0]], &gy)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                LayerKind::MaxPool { .. } => {
                    let Cache::Argmax(argmax) = &fp.caches[i] else {
                        return Err(Error::InvalidArgument("maxpool cache missing".into()));
                    };
                    let gx = ops::maxpool_backward(&fp.values[node.inputs[0]], argmax, &gy)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                LayerKind::AvgPool { size, stride } => {
                    let gx =
                        ops::avgpool_backward(&fp.values[node.inputs[0]], *size, *stride, &gy)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                LayerKind::ResidualAdd => {
                    accumulate(&mut grads[node.inputs[0]], gy.clone());
                    accumulate(&mut grads[node.inputs[1]], gy);
                }
                LayerKind::Flatten => {
                    let gx = gy.reshaped(&fp.values[node.inputs[0]].shape)?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
            }
        }
        Ok(out)
    }

    /// Superposes per-layer kernel gradients onto each ring, visiting
    /// bindings in declaration order so accumulation is bit-deterministic.
    pub fn ring_gradients(&self, kernel_grads: &[Option<Vec<T>>]) -> Result<Vec<Vec<T>>> {
        let mut acc: Vec<Vec<T>> = self.rings.iter().map(|r| vec![T::ZERO; r.size()]).collect();
        for b in &self.bindings {
            let Some(gk) = kernel_grads[b.node].as_ref() else {
                continue;
            };
            ring::scatter_gradient(gk, b, &self.plans[b.ring_id], &mut acc[b.ring_id])?;
        }
        Ok(acc)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape, g.shape);
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
    }
}

/// One offending element of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub ring: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Worst elements, most offending first.
    pub worst: Vec<GradCheckEntry>,
    pub elements: usize,
}

/// Perturbs every ring element by a relative +-h (h = 1e-5 relative),
/// compares central finite differences of the loss against the analytic
/// superposed ring gradient. 64-bit only; intended for small rings.
pub fn grad_check(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    tolerance: f64,
) -> Result<GradCheckReport> {
    use crate::nn::loss::softmax_cross_entropy;

    let fp = net.forward(x, Mode::Train)?;
    let (_, grad_logits) = softmax_cross_entropy(fp.logits(), labels)?;
    let bw = net.backward(&fp, grad_logits)?;
    let analytic = net.ring_gradients(&bw.kernel_grads)?;

    let flat: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(r, g)| (0..g.len()).map(move |i| (r, i)))
        .collect();

    let loss_of = |net: &Network<f64>| -> Result<f64> {
        let fp = net.forward(x, Mode::Train)?;
        Ok(softmax_cross_entropy(fp.logits(), labels)?.0)
    };

    let numeric: Vec<Result<f64>> = par::map_collect(flat.len(), |j| {
        let (r, i) = flat[j];
        let w = net.rings[r].values[i];
        let h = 1e-5 * w.abs().max(1.0);
        let mut probe = net.clone();
        probe.rings[r].values[i] = w + h;
        let up = loss_of(&probe)?;
        probe.rings[r].values[i] = w - h;
        let down = loss_of(&probe)?;
        Ok((up - down) / (2.0 * h))
    });

    let mut entries = Vec::with_capacity(flat.len());
    for (j, num) in numeric.into_iter().enumerate() {
        let (r, i) = flat[j];
        let a = analytic[r][i];
        let n = num?;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        entries.push(GradCheckEntry {
            ring: r,
            index: i,
            analytic: a,
            numeric: n,
            rel_err: rel,
        });
    }
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map(|e| e.rel_err).unwrap_or(0.0);
    let pass = max_rel_err < tolerance;
    entries.truncate(5);
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        pass,
        worst: entries,
        elements: flat.len(),
    })
}
