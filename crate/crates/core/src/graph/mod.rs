//! Network graph IR: layer specs, validation, scheduling and activation liveness.
//!
//! A graph is a DAG of [`LayerSpec`]s with explicit shapes. Every layer except
//! `output` produces exactly one activation tensor, identified by the id of the
//! producing layer. The `output` layer is a sink that marks the network result.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod random;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    FullyConnected,
    AddResidual,
    AvgPool,
    ReluClip,
    Input,
    Output,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::PointwiseConv2d,
        LayerKind::FullyConnected,
        LayerKind::AddResidual,
        LayerKind::AvgPool,
        LayerKind::ReluClip,
        LayerKind::Input,
        LayerKind::Output,
    ];

    /// Layers that carry a weight tensor (and therefore a ROM footprint).
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d
                | LayerKind::DepthwiseConv2d
                | LayerKind::PointwiseConv2d
                | LayerKind::FullyConnected
        )
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    fn arity(self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::AddResidual => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

/// Activation shape `(channels, height, width)`, serialized as `[c, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl From<[usize; 3]> for Shape {
    fn from(v: [usize; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.c, s.h, s.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: u32,
    pub kind: LayerKind,
    #[serde(default)]
    pub input_ids: Vec<u32>,
    pub out_channels: usize,
    #[serde(default)]
    pub kernel_h: usize,
    #[serde(default)]
    pub kernel_w: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    pub input_shape: Shape,
    pub output_shape: Shape,
    /// Weight count only; biases and other per-channel values live in `bias_count`.
    #[serde(default)]
    pub param_count: u64,
    #[serde(default)]
    pub bias_count: u64,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        self.kind.is_weighted()
    }

    /// Weight tensor dimensions in `[out, in, kh, kw]` layout (`[out, in]` for FC).
    pub fn weight_dims(&self) -> Option<Vec<usize>> {
        let i = self.input_shape;
        match self.kind {
            LayerKind::Conv2d => Some(vec![self.out_channels, i.c, self.kernel_h, self.kernel_w]),
            LayerKind::DepthwiseConv2d => Some(vec![i.c, 1, self.kernel_h, self.kernel_w]),
            LayerKind::PointwiseConv2d => Some(vec![self.out_channels, i.c, 1, 1]),
            LayerKind::FullyConnected => Some(vec![self.out_channels, i.numel()]),
            _ => None,
        }
    }

    /// Weight count implied by the layer's shapes.
    pub fn expected_param_count(&self) -> u64 {
        self.weight_dims()
            .map(|d| d.iter().product::<usize>() as u64)
            .unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    resolution: u32,
    width_multiplier: f64,
    layers: Vec<LayerSpec>,
}

/// A validated network graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    resolution: u32,
    width_multiplier: f64,
    layers: Vec<LayerSpec>,
    index: HashMap<u32, usize>,
    consumers: BTreeMap<u32, Vec<u32>>,
    order: Vec<u32>,
}

/// Live activation tensors while one layer executes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveStep {
    pub layer: u32,
    pub live: BTreeSet<u32>,
}

impl NetworkGraph {
    pub fn new(resolution: u32, width_multiplier: f64, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(layers.len());
        for (pos, l) in layers.iter().enumerate() {
            if index.insert(l.id, pos).is_some() {
                return Err(Error::invalid(l.id, "duplicate layer id"));
            }
        }
        let mut g = NetworkGraph {
            resolution,
            width_multiplier,
            layers,
            index,
            consumers: BTreeMap::new(),
            order: Vec::new(),
        };
        g.validate_topology()?;
        g.order = g.compute_topo_order()?;
        for id in g.order.clone() {
            g.validate_layer(g.layer(id))?;
        }
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text).map_err(|source| Error::Json {
            what: "graph file".into(),
            source,
        })?;
        Self::new(file.resolution, file.width_multiplier, file.layers)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            resolution: self.resolution,
            width_multiplier: self.width_multiplier,
            layers: self.layers.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn width_multiplier(&self) -> f64 {
        self.width_multiplier
    }

    /// Layers in file order.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: u32) -> &LayerSpec {
        &self.layers[self.index[&id]]
    }

    pub fn get(&self, id: u32) -> Option<&LayerSpec> {
        self.index.get(&id).map(|&p| &self.layers[p])
    }

    /// Deterministic execution schedule (ties broken by ascending id).
    pub fn topo_order(&self) -> &[u32] {
        &self.order
    }

    /// Layers consuming the tensor produced by `id`, ascending id.
    pub fn consumers(&self, id: u32) -> &[u32] {
        self.consumers.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| l.kind == LayerKind::Input)
            .unwrap()
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| l.kind == LayerKind::Output)
            .unwrap()
    }

    pub fn produces_tensor(&self, id: u32) -> bool {
        self.get(id).is_some_and(|l| l.kind != LayerKind::Output)
    }

    pub fn tensor_shape(&self, id: u32) -> Shape {
        self.layer(id).output_shape
    }

    /// Weighted layers in schedule order.
    pub fn weighted_layers(&self) -> Vec<u32> {
        self.order
            .iter()
            .copied()
            .filter(|&id| self.layer(id).is_weighted())
            .collect()
    }

    /// The raw classifier output: the tensor feeding `output` when it is produced by a
    /// fully connected layer and has no other consumer. It stays a 32-bit integer tensor.
    pub fn logits_tensor(&self) -> Option<u32> {
        let out = self.output_layer();
        let src = out.input_ids[0];
        (self.layer(src).kind == LayerKind::FullyConnected && self.consumers(src).len() == 1)
            .then_some(src)
    }

    /// Activation tensors that carry a bitwidth decision, in schedule order.
    pub fn activation_tensors(&self) -> Vec<u32> {
        let logits = self.logits_tensor();
        self.order
            .iter()
            .copied()
            .filter(|&id| self.produces_tensor(id) && Some(id) != logits)
            .collect()
    }

    /// Tensors that enter or leave a residual addition.
    pub fn residual_tensors(&self) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for l in &self.layers {
            if l.kind == LayerKind::AddResidual {
                out.insert(l.id);
                out.extend(l.input_ids.iter().copied());
            }
        }
        out
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    pub fn total_biases(&self) -> u64 {
        self.layers.iter().map(|l| l.bias_count).sum()
    }

    /// Live activation tensors at each step of the schedule.
    ///
    /// At the step executing `L` the set holds `L`'s inputs, `L`'s output, and every
    /// earlier tensor that still has a consumer scheduled after `L`.
    pub fn liveness(&self) -> Vec<LiveStep> {
        let pos: HashMap<u32, usize> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        // Last step at which each tensor is needed (its producer step if unconsumed).
        let last_use: HashMap<u32, usize> = self
            .order
            .iter()
            .filter(|&&id| self.produces_tensor(id))
            .map(|&id| {
                let last = self
                    .consumers(id)
                    .iter()
                    .map(|c| pos[c])
                    .max()
                    .unwrap_or(pos[&id]);
                (id, last)
            })
            .collect();

        self.order
            .iter()
            .enumerate()
            .map(|(step, &id)| {
                let live = self
                    .order
                    .iter()
                    .take(step + 1)
                    .copied()
                    .filter(|t| last_use.get(t).is_some_and(|&last| last >= step))
                    .collect();
                LiveStep { layer: id, live }
            })
            .collect()
    }

    fn validate_topology(&mut self) -> Result<()> {
        let inputs = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Input)
            .count();
        let outputs = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Output)
            .count();
        if inputs != 1 {
            return Err(Error::invalid(
                None,
                format!("expected exactly one input layer, found {inputs}"),
            ));
        }
        if outputs != 1 {
            return Err(Error::invalid(
                None,
                format!("expected exactly one output layer, found {outputs}"),
            ));
        }
        let mut consumers: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for l in &self.layers {
            if l.input_ids.len() != l.kind.arity() {
                return Err(Error::invalid(
                    l.id,
                    format!(
                        "{} expects {} input(s), got {}",
                        l.kind,
                        l.kind.arity(),
                        l.input_ids.len()
                    ),
                ));
            }
            for &src in &l.input_ids {
                let Some(&p) = self.index.get(&src) else {
                    return Err(Error::invalid(
                        l.id,
                        format!("dangling reference to layer {src}"),
                    ));
                };
                if self.layers[p].kind == LayerKind::Output {
                    return Err(Error::invalid(
                        l.id,
                        "output layer cannot feed other layers",
                    ));
                }
                consumers.entry(src).or_default().push(l.id);
            }
        }
        for v in consumers.values_mut() {
            v.sort_unstable();
        }
        self.consumers = consumers;
        Ok(())
    }

    fn compute_topo_order(&self) -> Result<Vec<u32>> {
        let mut indeg: HashMap<u32, usize> = self
            .layers
            .iter()
            .map(|l| (l.id, l.input_ids.len()))
            .collect();
        let mut ready: BinaryHeap<Reverse<u32>> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            // A layer may consume the same tensor twice (x + x).
            for &c in self.consumers(id) {
                let d = indeg.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != self.layers.len() {
            let stuck = self
                .layers
                .iter()
                .map(|l| l.id)
                .filter(|id| !order.contains(id))
                .min();
            return Err(Error::invalid(stuck, "graph contains a cycle"));
        }
        Ok(order)
    }

    fn validate_layer(&self, l: &LayerSpec) -> Result<()> {
        let err = |msg: String| Err(Error::invalid(l.id, msg));
        for &src in &l.input_ids {
            let produced = self.layer(src).output_shape;
            if produced != l.input_shape {
                return err(format!(
                    "input_shape {} does not match output_shape {} of layer {src}",
                    l.input_shape, produced
                ));
            }
        }
        if l.out_channels != l.output_shape.c {
            return err(format!(
                "out_channels {} does not match output_shape {}",
                l.out_channels, l.output_shape
            ));
        }
        let i = l.input_shape;
        let spatial = |what: &str| -> Result<(usize, usize)> {
            if l.stride == 0 || l.kernel_h == 0 || l.kernel_w == 0 {
                return Err(Error::invalid(
                    l.id,
                    format!("{what} needs positive kernel and stride"),
                ));
            }
            let (ph, pw) = (i.h + 2 * l.padding, i.w + 2 * l.padding);
            if ph < l.kernel_h || pw < l.kernel_w {
                return Err(Error::invalid(
                    l.id,
                    format!("{what} kernel larger than padded input"),
                ));
            }
            Ok((
                (ph - l.kernel_h) / l.stride + 1,
                (pw - l.kernel_w) / l.stride + 1,
            ))
        };
        let expect_out = match l.kind {
            LayerKind::Input | LayerKind::Output | LayerKind::ReluClip | LayerKind::AddResidual => {
                i
            }
            LayerKind::Conv2d => {
                let (h, w) = spatial("conv2d")?;
                Shape::new(l.out_channels, h, w)
            }
            LayerKind::DepthwiseConv2d | LayerKind::AvgPool => {
                let (h, w) = spatial(if l.kind == LayerKind::AvgPool {
                    "avg_pool"
                } else {
                    "depthwise_conv2d"
                })?;
                Shape::new(i.c, h, w)
            }
            LayerKind::PointwiseConv2d => {
                if l.kernel_h != 1 || l.kernel_w != 1 {
                    return err("pointwise_conv2d requires a 1x1 kernel".into());
                }
                let (h, w) = spatial("pointwise_conv2d")?;
                Shape::new(l.out_channels, h, w)
            }
            LayerKind::FullyConnected => Shape::new(l.out_channels, 1, 1),
        };
        if expect_out != l.output_shape {
            return err(format!(
                "output_shape {} inconsistent with input {} (expected {})",
                l.output_shape, i, expect_out
            ));
        }
        let expect_params = l.expected_param_count();
        if l.param_count != expect_params {
            return err(format!(
                "param_count {} but shapes imply {}",
                l.param_count, expect_params
            ));
        }
        if !l.is_weighted() && l.bias_count != 0 {
            return err(format!("{} layers carry no bias", l.kind));
        }
        if l.output_shape.numel() == 0 {
            return err("empty output tensor".into());
        }
        Ok(())
    }
}

/// Load and validate a graph JSON file.
pub fn load_graph(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkGraph::from_json(&text)
}
