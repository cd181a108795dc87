//! Float forward/backward over a [`NetworkGraph`] with optional fake quantization.
//!
//! Every compute layer except the classifier producing the logits applies a ReLU to
//! its output. When an output tensor is fake-quantized the clamp to `[0, clip_max]`
//! plays that role. Gradients use the straight-through rule on every rounding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, Shape};
use crate::memory::QuantPolicy;
use crate::quant::{
    self, act_code, act_scale, act_value, quantize_channels, round_half_away, unsigned_max,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Latent float weights plus the trainable clipping bound of every activation tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FloatModel {
    pub params: BTreeMap<u32, LayerParams>,
    pub clips: BTreeMap<u32, f64>,
}

impl FloatModel {
    /// He-normal weights, zero biases, unit clipping bounds.
    pub fn init<R: Rng + ?Sized>(g: &NetworkGraph, rng: &mut R) -> Self {
        let mut params = BTreeMap::new();
        for id in g.weighted_layers() {
            let l = g.layer(id);
            let dims = l.weight_dims().expect("weighted layer");
            let fan_in: usize = dims[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let weight = (0..dims.iter().product::<usize>())
                .map(|_| normal.sample(rng))
                .collect();
            let bias = if l.bias_count > 0 {
                vec![0.0; l.out_channels]
            } else {
                Vec::new()
            };
            params.insert(id, LayerParams { weight, bias });
        }
        let clips = g
            .activation_tensors()
            .into_iter()
            .map(|t| (t, 1.0))
            .collect();
        FloatModel { params, clips }
    }

    pub fn validate(&self, g: &NetworkGraph) -> Result<()> {
        for id in g.weighted_layers() {
            let l = g.layer(id);
            let p = self
                .params
                .get(&id)
                .ok_or_else(|| Error::ModelMismatch(format!("no weights for layer {id}")))?;
            if p.weight.len() as u64 != l.expected_param_count() {
                return Err(Error::ModelMismatch(format!(
                    "layer {id} has {} weights, graph expects {}",
                    p.weight.len(),
                    l.expected_param_count()
                )));
            }
            if !(p.bias.is_empty() || p.bias.len() == l.out_channels) {
                return Err(Error::ModelMismatch(format!(
                    "layer {id} has {} biases",
                    p.bias.len()
                )));
            }
        }
        if self.params.len() != g.weighted_layers().len() {
            return Err(Error::ModelMismatch(
                "weights for layers the graph does not have".into(),
            ));
        }
        for t in g.activation_tensors() {
            match self.clips.get(&t) {
                Some(c) if c.is_finite() && *c > 0.0 => {}
                Some(c) => {
                    return Err(Error::ModelMismatch(format!(
                        "clip_max of tensor {t} is {c}"
                    )))
                }
                None => {
                    return Err(Error::ModelMismatch(format!(
                        "no clipping range for tensor {t}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        FloatModel {
            params: self
                .params
                .iter()
                .map(|(&k, p)| {
                    (
                        k,
                        LayerParams {
                            weight: vec![0.0; p.weight.len()],
                            bias: vec![0.0; p.bias.len()],
                        },
                    )
                })
                .collect(),
            clips: self.clips.keys().map(|&k| (k, 0.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum::<usize>()
            + self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All scalars in a fixed order: per layer (by id) weights then biases, then clips.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.params
            .values()
            .flat_map(|p| p.weight.iter().chain(p.bias.iter()))
            .chain(self.clips.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.params
            .values_mut()
            .flat_map(|p| p.weight.iter_mut().chain(p.bias.iter_mut()))
            .chain(self.clips.values_mut())
    }

    /// `self += alpha * other`, structures must match.
    pub fn add_scaled(&mut self, other: &FloatModel, alpha: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Bitwidths of the tensors that are fake-quantized; absent entries stay float.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FakeQuant {
    pub weight_bits: BTreeMap<u32, u32>,
    pub act_bits: BTreeMap<u32, u32>,
}

impl FakeQuant {
    pub fn none() -> Self {
        Self::default()
    }

    /// Quantized entries of a policy; FP32 entries stay float.
    pub fn from_policy(p: &QuantPolicy) -> Self {
        let pick = |m: &BTreeMap<u32, crate::memory::Precision>| {
            m.iter()
                .filter(|(_, b)| b.is_quantized())
                .map(|(&k, b)| (k, b.bits()))
                .collect()
        };
        FakeQuant {
            weight_bits: pick(&p.weight_bits),
            act_bits: pick(&p.act_bits),
        }
    }

    /// The same bitwidth on every weight and activation tensor (any width in `2..=30`).
    pub fn uniform(g: &NetworkGraph, bits: u32) -> Self {
        FakeQuant {
            weight_bits: g
                .weighted_layers()
                .into_iter()
                .map(|id| (id, bits))
                .collect(),
            act_bits: g
                .activation_tensors()
                .into_iter()
                .map(|id| (id, bits))
                .collect(),
        }
    }
}

struct Step {
    id: u32,
    kind: LayerKind,
    inputs: Vec<usize>,
    in_shape: Shape,
    out_shape: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    act: Option<(u32, f64)>,
    relu: bool,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Execution plan with fake-quantized effective weights, valid for one parameter state.
pub struct Plan {
    steps: Vec<Step>,
    output: usize,
}

impl Plan {
    pub fn new(g: &NetworkGraph, model: &FloatModel, fq: &FakeQuant) -> Result<Self> {
        let order = g.topo_order();
        let pos: HashMap<u32, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let logits = g.logits_tensor();
        let mut steps = Vec::with_capacity(order.len());
        let mut output = 0;
        for (i, &id) in order.iter().enumerate() {
            let l = g.layer(id);
            let act = match fq.act_bits.get(&id) {
                Some(&bits) => {
                    let clip = *model.clips.get(&id).ok_or_else(|| {
                        Error::ModelMismatch(format!("no clipping range for tensor {id}"))
                    })?;
                    Some((bits, clip))
                }
                None => None,
            };
            let (mut w, mut b) = (Vec::new(), Vec::new());
            if l.is_weighted() {
                let p = model
                    .params
                    .get(&id)
                    .ok_or_else(|| Error::ModelMismatch(format!("no weights for layer {id}")))?;
                b = p.bias.clone();
                match fq.weight_bits.get(&id) {
                    Some(&bits) => {
                        let ch = l.weight_dims().expect("weighted")[0];
                        let (codes, scales) = quantize_channels(&p.weight, ch, bits)?;
                        let per = codes.len() / ch;
                        w = codes
                            .iter()
                            .enumerate()
                            .map(|(k, &c)| c as f64 * scales[k / per] as f64)
                            .collect();
                        let src = l.input_ids[0];
                        if let (Some(&in_bits), Some(&clip)) =
                            (fq.act_bits.get(&src), model.clips.get(&src))
                        {
                            let s_in = act_scale(clip, in_bits);
                            for (c, bv) in b.iter_mut().enumerate() {
                                let s = s_in * scales[c] as f64;
                                *bv = quant::bias_code(*bv, s_in, scales[c] as f64) * s;
                            }
                        }
                    }
                    None => w = p.weight.clone(),
                }
            }
            if l.kind == LayerKind::Output {
                output = i;
            }
            steps.push(Step {
                id,
                kind: l.kind,
                inputs: l.input_ids.iter().map(|s| pos[s]).collect(),
                in_shape: l.input_shape,
                out_shape: l.output_shape,
                kh: l.kernel_h,
                kw: l.kernel_w,
                stride: l.stride,
                pad: l.padding,
                act,
                relu: !matches!(l.kind, LayerKind::Input | LayerKind::Output) && Some(id) != logits,
                w,
                b,
            });
        }
        Ok(Plan { steps, output })
    }

    /// Tensor (layer) id of every schedule position.
    pub fn step_ids(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.id).collect()
    }

    /// Forward one image, keeping every pre-activation and output for the backward pass.
    pub fn forward(&self, image: &[f64]) -> Trace {
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.steps.len());
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.steps.len());
        for st in &self.steps {
            let x = |k: usize| -> &[f64] { &out[st.inputs[k]] };
            let (z, y) = match st.kind {
                LayerKind::Input => {
                    assert_eq!(
                        image.len(),
                        st.out_shape.numel(),
                        "image does not match input shape"
                    );
                    let z = image.to_vec();
                    let y = activate(st, &z);
                    (z, y)
                }
                LayerKind::Output => (Vec::new(), x(0).to_vec()),
                LayerKind::AddResidual => {
                    let (a, b) = (x(0), x(1));
                    let z: Vec<f64> = a.iter().zip(b).map(|(p, q)| p + q).collect();
                    let y = match st.act {
                        Some((bits, clip)) => {
                            let s = act_scale(clip, bits);
                            let n = unsigned_max(bits) as f64;
                            a.iter()
                                .zip(b)
                                .map(|(p, q)| {
                                    let code = (round_half_away(p / s) + round_half_away(q / s))
                                        .clamp(0.0, n);
                                    act_value(code as u32, clip, bits)
                                })
                                .collect()
                        }
                        None => z.iter().map(|v| v.max(0.0)).collect(),
                    };
                    (z, y)
                }
                _ => {
                    let z = linear_forward(st, x(0));
                    let y = activate(st, &z);
                    (z, y)
                }
            };
            pre.push(z);
            out.push(y);
        }
        Trace {
            pre,
            out,
            output: self.output,
        }
    }

    /// Backward from the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut FloatModel) {
        let mut dout: Vec<Vec<f64>> = self
            .steps
            .iter()
            .map(|s| vec![0.0; s.out_shape.numel()])
            .collect();
        let out_src = self.steps[self.output].inputs[0];
        for (d, g) in dout[out_src].iter_mut().zip(dlogits) {
            *d += g;
        }
        for (i, st) in self.steps.iter().enumerate().rev() {
            if matches!(st.kind, LayerKind::Output) {
                continue;
            }
            let dy = std::mem::take(&mut dout[i]);
            let z = &trace.pre[i];
            let mut dclip = 0.0;
            let dz: Vec<f64> = match st.act {
                Some((_, clip)) => z
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| {
                        if v >= clip {
                            dclip += g;
                            0.0
                        } else if v < 0.0 {
                            0.0
                        } else {
                            g
                        }
                    })
                    .collect(),
                None if st.relu => z
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                None => dy,
            };
            if st.act.is_some() {
                if let Some(c) = grads.clips.get_mut(&st.id) {
                    *c += dclip;
                }
            }
            match st.kind {
                LayerKind::Input | LayerKind::Output => {}
                LayerKind::AddResidual => {
                    for k in 0..2 {
                        for (d, g) in dout[st.inputs[k]].iter_mut().zip(&dz) {
                            *d += g;
                        }
                    }
                }
                _ => {
                    let src = st.inputs[0];
                    let x = &trace.out[src];
                    let gp = if st.kind.is_weighted() {
                        Some(
                            grads
                                .params
                                .get_mut(&st.id)
                                .expect("grad slot for weighted layer"),
                        )
                    } else {
                        None
                    };
                    let dx = linear_backward(st, x, &dz, gp);
                    for (d, g) in dout[src].iter_mut().zip(&dx) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Intermediate values of one forward pass, indexed by schedule position.
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
    output: usize,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        &self.out[self.output]
    }
}

fn activate(st: &Step, z: &[f64]) -> Vec<f64> {
    match st.act {
        Some((bits, clip)) => z
            .iter()
            .map(|&v| act_value(act_code(v, clip, bits), clip, bits))
            .collect(),
        None if st.relu => z.iter().map(|v| v.max(0.0)).collect(),
        None => z.to_vec(),
    }
}

#[inline]
fn in_range(base: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let v = base + k;
    (v >= pad && v - pad < len).then(|| v - pad)
}

fn linear_forward(st: &Step, x: &[f64]) -> Vec<f64> {
    let (is, os) = (st.in_shape, st.out_shape);
    let mut z = vec![0.0; os.numel()];
    match st.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
            let dw = st.kind == LayerKind::DepthwiseConv2d;
            let plane = os.h * os.w;
            for o in 0..os.c {
                if let Some(&b) = st.b.get(o) {
                    z[o * plane..(o + 1) * plane].fill(b);
                }
                let ics = if dw { o..o + 1 } else { 0..is.c };
                for ic in ics {
                    let wbase = if dw {
                        o * st.kh * st.kw
                    } else {
                        (o * is.c + ic) * st.kh * st.kw
                    };
                    for ky in 0..st.kh {
                        for kx in 0..st.kw {
                            let wv = st.w[wbase + ky * st.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..os.h {
                                let Some(iy) = in_range(oy * st.stride, ky, st.pad, is.h) else {
                                    continue;
                                };
                                let xrow = &x[(ic * is.h + iy) * is.w..(ic * is.h + iy + 1) * is.w];
                                let zrow =
                                    &mut z[(o * os.h + oy) * os.w..(o * os.h + oy + 1) * os.w];
                                for (ox, zv) in zrow.iter_mut().enumerate() {
                                    if let Some(ix) = in_range(ox * st.stride, kx, st.pad, is.w) {
                                        *zv += wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::FullyConnected => {
            let n = x.len();
            for (o, zv) in z.iter_mut().enumerate() {
                let row = &st.w[o * n..(o + 1) * n];
                *zv = st.b.get(o).copied().unwrap_or(0.0)
                    + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        LayerKind::AvgPool => {
            let inv = 1.0 / (st.kh * st.kw) as f64;
            for c in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut s = 0.0;
                        for ky in 0..st.kh {
                            let Some(iy) = in_range(oy * st.stride, ky, st.pad, is.h) else {
                                continue;
                            };
                            for kx in 0..st.kw {
                                if let Some(ix) = in_range(ox * st.stride, kx, st.pad, is.w) {
                                    s += x[(c * is.h + iy) * is.w + ix];
                                }
                            }
                        }
                        z[(c * os.h + oy) * os.w + ox] = s * inv;
                    }
                }
            }
        }
        LayerKind::ReluClip => z.copy_from_slice(x),
        LayerKind::Input | LayerKind::Output | LayerKind::AddResidual => unreachable!(),
    }
    z
}

fn linear_backward(st: &Step, x: &[f64], dz: &[f64], mut gp: Option<&mut LayerParams>) -> Vec<f64> {
    let (is, os) = (st.in_shape, st.out_shape);
    let mut dx = vec![0.0; is.numel()];
    match st.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
            let gp = gp.as_deref_mut().expect("weighted");
            let dw = st.kind == LayerKind::DepthwiseConv2d;
            let plane = os.h * os.w;
            for o in 0..os.c {
                let dzp = &dz[o * plane..(o + 1) * plane];
                if let Some(b) = gp.bias.get_mut(o) {
                    *b += dzp.iter().sum::<f64>();
                }
                let ics = if dw { o..o + 1 } else { 0..is.c };
                for ic in ics {
                    let wbase = if dw {
                        o * st.kh * st.kw
                    } else {
                        (o * is.c + ic) * st.kh * st.kw
                    };
                    for ky in 0..st.kh {
                        for kx in 0..st.kw {
                            let wi = wbase + ky * st.kw + kx;
                            let wv = st.w[wi];
                            let mut gw = 0.0;
                            for oy in 0..os.h {
                                let Some(iy) = in_range(oy * st.stride, ky, st.pad, is.h) else {
                                    continue;
                                };
                                let row = (ic * is.h + iy) * is.w;
                                let dzrow = &dzp[oy * os.w..(oy + 1) * os.w];
                                for (ox, &g) in dzrow.iter().enumerate() {
                                    if let Some(ix) = in_range(ox * st.stride, kx, st.pad, is.w) {
                                        gw += g * x[row + ix];
                                        dx[row + ix] += g * wv;
                                    }
                                }
                            }
                            gp.weight[wi] += gw;
                        }
                    }
                }
            }
        }
        LayerKind::FullyConnected => {
            let gp = gp.as_deref_mut().expect("weighted");
            let n = x.len();
            for (o, &g) in dz.iter().enumerate() {
                if let Some(b) = gp.bias.get_mut(o) {
                    *b += g;
                }
                if g == 0.0 {
                    continue;
                }
                let row = &st.w[o * n..(o + 1) * n];
                let grow = &mut gp.weight[o * n..(o + 1) * n];
                for i in 0..n {
                    grow[i] += g * x[i];
                    dx[i] += g * row[i];
                }
            }
        }
        LayerKind::AvgPool => {
            let inv = 1.0 / (st.kh * st.kw) as f64;
            for c in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let g = dz[(c * os.h + oy) * os.w + ox] * inv;
                        for ky in 0..st.kh {
                            let Some(iy) = in_range(oy * st.stride, ky, st.pad, is.h) else {
                                continue;
                            };
                            for kx in 0..st.kw {
                                if let Some(ix) = in_range(ox * st.stride, kx, st.pad, is.w) {
                                    dx[(c * is.h + iy) * is.w + ix] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::ReluClip => dx.copy_from_slice(dz),
        LayerKind::Input | LayerKind::Output | LayerKind::AddResidual => unreachable!(),
    }
    dx
}

/// Softmax cross-entropy; returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the largest score, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Float forward pass returning the class scores.
pub fn run_network_float(
    g: &NetworkGraph,
    model: &FloatModel,
    image: &[f64],
    fq: Option<&FakeQuant>,
) -> Result<Vec<f64>> {
    let none = FakeQuant::none();
    let plan = Plan::new(g, model, fq.unwrap_or(&none))?;
    check_image(g, image)?;
    Ok(plan.forward(image).logits().to_vec())
}

pub(crate) fn check_image(g: &NetworkGraph, image: &[f64]) -> Result<()> {
    let want = g.input_layer().output_shape.numel();
    if image.len() != want {
        return Err(Error::ModelMismatch(format!(
            "image has {} values, input layer expects {want}",
            image.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient over a batch. Per-sample gradients are summed in
/// batch order, so the result does not depend on the thread count.
pub fn batch_loss_grad(
    g: &NetworkGraph,
    model: &FloatModel,
    fq: &FakeQuant,
    images: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, FloatModel)> {
    assert_eq!(images.len(), labels.len());
    let plan = Plan::new(g, model, fq)?;
    for img in images {
        check_image(g, img)?;
    }
    let zero = model.zeros_like();
    let per: Vec<(f64, FloatModel)> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| {
            let trace = plan.forward(img);
            let (loss, dl) = cross_entropy(trace.logits(), label);
            let mut gr = zero.clone();
            plan.backward(&trace, &dl, &mut gr);
            (loss, gr)
        })
        .collect();
    let n = images.len() as f64;
    let mut total = zero;
    let mut loss = 0.0;
    for (l, gr) in &per {
        loss += l;
        total.add_scaled(gr, 1.0 / n);
    }
    Ok((loss / n, total))
}

/// Adam optimizer state over the flattened parameters of a [`FloatModel`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}
