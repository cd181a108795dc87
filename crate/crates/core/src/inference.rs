//! Integer-only execution of a bit-packed mixed-precision model, plus accuracy evaluation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, NetworkGraph, Shape};
use crate::memory::{Precision, QuantPolicy};
use crate::nn::{argmax, check_image, FakeQuant, FloatModel, Plan};
use crate::quant::{
    act_code, act_scale, bias_code, compute_requant, pack_subbyte, quantize_channels,
    unpack_subbyte, unsigned_max, ActRange, QuantizedTensor, RequantParams,
};

const MAGIC: &[u8; 4] = b"MPQ1";

/// A packed unsigned activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IntActivation {
    pub tensor_id: u32,
    pub bits: Precision,
    pub packed: Vec<u8>,
    pub shape: Shape,
    pub range: ActRange,
}

impl IntActivation {
    pub fn from_codes(
        tensor_id: u32,
        bits: Precision,
        shape: Shape,
        range: ActRange,
        codes: &[i32],
    ) -> Result<Self> {
        if codes.len() != shape.numel() {
            return Err(Error::ModelMismatch(format!(
                "tensor {tensor_id}: {} codes for shape {shape}",
                codes.len()
            )));
        }
        Ok(IntActivation {
            tensor_id,
            bits,
            packed: pack_subbyte(codes, bits.bits(), false)?,
            shape,
            range,
        })
    }

    /// Quantize real values with the tensor's clipping range.
    pub fn encode(
        tensor_id: u32,
        values: &[f64],
        shape: Shape,
        range: ActRange,
        bits: Precision,
    ) -> Result<Self> {
        let codes: Vec<i32> = values
            .iter()
            .map(|&v| act_code(v, range.clip_max, bits.bits()) as i32)
            .collect();
        Self::from_codes(tensor_id, bits, shape, range, &codes)
    }

    pub fn codes(&self) -> Vec<i32> {
        unpack_subbyte(&self.packed, self.bits.bits(), self.shape.numel(), false)
    }

    pub fn scale(&self) -> f64 {
        act_scale(self.range.clip_max, self.bits.bits())
    }
}

/// One layer of a packed model. `out_bits` is `Fp32` for the 32-bit logits and for
/// the `output` marker layer, which carries no data.
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    pub id: u32,
    pub kind: LayerKind,
    pub weight: Option<QuantizedTensor>,
    pub bias: Vec<i32>,
    pub requant: Vec<RequantParams>,
    pub out_bits: Precision,
    pub out_clip: Option<f64>,
}

impl IntLayer {
    fn out_range(&self) -> Option<ActRange> {
        self.out_clip.map(|c| ActRange {
            tensor_id: self.id,
            clip_max: c,
        })
    }
}

/// Deployable model: every layer of the graph in schedule order.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub layers: Vec<IntLayer>,
}

/// Result of an integer layer: a quantized activation, or raw 32-bit class scores.
#[derive(Debug, Clone, PartialEq)]
pub enum IntOutput {
    Act(IntActivation),
    Logits(Vec<i32>),
}

impl PackedModel {
    /// Quantize a float model under a fully quantized policy.
    pub fn build(g: &NetworkGraph, model: &FloatModel, policy: &QuantPolicy) -> Result<Self> {
        policy.validate(g)?;
        model.validate(g)?;
        if !policy.is_fully_quantized() {
            return Err(Error::Unsupported(
                "integer export needs every tensor at 2, 4 or 8 bits".into(),
            ));
        }
        let logits = g.logits_tensor();
        let act = |t: u32| -> (Precision, f64) { (policy.act_bits[&t], model.clips[&t]) };
        let scale = |t: u32| {
            let (b, c) = act(t);
            act_scale(c, b.bits())
        };
        let mut layers = Vec::new();
        for &id in g.topo_order() {
            let l = g.layer(id);
            let (out_bits, out_clip) = if l.kind == LayerKind::Output || Some(id) == logits {
                (Precision::Fp32, None)
            } else {
                let (b, c) = act(id);
                (b, Some(c))
            };
            let mut il = IntLayer {
                id,
                kind: l.kind,
                weight: None,
                bias: Vec::new(),
                requant: Vec::new(),
                out_bits,
                out_clip,
            };
            match l.kind {
                LayerKind::Input | LayerKind::Output => {}
                k if k.is_weighted() => {
                    let p = &model.params[&id];
                    let wbits = policy.weight_bits[&id];
                    let dims = l.weight_dims().expect("weighted");
                    let (codes, scales) = quantize_channels(&p.weight, dims[0], wbits.bits())?;
                    let src = l.input_ids[0];
                    let s_in = scale(src);
                    il.bias = p
                        .bias
                        .iter()
                        .zip(&scales)
                        .map(|(&b, &s)| {
                            let v = bias_code(b, s_in, s as f64);
                            if v.abs() <= i32::MAX as f64 {
                                Ok(v as i32)
                            } else {
                                Err(Error::AccumulatorOverflow { layer: id })
                            }
                        })
                        .collect::<Result<_>>()?;
                    let sw: Vec<f64> = scales.iter().map(|&s| s as f64).collect();
                    let s_out = if Some(id) == logits {
                        s_in * sw.iter().copied().fold(0.0, f64::max)
                    } else {
                        scale(id)
                    };
                    il.requant = compute_requant(s_in, &sw, s_out)?;
                    il.weight = Some(QuantizedTensor {
                        bits: wbits,
                        packed: pack_subbyte(&codes, wbits.bits(), true)?,
                        shape: dims,
                        scales,
                        signed: true,
                    });
                }
                LayerKind::AddResidual => {
                    let s_out = scale(id);
                    il.requant = l
                        .input_ids
                        .iter()
                        .map(|&t| RequantParams::from_real(scale(t) / s_out))
                        .collect::<Result<_>>()?;
                }
                LayerKind::AvgPool => {
                    let m = scale(l.input_ids[0]) / (scale(id) * (l.kernel_h * l.kernel_w) as f64);
                    il.requant = vec![RequantParams::from_real(m)?];
                }
                LayerKind::ReluClip => {
                    il.requant = vec![RequantParams::from_real(scale(l.input_ids[0]) / scale(id))?];
                }
                _ => unreachable!(),
            }
            layers.push(il);
        }
        Ok(PackedModel { layers })
    }

    /// Check that the model describes exactly the layers of `g`.
    pub fn check_graph(&self, g: &NetworkGraph) -> Result<()> {
        let order = g.topo_order();
        if order.len() != self.layers.len() {
            return Err(Error::ModelMismatch(format!(
                "model has {} layers, graph has {}",
                self.layers.len(),
                order.len()
            )));
        }
        let logits = g.logits_tensor();
        for (il, &id) in self.layers.iter().zip(order) {
            let l = g.layer(id);
            if il.id != id || il.kind != l.kind {
                return Err(Error::ModelMismatch(format!(
                    "model layer {} ({}) where graph schedules {id} ({})",
                    il.id, il.kind, l.kind
                )));
            }
            let produces_codes = l.kind != LayerKind::Output && Some(id) != logits;
            if produces_codes != il.out_bits.is_quantized()
                || produces_codes != il.out_clip.is_some()
            {
                return Err(Error::ModelMismatch(format!(
                    "layer {id}: output encoding does not match graph"
                )));
            }
            let want_rq = match l.kind {
                LayerKind::Input | LayerKind::Output => 0,
                LayerKind::AddResidual => 2,
                LayerKind::AvgPool | LayerKind::ReluClip => 1,
                _ => l.out_channels,
            };
            if il.requant.len() != want_rq {
                return Err(Error::ModelMismatch(format!(
                    "layer {id}: {} requant entries",
                    il.requant.len()
                )));
            }
            match (&il.weight, l.weight_dims()) {
                (Some(w), Some(d)) => {
                    w.validate()?;
                    if w.shape != d {
                        return Err(Error::ModelMismatch(format!(
                            "layer {id}: weight shape {:?}, graph says {d:?}",
                            w.shape
                        )));
                    }
                    if !(il.bias.is_empty() || il.bias.len() == l.out_channels) {
                        return Err(Error::ModelMismatch(format!(
                            "layer {id}: {} biases",
                            il.bias.len()
                        )));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::ModelMismatch(format!(
                        "layer {id}: weight presence differs"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(self.layers.len() as u32)?;
        for l in &self.layers {
            w.write_u32::<LE>(l.id)?;
            w.write_u8(l.kind.index() as u8)?;
            w.write_u8(l.weight.as_ref().map_or(0, |t| t.bits.bits() as u8))?;
            w.write_u8(l.out_bits.bits() as u8)?;
            w.write_u8(u8::from(l.out_clip.is_some()))?;
            if let Some(c) = l.out_clip {
                w.write_f64::<LE>(c)?;
            }
            let (dims, scales, payload): (&[usize], &[f32], &[u8]) = match &l.weight {
                Some(t) => (&t.shape, &t.scales, &t.packed),
                None => (&[], &[], &[]),
            };
            w.write_u32::<LE>(dims.len() as u32)?;
            for &d in dims {
                w.write_u32::<LE>(d as u32)?;
            }
            w.write_u32::<LE>(scales.len() as u32)?;
            for &s in scales {
                w.write_f32::<LE>(s)?;
            }
            w.write_u32::<LE>(l.requant.len() as u32)?;
            for r in &l.requant {
                w.write_i32::<LE>(r.multiplier)?;
                w.write_u32::<LE>(r.shift)?;
                w.write_i32::<LE>(r.out_zero)?;
            }
            w.write_u32::<LE>(l.bias.len() as u32)?;
            for &b in &l.bias {
                w.write_i32::<LE>(b)?;
            }
            w.write_u32::<LE>(payload.len() as u32)?;
            w.write_all(payload)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated packed model: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a packed model (bad magic)".into()));
        }
        let n = r.read_u32::<LE>().map_err(fmt)?;
        let mut layers = Vec::new();
        for _ in 0..n {
            let id = r.read_u32::<LE>().map_err(fmt)?;
            let kind = *LayerKind::ALL
                .get(r.read_u8().map_err(fmt)? as usize)
                .ok_or_else(|| Error::Format(format!("layer {id}: unknown kind")))?;
            let wbits = r.read_u8().map_err(fmt)? as u32;
            let out_bits = Precision::try_from(r.read_u8().map_err(fmt)? as u32)?;
            let out_clip = match r.read_u8().map_err(fmt)? {
                0 => None,
                1 => Some(r.read_f64::<LE>().map_err(fmt)?),
                f => return Err(Error::Format(format!("layer {id}: bad flag {f}"))),
            };
            let count = |r: &mut R| -> Result<usize> {
                let c = r.read_u32::<LE>().map_err(fmt)? as usize;
                if c > 1 << 28 {
                    return Err(Error::Format(format!("layer {id}: implausible length {c}")));
                }
                Ok(c)
            };
            let nd = count(&mut r)?;
            let dims = (0..nd)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt)?;
            let ns = count(&mut r)?;
            let scales = (0..ns)
                .map(|_| r.read_f32::<LE>())
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt)?;
            let nr = count(&mut r)?;
            let mut requant = Vec::with_capacity(nr);
            for _ in 0..nr {
                requant.push(RequantParams {
                    multiplier: r.read_i32::<LE>().map_err(fmt)?,
                    shift: r.read_u32::<LE>().map_err(fmt)?,
                    out_zero: r.read_i32::<LE>().map_err(fmt)?,
                });
            }
            let nb = count(&mut r)?;
            let bias = (0..nb)
                .map(|_| r.read_i32::<LE>())
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt)?;
            let np = count(&mut r)?;
            let mut packed = vec![0u8; np];
            r.read_exact(&mut packed).map_err(fmt)?;
            let weight = if wbits == 0 {
                None
            } else {
                let t = QuantizedTensor {
                    bits: Precision::try_from(wbits)?,
                    packed,
                    shape: dims,
                    scales,
                    signed: true,
                };
                t.validate()?;
                Some(t)
            };
            layers.push(IntLayer {
                id,
                kind,
                weight,
                bias,
                requant,
                out_bits,
                out_clip,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(fmt)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(PackedModel { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

#[inline]
fn mac(acc: i32, a: i32, b: i32, layer: u32) -> Result<i32> {
    a.checked_mul(b)
        .and_then(|p| acc.checked_add(p))
        .ok_or(Error::AccumulatorOverflow { layer })
}

#[inline]
fn window(base: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let v = base + k;
    (v >= pad && v - pad < len).then(|| v - pad)
}

/// Execute one layer with integer arithmetic only (32-bit checked accumulation).
pub fn run_layer_int(
    layer: &LayerSpec,
    inputs: &[&IntActivation],
    il: &IntLayer,
) -> Result<IntOutput> {
    let (is, os) = (layer.input_shape, layer.output_shape);
    let id = layer.id;
    let need = match layer.kind {
        LayerKind::Input | LayerKind::Output => {
            return Err(Error::Unsupported(format!(
                "layer {id} ({}) has no integer kernel",
                layer.kind
            )))
        }
        LayerKind::AddResidual => 2,
        _ => 1,
    };
    if inputs.len() != need || inputs.iter().any(|x| x.shape != is) {
        return Err(Error::ModelMismatch(format!(
            "layer {id}: input tensors do not match"
        )));
    }
    let xs: Vec<Vec<i32>> = inputs.iter().map(|x| x.codes()).collect();
    let x = &xs[0];
    let mut acc = vec![0i64; os.numel()];
    match layer.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
            let w = il
                .weight
                .as_ref()
                .ok_or_else(|| Error::ModelMismatch(format!("layer {id} has no weights")))?;
            let wc = w.codes();
            let dw = layer.kind == LayerKind::DepthwiseConv2d;
            let (kh, kw, s, p) = (layer.kernel_h, layer.kernel_w, layer.stride, layer.padding);
            for o in 0..os.c {
                let ics = if dw { o..o + 1 } else { 0..is.c };
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut a = il.bias.get(o).copied().unwrap_or(0);
                        for ic in ics.clone() {
                            let wbase = if dw {
                                o * kh * kw
                            } else {
                                (o * is.c + ic) * kh * kw
                            };
                            for ky in 0..kh {
                                let Some(iy) = window(oy * s, ky, p, is.h) else {
                                    continue;
                                };
                                for kx in 0..kw {
                                    let Some(ix) = window(ox * s, kx, p, is.w) else {
                                        continue;
                                    };
                                    a = mac(
                                        a,
                                        x[(ic * is.h + iy) * is.w + ix],
                                        wc[wbase + ky * kw + kx],
                                        id,
                                    )?;
                                }
                            }
                        }
                        acc[(o * os.h + oy) * os.w + ox] = il.requant[o].apply(a as i64);
                    }
                }
            }
        }
        LayerKind::FullyConnected => {
            let w = il
                .weight
                .as_ref()
                .ok_or_else(|| Error::ModelMismatch(format!("layer {id} has no weights")))?;
            let wc = w.codes();
            let n = x.len();
            for o in 0..os.c {
                let mut a = il.bias.get(o).copied().unwrap_or(0);
                for i in 0..n {
                    a = mac(a, x[i], wc[o * n + i], id)?;
                }
                acc[o] = il.requant[o].apply(a as i64);
            }
        }
        LayerKind::AddResidual => {
            let (ra, rb) = (il.requant[0], il.requant[1]);
            for (i, v) in acc.iter_mut().enumerate() {
                *v = ra.apply(xs[0][i] as i64) + rb.apply(xs[1][i] as i64);
            }
        }
        LayerKind::AvgPool => {
            let (kh, kw, s, p) = (layer.kernel_h, layer.kernel_w, layer.stride, layer.padding);
            for c in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut a = 0i32;
                        for ky in 0..kh {
                            let Some(iy) = window(oy * s, ky, p, is.h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = window(ox * s, kx, p, is.w) else {
                                    continue;
                                };
                                a = mac(a, x[(c * is.h + iy) * is.w + ix], 1, id)?;
                            }
                        }
                        acc[(c * os.h + oy) * os.w + ox] = il.requant[0].apply(a as i64);
                    }
                }
            }
        }
        LayerKind::ReluClip => {
            for (v, &c) in acc.iter_mut().zip(x) {
                *v = il.requant[0].apply(c as i64);
            }
        }
        LayerKind::Input | LayerKind::Output => unreachable!(),
    }
    match il.out_range() {
        Some(range) => {
            let n = unsigned_max(il.out_bits.bits()) as i64;
            let codes: Vec<i32> = acc.iter().map(|&v| v.clamp(0, n) as i32).collect();
            Ok(IntOutput::Act(IntActivation::from_codes(
                id,
                il.out_bits,
                os,
                range,
                &codes,
            )?))
        }
        None => Ok(IntOutput::Logits(
            acc.iter()
                .map(|&v| v.clamp(i32::MIN as i64, i32::MAX as i64) as i32)
                .collect(),
        )),
    }
}

/// Every activation produced by an integer run, plus the final scores.
#[derive(Debug, Clone)]
pub struct IntRun {
    pub activations: BTreeMap<u32, IntActivation>,
    pub scores: Vec<i32>,
}

impl IntRun {
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Integer forward pass keeping every intermediate tensor.
pub fn run_network_int_full(
    g: &NetworkGraph,
    model: &PackedModel,
    image: &[f64],
) -> Result<IntRun> {
    model.check_graph(g)?;
    check_image(g, image)?;
    let mut acts: BTreeMap<u32, IntActivation> = BTreeMap::new();
    let mut logits: HashMap<u32, Vec<i32>> = HashMap::new();
    let mut scores = Vec::new();
    for (il, &id) in model.layers.iter().zip(g.topo_order()) {
        let l = g.layer(id);
        match l.kind {
            LayerKind::Input => {
                let range = il.out_range().expect("input is quantized");
                let a = IntActivation::encode(id, image, l.output_shape, range, il.out_bits)?;
                acts.insert(id, a);
            }
            LayerKind::Output => {
                let src = l.input_ids[0];
                scores = match logits.remove(&src) {
                    Some(s) => s,
                    None => acts[&src].codes(),
                };
            }
            _ => {
                let inputs: Vec<&IntActivation> = l.input_ids.iter().map(|t| &acts[t]).collect();
                match run_layer_int(l, &inputs, il)? {
                    IntOutput::Act(a) => {
                        acts.insert(id, a);
                    }
                    IntOutput::Logits(s) => {
                        logits.insert(id, s);
                    }
                }
            }
        }
    }
    Ok(IntRun {
        activations: acts,
        scores,
    })
}

/// Integer forward pass returning the class scores.
pub fn run_network_int(g: &NetworkGraph, model: &PackedModel, image: &[f64]) -> Result<Vec<i32>> {
    Ok(run_network_int_full(g, model, image)?.scores)
}

/// What to evaluate: an exported integer model or float weights with optional fake quantization.
pub enum Evaluator<'a> {
    Packed(&'a PackedModel),
    Float {
        model: &'a FloatModel,
        fq: FakeQuant,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub per_class: Vec<ClassStats>,
}

impl Evaluation {
    pub fn write_per_class_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for c in &self.per_class {
            wr.serialize(c)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Predicted class of every sample, in dataset order.
pub fn predict(g: &NetworkGraph, ev: &Evaluator<'_>, data: &Dataset) -> Result<Vec<usize>> {
    if data.image_shape() != g.input_layer().output_shape {
        return Err(Error::ModelMismatch(format!(
            "dataset images are {}, graph input is {}",
            data.image_shape(),
            g.input_layer().output_shape
        )));
    }
    match ev {
        Evaluator::Packed(m) => {
            m.check_graph(g)?;
            (0..data.len())
                .into_par_iter()
                .map(|i| run_network_int(g, m, data.image(i)).map(|s| argmax(&s)))
                .collect()
        }
        Evaluator::Float { model, fq } => {
            let plan = Plan::new(g, model, fq)?;
            Ok((0..data.len())
                .into_par_iter()
                .map(|i| argmax(plan.forward(data.image(i)).logits()))
                .collect())
        }
    }
}

/// Top-1 accuracy and per-class counts.
pub fn evaluate_accuracy(
    g: &NetworkGraph,
    ev: &Evaluator<'_>,
    data: &Dataset,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let pred = predict(g, ev, data)?;
    let mut count = vec![0usize; data.num_classes()];
    let mut correct = vec![0usize; data.num_classes()];
    for (i, &p) in pred.iter().enumerate() {
        let y = data.label(i);
        count[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let total: usize = correct.iter().sum();
    Ok(Evaluation {
        top1: total as f64 / data.len() as f64,
        per_class: (0..count.len())
            .map(|c| ClassStats {
                class: c,
                count: count[c],
                correct: correct[c],
                accuracy: if count[c] == 0 {
                    0.0
                } else {
                    correct[c] as f64 / count[c] as f64
                },
            })
            .collect(),
    })
}
