//! Reference oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mixq_core::data::{synthetic_shapes, Splits};
use mixq_core::graph::{load_graph, LayerKind, LayerSpec, NetworkGraph, Shape};
use mixq_core::inference::{run_network_int_full, PackedModel};
use mixq_core::memory::{
    enforce_ram_traced, enforce_rom_traced, FootprintOptions, MemoryBudget, Precision, QuantPolicy,
};
use mixq_core::nn::{cross_entropy, FakeQuant, FloatModel, Plan};
use mixq_core::qat::{self, TrainConfig};
use mixq_core::quant::{act_scale, round_half_away};
use mixq_core::Error;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn toy_graph() -> NetworkGraph {
    load_graph(fixture("toycnn_mnist.json")).unwrap()
}

pub fn mobilenet_graph() -> NetworkGraph {
    load_graph(fixture("mobilenet_v1_224_100.json")).unwrap()
}

// ---------------------------------------------------------------- memory

/// Independent restatement of the ROM formula, summed over the graph's layer list.
pub fn brute_rom(g: &NetworkGraph, p: &QuantPolicy, overhead: bool) -> u64 {
    let mut total = 0;
    for l in g.layers() {
        if !matches!(
            l.kind,
            LayerKind::Conv2d
                | LayerKind::DepthwiseConv2d
                | LayerKind::PointwiseConv2d
                | LayerKind::FullyConnected
        ) {
            continue;
        }
        let bits = p.weight_bits[&l.id].bits() as u64;
        total += (l.param_count * bits).div_ceil(8) + l.bias_count * 4;
        if overhead && bits < 32 {
            total += l.out_channels as u64 * 8;
        }
    }
    total
}

/// Classifier output that stays 32-bit: fed by an FC layer straight into `output`, used nowhere else.
fn raw_logits(g: &NetworkGraph) -> Option<u32> {
    let out = g.layers().iter().find(|l| l.kind == LayerKind::Output)?;
    let src = out.input_ids[0];
    let uses = g
        .layers()
        .iter()
        .flat_map(|l| l.input_ids.iter())
        .filter(|&&i| i == src)
        .count();
    (g.layer(src).kind == LayerKind::FullyConnected && uses == 1).then_some(src)
}

pub struct Simulation {
    pub live: Vec<(u32, BTreeSet<u32>)>,
    pub bytes: Vec<u64>,
    pub peak: u64,
}

/// Execute the schedule with explicit allocate/free: a tensor is allocated when its
/// producer runs and freed right after its last consumer (or its producer, if unused).
pub fn simulate(g: &NetworkGraph, p: Option<&QuantPolicy>) -> Simulation {
    let order = g.topo_order();
    let ids: BTreeSet<u32> = g.layers().iter().map(|l| l.id).collect();
    assert_eq!(
        order.iter().copied().collect::<BTreeSet<_>>(),
        ids,
        "schedule is not a permutation"
    );
    assert_eq!(order.len(), ids.len());
    let pos: HashMap<u32, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut remaining: HashMap<u32, usize> = HashMap::new();
    for l in g.layers() {
        for &s in &l.input_ids {
            assert!(
                pos[&s] < pos[&l.id],
                "layer {} scheduled before its input {s}",
                l.id
            );
            *remaining.entry(s).or_default() += 1;
        }
    }
    let logits = raw_logits(g);
    let size = |t: u32| -> u64 {
        let Some(p) = p else { return 0 };
        let bits = if Some(t) == logits {
            32
        } else {
            p.act_bits[&t].bits() as u64
        };
        (g.layer(t).output_shape.numel() as u64 * bits).div_ceil(8)
    };
    let mut allocated = BTreeSet::new();
    let mut sim = Simulation {
        live: Vec::new(),
        bytes: Vec::new(),
        peak: 0,
    };
    for &id in order {
        let l = g.layer(id);
        if l.kind != LayerKind::Output {
            allocated.insert(id);
        }
        let bytes: u64 = allocated.iter().map(|&t| size(t)).sum();
        sim.live.push((id, allocated.clone()));
        sim.bytes.push(bytes);
        sim.peak = sim.peak.max(bytes);
        for &s in &l.input_ids {
            let r = remaining.get_mut(&s).unwrap();
            *r -= 1;
            if *r == 0 {
                allocated.remove(&s);
            }
        }
        if remaining.get(&id).copied().unwrap_or(0) == 0 {
            allocated.remove(&id);
        }
    }
    sim
}

pub fn random_policy<R: Rng + ?Sized>(
    rng: &mut R,
    g: &NetworkGraph,
    frozen_prob: f64,
) -> QuantPolicy {
    let mut p = QuantPolicy::uniform(g, Precision::Int8, Precision::Int8);
    for (id, b) in p.weight_bits.iter_mut() {
        *b = *Precision::QUANTIZED.choose(rng).unwrap();
        if rng.random_bool(frozen_prob) {
            p.frozen_weights.insert(*id);
        }
    }
    for (id, b) in p.act_bits.iter_mut() {
        *b = *Precision::QUANTIZED.choose(rng).unwrap();
        if rng.random_bool(frozen_prob) {
            p.frozen.insert(*id);
        }
    }
    p
}

fn demotable(p: Precision) -> Option<Precision> {
    match p {
        Precision::Fp32 => Some(Precision::Int8),
        Precision::Int8 => Some(Precision::Int4),
        Precision::Int4 => Some(Precision::Int2),
        Precision::Int2 => None,
    }
}

/// Greedy reference: demote the largest non-frozen weight tensor (ties: higher precision, then lower id).
pub fn reference_enforce_rom(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
    overhead: bool,
) -> Option<QuantPolicy> {
    let mut p = p.clone();
    while brute_rom(g, &p, overhead) > b.rom_bytes {
        let (_, _, _, id) = p
            .weight_bits
            .iter()
            .filter(|(id, bits)| !p.frozen_weights.contains(id) && demotable(**bits).is_some())
            .map(|(&id, &bits)| {
                let bytes = (g.layer(id).param_count * bits.bits() as u64).div_ceil(8);
                (bytes, bits.bits(), std::cmp::Reverse(id), id)
            })
            .max()?;
        let bits = p.weight_bits.get_mut(&id).unwrap();
        *bits = demotable(*bits).unwrap();
    }
    Some(p)
}

/// Greedy reference for RAM: candidates are the tensors live at the first step reaching the peak.
pub fn reference_enforce_ram(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
) -> Option<QuantPolicy> {
    let mut p = p.clone();
    loop {
        let sim = simulate(g, Some(&p));
        if sim.peak <= b.ram_bytes {
            return Some(p);
        }
        let step = sim.bytes.iter().position(|&x| x == sim.peak).unwrap();
        let (_, _, _, t) = sim.live[step]
            .1
            .iter()
            .filter_map(|t| p.act_bits.get(t).map(|bits| (*t, *bits)))
            .filter(|(t, bits)| !p.frozen.contains(t) && demotable(*bits).is_some())
            .map(|(t, bits)| {
                let bytes =
                    (g.layer(t).output_shape.numel() as u64 * bits.bits() as u64).div_ceil(8);
                (bytes, bits.bits(), std::cmp::Reverse(t), t)
            })
            .max()?;
        let bits = p.act_bits.get_mut(&t).unwrap();
        *bits = demotable(*bits).unwrap();
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Run both enforcers and check them against the references: same result (or both
/// infeasible), at most two demotions per tensor, budget met, frozen tensors untouched,
/// no bitwidth raised, the other tensor family unchanged.
pub fn check_enforcement(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
) -> Result<(), String> {
    let tensors = p.weight_bits.len() + p.act_bits.len();
    let opts = FootprintOptions {
        include_requant_overhead: true,
    };
    match (
        enforce_rom_traced(g, p, b, opts),
        reference_enforce_rom(g, p, b, true),
    ) {
        (Ok((q, trace)), Some(expected)) => {
            ensure!(q == expected, "rom: {q:?} vs reference {expected:?}");
            ensure!(trace.len() <= 2 * tensors, "rom: {} demotions", trace.len());
            ensure!(brute_rom(g, &q, true) <= b.rom_bytes, "rom: over budget");
            for (id, bits) in &q.weight_bits {
                ensure!(*bits <= p.weight_bits[id], "rom: weight {id} raised");
                ensure!(
                    !p.frozen_weights.contains(id) || *bits == p.weight_bits[id],
                    "rom: frozen weight {id} touched"
                );
            }
            ensure!(q.act_bits == p.act_bits, "rom: activations touched");
        }
        (Err(Error::Infeasible(_)), None) => {}
        (got, want) => {
            return Err(format!(
                "rom: implementation {:?} vs reference {want:?}",
                got.map(|x| x.1)
            ))
        }
    }
    match (enforce_ram_traced(g, p, b), reference_enforce_ram(g, p, b)) {
        (Ok((q, trace)), Some(expected)) => {
            ensure!(q == expected, "ram: {q:?} vs reference {expected:?}");
            ensure!(trace.len() <= 2 * tensors, "ram: {} demotions", trace.len());
            ensure!(
                simulate(g, Some(&q)).peak <= b.ram_bytes,
                "ram: over budget"
            );
            for (id, bits) in &q.act_bits {
                ensure!(*bits <= p.act_bits[id], "ram: tensor {id} raised");
                ensure!(
                    !p.frozen.contains(id) || *bits == p.act_bits[id],
                    "ram: frozen tensor {id} touched"
                );
            }
            ensure!(q.weight_bits == p.weight_bits, "ram: weights touched");
        }
        (Err(Error::Infeasible(_)), None) => {}
        (got, want) => {
            return Err(format!(
                "ram: implementation {:?} vs reference {want:?}",
                got.map(|x| x.1)
            ))
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- graphs

pub const COMPUTE_KINDS: [LayerKind; 7] = [
    LayerKind::Conv2d,
    LayerKind::DepthwiseConv2d,
    LayerKind::PointwiseConv2d,
    LayerKind::FullyConnected,
    LayerKind::AddResidual,
    LayerKind::AvgPool,
    LayerKind::ReluClip,
];

/// Layer spec with derived output shape, weight count and one bias per output channel.
pub fn spec(
    id: u32,
    kind: LayerKind,
    inputs: Vec<u32>,
    inp: Shape,
    out_c: usize,
    k: usize,
    s: usize,
    p: usize,
) -> LayerSpec {
    let sp = |n: usize| (n + 2 * p - k) / s + 1;
    let out = match kind {
        LayerKind::Conv2d | LayerKind::PointwiseConv2d => Shape::new(out_c, sp(inp.h), sp(inp.w)),
        LayerKind::DepthwiseConv2d | LayerKind::AvgPool => Shape::new(inp.c, sp(inp.h), sp(inp.w)),
        LayerKind::FullyConnected => Shape::new(out_c, 1, 1),
        _ => inp,
    };
    let mut l = LayerSpec {
        id,
        kind,
        input_ids: inputs,
        out_channels: out.c,
        kernel_h: k,
        kernel_w: k,
        stride: s,
        padding: p,
        input_shape: inp,
        output_shape: out,
        param_count: 0,
        bias_count: 0,
    };
    l.param_count = l.expected_param_count();
    if kind.is_weighted() {
        l.bias_count = out.c as u64;
    }
    l
}

/// `input -> [layer under test] -> relu_clip -> output`; the residual case adds the input
/// to a relu_clip of itself. The trailing relu_clip keeps every tensor quantized.
pub fn single_layer_graph<R: Rng + ?Sized>(rng: &mut R, kind: LayerKind) -> NetworkGraph {
    let c = rng.random_range(1..=4);
    let h = rng.random_range(3..=8);
    let w = rng.random_range(3..=8);
    let inp = Shape::new(c, h, w);
    let mut layers = vec![spec(0, LayerKind::Input, vec![], inp, c, 0, 1, 0)];
    let test = match kind {
        LayerKind::Conv2d => {
            let k = *[1, 3].choose(rng).unwrap();
            spec(
                1,
                kind,
                vec![0],
                inp,
                rng.random_range(1..=6),
                k,
                rng.random_range(1..=2),
                rng.random_range(0..=k / 2),
            )
        }
        LayerKind::DepthwiseConv2d => spec(1, kind, vec![0], inp, c, 3, rng.random_range(1..=2), 1),
        LayerKind::PointwiseConv2d => spec(
            1,
            kind,
            vec![0],
            inp,
            rng.random_range(1..=6),
            1,
            rng.random_range(1..=2),
            0,
        ),
        LayerKind::FullyConnected => spec(1, kind, vec![0], inp, rng.random_range(2..=10), 0, 1, 0),
        LayerKind::AvgPool => {
            let k = rng.random_range(2..=h.min(w).min(3));
            spec(1, kind, vec![0], inp, c, k, k, 0)
        }
        LayerKind::ReluClip => spec(1, kind, vec![0], inp, c, 0, 1, 0),
        LayerKind::AddResidual => {
            layers.push(spec(1, LayerKind::ReluClip, vec![0], inp, c, 0, 1, 0));
            spec(2, kind, vec![0, 1], inp, c, 0, 1, 0)
        }
        other => panic!("{other} is not a compute kind"),
    };
    let tid = test.id;
    let tshape = test.output_shape;
    layers.push(test);
    layers.push(spec(
        tid + 1,
        LayerKind::ReluClip,
        vec![tid],
        tshape,
        tshape.c,
        0,
        1,
        0,
    ));
    layers.push(spec(
        tid + 2,
        LayerKind::Output,
        vec![tid + 1],
        tshape,
        tshape.c,
        0,
        1,
        0,
    ));
    NetworkGraph::new(28, 1.0, layers).unwrap()
}

/// FC chain `input(1000) -> fc -> fc ...` without biases; layer `i` holds `params[i]` weights.
pub fn chain_graph(params: &[u64]) -> NetworkGraph {
    let mut inp = Shape::new(1000, 1, 1);
    let mut layers = vec![spec(0, LayerKind::Input, vec![], inp, 1000, 0, 1, 0)];
    for (i, &n) in params.iter().enumerate() {
        let out = (n / inp.numel() as u64) as usize;
        let mut l = spec(
            i as u32 + 1,
            LayerKind::FullyConnected,
            vec![i as u32],
            inp,
            out,
            0,
            1,
            0,
        );
        l.bias_count = 0;
        inp = l.output_shape;
        layers.push(l);
    }
    let last = params.len() as u32;
    layers.push(spec(
        last + 1,
        LayerKind::Output,
        vec![last],
        inp,
        inp.c,
        0,
        1,
        0,
    ));
    NetworkGraph::new(1, 1.0, layers).unwrap()
}

/// He-normal weights, small random biases and random clipping bounds.
pub fn random_model<R: Rng + ?Sized>(
    rng: &mut R,
    g: &NetworkGraph,
    clip_lo: f64,
    clip_hi: f64,
) -> FloatModel {
    let mut m = FloatModel::init(g, rng);
    let n = Normal::new(0.0, 0.2).unwrap();
    for p in m.params.values_mut() {
        for b in p.bias.iter_mut() {
            *b = n.sample(rng);
        }
    }
    for c in m.clips.values_mut() {
        *c = rng.random_range(clip_lo..clip_hi);
    }
    m
}

pub fn random_image<R: Rng + ?Sized>(rng: &mut R, s: Shape) -> Vec<f64> {
    (0..s.numel()).map(|_| rng.random::<f64>()).collect()
}

pub fn uniform_policy(g: &NetworkGraph, wbits: u32, abits: u32) -> QuantPolicy {
    QuantPolicy::uniform(
        g,
        Precision::try_from(wbits).unwrap(),
        Precision::try_from(abits).unwrap(),
    )
}

/// Compare every activation code of the integer path with the fake-quant float path.
/// Returns `(codes compared, codes that differ)`.
pub fn code_mismatches(
    g: &NetworkGraph,
    model: &FloatModel,
    policy: &QuantPolicy,
    image: &[f64],
) -> (usize, usize) {
    let packed = PackedModel::build(g, model, policy).unwrap();
    let run = run_network_int_full(g, &packed, image).unwrap();
    let plan = Plan::new(g, model, &FakeQuant::from_policy(policy)).unwrap();
    let trace = plan.forward(image);
    let (mut compared, mut differ) = (0, 0);
    for (pos, id) in plan.step_ids().into_iter().enumerate() {
        let Some(act) = run.activations.get(&id) else {
            continue;
        };
        let bits = policy.act_bits[&id].bits();
        let s = act_scale(model.clips[&id], bits);
        let int_codes = act.codes();
        assert_eq!(int_codes.len(), trace.out[pos].len());
        for (&ci, &v) in int_codes.iter().zip(&trace.out[pos]) {
            compared += 1;
            if ci != round_half_away(v / s) as i32 {
                differ += 1;
            }
        }
    }
    (compared, differ)
}

// ---------------------------------------------------------------- gradients

/// `input 2x6x6 -> conv 2ch -> [kind] -> fc 4 -> output`; the residual case adds the
/// conv output back to the input.
pub fn gradient_graph(kind: LayerKind) -> NetworkGraph {
    let inp = Shape::new(2, 6, 6);
    let conv = spec(1, LayerKind::Conv2d, vec![0], inp, 2, 3, 1, 1);
    let a = conv.output_shape;
    let test = match kind {
        LayerKind::Conv2d => spec(2, kind, vec![1], a, 3, 3, 1, 1),
        LayerKind::DepthwiseConv2d => spec(2, kind, vec![1], a, 2, 3, 2, 1),
        LayerKind::PointwiseConv2d => spec(2, kind, vec![1], a, 3, 1, 1, 0),
        LayerKind::FullyConnected => spec(2, kind, vec![1], a, 5, 0, 1, 0),
        LayerKind::AddResidual => spec(2, kind, vec![0, 1], a, 2, 0, 1, 0),
        LayerKind::AvgPool => spec(2, kind, vec![1], a, 2, 2, 2, 0),
        LayerKind::ReluClip => spec(2, kind, vec![1], a, 2, 0, 1, 0),
        other => panic!("{other} is not a compute kind"),
    };
    let b = test.output_shape;
    let fc = spec(3, LayerKind::FullyConnected, vec![2], b, 4, 0, 1, 0);
    let layers = vec![
        spec(0, LayerKind::Input, vec![], inp, 2, 0, 1, 0),
        conv,
        test,
        fc,
        spec(
            4,
            LayerKind::Output,
            vec![3],
            Shape::new(4, 1, 1),
            4,
            0,
            1,
            0,
        ),
    ];
    NetworkGraph::new(6, 1.0, layers).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradPoint {
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradPoint {
    pub const RTOL: f64 = 1e-3;
    /// Absolute slack for vanishing gradients, where the 30-bit rounding noise of the
    /// finite difference (up to a few 1e-6) dominates.
    pub const ATOL: f64 = 1e-5;

    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
            / self
                .analytic
                .abs()
                .max(self.numeric.abs())
                .max(f64::MIN_POSITIVE)
    }

    /// `|analytic - numeric| <= ATOL + RTOL * max(|analytic|, |numeric|)`.
    pub fn agrees(&self) -> bool {
        (self.analytic - self.numeric).abs()
            <= Self::ATOL + Self::RTOL * self.analytic.abs().max(self.numeric.abs())
    }
}

/// Fake-quantization width of the finite-difference check, close to the unrounded STE function.
pub const FD_BITS: u32 = 30;
const FD_STEP: f64 = 1e-3;

fn regions(plan: &Plan, g: &NetworkGraph, m: &FloatModel, image: &[f64]) -> Vec<Vec<u8>> {
    let tr = plan.forward(image);
    plan.step_ids()
        .iter()
        .zip(&tr.pre)
        .map(|(id, z)| match m.clips.get(id) {
            Some(&c) if g.activation_tensors().contains(id) => z
                .iter()
                .map(|&v| {
                    if v < 0.0 {
                        0
                    } else if v < c {
                        1
                    } else {
                        2
                    }
                })
                .collect(),
            _ => Vec::new(),
        })
        .collect()
}

/// Analytic gradients against central differences on sampled weights, biases and every
/// clip. Points whose perturbation moves any pre-activation across 0 or a clip are skipped.
pub fn gradient_check<R: Rng + ?Sized>(
    rng: &mut R,
    g: &NetworkGraph,
    samples_per_layer: usize,
) -> (Vec<GradPoint>, usize) {
    let model = random_model(rng, g, 0.8, 2.5);
    let image = random_image(rng, g.input_layer().output_shape);
    let label = 1;
    let fq = FakeQuant::uniform(g, FD_BITS);
    let (_, grads) = mixq_core::nn::batch_loss_grad(g, &model, &fq, &[&image], &[label]).unwrap();
    let base_plan = Plan::new(g, &model, &fq).unwrap();
    let base_regions = regions(&base_plan, g, &model, &image);

    let loss = |m: &FloatModel| -> (f64, Vec<Vec<u8>>) {
        let plan = Plan::new(g, m, &fq).unwrap();
        let l = cross_entropy(plan.forward(&image).logits(), label).0;
        (l, regions(&plan, g, m, &image))
    };

    type Slot = Box<dyn Fn(&mut FloatModel) -> &mut f64>;
    let mut targets: Vec<(String, Slot, f64, f64)> = Vec::new();
    for id in g.weighted_layers() {
        let p = &model.params[&id];
        for _ in 0..samples_per_layer {
            let k = rng.random_range(0..p.weight.len());
            let a = grads.params[&id].weight[k];
            targets.push((
                format!("layer {id} weight {k}"),
                Box::new(move |m| &mut m.params.get_mut(&id).unwrap().weight[k]),
                a,
                FD_STEP,
            ));
        }
        for k in 0..p.bias.len().min(3) {
            let a = grads.params[&id].bias[k];
            targets.push((
                format!("layer {id} bias {k}"),
                Box::new(move |m| &mut m.params.get_mut(&id).unwrap().bias[k]),
                a,
                FD_STEP,
            ));
        }
    }
    for &t in model.clips.keys() {
        let a = grads.clips[&t];
        targets.push((
            format!("clip of tensor {t}"),
            Box::new(move |m| m.clips.get_mut(&t).unwrap()),
            a,
            FD_STEP,
        ));
    }

    let mut points = Vec::new();
    let mut skipped = 0;
    for (what, slot, analytic, h) in targets {
        let mut plus = model.clone();
        *slot(&mut plus) += h;
        let mut minus = model.clone();
        *slot(&mut minus) -= h;
        let (lp, rp) = loss(&plus);
        let (lm, rm) = loss(&minus);
        if rp != base_regions || rm != base_regions {
            skipped += 1;
            continue;
        }
        points.push(GradPoint {
            what,
            analytic,
            numeric: (lp - lm) / (2.0 * h),
        });
    }
    (points, skipped)
}

// ---------------------------------------------------------------- toy pipeline

pub fn toy_splits() -> Splits {
    synthetic_shapes(6000, 1000, 1)
}

pub fn pretrain_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        seed: 1,
        ..TrainConfig::default()
    }
}

pub fn pretrain_toy(g: &NetworkGraph, s: &Splits) -> FloatModel {
    qat::pretrain(g, &s.train, &s.test, &pretrain_config(), 256)
        .unwrap()
        .model
}

pub fn policy_bits(p: &QuantPolicy) -> (BTreeMap<u32, u32>, BTreeMap<u32, u32>) {
    (
        p.weight_bits.iter().map(|(&k, v)| (k, v.bits())).collect(),
        p.act_bits.iter().map(|(&k, v)| (k, v.bits())).collect(),
    )
}
