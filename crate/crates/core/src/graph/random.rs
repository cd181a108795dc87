//! Random valid graphs for property tests and fuzzing.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{LayerKind, LayerSpec, NetworkGraph, Shape};

#[derive(Debug, Clone)]
pub struct RandomGraphOptions {
    /// Compute layers between `input` and `output` (inclusive range).
    pub min_compute: usize,
    pub max_compute: usize,
    pub max_channels: usize,
    pub max_spatial: usize,
    /// Finish with a fully connected classifier feeding `output`.
    pub classifier: bool,
    /// Shuffle ids so that file order and id order differ from the schedule.
    pub shuffle_ids: bool,
}

impl Default for RandomGraphOptions {
    fn default() -> Self {
        RandomGraphOptions {
            min_compute: 1,
            max_compute: 6,
            max_channels: 4,
            max_spatial: 6,
            classifier: false,
            shuffle_ids: true,
        }
    }
}

fn base(id: u32, kind: LayerKind, inputs: Vec<u32>, inp: Shape, out: Shape) -> LayerSpec {
    LayerSpec {
        id,
        kind,
        input_ids: inputs,
        out_channels: out.c,
        kernel_h: 0,
        kernel_w: 0,
        stride: 1,
        padding: 0,
        input_shape: inp,
        output_shape: out,
        param_count: 0,
        bias_count: 0,
    }
}

fn spatial(len: usize, k: usize, s: usize, p: usize) -> usize {
    (len + 2 * p - k) / s + 1
}

pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, opts: &RandomGraphOptions) -> NetworkGraph {
    let n_compute = rng.random_range(opts.min_compute..=opts.max_compute);
    let total = n_compute + 2 + usize::from(opts.classifier);
    let mut ids: Vec<u32> = (0..total as u32).collect();
    if opts.shuffle_ids {
        ids.shuffle(rng);
    }
    let mut next = ids.into_iter();

    let side = rng.random_range(2..=opts.max_spatial.max(2));
    let input_shape = Shape::new(rng.random_range(1..=opts.max_channels), side, side);
    let input_id = next.next().unwrap();
    let mut layers = vec![base(
        input_id,
        LayerKind::Input,
        vec![],
        input_shape,
        input_shape,
    )];
    // (tensor id, shape) for every produced tensor so far
    let mut tensors = vec![(input_id, input_shape)];

    for _ in 0..n_compute {
        let id = next.next().unwrap();
        let &(src, inp) = if rng.random_bool(0.7) {
            tensors.last().unwrap()
        } else {
            &tensors[rng.random_range(0..tensors.len())]
        };
        let pick = rng.random_range(0..6);
        let layer = match pick {
            0 | 1 => {
                let k = if inp.h >= 3 && rng.random_bool(0.7) {
                    3
                } else {
                    1
                };
                let p = if k == 3 { 1 } else { 0 };
                let s = if inp.h >= 4 && rng.random_bool(0.3) {
                    2
                } else {
                    1
                };
                let oc = rng.random_range(1..=opts.max_channels);
                let out = Shape::new(oc, spatial(inp.h, k, s, p), spatial(inp.w, k, s, p));
                let mut l = base(id, LayerKind::Conv2d, vec![src], inp, out);
                l.kernel_h = k;
                l.kernel_w = k;
                l.stride = s;
                l.padding = p;
                l.param_count = (inp.c * oc * k * k) as u64;
                l.bias_count = oc as u64;
                l
            }
            2 => {
                let s = if inp.h >= 4 && rng.random_bool(0.3) {
                    2
                } else {
                    1
                };
                let out = Shape::new(inp.c, spatial(inp.h, 3, s, 1), spatial(inp.w, 3, s, 1));
                let mut l = base(id, LayerKind::DepthwiseConv2d, vec![src], inp, out);
                l.kernel_h = 3;
                l.kernel_w = 3;
                l.stride = s;
                l.padding = 1;
                l.param_count = (inp.c * 9) as u64;
                l.bias_count = inp.c as u64;
                l
            }
            3 => {
                let oc = rng.random_range(1..=opts.max_channels);
                let out = Shape::new(oc, inp.h, inp.w);
                let mut l = base(id, LayerKind::PointwiseConv2d, vec![src], inp, out);
                l.kernel_h = 1;
                l.kernel_w = 1;
                l.param_count = (inp.c * oc) as u64;
                l.bias_count = oc as u64;
                l
            }
            4 => {
                let same: Vec<u32> = tensors
                    .iter()
                    .filter(|(t, s)| *s == inp && *t != src)
                    .map(|(t, _)| *t)
                    .collect();
                if let Some(&other) = same.choose(rng) {
                    let inputs = if rng.random_bool(0.5) {
                        vec![src, other]
                    } else {
                        vec![other, src]
                    };
                    base(id, LayerKind::AddResidual, inputs, inp, inp)
                } else {
                    base(id, LayerKind::ReluClip, vec![src], inp, inp)
                }
            }
            _ => {
                if rng.random_bool(0.5) && inp.h >= 2 {
                    let k = 2.min(inp.h).min(inp.w);
                    let out = Shape::new(inp.c, spatial(inp.h, k, k, 0), spatial(inp.w, k, k, 0));
                    let mut l = base(id, LayerKind::AvgPool, vec![src], inp, out);
                    l.kernel_h = k;
                    l.kernel_w = k;
                    l.stride = k;
                    l
                } else {
                    base(id, LayerKind::ReluClip, vec![src], inp, inp)
                }
            }
        };
        tensors.push((id, layer.output_shape));
        layers.push(layer);
    }

    let (mut last, mut last_shape) = *tensors.last().unwrap();
    if opts.classifier {
        let id = next.next().unwrap();
        let oc = rng.random_range(2..=opts.max_channels.max(2));
        let out = Shape::new(oc, 1, 1);
        let mut l = base(id, LayerKind::FullyConnected, vec![last], last_shape, out);
        l.param_count = (last_shape.numel() * oc) as u64;
        l.bias_count = oc as u64;
        layers.push(l);
        last = id;
        last_shape = out;
    }
    let out_id = next.next().unwrap();
    layers.push(base(
        out_id,
        LayerKind::Output,
        vec![last],
        last_shape,
        last_shape,
    ));
    if opts.shuffle_ids {
        layers.shuffle(rng);
    }
    NetworkGraph::new(side as u32, 1.0, layers).expect("generator emits valid graphs")
}
