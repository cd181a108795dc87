mod common;

use common::*;
use mixq_core::graph::random::{random_graph, RandomGraphOptions};
use mixq_core::graph::LayerKind;
use mixq_core::inference::{
    evaluate_accuracy, run_network_int, run_network_int_full, Evaluator, PackedModel,
};
use mixq_core::memory::{Precision, QuantPolicy};
use mixq_core::nn::{argmax, run_network_float, FakeQuant};
use mixq_core::quant::calibrate_act_ranges;
use proptest::prelude::*;
use rand::Rng;

const PAIRS: [(u32, u32); 9] = [
    (2, 2),
    (2, 4),
    (2, 8),
    (4, 2),
    (4, 4),
    (4, 8),
    (8, 2),
    (8, 4),
    (8, 8),
];

#[test]
fn single_layers_match_for_every_kind_and_bit_pair() {
    let mut rng = rng(11);
    for (k, &kind) in COMPUTE_KINDS.iter().enumerate() {
        for &(wb, ab) in &PAIRS {
            for _ in 0..3 {
                let g = single_layer_graph(&mut rng, kind);
                let m = random_model(&mut rng, &g, 0.3, 3.0);
                let img = random_image(&mut rng, g.input_layer().output_shape);
                let (n, bad) = code_mismatches(&g, &m, &uniform_policy(&g, wb, ab), &img);
                assert!(n > 0);
                assert_eq!(
                    bad, 0,
                    "{kind} (case {k}) w{wb}/a{ab}: {bad} of {n} codes differ"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_networks_match_layer_by_layer(seed in any::<u64>(), classifier in any::<bool>()) {
        let mut rng = rng(seed);
        let opts = RandomGraphOptions { max_compute: 5, classifier, ..Default::default() };
        let g = random_graph(&mut rng, &opts);
        let m = random_model(&mut rng, &g, 0.3, 3.0);
        let mut p = QuantPolicy::uniform(&g, Precision::Int8, Precision::Int8);
        for b in p.weight_bits.values_mut().chain(p.act_bits.values_mut()) {
            *b = Precision::QUANTIZED[rng.random_range(0..3)];
        }
        let img = random_image(&mut rng, g.input_layer().output_shape);
        let (_, bad) = code_mismatches(&g, &m, &p, &img);
        prop_assert_eq!(bad, 0);
        let zero = vec![0.0; img.len()];
        let (_, bad) = code_mismatches(&g, &m, &p, &zero);
        prop_assert_eq!(bad, 0);
    }

    #[test]
    fn integer_inference_is_deterministic(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let g = random_graph(&mut rng, &RandomGraphOptions { classifier: true, ..Default::default() });
        let m = random_model(&mut rng, &g, 0.3, 3.0);
        let packed = PackedModel::build(&g, &m, &uniform_policy(&g, 4, 8)).unwrap();
        let img = random_image(&mut rng, g.input_layer().output_shape);
        prop_assert_eq!(run_network_int(&g, &packed, &img).unwrap(), run_network_int(&g, &packed, &img).unwrap());
    }
}

#[test]
fn codes_stay_in_range_at_clip_boundaries() {
    let mut rng = rng(12);
    for &kind in &COMPUTE_KINDS {
        let g = single_layer_graph(&mut rng, kind);
        let m = random_model(&mut rng, &g, 0.3, 3.0);
        let n = g.input_layer().output_shape.numel();
        let clip0 = m.clips[&g.input_layer().id];
        // values straddling zero and the input clip, including far outside it
        let adversarial: Vec<f64> = (0..n)
            .map(|i| [0.0, 1.0, clip0, clip0 * 0.999_999, 1e-12][i % 5])
            .collect();
        for &(wb, ab) in &PAIRS {
            let p = uniform_policy(&g, wb, ab);
            let packed = PackedModel::build(&g, &m, &p).unwrap();
            let run = run_network_int_full(&g, &packed, &adversarial).unwrap();
            for (id, act) in &run.activations {
                let hi = (1i32 << p.act_bits[id].bits()) - 1;
                assert!(
                    act.codes().iter().all(|&c| (0..=hi).contains(&c)),
                    "tensor {id} of {kind}"
                );
            }
        }
    }
}

#[test]
fn toy_fixture_argmax_matches_fake_quant() {
    let g = toy_graph();
    let mut rng = rng(13);
    let data = mixq_core::data::synthetic_shapes(100, 200, 3);
    let mut m = random_model(&mut rng, &g, 1.0, 1.1);
    for (t, r) in calibrate_act_ranges(&g, &m, &data.train).unwrap() {
        m.clips.insert(t, r.clip_max);
    }
    for &(wb, ab) in &PAIRS {
        let p = uniform_policy(&g, wb, ab);
        let packed = PackedModel::build(&g, &m, &p).unwrap();
        let fq = FakeQuant::from_policy(&p);
        for i in 0..data.test.len() {
            let img = data.test.image(i);
            let int = argmax(&run_network_int(&g, &packed, img).unwrap());
            let float = argmax(&run_network_float(&g, &m, img, Some(&fq)).unwrap());
            assert_eq!(int, float, "image {i}, w{wb}/a{ab}");
        }
        let a = evaluate_accuracy(&g, &Evaluator::Packed(&packed), &data.test)
            .unwrap()
            .top1;
        let b = evaluate_accuracy(&g, &Evaluator::Float { model: &m, fq }, &data.test)
            .unwrap()
            .top1;
        assert_eq!(a, b);
    }
}

#[test]
fn zero_image_scores_follow_bias_propagation() {
    let g = toy_graph();
    let mut rng = rng(14);
    let m = random_model(&mut rng, &g, 0.5, 2.0);
    let p = uniform_policy(&g, 8, 8);
    let packed = PackedModel::build(&g, &m, &p).unwrap();
    let zero = vec![0.0; g.input_layer().output_shape.numel()];
    let (n, bad) = code_mismatches(&g, &m, &p, &zero);
    assert!(n > 0 && bad == 0);
    let a = run_network_int(&g, &packed, &zero).unwrap();
    assert_eq!(a, run_network_int(&g, &packed, &zero).unwrap());
    // With every bias zero a zero image stays zero all the way through.
    let mut nobias = m.clone();
    for p in nobias.params.values_mut() {
        p.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let packed = PackedModel::build(&g, &nobias, &p).unwrap();
    assert!(run_network_int(&g, &packed, &zero)
        .unwrap()
        .iter()
        .all(|&s| s == 0));
}

#[test]
fn mismatched_model_is_rejected() {
    let g = toy_graph();
    let mut rng = rng(15);
    let other = single_layer_graph(&mut rng, LayerKind::Conv2d);
    let m = random_model(&mut rng, &other, 0.5, 2.0);
    let packed = PackedModel::build(&other, &m, &uniform_policy(&other, 8, 8)).unwrap();
    assert!(packed.check_graph(&g).is_err());
    let img = vec![0.0; g.input_layer().output_shape.numel()];
    assert!(run_network_int(&g, &packed, &img).is_err());
    assert!(PackedModel::build(&g, &m, &uniform_policy(&g, 8, 8)).is_err());
}

#[test]
fn packed_model_file_roundtrip() {
    let g = toy_graph();
    let mut rng = rng(16);
    let m = random_model(&mut rng, &g, 0.5, 2.0);
    let packed = PackedModel::build(&g, &m, &uniform_policy(&g, 2, 4)).unwrap();
    let mut bytes = Vec::new();
    packed.write_to(&mut bytes).unwrap();
    let back = PackedModel::read_from(bytes.as_slice()).unwrap();
    assert_eq!(back, packed);
    assert!(PackedModel::read_from(&bytes[..bytes.len() - 3]).is_err());
}
