mod common;

use common::*;
use mixq_core::quant::{fake_quant_act_backward, fake_quant_act_bits};
use proptest::prelude::*;

#[test]
fn backward_matches_central_differences_on_every_kind() {
    for (i, &kind) in COMPUTE_KINDS.iter().enumerate() {
        let g = gradient_graph(kind);
        let mut rng = rng(100 + i as u64);
        let (points, skipped) = gradient_check(&mut rng, &g, 12);
        assert!(
            points.len() >= 20,
            "{kind}: only {} usable points ({skipped} skipped)",
            points.len()
        );
        for p in &points {
            assert!(
                p.agrees(),
                "{kind}: {} analytic {} numeric {}",
                p.what,
                p.analytic,
                p.numeric
            );
        }
        assert!(
            points.iter().any(|p| p.analytic.abs() > 1e-4),
            "{kind}: every gradient vanished"
        );
    }
}

proptest! {
    #[test]
    fn act_fake_quant_gradient_matches_differences(
        xs in prop::collection::vec(-1.0f64..3.0, 1..40),
        dys in prop::collection::vec(-1.0f64..1.0, 40),
        clip in 0.5f64..2.5,
    ) {
        // y = fq(x) at 30 bits is clamp(x, 0, clip) up to ~1e-9; probe away from the kinks.
        let h = 1e-4;
        let bits = 30;
        let dy = &dys[..xs.len()];
        let (dx, dclip) = fake_quant_act_backward(&xs, dy, clip);
        let loss = |x: &[f64], c: f64| -> f64 {
            fake_quant_act_bits(x, c, bits).unwrap().iter().zip(dy).map(|(a, b)| a * b).sum()
        };
        for i in 0..xs.len() {
            if xs[i].abs() < 2.0 * h || (xs[i] - clip).abs() < 2.0 * h {
                continue;
            }
            let mut p = xs.clone();
            p[i] += h;
            let mut m = xs.clone();
            m[i] -= h;
            let fd = (loss(&p, clip) - loss(&m, clip)) / (2.0 * h);
            prop_assert!((fd - dx[i]).abs() <= 1e-4 * dx[i].abs().max(1.0), "x {}: {} vs {}", xs[i], fd, dx[i]);
        }
        if xs.iter().all(|&x| (x - clip).abs() >= 2.0 * h) {
            let fd = (loss(&xs, clip + h) - loss(&xs, clip - h)) / (2.0 * h);
            prop_assert!((fd - dclip).abs() <= 1e-4 * dclip.abs().max(1.0), "clip: {} vs {}", fd, dclip);
        }
    }
}
