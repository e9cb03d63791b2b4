use intervalrec::embedders::{normalize_interval, IntervalEmbedder};
use intervalrec::seed;
use intervalrec::tensor::Matrix;
use proptest::prelude::*;

/// Straightforward scalar oracle for the two-layer network.
fn oracle(e: &IntervalEmbedder, t: f64) -> Vec<f64> {
    let s = (1.0 + t).ln();
    let h = e.w1.cols();
    let hidden: Vec<f64> = (0..h).map(|j| (s * e.w1.get(0, j) + e.b1.get(0, j)).tanh()).collect();
    (0..e.w2.cols())
        .map(|o| e.b2.get(0, o) + (0..h).map(|j| hidden[j] * e.w2.get(j, o)).sum::<f64>())
        .collect()
}

fn fixture_embedder() -> IntervalEmbedder {
    IntervalEmbedder::init(4, 3, &mut seed::rng(0))
}

// Produced once by `oracle` on `fixture_embedder()` and frozen.
const FROZEN: [(f64, [f64; 3]); 3] = [
    (0.0, [0.6603111595057745, 0.19836617641639068, 0.34029357740870925]),
    (7.0, [0.8949803634474138, -0.005186782641178889, -0.19197197011545009]),
    (30.0, [0.9179228557949042, -0.03905707605307046, -0.2681544343318166]),
];

#[test]
fn frozen_reference_vectors() {
    let e = fixture_embedder();
    for (t, want) in FROZEN {
        let got = e.embed_one(t).unwrap();
        let ora = oracle(&e, t);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-12, "t={t} k={k}: {} vs frozen {}", got[k], want[k]);
            assert!((got[k] - ora[k]).abs() < 1e-12);
        }
    }
}

fn loss(e: &IntervalEmbedder, inputs: &[f64], w: &Matrix) -> f64 {
    let (out, _) = e.forward_normalized(inputs).unwrap();
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_match_central_differences() {
    const STEP: f64 = 1e-5;
    for s in 0..20u64 {
        let mut rng = seed::rng(s);
        let e = IntervalEmbedder::init(6, 5, &mut rng);
        let inputs: Vec<f64> = [0.0, 3.0, 45.0, 400.0].iter().map(|&t| normalize_interval(t).unwrap()).collect();
        let w = Matrix::uniform(4, 5, 1.0, &mut rng);
        let (_, cache) = e.forward_normalized(&inputs).unwrap();
        let g = e.backward(&cache, &w);
        let grads = [("interval.W1", &g.w1), ("interval.b1", &g.b1), ("interval.W2", &g.w2), ("interval.b2", &g.b2)];
        for (name, grad) in grads {
            for idx in 0..grad.len() {
                let mut plus = e.clone();
                let mut minus = e.clone();
                plus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.data_mut()[idx] += STEP;
                minus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.data_mut()[idx] -= STEP;
                let fd = (loss(&plus, &inputs, &w) - loss(&minus, &inputs, &w)) / (2.0 * STEP);
                let an = grad.data()[idx];
                assert!((fd - an).abs() / (fd.abs() + an.abs()).max(1e-6) < 1e-4, "{name}[{idx}]");
            }
        }
        for k in 0..inputs.len() {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p[k] += STEP;
            m[k] -= STEP;
            let fd = (loss(&e, &p, &w) - loss(&e, &m, &w)) / (2.0 * STEP);
            assert!((fd - g.inputs[k]).abs() / (fd.abs() + g.inputs[k].abs()).max(1e-6) < 1e-4);
        }
    }
}

proptest! {
    #[test]
    fn normalization_is_strictly_increasing(a in 0.0f64..1e6, delta in 1e-6f64..1e3) {
        prop_assert!(normalize_interval(a + delta).unwrap() > normalize_interval(a).unwrap());
    }

    #[test]
    fn output_width_and_purity(s in any::<u64>(), t in 0.0f64..5000.0, d in 1usize..12) {
        let e = IntervalEmbedder::init(8, d, &mut seed::rng(s));
        let a = e.embed_one(t).unwrap();
        prop_assert_eq!(a.len(), d);
        prop_assert_eq!(a, e.embed_one(t).unwrap());
    }
}
