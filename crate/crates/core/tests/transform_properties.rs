mod common;

use adasparse::gradients::{entmax_alpha_grad, finite_difference_alpha, vjp, BackwardContext};
use adasparse::transforms::{
    entmax, entmax15_exact, entmax_bisect, softmax, sparsemax, tsallis_entropy_slice, LogitVector, Temperature,
    Transform, DEFAULT_BISECT_ITERS,
};
use common::{entmax15_oracle, max_abs_diff, softmax_oracle, sparsemax_oracle, support_of};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_transforms() -> Vec<Transform> {
    vec![
        Transform::Softmax {
            temp: Temperature::default(),
        },
        Transform::Softmax {
            temp: Temperature::new(0.3).unwrap(),
        },
        Transform::Sparsemax,
        Transform::Entmax15,
        Transform::EntmaxBisect {
            alpha: 1.3,
            iters: DEFAULT_BISECT_ITERS,
        },
        Transform::Entmax { alpha: 1.7 },
        Transform::Entmax { alpha: 1.0 },
        Transform::Entmax { alpha: 2.0 },
    ]
}

fn logits(max_len: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-bound..bound, 1..=max_len)
}

fn lv(z: &[f64]) -> LogitVector {
    LogitVector::new(z.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn outputs_lie_on_the_simplex(z in logits(40, 50.0)) {
        for t in all_transforms() {
            let p = t.apply(&lv(&z)).unwrap();
            prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert_eq!(p.support().to_vec(), support_of(p.probs()));
        }
    }

    #[test]
    fn shifting_logits_changes_nothing(z in logits(16, 5.0), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        for t in all_transforms() {
            let a = t.apply(&lv(&z)).unwrap();
            let b = t.apply(&lv(&shifted)).unwrap();
            prop_assert!(max_abs_diff(a.probs(), b.probs()) <= 1e-9, "{:?}", t);
        }
    }

    #[test]
    fn permuting_logits_permutes_outputs(z in logits(12, 5.0), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..z.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f64> = order.iter().map(|&j| z[j]).collect();
        for t in all_transforms() {
            let p = t.apply(&lv(&z)).unwrap();
            let q = t.apply(&lv(&permuted)).unwrap();
            let expect: Vec<f64> = order.iter().map(|&j| p.probs()[j]).collect();
            prop_assert!(max_abs_diff(q.probs(), &expect) <= 1e-12, "{:?}", t);
        }
    }

    #[test]
    fn entmax_family_reduces_to_its_endpoints(z in logits(16, 5.0)) {
        let z = lv(&z);
        let at_one = entmax(&z, 1.0).unwrap();
        let soft = softmax(&z, Temperature::default()).unwrap();
        prop_assert!(max_abs_diff(at_one.probs(), soft.probs()) <= 1e-12);
        let at_two = entmax_bisect(&z, 2.0, DEFAULT_BISECT_ITERS).unwrap();
        let sparse = sparsemax(&z).unwrap();
        prop_assert!(max_abs_diff(at_two.probs(), sparse.probs()) <= 1e-6);
    }

    #[test]
    fn sparsemax_and_entmax15_match_support_enumeration(z in logits(8, 3.0)) {
        let p = sparsemax(&lv(&z)).unwrap();
        let o = sparsemax_oracle(&z);
        prop_assert_eq!(p.support().to_vec(), support_of(&o));
        prop_assert!(max_abs_diff(p.probs(), &o) <= 1e-9);

        let p = entmax15_exact(&lv(&z)).unwrap();
        let o = entmax15_oracle(&z);
        prop_assert_eq!(p.support().to_vec(), support_of(&o));
        prop_assert!(max_abs_diff(p.probs(), &o) <= 1e-9);
    }

    #[test]
    fn softmax_matches_textbook_formula(z in logits(20, 30.0)) {
        let p = softmax(&lv(&z), Temperature::default()).unwrap();
        prop_assert!(max_abs_diff(p.probs(), &softmax_oracle(&z)) <= 1e-12);
    }

    #[test]
    fn vjp_is_centered_and_linear(
        z in logits(12, 3.0),
        seed in any::<u64>(),
        c in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = z.len();
        let v1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + c * b).collect();
        for t in [
            Transform::Softmax { temp: Temperature::default() },
            Transform::Sparsemax,
            Transform::Entmax15,
            Transform::EntmaxBisect { alpha: 1.4, iters: DEFAULT_BISECT_ITERS },
        ] {
            let ctx = BackwardContext::forward(&t, &lv(&z)).unwrap();
            let g1 = vjp(&ctx, &v1).unwrap();
            let g2 = vjp(&ctx, &v2).unwrap();
            let gm = vjp(&ctx, &mix).unwrap();
            prop_assert!(g1.iter().sum::<f64>().abs() <= 1e-8);
            let expect: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + c * b).collect();
            prop_assert!(max_abs_diff(&gm, &expect) <= 1e-10);
        }
    }
}

#[test]
fn uniform_distribution_maximizes_tsallis_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [2usize, 5, 9] {
        let uniform = vec![1.0 / n as f64; n];
        for alpha in [1.0, 1.5, 2.0, 3.0] {
            let top = tsallis_entropy_slice(&uniform, alpha).unwrap();
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln()).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
                assert!(tsallis_entropy_slice(&p, alpha).unwrap() <= top + 1e-12);
            }
        }
    }
}

#[test]
fn larger_alpha_gives_sparser_outputs_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sizes = [0usize; 3];
    for _ in 0..1000 {
        let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = lv(&z);
        sizes[0] += entmax(&z, 1.2).unwrap().support().len();
        sizes[1] += entmax(&z, 1.5).unwrap().support().len();
        sizes[2] += entmax(&z, 2.0).unwrap().support().len();
    }
    assert!(sizes[2] <= sizes[1] && sizes[1] <= sizes[0], "{sizes:?}");
}

#[test]
fn alpha_gradient_matches_finite_differences_across_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 1000 {
        let n = rng.gen_range(1..=16);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = lv(&z);
        let t = Transform::EntmaxBisect {
            alpha: 1.5,
            iters: DEFAULT_BISECT_ITERS,
        };
        let ctx = BackwardContext::forward(&t, &z).unwrap();
        if n > 1 && adasparse::gradients::boundary_margin(&z, ctx.probs()) <= 1e-3 {
            continue;
        }
        let a = entmax_alpha_grad(&ctx).unwrap();
        let f = finite_difference_alpha(&z, 1.5, 1e-5, DEFAULT_BISECT_ITERS).unwrap();
        let scale = a.iter().chain(&f).fold(1e-6f64, |m, x| m.max(x.abs()));
        worst = worst.max(max_abs_diff(&a, &f) / scale);
        checked += 1;
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn bisection_agrees_with_closed_form_at_one_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let n = rng.gen_range(1..=32);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let z = lv(&z);
        let a = entmax15_exact(&z).unwrap();
        let b = entmax_bisect(&z, 1.5, DEFAULT_BISECT_ITERS).unwrap();
        assert!(max_abs_diff(a.probs(), b.probs()) <= 1e-6);
    }
}
