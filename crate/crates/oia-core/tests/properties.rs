//! Randomized property tests: structural invariants that must hold for all
//! inputs, checked against brute-force or closed-form references.

use oia_core::data::annotations::{load_annotations, save_annotations, Annotation};
use oia_core::data::features::{load_features, write_features};
use oia_core::data::split_indices;
use oia_core::data::synthetic::CausalRuleTable;
use oia_core::labels::{ActionLabel, ExplanationLabel};
use oia_core::metrics::{f1_all, f1_binary, mf1, threshold_predict};
use oia_core::model::rank_by_score;
use oia_core::optim::Schedule;
use oia_core::tape::{sigmoid_scalar, Tape};
use oia_core::tensor::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

/// Values that survive an f32 round trip unchanged, as the feature format
/// requires.
fn f32_clean_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-1e6f32..1e6f32).prop_map(|v| v as f64), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_simplex_and_shift_stable(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::new();
        let n = logits.len();
        let x = tape.leaf(Tensor::new(vec![n], logits.clone()).unwrap(), false);
        let s = tape.softmax(x).unwrap();
        let probs = tape.value(s).values().to_vec();
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&p| p > 0.0 && p <= 1.0));

        let shifted: Vec<f64> = logits.iter().map(|&z| z + shift).collect();
        let y = tape.leaf(Tensor::new(vec![n], shifted).unwrap(), false);
        let s2 = tape.softmax(y).unwrap();
        for (a, b) in probs.iter().zip(tape.value(s2).values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_is_identity(
        a in finite_vec(3, -10.0, 10.0),
        b in finite_vec(5, -10.0, 10.0),
        c in finite_vec(2, -10.0, 10.0),
    ) {
        let mut tape = Tape::new();
        let ids: Vec<_> = [&a, &b, &c]
            .iter()
            .map(|v| tape.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap(), false))
            .collect();
        let cat = tape.concat_vecs(&ids).unwrap();
        let sa = tape.slice_vec(cat, 0, 3).unwrap();
        let sb = tape.slice_vec(cat, 3, 5).unwrap();
        let sc = tape.slice_vec(cat, 8, 2).unwrap();
        prop_assert_eq!(tape.value(sa).values(), &a[..]);
        prop_assert_eq!(tape.value(sb).values(), &b[..]);
        prop_assert_eq!(tape.value(sc).values(), &c[..]);
    }

    #[test]
    fn f1_is_bounded_and_one_only_on_exact_match(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40),
    ) {
        let preds: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let truths: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let f1 = f1_binary(&preds, &truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        if preds == truths && preds.iter().any(|&b| b) {
            prop_assert_eq!(f1, 1.0);
        }
        if preds != truths {
            prop_assert!(f1 < 1.0);
        }
    }

    #[test]
    fn f1_metrics_ignore_sample_order(
        rows in prop::collection::vec(
            (prop::collection::vec(any::<bool>(), 6), prop::collection::vec(any::<bool>(), 6)),
            1..30,
        ),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let preds: Vec<Vec<bool>> = rows.iter().map(|r| r.0.clone()).collect();
        let truths: Vec<Vec<bool>> = rows.iter().map(|r| r.1.clone()).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<Vec<bool>> = order.iter().map(|&i| preds[i].clone()).collect();
        let t2: Vec<Vec<bool>> = order.iter().map(|&i| truths[i].clone()).collect();
        prop_assert_eq!(mf1(&preds, &truths).unwrap(), mf1(&p2, &t2).unwrap());
        prop_assert_eq!(f1_all(&preds, &truths).unwrap(), f1_all(&p2, &t2).unwrap());
    }

    #[test]
    fn threshold_is_strictly_positive(logits in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let preds = threshold_predict(&logits);
        for (p, &z) in preds.iter().zip(&logits) {
            prop_assert_eq!(*p, z > 0.0);
        }
    }

    #[test]
    fn ranking_matches_brute_force_sort(
        scores in prop::collection::vec((0u8..5).prop_map(|q| q as f64 * 0.25), 1..20),
    ) {
        // Quantized scores force frequent ties, exercising the index rule.
        let ranked = rank_by_score(&scores);
        let mut reference: Vec<usize> = (0..scores.len()).collect();
        reference.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        prop_assert_eq!(ranked, reference);
    }

    #[test]
    fn schedule_matches_closed_form(
        base in 1e-6f64..1.0,
        every in 1usize..20,
        factor in 1.5f64..20.0,
        epoch in 0usize..200,
    ) {
        let s = Schedule {
            base_lr: base,
            total_epochs: 200,
            decay_every: every,
            decay_factor: factor,
        };
        let expect = base / factor.powi((epoch / every) as i32);
        prop_assert_eq!(s.lr_at_epoch(epoch).unwrap(), expect);
    }

    // |z| stays below 14 because the naive reference itself loses precision
    // once 1 - sigmoid(z) underflows toward the rounding error of 1.0.
    #[test]
    fn bce_matches_naive_formula_in_safe_range(
        z in -14.0f64..14.0,
        target in prop_oneof![Just(0.0f64), Just(1.0f64)],
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(z), true);
        let loss = tape.bce_with_logits(x, target).unwrap();
        let p = 1.0 / (1.0 + (-z).exp());
        let naive = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        prop_assert!((tape.value(loss).item() - naive).abs() < 1e-9);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap()[0];
        prop_assert!((g - (sigmoid_scalar(z) - target)).abs() < 1e-12);
    }

    #[test]
    fn split_is_a_partition(n in 1usize..400, seed in any::<u64>()) {
        let (train, val, test) = split_indices(n, (70, 10, 20), seed).unwrap();
        prop_assert_eq!(train.len(), n * 70 / 100);
        prop_assert_eq!(val.len(), n * 10 / 100);
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..n).collect();
        prop_assert_eq!(all, expect);
    }

    #[test]
    fn label_masks_round_trip(bits_a in any::<[bool; 4]>(), bits_e in any::<[bool; 21]>()) {
        let a = ActionLabel(bits_a);
        let e = ExplanationLabel(bits_e);
        prop_assert_eq!(ActionLabel::from_mask(&a.mask()).unwrap(), a);
        prop_assert_eq!(ExplanationLabel::from_mask(&e.mask()).unwrap(), e);
    }

    #[test]
    fn rule_closure_ignores_draw_order(
        ids in prop::collection::vec(0usize..21, 1..8),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let table = CausalRuleTable::default_table();
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(table.apply(&ids).unwrap(), table.apply(&shuffled).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_files_round_trip_bit_exact(
        backbone_vals in f32_clean_vec(2 * 3 * 4),
        prop_vals in prop::collection::vec(f32_clean_vec(2 * 2 * 2), 0..4),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.oiaf");
        let backbone = Tensor::new(vec![2, 3, 4], backbone_vals).unwrap();
        let proposals: Vec<Tensor> = prop_vals
            .into_iter()
            .map(|v| Tensor::new(vec![2, 2, 2], v).unwrap())
            .collect();
        write_features(&path, &backbone, &proposals).unwrap();
        let (b2, p2) = load_features(&path).unwrap();
        prop_assert_eq!(b2, backbone);
        prop_assert_eq!(p2, proposals);
    }

    #[test]
    fn annotations_round_trip(
        rows in prop::collection::vec((any::<[bool; 4]>(), any::<[bool; 21]>()), 1..20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annos.tsv");
        let annos: Vec<Annotation> = rows
            .iter()
            .enumerate()
            .map(|(i, (a, e))| (format!("s{i:05}"), ActionLabel(*a), ExplanationLabel(*e)))
            .collect();
        save_annotations(&path, &annos).unwrap();
        prop_assert_eq!(load_annotations(&path).unwrap(), annos);
    }

    #[test]
    fn convolution_matches_a_naive_reference(
        cin in 1usize..3,
        cout in 1usize..3,
        k in 1usize..4,
        extra in 0usize..3,
        stride in 1usize..3,
        padding in 0usize..3,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        use rand::SeedableRng;
        let h = k + extra;
        let w = k + extra + 1;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let x_vals = draw(cin * h * w);
        let w_vals = draw(cout * cin * k * k);
        let b_vals = draw(cout);

        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut expect = vec![0.0f64; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b_vals[oc];
                    for ic in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x_vals[(ic * h + iy as usize) * w + ix as usize]
                                        * w_vals[((oc * cin + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    expect[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![cin, h, w], x_vals).unwrap(), false);
        let wt = tape.leaf(Tensor::new(vec![cout, cin, k, k], w_vals).unwrap(), false);
        let bt = tape.leaf(Tensor::new(vec![cout], b_vals).unwrap(), false);
        let y = tape.conv2d(x, wt, bt, stride, padding).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[cout, oh, ow]);
        for (got, want) in tape.value(y).values().iter().zip(&expect) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }
}
