use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use winlin::attention::{attention_exact, attention_linear, window_partition, window_reverse};
use winlin::autodiff::Tape;
use winlin::data::{pad_to, synth_sample, SynthParams};
use winlin::loss::joint_loss;
use winlin::metrics::{compute_metrics, ConfusionCounts, MetricReport};
use winlin::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_from_iou(tp in 1u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000, tn in 0u64..1_000_000) {
        let m = MetricReport::from_counts(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.iou <= m.f1 + 1e-15);
        prop_assert!(m.iou <= m.precision.min(m.recall) + 1e-15);
    }

    #[test]
    fn partition_round_trip(b in 1usize..3, c in 1usize..4, h in 1usize..20, w in 1usize..20, side in 1usize..8, seed in any::<u64>()) {
        let x = Tensor::<f32>::randn(&[b, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (wins, layout) = window_partition(&x, side).unwrap();
        prop_assert_eq!(wins.dim(1), side * side);
        prop_assert_eq!(window_reverse(&wins, &layout).unwrap(), x);
    }

    #[test]
    fn attention_outputs_stay_in_value_hull(n in 1usize..40, d in 2usize..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        for out in [attention_linear(&q, &k, &v).unwrap(), attention_exact(&q, &k, &v, (d as f64).sqrt()).unwrap()] {
            for c in 0..d {
                let col: Vec<f64> = (0..n).map(|j| v.row(j)[c]).collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for i in 0..n {
                    let o = out.row(i)[c];
                    prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn padding_never_changes_scores(size in 16usize..40, extra_h in 0usize..9, extra_w in 0usize..9, seed in 0u64..1000, junk in 0.0f32..1.0) {
        let s = synth_sample(seed, 0, size, &SynthParams::default()).unwrap();
        let p = pad_to(&s, size + extra_h, size + extra_w).unwrap();
        let (h, w) = (p.height(), p.width());
        let probs = Tensor::<f32>::from_fn(&[1, h, w], |i| ((i * 7919) % 101) as f32 / 100.0);
        let junked = probs.zip_map(&p.valid, |x, v| if v > 0.5 { x } else { junk }).unwrap();
        let mask_junk = p.mask.zip_map(&p.valid, |x, v| if v > 0.5 { x } else { 1.0 - x }).unwrap();
        let a = compute_metrics(&probs, &p.mask, &p.valid, 0.5).unwrap();
        let b = compute_metrics(&junked, &mask_junk, &p.valid, 0.5).unwrap();
        prop_assert_eq!(a, b);

        let shape = [1, 1, h, w];
        let loss = |l: &Tensor<f32>, m: &Tensor<f32>| {
            let tape = Tape::<f64>::no_grad();
            let logits = tape.constant(l.cast::<f64>().reshape(&shape).unwrap());
            let m = m.cast::<f64>().reshape(&shape).unwrap();
            let v = p.valid.cast::<f64>().reshape(&shape).unwrap();
            joint_loss(&tape, logits, &m, &v).unwrap().terms
        };
        let logits = probs.map(|x| 5.0 * x - 2.5);
        let logits_junk = logits.zip_map(&p.valid, |x, v| if v > 0.5 { x } else { 9.0 * junk - 4.0 }).unwrap();
        prop_assert_eq!(loss(&logits, &p.mask), loss(&logits_junk, &mask_junk));
    }
}
