use memtrack::attention;
use memtrack::eval::{self, AblationRow, CurvePoint, SequenceRow, SweepRow};
use memtrack::memory::{self, MemoryState};
use memtrack::{BoundingBox, Graph, Tensor};
use proptest::prelude::*;

fn vec_f64(len: std::ops::RangeInclusive<usize>, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-mag..mag, len)
}

fn valid_box() -> impl Strategy<Value = BoundingBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_positive_simplex(x in vec_f64(1..=40, 40.0)) {
        let g = Graph::<f32>::new();
        let v = g.constant(Tensor::vector(x).cast());
        let s = g.value(g.softmax(v).unwrap());
        let total: f64 = s.data().iter().map(|&p| p as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-5);
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn cosine_is_bounded(x in vec_f64(1..=16, 1e3), y in vec_f64(1..=16, 1e3), zero_x in any::<bool>()) {
        let n = x.len().min(y.len());
        let mut x = x[..n].to_vec();
        if zero_x {
            x.iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::<f64>::new();
        let c = g.cosine(g.constant(Tensor::vector(x)), g.constant(Tensor::vector(y[..n].to_vec()))).unwrap();
        let c = g.value(c).item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn backward_is_bitwise_repeatable(x in vec_f64(2..=12, 3.0), w in vec_f64(2..=12, 3.0)) {
        let n = x.len().min(w.len());
        let g = Graph::<f32>::new();
        let xv = g.param(Tensor::vector(x[..n].to_vec()).cast());
        let wv = g.param(Tensor::vector(w[..n].to_vec()).cast());
        let h = g.tanh(g.mul(xv, wv).unwrap());
        let s = g.softmax(h).unwrap();
        let loss = g.sum(g.mul(s, g.normalize(xv).unwrap()).unwrap());
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        for v in [xv, wv] {
            let (ga, gb) = (a.get(v), b.get(v));
            prop_assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn attention_is_a_convex_combination(
        side in 2usize..6,
        channels in 1usize..4,
        seed in any::<u64>(),
        values in vec_f64(100..=100, 2.0),
        h in vec_f64(5..=5, 1.0),
    ) {
        let n = side - 1;
        let feat = Tensor::from_fn([side, side, channels], |i| values[i % values.len()]);
        let g = Graph::<f64>::new();
        let grid = attention::pool_patches(&g, g.constant(feat), n).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let p = attention::AttentionParams::init(channels, 5, &mut rng).map(&mut |t| g.constant(t.cast()));
        let (a, alpha) = attention::attend(&g, &grid, g.constant(Tensor::vector(h)), &p).unwrap();
        let alpha = g.value(alpha);
        prop_assert!(alpha.data().iter().all(|&w| w > 0.0 && (w < 1.0 || alpha.len() == 1)));
        prop_assert!((alpha.sum() - 1.0).abs() <= 1e-5);
        let vecs = g.value(grid.vectors);
        let a = g.value(a);
        for c in 0..channels {
            let col: Vec<f64> = (0..grid.len()).map(|i| vecs.at(&[i, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.data()[c] >= lo - 1e-12 && a.data()[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn slots_stay_in_the_written_envelope(
        steps in 1usize..12,
        gates in prop::collection::vec((0.01..1.0f64, 0.01..1.0f64, 0.01..1.0f64), 12),
        decays in prop::collection::vec(0.0..1.0f64, 12),
        templates in prop::collection::vec(vec_f64(8..=8, 5.0), 12),
        init in vec_f64(24..=24, 5.0),
    ) {
        // 3 slots of 2×2×2.
        let mut mem = MemoryState::<Tensor<f64>>::zeros(3, 2, 2);
        mem.slots = Tensor::new([3, 2, 2, 2], init.clone()).unwrap();
        let mut lo = init.clone();
        let mut hi = init.clone();
        for t in 0..steps {
            let (a, b, c) = gates[t];
            let total = a + b + c;
            let g = Graph::<f64>::new();
            let slots = g.constant(mem.slots.clone());
            let gv = g.constant(Tensor::vector(vec![a / total, b / total, c / total]));
            let keys = memory::slot_keys(&g, slots).unwrap();
            let key = g.constant(Tensor::vector(templates[t][..2].to_vec()));
            let w_r = memory::read_weights(&g, keys, key, g.constant(Tensor::scalar(3.0))).unwrap();
            let alloc = g.constant(memory::allocation_weight(&mem.access));
            let w_w = memory::write_weight(&g, gv, w_r, alloc).unwrap();
            let new = g.constant(Tensor::new([2, 2, 2], templates[t].clone()).unwrap());
            let next = memory::write(&g, slots, w_w, gv, g.constant(Tensor::scalar(decays[t])), new).unwrap();
            mem.access = g.value(memory::update_access(&g, g.constant(mem.access.clone()), w_r, w_w, 0.99).unwrap());
            mem.slots = g.value(next);
            for j in 0..24 {
                lo[j] = lo[j].min(templates[t][j % 8]);
                hi[j] = hi[j].max(templates[t][j % 8]);
            }
            prop_assert!(mem.access.data().iter().all(|&u| u > 0.0));
        }
        for (j, &v) in mem.slots.data().iter().enumerate() {
            prop_assert!(v >= lo[j] - 1e-9 && v <= hi[j] + 1e-9);
        }
    }

    #[test]
    fn pure_no_write_gate_leaves_memory_bitwise(
        init in vec_f64(24..=24, 5.0),
        templates in prop::collection::vec(vec_f64(8..=8, 5.0), 10),
    ) {
        let init: Vec<f64> = init.iter().map(|v| if *v == 0.0 { 1.0 } else { *v }).collect();
        let start = Tensor::new([3, 2, 2, 2], init).unwrap();
        let mut slots = start.clone();
        let mut access = Tensor::<f64>::zeros([3]);
        for t in &templates {
            let g = Graph::<f64>::new();
            let sv = g.constant(slots.clone());
            let gv = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
            let keys = memory::slot_keys(&g, sv).unwrap();
            let w_r = memory::read_weights(&g, keys, g.constant(Tensor::vector(t[..2].to_vec())), g.constant(Tensor::scalar(2.0))).unwrap();
            let w_w = memory::write_weight(&g, gv, w_r, g.constant(memory::allocation_weight(&access))).unwrap();
            let new = g.constant(Tensor::new([2, 2, 2], t.clone()).unwrap());
            slots = g.value(memory::write(&g, sv, w_w, gv, g.constant(Tensor::scalar(0.5)), new).unwrap());
            access = g.value(memory::update_access(&g, g.constant(access.clone()), w_r, w_w, 0.99).unwrap());
        }
        prop_assert!(slots.data().iter().zip(start.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn iou_is_bounded_and_reflexive(a in valid_box(), b in valid_box()) {
        let v = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        prop_assert!((v - b.iou(&a)).abs() < 1e-12);
        let far = BoundingBox::new(a.cx + a.width + b.width, b.cy, b.width, b.height);
        prop_assert_eq!(a.iou(&far), 0.0);
    }

    #[test]
    fn self_evaluation_is_perfect(track in prop::collection::vec(valid_box(), 2..40)) {
        let e = eval::evaluate(&track, &track).unwrap();
        prop_assert!((e.auc - 1.0).abs() < 1e-12);
        prop_assert_eq!(e.precision_at(20.0), 1.0);
    }

    #[test]
    fn curves_are_monotone(pairs in prop::collection::vec((valid_box(), valid_box()), 2..40)) {
        let (r, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let e = eval::evaluate(&r, &t).unwrap();
        prop_assert!(e.precision.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(e.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((0.0..=1.0).contains(&e.auc));
    }

    #[test]
    fn csv_rows_round_trip(
        xs in prop::collection::vec((any::<f64>().prop_filter("finite", |v| v.is_finite()), 0usize..100), 1..10),
        name in "[a-z_]{1,12}",
    ) {
        let curve: Vec<CurvePoint> = xs.iter().map(|&(v, i)| CurvePoint { threshold: i as f64, value: v }).collect();
        prop_assert_eq!(&eval::from_csv_str::<CurvePoint>(&eval::to_csv_string(&curve).unwrap()).unwrap(), &curve);
        let sweep: Vec<SweepRow> = xs.iter().map(|&(v, i)| SweepRow { slots: i, auc: v }).collect();
        prop_assert_eq!(&eval::from_csv_str::<SweepRow>(&eval::to_csv_string(&sweep).unwrap()).unwrap(), &sweep);
        let abl: Vec<AblationRow> = xs.iter().map(|&(v, _)| AblationRow { variant: name.clone(), mean_auc: v, mean_iou: -v }).collect();
        prop_assert_eq!(&eval::from_csv_str::<AblationRow>(&eval::to_csv_string(&abl).unwrap()).unwrap(), &abl);
        let seqs: Vec<SequenceRow> = xs.iter().map(|&(v, i)| SequenceRow {
            sequence: format!("{name}_{i}"), tier: "drift".into(), auc: v, mean_iou: v / 2.0, precision_20: 1.0,
        }).collect();
        prop_assert_eq!(&eval::from_csv_str::<SequenceRow>(&eval::to_csv_string(&seqs).unwrap()).unwrap(), &seqs);
    }
}
