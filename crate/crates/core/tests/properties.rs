use proptest::prelude::*;
use yoco::engine::{generate, GlobalKVCache};
use yoco::gret;
use yoco::model::rope::rope_apply;
use yoco::model::{init_params, ModelConfig};
use yoco::parsim::plan_chunks;
use yoco::swa::WindowCache;
use yoco::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::from_rows(rows, cols, d))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunk_plan_tiles_the_sequence(n in 1usize..500, p in 1usize..9) {
        prop_assume!(p <= n);
        let plan = plan_chunks(n, p).unwrap();
        prop_assert_eq!(plan.ranges.len(), p);
        prop_assert_eq!(plan.ranges[0].start, 0);
        prop_assert_eq!(plan.ranges[p - 1].end, n);
        for w in plan.ranges.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        let lens: Vec<usize> = plan.ranges.iter().map(|r| r.len()).collect();
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        i in 0usize..2000,
        j in 0usize..2000,
        shift in 0usize..5000,
    ) {
        let q = Tensor::from_rows(1, 8, q);
        let k = Tensor::from_rows(1, 8, k);
        let score = |a: usize, b: usize| {
            let qa = rope_apply(&q, 1e4, a).unwrap();
            let kb = rope_apply(&k, 1e4, b).unwrap();
            dot(qa.row(0), kb.row(0))
        };
        prop_assert!((score(i, j) - score(i + shift, j + shift)).abs() < 1e-9);
    }

    #[test]
    fn window_cache_keeps_the_latest_rows(cap in 1usize..12, pushes in 0usize..40) {
        let mut cache = WindowCache::<f64>::new(cap, 2);
        for t in 0..pushes {
            let x = t as f64;
            cache.push(&[x, -x], &[2.0 * x, 0.5]).unwrap();
            prop_assert!(cache.len() <= cap);
        }
        prop_assert_eq!(cache.len(), pushes.min(cap));
        prop_assert_eq!(cache.position(), pushes);
        prop_assert_eq!(cache.state_values(), 2 * 2 * cap);
        if pushes > 0 {
            let (k, v) = cache.ordered().unwrap();
            let first = pushes - cache.len();
            for (r, t) in (first..pushes).enumerate() {
                prop_assert_eq!(k.at(r, 0), t as f64);
                prop_assert_eq!(v.at(r, 0), 2.0 * t as f64);
            }
        }
    }

    #[test]
    fn global_cache_grows_one_row_per_token(steps in prop::collection::vec(1usize..9, 1..12)) {
        let mut cache = GlobalKVCache::<f64>::new(3, 1, 1 << 10);
        let mut total = 0;
        for s in steps {
            let rows = Tensor::from_fn(s, 3, |i, c| (total + i) as f64 + c as f64 / 10.0);
            cache.append(&rows, &rows).unwrap();
            total += s;
            prop_assert_eq!(cache.len(), total);
            prop_assert_eq!(cache.values(), 2 * 3 * total);
            prop_assert!(cache.capacity() >= total);
        }
    }

    #[test]
    fn retention_paradigms_agree(
        (n, q, k, v) in (1usize..40).prop_flat_map(|n| (Just(n), matrix(n, 4), matrix(n, 4), matrix(n, 3))),
        decay in prop::collection::vec(-0.7f64..-1e-3, 40),
        b in 1usize..48,
    ) {
        let lg = &decay[..n];
        let par = gret::parallel(&q, &k, &v, lg).unwrap();
        let (rec, s_rec) = gret::recurrent(&q, &k, &v, lg, None).unwrap();
        let (ch, s_ch) = gret::chunkwise(&q, &k, &v, lg, b, None).unwrap();
        prop_assert!(rec.max_abs_diff(&par) <= 1e-10);
        prop_assert!(ch.max_abs_diff(&par) <= 1e-10);
        prop_assert!(s_rec.s.max_abs_diff(&s_ch.s) <= 1e-10);
        prop_assert_eq!(s_rec.position, s_ch.position);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_ignores_prefill_chunking(
        prompt in prop::collection::vec(0usize..97, 1..40),
        chunk in 1usize..64,
    ) {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 5);
        let a = generate(&prompt, &p, &cfg, 6, chunk).unwrap();
        let b = generate(&prompt, &p, &cfg, 6, cfg.chunk).unwrap();
        prop_assert_eq!(a, b);
    }
}
