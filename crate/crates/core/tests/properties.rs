use attnlab::attention::math::compute_attention;
use attnlab::attention::policy::{window_len, InjectionPolicy};
use attnlab::attention::postprocess::{min_max, resize_bilinear};
use attnlab::attention::site::AttnKind;
use attnlab::eval::metrics::{clip_directional_similarity, clip_score};
use attnlab::probing::probe::{stratified_split, SplitSpec};
use attnlab::service::config::parse_sites;
use candle_core::{Device, Tensor};
use proptest::prelude::*;

fn embedding(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #[test]
    fn window_is_bounded_and_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, steps in 1usize..200) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(window_len(lo, steps) <= window_len(hi, steps));
        prop_assert!(window_len(hi, steps) <= steps);
        prop_assert_eq!(window_len(0.0, steps), 0);
        prop_assert_eq!(window_len(1.0, steps), steps);
    }

    #[test]
    fn active_steps_are_the_noisiest_prefix(ratio in 0.0f64..=1.0, steps in 1usize..80) {
        let policy = InjectionPolicy::self_only([1], ratio);
        let active: Vec<usize> = (1..=steps)
            .rev()
            .filter(|&t| policy.step_active(AttnKind::SelfAttn, t, steps))
            .collect();
        let expected: Vec<usize> = (1..=steps).rev().take(window_len(ratio, steps)).collect();
        prop_assert_eq!(active, expected);
        prop_assert!(!policy.step_active(AttnKind::SelfAttn, 0, steps));
    }

    #[test]
    fn noop_policy_is_never_active(ratio in 0.0f64..=1.0, steps in 1usize..60, t in 0usize..60) {
        let policy = InjectionPolicy { replace_ratio: ratio, ..InjectionPolicy::noop() };
        prop_assert!(!policy.any_active(t, steps));
    }

    #[test]
    fn split_partitions_each_class(
        labels in prop::collection::vec(0usize..5, 1..200),
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let spec = SplitSpec { train_fraction: fraction, seed };
        let (train, test) = stratified_split(&labels, 5, spec);
        prop_assert_eq!(stratified_split(&labels, 5, spec), (train.clone(), test.clone()));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..5 {
            let n = labels.iter().filter(|&&l| l == c).count();
            let n_train = train.iter().filter(|&&i| labels[i] == c).count();
            prop_assert_eq!(n_train, (n as f64 * fraction).round() as usize);
        }
    }

    #[test]
    fn ranges_expand_inclusively(a in 1usize..40, span in 0usize..20, single in 1usize..40) {
        let b = a + span;
        let parsed = parse_sites(&format!("{single},{a}-{b}")).unwrap();
        let mut expected = vec![single];
        expected.extend(a..=b);
        prop_assert_eq!(parsed, expected);
    }

    #[test]
    fn min_max_lands_in_unit_interval(values in prop::collection::vec(-1e3f32..1e3, 1..64)) {
        let out = min_max(&values);
        prop_assert_eq!(out.len(), values.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bilinear_stays_within_source_range(
        (h, w, src) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-5.0f32..5.0, h * w))),
        out_h in 1usize..20,
        out_w in 1usize..20,
    ) {
        let out = resize_bilinear(&src, h, w, out_h, out_w);
        prop_assert_eq!(out.len(), out_h * out_w);
        let lo = src.iter().cloned().fold(f32::INFINITY, f32::min) - 1e-4;
        let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max) + 1e-4;
        prop_assert!(out.iter().all(|v| (lo..=hi).contains(v)));
    }

    #[test]
    fn attention_rows_are_distributions(
        nq in 1usize..12,
        nk in 1usize..12,
        d in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-4.0..4.0)).collect() };
        let q = Tensor::from_vec(draw(2 * nq * d), (1, 2, nq, d), &Device::Cpu).unwrap();
        let k = Tensor::from_vec(draw(2 * nk * d), (1, 2, nk, d), &Device::Cpu).unwrap();
        let p: Vec<f32> = compute_attention(&q, &k, d).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for row in p.chunks(nk) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn metric_ranges_and_symmetry(si in embedding(16), di in embedding(16), st in embedding(16), dt in embedding(16)) {
        if let Some(cs) = clip_score(&di, &dt) {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&cs));
        }
        if let Some(cds) = clip_directional_similarity(&si, &di, &st, &dt) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&cds));
            let swapped = clip_directional_similarity(&di, &si, &dt, &st).unwrap();
            prop_assert!((cds - swapped).abs() < 1e-9);
        }
    }
}
