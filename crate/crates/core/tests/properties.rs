use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roma_core::dap::{embed, CommonEmbedding, DapConfig, DapParams, TokenFeatures};
use roma_core::eval::{recall_from_ranks, RECALL_KS};
use roma_core::graph::{Axis, GradGraph};
use roma_core::posenc::{patch_position_embedding, PatchCentroids, PositionConfig};
use roma_core::rncl::{
    complementary_loss, find_threshold, rnc_loss, rnc_per_pair, softmax_similarity, CorrespondenceLabels,
    Direction,
};
use roma_core::synth::{generate, inject_noise, split, GeneratorSpec};
use roma_core::DenseArray;

fn unit(v: Vec<f64>) -> Option<CommonEmbedding> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| CommonEmbedding::from_unit(v.into_iter().map(|x| x / n).collect()))
}

fn embeddings(k: usize, d: usize) -> impl Strategy<Value = Vec<CommonEmbedding>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), k)
        .prop_filter_map("nonzero rows", |rows| rows.into_iter().map(unit).collect())
}

fn batch() -> impl Strategy<Value = (Vec<CommonEmbedding>, Vec<CommonEmbedding>, f64)> {
    (2usize..=8, 2usize..=16, 0.05f64..1.0)
        .prop_flat_map(|(k, d, tau)| (embeddings(k, d), embeddings(k, d), Just(tau)))
}

fn point_cloud(n: usize, d_f: usize) -> impl Strategy<Value = TokenFeatures> {
    (
        prop::collection::vec(-2.0f64..2.0, n * d_f),
        prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), n),
    )
        .prop_map(move |(values, coords)| {
            let tokens = DenseArray::new([n, d_f], values).unwrap();
            let centroids = PatchCentroids::new(coords.into_iter().map(|(h, v)| [h, v]).collect()).unwrap();
            TokenFeatures::point_cloud(tokens, centroids).unwrap()
        })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_rows_sum_to_one((p, t, tau) in batch()) {
        for direction in [Direction::PointToText, Direction::TextToPoint] {
            let s = softmax_similarity(&p, &t, tau, direction).unwrap().probs;
            for i in 0..s.rows() {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn similarity_ranks_rows_like_raw_dot_products((p, t, tau) in batch()) {
        let s = softmax_similarity(&p, &t, tau, Direction::PointToText).unwrap().probs;
        for i in 0..p.len() {
            for a in 0..t.len() {
                for b in 0..t.len() {
                    if p[i].dot(&t[a]) > p[i].dot(&t[b]) {
                        prop_assert!(s.get(i, a) >= s.get(i, b));
                    }
                }
            }
        }
    }

    #[test]
    fn all_positive_labels_give_exactly_zero_loss((p, t, tau) in batch(), alpha in 0.1f64..10.0) {
        let pt = softmax_similarity(&p, &t, tau, Direction::PointToText).unwrap().probs;
        let tp = softmax_similarity(&p, &t, tau, Direction::TextToPoint).unwrap().probs;
        let all = CorrespondenceLabels::all_positive(p.len());
        prop_assert_eq!(rnc_loss(&pt, &tp, &all, alpha).unwrap(), 0.0);
        prop_assert_eq!(complementary_loss(&pt, &tp, &all).unwrap(), 0.0);
    }

    #[test]
    fn rnc_never_exceeds_complementary((p, t, _) in batch(), alpha in 0.1f64..10.0) {
        let pt = softmax_similarity(&p, &t, 0.5, Direction::PointToText).unwrap().probs;
        let tp = softmax_similarity(&p, &t, 0.5, Direction::TextToPoint).unwrap().probs;
        let y = CorrespondenceLabels::identity(p.len());
        let l = rnc_loss(&pt, &tp, &y, alpha).unwrap();
        let l_prime = complementary_loss(&pt, &tp, &y).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(l <= l_prime + 1e-12);
    }

    #[test]
    fn embeddings_have_unit_norm(
        sample in (1usize..=6, 1usize..=8).prop_flat_map(|(n, d)| point_cloud(n, d)),
        half_dc in 1usize..=8,
        seed in any::<u64>(),
        token_attention in any::<bool>(),
        feature_attention in any::<bool>(),
    ) {
        let params = DapParams::init(sample.feature_dim(), 2 * half_dc, &mut ChaCha8Rng::seed_from_u64(seed));
        let config = DapConfig { token_attention, feature_attention, ..DapConfig::default() };
        match embed(&sample, &params, &config) {
            Ok(e) => prop_assert!((e.norm() - 1.0).abs() <= 1e-9),
            Err(roma_core::Error::Degenerate { .. }) => {}
            Err(other) => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn point_cloud_embedding_ignores_joint_token_order(
        sample in point_cloud(4, 5),
        seed in any::<u64>(),
    ) {
        let params = DapParams::init(5, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        let config = DapConfig::default();
        let base = embed(&sample, &params, &config).unwrap();
        for order in permutations(4) {
            let e = embed(&sample.permuted(&order), &params, &config).unwrap();
            let diff = base.as_slice().iter().zip(e.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-6, "{order:?}: {diff:e}");
        }
    }

    #[test]
    fn per_pair_gradient_flips_once_at_the_threshold(alpha in 0.3f64..6.0, s in 0.001f64..0.999) {
        let s_star = find_threshold(alpha, 1e-12).unwrap().s_star;
        let (loss, grad) = rnc_per_pair(s, alpha).unwrap();
        prop_assert!(loss >= 0.0);
        if s < s_star - 1e-6 {
            prop_assert!(grad > 0.0);
        } else if s > s_star + 1e-6 {
            prop_assert!(grad < 0.0);
        }
        prop_assert!((s_star - (1.0 - (-alpha).exp())).abs() <= 1e-6);
    }

    #[test]
    fn softmax_columns_and_rows_normalize(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let a = DenseArray::new([3, 4], values).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(a);
        let rows = g.softmax(x, Axis::Row).unwrap();
        let cols = g.softmax(x, Axis::Column).unwrap();
        let r = g.value(rows).clone();
        let c = g.value(cols).clone();
        for i in 0..3 {
            prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for j in 0..4 {
            prop_assert!(((0..3).map(|i| c.get(i, j)).sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn position_embedding_is_bounded(
        coords in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..30),
        half in 1usize..=16,
        scale in any::<bool>(),
    ) {
        let c = PatchCentroids::new(coords.into_iter().map(|(h, v)| [h, v]).collect()).unwrap();
        let e = patch_position_embedding(&c, 2 * half, PositionConfig { scale_by_token_count: scale }).unwrap();
        prop_assert!(e.values().iter().all(|v| v.is_finite() && v.abs() <= 2.0));
    }

    #[test]
    fn recall_is_bounded_and_monotone(ranks in prop::collection::vec(1usize..40, 1..50)) {
        let r = recall_from_ranks(&ranks, &RECALL_KS);
        prop_assert!(r.iter().all(|v| (0.0..=100.0).contains(v)));
        prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_moves_exactly_the_rounded_count(
        scenes in 2usize..12,
        per in 1usize..4,
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let spec = GeneratorSpec {
            num_scenes: scenes,
            texts_per_scene: per,
            p_n: 3,
            t_n: 3,
            d_f: 4,
            num_prototypes: 5,
            seed,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let noisy = inject_noise(&ds, rate, seed).unwrap();
        let expected = (rate * ds.texts.len() as f64 + 0.5).floor() as usize;
        prop_assert_eq!(noisy.noisy_count(), expected);
        prop_assert_eq!(&noisy.clean_map, &ds.clean_map);
        prop_assert!(noisy.assigned_pairs().is_ok());
    }

    #[test]
    fn splits_partition_scenes(scenes in 3usize..40, seed in any::<u64>()) {
        let spec = GeneratorSpec {
            num_scenes: scenes,
            texts_per_scene: 1,
            p_n: 2,
            t_n: 2,
            d_f: 2,
            num_prototypes: 3,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        if let Ok(parts) = split(&ds, [0.6, 0.2, 0.2], seed) {
            let mut ids: Vec<usize> = parts.iter().flat_map(|p| p.scenes.iter().map(|s| s.id)).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..scenes).collect::<Vec<_>>());
            for p in &parts {
                prop_assert!(!p.scenes.is_empty());
                prop_assert!(p.clean_pairs().is_ok());
            }
        }
    }
}
