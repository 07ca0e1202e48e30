use super::*;
use alloc::collections::BTreeSet;

fn small() -> GeneratorSpec {
    GeneratorSpec {
        num_scenes: 20,
        texts_per_scene: 5,
        p_n: 8,
        t_n: 6,
        d_f: 8,
        num_prototypes: 12,
        ..GeneratorSpec::default()
    }
}

fn rows(a: &DenseArray) -> Vec<&[f64]> {
    a.values().chunks(a.cols()).collect()
}

#[test]
fn same_seed_gives_identical_datasets() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate(&GeneratorSpec { seed: 1, ..small() }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn counts_follow_the_spec() {
    let spec = small();
    let ds = generate(&spec).unwrap();
    assert_eq!(ds.scenes.len(), spec.num_scenes);
    assert_eq!(ds.texts.len(), spec.num_texts());
    assert_eq!(ds.noise_rate, 0.0);
    assert_eq!(ds.noisy_count(), 0);
    for s in &ds.scenes {
        assert_eq!(s.features.tokens().shape(), [spec.p_n, spec.d_f]);
        let c = s.features.centroids().unwrap();
        for p in c.coords() {
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    for t in &ds.texts {
        assert_eq!(t.features.tokens().shape(), [spec.t_n, spec.d_f]);
        assert!(t.features.centroids().is_none());
        assert_eq!(ds.clean_map[&t.id], t.scene_id);
    }
}

#[test]
fn zero_jitter_text_tokens_copy_scene_prototypes() {
    let spec = GeneratorSpec {
        jitter_sigma: 0.0,
        distractor_ratio: 0.0,
        ..small()
    };
    let ds = generate(&spec).unwrap();
    for t in &ds.texts {
        let scene = &ds.scenes[ds.scene_position(t.scene_id).unwrap()];
        let scene_rows = rows(scene.features.tokens());
        for word in rows(t.features.tokens()) {
            assert!(scene_rows.contains(&word));
            let norm: f64 = word.iter().map(|x| x * x).sum();
            assert!(libm::fabs(norm - 1.0) < 1e-12);
        }
    }
}

#[test]
fn echoes_cover_the_required_share_of_prototypes() {
    let spec = GeneratorSpec {
        jitter_sigma: 0.0,
        ..small()
    };
    let ds = generate(&spec).unwrap();
    for t in &ds.texts {
        let scene = &ds.scenes[ds.scene_position(t.scene_id).unwrap()];
        let scene_rows: BTreeSet<Vec<u64>> = rows(scene.features.tokens())
            .iter()
            .map(|r| r.iter().map(|x| x.to_bits()).collect())
            .collect();
        let echoed: BTreeSet<Vec<u64>> = rows(t.features.tokens())
            .iter()
            .map(|r| r.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
            .filter(|r| scene_rows.contains(r))
            .collect();
        let needed = libm::ceil(spec.coverage_ratio * scene_rows.len() as f64) as usize;
        assert!(echoed.len() >= needed, "{} < {needed}", echoed.len());
    }
}

#[test]
fn nearest_scene_mean_beats_chance_on_the_default_spec() {
    let ds = generate(&GeneratorSpec::default()).unwrap();
    let mean = |a: &DenseArray| -> Vec<f64> {
        let mut m = alloc::vec![0.0; a.cols()];
        for r in rows(a) {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v / a.rows() as f64;
            }
        }
        let n = libm::sqrt(m.iter().map(|x| x * x).sum());
        m.into_iter().map(|x| x / n).collect()
    };
    let scene_means: Vec<Vec<f64>> = ds.scenes.iter().map(|s| mean(s.features.tokens())).collect();
    let mut hits = 0;
    for t in &ds.texts {
        let q = mean(t.features.tokens());
        let best = (0..scene_means.len())
            .max_by(|&a, &b| {
                let da: f64 = q.iter().zip(&scene_means[a]).map(|(x, y)| x * y).sum();
                let db: f64 = q.iter().zip(&scene_means[b]).map(|(x, y)| x * y).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if ds.scenes[best].id == t.scene_id {
            hits += 1;
        }
    }
    let accuracy = hits as f64 / ds.texts.len() as f64;
    assert!(accuracy > 5.0 / ds.scenes.len() as f64, "accuracy {accuracy}");
}

#[test]
fn t_n_too_small_for_coverage_is_rejected() {
    let spec = GeneratorSpec {
        t_n: 2,
        coverage_ratio: 1.0,
        ..small()
    };
    assert!(matches!(generate(&spec), Err(Error::Config(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        GeneratorSpec { num_scenes: 0, ..small() },
        GeneratorSpec { d_f: 0, ..small() },
        GeneratorSpec { coverage_ratio: 1.5, ..small() },
        GeneratorSpec { distractor_ratio: -0.1, ..small() },
        GeneratorSpec { jitter_sigma: -1.0, ..small() },
        GeneratorSpec { jitter_sigma: f64::NAN, ..small() },
    ];
    for spec in bad {
        assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
    }
}

#[test]
fn zero_rate_leaves_the_assignment_clean() {
    let ds = generate(&small()).unwrap();
    let noisy = inject_noise(&ds, 0.0, 5).unwrap();
    assert_eq!(noisy.texts, ds.texts);
    assert_eq!(noisy.assigned_pairs().unwrap(), ds.clean_pairs().unwrap());
}

#[test]
fn thirteen_of_one_hundred_texts_are_reassigned() {
    let ds = generate(&small()).unwrap();
    assert_eq!(ds.texts.len(), 100);
    let noisy = inject_noise(&ds, 0.13, 7).unwrap();
    assert_eq!(noisy.noisy_count(), 13);
    assert_eq!(noisy.clean_map, ds.clean_map);
    assert_eq!(noisy.noise_rate, 0.13);
    for t in &noisy.texts {
        assert!(noisy.scene_position(t.scene_id).is_some());
    }
}

#[test]
fn full_rate_moves_every_text() {
    let ds = generate(&small()).unwrap();
    let noisy = inject_noise(&ds, 1.0, 1).unwrap();
    assert_eq!(noisy.noisy_count(), ds.texts.len());
}

#[test]
fn noise_count_rounds_half_up() {
    assert_eq!(round_half_up(2.5), 3);
    assert_eq!(round_half_up(2.49), 2);
    let ds = generate(&GeneratorSpec { num_scenes: 2, texts_per_scene: 5, ..small() }).unwrap();
    assert_eq!(inject_noise(&ds, 0.25, 0).unwrap().noisy_count(), 3);
}

#[test]
fn noise_is_deterministic_in_the_seed() {
    let ds = generate(&small()).unwrap();
    assert_eq!(inject_noise(&ds, 0.4, 9).unwrap(), inject_noise(&ds, 0.4, 9).unwrap());
    assert_ne!(inject_noise(&ds, 0.4, 9).unwrap(), inject_noise(&ds, 0.4, 10).unwrap());
}

#[test]
fn noise_rate_outside_unit_interval_is_rejected() {
    let ds = generate(&small()).unwrap();
    for rate in [-0.1, 1.1, f64::NAN] {
        assert!(matches!(inject_noise(&ds, rate, 0), Err(Error::Config(_))));
    }
}

#[test]
fn default_split_sizes() {
    let ds = generate(&GeneratorSpec { p_n: 4, t_n: 4, d_f: 4, ..GeneratorSpec::default() }).unwrap();
    let parts = split(&ds, [0.8, 0.1, 0.1], 0).unwrap();
    let sizes: Vec<usize> = parts.iter().map(|p| p.scenes.len()).collect();
    assert_eq!(sizes, [160, 20, 20]);
}

#[test]
fn split_is_a_scene_partition_and_texts_follow() {
    let ds = inject_noise(&generate(&small()).unwrap(), 0.3, 2).unwrap();
    let parts = split(&ds, [0.6, 0.2, 0.2], 4).unwrap();
    let mut seen = BTreeSet::new();
    for part in &parts {
        for s in &part.scenes {
            assert!(seen.insert(s.id));
        }
        for t in &part.texts {
            assert!(part.scene_position(part.clean_map[&t.id]).is_some());
        }
    }
    assert_eq!(seen, ds.scenes.iter().map(|s| s.id).collect());
    assert_eq!(parts.iter().map(|p| p.texts.len()).sum::<usize>(), ds.texts.len());
    assert_eq!(split(&ds, [0.6, 0.2, 0.2], 4).unwrap(), parts);
}

#[test]
fn degenerate_splits_are_rejected() {
    let ds = generate(&small()).unwrap();
    for f in [[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.98, 0.01, 0.01]] {
        assert!(matches!(split(&ds, f, 0), Err(Error::Config(_))), "{f:?}");
    }
}

#[test]
fn prepare_noises_only_the_training_part() {
    let spec = small();
    let [train, val, test] = prepare(&spec, [0.6, 0.2, 0.2], 0.5).unwrap();
    assert_eq!(train.noisy_count(), round_half_up(0.5 * train.texts.len() as f64));
    assert_eq!(val.noisy_count(), 0);
    assert_eq!(test.noisy_count(), 0);
    assert!(train.assigned_pairs().is_ok());
    assert_eq!(prepare(&spec, [0.6, 0.2, 0.2], 0.5).unwrap()[0], train);
}

#[test]
fn derived_seeds_differ_by_stage_and_master() {
    let seeds = [
        derive_seed(0, SPLIT_STAGE),
        derive_seed(0, NOISE_STAGE),
        derive_seed(1, SPLIT_STAGE),
        derive_seed(1, NOISE_STAGE),
    ];
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    assert_eq!(distinct.len(), 4);
    assert_eq!(derive_seed(0, SPLIT_STAGE), seeds[0]);
}
