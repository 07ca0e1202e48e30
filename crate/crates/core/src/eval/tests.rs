use super::*;
use crate::synth::{generate, GeneratorSpec};
use alloc::vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit(v: Vec<f64>) -> CommonEmbedding {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    CommonEmbedding::from_unit(v.into_iter().map(|x| x / n).collect())
}

fn random_corpus(rng: &mut ChaCha8Rng, ids: Vec<usize>, d: usize) -> Corpus {
    let embeddings = ids
        .iter()
        .map(|_| {
            unit((0..d)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect())
        })
        .collect();
    Corpus { ids, embeddings }
}

fn basis(d: usize, i: usize) -> CommonEmbedding {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    CommonEmbedding::from_unit(v)
}

#[test]
fn ranks_one_two_seven_give_thirds() {
    let r = recall_from_ranks(&[1, 2, 7], &RECALL_KS);
    assert!(libm::fabs(r[0] - 100.0 / 3.0) < 1e-12);
    assert!(libm::fabs(r[1] - 200.0 / 3.0) < 1e-12);
    assert_eq!(r[2], 100.0);
    assert_eq!(format!("{:.1}/{:.1}/{:.1}", r[0], r[1], r[2]), "33.3/66.7/100.0");
}

#[test]
fn identity_dominant_similarity_gives_perfect_recall() {
    let d = 6;
    let scenes = Corpus {
        ids: (0..d).collect(),
        embeddings: (0..d).map(|i| basis(d, i)).collect(),
    };
    let texts = Corpus {
        ids: (100..100 + d).collect(),
        embeddings: (0..d).map(|i| basis(d, i)).collect(),
    };
    let gt: BTreeMap<usize, usize> = (0..d).map(|i| (100 + i, i)).collect();
    let m = recall_at_k(&scenes, &texts, &gt).unwrap();
    for r in [m.p2t, m.t2p] {
        assert_eq!([r.r1, r.r5, r.r10], [100.0; 3]);
    }
    assert_eq!(m.rsum, 600.0);
    assert_eq!(m.summary(), "p2t 100.0/100.0/100.0 | t2p 100.0/100.0/100.0 | rsum 600.0");
}

#[test]
fn query_vector_in_corpus_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus = random_corpus(&mut rng, (0..9).collect(), 5);
    for (i, q) in corpus.embeddings.iter().enumerate() {
        assert_eq!(rank_query(q, &corpus).unwrap()[0], corpus.ids[i]);
    }
    let two = Corpus {
        ids: vec![4, 9],
        embeddings: vec![basis(2, 0), basis(2, 1)],
    };
    assert_eq!(rank_query(&basis(2, 1), &two).unwrap(), vec![9, 4]);
}

#[test]
fn ties_go_to_the_lower_id() {
    let e = basis(3, 0);
    let corpus = Corpus {
        ids: vec![7, 2, 5],
        embeddings: vec![e.clone(), e.clone(), e.clone()],
    };
    assert_eq!(rank_query(&e, &corpus).unwrap(), vec![2, 5, 7]);
}

#[test]
fn empty_corpus_is_a_usage_error() {
    let empty = Corpus {
        ids: Vec::new(),
        embeddings: Vec::new(),
    };
    assert!(matches!(rank_query(&basis(2, 0), &empty), Err(Error::Usage(_))));
    let one = Corpus {
        ids: vec![0],
        embeddings: vec![basis(2, 0)],
    };
    let gt = BTreeMap::from([(0, 0)]);
    assert!(matches!(recall_at_k(&one, &empty, &gt), Err(Error::Usage(_))));
    assert!(matches!(recall_at_k(&empty, &one, &gt), Err(Error::Usage(_))));
}

#[test]
fn missing_ground_truth_is_a_usage_error() {
    let one = Corpus {
        ids: vec![0],
        embeddings: vec![basis(2, 0)],
    };
    assert!(matches!(recall_at_k(&one, &one, &BTreeMap::new()), Err(Error::Usage(_))));
    assert!(matches!(recall_at_k(&one, &one, &BTreeMap::from([(0, 3)])), Err(Error::Usage(_))));
}

#[test]
fn ranks_match_a_brute_force_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n_s = rng.random_range(1..12);
        let per = rng.random_range(1..4);
        let scenes = random_corpus(&mut rng, (0..n_s).map(|i| 3 * i + 1).collect(), 4);
        let texts = random_corpus(&mut rng, (0..n_s * per).collect(), 4);
        let gt: BTreeMap<usize, usize> = texts.ids.iter().map(|&t| (t, scenes.ids[t / per])).collect();
        let (p2t, t2p) = query_ranks(&scenes, &texts, &gt).unwrap();
        for (ti, &tid) in texts.ids.iter().enumerate() {
            let order = rank_query(&texts.embeddings[ti], &scenes).unwrap();
            let expect = 1 + order.iter().position(|&s| s == gt[&tid]).unwrap();
            assert_eq!(t2p[ti], expect);
        }
        for (si, &sid) in scenes.ids.iter().enumerate() {
            let order = rank_query(&scenes.embeddings[si], &texts).unwrap();
            let expect = 1 + order.iter().position(|t| gt[t] == sid).unwrap();
            assert_eq!(p2t[si], expect);
        }
    }
}

#[test]
fn recall_is_invariant_under_corpus_reordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scenes = random_corpus(&mut rng, (0..15).collect(), 3);
    let texts = random_corpus(&mut rng, (0..30).collect(), 3);
    let gt: BTreeMap<usize, usize> = (0..30).map(|t| (t, t / 2)).collect();
    let base = recall_at_k(&scenes, &texts, &gt).unwrap();
    let reversed = |c: &Corpus| Corpus {
        ids: c.ids.iter().rev().copied().collect(),
        embeddings: c.embeddings.iter().rev().cloned().collect(),
    };
    assert_eq!(recall_at_k(&reversed(&scenes), &reversed(&texts), &gt).unwrap(), base);
}

#[test]
fn any_ground_truth_text_counts_for_scene_queries() {
    let scenes = Corpus {
        ids: vec![0, 1],
        embeddings: vec![basis(3, 0), basis(3, 1)],
    };
    let texts = Corpus {
        ids: vec![10, 11, 12],
        embeddings: vec![basis(3, 2), basis(3, 0), basis(3, 1)],
    };
    let gt = BTreeMap::from([(10, 0), (11, 0), (12, 1)]);
    let (p2t, t2p) = query_ranks(&scenes, &texts, &gt).unwrap();
    assert_eq!(p2t, vec![1, 1]);
    assert_eq!(t2p, vec![1, 1, 1]);
}

#[test]
fn evaluation_uses_the_clean_pairing() {
    let spec = GeneratorSpec {
        num_scenes: 6,
        texts_per_scene: 2,
        p_n: 4,
        t_n: 4,
        d_f: 6,
        num_prototypes: 5,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let noisy = crate::synth::inject_noise(&ds, 1.0, 0).unwrap();
    let params = DapParams::init(6, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let config = DapConfig::default();
    assert_eq!(evaluate(&ds, &params, &config).unwrap(), evaluate(&noisy, &params, &config).unwrap());
}

#[test]
fn zero_keys_give_uniform_token_weights() {
    let ds = generate(&GeneratorSpec {
        num_scenes: 2,
        texts_per_scene: 1,
        p_n: 5,
        t_n: 3,
        d_f: 4,
        num_prototypes: 3,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let mut params = DapParams::init(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
    for m in [&mut params.point, &mut params.text] {
        m.token_key = crate::DenseArray::zeros(4, 1);
        m.feature_key = crate::DenseArray::zeros(4, 4);
    }
    let config = DapConfig::default();
    let rec = attention_dump(0, &ds.scenes[0].features, &params, &config).unwrap();
    assert_eq!(rec.modality, Modality::PointCloud);
    for &w in &rec.token_weights {
        assert!(libm::fabs(w - 0.2) < 1e-12);
    }
    let rec = attention_dump(0, &ds.texts[0].features, &params, &config).unwrap();
    assert_eq!(rec.modality, Modality::Text);
    for &w in &rec.token_weights {
        assert!(libm::fabs(w - 1.0 / 3.0) < 1e-12);
    }
}

#[test]
fn token_weights_form_a_distribution() {
    let ds = generate(&GeneratorSpec {
        num_scenes: 3,
        texts_per_scene: 2,
        p_n: 6,
        t_n: 5,
        d_f: 8,
        num_prototypes: 6,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let params = DapParams::init(8, 6, &mut ChaCha8Rng::seed_from_u64(3));
    let config = DapConfig::default();
    let samples = ds
        .scenes
        .iter()
        .map(|s| (s.id, &s.features))
        .chain(ds.texts.iter().map(|t| (t.id, &t.features)));
    for (id, f) in samples {
        let rec = attention_dump(id, f, &params, &config).unwrap();
        assert_eq!(rec.token_weights.len(), f.len());
        assert_eq!(rec.dual_weights.len(), f.len());
        assert!(libm::fabs(rec.token_weights.iter().sum::<f64>() - 1.0) < 1e-9);
        assert!(rec.token_weights.iter().all(|&w| w > 0.0));
    }
}
