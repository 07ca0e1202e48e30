//! Bidirectional retrieval metrics and attention inspection.
//!
//! Similarity is the dot product of unit embeddings. Since the batch softmax
//! is strictly increasing per row, rankings by dot product and by softmax
//! similarity agree for any positive temperature.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dap::{attention_maps, embed, CommonEmbedding, DapConfig, DapParams, Modality, TokenFeatures};
use crate::error::{Error, Result};
use crate::synth::Dataset;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Embeddings with their sample ids, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub embeddings: Vec<CommonEmbedding>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionRecall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl DirectionRecall {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

/// Recall percentages per direction and their total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub p2t: DirectionRecall,
    pub t2p: DirectionRecall,
    pub rsum: f64,
}

impl RetrievalMetrics {
    pub fn new(p2t: DirectionRecall, t2p: DirectionRecall) -> Self {
        Self {
            p2t,
            t2p,
            rsum: p2t.sum() + t2p.sum(),
        }
    }

    /// `p2t r1/r5/r10 | t2p r1/r5/r10 | rsum`, one decimal each.
    pub fn summary(&self) -> String {
        format!(
            "p2t {:.1}/{:.1}/{:.1} | t2p {:.1}/{:.1}/{:.1} | rsum {:.1}",
            self.p2t.r1, self.p2t.r5, self.p2t.r10, self.t2p.r1, self.t2p.r5, self.t2p.r10, self.rsum
        )
    }
}

pub fn encode<'a>(
    samples: impl IntoIterator<Item = (usize, &'a TokenFeatures)>,
    params: &DapParams,
    config: &DapConfig,
) -> Result<Corpus> {
    let mut ids = Vec::new();
    let mut embeddings = Vec::new();
    for (id, s) in samples {
        ids.push(id);
        embeddings.push(embed(s, params, config)?);
    }
    Ok(Corpus { ids, embeddings })
}

/// Embeds every scene and every text of `ds` once.
pub fn encode_corpus(ds: &Dataset, params: &DapParams, config: &DapConfig) -> Result<(Corpus, Corpus)> {
    let scenes = encode(ds.scenes.iter().map(|s| (s.id, &s.features)), params, config)?;
    let texts = encode(ds.texts.iter().map(|t| (t.id, &t.features)), params, config)?;
    Ok((scenes, texts))
}

/// Whether `(score_a, id_a)` ranks before `(score_b, id_b)`: higher score
/// first, ties to the lower id.
fn ranks_before(score_a: f64, id_a: usize, score_b: f64, id_b: usize) -> bool {
    score_a > score_b || (score_a == score_b && id_a < id_b)
}

/// Corpus ids sorted by descending dot product with `query`, ties by id.
pub fn rank_query(query: &CommonEmbedding, corpus: &Corpus) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::Usage("cannot rank against an empty corpus".into()));
    }
    let mut scored: Vec<(f64, usize)> = corpus
        .embeddings
        .iter()
        .zip(&corpus.ids)
        .map(|(e, &id)| (query.dot(e), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// 1-based rank of the best-placed corpus item in `targets`.
fn best_rank(query: &CommonEmbedding, corpus: &Corpus, targets: &[usize]) -> usize {
    let scores: Vec<f64> = corpus.embeddings.iter().map(|e| query.dot(e)).collect();
    targets
        .iter()
        .map(|&t| {
            let (st, idt) = (scores[t], corpus.ids[t]);
            1 + scores
                .iter()
                .zip(&corpus.ids)
                .filter(|&(&s, &id)| ranks_before(s, id, st, idt))
                .count()
        })
        .min()
        .expect("at least one target")
}

/// Percentage of `ranks` at or below each cutoff.
pub fn recall_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect()
}

fn direction(ranks: &[usize]) -> DirectionRecall {
    let r = recall_from_ranks(ranks, &RECALL_KS);
    DirectionRecall {
        r1: r[0],
        r5: r[1],
        r10: r[2],
    }
}

/// Ranks for both directions: text queries against scenes, and scene queries
/// against texts where any ground-truth text counts.
pub fn query_ranks(
    scenes: &Corpus,
    texts: &Corpus,
    ground_truth: &BTreeMap<usize, usize>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if scenes.is_empty() || texts.is_empty() {
        return Err(Error::Usage("retrieval needs nonempty scene and text corpora".into()));
    }
    let scene_pos: BTreeMap<usize, usize> =
        scenes.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut texts_of_scene: Vec<Vec<usize>> = alloc::vec![Vec::new(); scenes.len()];
    let mut t2p = Vec::with_capacity(texts.len());
    for (ti, (tid, emb)) in texts.ids.iter().zip(&texts.embeddings).enumerate() {
        let sid = ground_truth
            .get(tid)
            .ok_or_else(|| Error::Usage(format!("text {tid} has no ground-truth scene")))?;
        let &si = scene_pos
            .get(sid)
            .ok_or_else(|| Error::Usage(format!("text {tid} maps to unknown scene {sid}")))?;
        texts_of_scene[si].push(ti);
        t2p.push(best_rank(emb, scenes, &[si]));
    }
    let mut p2t = Vec::with_capacity(scenes.len());
    for (si, emb) in scenes.embeddings.iter().enumerate() {
        if texts_of_scene[si].is_empty() {
            return Err(Error::Usage(format!(
                "scene {} has no ground-truth text",
                scenes.ids[si]
            )));
        }
        p2t.push(best_rank(emb, texts, &texts_of_scene[si]));
    }
    Ok((p2t, t2p))
}

/// R@1/5/10 in both directions against `ground_truth` (text id to scene id).
pub fn recall_at_k(
    scenes: &Corpus,
    texts: &Corpus,
    ground_truth: &BTreeMap<usize, usize>,
) -> Result<RetrievalMetrics> {
    let (p2t, t2p) = query_ranks(scenes, texts, ground_truth)?;
    Ok(RetrievalMetrics::new(direction(&p2t), direction(&t2p)))
}

/// Encodes `ds` and scores it against its clean pairing.
pub fn evaluate(ds: &Dataset, params: &DapParams, config: &DapConfig) -> Result<RetrievalMetrics> {
    let (scenes, texts) = encode_corpus(ds, params, config)?;
    recall_at_k(&scenes, &texts, &ds.clean_map)
}

/// Per-token attention weights of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: usize,
    pub modality: Modality,
    /// Token-level weights, summing to one.
    pub token_weights: Vec<f64>,
    /// Mean over features of the dual attention, per token.
    pub dual_weights: Vec<f64>,
}

pub fn attention_dump(
    id: usize,
    sample: &TokenFeatures,
    params: &DapParams,
    config: &DapConfig,
) -> Result<AttentionRecord> {
    let maps = attention_maps(sample, params, config)?;
    let d = maps.dual.cols() as f64;
    let dual_weights = (0..maps.dual.rows())
        .map(|i| maps.dual.row(i).iter().sum::<f64>() / d)
        .collect();
    Ok(AttentionRecord {
        id,
        modality: sample.modality(),
        token_weights: maps.token,
        dual_weights,
    })
}

#[cfg(test)]
mod tests;
