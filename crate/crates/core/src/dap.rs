//! Dual attention perception: pooling a sample's token features into one
//! unit-norm vector of the shared space.
//!
//! Per modality, a sample's token matrix `Z` (`n × d_f`) is projected to
//! queries `Q` and values `V` (`n × d_c`). Two dataset-wide learnable keys then
//! produce the attention:
//!
//! * token level: `ā = softmax_tokens((Q + E) K̄)`, one weight per token, where
//!   `E` is the patch position embedding (point clouds only);
//! * feature level: `Â = softmax((Q K̂ᵀ))`, one weight per token and feature,
//!   normalized over tokens by default.
//!
//! The dual attention `A = Ā ⊙ Â` (`Ā` repeats `ā` across the `d_c` columns)
//! weights the values, and the embedding is `normalize(mean_tokens(A ⊙ V))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::graph::{Axis, GradGraph, NodeId};
use crate::posenc::{patch_position_embedding, PatchCentroids, PositionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    PointCloud,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::PointCloud => "pointcloud",
            Modality::Text => "text",
        }
    }
}

/// One sample's token features. Point clouds carry one centroid per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatures {
    tokens: DenseArray,
    modality: Modality,
    centroids: Option<PatchCentroids>,
}

impl TokenFeatures {
    pub fn point_cloud(tokens: DenseArray, centroids: PatchCentroids) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Config("a point cloud needs at least one patch".into()));
        }
        if centroids.len() != tokens.rows() {
            return Err(Error::Config(format!(
                "{} patches but {} centroids",
                tokens.rows(),
                centroids.len()
            )));
        }
        Ok(Self {
            tokens,
            modality: Modality::PointCloud,
            centroids: Some(centroids),
        })
    }

    pub fn text(tokens: DenseArray) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Config("a text needs at least one token".into()));
        }
        Ok(Self {
            tokens,
            modality: Modality::Text,
            centroids: None,
        })
    }

    pub fn tokens(&self) -> &DenseArray {
        &self.tokens
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn centroids(&self) -> Option<&PatchCentroids> {
        self.centroids.as_ref()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Reorders tokens (and centroids, jointly) so that row `i` of the result
    /// is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let rows: Vec<&[f64]> = order.iter().map(|&i| self.tokens.row(i)).collect();
        Self {
            tokens: DenseArray::from_rows(&rows).expect("permuted rows keep their width"),
            modality: self.modality,
            centroids: self.centroids.as_ref().map(|c| c.permuted(order)),
        }
    }
}

/// Projection weights and Generic-Keys for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    /// `d_f × d_c`
    pub w_query: DenseArray,
    /// `1 × d_c`
    pub b_query: DenseArray,
    /// `d_f × d_c`
    pub w_value: DenseArray,
    /// `1 × d_c`
    pub b_value: DenseArray,
    /// Token-level key, `d_c × 1`.
    pub token_key: DenseArray,
    /// Feature-level key, `d_c × d_c`.
    pub feature_key: DenseArray,
}

pub const PARAM_NAMES: [&str; 6] = [
    "w_query",
    "b_query",
    "w_value",
    "b_value",
    "token_key",
    "feature_key",
];

impl ModalityParams {
    pub fn zeros(d_f: usize, d_c: usize) -> Self {
        Self {
            w_query: DenseArray::zeros(d_f, d_c),
            b_query: DenseArray::zeros(1, d_c),
            w_value: DenseArray::zeros(d_f, d_c),
            b_value: DenseArray::zeros(1, d_c),
            token_key: DenseArray::zeros(d_c, 1),
            feature_key: DenseArray::zeros(d_c, d_c),
        }
    }

    /// Fan-based uniform projections, zero biases, small Gaussian keys.
    pub fn init<R: Rng + ?Sized>(d_f: usize, d_c: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / (d_f + d_c) as f64);
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut fill = |rows: usize, cols: usize, dist: &dyn Fn(&mut R) -> f64| {
            let values = (0..rows * cols).map(|_| dist(rng)).collect();
            DenseArray::from_raw(rows, cols, values)
        };
        let w_query = fill(d_f, d_c, &|r| uniform.sample(r));
        let w_value = fill(d_f, d_c, &|r| uniform.sample(r));
        let token_key = fill(d_c, 1, &|r| normal.sample(r));
        let feature_key = fill(d_c, d_c, &|r| normal.sample(r));
        Self {
            w_query,
            b_query: DenseArray::zeros(1, d_c),
            w_value,
            b_value: DenseArray::zeros(1, d_c),
            token_key,
            feature_key,
        }
    }

    pub fn arrays(&self) -> [&DenseArray; 6] {
        [
            &self.w_query,
            &self.b_query,
            &self.w_value,
            &self.b_value,
            &self.token_key,
            &self.feature_key,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut DenseArray; 6] {
        [
            &mut self.w_query,
            &mut self.b_query,
            &mut self.w_value,
            &mut self.b_value,
            &mut self.token_key,
            &mut self.feature_key,
        ]
    }

    fn check(&self, d_f: usize, d_c: usize) -> Result<()> {
        let expected = [
            [d_f, d_c],
            [1, d_c],
            [d_f, d_c],
            [1, d_c],
            [d_c, 1],
            [d_c, d_c],
        ];
        for (a, want) in self.arrays().into_iter().zip(expected) {
            if a.shape() != want {
                return Err(Error::Dimension {
                    op: "DapParams",
                    left: want,
                    right: a.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Parameters for both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapParams {
    pub point: ModalityParams,
    pub text: ModalityParams,
}

impl DapParams {
    pub fn init<R: Rng + ?Sized>(d_f: usize, d_c: usize, rng: &mut R) -> Self {
        let point = ModalityParams::init(d_f, d_c, rng);
        let text = ModalityParams::init(d_f, d_c, rng);
        Self { point, text }
    }

    pub fn zeros(d_f: usize, d_c: usize) -> Self {
        Self {
            point: ModalityParams::zeros(d_f, d_c),
            text: ModalityParams::zeros(d_f, d_c),
        }
    }

    pub fn d_f(&self) -> usize {
        self.point.w_query.rows()
    }

    pub fn d_c(&self) -> usize {
        self.point.w_query.cols()
    }

    pub fn modality(&self, m: Modality) -> &ModalityParams {
        match m {
            Modality::PointCloud => &self.point,
            Modality::Text => &self.text,
        }
    }

    /// Point-cloud arrays first, then text, each in [`PARAM_NAMES`] order.
    pub fn arrays(&self) -> Vec<&DenseArray> {
        self.point.arrays().into_iter().chain(self.text.arrays()).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        let Self { point, text } = self;
        point.arrays_mut().into_iter().chain(text.arrays_mut()).collect()
    }

    /// Names like `point.w_query`, in [`DapParams::arrays`] order.
    pub fn names() -> Vec<String> {
        ["point", "text"]
            .iter()
            .flat_map(|m| PARAM_NAMES.iter().map(move |p| format!("{m}.{p}")))
            .collect()
    }

    /// Rebuilds parameters from arrays in [`DapParams::arrays`] order.
    pub fn from_arrays(arrays: Vec<DenseArray>) -> Result<Self> {
        if arrays.len() != 12 {
            return Err(Error::Config(format!("expected 12 parameter arrays, got {}", arrays.len())));
        }
        let mut it = arrays.into_iter();
        let mut take = || -> ModalityParams {
            ModalityParams {
                w_query: it.next().unwrap(),
                b_query: it.next().unwrap(),
                w_value: it.next().unwrap(),
                b_value: it.next().unwrap(),
                token_key: it.next().unwrap(),
                feature_key: it.next().unwrap(),
            }
        };
        let point = take();
        let text = take();
        let params = Self { point, text };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_f, d_c) = (self.d_f(), self.d_c());
        self.point.check(d_f, d_c)?;
        self.text.check(d_f, d_c)?;
        if let Some(i) = self.arrays().iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(())
    }

    /// Registers every array as a trainable leaf.
    pub fn register(&self, graph: &mut GradGraph) -> DapHandles {
        let mut reg = |p: &ModalityParams| ModalityHandles {
            w_query: graph.leaf(p.w_query.clone()),
            b_query: graph.leaf(p.b_query.clone()),
            w_value: graph.leaf(p.w_value.clone()),
            b_value: graph.leaf(p.b_value.clone()),
            token_key: graph.leaf(p.token_key.clone()),
            feature_key: graph.leaf(p.feature_key.clone()),
        };
        let point = reg(&self.point);
        let text = reg(&self.text);
        DapHandles { point, text }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModalityHandles {
    pub w_query: NodeId,
    pub b_query: NodeId,
    pub w_value: NodeId,
    pub b_value: NodeId,
    pub token_key: NodeId,
    pub feature_key: NodeId,
}

impl ModalityHandles {
    pub fn ids(&self) -> [NodeId; 6] {
        [
            self.w_query,
            self.b_query,
            self.w_value,
            self.b_value,
            self.token_key,
            self.feature_key,
        ]
    }
}

/// Graph handles for a registered [`DapParams`].
#[derive(Debug, Clone, Copy)]
pub struct DapHandles {
    pub point: ModalityHandles,
    pub text: ModalityHandles,
}

impl DapHandles {
    pub fn modality(&self, m: Modality) -> &ModalityHandles {
        match m {
            Modality::PointCloud => &self.point,
            Modality::Text => &self.text,
        }
    }

    /// Ids in [`DapParams::arrays`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.point.ids().into_iter().chain(self.text.ids()).collect()
    }
}

/// Architecture switches. Disabled attentions are replaced by all-ones maps,
/// which keeps the parameter count fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DapConfig {
    pub token_attention: bool,
    pub feature_attention: bool,
    pub position_embedding: bool,
    /// Normalization axis of the feature-level softmax. `column` normalizes
    /// each feature over the tokens; `row` normalizes each token over features.
    pub feature_softmax_axis: Axis,
    pub position: PositionConfig,
}

impl Default for DapConfig {
    fn default() -> Self {
        Self {
            token_attention: true,
            feature_attention: true,
            position_embedding: true,
            feature_softmax_axis: Axis::Column,
            position: PositionConfig::default(),
        }
    }
}

/// Unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommonEmbedding(Vec<f64>);

impl CommonEmbedding {
    pub fn from_unit(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }
}

/// Forward attention values for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// `ā`, one weight per token.
    pub token: Vec<f64>,
    /// `Ā`, `ā` repeated across `d_c` columns.
    pub token_matrix: DenseArray,
    /// `Â`, `n × d_c`.
    pub feature: DenseArray,
    /// `A = Ā ⊙ Â`.
    pub dual: DenseArray,
}

/// `Q = Z W_Q + b_Q`, `V = Z W_V + b_V`.
pub fn project(graph: &mut GradGraph, h: &ModalityHandles, z: NodeId) -> Result<(NodeId, NodeId)> {
    let zq = graph.matmul(z, h.w_query)?;
    let q = graph.add(zq, h.b_query)?;
    let zv = graph.matmul(z, h.w_value)?;
    let v = graph.add(zv, h.b_value)?;
    Ok((q, v))
}

/// `ā = softmax_tokens((Q [+ E]) K̄)`, as an `n × 1` column.
pub fn token_attention(
    graph: &mut GradGraph,
    q: NodeId,
    position: Option<NodeId>,
    token_key: NodeId,
) -> Result<NodeId> {
    let input = match position {
        Some(e) => graph.add(q, e)?,
        None => q,
    };
    let logits = graph.matmul(input, token_key)?;
    graph.softmax(logits, Axis::Column)
}

/// `Â = softmax(Q K̂ᵀ)` along `axis`.
pub fn feature_attention(
    graph: &mut GradGraph,
    q: NodeId,
    feature_key: NodeId,
    axis: Axis,
) -> Result<NodeId> {
    let kt = graph.transpose(feature_key);
    let logits = graph.matmul(q, kt)?;
    graph.softmax(logits, axis)
}

/// Combines the attentions with the values and pools to a unit vector. A
/// missing attention stands for an all-ones map.
pub fn dual_aggregate(
    graph: &mut GradGraph,
    token: Option<NodeId>,
    feature: Option<NodeId>,
    values: NodeId,
) -> Result<NodeId> {
    let mut weighted = values;
    if let Some(f) = feature {
        weighted = graph.hadamard(weighted, f)?;
    }
    if let Some(t) = token {
        weighted = graph.hadamard(weighted, t)?;
    }
    let pooled = graph.mean_over_tokens(weighted)?;
    graph.l2_normalize(pooled)
}

/// Graph nodes produced while embedding one sample.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    /// `1 × d_c` unit vector.
    pub embedding: NodeId,
    pub token_attention: Option<NodeId>,
    pub feature_attention: Option<NodeId>,
}

pub fn embed_on_graph(
    graph: &mut GradGraph,
    handles: &DapHandles,
    sample: &TokenFeatures,
    config: &DapConfig,
) -> Result<EmbeddingNodes> {
    let h = handles.modality(sample.modality());
    let d_f = graph.value(h.w_query).rows();
    let d_c = graph.value(h.w_query).cols();
    if sample.feature_dim() != d_f {
        return Err(Error::Config(format!(
            "sample has {} features per token, parameters expect {d_f}",
            sample.feature_dim()
        )));
    }
    let z = graph.constant(sample.tokens().clone());
    let (q, v) = project(graph, h, z)?;
    let token = if config.token_attention {
        let position = match (sample.centroids(), config.position_embedding) {
            (Some(c), true) => {
                Some(graph.constant(patch_position_embedding(c, d_c, config.position)?))
            }
            _ => None,
        };
        Some(token_attention(graph, q, position, h.token_key)?)
    } else {
        None
    };
    let feature = if config.feature_attention {
        Some(feature_attention(graph, q, h.feature_key, config.feature_softmax_axis)?)
    } else {
        None
    };
    let embedding = dual_aggregate(graph, token, feature, v)?;
    Ok(EmbeddingNodes {
        embedding,
        token_attention: token,
        feature_attention: feature,
    })
}

/// Embeds `samples` on one graph and stacks them into a `k × d_c` node.
pub fn embed_batch_on_graph<'a>(
    graph: &mut GradGraph,
    handles: &DapHandles,
    samples: impl IntoIterator<Item = &'a TokenFeatures>,
    config: &DapConfig,
) -> Result<NodeId> {
    let rows = samples
        .into_iter()
        .map(|s| embed_on_graph(graph, handles, s, config).map(|n| n.embedding))
        .collect::<Result<Vec<_>>>()?;
    graph.stack_rows(&rows)
}

pub fn embed(sample: &TokenFeatures, params: &DapParams, config: &DapConfig) -> Result<CommonEmbedding> {
    let mut graph = GradGraph::new();
    let handles = params.register(&mut graph);
    let nodes = embed_on_graph(&mut graph, &handles, sample, config)?;
    Ok(CommonEmbedding(graph.value(nodes.embedding).values().to_vec()))
}

pub fn attention_maps(
    sample: &TokenFeatures,
    params: &DapParams,
    config: &DapConfig,
) -> Result<AttentionMaps> {
    let mut graph = GradGraph::new();
    let handles = params.register(&mut graph);
    let nodes = embed_on_graph(&mut graph, &handles, sample, config)?;
    let n = sample.len();
    let d_c = params.d_c();
    let token: Vec<f64> = match nodes.token_attention {
        Some(t) => graph.value(t).values().to_vec(),
        None => alloc::vec![1.0; n],
    };
    let feature = match nodes.feature_attention {
        Some(f) => graph.value(f).clone(),
        None => DenseArray::filled(n, d_c, 1.0),
    };
    let mut token_matrix = DenseArray::zeros(n, d_c);
    let mut dual = feature.clone();
    for i in 0..n {
        for j in 0..d_c {
            token_matrix.set(i, j, token[i]);
            dual.set(i, j, token[i] * feature.get(i, j));
        }
    }
    Ok(AttentionMaps {
        token,
        token_matrix,
        feature,
        dual,
    })
}
