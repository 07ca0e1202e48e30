//! Batch softmax similarities and the three training objectives.
//!
//! For a batch of `K` point-cloud embeddings `p_i` and text embeddings `t_j`,
//! `S^{p→t}` is the row softmax of `p_i·t_j / τ` and `S^{t→p}` the row softmax
//! of `t_i·p_j / τ`. With binary labels `y` (point `i`, text `j`):
//!
//! * contrastive: `-(1/K) Σ_i log S_{i,π(i)}` per direction, π the positive;
//! * complementary: `-(1/K) Σ_{ij} (1 - y_ij) log(1 - S_ij)` per direction;
//! * robust negative: `-(1/K) Σ_{ij} (1 - y_ij) (1 - S_ij)^{1/α} log(1 - S_ij)`.
//!
//! The last one is non-monotone in `S`. Per pair, `ℓ(S) = -(1-S)^{1/α} log(1-S)`
//! has `dℓ/dS = (1/α)(1-S)^{(1-α)/α} (log(1-S) + α)`, positive below
//! `S* = 1 - e^{-α}` and negative above it, so minimizing pushes low-similarity
//! negatives apart and pulls high-similarity (likely mislabeled) ones closer.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::dap::CommonEmbedding;
use crate::error::{Error, Result};
use crate::graph::{Axis, GradGraph, NodeId};

/// Similarities are clamped to this before `log(1 - S)`.
pub const SIMILARITY_CEILING: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Complementary,
    Rnc,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Contrastive, LossKind::Complementary, LossKind::Rnc];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Complementary => "complementary",
            LossKind::Rnc => "rnc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Controls where the per-pair gradient flips sign.
    pub alpha: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Rnc,
            alpha: 2.5,
            tau: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.alpha > 0.0) || self.alpha.is_nan() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    PointToText,
    TextToPoint,
}

/// Binary `K × K` labels; `y[i][j] = 1` when point cloud `i` and text `j` are
/// paired.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceLabels(DenseArray);

impl CorrespondenceLabels {
    pub fn new(y: DenseArray) -> Result<Self> {
        if y.rows() != y.cols() {
            return Err(Error::Label(format!("labels must be square, got {:?}", y.shape())));
        }
        if let Some(i) = y.values().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label(format!("label at index {i} is not 0 or 1")));
        }
        Ok(Self(y))
    }

    /// In-batch pairing: the diagonal is positive, everything else negative.
    pub fn identity(k: usize) -> Self {
        Self(DenseArray::identity(k))
    }

    pub fn all_positive(k: usize) -> Self {
        Self(DenseArray::filled(k, k, 1.0))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn as_array(&self) -> &DenseArray {
        &self.0
    }

    /// Labels indexed the way `direction`'s similarity rows are.
    fn oriented(&self, direction: Direction) -> DenseArray {
        match direction {
            Direction::PointToText => self.0.clone(),
            Direction::TextToPoint => self.0.transpose(),
        }
    }

    fn negatives(&self, direction: Direction) -> DenseArray {
        self.oriented(direction).map(|y| 1.0 - y)
    }

    fn require_single_positive(&self, direction: Direction) -> Result<DenseArray> {
        let y = self.oriented(direction);
        for i in 0..y.rows() {
            let count = y.row(i).iter().filter(|&&v| v == 1.0).count();
            if count != 1 {
                return Err(Error::Label(format!(
                    "row {i} has {count} positives, the contrastive loss needs exactly one"
                )));
            }
        }
        Ok(y)
    }
}

/// Row-stochastic similarity matrix for one retrieval direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub probs: DenseArray,
    pub direction: Direction,
    pub tau: f64,
}

/// Similarity nodes for one direction.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityNodes {
    pub probs: NodeId,
    pub log_probs: NodeId,
    /// `1 - S`, floored at `1 - SIMILARITY_CEILING`.
    pub complement: NodeId,
}

/// Builds `S` for `direction` from stacked `K × d` embeddings.
pub fn similarity_on_graph(
    graph: &mut GradGraph,
    points: NodeId,
    texts: NodeId,
    tau: f64,
    direction: Direction,
) -> Result<SimilarityNodes> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (rows, cols) = match direction {
        Direction::PointToText => (points, texts),
        Direction::TextToPoint => (texts, points),
    };
    let cols_t = graph.transpose(cols);
    let dots = graph.matmul(rows, cols_t)?;
    let logits = graph.scale(dots, 1.0 / tau);
    Ok(SimilarityNodes {
        probs: graph.softmax(logits, Axis::Row)?,
        log_probs: graph.log_softmax(logits, Axis::Row)?,
        complement: graph.softmax_complement(logits, Axis::Row, 1.0 - SIMILARITY_CEILING)?,
    })
}

fn batch_size(graph: &GradGraph, s: NodeId, labels: &CorrespondenceLabels) -> Result<f64> {
    let shape = graph.value(s).shape();
    if shape != [labels.size(), labels.size()] {
        return Err(Error::Dimension {
            op: "loss",
            left: shape,
            right: labels.as_array().shape(),
        });
    }
    Ok(shape[0] as f64)
}

/// `-(1/K) Σ_i log S_{i,π(i)}` for one direction.
pub fn contrastive_term(
    graph: &mut GradGraph,
    log_probs: NodeId,
    labels: &CorrespondenceLabels,
    direction: Direction,
) -> Result<NodeId> {
    let k = batch_size(graph, log_probs, labels)?;
    let y = labels.require_single_positive(direction)?;
    let total = graph.masked_sum(log_probs, y)?;
    Ok(graph.scale(total, -1.0 / k))
}

/// `-(1/K) Σ (1 - y) log(1 - S)` for one direction, from `rest = 1 - S`.
pub fn complementary_term(
    graph: &mut GradGraph,
    rest: NodeId,
    labels: &CorrespondenceLabels,
    direction: Direction,
) -> Result<NodeId> {
    let k = batch_size(graph, rest, labels)?;
    let log_rest = graph.ln(rest)?;
    let total = graph.masked_sum(log_rest, labels.negatives(direction))?;
    Ok(graph.scale(total, -1.0 / k))
}

/// `-(1/K) Σ (1 - y) (1 - S)^{1/α} log(1 - S)` for one direction, from
/// `rest = 1 - S`.
pub fn rnc_term(
    graph: &mut GradGraph,
    rest: NodeId,
    labels: &CorrespondenceLabels,
    direction: Direction,
    alpha: f64,
) -> Result<NodeId> {
    let k = batch_size(graph, rest, labels)?;
    let log_rest = graph.ln(rest)?;
    let weight = graph.pow(rest, 1.0 / alpha)?;
    let weighted = graph.hadamard(weight, log_rest)?;
    let total = graph.masked_sum(weighted, labels.negatives(direction))?;
    Ok(graph.scale(total, -1.0 / k))
}

/// Full two-direction objective from stacked `K × d` embeddings.
pub fn loss_on_graph(
    graph: &mut GradGraph,
    points: NodeId,
    texts: NodeId,
    labels: &CorrespondenceLabels,
    config: &LossConfig,
) -> Result<NodeId> {
    config.validate()?;
    let mut terms = [None, None];
    for (slot, direction) in terms.iter_mut().zip([Direction::PointToText, Direction::TextToPoint]) {
        let s = similarity_on_graph(graph, points, texts, config.tau, direction)?;
        *slot = Some(match config.kind {
            LossKind::Contrastive => contrastive_term(graph, s.log_probs, labels, direction)?,
            LossKind::Complementary => complementary_term(graph, s.complement, labels, direction)?,
            LossKind::Rnc => rnc_term(graph, s.complement, labels, direction, config.alpha)?,
        });
    }
    let [Some(a), Some(b)] = terms else {
        unreachable!()
    };
    graph.add(a, b)
}

/// Row softmax of the dot products between two embedding batches.
pub fn softmax_similarity(
    points: &[CommonEmbedding],
    texts: &[CommonEmbedding],
    tau: f64,
    direction: Direction,
) -> Result<SimilarityMatrix> {
    if points.len() != texts.len() {
        return Err(Error::Dimension {
            op: "softmax_similarity",
            left: [points.len(), 0],
            right: [texts.len(), 0],
        });
    }
    let stack = |e: &[CommonEmbedding]| -> Result<DenseArray> {
        let rows: Vec<&[f64]> = e.iter().map(CommonEmbedding::as_slice).collect();
        DenseArray::from_rows(&rows)
    };
    let mut graph = GradGraph::new();
    let p = graph.constant(stack(points)?);
    let t = graph.constant(stack(texts)?);
    let s = similarity_on_graph(&mut graph, p, t, tau, direction)?;
    Ok(SimilarityMatrix {
        probs: graph.value(s.probs).clone(),
        direction,
        tau,
    })
}

fn check_probs(s: &DenseArray, labels: &CorrespondenceLabels) -> Result<()> {
    if s.shape() != [labels.size(), labels.size()] {
        return Err(Error::Dimension {
            op: "loss",
            left: s.shape(),
            right: labels.as_array().shape(),
        });
    }
    if let Some(index) = s.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain {
            op: "similarity",
            index,
            value: s.values()[index],
        });
    }
    Ok(())
}

fn two_directions(
    s_pt: &DenseArray,
    s_tp: &DenseArray,
    labels: &CorrespondenceLabels,
    mut term: impl FnMut(&mut GradGraph, NodeId, Direction) -> Result<NodeId>,
) -> Result<f64> {
    check_probs(s_pt, labels)?;
    check_probs(s_tp, labels)?;
    let mut graph = GradGraph::new();
    let a = graph.constant(s_pt.clone());
    let b = graph.constant(s_tp.clone());
    let ta = term(&mut graph, a, Direction::PointToText)?;
    let tb = term(&mut graph, b, Direction::TextToPoint)?;
    Ok(graph.scalar(ta) + graph.scalar(tb))
}

/// `max(1 - S, 1 - SIMILARITY_CEILING)` for given similarity values.
fn complement_node(graph: &mut GradGraph, probs: NodeId) -> NodeId {
    let rest = graph.value(probs).map(|s| (1.0 - s).max(1.0 - SIMILARITY_CEILING));
    graph.constant(rest)
}

/// Symmetric cross-entropy on the positive pairs.
pub fn contrastive_loss(
    s_pt: &DenseArray,
    s_tp: &DenseArray,
    labels: &CorrespondenceLabels,
) -> Result<f64> {
    two_directions(s_pt, s_tp, labels, |g, s, direction| {
        let y = labels.require_single_positive(direction)?;
        let probs = g.value(s);
        let mut logs = DenseArray::zeros(probs.rows(), probs.cols());
        for (k, (&p, &w)) in probs.values().iter().zip(y.values()).enumerate() {
            if w != 0.0 {
                if !(p > 0.0) {
                    return Err(Error::Domain {
                        op: "contrastive_loss",
                        index: k,
                        value: p,
                    });
                }
                logs.values_mut()[k] = libm::log(p);
            }
        }
        let logs = g.constant(logs);
        contrastive_term(g, logs, labels, direction)
    })
}

pub fn complementary_loss(
    s_pt: &DenseArray,
    s_tp: &DenseArray,
    labels: &CorrespondenceLabels,
) -> Result<f64> {
    two_directions(s_pt, s_tp, labels, |g, s, direction| {
        // An exact 1 on a negative pair has no finite complementary loss.
        let neg = labels.negatives(direction);
        let probs = g.value(s);
        if let Some(index) = probs
            .values()
            .iter()
            .zip(neg.values())
            .position(|(&p, &w)| w != 0.0 && p >= 1.0)
        {
            return Err(Error::Domain {
                op: "log1m",
                index,
                value: 1.0,
            });
        }
        let rest = complement_node(g, s);
        complementary_term(g, rest, labels, direction)
    })
}

pub fn rnc_loss(
    s_pt: &DenseArray,
    s_tp: &DenseArray,
    labels: &CorrespondenceLabels,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    two_directions(s_pt, s_tp, labels, |g, s, direction| {
        let rest = complement_node(g, s);
        rnc_term(g, rest, labels, direction, alpha)
    })
}

/// `ℓ(S) = -(1-S)^{1/α} log(1-S)` and its derivative, for `S ∈ [0, 1)`.
pub fn rnc_per_pair(s: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Domain {
            op: "rnc_per_pair",
            index: 0,
            value: s,
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let rest = 1.0 - s;
    let log_rest = libm::log1p(-s);
    let loss = -libm::pow(rest, 1.0 / alpha) * log_rest;
    let grad = libm::pow(rest, (1.0 - alpha) / alpha) * (log_rest + alpha) / alpha;
    Ok((loss, grad))
}

/// Analytic locations proposed for the per-pair sign change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdCandidate {
    /// `1 - e^{-α}`, the zero of `log(1-S) + α`.
    Stationary,
    /// `1 - e^{1-α}`.
    Shifted,
}

impl ThresholdCandidate {
    pub fn value(self, alpha: f64) -> f64 {
        match self {
            ThresholdCandidate::Stationary => 1.0 - libm::exp(-alpha),
            ThresholdCandidate::Shifted => 1.0 - libm::exp(1.0 - alpha),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdCandidate::Stationary => "stationary",
            ThresholdCandidate::Shifted => "shifted",
        }
    }
}

/// Bisection estimates closer than this to a candidate count as a match.
pub const CANDIDATE_MATCH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub alpha: f64,
    /// Where the finite-difference gradient of `ℓ` changes sign.
    pub s_star: f64,
    pub loss_at_threshold: f64,
    pub stationary: f64,
    pub shifted: f64,
    pub matched: Option<ThresholdCandidate>,
}

fn per_pair_loss(s: f64, alpha: f64) -> f64 {
    -libm::pow(1.0 - s, 1.0 / alpha) * libm::log1p(-s)
}

/// Central difference of `ℓ` at `s`, with a step that stays inside `(0, 1)`.
fn numeric_slope(s: f64, alpha: f64) -> f64 {
    let h = 1e-4 * s.min(1.0 - s);
    (per_pair_loss(s + h, alpha) - per_pair_loss(s - h, alpha)) / (2.0 * h)
}

/// Distance of the bisection bracket from 0 and 1.
pub const THRESHOLD_BRACKET: f64 = 1e-9;

/// Locates the sign change of `dℓ/dS` on `(0, 1)` by bisection, using
/// finite-difference slopes as the sign oracle.
pub fn find_threshold(alpha: f64, tol: f64) -> Result<ThresholdReport> {
    if !(alpha > 0.0) || !(tol > 0.0) {
        return Err(Error::Config(format!("need alpha > 0 and tol > 0, got {alpha}, {tol}")));
    }
    let (mut lo, mut hi) = (THRESHOLD_BRACKET, 1.0 - THRESHOLD_BRACKET);
    if !(numeric_slope(lo, alpha) > 0.0 && numeric_slope(hi, alpha) < 0.0) {
        return Err(Error::Analysis(format!(
            "per-pair gradient does not change sign on ({lo}, {hi}) for alpha = {alpha}"
        )));
    }
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if numeric_slope(mid, alpha) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s_star = 0.5 * (lo + hi);
    let stationary = ThresholdCandidate::Stationary.value(alpha);
    let shifted = ThresholdCandidate::Shifted.value(alpha);
    let matched = [ThresholdCandidate::Stationary, ThresholdCandidate::Shifted]
        .into_iter()
        .find(|c| libm::fabs(c.value(alpha) - s_star) <= CANDIDATE_MATCH_TOL.max(tol));
    Ok(ThresholdReport {
        alpha,
        s_star,
        loss_at_threshold: per_pair_loss(s_star, alpha),
        stationary,
        shifted,
        matched,
    })
}

/// Number of sign changes of the analytic `dℓ/dS` over `S = k / grid`,
/// `k = 0..grid`.
pub fn gradient_sign_changes(alpha: f64, grid: usize) -> Result<usize> {
    let mut changes = 0;
    let mut prev: Option<bool> = None;
    for k in 0..grid {
        let (_, g) = rnc_per_pair(k as f64 / grid as f64, alpha)?;
        if g == 0.0 {
            continue;
        }
        let positive = g > 0.0;
        if prev.is_some_and(|p| p != positive) {
            changes += 1;
        }
        prev = Some(positive);
    }
    Ok(changes)
}
