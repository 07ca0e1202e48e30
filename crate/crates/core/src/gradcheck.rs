//! Finite-difference verification of every graph op and of the composed
//! embedding + loss graphs.
//!
//! Each case builds a small random graph, reduces its output to a scalar with
//! fixed random weights, and compares `backward` against central differences.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::dap::{embed_batch_on_graph, embed_on_graph, DapConfig, DapParams, TokenFeatures};
use crate::error::{Error, Result};
use crate::fd::{finite_difference_check, FdMode};
use crate::graph::{Axis, GradGraph, NodeId};
use crate::posenc::PatchCentroids;
use crate::rncl::{loss_on_graph, CorrespondenceLabels, LossConfig, LossKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Random configurations per checked op.
    pub configurations: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_batch: usize,
    pub max_tokens: usize,
    pub max_common_dim: usize,
    pub max_feature_dim: usize,
    /// Op whose analytic gradient is deliberately perturbed before checking.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            configurations: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            max_batch: 8,
            max_tokens: 6,
            max_common_dim: 16,
            max_feature_dim: 8,
            corrupt: None,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.configurations == 0 {
            return Err(Error::Config("gradcheck needs at least one configuration".into()));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("step and tolerance must be positive".into()));
        }
        if self.max_batch < 2 || self.max_tokens == 0 || self.max_feature_dim == 0 {
            return Err(Error::Config("max_batch >= 2, max_tokens >= 1, max_feature_dim >= 1".into()));
        }
        if self.max_common_dim < 2 {
            return Err(Error::Config("max_common_dim must be at least 2".into()));
        }
        if let Some(name) = &self.corrupt {
            if !CHECKS.contains(&name.as_str()) {
                return Err(Error::Config(alloc::format!("unknown op {name:?} for corruption")));
            }
        }
        Ok(())
    }
}

/// Worst result for one op over all its configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub configurations: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn total_configurations(&self) -> usize {
        self.ops.iter().map(|o| o.configurations).sum()
    }
}

/// Names of every check, in report order.
pub const CHECKS: [&str; 24] = [
    "matmul",
    "transpose",
    "add",
    "subtract",
    "hadamard",
    "scale",
    "log1m",
    "ln",
    "pow",
    "clamp_max",
    "softmax_column",
    "softmax_row",
    "log_softmax_column",
    "log_softmax_row",
    "softmax_complement",
    "mean_over_tokens",
    "l2_normalize",
    "sum",
    "masked_sum",
    "stack_rows",
    "dap_embedding",
    "dap_contrastive",
    "dap_complementary",
    "dap_rnc",
];

/// A built case: leaf values and a function evaluating the scalar output.
struct Case {
    params: Vec<DenseArray>,
    build: CaseFn,
}

type CaseFn = alloc::boxed::Box<dyn Fn(&mut GradGraph, &[NodeId]) -> Result<NodeId>>;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseArray {
    let values = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    DenseArray::new([rows, cols], values).expect("finite samples")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseArray {
    let values = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    DenseArray::new([rows, cols], values).expect("finite samples")
}

fn dims(rng: &mut ChaCha8Rng, max: usize) -> (usize, usize) {
    (rng.random_range(1..=max), rng.random_range(1..=max))
}

/// Reduces `out` to a scalar with fixed weights so every output coordinate
/// contributes.
fn readout(graph: &mut GradGraph, out: NodeId, weights: &DenseArray) -> Result<NodeId> {
    graph.masked_sum(out, weights.clone())
}

fn unary(
    params: Vec<DenseArray>,
    weights: DenseArray,
    op: impl Fn(&mut GradGraph, NodeId) -> Result<NodeId> + 'static,
) -> Case {
    Case {
        params,
        build: alloc::boxed::Box::new(move |g, ids| {
            let out = op(g, ids[0])?;
            readout(g, out, &weights)
        }),
    }
}

/// Binary op with the right operand full size, a row, or a column.
fn binary_case(
    rng: &mut ChaCha8Rng,
    max: usize,
    op: fn(&mut GradGraph, NodeId, NodeId) -> Result<NodeId>,
) -> Case {
    let (r, c) = dims(rng, max);
    let right_shape = match rng.random_range(0..3) {
        0 => [r, c],
        1 => [1, c],
        _ => [r, 1],
    };
    let a = normal(rng, r, c, 1.0);
    let b = normal(rng, right_shape[0], right_shape[1], 1.0);
    let w = normal(rng, r, c, 1.0);
    Case {
        params: vec![a, b],
        build: alloc::boxed::Box::new(move |g, ids| {
            let out = op(g, ids[0], ids[1])?;
            readout(g, out, &w)
        }),
    }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d_f: usize, point: bool) -> TokenFeatures {
    let z = normal(rng, n, d_f, 1.0);
    if point {
        let coords = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        TokenFeatures::point_cloud(z, PatchCentroids::new(coords).expect("unit coords"))
            .expect("consistent sample")
    } else {
        TokenFeatures::text(z).expect("consistent sample")
    }
}

/// Random parameters with keys large enough for attention to be non-uniform.
fn random_params(rng: &mut ChaCha8Rng, d_f: usize, d_c: usize) -> DapParams {
    let mut params = DapParams::init(d_f, d_c, rng);
    for side in [&mut params.point, &mut params.text] {
        side.b_query = normal(rng, 1, d_c, 0.3);
        side.b_value = normal(rng, 1, d_c, 0.3);
        side.token_key = normal(rng, d_c, 1, 0.5);
        side.feature_key = normal(rng, d_c, d_c, 0.5);
    }
    params
}

fn random_dap_config(rng: &mut ChaCha8Rng) -> DapConfig {
    DapConfig {
        feature_softmax_axis: if rng.random_bool(0.5) { Axis::Column } else { Axis::Row },
        ..DapConfig::default()
    }
}

fn even_dim(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.random_range(1..=max / 2)
}

fn dap_embedding_case(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Case {
    let d_f = rng.random_range(1..=cfg.max_feature_dim);
    let d_c = even_dim(rng, cfg.max_common_dim);
    let n = rng.random_range(1..=cfg.max_tokens);
    let point = rng.random_bool(0.5);
    let sample = random_features(rng, n, d_f, point);
    let params = random_params(rng, d_f, d_c);
    let dap = random_dap_config(rng);
    let w = normal(rng, 1, d_c, 1.0);
    Case {
        params: params.arrays().into_iter().cloned().collect(),
        build: alloc::boxed::Box::new(move |g, ids| {
            let handles = handles_from(ids);
            let nodes = embed_on_graph(g, &handles, &sample, &dap)?;
            readout(g, nodes.embedding, &w)
        }),
    }
}

fn dap_loss_case(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, kind: LossKind) -> Case {
    let d_f = rng.random_range(1..=cfg.max_feature_dim);
    let d_c = even_dim(rng, cfg.max_common_dim);
    let k = rng.random_range(2..=cfg.max_batch);
    let points: Vec<TokenFeatures> = (0..k)
        .map(|_| {
            let n = rng.random_range(1..=cfg.max_tokens);
            random_features(rng, n, d_f, true)
        })
        .collect();
    let texts: Vec<TokenFeatures> = (0..k)
        .map(|_| {
            let n = rng.random_range(1..=cfg.max_tokens);
            random_features(rng, n, d_f, false)
        })
        .collect();
    let params = random_params(rng, d_f, d_c);
    let dap = random_dap_config(rng);
    let loss = LossConfig {
        kind,
        alpha: [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)],
        tau: rng.random_range(0.05..0.5),
    };
    let labels = CorrespondenceLabels::identity(k);
    Case {
        params: params.arrays().into_iter().cloned().collect(),
        build: alloc::boxed::Box::new(move |g, ids| {
            let handles = handles_from(ids);
            let p = embed_batch_on_graph(g, &handles, &points, &dap)?;
            let t = embed_batch_on_graph(g, &handles, &texts, &dap)?;
            loss_on_graph(g, p, t, &labels, &loss)
        }),
    }
}

fn handles_from(ids: &[NodeId]) -> crate::dap::DapHandles {
    use crate::dap::{DapHandles, ModalityHandles};
    let side = |o: usize| ModalityHandles {
        w_query: ids[o],
        b_query: ids[o + 1],
        w_value: ids[o + 2],
        b_value: ids[o + 3],
        token_key: ids[o + 4],
        feature_key: ids[o + 5],
    };
    DapHandles {
        point: side(0),
        text: side(6),
    }
}

fn make_case(name: &str, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Case {
    let max = cfg.max_tokens.max(cfg.max_common_dim).min(8);
    match name {
        "matmul" => {
            let (r, m) = dims(rng, max);
            let c = rng.random_range(1..=max);
            let a = normal(rng, r, m, 1.0);
            let b = normal(rng, m, c, 1.0);
            let w = normal(rng, r, c, 1.0);
            Case {
                params: vec![a, b],
                build: alloc::boxed::Box::new(move |g, ids| {
                    let out = g.matmul(ids[0], ids[1])?;
                    readout(g, out, &w)
                }),
            }
        }
        "transpose" => {
            let (r, c) = dims(rng, max);
            let w = normal(rng, c, r, 1.0);
            unary(vec![normal(rng, r, c, 1.0)], w, |g, a| Ok(g.transpose(a)))
        }
        "add" => binary_case(rng, max, GradGraph::add),
        "subtract" => binary_case(rng, max, GradGraph::sub),
        "hadamard" => binary_case(rng, max, GradGraph::hadamard),
        "scale" => {
            let (r, c) = dims(rng, max);
            let factor = rng.random_range(-3.0..3.0);
            let w = normal(rng, r, c, 1.0);
            unary(vec![normal(rng, r, c, 1.0)], w, move |g, a| Ok(g.scale(a, factor)))
        }
        "log1m" => {
            let (r, c) = dims(rng, max);
            let w = normal(rng, r, c, 1.0);
            unary(vec![uniform(rng, r, c, -2.0, 0.95)], w, |g, a| g.log1m(a))
        }
        "ln" => {
            let (r, c) = dims(rng, max);
            let w = normal(rng, r, c, 1.0);
            unary(vec![uniform(rng, r, c, 0.05, 3.0)], w, |g, a| g.ln(a))
        }
        "pow" => {
            let (r, c) = dims(rng, max);
            let exponent = rng.random_range(0.2..3.0);
            let w = normal(rng, r, c, 1.0);
            unary(vec![uniform(rng, r, c, 0.05, 2.0)], w, move |g, a| g.pow(a, exponent))
        }
        "clamp_max" => {
            // Keep every entry well away from the kink.
            let (r, c) = dims(rng, max);
            let ceiling = rng.random_range(-1.0..1.0);
            let values = (0..r * c)
                .map(|_| {
                    let offset = rng.random_range(0.01..1.0);
                    if rng.random_bool(0.5) {
                        ceiling + offset
                    } else {
                        ceiling - offset
                    }
                })
                .collect();
            let x = DenseArray::new([r, c], values).expect("finite");
            let w = normal(rng, r, c, 1.0);
            unary(vec![x], w, move |g, a| Ok(g.clamp_max(a, ceiling)))
        }
        "softmax_column" | "softmax_row" | "log_softmax_column" | "log_softmax_row" => {
            let (r, c) = dims(rng, max);
            let axis = if name.ends_with("column") { Axis::Column } else { Axis::Row };
            let log = name.starts_with("log");
            let w = normal(rng, r, c, 1.0);
            unary(vec![normal(rng, r, c, 2.0)], w, move |g, a| {
                if log {
                    g.log_softmax(a, axis)
                } else {
                    g.softmax(a, axis)
                }
            })
        }
        "softmax_complement" => {
            // Wide logits push some entries against the floor.
            let (r, c) = dims(rng, max);
            let axis = if rng.random_bool(0.5) { Axis::Column } else { Axis::Row };
            let w = normal(rng, r, c, 1.0);
            unary(vec![normal(rng, r, c, 8.0)], w, move |g, a| {
                g.softmax_complement(a, axis, 1e-12)
            })
        }
        "mean_over_tokens" => {
            let (r, c) = dims(rng, max);
            let w = normal(rng, 1, c, 1.0);
            unary(vec![normal(rng, r, c, 1.0)], w, |g, a| g.mean_over_tokens(a))
        }
        "l2_normalize" => {
            let (r, c) = dims(rng, max);
            let w = normal(rng, r, c, 1.0);
            let mut x = normal(rng, r, c, 1.0);
            if x.norm() < 0.1 {
                x.values_mut()[0] += 1.0;
            }
            unary(vec![x], w, |g, a| g.l2_normalize(a))
        }
        "sum" => {
            // A nonlinear wrapper keeps the gradient coordinate-dependent.
            let (r, c) = dims(rng, max);
            let w = normal(rng, 1, 1, 1.0);
            unary(vec![uniform(rng, r, c, 0.1, 2.0)], w, |g, a| {
                let p = g.pow(a, 2.0)?;
                Ok(g.sum(p))
            })
        }
        "masked_sum" => {
            let (r, c) = dims(rng, max);
            let mask = DenseArray::new(
                [r, c],
                (0..r * c)
                    .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-2.0..2.0) })
                    .collect(),
            )
            .expect("finite");
            Case {
                params: vec![normal(rng, r, c, 1.0)],
                build: alloc::boxed::Box::new(move |g, ids| {
                    let sq = g.hadamard(ids[0], ids[0])?;
                    g.masked_sum(sq, mask.clone())
                }),
            }
        }
        "stack_rows" => {
            let k = rng.random_range(1..=max);
            let d = rng.random_range(1..=max);
            let params = (0..k).map(|_| normal(rng, 1, d, 1.0)).collect();
            let w = normal(rng, k, d, 1.0);
            Case {
                params,
                build: alloc::boxed::Box::new(move |g, ids| {
                    let out = g.stack_rows(ids)?;
                    readout(g, out, &w)
                }),
            }
        }
        "dap_embedding" => dap_embedding_case(rng, cfg),
        "dap_contrastive" => dap_loss_case(rng, cfg, LossKind::Contrastive),
        "dap_complementary" => dap_loss_case(rng, cfg, LossKind::Complementary),
        "dap_rnc" => dap_loss_case(rng, cfg, LossKind::Rnc),
        _ => unreachable!("unknown check {name}"),
    }
}

fn evaluate_case(case: &Case, params: &[DenseArray]) -> Result<f64> {
    let mut g = GradGraph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    Ok(g.scalar(out))
}

fn analytic_gradient(case: &Case) -> Result<Vec<DenseArray>> {
    let mut g = GradGraph::new();
    let ids: Vec<NodeId> = case.params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    let grads = g.backward(out)?;
    Ok(ids.iter().map(|&id| grads.wrt(id).clone()).collect())
}

/// Checks one op over `cfg.configurations` random cases.
pub fn check_op(name: &str, cfg: &GradcheckConfig) -> Result<OpReport> {
    let index = CHECKS
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| Error::Config(alloc::format!("unknown op {name:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let corrupt = cfg.corrupt.as_deref() == Some(name);
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..cfg.configurations {
        let case = make_case(name, &mut rng, cfg);
        let mut analytic = analytic_gradient(&case)?;
        if corrupt {
            let v = &mut analytic[0].values_mut()[0];
            *v += 1e-2 * (1.0 + libm::fabs(*v));
        }
        let report = finite_difference_check(
            |p| evaluate_case(&case, p),
            &case.params,
            &analytic,
            cfg.step,
            FdMode::Central,
        )?;
        worst = worst.max(report.max_rel_error);
        coordinates += report.coordinates;
    }
    Ok(OpReport {
        op: name.into(),
        configurations: cfg.configurations,
        coordinates,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    })
}

/// Runs every check in [`CHECKS`] order.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let ops = CHECKS
        .iter()
        .map(|name| check_op(name, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops,
    })
}
