//! Deterministic mini-batch training.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::dap::{embed_batch_on_graph, DapConfig, DapParams};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::GradGraph;
use crate::rncl::{loss_on_graph, CorrespondenceLabels, LossConfig};
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Width of the shared embedding space.
    pub d_c: usize,
    pub dap: DapConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            d_c: 32,
            dap: DapConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be a nonnegative number, got {}",
                self.learning_rate
            )));
        }
        if self.d_c == 0 || self.d_c % 2 != 0 {
            return Err(Error::Config(format!("d_c must be even and positive, got {}", self.d_c)));
        }
        Ok(())
    }
}

/// `K` training pairs; row `i` of the labels is scene `scenes[i]`, column `j`
/// is text `texts[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into `Dataset::scenes`.
    pub scenes: Vec<usize>,
    /// Indices into `Dataset::texts`.
    pub texts: Vec<usize>,
    pub labels: CorrespondenceLabels,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Shuffles the (text, assigned scene) pairs for `(seed, epoch)` and cuts
/// them into batches of `k`, dropping the short tail.
pub fn make_batches(ds: &Dataset, k: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if ds.texts.is_empty() {
        return Err(Error::Config("cannot batch an empty dataset".into()));
    }
    let mut pairs = ds.assigned_pairs()?;
    if k < 2 || pairs.len() < k {
        return Err(Error::Config(format!(
            "batch size {k} needs at least 2 and at most {} pairs",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut epoch_rng(seed, epoch));
    Ok(pairs
        .chunks_exact(k)
        .map(|chunk| Batch {
            scenes: chunk.iter().map(|&(_, s)| s).collect(),
            texts: chunk.iter().map(|&(t, _)| t).collect(),
            labels: CorrespondenceLabels::identity(k),
        })
        .collect())
}

/// Plain SGD or bias-corrected Adam over a fixed list of arrays.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: i32,
    first: Vec<DenseArray>,
    second: Vec<DenseArray>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, shapes: impl IntoIterator<Item = [usize; 2]>) -> Self {
        let zeros: Vec<DenseArray> = shapes.into_iter().map(|[r, c]| DenseArray::zeros(r, c)).collect();
        Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut DenseArray>, grads: &[&DenseArray]) {
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, d) in p.values_mut().iter_mut().zip(g.values()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - libm::pow(b1, self.steps as f64);
                let c2 = 1.0 - libm::pow(b2, self.steps as f64);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p
                        .values_mut()
                        .iter_mut()
                        .zip(g.values())
                        .zip(m.values_mut())
                        .zip(v.values_mut());
                    for (((x, &d), m), v) in it {
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *x -= lr * m_hat / (libm::sqrt(v_hat) + self.epsilon);
                    }
                }
            }
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DapParams,
    pub config: TrainConfig,
    optimizer: Optimizer,
    epoch: usize,
    step: usize,
}

impl Trainer {
    /// Initializes parameters from `config.seed`.
    pub fn new(d_f: usize, config: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = DapParams::init(d_f, config.d_c, &mut rng);
        Self::with_params(params, config)
    }

    pub fn with_params(params: DapParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if params.d_c() != config.d_c {
            return Err(Error::Config(format!(
                "parameters have d_c = {}, config says {}",
                params.d_c(),
                config.d_c
            )));
        }
        let optimizer = Optimizer::new(&config, params.arrays().iter().map(|a| a.shape()));
        Ok(Self {
            params,
            config,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }

    /// Loss and parameter gradients on one batch, without updating.
    pub fn loss_and_gradients(&self, ds: &Dataset, batch: &Batch) -> Result<(f64, Vec<DenseArray>)> {
        let mut graph = GradGraph::new();
        let handles = self.params.register(&mut graph);
        let dap = &self.config.dap;
        let points = embed_batch_on_graph(
            &mut graph,
            &handles,
            batch.scenes.iter().map(|&i| &ds.scenes[i].features),
            dap,
        )?;
        let texts = embed_batch_on_graph(
            &mut graph,
            &handles,
            batch.texts.iter().map(|&i| &ds.texts[i].features),
            dap,
        )?;
        let loss = loss_on_graph(&mut graph, points, texts, &batch.labels, &self.config.loss)?;
        let grads = graph.backward(loss)?;
        let grads = handles.ids().into_iter().map(|id| grads.wrt(id).clone()).collect();
        Ok((graph.scalar(loss), grads))
    }

    /// One optimizer update. Returns the loss before the update.
    pub fn train_step(&mut self, ds: &Dataset, batch: &Batch) -> Result<f64> {
        self.step += 1;
        let diverged = |what| Error::Divergence {
            epoch: self.epoch,
            step: self.step,
            what,
        };
        let (loss, grads) = self.loss_and_gradients(ds, batch).map_err(|e| match e {
            Error::Degenerate { norm } if !norm.is_finite() => diverged("embeddings"),
            Error::NonFinite { .. } => diverged("forward pass"),
            Error::Domain { value, .. } if !value.is_finite() => diverged("forward pass"),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(diverged("loss"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged("gradient"));
        }
        let refs: Vec<&DenseArray> = grads.iter().collect();
        self.optimizer.step(self.params.arrays_mut(), &refs);
        if self.params.arrays().iter().any(|a| !a.is_finite()) {
            return Err(diverged("parameters"));
        }
        Ok(loss)
    }

    /// Runs one pass over `ds`; returns the mean batch loss.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<f64> {
        self.epoch += 1;
        self.step = 0;
        let batches = make_batches(ds, self.config.batch_size, self.config.seed, self.epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            total += self.train_step(ds, batch)?;
        }
        Ok(total / batches.len() as f64)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_r1_p2t: f64,
    pub val_r1_t2p: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

/// Full training loop with per-epoch validation. `clock` returns seconds from
/// any fixed origin and is only used to fill `wall_time_s`.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(DapParams, TrainLog)> {
    let d_f = train_set
        .scenes
        .first()
        .map(|s| s.features.feature_dim())
        .ok_or_else(|| Error::Config("training set has no scenes".into()))?;
    let mut trainer = Trainer::new(d_f, *config)?;
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        let start = clock();
        let mean_loss = trainer.run_epoch(train_set)?;
        let val = evaluate(val_set, &trainer.params, &config.dap)?;
        log.epochs.push(EpochRecord {
            epoch: trainer.epoch(),
            mean_loss,
            val_r1_p2t: val.p2t.r1,
            val_r1_t2p: val.t2p.r1,
            wall_time_s: clock() - start,
        });
    }
    Ok((trainer.params, log))
}

#[cfg(test)]
mod tests;
