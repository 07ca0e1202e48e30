//! Synthetic scene/description datasets with controllable noisy pairing.
//!
//! A fixed vocabulary of unit-norm object prototypes stands in for object
//! categories. A scene's patches are jittered copies of prototypes drawn with
//! replacement, laid out on a jittered grid. Each description echoes a random
//! subset of the scene's distinct prototypes, pads with generic filler words
//! from a small shared vocabulary, and jitters every token.
//!
//! Noise is injected at the pairing level: a chosen subset of descriptions is
//! re-assigned to a scene other than the one it was generated from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::dap::TokenFeatures;
use crate::error::{Error, Result};
use crate::posenc::PatchCentroids;

/// Size of the shared filler vocabulary.
pub const FILLER_VOCABULARY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub num_scenes: usize,
    pub texts_per_scene: usize,
    /// Patches per scene.
    pub p_n: usize,
    /// Tokens per description.
    pub t_n: usize,
    pub d_f: usize,
    pub num_prototypes: usize,
    pub jitter_sigma: f64,
    /// Fraction of a scene's distinct prototypes echoed by each description.
    pub coverage_ratio: f64,
    /// Target fraction of description tokens drawn from the filler vocabulary.
    pub distractor_ratio: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            texts_per_scene: 5,
            p_n: 24,
            t_n: 12,
            d_f: 32,
            num_prototypes: 40,
            jitter_sigma: 0.1,
            coverage_ratio: 0.5,
            distractor_ratio: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_scenes", self.num_scenes),
            ("texts_per_scene", self.texts_per_scene),
            ("p_n", self.p_n),
            ("t_n", self.t_n),
            ("d_f", self.d_f),
            ("num_prototypes", self.num_prototypes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, r) in [
            ("coverage_ratio", self.coverage_ratio),
            ("distractor_ratio", self.distractor_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::Config(format!(
                "jitter_sigma must be nonnegative, got {}",
                self.jitter_sigma
            )));
        }
        let worst = echo_count(self.coverage_ratio, self.p_n.min(self.num_prototypes));
        if worst > self.t_n {
            return Err(Error::Config(format!(
                "t_n = {} cannot hold the {worst} prototype echoes a scene may need",
                self.t_n
            )));
        }
        Ok(())
    }

    pub fn num_texts(&self) -> usize {
        self.num_scenes * self.texts_per_scene
    }
}

fn echo_count(coverage: f64, distinct: usize) -> usize {
    libm::ceil(coverage * distinct as f64 - 1e-9).max(0.0) as usize
}

/// Round half up, for nonnegative `x`.
pub fn round_half_up(x: f64) -> usize {
    libm::floor(x + 0.5) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub features: TokenFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Text {
    pub id: usize,
    /// Scene this description is paired with for training (possibly noisy).
    pub scene_id: usize,
    pub features: TokenFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub texts: Vec<Text>,
    /// Text id to the scene it was generated from. Never altered by noise.
    pub clean_map: BTreeMap<usize, usize>,
    pub noise_rate: f64,
}

impl Dataset {
    pub fn scene_position(&self, id: usize) -> Option<usize> {
        self.scenes.binary_search_by_key(&id, |s| s.id).ok().or_else(|| {
            self.scenes.iter().position(|s| s.id == id)
        })
    }

    /// `(text index, scene index)` for every text, using the training
    /// assignment. Fails if a text is paired with a scene outside the dataset.
    pub fn assigned_pairs(&self) -> Result<Vec<(usize, usize)>> {
        self.pairs(|t| t.scene_id)
    }

    /// `(text index, scene index)` under the clean assignment.
    pub fn clean_pairs(&self) -> Result<Vec<(usize, usize)>> {
        self.pairs(|t| self.clean_map[&t.id])
    }

    fn pairs(&self, scene_of: impl Fn(&Text) -> usize) -> Result<Vec<(usize, usize)>> {
        self.texts
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let sid = scene_of(t);
                self.scene_position(sid).map(|si| (ti, si)).ok_or_else(|| {
                    Error::Config(format!("text {} refers to missing scene {sid}", t.id))
                })
            })
            .collect()
    }

    /// Texts whose training pairing differs from the clean one.
    pub fn noisy_count(&self) -> usize {
        self.texts
            .iter()
            .filter(|t| self.clean_map.get(&t.id) != Some(&t.scene_id))
            .count()
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vectors<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn jittered<R: Rng>(base: &[f64], jitter: Option<&Normal<f64>>, rng: &mut R) -> Vec<f64> {
    match jitter {
        Some(n) => base.iter().map(|b| b + n.sample(rng)).collect(),
        None => base.to_vec(),
    }
}

fn grid_centroids<R: Rng>(p_n: usize, rng: &mut R) -> Result<PatchCentroids> {
    let side = libm::ceil(libm::sqrt(p_n as f64)) as usize;
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(rng);
    let raw: Vec<[f64; 2]> = cells[..p_n]
        .iter()
        .map(|&c| {
            let (row, col) = ((c / side) as f64, (c % side) as f64);
            [
                col + 0.5 + rng.random_range(-0.4..0.4),
                row + 0.5 + rng.random_range(-0.4..0.4),
            ]
        })
        .collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &raw {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let coords = raw
        .iter()
        .map(|p| {
            let mut out = [0.5; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    out[a] = ((p[a] - lo[a]) / span).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();
    PatchCentroids::new(coords)
}

/// Generates a clean dataset. Scene `s` and its descriptions draw from their
/// own random stream derived from `(seed, s)`.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut vocab_rng = scene_rng(spec.seed, 0);
    let prototypes = unit_vectors(spec.num_prototypes, spec.d_f, &mut vocab_rng);
    let fillers = unit_vectors(FILLER_VOCABULARY, spec.d_f, &mut vocab_rng);
    let jitter = (spec.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.jitter_sigma).expect("validated sigma"));

    let mut scenes = Vec::with_capacity(spec.num_scenes);
    let mut texts = Vec::with_capacity(spec.num_texts());
    let mut clean_map = BTreeMap::new();
    for s in 0..spec.num_scenes {
        let mut rng = scene_rng(spec.seed, s as u64 + 1);
        let labels: Vec<usize> = (0..spec.p_n)
            .map(|_| rng.random_range(0..spec.num_prototypes))
            .collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| jittered(&prototypes[l], jitter.as_ref(), &mut rng))
            .collect();
        let centroids = grid_centroids(spec.p_n, &mut rng)?;
        let features = TokenFeatures::point_cloud(DenseArray::from_rows(&rows)?, centroids)?;
        scenes.push(Scene { id: s, features });

        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let echoes = echo_count(spec.coverage_ratio, distinct.len());
        let filler_target = round_half_up(spec.distractor_ratio * spec.t_n as f64);
        let filler_count = filler_target.min(spec.t_n - echoes);
        for k in 0..spec.texts_per_scene {
            let chosen: Vec<usize> = index::sample(&mut rng, distinct.len(), echoes)
                .into_iter()
                .map(|i| distinct[i])
                .collect();
            let mut words: Vec<&[f64]> = chosen.iter().map(|&p| prototypes[p].as_slice()).collect();
            for _ in 0..filler_count {
                words.push(&fillers[rng.random_range(0..FILLER_VOCABULARY)]);
            }
            while words.len() < spec.t_n {
                let word = if chosen.is_empty() {
                    fillers[rng.random_range(0..FILLER_VOCABULARY)].as_slice()
                } else {
                    prototypes[chosen[rng.random_range(0..chosen.len())]].as_slice()
                };
                words.push(word);
            }
            words.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = words
                .iter()
                .map(|w| jittered(w, jitter.as_ref(), &mut rng))
                .collect();
            let id = s * spec.texts_per_scene + k;
            texts.push(Text {
                id,
                scene_id: s,
                features: TokenFeatures::text(DenseArray::from_rows(&rows)?)?,
            });
            clean_map.insert(id, s);
        }
    }
    Ok(Dataset {
        scenes,
        texts,
        clean_map,
        noise_rate: 0.0,
    })
}

/// Re-pairs `round(rate · N_t)` uniformly chosen texts with a uniformly chosen
/// scene other than their clean one.
pub fn inject_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate must lie in [0, 1], got {rate}")));
    }
    let mut out = ds.clone();
    out.noise_rate = rate;
    let count = round_half_up(rate * ds.texts.len() as f64).min(ds.texts.len());
    if count == 0 {
        return Ok(out);
    }
    if ds.scenes.len() < 2 {
        return Err(Error::Config("noise injection needs at least two scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, ds.texts.len(), count).into_vec();
    chosen.sort_unstable();
    for ti in chosen {
        let text = &mut out.texts[ti];
        let clean = ds.clean_map[&text.id];
        let clean_pos = ds
            .scene_position(clean)
            .ok_or_else(|| Error::Config(format!("text {} has no clean scene {clean}", text.id)))?;
        let mut pick = rng.random_range(0..ds.scenes.len() - 1);
        if pick >= clean_pos {
            pick += 1;
        }
        text.scene_id = ds.scenes[pick].id;
    }
    Ok(out)
}

/// Partitions scenes into train/validation/test. Texts follow their clean
/// scene.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0)) || libm::fabs(fractions.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = ds.scenes.len();
    let n_train = round_half_up(fractions[0] * n as f64);
    let n_val = round_half_up(fractions[1] * n as f64);
    let sizes = [n_train, n_val, n.saturating_sub(n_train + n_val)];
    if sizes.contains(&0) || n_train + n_val > n {
        return Err(Error::Config(format!(
            "split of {n} scenes by {fractions:?} leaves an empty part ({sizes:?})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part_of_scene = BTreeMap::new();
    let mut bounds = 0;
    for (part, &size) in sizes.iter().enumerate() {
        for &i in &order[bounds..bounds + size] {
            part_of_scene.insert(ds.scenes[i].id, part);
        }
        bounds += size;
    }
    let mut parts: [Dataset; 3] = core::array::from_fn(|_| Dataset {
        scenes: Vec::new(),
        texts: Vec::new(),
        clean_map: BTreeMap::new(),
        noise_rate: ds.noise_rate,
    });
    for scene in &ds.scenes {
        parts[part_of_scene[&scene.id]].scenes.push(scene.clone());
    }
    for text in &ds.texts {
        let clean = ds.clean_map[&text.id];
        let part = part_of_scene[&clean];
        parts[part].texts.push(text.clone());
        parts[part].clean_map.insert(text.id, clean);
    }
    Ok(parts)
}

/// Seed for an independent pipeline stage, derived from a master seed.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    scene_rng(seed, u64::MAX - stage).random()
}

pub const SPLIT_STAGE: u64 = 1;
pub const NOISE_STAGE: u64 = 2;

/// Generates, splits by scene, and injects noise into the training part only.
/// Validation and test keep their clean pairing.
pub fn prepare(spec: &GeneratorSpec, fractions: [f64; 3], noise_rate: f64) -> Result<[Dataset; 3]> {
    let ds = generate(spec)?;
    let [train, val, test] = split(&ds, fractions, derive_seed(spec.seed, SPLIT_STAGE))?;
    let train = inject_noise(&train, noise_rate, derive_seed(spec.seed, NOISE_STAGE))?;
    Ok([train, val, test])
}

#[cfg(test)]
mod tests;
