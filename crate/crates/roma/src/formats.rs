//! On-disk artifacts. Every JSON document carries `format_version`; readers
//! reject versions they do not know.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use roma_core::dap::{DapConfig, DapParams, TokenFeatures};
use roma_core::eval::{AttentionRecord, DirectionRecall, RetrievalMetrics};
use roma_core::posenc::PatchCentroids;
use roma_core::synth::{Dataset, GeneratorSpec, Scene, Text};
use roma_core::trainer::{EpochRecord, TrainLog};
use roma_core::DenseArray;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

pub const META_FILE: &str = "meta.json";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const TEXTS_FILE: &str = "texts.jsonl";
pub const NOISE_FILE: &str = "noise.json";

fn check_version(path: &Path, found: u32) -> CliResult<()> {
    if found != FORMAT_VERSION {
        return Err(CliError::file(
            path,
            format!("unsupported format_version {found} (this build reads {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::file(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::file(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::file(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| CliError::file(path, e))?;
        w.write_all(b"\n").map_err(|e| CliError::file(path, e))?;
    }
    w.flush().map_err(|e| CliError::file(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CliError::file(path, format!("line {}: {e}", n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn to_rows(a: &DenseArray) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn from_rows(path: &Path, what: &str, rows: &[Vec<f64>]) -> CliResult<DenseArray> {
    DenseArray::from_rows(rows).map_err(|e| CliError::file(path, format!("{what}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format_version: u32,
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub noise_rate: f64,
    pub split_fractions: [f64; 3],
    /// Scene ids per split.
    pub splits: SplitIds,
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: usize,
    centroids: Vec<[f64; 2]>,
    tokens: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    id: usize,
    scene_id: usize,
    tokens: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseRecord {
    format_version: u32,
    rate: f64,
    clean_map: BTreeMap<usize, usize>,
}

/// A dataset directory: metadata plus train/validation/test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDir {
    pub meta: Meta,
    pub parts: [Dataset; 3],
}

impl DatasetDir {
    pub fn d_f(&self) -> usize {
        self.meta.spec.d_f
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        let mut scenes: Vec<&Scene> = self.parts.iter().flat_map(|p| &p.scenes).collect();
        scenes.sort_by_key(|s| s.id);
        let mut texts: Vec<&Text> = self.parts.iter().flat_map(|p| &p.texts).collect();
        texts.sort_by_key(|t| t.id);
        let clean_map: BTreeMap<usize, usize> =
            self.parts.iter().flat_map(|p| p.clean_map.iter().map(|(&t, &s)| (t, s))).collect();

        write_json(&dir.join(META_FILE), &self.meta)?;
        write_jsonl(
            &dir.join(SCENES_FILE),
            scenes.iter().map(|s| SceneRecord {
                id: s.id,
                centroids: s.features.centroids().map(|c| c.coords().to_vec()).unwrap_or_default(),
                tokens: to_rows(s.features.tokens()),
            }),
        )?;
        write_jsonl(
            &dir.join(TEXTS_FILE),
            texts.iter().map(|t| TextRecord {
                id: t.id,
                scene_id: t.scene_id,
                tokens: to_rows(t.features.tokens()),
            }),
        )?;
        write_json(
            &dir.join(NOISE_FILE),
            &NoiseRecord {
                format_version: FORMAT_VERSION,
                rate: self.meta.noise_rate,
                clean_map,
            },
        )
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: Meta = read_json(&meta_path)?;
        check_version(&meta_path, meta.format_version)?;
        let noise_path = dir.join(NOISE_FILE);
        let noise: NoiseRecord = read_json(&noise_path)?;
        check_version(&noise_path, noise.format_version)?;
        let d_f = meta.spec.d_f;

        let scenes_path = dir.join(SCENES_FILE);
        let mut scenes = BTreeMap::new();
        for r in read_jsonl::<SceneRecord>(&scenes_path)? {
            let tokens = from_rows(&scenes_path, &format!("scene {}", r.id), &r.tokens)?;
            check_width(&scenes_path, "scene", r.id, &tokens, d_f)?;
            let centroids = PatchCentroids::new(r.centroids)
                .map_err(|e| CliError::file(&scenes_path, format!("scene {}: {e}", r.id)))?;
            let features = TokenFeatures::point_cloud(tokens, centroids)
                .map_err(|e| CliError::file(&scenes_path, format!("scene {}: {e}", r.id)))?;
            if scenes.insert(r.id, Scene { id: r.id, features }).is_some() {
                return Err(CliError::file(&scenes_path, format!("duplicate scene id {}", r.id)));
            }
        }

        let texts_path = dir.join(TEXTS_FILE);
        let mut texts = BTreeMap::new();
        for r in read_jsonl::<TextRecord>(&texts_path)? {
            let tokens = from_rows(&texts_path, &format!("text {}", r.id), &r.tokens)?;
            check_width(&texts_path, "text", r.id, &tokens, d_f)?;
            let features = TokenFeatures::text(tokens)
                .map_err(|e| CliError::file(&texts_path, format!("text {}: {e}", r.id)))?;
            let text = Text {
                id: r.id,
                scene_id: r.scene_id,
                features,
            };
            if texts.insert(r.id, text).is_some() {
                return Err(CliError::file(&texts_path, format!("duplicate text id {}", r.id)));
            }
        }

        let text_ids: BTreeSet<usize> = texts.keys().copied().collect();
        let mapped: BTreeSet<usize> = noise.clean_map.keys().copied().collect();
        if text_ids != mapped {
            return Err(CliError::file(&noise_path, "clean_map must cover every text id exactly once"));
        }

        let split_lists = [&meta.splits.train, &meta.splits.val, &meta.splits.test];
        let mut part_of_scene = BTreeMap::new();
        for (part, ids) in split_lists.iter().enumerate() {
            for &id in ids.iter() {
                if !scenes.contains_key(&id) || part_of_scene.insert(id, part).is_some() {
                    return Err(CliError::file(&meta_path, format!("scene {id} is unknown or listed twice")));
                }
            }
        }
        if part_of_scene.len() != scenes.len() {
            return Err(CliError::file(&meta_path, "splits must cover every scene"));
        }

        let mut parts: [Dataset; 3] = std::array::from_fn(|i| Dataset {
            scenes: Vec::new(),
            texts: Vec::new(),
            clean_map: BTreeMap::new(),
            noise_rate: if i == 0 { meta.noise_rate } else { 0.0 },
        });
        for (id, scene) in scenes {
            parts[part_of_scene[&id]].scenes.push(scene);
        }
        for (id, text) in texts {
            let clean = noise.clean_map[&id];
            let part = *part_of_scene.get(&clean).ok_or_else(|| {
                CliError::file(&noise_path, format!("text {id} maps to unknown scene {clean}"))
            })?;
            let assigned_part = part_of_scene.get(&text.scene_id).copied();
            if assigned_part != Some(part) || (part != 0 && text.scene_id != clean) {
                return Err(CliError::file(
                    &texts_path,
                    format!("text {id} is paired with scene {} outside its split", text.scene_id),
                ));
            }
            parts[part].clean_map.insert(id, clean);
            parts[part].texts.push(text);
        }
        Ok(Self { meta, parts })
    }
}

fn check_width(path: &Path, what: &str, id: usize, tokens: &DenseArray, d_f: usize) -> CliResult<()> {
    if tokens.cols() != d_f {
        return Err(CliError::file(
            path,
            format!("{what} {id} has feature width {}, meta.json says d_f = {d_f}", tokens.cols()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_digest: String,
    pub d_f: usize,
    pub d_c: usize,
    pub dap: DapConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(params: &DapParams, dap: DapConfig, config_digest: String) -> Self {
        let params_out = DapParams::names()
            .into_iter()
            .zip(params.arrays())
            .map(|(name, a)| NamedArray {
                name,
                shape: a.shape(),
                values: a.values().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config_digest,
            d_f: params.d_f(),
            d_c: params.d_c(),
            dap,
            params: params_out,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let c: Self = read_json(path)?;
        check_version(path, c.format_version)?;
        Ok(c)
    }

    pub fn params(&self, path: &Path) -> CliResult<DapParams> {
        let names = DapParams::names();
        if self.params.len() != names.len() {
            return Err(CliError::file(
                path,
                format!("expected {} parameter arrays, found {}", names.len(), self.params.len()),
            ));
        }
        let mut arrays = Vec::with_capacity(names.len());
        for (want, a) in names.iter().zip(&self.params) {
            if &a.name != want {
                return Err(CliError::file(path, format!("expected array {want}, found {}", a.name)));
            }
            let array = DenseArray::new(a.shape, a.values.clone())
                .map_err(|e| CliError::file(path, format!("{}: {e}", a.name)))?;
            arrays.push(array);
        }
        let params = DapParams::from_arrays(arrays).map_err(|e| CliError::file(path, e))?;
        if params.d_f() != self.d_f || params.d_c() != self.d_c {
            return Err(CliError::file(path, "d_f/d_c disagree with the parameter shapes"));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub format_version: u32,
    pub p2t: DirectionRecall,
    pub t2p: DirectionRecall,
    pub rsum: f64,
    pub config_digest: String,
}

impl MetricsFile {
    pub fn new(m: &RetrievalMetrics, config_digest: String) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            p2t: m.p2t,
            t2p: m.t2p,
            rsum: m.rsum,
            config_digest,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let m: Self = read_json(path)?;
        check_version(path, m.format_version)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLogLine {
    pub format_version: u32,
    #[serde(flatten)]
    pub record: EpochRecord,
}

pub fn write_trainlog(path: &Path, log: &TrainLog) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    write_jsonl(
        path,
        log.epochs.iter().map(|&record| TrainLogLine {
            format_version: FORMAT_VERSION,
            record,
        }),
    )
}

pub fn read_trainlog(path: &Path) -> CliResult<TrainLog> {
    let lines: Vec<TrainLogLine> = read_jsonl(path)?;
    for line in &lines {
        check_version(path, line.format_version)?;
    }
    Ok(TrainLog {
        epochs: lines.into_iter().map(|l| l.record).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionFile {
    pub format_version: u32,
    pub config_digest: String,
    pub records: Vec<AttentionRecord>,
}

impl AttentionFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let a: Self = read_json(path)?;
        check_version(path, a.format_version)?;
        Ok(a)
    }
}

/// `trainlog.jsonl` next to the checkpoint.
pub fn default_trainlog_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("trainlog.jsonl")
}
