//! One function per subcommand. Each returns the text printed on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use roma_core::dap::{embed, DapConfig, DapParams, TokenFeatures};
use roma_core::eval::{attention_dump, recall_at_k, Corpus, RetrievalMetrics};
use roma_core::gradcheck::{check_op, GradcheckConfig, GradcheckReport, CHECKS};
use roma_core::rncl::{find_threshold, rnc_per_pair, ThresholdCandidate};
use roma_core::synth::{prepare, Dataset};
use roma_core::trainer::{train, TrainLog};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{
    default_trainlog_path, write_json, write_trainlog, AttentionFile, Checkpoint, DatasetDir, Meta,
    MetricsFile, SplitIds, FORMAT_VERSION,
};

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing path: pass {flag} or set it under \"paths\"")))
}

fn encode_parallel<'a>(
    samples: impl IntoParallelIterator<Item = (usize, &'a TokenFeatures)>,
    params: &DapParams,
    config: &DapConfig,
) -> CliResult<Corpus> {
    let encoded: Vec<(usize, _)> = samples
        .into_par_iter()
        .map(|(id, f)| embed(f, params, config).map(|e| (id, e)))
        .collect::<Result<_, _>>()?;
    let (ids, embeddings) = encoded.into_iter().unzip();
    Ok(Corpus { ids, embeddings })
}

/// Recall of `params` on `ds` against its clean pairing, embedding in parallel.
pub fn evaluate_parallel(ds: &Dataset, params: &DapParams, config: &DapConfig) -> CliResult<RetrievalMetrics> {
    let scenes = encode_parallel(ds.scenes.par_iter().map(|s| (s.id, &s.features)), params, config)?;
    let texts = encode_parallel(ds.texts.par_iter().map(|t| (t.id, &t.features)), params, config)?;
    Ok(recall_at_k(&scenes, &texts, &ds.clean_map)?)
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<String> {
    let out = required(&cfg.paths.data_dir, "--out")?;
    let parts = prepare(&cfg.generator, cfg.data.split, cfg.data.noise_rate)?;
    let ids = |d: &Dataset| d.scenes.iter().map(|s| s.id).collect();
    let meta = Meta {
        format_version: FORMAT_VERSION,
        spec: cfg.generator,
        seed: cfg.seed,
        noise_rate: cfg.data.noise_rate,
        split_fractions: cfg.data.split,
        splits: SplitIds {
            train: ids(&parts[0]),
            val: ids(&parts[1]),
            test: ids(&parts[2]),
        },
        config_digest: cfg.digest(),
    };
    let summary = format!(
        "wrote {} scenes ({}/{}/{}) and {} texts ({} re-paired) to {}",
        parts.iter().map(|p| p.scenes.len()).sum::<usize>(),
        parts[0].scenes.len(),
        parts[1].scenes.len(),
        parts[2].scenes.len(),
        parts.iter().map(|p| p.texts.len()).sum::<usize>(),
        parts[0].noisy_count(),
        out.display()
    );
    DatasetDir { meta, parts }.write(out)?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let data = DatasetDir::read(required(&cfg.paths.data_dir, "--data")?)?;
    let checkpoint = required(&cfg.paths.checkpoint, "--out")?;
    let log_path = cfg
        .paths
        .trainlog
        .clone()
        .unwrap_or_else(|| default_trainlog_path(checkpoint));
    let [train_set, val_set, _] = &data.parts;
    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let (params, log) = train(train_set, val_set, &cfg.train, &mut clock)?;
    write_json(checkpoint, &Checkpoint::new(&params, cfg.train.dap, cfg.digest()))?;
    write_trainlog(&log_path, &log)?;
    Ok(train_summary(&log, checkpoint))
}

fn train_summary(log: &TrainLog, checkpoint: &Path) -> String {
    let last = log.epochs.last().expect("at least one epoch");
    format!(
        "{} epochs, final loss {:.4}, val R@1 p2t {:.1} t2p {:.1}; checkpoint {}",
        log.epochs.len(),
        last.mean_loss,
        last.val_r1_p2t,
        last.val_r1_t2p,
        checkpoint.display()
    )
}

fn load_model(cfg: &RunConfig, data: &DatasetDir) -> CliResult<(Checkpoint, DapParams)> {
    let path = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let checkpoint = Checkpoint::read(path)?;
    let params = checkpoint.params(path)?;
    if params.d_f() != data.d_f() {
        return Err(CliError::Usage(format!(
            "dimension mismatch: checkpoint d_f = {}, dataset d_f = {}",
            params.d_f(),
            data.d_f()
        )));
    }
    Ok((checkpoint, params))
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let data = DatasetDir::read(required(&cfg.paths.data_dir, "--data")?)?;
    let out = required(&cfg.paths.metrics, "--out")?;
    let (checkpoint, params) = load_model(cfg, &data)?;
    let metrics = evaluate_parallel(&data.parts[cfg.eval.split.index()], &params, &checkpoint.dap)?;
    write_json(out, &MetricsFile::new(&metrics, cfg.digest()))?;
    Ok(metrics.summary())
}

pub fn run_gradcheck_parallel(cfg: &GradcheckConfig) -> CliResult<GradcheckReport> {
    cfg.validate()?;
    let ops = CHECKS
        .par_iter()
        .map(|name| check_op(name, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops,
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let report = run_gradcheck_parallel(&cfg.gradcheck)?;
    let mut text = String::new();
    for op in &report.ops {
        writeln!(
            text,
            "{:<20} {:>4} configs {:>7} coords  max rel err {:.3e}  {}",
            op.op,
            op.configurations,
            op.coordinates,
            op.max_rel_error,
            if op.passed { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    if !report.passed() {
        print!("{text}");
        return Err(CliError::Verification(format!(
            "gradient mismatch above {:e} in: {}",
            report.tolerance,
            report.failing().join(", ")
        )));
    }
    write!(text, "all {} checks within {:e}", report.ops.len(), report.tolerance).unwrap();
    Ok(text)
}

#[derive(Serialize)]
struct ScanRow {
    row: &'static str,
    alpha: f64,
    #[serde(rename = "S")]
    s: f64,
    loss: f64,
    grad: f64,
    candidate_stationary: Option<f64>,
    candidate_shifted: Option<f64>,
    matches: Option<&'static str>,
}

pub fn cmd_loss_scan(cfg: &RunConfig) -> CliResult<String> {
    let out = required(&cfg.paths.loss_scan, "--out")?;
    let grid = cfg.loss_scan.grid;
    let mut rows = Vec::new();
    let mut text = String::new();
    for &alpha in &cfg.loss_scan.alphas {
        let points = std::iter::once(0.0).chain((1..=grid).map(|i| i as f64 / (grid + 1) as f64));
        for s in points {
            let (loss, grad) = rnc_per_pair(s, alpha)?;
            rows.push(ScanRow {
                row: "scan",
                alpha,
                s,
                loss,
                grad,
                candidate_stationary: None,
                candidate_shifted: None,
                matches: None,
            });
        }
        let report = find_threshold(alpha, 1e-12)?;
        let (loss, grad) = rnc_per_pair(report.s_star, alpha)?;
        let matched = report.matched.map(ThresholdCandidate::as_str);
        rows.push(ScanRow {
            row: "summary",
            alpha,
            s: report.s_star,
            loss,
            grad,
            candidate_stationary: Some(ThresholdCandidate::Stationary.value(alpha)),
            candidate_shifted: Some(ThresholdCandidate::Shifted.value(alpha)),
            matches: Some(matched.unwrap_or("none")),
        });
        writeln!(
            text,
            "alpha {alpha}: S* = {:.10}, max loss {loss:.6}, matches {}",
            report.s_star,
            matched.unwrap_or("neither candidate")
        )
        .unwrap();
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::file(out, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::file(out, e))?;
    }
    w.flush().map_err(|e| CliError::file(out, e))?;
    write!(text, "wrote {}", out.display()).unwrap();
    Ok(text)
}

pub fn cmd_attn_dump(cfg: &RunConfig) -> CliResult<String> {
    let data = DatasetDir::read(required(&cfg.paths.data_dir, "--data")?)?;
    let out = required(&cfg.paths.attn_dump, "--out")?;
    let (checkpoint, params) = load_model(cfg, &data)?;
    let wanted = &cfg.attn_dump;
    if wanted.scenes.is_empty() && wanted.texts.is_empty() {
        return Err(CliError::Usage("attn-dump needs at least one --scene or --text id".into()));
    }
    let mut samples = Vec::new();
    for &id in &wanted.scenes {
        let scene = data
            .parts
            .iter()
            .flat_map(|p| &p.scenes)
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Usage(format!("unknown scene id {id}")))?;
        samples.push((id, &scene.features));
    }
    for &id in &wanted.texts {
        let text = data
            .parts
            .iter()
            .flat_map(|p| &p.texts)
            .find(|t| t.id == id)
            .ok_or_else(|| CliError::Usage(format!("unknown text id {id}")))?;
        samples.push((id, &text.features));
    }
    let records = samples
        .par_iter()
        .map(|&(id, f)| attention_dump(id, f, &params, &checkpoint.dap))
        .collect::<Result<Vec<_>, _>>()?;
    let n = records.len();
    write_json(
        out,
        &AttentionFile {
            format_version: FORMAT_VERSION,
            config_digest: cfg.digest(),
            records,
        },
    )?;
    Ok(format!("wrote {n} attention records to {}", out.display()))
}
