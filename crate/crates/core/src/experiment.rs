//! End-to-end pipeline behind the CLI: run, sweep, replay.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{FastV, Vtw};
use crate::config::{ExperimentConfig, Method};
use crate::layout::MultimodalSequence;
use crate::metrics::{account, median, MetricsReport, MIN_LATENCY_STEPS};
use crate::model::{PruningHook, ToyLvlm};
use crate::pruning::{LayerDecision, Plphp, PruningConfig};
use crate::tensor::argmax;
use crate::trace::{read_trace, replay, write_trace, AttentionTrace};
use crate::Error;

/// JSON report written by `run`. Everything except `metrics.decode_latency_ms`
/// is a deterministic function of the config.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub generated_tokens: Vec<u32>,
    pub decisions: Vec<LayerDecision>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: AttentionTrace,
}

/// The weight seed and sequence seed derive from the one experiment seed.
pub fn build_inputs(cfg: &ExperimentConfig) -> Result<(ToyLvlm, MultimodalSequence), Error> {
    let model = ToyLvlm::new(cfg.model, cfg.seed)?;
    let seq = MultimodalSequence::build(&cfg.segments, cfg.seed, cfg.model.vocab_size)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok((model, seq))
}

fn make_hook(cfg: &ExperimentConfig) -> Result<Option<Box<dyn PruningHook>>, Error> {
    Ok(match cfg.method {
        Method::None => None,
        Method::Plphp => Some(Box::new(Plphp::new(cfg.pruning_config())?)),
        Method::FastV => Some(Box::new(FastV::new(cfg.fastv))),
        Method::Vtw => Some(Box::new(Vtw::new(cfg.vtw()))),
    })
}

/// Prefill under the configured method, then a greedy rollout of `steps`
/// tokens starting from the prompt's own prediction. No files are written.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let (model, seq) = build_inputs(cfg)?;
    let mut hook = make_hook(cfg)?;
    let (mut state, prefill) = model.prefill(
        &seq,
        hook.as_mut().map(|h| h.as_mut() as &mut dyn PruningHook),
    )?;
    let trace = AttentionTrace::from_prefill(&seq.layout, &prefill)?;
    let mut metrics = account(&state, &seq.layout);
    let start = argmax(&prefill.last_logits).expect("vocab is nonempty") as u32;
    let rollout = model.rollout(&mut state, start, cfg.steps)?;
    if cfg.steps >= MIN_LATENCY_STEPS {
        metrics.decode_latency_ms = median(&rollout.step_ms);
    }
    Ok(RunOutput {
        report: RunReport {
            method: cfg.method,
            config: cfg.clone(),
            metrics,
            generated_tokens: rollout.tokens,
            decisions: state.decisions,
        },
        trace,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_path(cfg: &ExperimentConfig, json: &Path) -> PathBuf {
    cfg.csv_out
        .clone()
        .unwrap_or_else(|| json.with_extension("csv"))
}

pub fn write_report(cfg: &ExperimentConfig, report: &RunReport) -> Result<(), Error> {
    if let Some(path) = &cfg.report_out {
        let mut json = serde_json::to_vec_pretty(report)?;
        json.push(b'\n');
        write_file(path, &json)?;
        let mut csv = Vec::new();
        report.metrics.write_csv(&mut csv)?;
        write_file(&csv_path(cfg, path), &csv)?;
    } else if let Some(path) = &cfg.csv_out {
        let mut csv = Vec::new();
        report.metrics.write_csv(&mut csv)?;
        write_file(path, &csv)?;
    }
    Ok(())
}

/// [`run`] plus writing the trace and report files the config names.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    let out = run(cfg)?;
    if let Some(path) = &cfg.trace_out {
        write_trace(path, &out.trace).map_err(|e| Error::trace_at(path, e))?;
    }
    write_report(cfg, &out.report)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: f64,
    pub delta_r: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub retention_rate: Option<f64>,
    pub kv_fraction: Option<f64>,
    pub decode_latency_ms: Option<f64>,
}

/// Thread cap from `PLPHP_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("PLPHP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

/// Runs PLPHP at every grid point. Points that fail validation are kept
/// as `failed` rows; the output order is the grid order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, Error> {
    if cfg.grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let base = ExperimentConfig {
        method: Method::Plphp,
        ..cfg.clone()
    };
    let points = cfg.grid.points(&base.pruning_config());
    let eval = |p: &PruningConfig| -> SweepRow {
        let point = ExperimentConfig {
            pruning: *p,
            ..base.clone()
        };
        let result = run(&point);
        let (status, metrics) = match result {
            Ok(out) => ("ok".to_string(), Some(out.report.metrics)),
            Err(e) => (format!("failed: {e}"), None),
        };
        SweepRow {
            r: p.r,
            delta_r: p.delta_r,
            alpha: p.alpha,
            beta: p.beta,
            status,
            retention_rate: metrics.as_ref().map(|m| m.retention_rate),
            kv_fraction: metrics.as_ref().map(|m| m.kv_fraction),
            decode_latency_ms: metrics.and_then(|m| m.decode_latency_ms),
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(|| points.par_iter().map(eval).collect()))
}

/// Columns: `r,dr,alpha,beta,status,rr,kv,latency_ms`.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "r",
        "dr",
        "alpha",
        "beta",
        "status",
        "rr",
        "kv",
        "latency_ms",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        w.write_record([
            row.r.to_string(),
            row.delta_r.to_string(),
            row.alpha.to_string(),
            row.beta.to_string(),
            row.status.clone(),
            opt(row.retention_rate),
            opt(row.kv_fraction),
            opt(row.decode_latency_ms),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn sweep_and_write(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, Error> {
    let rows = sweep(cfg)?;
    if let Some(path) = &cfg.sweep_out {
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf)?;
        write_file(path, &buf)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub pruning: PruningConfig,
    pub metrics: MetricsReport,
    pub decisions: Vec<LayerDecision>,
}

/// Reads the trace named by `trace`, replays the PLPHP decisions, and
/// writes the report files.
pub fn replay_cmd(cfg: &ExperimentConfig) -> Result<ReplayReport, Error> {
    let path = cfg
        .trace_in
        .as_ref()
        .ok_or_else(|| Error::Config("replay needs --trace".into()))?;
    let trace = read_trace(path).map_err(|e| Error::trace_at(path, e))?;
    let mut pruning = cfg.pruning_config();
    if cfg.last_layer.is_none() {
        if let Some((first, _)) = pruning.layer_range {
            pruning.layer_range = Some((first, trace.num_layers().saturating_sub(1)));
        }
    }
    let (decisions, metrics) = replay(&trace, &pruning)?;
    let report = ReplayReport {
        pruning,
        metrics,
        decisions,
    };
    if let Some(path) = &cfg.report_out {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_file(path, &json)?;
        let mut csv = Vec::new();
        report.metrics.write_csv(&mut csv)?;
        write_file(&csv_path(cfg, path), &csv)?;
    }
    Ok(report)
}
