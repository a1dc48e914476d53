//! Retention rate, KV-cache size, and decode latency.
//!
//! Only prompt-derived cache rows count; rows appended while decoding are
//! excluded, and every layer (pruned or exempt) is included:
//!
//! ```text
//! RR = sum over (layer, head) of kept vision rows / (N * H * V)
//! KV = sum over (layer, head) of kept prompt rows / (N * H * S)
//! ```
//!
//! With no vision tokens, `RR` is reported as 1.

use std::io::Write;

use serde::Serialize;

use crate::cache::DecoderState;
use crate::layout::Layout;
use crate::model::{ModelError, ToyLvlm};
use crate::pruning::LayerDecision;

pub const METRIC_DEFINITION: &str = "RR = kept prompt vision rows / (N*H*V); \
KV = kept prompt rows / (N*H*S); all layers and heads; decode-appended rows excluded";

/// Smallest number of decode steps a latency probe accepts.
pub const MIN_LATENCY_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub gamma: Option<f64>,
    pub class: Option<&'static str>,
    pub retention: Option<f64>,
    /// Prompt rows kept, per head.
    pub kept_rows: Vec<usize>,
    /// Prompt vision rows kept, per head.
    pub kept_vision: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub definition: &'static str,
    pub retention_rate: f64,
    pub kv_fraction: f64,
    /// Median milliseconds per generated token, when measured.
    pub decode_latency_ms: Option<f64>,
    pub per_layer: Vec<LayerReport>,
}

impl MetricsReport {
    fn from_layers(per_layer: Vec<LayerReport>, layout: &Layout) -> Self {
        let heads: usize = per_layer.iter().map(|l| l.kept_rows.len()).sum();
        let rows: usize = per_layer.iter().flat_map(|l| &l.kept_rows).sum();
        let vision: usize = per_layer.iter().flat_map(|l| &l.kept_vision).sum();
        let v = layout.num_vision_tokens();
        let retention_rate = if v == 0 || heads == 0 {
            1.0
        } else {
            vision as f64 / (heads * v) as f64
        };
        let kv_fraction = if heads == 0 {
            1.0
        } else {
            rows as f64 / (heads * layout.len()) as f64
        };
        Self {
            definition: METRIC_DEFINITION,
            retention_rate,
            kv_fraction,
            decode_latency_ms: None,
            per_layer,
        }
    }

    /// Fixed columns: `layer,gamma,class,retention,head,kept_rows`, one row
    /// per (layer, head). Missing values are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "gamma", "class", "retention", "head", "kept_rows"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for l in &self.per_layer {
            for (h, kept) in l.kept_rows.iter().enumerate() {
                w.write_record([
                    l.layer.to_string(),
                    opt(l.gamma),
                    l.class.unwrap_or("").to_string(),
                    opt(l.retention),
                    (h + 1).to_string(),
                    kept.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts every head cache of a prefilled (and possibly decoded) state.
pub fn account(state: &DecoderState, layout: &Layout) -> MetricsReport {
    let per_layer = state
        .caches
        .iter()
        .enumerate()
        .map(|(li, heads)| {
            let layer = li + 1;
            let decision = state.decision(layer);
            let mut kept_rows = Vec::with_capacity(heads.len());
            let mut kept_vision = Vec::with_capacity(heads.len());
            for cache in heads {
                let prompt = cache.positions().iter().filter(|&&p| p < state.prompt_len);
                let (mut rows, mut vision) = (0, 0);
                for &p in prompt {
                    rows += 1;
                    vision += usize::from(layout.is_vision(p));
                }
                kept_rows.push(rows);
                kept_vision.push(vision);
            }
            LayerReport {
                layer,
                gamma: state.vision_scores.get(li).copied(),
                class: decision.and_then(LayerDecision::class).map(|c| c.as_str()),
                retention: decision.and_then(LayerDecision::retention),
                kept_rows,
                kept_vision,
            }
        })
        .collect();
    MetricsReport::from_layers(per_layer, layout)
}

/// Metrics implied by a list of decisions, without any caches. Layers
/// without a pruned decision count as full.
pub fn account_decisions(
    num_layers: usize,
    num_heads: usize,
    layout: &Layout,
    decisions: &[LayerDecision],
) -> MetricsReport {
    let s = layout.len();
    let v = layout.num_vision_tokens();
    let text = s - v;
    let per_layer = (1..=num_layers)
        .map(|layer| {
            let decision = decisions.iter().find(|d| d.layer == layer);
            let (kept_rows, kept_vision) = match decision.map(|d| d.heads()) {
                Some(heads) if !heads.is_empty() => {
                    let vision: Vec<usize> = heads.iter().map(|h| h.kept_vision()).collect();
                    (vision.iter().map(|k| text + k).collect(), vision)
                }
                _ => (vec![s; num_heads], vec![v; num_heads]),
            };
            LayerReport {
                layer,
                gamma: decision.map(|d| d.gamma),
                class: decision.and_then(LayerDecision::class).map(|c| c.as_str()),
                retention: decision.and_then(LayerDecision::retention),
                kept_rows,
                kept_vision,
            }
        })
        .collect();
    MetricsReport::from_layers(per_layer, layout)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

#[derive(Debug, thiserror::Error)]
pub enum LatencyError {
    #[error("latency probe needs at least {MIN_LATENCY_STEPS} steps, got {0}")]
    TooFewSteps(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Times `steps` greedy decode steps on `state` and reports the median.
pub fn latency_probe(
    model: &ToyLvlm,
    state: &mut DecoderState,
    start_token: u32,
    steps: usize,
) -> Result<LatencyReport, LatencyError> {
    if steps < MIN_LATENCY_STEPS {
        return Err(LatencyError::TooFewSteps(steps));
    }
    let rollout = model.rollout(state, start_token, steps)?;
    Ok(LatencyReport {
        median_ms: median(&rollout.step_ms).expect("steps > 0"),
        samples_ms: rollout.step_ms,
    })
}
