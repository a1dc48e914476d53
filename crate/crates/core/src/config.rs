//! Experiment configuration and its flat `key = value` file format.
//!
//! Every key is the name of the matching CLI flag without the leading
//! dashes. Blank lines and lines starting with `#` are ignored. Values are
//! applied in order, so later assignments win; the CLI applies the file
//! first and flags afterwards.
//!
//! ```text
//! # three-layer-deep pruning on a single image
//! model-layers = 12
//! segments = T:8,I:92,T:4
//! method = plphp
//! r = 0.4
//! grid-r = 0.3,0.4,0.5
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::baselines::{FastVConfig, VtwConfig};
use crate::layout::{format_segments, parse_segments, SegmentSpec};
use crate::model::ModelConfig;
use crate::pruning::PruningConfig;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Plphp,
    FastV,
    Vtw,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Method::None),
            "plphp" => Ok(Method::Plphp),
            "fastv" => Ok(Method::FastV),
            "vtw" => Ok(Method::Vtw),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected none|plphp|fastv|vtw)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::None => "none",
            Method::Plphp => "plphp",
            Method::FastV => "fastv",
            Method::Vtw => "vtw",
        })
    }
}

/// Hyperparameter grid for sweeps. Empty axes fall back to the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepGrid {
    pub r: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
            && self.delta_r.is_empty()
            && self.alpha.is_empty()
            && self.beta.is_empty()
    }

    /// Cartesian product, `r` outermost then `dr`, `alpha`, `beta`.
    pub fn points(&self, base: &PruningConfig) -> Vec<PruningConfig> {
        let axis = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut out = Vec::new();
        for &r in &axis(&self.r, base.r) {
            for &delta_r in &axis(&self.delta_r, base.delta_r) {
                for &alpha in &axis(&self.alpha, base.alpha) {
                    for &beta in &axis(&self.beta, base.beta) {
                        out.push(PruningConfig {
                            r,
                            delta_r,
                            alpha,
                            beta,
                            layer_range: base.layer_range,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub segments: Vec<SegmentSpec>,
    pub method: Method,
    /// `r`, `dr`, `alpha`, `beta`; the layer range comes from the two fields below.
    pub pruning: PruningConfig,
    pub first_layer: Option<usize>,
    pub last_layer: Option<usize>,
    pub fastv: FastVConfig,
    /// `None` resolves to `ceil(N / 2)`.
    pub vtw_k: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    pub trace_out: Option<PathBuf>,
    pub trace_in: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub csv_out: Option<PathBuf>,
    pub sweep_out: Option<PathBuf>,
    pub grid: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                max_positions: 1024,
                ..ModelConfig::default()
            },
            segments: vec![
                SegmentSpec::text(8),
                SegmentSpec::image(92),
                SegmentSpec::text(4),
            ],
            method: Method::Plphp,
            pruning: PruningConfig::default(),
            first_layer: None,
            last_layer: None,
            fastv: FastVConfig::default(),
            vtw_k: None,
            seed: 0,
            steps: 32,
            trace_out: None,
            trace_in: None,
            report_out: None,
            csv_out: None,
            sweep_out: None,
            grid: SweepGrid::default(),
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in documentation order.
pub const KEYS: &[&str] = &[
    "model-layers",
    "model-heads",
    "model-dim",
    "head-dim",
    "vocab-size",
    "max-positions",
    "segments",
    "method",
    "r",
    "dr",
    "alpha",
    "beta",
    "first-layer",
    "last-layer",
    "fastv-k",
    "fastv-ratio",
    "vtw-k",
    "seed",
    "steps",
    "trace-out",
    "trace",
    "report-out",
    "csv-out",
    "sweep-out",
    "grid-r",
    "grid-dr",
    "grid-alpha",
    "grid-beta",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, Error> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Pruning parameters with the layer range resolved against the model depth.
    pub fn pruning_config(&self) -> PruningConfig {
        let layer_range = match (self.first_layer, self.last_layer) {
            (None, None) => None,
            (first, last) => Some((
                first.unwrap_or(3),
                last.unwrap_or(self.model.num_layers.saturating_sub(1)),
            )),
        };
        PruningConfig {
            layer_range,
            ..self.pruning
        }
    }

    pub fn vtw(&self) -> VtwConfig {
        VtwConfig {
            k_layer: self.vtw_k.unwrap_or(self.model.num_layers.div_ceil(2)),
        }
    }

    /// Assigns one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match key.trim() {
            "model-layers" => self.model.num_layers = parse(key, v)?,
            "model-heads" => self.model.num_heads = parse(key, v)?,
            "model-dim" => self.model.model_dim = parse(key, v)?,
            "head-dim" => self.model.head_dim = parse(key, v)?,
            "vocab-size" => self.model.vocab_size = parse(key, v)?,
            "max-positions" => self.model.max_positions = parse(key, v)?,
            "segments" => {
                self.segments = parse_segments(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "method" => self.method = v.parse()?,
            "r" => self.pruning.r = parse(key, v)?,
            "dr" => self.pruning.delta_r = parse(key, v)?,
            "alpha" => self.pruning.alpha = parse(key, v)?,
            "beta" => self.pruning.beta = parse(key, v)?,
            "first-layer" => self.first_layer = Some(parse(key, v)?),
            "last-layer" => self.last_layer = Some(parse(key, v)?),
            "fastv-k" => self.fastv.k_layer = parse(key, v)?,
            "fastv-ratio" => self.fastv.prune_ratio = parse(key, v)?,
            "vtw-k" => self.vtw_k = Some(parse(key, v)?),
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "trace-out" => self.trace_out = path(),
            "trace" => self.trace_in = path(),
            "report-out" => self.report_out = path(),
            "csv-out" => self.csv_out = path(),
            "sweep-out" => self.sweep_out = path(),
            "grid-r" => self.grid.r = parse_list(key, v)?,
            "grid-dr" => self.grid.delta_r = parse_list(key, v)?,
            "grid-alpha" => self.grid.alpha = parse_list(key, v)?,
            "grid-beta" => self.grid.beta = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file's contents on top of `self`.
    pub fn apply_file(&mut self, text: &str) -> Result<(), Error> {
        for (n, line) in text.lines().enumerate() {
            // `#` starts a comment anywhere on the line
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Serializes back to the file format (output paths and grid included).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("model-layers", self.model.num_layers.to_string());
        put("model-heads", self.model.num_heads.to_string());
        put("model-dim", self.model.model_dim.to_string());
        put("head-dim", self.model.head_dim.to_string());
        put("vocab-size", self.model.vocab_size.to_string());
        put("max-positions", self.model.max_positions.to_string());
        put("segments", format_segments(&self.segments));
        put("method", self.method.to_string());
        put("r", self.pruning.r.to_string());
        put("dr", self.pruning.delta_r.to_string());
        put("alpha", self.pruning.alpha.to_string());
        put("beta", self.pruning.beta.to_string());
        if let Some(first) = self.first_layer {
            put("first-layer", first.to_string());
        }
        if let Some(last) = self.last_layer {
            put("last-layer", last.to_string());
        }
        put("fastv-k", self.fastv.k_layer.to_string());
        put("fastv-ratio", self.fastv.prune_ratio.to_string());
        if let Some(k) = self.vtw_k {
            put("vtw-k", k.to_string());
        }
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        out
    }

    /// Checks everything that can be checked without running the model.
    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        let s: usize = self.segments.iter().map(|s| s.length).sum();
        if s + self.steps > self.model.max_positions {
            return Err(Error::Config(format!(
                "prompt of {s} plus {} steps exceeds max-positions {}",
                self.steps, self.model.max_positions
            )));
        }
        crate::layout::Layout::new(&self.segments).map_err(|e| Error::Config(e.to_string()))?;
        match self.method {
            Method::None => {}
            Method::Plphp => self.pruning_config().validate_for(self.model.num_layers)?,
            Method::FastV => self.fastv.validate(self.model.num_layers)?,
            Method::Vtw => self.vtw().validate(self.model.num_layers)?,
        }
        Ok(())
    }
}
