//! `PLPT` attention-trace files and offline replay.
//!
//! Layout (all integers `u32`, everything little-endian):
//!
//! ```text
//! offset  field
//! 0       magic "PLPT"
//! 4       version (1)
//! 8       N (layers)
//! 12      H (heads)
//! 16      S (prompt length)
//! 20      segment count C
//! 24      C pairs of (kind, length); kind 0 = text, 1 = image
//! ..      N*H*S f64 values in (layer, head, position) order
//! ```
//!
//! Each `(layer, head)` row is the final prompt token's attention over all
//! `S` positions. Files are rejected on load if they are truncated, carry
//! trailing bytes, or contain a row that does not sum to 1 within 1e-6.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::layout::{Layout, LayoutError, SegmentKind, SegmentSpec};
use crate::metrics::{account_decisions, MetricsReport};
use crate::model::PrefillReport;
use crate::pruning::{decide_layer, LayerDecision, PruneError, PruningConfig};

pub const MAGIC: &[u8; 4] = b"PLPT";
pub const VERSION: u32 = 1;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace: {0}")]
    Format(String),
    #[error("trace layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("row (layer {layer}, head {head}) sums to {sum}")]
    RowSum { layer: usize, head: usize, sum: f64 },
    #[error(transparent)]
    Prune(#[from] PruneError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    layout: Layout,
    rows: Vec<f64>,
}

impl AttentionTrace {
    /// Validates shape, finiteness, and row sums.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        segments: &[SegmentSpec],
        rows: Vec<f64>,
    ) -> Result<Self, TraceError> {
        let layout = Layout::new(segments)?;
        let s = layout.len();
        if num_layers == 0 || num_heads == 0 {
            return Err(TraceError::Format(
                "trace needs at least one layer and head".into(),
            ));
        }
        if rows.len() != num_layers * num_heads * s {
            return Err(TraceError::Format(format!(
                "{} values for {num_layers}x{num_heads}x{s}",
                rows.len()
            )));
        }
        for (i, row) in rows.chunks(s).enumerate() {
            let sum: f64 = row.iter().sum();
            if !sum.is_finite()
                || (sum - 1.0).abs() > ROW_SUM_TOLERANCE
                || row.iter().any(|v| *v < 0.0)
            {
                return Err(TraceError::RowSum {
                    layer: i / num_heads + 1,
                    head: i % num_heads + 1,
                    sum,
                });
            }
        }
        Ok(Self {
            num_layers,
            num_heads,
            layout,
            rows,
        })
    }

    /// Captures the final-token rows recorded during a prefill.
    pub fn from_prefill(layout: &Layout, report: &PrefillReport) -> Result<Self, TraceError> {
        let num_layers = report.last_rows.len();
        let num_heads = report.last_rows.first().map_or(0, Vec::len);
        let rows = report
            .last_rows
            .iter()
            .flatten()
            .flatten()
            .copied()
            .collect();
        Self::new(num_layers, num_heads, &layout.specs(), rows)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `layer` is 1-based, `head` 0-based.
    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let s = self.layout.len();
        let start = ((layer - 1) * self.num_heads + head) * s;
        &self.rows[start..start + s]
    }

    pub fn layer_rows(&self, layer: usize) -> Vec<&[f64]> {
        (0..self.num_heads).map(|h| self.row(layer, h)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let segments = self.layout.specs();
        let mut out = Vec::with_capacity(24 + segments.len() * 8 + self.rows.len() * 8);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.num_layers as u32,
            self.num_heads as u32,
            self.layout.len() as u32,
            segments.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for seg in &segments {
            let kind: u32 = match seg.kind {
                SegmentKind::Text => 0,
                SegmentKind::Image => 1,
            };
            out.extend_from_slice(&kind.to_le_bytes());
            out.extend_from_slice(&(seg.length as u32).to_le_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TraceError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TraceError::Format(format!("unsupported version {version}")));
        }
        let num_layers = r.u32()? as usize;
        let num_heads = r.u32()? as usize;
        let s = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut segments = Vec::with_capacity(count.min(bytes.len() / 8));
        for _ in 0..count {
            let kind = match r.u32()? {
                0 => SegmentKind::Text,
                1 => SegmentKind::Image,
                k => return Err(TraceError::Format(format!("unknown segment kind {k}"))),
            };
            segments.push(SegmentSpec {
                kind,
                length: r.u32()? as usize,
            });
        }
        let total: usize = segments.iter().map(|s| s.length).sum();
        if total != s {
            return Err(TraceError::Format(format!(
                "segments cover {total} tokens, header says {s}"
            )));
        }
        let n = num_layers
            .checked_mul(num_heads)
            .and_then(|v| v.checked_mul(s))
            .ok_or_else(|| TraceError::Format("dimensions overflow".into()))?;
        if r.remaining() != n.saturating_mul(8) {
            return Err(TraceError::Format(format!(
                "expected {} payload bytes, found {}",
                n.saturating_mul(8),
                r.remaining()
            )));
        }
        let rows = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(num_layers, num_heads, &segments, rows)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TraceError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn write_trace(path: impl AsRef<Path>, trace: &AttentionTrace) -> Result<(), TraceError> {
    fs::write(path, trace.to_bytes())?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace, TraceError> {
    AttentionTrace::from_bytes(&fs::read(path)?)
}

/// Recomputes per-layer decisions and RR/KV from a trace, with no model.
pub fn replay(
    trace: &AttentionTrace,
    cfg: &PruningConfig,
) -> Result<(Vec<LayerDecision>, MetricsReport), TraceError> {
    cfg.validate_for(trace.num_layers)?;
    let decisions = (1..=trace.num_layers)
        .map(|layer| {
            decide_layer(
                layer,
                trace.num_layers,
                &trace.layer_rows(layer),
                &trace.layout,
                cfg,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = account_decisions(trace.num_layers, trace.num_heads, &trace.layout, &decisions);
    Ok((decisions, report))
}
