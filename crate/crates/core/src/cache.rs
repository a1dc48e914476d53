//! Per-head key/value storage.

use crate::pruning::LayerDecision;

/// Keys and values of one attention head, with the original sequence
/// position of every stored row. Heads own their caches outright, so two
/// heads of one layer may hold different row sets after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKVCache {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
}

impl HeadKVCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
        }
    }

    /// Builds a cache from flat row-major key and value blocks at positions `0..n`.
    pub fn from_prefill(head_dim: usize, keys: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(keys.len(), values.len());
        assert_eq!(keys.len() % head_dim, 0);
        let n = keys.len() / head_dim;
        Self {
            head_dim,
            keys,
            values,
            positions: (0..n).collect(),
        }
    }

    /// Appends one row. `position` must exceed every stored position.
    pub fn push(&mut self, key: &[f64], value: &[f64], position: usize) {
        assert_eq!(key.len(), self.head_dim);
        assert_eq!(value.len(), self.head_dim);
        assert!(self.positions.last().is_none_or(|&p| p < position));
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    /// Keeps only rows whose flag is set; order is preserved.
    pub(crate) fn retain_rows(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.len());
        let d = self.head_dim;
        let mut w = 0;
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            if r != w {
                self.keys.copy_within(r * d..(r + 1) * d, w * d);
                self.values.copy_within(r * d..(r + 1) * d, w * d);
                self.positions[w] = self.positions[r];
            }
            w += 1;
        }
        self.keys.truncate(w * d);
        self.values.truncate(w * d);
        self.positions.truncate(w);
    }
}

/// Everything a session carries between decode steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// `caches[layer][head]`, layers 0-based here.
    pub caches: Vec<Vec<HeadKVCache>>,
    pub prompt_len: usize,
    pub next_position: usize,
    /// Vision attention score of every layer, recorded during prefill.
    pub vision_scores: Vec<f64>,
    /// Decisions reported by the pruning hook, one per layer it ran on.
    pub decisions: Vec<LayerDecision>,
}

impl DecoderState {
    pub fn num_layers(&self) -> usize {
        self.caches.len()
    }

    pub fn decision(&self, layer: usize) -> Option<&LayerDecision> {
        self.decisions.iter().find(|d| d.layer == layer)
    }
}
