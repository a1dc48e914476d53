//! A small decoder-only transformer with per-head KV caches.
//!
//! Block structure (pre-norm, RMS-style normalisation without gain):
//!
//! ```text
//! x = tok_emb[id] + pos_emb[pos]
//! per layer:  x += W_O · concat_h(attn_h(rms(x)))
//!             x += W_2 · relu(W_1 · rms(x))
//! logits = rms(x) · W_U
//! ```
//!
//! Positions are absolute and added once at the input, so deleting cache
//! rows never requires renumbering anything.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{DecoderState, HeadKVCache};
use crate::layout::{Layout, MultimodalSequence};
use crate::pruning::{vision_attention_score, LayerDecision, PruneError};
use crate::rng::SeededRng;
use crate::tensor::{argmax, dot, matmul, rms_norm, softmax_in_place, vecmat, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("position {0} is past max_positions")]
    PositionOverflow(usize),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("pruning hook failed at layer {layer}: {source}")]
    Hook {
        layer: usize,
        #[source]
        source: PruneError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            model_dim: 32,
            head_dim: 8,
            vocab_size: 128,
            max_positions: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_layers < 4 {
            return bad(format!(
                "num_layers must be at least 4, got {}",
                self.num_layers
            ));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("num_heads and head_dim must be positive".into());
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return bad(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// One `D x D_k` projector per head.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub unembedding: Matrix,
}

impl ModelWeights {
    /// Draws every weight from `seed`. Entries are unit-variance uniform,
    /// scaled by `1/sqrt(D)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.model_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let half_width = 3f64.sqrt() * scale;
        let mut rng = SeededRng::derived(seed, 0x3e1);
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.uniform(-half_width, half_width))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized by construction")
        };
        let token_embedding = draw(config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|_| {
                let mut wq = Vec::with_capacity(config.num_heads);
                let mut wk = Vec::with_capacity(config.num_heads);
                let mut wv = Vec::with_capacity(config.num_heads);
                for _ in 0..config.num_heads {
                    wq.push(draw(d, config.head_dim));
                    wk.push(draw(d, config.head_dim));
                    wv.push(draw(d, config.head_dim));
                }
                LayerWeights {
                    wq,
                    wk,
                    wv,
                    wo: draw(d, d),
                    w1: draw(d, 4 * d),
                    w2: draw(4 * d, d),
                }
            })
            .collect();
        let unembedding = draw(d, config.vocab_size);
        // Drawn last so raising max_positions leaves every other weight unchanged.
        let position_embedding = draw(config.max_positions, d);
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }
}

/// What a pruning hook sees once a layer's prefill forward pass is done.
#[derive(Debug)]
pub struct LayerView<'a> {
    /// 1-based layer index.
    pub layer: usize,
    pub num_layers: usize,
    /// Attention row of the final prompt token, one per head.
    pub last_rows: &'a [Vec<f64>],
    pub layout: &'a Layout,
}

/// Invoked after each layer of prefill. May shrink that layer's caches.
pub trait PruningHook {
    fn after_layer(
        &mut self,
        view: &LayerView<'_>,
        caches: &mut [HeadKVCache],
    ) -> Result<Option<LayerDecision>, PruneError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillReport {
    /// `last_rows[layer][head]`: final-token attention over all `S` positions.
    pub last_rows: Vec<Vec<Vec<f64>>>,
    /// Logits predicted at the final prompt position.
    pub last_logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyLvlm {
    config: ModelConfig,
    weights: ModelWeights,
}

impl ToyLvlm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn embed(&self, id: u32, pos: usize) -> Result<Vec<f64>, ModelError> {
        if id as usize >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let tok = self.weights.token_embedding.row(id as usize);
        let p = self.weights.position_embedding.row(pos);
        Ok(tok.iter().zip(p).map(|(a, b)| a + b).collect())
    }

    fn mlp_residual(&self, layer: &LayerWeights, x: &mut [f64]) {
        let h = rms_norm(x);
        let mut hidden = vecmat(&h, &layer.w1).expect("shapes fixed by config");
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = vecmat(&hidden, &layer.w2).expect("shapes fixed by config");
        x.iter_mut().zip(out).for_each(|(a, b)| *a += b);
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        vecmat(&rms_norm(x), &self.weights.unembedding).expect("shapes fixed by config")
    }

    /// Runs every layer over the prompt, filling the caches. After layer
    /// `l` completes, `hook` (if any) sees the final token's attention rows
    /// and may prune layer `l`'s caches; the forward values are unaffected.
    pub fn prefill(
        &self,
        seq: &MultimodalSequence,
        mut hook: Option<&mut dyn PruningHook>,
    ) -> Result<(DecoderState, PrefillReport), ModelError> {
        self.prefill_inner(seq, &mut hook, None)
    }

    /// Full causal attention maps `A[layer][head]` (`S x S`) for a prompt.
    /// Quadratic in memory; meant for inspection at small `S`.
    pub fn attention_maps(&self, seq: &MultimodalSequence) -> Result<Vec<Vec<Matrix>>, ModelError> {
        let mut maps = Vec::new();
        self.prefill_inner(seq, &mut None, Some(&mut maps))?;
        Ok(maps)
    }

    fn prefill_inner(
        &self,
        seq: &MultimodalSequence,
        hook: &mut Option<&mut dyn PruningHook>,
        mut capture: Option<&mut Vec<Vec<Matrix>>>,
    ) -> Result<(DecoderState, PrefillReport), ModelError> {
        let cfg = &self.config;
        let s = seq.len();
        if s > cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: s,
                max: cfg.max_positions,
            });
        }
        let (d, dk) = (cfg.model_dim, cfg.head_dim);
        let scale = 1.0 / (dk as f64).sqrt();

        let mut x = Matrix::zeros(s, d);
        for (i, &id) in seq.token_ids.iter().enumerate() {
            x.row_mut(i).copy_from_slice(&self.embed(id, i)?);
        }

        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut last_rows = Vec::with_capacity(cfg.num_layers);
        let mut vision_scores = Vec::with_capacity(cfg.num_layers);
        let mut decisions = Vec::new();
        let vision = seq.layout.vision_index_union();

        for (li, lw) in self.weights.layers.iter().enumerate() {
            let mut h = Matrix::zeros(s, d);
            for i in 0..s {
                h.row_mut(i).copy_from_slice(&rms_norm(x.row(i)));
            }
            let mut concat = Matrix::zeros(s, d);
            let mut layer_caches = Vec::with_capacity(cfg.num_heads);
            let mut layer_rows = Vec::with_capacity(cfg.num_heads);
            let mut layer_maps = Vec::new();
            for head in 0..cfg.num_heads {
                let q = matmul(&h, &lw.wq[head]).expect("shapes fixed by config");
                let k = matmul(&h, &lw.wk[head]).expect("shapes fixed by config");
                let v = matmul(&h, &lw.wv[head]).expect("shapes fixed by config");
                let mut map = capture.as_ref().map(|_| Matrix::zeros(s, s));
                let mut probs = vec![0.0; s];
                for i in 0..s {
                    let row = &mut probs[..=i];
                    for (kk, p) in row.iter_mut().enumerate() {
                        *p = dot(q.row(i), k.row(kk)) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut concat.row_mut(i)[head * dk..(head + 1) * dk];
                    for (kk, &p) in row.iter().enumerate() {
                        for (o, &vv) in out.iter_mut().zip(v.row(kk)) {
                            *o += p * vv;
                        }
                    }
                    if let Some(m) = map.as_mut() {
                        m.row_mut(i)[..=i].copy_from_slice(row);
                    }
                }
                layer_rows.push(probs);
                layer_maps.extend(map);
                layer_caches.push(HeadKVCache::from_prefill(
                    dk,
                    k.data().to_vec(),
                    v.data().to_vec(),
                ));
            }
            let attn = matmul(&concat, &lw.wo).expect("shapes fixed by config");
            for i in 0..s {
                let row = x.row_mut(i);
                row.iter_mut().zip(attn.row(i)).for_each(|(a, b)| *a += b);
                self.mlp_residual(lw, row);
            }

            vision_scores.push(
                vision_attention_score(&layer_rows, &vision)
                    .expect("indices lie inside the prompt"),
            );
            if let Some(hook) = hook.as_deref_mut() {
                let view = LayerView {
                    layer: li + 1,
                    num_layers: cfg.num_layers,
                    last_rows: &layer_rows,
                    layout: &seq.layout,
                };
                let decision = hook
                    .after_layer(&view, &mut layer_caches)
                    .map_err(|source| ModelError::Hook {
                        layer: li + 1,
                        source,
                    })?;
                decisions.extend(decision);
            }
            if let Some(maps) = capture.as_deref_mut() {
                maps.push(layer_maps);
            }
            caches.push(layer_caches);
            last_rows.push(layer_rows);
        }

        let last_logits = self.logits(x.row(s - 1));
        let state = DecoderState {
            caches,
            prompt_len: s,
            next_position: s,
            vision_scores,
            decisions,
        };
        Ok((
            state,
            PrefillReport {
                last_rows,
                last_logits,
            },
        ))
    }

    /// Feeds one token at `state.next_position`, appending one K/V row to
    /// every head cache, and returns the next-token logits.
    pub fn decode_step(
        &self,
        state: &mut DecoderState,
        token_id: u32,
    ) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.config;
        let pos = state.next_position;
        if pos >= cfg.max_positions {
            return Err(ModelError::PositionOverflow(pos));
        }
        let dk = cfg.head_dim;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = self.embed(token_id, pos)?;

        for (lw, layer_caches) in self.weights.layers.iter().zip(state.caches.iter_mut()) {
            let h = rms_norm(&x);
            let mut concat = vec![0.0; cfg.model_dim];
            for (head, cache) in layer_caches.iter_mut().enumerate() {
                let q = vecmat(&h, &lw.wq[head]).expect("shapes fixed by config");
                let k = vecmat(&h, &lw.wk[head]).expect("shapes fixed by config");
                let v = vecmat(&h, &lw.wv[head]).expect("shapes fixed by config");
                cache.push(&k, &v, pos);
                let mut probs: Vec<f64> = (0..cache.len())
                    .map(|r| dot(&q, cache.key(r)) * scale)
                    .collect();
                softmax_in_place(&mut probs);
                let out = &mut concat[head * dk..(head + 1) * dk];
                for (r, &p) in probs.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(cache.value(r)) {
                        *o += p * vv;
                    }
                }
            }
            let attn = vecmat(&concat, &lw.wo).expect("shapes fixed by config");
            x.iter_mut().zip(attn).for_each(|(a, b)| *a += b);
            self.mlp_residual(lw, &mut x);
        }
        state.next_position += 1;
        Ok(self.logits(&x))
    }

    /// Greedy rollout: feeds `start_token`, then each argmax, `steps` times.
    pub fn greedy_generate(
        &self,
        state: &mut DecoderState,
        start_token: u32,
        steps: usize,
    ) -> Result<Vec<u32>, ModelError> {
        Ok(self.rollout(state, start_token, steps)?.tokens)
    }

    /// Like [`greedy_generate`](Self::greedy_generate) but keeps every
    /// step's logits and wall-clock duration.
    pub fn rollout(
        &self,
        state: &mut DecoderState,
        start_token: u32,
        steps: usize,
    ) -> Result<Rollout, ModelError> {
        let mut out = Rollout::default();
        let mut token = start_token;
        for _ in 0..steps {
            let t0 = std::time::Instant::now();
            let logits = self.decode_step(state, token)?;
            out.step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            token = argmax(&logits).expect("vocab is nonempty") as u32;
            out.tokens.push(token);
            out.logits.push(logits);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f64>>,
    pub step_ms: Vec<f64>,
}
