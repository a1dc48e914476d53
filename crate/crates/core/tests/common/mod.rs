//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the engine's kernels or pruning code; only the
//! public weight/config structs are read.

#![allow(dead_code)]

use plphp_core::{ModelConfig, ModelWeights, SegmentKind, SegmentSpec};

pub const RMS_EPS: f64 = 1e-6;

/// Text and per-image index sets, by walking the segment list.
pub fn index_sets(specs: &[SegmentSpec]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut text = Vec::new();
    let mut images = Vec::new();
    let mut pos = 0;
    for s in specs {
        let run: Vec<usize> = (pos..pos + s.length).collect();
        match s.kind {
            SegmentKind::Text => text.extend(run),
            SegmentKind::Image => images.push(run),
        }
        pos += s.length;
    }
    (text, images)
}

/// First `k` indices of a stable descending sort, then ascending.
pub fn topk_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut out = idx[..k].to_vec();
    out.sort();
    out
}

pub fn gamma_oracle(rows: &[Vec<f64>], vision: &[usize]) -> f64 {
    let h = rows.len() as f64;
    let mut total = 0.0;
    for row in rows {
        for &k in vision {
            total += row[k];
        }
    }
    total / h
}

pub fn budget_oracle(rate: f64, len: usize) -> usize {
    if rate <= 0.0 {
        0
    } else {
        ((rate * len as f64 + 1e-9).floor() as usize)
            .max(1)
            .min(len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLayer {
    pub gamma: f64,
    /// `None` for exempt layers.
    pub retention: Option<f64>,
    /// Per head, the union of retained vision positions.
    pub retained: Vec<Vec<usize>>,
}

/// Layer classification, retention allocation, and per-head per-image
/// top-K selection, straight from the definitions.
pub fn plphp_oracle(
    rows: &[Vec<Vec<f64>>],
    specs: &[SegmentSpec],
    r: f64,
    dr: f64,
    alpha: f64,
    beta: f64,
) -> Vec<OracleLayer> {
    let n = rows.len();
    let (_, images) = index_sets(specs);
    let vision: Vec<usize> = images.iter().flatten().copied().collect();
    rows.iter()
        .enumerate()
        .map(|(li, heads)| {
            let layer = li + 1;
            let gamma = gamma_oracle(heads, &vision);
            if layer < 3 || layer > n - 1 {
                return OracleLayer {
                    gamma,
                    retention: None,
                    retained: vec![],
                };
            }
            let rate = if gamma >= alpha {
                r + dr
            } else if gamma < beta {
                r - dr
            } else {
                r
            };
            let retained = heads
                .iter()
                .map(|row| {
                    let mut keep = Vec::new();
                    for img in &images {
                        let vals: Vec<f64> = img.iter().map(|&i| row[i]).collect();
                        let k = budget_oracle(rate, img.len());
                        keep.extend(topk_oracle(&vals, k).into_iter().map(|j| img[j]));
                    }
                    keep
                })
                .collect();
            OracleLayer {
                gamma,
                retention: Some(rate),
                retained,
            }
        })
        .collect()
}

fn rms(x: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f64 + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn vm(x: &[f64], w: &plphp_core::Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.get(i, j);
            }
            acc
        })
        .collect()
}

/// Cache-free forward pass over `tokens` (prompt followed by decode
/// inputs). Query position `i` in layer `l`, head `h` may attend to key
/// position `k <= i` if `i < prompt_len` (full causal prefill), or if `k`
/// is in `kept[l][h]` or `k >= prompt_len` (decode). Returns logits at
/// every position `>= prompt_len`.
pub fn reference_decode_logits(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
    prompt_len: usize,
    kept: &[Vec<Vec<usize>>],
) -> Vec<Vec<f64>> {
    let t = tokens.len();
    let dk = cfg.head_dim;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            (0..cfg.model_dim)
                .map(|c| w.token_embedding.get(id as usize, c) + w.position_embedding.get(p, c))
                .collect()
        })
        .collect();
    for (l, lw) in w.layers.iter().enumerate() {
        let hs: Vec<Vec<f64>> = x.iter().map(|r| rms(r)).collect();
        let mut concat = vec![vec![0.0; cfg.model_dim]; t];
        for h in 0..cfg.num_heads {
            let q: Vec<Vec<f64>> = hs.iter().map(|r| vm(r, &lw.wq[h])).collect();
            let k: Vec<Vec<f64>> = hs.iter().map(|r| vm(r, &lw.wk[h])).collect();
            let v: Vec<Vec<f64>> = hs.iter().map(|r| vm(r, &lw.wv[h])).collect();
            for i in 0..t {
                let visible: Vec<usize> = (0..=i)
                    .filter(|&kk| i < prompt_len || kk >= prompt_len || kept[l][h].contains(&kk))
                    .collect();
                let logits: Vec<f64> = visible
                    .iter()
                    .map(|&kk| {
                        let mut s = 0.0;
                        for d in 0..dk {
                            s += q[i][d] * k[kk][d];
                        }
                        s / (dk as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, &kk) in visible.iter().enumerate() {
                    for d in 0..dk {
                        concat[i][h * dk + d] += e[j] / z * v[kk][d];
                    }
                }
            }
        }
        for i in 0..t {
            let a = vm(&concat[i], &lw.wo);
            for (xi, ai) in x[i].iter_mut().zip(a) {
                *xi += ai;
            }
            let hidden: Vec<f64> = vm(&rms(&x[i]), &lw.w1)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let out = vm(&hidden, &lw.w2);
            for (xi, oi) in x[i].iter_mut().zip(out) {
                *xi += oi;
            }
        }
    }
    (prompt_len..t)
        .map(|i| vm(&rms(&x[i]), &w.unembedding))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
