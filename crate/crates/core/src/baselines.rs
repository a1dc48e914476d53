//! Coarse-grained baselines for comparison.
//!
//! * [`FastV`]: at layer `K`, ranks vision tokens by head-averaged
//!   final-token attention and drops the lowest `floor(R * V)`. The same
//!   surviving set is applied to every head of layer `K` and every later layer.
//! * [`Vtw`]: from layer `K` on, drops every vision token.
//!
//! Both are simplified versions; they never touch text positions.

use serde::{Deserialize, Serialize};

use crate::cache::HeadKVCache;
use crate::model::{LayerView, PruningHook};
use crate::pruning::{prune_head_cache_in_place, LayerDecision, PruneError};
use crate::tensor::argtopk;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastVConfig {
    /// 1-based layer at which the drop set is chosen.
    pub k_layer: usize,
    pub prune_ratio: f64,
}

impl Default for FastVConfig {
    fn default() -> Self {
        Self {
            k_layer: 3,
            prune_ratio: 0.5,
        }
    }
}

impl FastVConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), PruneError> {
        if self.k_layer == 0 || self.k_layer > num_layers {
            return Err(PruneError::InvalidConfig(format!(
                "fastv K={} outside 1..={num_layers}",
                self.k_layer
            )));
        }
        if !(0.0..=1.0).contains(&self.prune_ratio) {
            return Err(PruneError::InvalidConfig(format!(
                "fastv ratio {} outside [0, 1]",
                self.prune_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VtwConfig {
    pub k_layer: usize,
}

impl VtwConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), PruneError> {
        if self.k_layer == 0 || self.k_layer > num_layers {
            return Err(PruneError::InvalidConfig(format!(
                "vtw K={} outside 1..={num_layers}",
                self.k_layer
            )));
        }
        Ok(())
    }
}

/// Number of vision tokens FastV drops out of `num_vision`.
pub fn fastv_drop_count(prune_ratio: f64, num_vision: usize) -> usize {
    ((prune_ratio * num_vision as f64 + 1e-9).floor() as usize).min(num_vision)
}

#[derive(Debug, Clone)]
pub struct FastV {
    pub config: FastVConfig,
    survivors: Option<Vec<usize>>,
}

impl FastV {
    pub fn new(config: FastVConfig) -> Self {
        Self {
            config,
            survivors: None,
        }
    }

    /// Vision positions kept from layer `K` onward, once layer `K` has run.
    pub fn survivors(&self) -> Option<&[usize]> {
        self.survivors.as_deref()
    }
}

impl PruningHook for FastV {
    fn after_layer(
        &mut self,
        view: &LayerView<'_>,
        caches: &mut [HeadKVCache],
    ) -> Result<Option<LayerDecision>, PruneError> {
        if view.layer < self.config.k_layer {
            return Ok(None);
        }
        if view.layer == self.config.k_layer {
            self.config.validate(view.num_layers)?;
            let vision = view.layout.vision_index_union();
            let heads = view.last_rows.len() as f64;
            let mut scores = Vec::with_capacity(vision.len());
            for &k in &vision {
                let mut mass = 0.0;
                for row in view.last_rows {
                    mass += *row.get(k).ok_or(PruneError::IndexOutOfRange {
                        index: k,
                        len: row.len(),
                    })?;
                }
                scores.push(mass / heads);
            }
            let keep = vision.len() - fastv_drop_count(self.config.prune_ratio, vision.len());
            let survivors = argtopk(&scores, keep)?
                .into_iter()
                .map(|i| vision[i])
                .collect();
            self.survivors = Some(survivors);
        }
        let Some(survivors) = self.survivors.as_deref() else {
            return Ok(None);
        };
        let text = view.layout.text_union();
        for cache in caches {
            prune_head_cache_in_place(cache, &text, survivors)?;
        }
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct Vtw {
    pub config: VtwConfig,
}

impl Vtw {
    pub fn new(config: VtwConfig) -> Self {
        Self { config }
    }
}

impl PruningHook for Vtw {
    fn after_layer(
        &mut self,
        view: &LayerView<'_>,
        caches: &mut [HeadKVCache],
    ) -> Result<Option<LayerDecision>, PruneError> {
        self.config.validate(view.num_layers)?;
        if view.layer >= self.config.k_layer {
            let text = view.layout.text_union();
            for cache in caches {
                prune_head_cache_in_place(cache, &text, &[])?;
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Layout, SegmentSpec};

    fn run_layer(
        hook: &mut dyn PruningHook,
        layer: usize,
        layout: &Layout,
        rows: &[Vec<f64>],
    ) -> Vec<HeadKVCache> {
        let s = layout.len();
        let mut caches: Vec<_> = rows
            .iter()
            .map(|_| HeadKVCache::from_prefill(1, vec![0.0; s], vec![0.0; s]))
            .collect();
        let view = LayerView {
            layer,
            num_layers: 6,
            last_rows: rows,
            layout,
        };
        hook.after_layer(&view, &mut caches).unwrap();
        caches
    }

    fn fixture() -> (Layout, Vec<Vec<f64>>) {
        let layout = Layout::new(&[
            SegmentSpec::text(1),
            SegmentSpec::image(4),
            SegmentSpec::text(1),
        ])
        .unwrap();
        let rows = vec![
            vec![0.1, 0.4, 0.1, 0.2, 0.1, 0.1],
            vec![0.1, 0.0, 0.3, 0.1, 0.4, 0.1],
        ];
        (layout, rows)
    }

    #[test]
    fn fastv_ratio_half() {
        let (layout, rows) = fixture();
        let mut f = FastV::new(FastVConfig {
            k_layer: 2,
            prune_ratio: 0.5,
        });
        let c1 = run_layer(&mut f, 1, &layout, &rows);
        assert_eq!(c1[0].len(), 6);
        // head-averaged: pos1 .2, pos2 .2, pos3 .15, pos4 .25 -> keep 4 and 1 (tie with 2 → lower index).
        let c2 = run_layer(&mut f, 2, &layout, &rows);
        assert_eq!(f.survivors(), Some(&[1, 4][..]));
        assert_eq!(c2[0].positions(), &[0, 1, 4, 5]);
        assert_eq!(c2[1].positions(), &[0, 1, 4, 5]);
        let c5 = run_layer(&mut f, 5, &layout, &rows);
        assert_eq!(c5[1].positions(), &[0, 1, 4, 5]);
    }

    #[test]
    fn fastv_extremes() {
        let (layout, rows) = fixture();
        let mut none = FastV::new(FastVConfig {
            k_layer: 1,
            prune_ratio: 0.0,
        });
        assert_eq!(run_layer(&mut none, 1, &layout, &rows)[0].len(), 6);
        let mut all = FastV::new(FastVConfig {
            k_layer: 1,
            prune_ratio: 1.0,
        });
        assert_eq!(
            run_layer(&mut all, 1, &layout, &rows)[1].positions(),
            &[0, 5]
        );
        assert_eq!(fastv_drop_count(0.5, 92), 46);
    }

    #[test]
    fn vtw_layers() {
        let (layout, rows) = fixture();
        let mut v = Vtw::new(VtwConfig { k_layer: 3 });
        assert_eq!(run_layer(&mut v, 2, &layout, &rows)[0].len(), 6);
        assert_eq!(run_layer(&mut v, 3, &layout, &rows)[0].positions(), &[0, 5]);
        assert!(VtwConfig { k_layer: 7 }.validate(6).is_err());
        assert!(FastVConfig {
            k_layer: 0,
            prune_ratio: 0.1
        }
        .validate(6)
        .is_err());
        assert!(FastVConfig {
            k_layer: 2,
            prune_ratio: 1.1
        }
        .validate(6)
        .is_err());
    }
}
