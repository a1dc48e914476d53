//! Per-layer per-head vision-token pruning.
//!
//! Two levels, run once per layer right after that layer is prefilled:
//!
//! 1. **Layer level.** The vision attention score `γ` is the head-averaged
//!    attention mass that the final prompt token puts on all image
//!    positions. It classifies the layer and picks a retention rate:
//!
//!    | class               | condition       | retention  |
//!    |---------------------|-----------------|------------|
//!    | vision-attentive    | `γ >= alpha`    | `r + Δr`   |
//!    | vision-balanced     | otherwise       | `r`        |
//!    | vision-indifferent  | `γ < beta`      | `r - Δr`   |
//!
//! 2. **Head level.** Every head independently keeps, for each image `j`,
//!    the `K_j = max(1, floor(r_l * |image j|))` positions it attends to
//!    most (from the final token's attention row). Text positions are
//!    always kept. `K_j` is 0 only when the retention rate itself is 0.
//!
//! Layers outside `[first, last]` (default `[3, N-1]`, 1-based) are exempt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::HeadKVCache;
use crate::layout::Layout;
use crate::model::{LayerView, PruningHook};
use crate::tensor::{argtopk, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("invalid pruning config: {0}")]
    InvalidConfig(String),
    #[error("attention index {index} out of range for row of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("image has no tokens")]
    EmptyImage,
    #[error("position {0} is not present in the cache")]
    MissingPosition(usize),
    #[error("expected {expected} head rows, got {got}")]
    HeadCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Retention rates are snapped to this grid so that decimal
/// hyperparameters give decimal rates (`0.4 - 0.3` is `0.1`, not
/// `0.10000000000000003`).
const RATE_GRID: f64 = 1e12;

/// Slack when turning `rate * len` into a whole token count.
const BUDGET_EPS: f64 = 1e-9;

/// Slack on the `Δr <= r <= 1 - Δr` and `beta <= alpha` bounds.
const BOUND_EPS: f64 = 1e-12;

fn snap(rate: f64) -> f64 {
    ((rate * RATE_GRID).round() / RATE_GRID).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    pub r: f64,
    pub delta_r: f64,
    pub alpha: f64,
    pub beta: f64,
    /// 1-based inclusive layer range; `None` means `[3, N-1]`.
    pub layer_range: Option<(usize, usize)>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            r: 0.4,
            delta_r: 0.3,
            alpha: 0.25,
            beta: 0.1,
            layer_range: None,
        }
    }
}

impl PruningConfig {
    pub fn new(r: f64, delta_r: f64, alpha: f64, beta: f64) -> Self {
        Self {
            r,
            delta_r,
            alpha,
            beta,
            layer_range: None,
        }
    }

    /// Checks the hyperparameter bounds (independent of model depth).
    pub fn validate(&self) -> Result<(), PruneError> {
        let bad = |m: String| Err(PruneError::InvalidConfig(m));
        let vals = [self.r, self.delta_r, self.alpha, self.beta];
        if vals.iter().any(|v| !v.is_finite()) {
            return bad("hyperparameters must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.beta)
            || !(0.0..=1.0).contains(&self.alpha)
            || self.beta > self.alpha + BOUND_EPS
        {
            return bad(format!(
                "need 0 <= beta <= alpha <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if self.delta_r < 0.0
            || self.delta_r > self.r + BOUND_EPS
            || self.r > 1.0 - self.delta_r + BOUND_EPS
        {
            return bad(format!(
                "need 0 <= dr <= r <= 1 - dr, got r={} dr={}",
                self.r, self.delta_r
            ));
        }
        if let Some((first, last)) = self.layer_range {
            if first == 0 || first > last {
                return bad(format!("bad layer range {first}..={last}"));
            }
        }
        Ok(())
    }

    /// Also checks that the pruned range fits a model with `num_layers` layers.
    pub fn validate_for(&self, num_layers: usize) -> Result<(), PruneError> {
        self.validate()?;
        let (first, last) = self.pruned_range(num_layers);
        if first == 0 || first > last || last > num_layers {
            return Err(PruneError::InvalidConfig(format!(
                "pruned layers {first}..={last} do not fit a {num_layers}-layer model"
            )));
        }
        Ok(())
    }

    pub fn pruned_range(&self, num_layers: usize) -> (usize, usize) {
        self.layer_range
            .unwrap_or((3, num_layers.saturating_sub(1)))
    }

    pub fn prunes_layer(&self, layer: usize, num_layers: usize) -> bool {
        let (first, last) = self.pruned_range(num_layers);
        (first..=last).contains(&layer)
    }
}

/// Ordered from least to most vision-hungry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerClass {
    VisionIndifferent,
    VisionBalanced,
    VisionAttentive,
}

impl LayerClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerClass::VisionIndifferent => "indifferent",
            LayerClass::VisionBalanced => "balanced",
            LayerClass::VisionAttentive => "attentive",
        }
    }
}

/// Head-averaged attention mass on the vision positions.
///
/// `rows[h]` is head `h`'s attention row for the final prompt token.
pub fn vision_attention_score<R: AsRef<[f64]>>(
    rows: &[R],
    vision_union: &[usize],
) -> Result<f64, PruneError> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let heads = rows.len() as f64;
    let mut gamma = 0.0;
    for &k in vision_union {
        let mut mass = 0.0;
        for row in rows {
            let row = row.as_ref();
            mass += *row.get(k).ok_or(PruneError::IndexOutOfRange {
                index: k,
                len: row.len(),
            })?;
        }
        gamma += mass / heads;
    }
    Ok(gamma.clamp(0.0, 1.0))
}

pub fn classify_layer(gamma: f64, cfg: &PruningConfig) -> LayerClass {
    if gamma >= cfg.alpha {
        LayerClass::VisionAttentive
    } else if gamma < cfg.beta {
        LayerClass::VisionIndifferent
    } else {
        LayerClass::VisionBalanced
    }
}

pub fn allocate_retention(class: LayerClass, cfg: &PruningConfig) -> f64 {
    snap(match class {
        LayerClass::VisionAttentive => cfg.r + cfg.delta_r,
        LayerClass::VisionBalanced => cfg.r,
        LayerClass::VisionIndifferent => cfg.r - cfg.delta_r,
    })
}

/// Tokens kept out of an image of `image_len` tokens at `retention`.
pub fn retained_budget(retention: f64, image_len: usize) -> usize {
    if retention <= 0.0 {
        return 0;
    }
    let k = (retention * image_len as f64 + BUDGET_EPS).floor() as usize;
    k.clamp(1, image_len)
}

/// One image's selection within one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSelection {
    /// `K_j`.
    pub budget: usize,
    /// Absolute sequence positions, ascending.
    pub retained: Vec<usize>,
}

/// Top-`K_j` positions of one image under one head's attention row.
pub fn select_retained(
    head_row: &[f64],
    image_indices: &[usize],
    retention: f64,
) -> Result<ImageSelection, PruneError> {
    if image_indices.is_empty() {
        return Err(PruneError::EmptyImage);
    }
    let restricted = image_indices
        .iter()
        .map(|&i| {
            head_row.get(i).copied().ok_or(PruneError::IndexOutOfRange {
                index: i,
                len: head_row.len(),
            })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let budget = retained_budget(retention, image_indices.len());
    let retained = argtopk(&restricted, budget)?
        .into_iter()
        .map(|local| image_indices[local])
        .collect();
    Ok(ImageSelection { budget, retained })
}

/// Returns a copy of `cache` holding only rows at `text_union ∪ retained_vision`.
///
/// Both index sets must be ascending. Every requested position must be
/// present in the cache.
pub fn prune_head_cache(
    cache: &HeadKVCache,
    text_union: &[usize],
    retained_vision: &[usize],
) -> Result<HeadKVCache, PruneError> {
    let mut out = cache.clone();
    prune_head_cache_in_place(&mut out, text_union, retained_vision)?;
    Ok(out)
}

pub(crate) fn prune_head_cache_in_place(
    cache: &mut HeadKVCache,
    text_union: &[usize],
    retained_vision: &[usize],
) -> Result<(), PruneError> {
    let positions = cache.positions();
    let mut keep = vec![false; positions.len()];
    for &p in text_union.iter().chain(retained_vision) {
        let row = positions
            .binary_search(&p)
            .map_err(|_| PruneError::MissingPosition(p))?;
        keep[row] = true;
    }
    cache.retain_rows(&keep);
    Ok(())
}

/// Per-head result: one selection per image, in image order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub images: Vec<ImageSelection>,
}

impl HeadSelection {
    pub fn retained_vision(&self) -> Vec<usize> {
        self.images
            .iter()
            .flat_map(|i| i.retained.iter().copied())
            .collect()
    }

    pub fn kept_vision(&self) -> usize {
        self.images.iter().map(|i| i.budget).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LayerOutcome {
    Exempt,
    Pruned {
        class: LayerClass,
        retention: f64,
        heads: Vec<HeadSelection>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    /// 1-based.
    pub layer: usize,
    pub gamma: f64,
    pub outcome: LayerOutcome,
}

impl LayerDecision {
    pub fn class(&self) -> Option<LayerClass> {
        match &self.outcome {
            LayerOutcome::Pruned { class, .. } => Some(*class),
            LayerOutcome::Exempt => None,
        }
    }

    pub fn retention(&self) -> Option<f64> {
        match &self.outcome {
            LayerOutcome::Pruned { retention, .. } => Some(*retention),
            LayerOutcome::Exempt => None,
        }
    }

    pub fn heads(&self) -> &[HeadSelection] {
        match &self.outcome {
            LayerOutcome::Pruned { heads, .. } => heads,
            LayerOutcome::Exempt => &[],
        }
    }
}

/// Computes the decision for one layer from its final-token attention rows.
/// Pure: no caches are touched.
pub fn decide_layer<R: AsRef<[f64]>>(
    layer: usize,
    num_layers: usize,
    rows: &[R],
    layout: &Layout,
    cfg: &PruningConfig,
) -> Result<LayerDecision, PruneError> {
    let gamma = vision_attention_score(rows, &layout.vision_index_union())?;
    if !cfg.prunes_layer(layer, num_layers) {
        return Ok(LayerDecision {
            layer,
            gamma,
            outcome: LayerOutcome::Exempt,
        });
    }
    let class = classify_layer(gamma, cfg);
    let retention = allocate_retention(class, cfg);
    let heads = rows
        .iter()
        .map(|row| {
            let images = layout
                .image_indices()
                .iter()
                .map(|img| select_retained(row.as_ref(), img, retention))
                .collect::<Result<_, _>>()?;
            Ok(HeadSelection { images })
        })
        .collect::<Result<_, PruneError>>()?;
    Ok(LayerDecision {
        layer,
        gamma,
        outcome: LayerOutcome::Pruned {
            class,
            retention,
            heads,
        },
    })
}

/// Applies a decision to the layer's head caches.
pub fn apply_decision(
    decision: &LayerDecision,
    layout: &Layout,
    caches: &mut [HeadKVCache],
) -> Result<(), PruneError> {
    let LayerOutcome::Pruned { heads, .. } = &decision.outcome else {
        return Ok(());
    };
    if heads.len() != caches.len() {
        return Err(PruneError::HeadCount {
            expected: caches.len(),
            got: heads.len(),
        });
    }
    let text = layout.text_union();
    for (cache, sel) in caches.iter_mut().zip(heads) {
        prune_head_cache_in_place(cache, &text, &sel.retained_vision())?;
    }
    Ok(())
}

/// The prefill hook: decide, then prune every head of the layer.
#[derive(Debug, Clone)]
pub struct Plphp {
    pub config: PruningConfig,
}

impl Plphp {
    pub fn new(config: PruningConfig) -> Result<Self, PruneError> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl PruningHook for Plphp {
    fn after_layer(
        &mut self,
        view: &LayerView<'_>,
        caches: &mut [HeadKVCache],
    ) -> Result<Option<LayerDecision>, PruneError> {
        if view.last_rows.len() != caches.len() {
            return Err(PruneError::HeadCount {
                expected: caches.len(),
                got: view.last_rows.len(),
            });
        }
        let decision = decide_layer(
            view.layer,
            view.num_layers,
            view.last_rows,
            view.layout,
            &self.config,
        )?;
        apply_decision(&decision, view.layout, caches)?;
        Ok(Some(decision))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::SegmentSpec;
    use proptest::prelude::*;

    fn default_cfg() -> PruningConfig {
        PruningConfig::new(0.4, 0.3, 0.25, 0.1)
    }

    #[test]
    fn worked_example() {
        let cfg = default_cfg();
        assert_eq!(classify_layer(0.30, &cfg), LayerClass::VisionAttentive);
        assert_eq!(classify_layer(0.05, &cfg), LayerClass::VisionIndifferent);
        assert_eq!(classify_layer(0.15, &cfg), LayerClass::VisionBalanced);
        assert_eq!(allocate_retention(LayerClass::VisionAttentive, &cfg), 0.7);
        assert_eq!(allocate_retention(LayerClass::VisionIndifferent, &cfg), 0.1);
        assert_eq!(allocate_retention(LayerClass::VisionBalanced, &cfg), 0.4);
    }

    #[test]
    fn boundaries_are_literal() {
        let cfg = default_cfg();
        assert_eq!(classify_layer(0.25, &cfg), LayerClass::VisionAttentive);
        assert_eq!(classify_layer(0.1, &cfg), LayerClass::VisionBalanced);
        let zero = PruningConfig::new(0.4, 0.3, 0.0, 0.0);
        assert_eq!(classify_layer(0.0, &zero), LayerClass::VisionAttentive);
    }

    #[test]
    fn config_bounds() {
        assert!(default_cfg().validate().is_ok());
        assert!(PruningConfig::new(1.0, 0.0, 0.25, 0.1).validate().is_ok());
        assert!(PruningConfig::new(0.2, 0.3, 0.25, 0.1).validate().is_err());
        assert!(PruningConfig::new(0.8, 0.3, 0.25, 0.1).validate().is_err());
        assert!(PruningConfig::new(0.4, 0.3, 0.1, 0.25).validate().is_err());
        assert!(PruningConfig::new(0.4, 0.3, 1.5, 0.1).validate().is_err());
        assert!(PruningConfig::new(f64::NAN, 0.3, 0.25, 0.1)
            .validate()
            .is_err());
        assert!(default_cfg().validate_for(4).is_ok());
        let mut c = default_cfg();
        c.layer_range = Some((2, 9));
        assert!(c.validate_for(8).is_err());
        assert_eq!(default_cfg().pruned_range(12), (3, 11));
    }

    #[test]
    fn score_uniform_and_empty() {
        let rows = vec![vec![0.1; 10]; 3];
        let g = vision_attention_score(&rows, &[2, 3, 4, 5]).unwrap();
        assert!((g - 0.4).abs() < 1e-15);
        assert_eq!(vision_attention_score(&rows, &[]).unwrap(), 0.0);
        assert!(matches!(
            vision_attention_score(&rows, &[10]),
            Err(PruneError::IndexOutOfRange { index: 10, len: 10 })
        ));
    }

    #[test]
    fn budget_rule() {
        assert_eq!(retained_budget(0.4, 10), 4);
        assert_eq!(retained_budget(1.0, 10), 10);
        assert_eq!(retained_budget(0.1, 5), 1);
        assert_eq!(retained_budget(0.4, 92), 36);
        assert_eq!(retained_budget(0.7, 10), 7);
        assert_eq!(retained_budget(0.0, 10), 0);
    }

    #[test]
    fn select_examples() {
        // Image occupies positions 3..13.
        let mut row = vec![0.0; 14];
        let scores = [0.05, 0.2, 0.01, 0.15, 0.03, 0.08, 0.12, 0.02, 0.09, 0.04];
        for (i, s) in scores.iter().enumerate() {
            row[3 + i] = *s;
        }
        let img: Vec<usize> = (3..13).collect();
        let sel = select_retained(&row, &img, 0.4).unwrap();
        assert_eq!(sel.budget, 4);
        assert_eq!(sel.retained, vec![4, 6, 9, 11]);
        assert_eq!(select_retained(&row, &img, 1.0).unwrap().retained, img);
        assert_eq!(
            select_retained(&row, &img[..5], 0.1).unwrap().retained,
            vec![4]
        );
        assert_eq!(select_retained(&row, &[], 0.5), Err(PruneError::EmptyImage));
    }

    #[test]
    fn prune_examples() {
        let cache = HeadKVCache::from_prefill(1, (0..6).map(f64::from).collect(), vec![0.0; 6]);
        let pruned = prune_head_cache(&cache, &[0, 1, 5], &[3]).unwrap();
        assert_eq!(pruned.positions(), &[0, 1, 3, 5]);
        assert_eq!(pruned.key(2), &[3.0]);
        let same = prune_head_cache(&cache, &[0, 1, 5], &[2, 3, 4]).unwrap();
        assert_eq!(same, cache);
        assert_eq!(
            prune_head_cache(&pruned, &[0], &[2]),
            Err(PruneError::MissingPosition(2))
        );
    }

    #[test]
    fn exempt_layers_and_identity() {
        let layout = Layout::new(&[SegmentSpec::image(6), SegmentSpec::text(2)]).unwrap();
        let rows = vec![vec![0.125; 8]; 2];
        for layer in [1, 2, 8] {
            let d = decide_layer(layer, 8, &rows, &layout, &default_cfg()).unwrap();
            assert_eq!(d.outcome, LayerOutcome::Exempt);
            assert!((d.gamma - 0.75).abs() < 1e-15);
        }
        let full = PruningConfig::new(1.0, 0.0, 0.25, 0.1);
        let d = decide_layer(3, 8, &rows, &layout, &full).unwrap();
        assert_eq!(d.heads()[0].retained_vision(), (0..6).collect::<Vec<_>>());
        let vacuous = PruningConfig::new(0.4, 0.3, 0.0, 0.0);
        let d = decide_layer(5, 8, &rows, &layout, &vacuous).unwrap();
        assert_eq!(d.class(), Some(LayerClass::VisionAttentive));
        assert_eq!(d.retention(), Some(0.7));
    }

    #[test]
    fn hook_rejects_head_mismatch() {
        let layout = Layout::new(&[SegmentSpec::image(2), SegmentSpec::text(1)]).unwrap();
        let d = LayerDecision {
            layer: 3,
            gamma: 0.5,
            outcome: LayerOutcome::Pruned {
                class: LayerClass::VisionBalanced,
                retention: 0.5,
                heads: vec![],
            },
        };
        let mut caches = vec![HeadKVCache::from_prefill(1, vec![0.0; 3], vec![0.0; 3])];
        assert!(matches!(
            apply_decision(&d, &layout, &mut caches),
            Err(PruneError::HeadCount { .. })
        ));
    }

    proptest! {
        #[test]
        fn classification_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0,
                                   alpha in 0.0f64..=1.0, frac in 0.0f64..=1.0) {
            let cfg = PruningConfig::new(0.4, 0.3, alpha, alpha * frac);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_layer(lo, &cfg) <= classify_layer(hi, &cfg));
        }

        #[test]
        fn retention_takes_three_values(r in 0.0f64..=0.5, frac in 0.0f64..=1.0, gamma in 0.0f64..=1.0) {
            let cfg = PruningConfig::new(r, r * frac, 0.25, 0.1);
            prop_assume!(cfg.validate().is_ok());
            let rl = allocate_retention(classify_layer(gamma, &cfg), &cfg);
            prop_assert!((0.0..=1.0).contains(&rl));
            let options = [cfg.r - cfg.delta_r, cfg.r, cfg.r + cfg.delta_r];
            prop_assert!(options.iter().any(|o| (o - rl).abs() < 1e-11));
        }

        #[test]
        fn selection_within_image(row in prop::collection::vec(0.0f64..1.0, 12..40),
                                  start in 0usize..6, len in 1usize..6, rate in 0.0f64..=1.0) {
            let img: Vec<usize> = (start..start + len).collect();
            let sel = select_retained(&row, &img, rate).unwrap();
            prop_assert_eq!(sel.retained.len(), sel.budget);
            prop_assert!(sel.budget <= len);
            prop_assert!(sel.retained.iter().all(|i| img.contains(i)));
            prop_assert!(sel.retained.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
