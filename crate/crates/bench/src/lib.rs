//! Workload builders shared by the benchmarks.

use plphp_core::{
    DecoderState, ModelConfig, MultimodalSequence, Plphp, PruningConfig, SegmentSpec, ToyLvlm,
};

pub fn model(num_layers: usize, max_positions: usize) -> ToyLvlm {
    ToyLvlm::new(
        ModelConfig {
            num_layers,
            num_heads: 4,
            model_dim: 64,
            head_dim: 16,
            vocab_size: 256,
            max_positions,
        },
        0,
    )
    .expect("valid config")
}

/// One image of `vision` tokens between short text segments.
pub fn sequence(vision: usize) -> MultimodalSequence {
    MultimodalSequence::build(
        &[
            SegmentSpec::text(16),
            SegmentSpec::image(vision),
            SegmentSpec::text(16),
        ],
        1,
        256,
    )
    .expect("valid layout")
}

/// Prefilled state, pruned with PLPHP at `r` (with `dr = 0`) or unpruned for `None`.
pub fn prefilled(model: &ToyLvlm, seq: &MultimodalSequence, r: Option<f64>) -> DecoderState {
    let mut hook = r.map(|r| Plphp::new(PruningConfig::new(r, 0.0, 0.25, 0.1)).expect("valid"));
    let hook = hook.as_mut().map(|h| h as &mut dyn plphp_core::PruningHook);
    model.prefill(seq, hook).expect("prefill").0
}
