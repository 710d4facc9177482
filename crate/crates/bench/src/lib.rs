//! Shared fixtures for the criterion benches.

use splitinf_core::{
    build_reference_model, cost_profile, eliminate_neurons, prune, CostProfile, EnergyConstants, ModelGraph,
    PruneConfig,
};

/// Reference model pruned at `threshold`, with dead neurons removed.
pub fn pruned_reference(threshold: f64) -> ModelGraph {
    let mut m = build_reference_model(1);
    prune(&mut m, &PruneConfig { threshold }).expect("threshold leaves survivors");
    eliminate_neurons(&mut m);
    m
}

/// Compressed and dense profiles of the reference architecture.
pub fn profiles() -> (CostProfile, CostProfile) {
    let k = EnergyConstants::default();
    (
        cost_profile(&pruned_reference(0.03), &k),
        cost_profile(&build_reference_model(1), &k),
    )
}

/// A deterministic 28x28 input in `[0, 1]`.
pub fn digit_like_input() -> Vec<f32> {
    (0..784)
        .map(|i| {
            let (r, c) = (i / 28, i % 28);
            let dr = r as f32 - 14.0;
            let dc = c as f32 - 14.0;
            (1.0 - ((dr * dr + dc * dc).sqrt() - 8.0).abs() / 3.0).max(0.0)
        })
        .collect()
}
