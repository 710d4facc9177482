//! Energy-optimal split inference between an edge client and a server.
//!
//! A small CNN is trained with an L1-regularized objective and pruned; a
//! per-layer energy model prices the client-side prefix of the network; a
//! block-Rayleigh-fading link prices the upload of the cut-layer output; the
//! splitter picks the cut that minimizes the client's total energy for the
//! channel it is about to see.

pub mod channel;
pub mod dataset;
pub mod energy;
pub mod nn;
pub mod scenario;
pub mod splitter;
pub mod trainer;

pub use channel::{rate, tx_time, ChannelError, ChannelTrace, LinkConfig, PathLoss, TxOutcome};
pub use dataset::{Dataset, DatasetError, ImageSet, LabelSet};
pub use energy::{cost_profile, CostProfile, EnergyConstants, LayerCost, MemoryTier, Precision};
pub use nn::io::{load_model, save_model};
pub use nn::{build_reference_model, LayerSpec, ModelError, ModelGraph, Representation, Shape};
pub use scenario::{co2, run_simulation, SimConfig, SimReport, Trajectory, Waypoint};
pub use splitter::{evaluate_policy, select_cut, total_energy, CutDecision, CutOptions, Policy};
pub use trainer::{
    accuracy, compression_ratio, eliminate_neurons, prune, train, CompressionReport, EpochStats, Optimizer,
    PruneConfig, TrainConfig, TrainError,
};
