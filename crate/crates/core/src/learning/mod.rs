//! Update rules, the optimizer, rank scheduling and the training loop.

pub mod adam;
pub mod grads;
pub mod rank;
pub mod trainer;

pub use adam::{adam_direction, adam_update, apply_step, AdamConfig, LayerMoments, Moments, WeightMoments};
pub use grads::{
    backward_with, below_floor, bp_backward, chain_to_factors, pseudo_grad_w, ssa_factor_grads,
    ssa_factor_grads_unprojected, variant_feedback, FactorGrads, LayerGrad, SignFeedback,
};
pub use rank::{
    descending_order, next_rank, rank_cap, scheduled_rank, select_components, spectral_energy_rank, truncate_rank,
    Components, RankSchedule,
};
pub use trainer::{
    build_feedback_bundles, downstream_product, evaluate_accuracy, factor_update, init_seed, local_grad,
    method_weight_grads, stiefel_step, update_direction, zero_moments, FactorMoments, MethodKind, StepCosine,
    TrainConfig, Trainer,
};
