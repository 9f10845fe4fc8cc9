//! Optimization, synthetic tasks, the training loop and ablation grids.

mod ablation;
mod optim;
mod synthetic;
mod trainer;

pub use ablation::{
    apply_delta, mean_std, preset_grid, run_ablation, AblationCell, AblationReport, AblationRow,
    CellSummary, DEFAULT_SEEDS,
};
pub use optim::{adamw_step, clip_grad_norm, cosine_warmup_lr, AdamState, ADAM_EPS, BETA1, BETA2};
pub use synthetic::{
    generate_synthetic, ring_regression_target, triangle_count, SyntheticKind, SyntheticTaskSpec,
    DESK_LAYERS, DESK_WIDTH, TARGET_RING_SIZE,
};
pub use trainer::{
    metric_improves, prepare_dataset, train, EpochRecord, History, TrainConfig, TrainOutcome,
};
