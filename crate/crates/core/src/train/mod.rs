//! Losses, optimizer, training loop, pilot-based LS baseline and evaluation.

pub mod adamw;
pub mod eval;
pub mod flops;
pub mod loss;
pub mod pilots;
pub mod trainer;

pub use adamw::{AdamW, AdamWConfig};
pub use eval::{evaluate, EvalReport, EvalRow, Method};
pub use flops::{dense_flops_per_sample, flops_per_sample, FlopCount, LayerCost};
pub use loss::{
    aux_loss, aux_loss_value, aux_value, nmse, nmse_db, nmse_db_reported, nmse_node, sample_nmse,
    total_loss, total_loss_value, NMSE_DB_FLOOR,
};
pub use pilots::{
    interpolate_pilots, ls_estimate, ls_interpolate, observe_pilots, pilot_overhead, Density,
    PilotConfig,
};
pub use trainer::{fit_norm_stats, observe_sub6, train, EpochRecord, History, TrainConfig};
