//! SGD training with step decay, clipping, subsampling and grid selection.

mod config;
mod grid;
mod optim;
mod sampling;
mod trainer;

pub use config::{lr_at, scaled_epochs, TrainConfig};
pub use grid::{grid_cells, grid_select, pick_best, write_grid_csv, GridCell, GridRow, GridSelection};
pub use optim::{clip_grad_norm, sgd_step, OptimizerState};
pub use sampling::subsample_per_class;
pub use trainer::{train_student, EpochRecord, RunResult, TeacherTargets, TransferData};
