//! Losses, optimisation, and the centralised training loop.

mod backward;
mod loss;
mod optim;
mod train;

pub use backward::{backward_mop, MopGradients, TrainableState};
pub use loss::{loss, loss_and_grad, next_token_targets, LossReport};
pub use optim::{AdamConfig, AdamMoments};
pub use train::{
    average_by_task, evaluate, mop_options, train_centralized, train_step, EvalReport, GateInput, MetricRow,
    RunMetrics, TrainMode, TrainSettings,
};
