//! Optimizer, learning-rate schedule, loss, datasets and the training loop.

mod data;
mod loss;
mod optim;
mod trainer;

pub use data::{
    load_cifar10, parse_cifar10, synthetic, Dataset, Split, SyntheticSpec, CIFAR10_CLASSES, CIFAR10_MEAN,
    CIFAR10_RECORD_BYTES, CIFAR10_STD,
};
pub use loss::{count_errors, softmax_cross_entropy};
pub use optim::{sgd_update, Sgd, SgdConfig, StepSchedule};
pub use trainer::{evaluate, train, train_step, EpochRecord, Phase, StepOutcome, TrainConfig};
