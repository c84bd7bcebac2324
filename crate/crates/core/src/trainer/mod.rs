//! Training orchestration: configuration, session-parallel batching, the
//! optimization loop, and the gradient-check harness.

pub mod batch;
pub mod config;
pub mod gradcheck;
pub mod train;

pub use batch::{make_batches, BatchStep, FragmentPlan, Schedule};
pub use config::{parse_config, Precision, Task, TrainConfig};
pub use gradcheck::{gradcheck, gradcheck_with_fault, GradcheckReport, GRADCHECK_TOLERANCE};
pub use train::{format_log, lr_at_epoch, train, EpochLog, TrainOutcome};
