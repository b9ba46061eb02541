//! Task-sequence training under the supported continual-learning methods.

mod buffer;
mod method;
mod run;
mod trainer;

pub use buffer::{BufferItem, ReplayBuffer};
pub use method::{Method, MethodConfig, RunMode};
pub use run::{iid_split_baseline, run_sequence, run_sequence_into, union_dataset, BlockwiseSpec, EvalConfig, RunConfig, RunOutput};
pub use trainer::{TaskStats, TrainerState};
