//! DeepONet surrogate for the map from a coefficient estimate `c_hat` to the
//! kernel pair `(Ku, Kv)`.

pub mod dense;
pub mod eval;
pub mod io;
pub mod model;
pub mod prepared;
pub mod train;

pub use eval::{eval_accuracy, eval_predictions, KernelErrors, StateErrors, Table1};
pub use io::{load_model, read_model, save_model, write_model};
pub use model::{Architecture, Batch, DeepOnet};
pub use prepared::PreparedOperator;
pub use train::{relative_error, train, EpochStats, TrainConfig, TrainReport, TrainingSet};
