//! Model zoo, losses, and the two optimizers: SGD with momentum for model
//! training and projected gradient ascent for trigger perturbations.

mod checkpoint;
mod loss;
mod model;
mod pga;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{cross_entropy, cross_entropy_graph, mean_entropy_graph};
pub use model::{Arch, ForwardGraph, ModelState, ParamSpec};
pub use pga::{pga_ascend, pga_ascend_bounded, PgaConfig};
pub use sgd::{sgd_train, sgd_train_frozen, sgd_train_observed, SgdConfig, TrainLogRow};
