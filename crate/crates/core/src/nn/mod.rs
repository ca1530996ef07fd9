//! Reverse-mode differentiable network core.

mod gradcheck;
mod layers;
mod loss;
mod net;
pub mod persist;
mod tensor;
mod train;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use layers::{Activation, LayerSpec, Padding, Param};
pub use loss::{cross_entropy, pair_penalty, LossKind, PairPenalty, BATCH_STD_EPS, MIN_CORR_BATCH, PROB_FLOOR};
pub use net::{Net, NetBuilder, Node};
pub use tensor::Tensor;
pub use train::{adam_step, batch_objective, evaluate_loss, train, BatchLoss, EpochStats, History, TrainConfig, TrainData};
