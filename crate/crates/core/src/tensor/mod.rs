//! Numeric substrate: arrays, reverse-mode graphs, layers, Adam, and
//! finite-difference gradient checks.

mod adam;
mod array;
mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod params;
mod rng;

pub use adam::AdamState;
pub use array::Tensor;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck, ZERO_GRAD_TOLERANCE};
pub use graph::{sigmoid, softmax_in_place, BatchStats, Gradients, Graph, TripletSummary, Var, BN_EPS};
pub use layers::{dropout_mask, Layer, LayerSpec, Sequential};
pub use params::{Mode, Param, ParamStore, Session, BN_MOMENTUM};
pub use rng::{Rng, RNG_ALGORITHM};
