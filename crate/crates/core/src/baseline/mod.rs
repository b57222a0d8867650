//! Deterministic encoder-decoder baseline (AE) and the classifier trained
//! on its reconstructions (C-AE).

mod ae;
mod cae;

pub use ae::{mse_graph, train_ae, AeConfig, AeModel, LossLog};
pub use cae::{cae_classify, train_cae, CaeModel, CaeSettings};
