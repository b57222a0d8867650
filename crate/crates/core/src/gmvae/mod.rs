//! Gaussian-mixture variational autoencoder: classification of fiber
//! measurements and reconstruction of the imaged object.

mod loss;
mod model;
mod train;

pub use loss::{
    cross_entropy_graph, gumbel_softmax_graph, gumbel_softmax_sample, kl_categorical_graph, kl_categorical_uniform,
    kl_gaussian_diag, kl_gaussian_graph, reconstruction_graph, reconstruction_term, LossTerms, LossWeights,
};
pub use model::{
    argmax_row, CategoryPath, ForwardVars, GmvaeConfig, GmvaeModel, SamplingNoise, DROPOUT_RATE, LABEL_MAP_PARAM,
    LOGVAR_BOUNDS,
};
pub use train::{
    best_label_map, fit_label_map, objective, train_gmvae, Batch, Encoded, EpochLog, Inference, Objective, TrainingLog,
};
