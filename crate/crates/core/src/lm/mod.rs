//! Decoder language-model recommender: frozen backbone, θ, training and
//! constrained decoding.

mod backbone;
mod manifest;
mod model;
mod train;

pub use backbone::{Backbone, BackboneConfig, BackboneInit, Block, ANSWER_TOKEN, BACKBONE_FORMAT};
pub use manifest::{checkpoint_tensors, load_checkpoint, save_checkpoint, Manifest};
pub use model::{
    constrained_decode, encode_example, AdapterConfig, EncodedExample, IiaConfig, LayerAdapters, Model, Theta, THETA_FORMAT,
};
pub use train::{batch_gradient, hit_rate, predict_all, train, LogRecord, TrainConfig, TrainState, STATE_FORMAT};
