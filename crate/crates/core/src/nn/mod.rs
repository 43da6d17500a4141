//! Small CPU neural-network engine: forward pass, hand-written
//! backpropagation, SGD, batch-norm statistics and per-neuron pruning masks.

pub mod checkpoint;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layer::{BatchNorm, Cache, Conv2d, Dense, Layer, Mode};
pub use metrics::{accuracy, attack_success_rate};
pub use model::{argmax, cross_entropy, Gradients, Model, NeuronId, Trace};
pub use train::{train_sgd, TrainConfig};
