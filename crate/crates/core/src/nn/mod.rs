//! Minimal CNN engine: convolution, ReLU, max-pool, fully-connected,
//! softmax cross-entropy and momentum SGD.

pub mod data;
pub mod layers;
pub mod net;
pub mod optim;

pub use layers::{
    conv2d_backward, conv2d_backward_input, conv2d_backward_weights, conv2d_forward, fc_backward,
    fc_forward, maxpool_backward, maxpool_forward, recompute_relu, relu_backward, relu_forward,
    softmax_xent, ConvSpec, PoolSpec,
};
pub use net::{ActivationStash, KeepActivations, LayerSpec, Network, StepOutput};
pub use optim::{sgd_momentum_step, Hyperparams, TrainState};
