//! Numeric substrate: tensor kernels, initializers, and the optimizer.

pub mod adam;
pub mod init;
pub mod ops;

pub use adam::ParamSlot;
pub use init::{glorot_limit, glorot_uniform, orthogonal_init, orthogonalize};
pub use ops::{
    affine_backward, affine_forward, dropout, matmul, relu_t, sigmoid_t, softmax, softmax_backward,
    softmax_in_place, tanh_t, Activation, Mode,
};
