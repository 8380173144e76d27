//! Dense FP32 tensor kernels and the gradient tape built on them.

mod attention;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub(crate) use attention::attend;
pub use attention::{multi_head_attention, scaled_dot_product_attention, AttentionProjections, AttnMask};
pub use gradcheck::{grad_check, grad_check_coords};
pub use ops::{
    add, add_bias, dot, layer_norm, log_softmax, log_softmax_in_place, matmul, matmul_nt,
    matmul_tn, position_row, positional_encoding, relu, sigmoid, sigmoid_scalar, softmax,
    softmax_in_place, LAYER_NORM_EPS,
};
pub use tape::{AttnLayout, SeqLayout, Tape, Var};
pub use tensor::{Scalar, Tensor};
