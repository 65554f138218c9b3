//! Minimal dense tensor library with reverse-mode automatic differentiation,
//! sized for CPU training of small sequence models in double precision.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{
    conv_out_len, gelu, log_sum_exp, rotate_pairs, sigmoid, softmax_in_place, softplus, Grads, Graph, Unary, Var,
};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
