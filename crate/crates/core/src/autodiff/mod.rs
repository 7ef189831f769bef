//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and produces
//! exact gradients for every leaf created with [`Graph::leaf`] or
//! [`Graph::param`].

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{real, Real, Tensor};

/// Scalar forms of the activation functions, shared with reference code.
pub mod scalar {
    use super::Real;

    pub fn sigmoid<T: Real>(u: T) -> T {
        super::kernels::sigmoid(u)
    }

    pub fn silu<T: Real>(u: T) -> T {
        super::kernels::silu(u)
    }

    pub fn softplus<T: Real>(u: T) -> T {
        super::kernels::softplus(u)
    }
}
