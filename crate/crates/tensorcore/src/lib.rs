//! Minimal dense-tensor library with reverse-mode differentiation.
//!
//! Everything is 32-bit floats by default; every op is generic over [`Scalar`]
//! so the same graph can be replayed in 64-bit verification mode. The tape
//! records operations in creation order (which is topological by construction)
//! and `backward` walks it in exact reverse order.

pub mod gradcheck;
pub mod optim;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Tape, Var, MASK_NEG};
pub use tensor::Tensor;
