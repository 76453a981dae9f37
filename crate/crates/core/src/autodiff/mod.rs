//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations on [`Tensor`] values as they are
//! evaluated. [`Tape::backward`] then walks the record once in reverse and
//! accumulates gradients for every node that depends on a `requires_grad`
//! leaf. Only the primitives the retrieval model needs are provided.
//!
//! ```
//! use datr_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let loss = tape.sum(half).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 3.0, 0.5]);
//! ```

mod checkpoint;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{sha256, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::Reader;
pub use kernels::dot;
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{conv1d_out_len, Tape, Var};
pub use tensor::Tensor;
