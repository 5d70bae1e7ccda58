//! Recursive neural programs.
//!
//! A two-level generative image model: an image is encoded to a top-level
//! program vector, a shared hypernetwork turns each program into a small set
//! of recurrent and feed-forward networks, and those networks emit a
//! sequence of child programs and affine actions. Leaf programs decode to
//! image patches, which are warped into their parent's frame and summed on a
//! canvas.
//!
//! Module map:
//!
//! - [`tape`]: reverse-mode autodiff over dense tensors, plus finite-difference checks.
//! - [`stn`]: bounded affine actions and differentiable bilinear warps.
//! - [`nets`]: stateless MLP, RNN and residual-encoder evaluators.
//! - [`hypernet`]: parameter layout and the seven-head hypernetwork.
//! - [`model`]: inference, recursive generation and the training objective.
//! - [`data`]: IDX datasets, the synthetic stroke corpus and batching.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`gradcheck`]: the 64-bit gradient-check suite.
//! - [`cli`]: the `rnp` command-line front end.

pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod hypernet;
pub mod model;
pub mod nets;
pub mod stn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Gradients, Primitive, Tape, TapeError, Var};
pub use tensor::{Real, Tensor};

// Book chapters are compiled as doctests so their snippets stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/stn.md")]
    mod stn {}
    #[doc = include_str!("../../../book/src/hypernet.md")]
    mod hypernet {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
