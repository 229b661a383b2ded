//! Few-shot glyph generation with multiple localized experts.
//!
//! A multi-headed encoder is steered toward distinct local sub-concepts by an
//! exact bipartite B-matching of weak component labels, disentangled into
//! style and content factors with entropy-adversarial and HSIC losses, and
//! trained as a conditional GAN on a procedurally generated glyph corpus.

pub mod allocation;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod gradcheck;
pub mod hsic;
pub mod losses;
pub mod network;
pub mod optim;
pub mod params;
pub mod registry;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
