//! Desk-scale zero-shot voice conversion testbed.
//!
//! The pipeline disentangles a synthetic speech stand-in into linguistic
//! content, style (pitch contour + rate), and timbre, then reconstructs
//! mel-like features with a conditional flow matching model built from
//! diffusion-transformer blocks with dual (timbre + style) attention.
//!
//! Everything is self-contained: the corpus generator exposes analytically
//! recoverable ground-truth factors, so disentanglement and transfer quality
//! are measured without any pretrained models or audio I/O.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod content;
pub mod corpus;
pub mod duration;
pub mod error;
pub mod eval;
pub mod flow;
pub mod melb;
pub mod model;
pub mod nn;
pub mod style;

pub use error::VcError;
pub type Result<T> = std::result::Result<T, VcError>;
