//! chunkflow: desk-scale action-chunk representation learning.
//!
//! The pipeline mirrors a three-stage recipe for learning robot action
//! distributions from demonstrations:
//!
//! 1. tokenize continuous action chunks with a residual vector quantizer
//!    (plus uniform-binning and DCT+BPE baselines),
//! 2. train a conditional flow-matching action expert (a small GQA
//!    transformer) to generate chunks,
//! 3. distill the multi-step expert into a one-step generator.
//!
//! Around this sit a synthetic demonstration generator, a tar-shard data
//! pipeline with weighted mixing, scaling-law fitting, validation metrics,
//! and a CLI. Everything runs on a local reverse-mode autodiff engine in
//! 64-bit floats so gradients, quantizers, and samplers can be verified
//! against independent oracles.
//!
//! See `examples/` for one runnable entry point per capability.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod figures;
pub mod flow;
pub mod geometry;
pub mod nn;
pub mod scaling;
pub mod shards;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
