//! Composed (text-guided) image retrieval.
//!
//! Fusion of image and text embeddings (vector addition, attention fusion and
//! residual attention fusion), batch-wise contrastive training, weakly supervised
//! training triplets from attribute labels, and the retrieval metrics used to
//! evaluate it all. A synthetic aligned dual encoder stands in for a pretrained
//! backbone so everything runs at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod training;
pub mod weaksup;

pub use error::{Error, ErrorClass, Result};
pub use numerics::{Real, Tensor};
