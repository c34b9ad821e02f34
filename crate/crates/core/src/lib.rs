//! Few-shot semantic segmentation with masked-average-pooled prototypes,
//! cosine classification and prototype alignment, built on a small
//! reverse-mode differentiation engine.
//!
//! - [`numerics`]: tensors, kernels, the gradient tape and SGD.
//! - [`encoder`]: configurable plain and residual convolutional encoders.
//! - [`prototype`]: masks, pooling, classification and the losses.
//! - [`data`]: datasets, the synthetic generator and episode sampling.
//! - [`train_eval`]: the episodic trainer, IoU evaluation, checkpoints and
//!   reports.
//!
//! ```
//! use protoseg::data::{generate_synthetic, EpisodeSpec};
//! use protoseg::encoder::{Encoder, EncoderConfig};
//! use protoseg::train_eval::{evaluate, train, PrototypePredictor, TrainConfig};
//!
//! let data = generate_synthetic(12, 0, 64).unwrap();
//! let mut encoder = Encoder::build(EncoderConfig::preset("tiny").unwrap(), 0).unwrap();
//! train(&mut encoder, &data, &TrainConfig { iterations: 2, ..TrainConfig::default() }).unwrap();
//!
//! let predictor = PrototypePredictor { encoder: &encoder, alpha: 20.0 };
//! let report = evaluate(&predictor, &data, &EpisodeSpec::new(2, 1), 3, 0).unwrap();
//! assert_eq!(report.per_class.len(), 2);
//! ```
//!
//! The guide in `book/` walks through each component; its listings run as
//! doc-tests of this crate.

pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod prototype;
pub mod train_eval;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their listings run with `cargo test`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/prototypes.md")]
    mod prototypes {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
