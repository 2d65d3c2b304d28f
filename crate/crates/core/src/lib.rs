//! Unsupervised semantic segmentation over frozen self-supervised features.
//!
//! Each image's dense feature map is decomposed into principal mask
//! proposals ([`primaps`]), aligned to the image with a dense CRF ([`crf`]),
//! and labelled by majority vote of the momentum class prototypes. The
//! prototypes are fitted with moving-average stochastic EM ([`em`]) and
//! scored with Hungarian-matched mIoU and pixel accuracy ([`eval`]).

pub mod cli;
pub mod crf;
pub mod dataio;
pub mod em;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod primaps;
pub mod synthetic;

pub use error::{Error, Result};
