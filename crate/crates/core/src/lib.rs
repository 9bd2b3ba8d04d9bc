//! Core library for reference-free evaluation of instruction-based image edits.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: boxes, edit commands, differences and evaluation cases.
//! - [`raster`]: an 8-bit RGB image type with outline, region fill and JPEG
//!   round-trip primitives.
//! - [`parser`]: structured detector output parsing and command confidence
//!   from token log-probabilities.
//! - [`detmetrics`]: greedy detection matching and the AP suite.
//! - [`datagen`]: pair mining, pair labelling and inpainting manifest planning.
//! - [`evalcomp`]: masked embedding similarity, ranking axes and correlation
//!   with human ratings.

pub mod datagen;
pub mod detmetrics;
pub mod error;
pub mod evalcomp;
pub mod parser;
pub mod raster;
pub mod types;

pub use error::{Error, Result};
pub use raster::{Image, Rgb};
pub use types::{
    CoherenceVerdict, Difference, EditCase, EditCommand, GroundTruthDifference, HumanRatings, NormalizedBBox,
};
