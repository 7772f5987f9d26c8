//! Image reconstruction from modified CNN activation codes.
//!
//! Feature map inversion shows what a single convolutional filter responds
//! to by inverting a code in which that filter's map carries the whole
//! channel sum. Modified code inversion restyles an image by reallocating
//! per-channel energy, either at random or towards the channel sums of a
//! style image.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod code;
pub mod codeops;
pub mod error;
pub mod image;
pub mod inversion;
pub mod layer;
pub mod manifest;
pub mod nn;

pub use backbone::{Backbone, VGG19_FILTER_COUNT};
pub use code::Code;
pub use codeops::{GramDescriptor, RealloVector, Reallocation, StyleDescriptor};
pub use error::{Error, Result};
pub use image::{ColorSpace, ImageBuffer, IMAGENET_MEAN_RGB};
pub use inversion::{
    init_image, optimize, InitMode, Objective, OptimizerConfig, Priors, RunResult, StepRule, Term, TermKind, TraceEntry,
};
pub use layer::{LayerId, LayerKind};
pub use manifest::RunManifest;
