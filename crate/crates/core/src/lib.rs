//! Pose estimation for polygonal peg-in-hole insertion from multi-point
//! force/torque contact signatures, with sim-to-pseudo-real adaptation and a
//! closed-loop assembly suite.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive
// values; index loops read better in the small fixed-size numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptation;
pub mod assembly;
pub mod contact;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub struct Geometry;
    #[doc = include_str!("../../../book/src/contact.md")]
    pub struct Contact;
    #[doc = include_str!("../../../book/src/dataset.md")]
    pub struct Dataset;
    #[doc = include_str!("../../../book/src/estimator.md")]
    pub struct Estimator;
    #[doc = include_str!("../../../book/src/adaptation.md")]
    pub struct Adaptation;
    #[doc = include_str!("../../../book/src/assembly.md")]
    pub struct Assembly;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
