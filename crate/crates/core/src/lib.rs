//! Numerical convex integration for `C^{1,α}` isometric extensions.
//!
//! Fields are sampled on uniform grids ([`fields`]). Metrics are split into
//! primitive rank-one pieces ([`decomposition`]), each of which is absorbed by
//! a corrugated step ([`corrugation`], [`convex`]). [`extension`] builds a
//! short extension of boundary data with a Whitney-type layer structure and
//! [`iteration`] drives the stage iteration.
#![no_std]
// `num_traits::Float` supplies the float methods without std; builds that
// pull in std resolve them inherently and flag the import.
#![allow(unused_imports)]

extern crate alloc;

pub mod bessel;
pub mod calibration;
pub mod convex;
pub mod corrugation;
pub mod decomposition;
pub mod error;
pub mod extension;
pub mod fields;
pub mod iteration;
pub mod linalg;

pub use error::{Error, Result};
