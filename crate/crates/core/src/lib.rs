#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Correspondence-driven perspective warping for image composition.
//!
//! A foreground object is placed on a background by predicting, for every
//! foreground grid cell, where it lands on the background; a closed-form
//! least-squares fit over those pairs gives the 3x3 warp.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod train;

pub use error::{Error, Result};
