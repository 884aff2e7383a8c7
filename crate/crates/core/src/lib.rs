//! Multi-scale Gaussian surfel scenes: scale-aware rendering, optimization
//! and zoom-in synthesis.

// NaN must fail range checks, so they are written as negated comparisons
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod imaging;
pub mod modulation;
pub mod raster;
pub mod scene;
pub mod diffopt;
pub mod surfelize;
pub mod depthreg;
pub mod synth;
pub mod sceneio;
pub mod service;
