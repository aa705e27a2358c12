//! Atlas-free brain-function representation (random anchors, iterative
//! multi-scale patch sampling, patch-to-anchor functional connectivity) with
//! a pre-norm transformer classifier whose feed-forward blocks can be swapped
//! for Kolmogorov-Arnold Network variants.

pub mod anchors;
pub mod basis;
pub mod checkpoint;
pub mod eval;
pub mod kan;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod volume;
