//! Keypoint selection for voting-based pose estimation.
//!
//! Keypoints are scored by how similar the vote distributions they induce are
//! (1-D Wasserstein distance over scalarized votes) and by how dispersed they
//! are. The crate provides the objective and its gradient, direct and
//! search-based optimizers, a small graph encoder trained on the objective, and
//! a pose simulator that measures how keypoint choice affects pose accuracy.

// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod nn;
pub mod geometry;
pub mod sampling;
pub mod votes;
pub mod distances;
pub mod loss;
pub mod encoder;
pub mod optimizer;
pub mod posesim;
