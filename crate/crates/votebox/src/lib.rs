//! Desk-scale 3D object detection and counting on point clouds.
//!
//! The library is organized as a stack of small, independently testable
//! layers:
//!
//! - [`tensor`]: a minimal dense f64 tensor engine with reverse-mode
//!   automatic differentiation on an explicit operation tape, plus a
//!   finite-difference gradient checker and a binary checkpoint format.
//! - [`geometry`]: axis-aligned 3D boxes, IoU, greedy NMS, and box
//!   residual encoding/decoding.
//! - [`sampling`]: farthest point sampling, ball queries, offset voting,
//!   and vote clustering.
//! - [`context`]: attention-based feature refinement over primitives
//!   (votes), clusters, and the whole scene.
//! - [`evaluation`]: greedy detection matching, average precision, and
//!   counting-by-detection metrics.
//! - [`scenes`]: synthetic scene generation and the text formats for
//!   scenes and predictions.
//! - [`pipeline`]: the full detector — seed encoding, voting, clustering,
//!   context refinement, cascaded box refinement, and a toy trainer.
//! - [`config`]: flat key=value run configuration shared by the CLI.

pub mod checks;
pub mod cli;
pub mod config;
pub mod context;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod sampling;
pub mod scenes;
pub mod tensor;
