//! Distribution-aware margin calibration for mean-IoU optimization.
//!
//! The crate is organised around the pipeline a segmentation experiment
//! walks through:
//!
//! * [`raster`]: label masks, score maps, manifests and their binary formats.
//! * [`metrics`]: streaming confusion matrices and exact IoU / mIoU.
//! * [`calibration`]: label statistics and closed-form per-class margin offsets.
//! * [`losses`]: the margin-calibrated loss and five baselines, each returning
//!   a value plus an analytic gradient with respect to the scores.
//! * [`bounds`]: surrogate error probabilities, IoU lower bounds and the
//!   generalization error bound, with a numerical optimality check.
//! * [`synth`]: a seeded generator of imbalanced feature-space segmentation data.
//! * [`trainer`]: linear / one-hidden-layer pixel classifiers with hand-written
//!   backpropagation and AdamW.
//! * [`experiment`]: comparison, sensitivity, gap and bound reports.
//!
//! Runnable walkthroughs of each capability live in the crate's `examples/`
//! directory (`cargo run --example <name>`).

pub mod bounds;
pub mod calibration;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod plot;
pub mod raster;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
