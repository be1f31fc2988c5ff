//! Function-matching knowledge distillation at desk scale.
//!
//! A compact student network is trained to match a larger frozen teacher
//! over many input points, for dense semantic segmentation and for
//! anchor-free (FCOS-style) detection. The crate carries everything needed
//! to run the three training strategies end to end on a procedural scene
//! world:
//!
//! * [`tensor`] and [`nn`]: channel-major `f64` maps and a small layer zoo
//!   with analytic backward passes.
//! * [`seg_loss`] and [`det_loss`]: supervised and soft-target losses with
//!   gradients with respect to the student's raw outputs.
//! * [`metrics`]: confusion-matrix mIoU, prediction agreement and a
//!   COCO-style AP suite.
//! * [`optim`]: SGD with momentum, coupled weight decay and a poly schedule.
//! * [`data`]: the synthetic world, augmentation, the unlabeled frame stream
//!   and PPM/PGM/JSON-lines I/O.
//! * [`trainer`] and [`config`]: strategies, sweeps, checkpoints, reports.

pub mod config;
pub mod data;
pub mod det_loss;
mod error;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod seg_loss;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::DenseMap;
