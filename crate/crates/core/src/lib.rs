//! Sparse feature tracking with a compact learned patch descriptor.
//!
//! The crate is organised bottom-up:
//!
//! * [`imgproc`] – rasters, FAST corners, keypoint NMS, sampling and warping.
//! * [`flowlab`] – pyramidal forward-backward Lucas–Kanade pseudo-labels.
//! * [`patches`] – patch extraction, jitter and multi-frame sequence groups.
//! * [`net`] – the descriptor network, its gradients, checkpoints and FLOPs.
//! * [`matching`] – similarity/probability maps and sub-pixel peaks.
//! * [`head`] – a small reverse-mode graph over the matching operations.
//! * [`losses`] – supervised and self-supervised training objectives.
//! * [`train`] – datasets, ADAM and the epoch loop.
//! * [`infer`] – single-patch, pyramid and streaming trackers.
//! * [`eval`] – synthetic data, MMA evaluation and benchmarking.

pub mod config;
pub mod error;
pub mod eval;
pub mod flowlab;
pub mod head;
pub mod imgproc;
pub mod infer;
pub mod losses;
pub mod matching;
pub mod net;
pub mod patches;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use imgproc::{Homography, Image, Keypoint};
pub use infer::{Correspondence, PyramidConfig};
pub use losses::{LossReport, LossWeights};
pub use matching::{ProbabilityMap, SimilarityMap};
pub use net::{ArchSpec, DescriptorMap, NormKind, ParamSet};
pub use patches::{Patch, SequenceGroup};
pub use real::Real;
