//! Contextual-attention human-object interaction (HOI) scoring and triplet
//! evaluation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, differentiable ops with manual backward
//!   passes, and the `HOIT` file format.
//! * [`features`]: boxes, detections, backbone feature maps, manifests.
//! * [`context`]: factorized large-kernel context aggregation and
//!   position-sensitive ROI align.
//! * [`attention`]: instance-conditioned attention, spatial/channel
//!   refinement and the action head.
//! * [`pipeline`]: human/object/pairwise streams, fusion, triplet emission.
//! * [`training`]: synthetic scenes, BCE, SGD with momentum, gradient checks.
//! * [`evaluation`]: role AP / mAP with greedy IoU matching and threshold
//!   sweeps.
//! * [`cli`]: the `hoi` command-line tool.

pub mod attention;
pub mod cli;
pub mod context;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{HoiError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
