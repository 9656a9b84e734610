//! Toy two-stream detector: per-modality convolution stages, a fusion
//! transformer after each stage, concat + 1x1 merge into pyramid inputs and a
//! one-prediction-per-cell head.

mod decode;
mod model;

pub use decode::{decode_boxes, nms, DecodeParams};
pub use model::{Detector, DetectorConfig, ForwardOptions, ForwardOutput, Mode, StageResidual};

/// Channel layout of a head map: box offsets, objectness, then class logits.
pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const OBJ: usize = 4;
pub const CLS: usize = 5;

/// Range the log-size logits are clamped to before `exp`.
pub const SIZE_LOGIT_RANGE: (f64, f64) = (-6.0, 6.0);

/// Total stride of each pyramid level relative to the input.
pub const STRIDES: [usize; 3] = [4, 8, 16];
