//! Optical-flow data structures: per-frame-pair displacement fields, the
//! stacked multi-frame input volumes built from them, the 8-bit archive
//! codec, and a pluggable flow estimator with a variational baseline.

mod codec;
mod estimator;
mod field;
mod volume;

pub use codec::{
    archive_encode, archive_read, archive_read_bytes, archive_write, decode_field, encode_field,
    FlowArchive, QuantizedField,
};
pub use estimator::{estimate_flow, to_grayscale, FlowEstimator, FlowEstimatorParams, FlowMethod, HornSchunck};
pub use field::DisplacementField;
pub use volume::{
    crop_volume, stack_bidirectional, stack_flow, stack_trajectory, subtract_mean,
    trace_trajectory, BaseMode, CropRect, FlowVolume, StackMode, TrajectoryPath,
};
