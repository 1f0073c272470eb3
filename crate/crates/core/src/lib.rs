//! Road obstacle positional and dynamic feature extraction.
//!
//! The pipeline fuses three per-frame inputs:
//!
//! * a dense disparity map computed from a rectified stereo pair
//!   ([`disparity`]),
//! * a dense optical flow field computed from consecutive left frames
//!   ([`flow`]),
//! * instance segmentation masks produced by an external detector and
//!   ingested from `detections.json` ([`mask`]).
//!
//! For every detected obstacle the [`analysis`] module averages disparity and
//! flow over the object mask and maps the aggregates to four categorical
//! labels (depth, x-direction, y-direction, movement intensity). The
//! [`eval`] module scores predicted labels against manual ground truth with
//! per-task accuracy and confusion matrices, and [`synth`] generates
//! deterministic synthetic scenes with analytically known ground truth for
//! testing the whole chain.

pub mod analysis;
pub mod config;
pub mod disparity;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image;
pub mod mask;
pub mod synth;

pub use analysis::{
    analyze_sequence, classify, movement_intensity, AnalysisFile, DepthLabel, IntensityLabel,
    LabelSet, ObjectObservation, XDirLabel, YDirLabel,
};
pub use config::{AnalysisConfig, IntensityMetric, YSignConvention};
pub use disparity::{compute_disparity, disparity_to_image, DisparityMap};
pub use error::{Error, Result};
pub use eval::{accuracy, build_confusion, match_objects, ConfusionMatrix, GroundTruthFile, Task};
pub use flow::{compute_flow, poly_expand, warp_image, FlowField, FlowParams, PolyExpansion};
pub use image::{load_image, ImageBuffer, StereoPair};
pub use mask::{decode_rle, encode_rle, parse_detections, DetectionFile, InstanceMask};
pub use synth::{render_scene, truth_labels, SceneScript, SceneTruth};
