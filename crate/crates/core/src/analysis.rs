//! Per-object aggregation of disparity and flow, and the mapping from
//! aggregates to the four categorical labels (depth, x-direction,
//! y-direction, movement intensity).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AnalysisConfig, IntensityMetric, YSignConvention};
use crate::disparity::{compute_disparity, DisparityMap};
use crate::error::{Error, Result};
use crate::flow::{compute_flow, FlowField, FlowParams};
use crate::image::{ImageBuffer, StereoPair};
use crate::mask::{DetectionFile, InstanceMask, MaskRaster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLabel {
    VeryClose,
    Close,
    Far,
    VeryFar,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XDirLabel {
    LeftToRight,
    RightToLeft,
    StableDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YDirLabel {
    Approaching,
    MovingAway,
    StableDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityLabel {
    Stopped,
    Slow,
    AverageSpeed,
    Fast,
    VeryFast,
}

impl DepthLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthLabel::VeryClose => "very_close",
            DepthLabel::Close => "close",
            DepthLabel::Far => "far",
            DepthLabel::VeryFar => "very_far",
            DepthLabel::Unknown => "unknown",
        }
    }
}

impl XDirLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            XDirLabel::LeftToRight => "left_to_right",
            XDirLabel::RightToLeft => "right_to_left",
            XDirLabel::StableDirection => "stable_direction",
        }
    }
}

impl YDirLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            YDirLabel::Approaching => "approaching",
            YDirLabel::MovingAway => "moving_away",
            YDirLabel::StableDistance => "stable_distance",
        }
    }
}

impl IntensityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            IntensityLabel::Stopped => "stopped",
            IntensityLabel::Slow => "slow",
            IntensityLabel::AverageSpeed => "average_speed",
            IntensityLabel::Fast => "fast",
            IntensityLabel::VeryFast => "very_fast",
        }
    }
}

/// The four categorical labels assigned to one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSet {
    pub depth: DepthLabel,
    pub x_dir: XDirLabel,
    pub y_dir: YDirLabel,
    pub intensity: IntensityLabel,
}

/// One detected obstacle in one frame with its aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub frame_index: usize,
    pub object_id: u32,
    pub class_name: String,
    /// Mean disparity over valid in-mask pixels; absent when fewer than
    /// `min_valid_pixels` were valid.
    pub mean_disparity: Option<f64>,
    pub valid_disparity_count: usize,
    /// Mean horizontal flow over all mask pixels (xM).
    pub mean_flow_x: f64,
    /// Mean vertical flow over all mask pixels (yM).
    pub mean_flow_y: f64,
    /// Movement-intensity scalar VL.
    pub movement_intensity: f64,
    pub pixel_count: usize,
    /// False for the first frame of a sequence, where no flow exists and
    /// (xM, yM) is fixed at (0, 0).
    pub has_flow: bool,
}

/// Mean disparity over pixels that are both in-mask and valid, plus the
/// count of contributing pixels. Summation runs in fixed row-major order.
pub fn aggregate_depth(
    mask: &MaskRaster,
    dmap: &DisparityMap,
    config: &AnalysisConfig,
) -> Result<(Option<f64>, usize)> {
    if mask.width() != dmap.width() || mask.height() != dmap.height() {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs disparity map {}x{}",
            mask.width(),
            mask.height(),
            dmap.width(),
            dmap.height()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                if let Some(d) = dmap.get(x, y) {
                    sum += d as f64;
                    count += 1;
                }
            }
        }
    }
    if count < config.min_valid_pixels {
        Ok((None, count))
    } else {
        Ok((Some(sum / count as f64), count))
    }
}

/// Mean flow vector (xM, yM) over all mask pixels, valid or not. Summation
/// runs in fixed row-major order.
pub fn aggregate_flow(mask: &MaskRaster, field: &FlowField) -> Result<(f64, f64)> {
    if mask.width() != field.width() || mask.height() != field.height() {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs flow field {}x{}",
            mask.width(),
            mask.height(),
            field.width(),
            field.height()
        )));
    }
    let mut sum_u = 0.0f64;
    let mut sum_v = 0.0f64;
    let mut n = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let (u, v) = field.get(x, y);
                sum_u += u as f64;
                sum_v += v as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Input("mask has no foreground pixels".into()));
    }
    Ok((sum_u / n as f64, sum_v / n as f64))
}

/// Movement-intensity scalar VL from the mean flow vector.
pub fn movement_intensity(x_m: f64, y_m: f64, config: &AnalysisConfig) -> f64 {
    match config.intensity_metric {
        IntensityMetric::Product => (x_m * y_m).abs(),
        IntensityMetric::Euclidean => x_m.hypot(y_m),
    }
}

fn depth_label(mean_disparity: Option<f64>, config: &AnalysisConfig) -> DepthLabel {
    let Some(d) = mean_disparity else {
        return DepthLabel::Unknown;
    };
    let normalized = d / config.d_max as f64;
    let bins = [DepthLabel::VeryClose, DepthLabel::Close, DepthLabel::Far];
    for (threshold, label) in config.depth_thresholds.iter().zip(bins) {
        if normalized >= *threshold {
            return label;
        }
    }
    DepthLabel::VeryFar
}

fn x_dir_label(x_m: f64, config: &AnalysisConfig) -> XDirLabel {
    if x_m.abs() <= config.dir_epsilon_x {
        XDirLabel::StableDirection
    } else if x_m > 0.0 {
        XDirLabel::LeftToRight
    } else {
        XDirLabel::RightToLeft
    }
}

fn y_dir_label(y_m: f64, config: &AnalysisConfig) -> YDirLabel {
    if y_m.abs() <= config.dir_epsilon_y {
        return YDirLabel::StableDistance;
    }
    let downward = y_m > 0.0;
    let approaching = match config.y_sign_approaching {
        YSignConvention::DownIsApproaching => downward,
        YSignConvention::UpIsApproaching => !downward,
    };
    if approaching {
        YDirLabel::Approaching
    } else {
        YDirLabel::MovingAway
    }
}

fn intensity_label(vl: f64, config: &AnalysisConfig) -> IntensityLabel {
    let bins = [
        IntensityLabel::Stopped,
        IntensityLabel::Slow,
        IntensityLabel::AverageSpeed,
        IntensityLabel::Fast,
    ];
    for (cut, label) in config.intensity_thresholds.iter().zip(bins) {
        if vl < *cut {
            return label;
        }
    }
    IntensityLabel::VeryFast
}

/// Maps an observation's aggregates to the four labels. Total and
/// deterministic; boundary values take the higher label.
pub fn classify(observation: &ObjectObservation, config: &AnalysisConfig) -> LabelSet {
    LabelSet {
        depth: depth_label(observation.mean_disparity, config),
        x_dir: x_dir_label(observation.mean_flow_x, config),
        y_dir: y_dir_label(observation.mean_flow_y, config),
        intensity: intensity_label(observation.movement_intensity, config),
    }
}

/// Kernel outputs and per-object results for one frame.
#[derive(Debug, Clone)]
pub struct FrameAnalysis {
    pub frame_index: usize,
    pub disparity: DisparityMap,
    /// Flow from the previous left frame to this one; absent on the first
    /// frame.
    pub flow: Option<FlowField>,
    /// Ordered by object id.
    pub objects: Vec<(ObjectObservation, LabelSet)>,
}

/// Analyzes one frame: disparity from its stereo pair, flow from the
/// previous left frame when available, then one observation + label set per
/// detection.
pub fn analyze_frame(
    prev_left: Option<&ImageBuffer>,
    pair: &StereoPair,
    detections: &[InstanceMask],
    config: &AnalysisConfig,
) -> Result<FrameAnalysis> {
    let dmap = compute_disparity(pair, config)?;
    let flow = match prev_left {
        Some(prev) => Some(compute_flow(
            prev,
            &pair.left,
            &FlowParams::from_config(config),
        )?),
        None => None,
    };

    let mut dets: Vec<&InstanceMask> = detections.iter().collect();
    dets.sort_by_key(|d| d.object_id);

    let mut objects = Vec::with_capacity(dets.len());
    for det in dets {
        if det.height() != pair.left.height() || det.width() != pair.left.width() {
            return Err(Error::Dimension(format!(
                "frame {}: mask for object {} is {}x{} but the frame is {}x{}",
                pair.frame_index,
                det.object_id,
                det.width(),
                det.height(),
                pair.left.width(),
                pair.left.height()
            )));
        }
        let raster = det.decode()?;
        let (mean_disparity, valid_count) = aggregate_depth(&raster, &dmap, config)?;
        let (x_m, y_m, has_flow) = match &flow {
            Some(field) => {
                let (x_m, y_m) = aggregate_flow(&raster, field)?;
                (x_m, y_m, true)
            }
            None => (0.0, 0.0, false),
        };
        let observation = ObjectObservation {
            frame_index: pair.frame_index,
            object_id: det.object_id,
            class_name: det.class_name.clone(),
            mean_disparity,
            valid_disparity_count: valid_count,
            mean_flow_x: x_m,
            mean_flow_y: y_m,
            movement_intensity: movement_intensity(x_m, y_m, config),
            pixel_count: raster.area(),
            has_flow,
        };
        let labels = classify(&observation, config);
        objects.push((observation, labels));
    }
    Ok(FrameAnalysis {
        frame_index: pair.frame_index,
        disparity: dmap,
        flow,
        objects,
    })
}

/// Runs the full analysis over a frame sequence. Output is ordered by
/// `(frame_index, object_id)` regardless of internal schedule.
pub fn analyze_sequence(
    frames: &[StereoPair],
    detections: &DetectionFile,
    config: &AnalysisConfig,
) -> Result<Vec<(ObjectObservation, LabelSet)>> {
    let mut by_index: BTreeMap<usize, &StereoPair> = BTreeMap::new();
    for pair in frames {
        if by_index.insert(pair.frame_index, pair).is_some() {
            return Err(Error::Input(format!(
                "duplicate frame index {}",
                pair.frame_index
            )));
        }
    }
    for frame in &detections.frames {
        if !by_index.contains_key(&frame.frame_index) {
            return Err(Error::Input(format!(
                "detections reference frame {} but no such frame was provided",
                frame.frame_index
            )));
        }
    }

    let mut results = Vec::new();
    for frame in &detections.frames {
        if frame.detections.is_empty() {
            continue;
        }
        let pair = by_index[&frame.frame_index];
        let prev_left = frame
            .frame_index
            .checked_sub(1)
            .and_then(|k| by_index.get(&k))
            .map(|p| &p.left);
        let analysis = analyze_frame(prev_left, pair, &frame.detections, config)?;
        results.extend(analysis.objects);
    }
    Ok(results)
}

/// Serialized per-object record in `analysis.json`. Carries the mask RLE so
/// downstream rendering needs no second input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzedObject {
    pub object_id: u32,
    pub class_name: String,
    pub score: f32,
    pub pixel_count: usize,
    pub valid_disparity_count: usize,
    pub mean_disparity: Option<f64>,
    pub mean_flow_x: f64,
    pub mean_flow_y: f64,
    pub movement_intensity: f64,
    pub has_flow: bool,
    pub labels: LabelSet,
    pub size: [usize; 2],
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFrame {
    pub frame_index: usize,
    pub objects: Vec<AnalyzedObject>,
}

/// The `analysis.json` document: per frame, per object, all observation
/// fields plus the four labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFile {
    pub frames: Vec<AnalysisFrame>,
}

impl AnalysisFile {
    /// Assembles the document from per-frame results and the originating
    /// detections (for score and mask passthrough). Frames absent from the
    /// detections file are skipped so the document mirrors it exactly.
    pub fn from_results(
        detections: &DetectionFile,
        results: &[FrameAnalysis],
    ) -> Result<AnalysisFile> {
        let mut frames = Vec::new();
        for analysis in results {
            let Some(det_frame) = detections.frame(analysis.frame_index) else {
                continue;
            };
            let dets: HashMap<u32, &InstanceMask> = det_frame
                .detections
                .iter()
                .map(|d| (d.object_id, d))
                .collect();
            let mut objects = Vec::new();
            for (obs, labels) in &analysis.objects {
                let det = dets.get(&obs.object_id).ok_or_else(|| {
                    Error::Internal(format!(
                        "analysis for unknown object {} in frame {}",
                        obs.object_id, obs.frame_index
                    ))
                })?;
                objects.push(AnalyzedObject {
                    object_id: obs.object_id,
                    class_name: obs.class_name.clone(),
                    score: det.score,
                    pixel_count: obs.pixel_count,
                    valid_disparity_count: obs.valid_disparity_count,
                    mean_disparity: obs.mean_disparity,
                    mean_flow_x: obs.mean_flow_x,
                    mean_flow_y: obs.mean_flow_y,
                    movement_intensity: obs.movement_intensity,
                    has_flow: obs.has_flow,
                    labels: *labels,
                    size: det.size,
                    rle: det.rle.clone(),
                });
            }
            frames.push(AnalysisFrame {
                frame_index: analysis.frame_index,
                objects,
            });
        }
        Ok(AnalysisFile { frames })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AnalysisFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AnalysisFile::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<AnalysisFile> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }
}
