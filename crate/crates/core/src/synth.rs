//! Deterministic synthetic scenes with analytically known disparity, flow,
//! masks and labels.
//!
//! Scenes are fronto-parallel: each actor is a textured rectangle at a
//! constant disparity moving with a constant velocity over a static
//! background, so the per-object ground truth (mean disparity = the scripted
//! disparity, mean flow = the scripted velocity) is exact. Textures are
//! seeded high-variance noise, lightly smoothed so both kernels are
//! well-conditioned.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{DepthLabel, IntensityLabel, LabelSet, XDirLabel, YDirLabel};
use crate::config::{AnalysisConfig, IntensityMetric, YSignConvention};
use crate::error::{Error, Result};
use crate::eval::{GroundTruthEntry, GroundTruthFile};
use crate::image::{ImageBuffer, StereoPair};
use crate::mask::{encode_rle, DetectionFile, FrameDetections, InstanceMask};

/// Splitmix-style seed mixing so script seeds and the render seed combine
/// deterministically.
fn mix_seed(a: u64, b: u64) -> u64 {
    a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeded multi-octave value noise: white noise at full resolution plus
/// bilinearly upscaled coarser octaves, one binomial smoothing pass, then a
/// contrast stretch. Multiple octaves give the texture structure at every
/// scale so coarse pyramid levels stay trackable, like natural images.
pub fn textured_image(width: usize, height: usize, seed: u64, octaves: usize) -> ImageBuffer {
    let mut acc = vec![0.0f32; width * height];
    for octave in 0..octaves.max(1) {
        let ow = (width >> octave).max(2);
        let oh = (height >> octave).max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, octave as u64));
        let small: Vec<f32> = (0..ow * oh).map(|_| rng.random::<f32>()).collect();
        let up = crate::flow::resize_plane(&small, ow, oh, width, height);
        for (a, b) in acc.iter_mut().zip(&up) {
            *a += b;
        }
    }
    let img = ImageBuffer::from_fn(width, height, |x, y| {
        acc[y * width + x] / octaves.max(1) as f32
    });
    let img = crate::flow::binomial_blur(&img);
    // Contrast stretch; averaging and smoothing shrink the range.
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in img.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return ImageBuffer::from_fn(width, height, |_, _| 0.5);
    }
    let scale = 0.96 / (hi - lo);
    ImageBuffer::from_fn(width, height, |x, y| 0.02 + (img.get(x, y) - lo) * scale)
}

/// Default texture: fine grain with a little coarse structure.
pub fn noise_image(width: usize, height: usize, seed: u64) -> ImageBuffer {
    textured_image(width, height, seed, 2)
}

/// Smooth blobby texture (features of roughly 20-30 px), for exercising a
/// single displacement step inside its linearization range.
pub fn low_frequency_image(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let ow = (width / 12).max(2);
    let oh = (height / 12).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small: Vec<f32> = (0..ow * oh).map(|_| rng.random::<f32>()).collect();
    let up = crate::flow::resize_plane(&small, ow, oh, width, height);
    let img = ImageBuffer::from_fn(width, height, |x, y| up[y * width + x]);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in img.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return ImageBuffer::from_fn(width, height, |_, _| 0.5);
    }
    let scale = 0.96 / (hi - lo);
    ImageBuffer::from_fn(width, height, |x, y| 0.02 + (img.get(x, y) - lo) * scale)
}

/// A frame pair where the whole scene translates by exactly `(dx, dy)`
/// pixels, rendered by cropping one larger canvas so the correspondence is
/// exact everywhere, borders included.
pub fn translated_pair(
    width: usize,
    height: usize,
    dx: i32,
    dy: i32,
    seed: u64,
    octaves: usize,
) -> (ImageBuffer, ImageBuffer) {
    let m = dx.unsigned_abs().max(dy.unsigned_abs()) as usize;
    let canvas = textured_image(width + 2 * m, height + 2 * m, seed, octaves);
    let crop = |ox: isize, oy: isize| {
        ImageBuffer::from_fn(width, height, |x, y| {
            canvas.get((x as isize + ox) as usize, (y as isize + oy) as usize)
        })
    };
    let prev = crop(m as isize, m as isize);
    let next = crop(m as isize - dx as isize, m as isize - dy as isize);
    (prev, next)
}

/// A stereo pair where every pixel has the same disparity `shift`:
/// `right(x) = left(x + shift)`, again cropped from one canvas.
pub fn constant_shift_stereo(width: usize, height: usize, shift: u32, seed: u64) -> StereoPair {
    let canvas = noise_image(width + shift as usize, height, seed);
    let left = ImageBuffer::from_fn(width, height, |x, y| canvas.get(x, y));
    let right = ImageBuffer::from_fn(width, height, |x, y| canvas.get(x + shift as usize, y));
    StereoPair::new(left, right, 0).expect("same dimensions by construction")
}

/// One scripted rectangle actor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorScript {
    pub object_id: u32,
    pub class_name: String,
    /// `[width, height]` in pixels.
    pub size: [u32; 2],
    /// Subpixel top-left corner at frame 0.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Constant disparity in pixels.
    pub disparity: f64,
    pub texture_seed: u64,
}

impl ActorScript {
    fn position(&self, frame: usize) -> (f64, f64) {
        (
            self.start[0] + frame as f64 * self.velocity[0],
            self.start[1] + frame as f64 * self.velocity[1],
        )
    }

    /// Integer pixel span covered at a frame: `[x0, x1) x [y0, y1)`.
    fn pixel_rect(&self, frame: usize) -> (i64, i64, i64, i64) {
        let (x, y) = self.position(frame);
        let x0 = x.ceil() as i64;
        let y0 = y.ceil() as i64;
        let x1 = (x + self.size[0] as f64).ceil() as i64;
        let y1 = (y + self.size[1] as f64).ceil() as i64;
        (x0, y0, x1, y1)
    }
}

/// A complete scene description, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub background_seed: u64,
    /// `key=value` overrides applied to the default [`AnalysisConfig`]; the
    /// scene's ground truth labels are defined under this config.
    #[serde(default)]
    pub config_overrides: BTreeMap<String, String>,
    pub actors: Vec<ActorScript>,
}

impl SceneScript {
    pub fn load(path: impl AsRef<Path>) -> Result<SceneScript> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SceneScript::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<SceneScript> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// The analysis config this scene's truth labels assume.
    pub fn config(&self) -> Result<AnalysisConfig> {
        let mut cfg = AnalysisConfig::default();
        for (key, value) in &self.config_overrides {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self, config: &AnalysisConfig) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return Err(Error::Input(
                "scene width, height and frame_count must be positive".into(),
            ));
        }
        let mut ids = std::collections::HashSet::new();
        for actor in &self.actors {
            if !ids.insert(actor.object_id) {
                return Err(Error::Input(format!(
                    "duplicate actor object_id {}",
                    actor.object_id
                )));
            }
            if actor.size[0] == 0 || actor.size[1] == 0 {
                return Err(Error::Input(format!(
                    "actor {}: size must be positive",
                    actor.object_id
                )));
            }
            if !(actor.disparity >= 1.0 && actor.disparity <= config.d_max as f64 - 1.0) {
                return Err(Error::Input(format!(
                    "actor {}: disparity {} outside [1, d_max-1]",
                    actor.object_id, actor.disparity
                )));
            }
            if actor.velocity[0].abs() > 16.0 || actor.velocity[1].abs() > 16.0 {
                return Err(Error::Input(format!(
                    "actor {}: velocity exceeds the pyramid capability (|v| <= 16)",
                    actor.object_id
                )));
            }
            let area = actor.size[0] as usize * actor.size[1] as usize;
            if area < config.min_valid_pixels {
                return Err(Error::Input(format!(
                    "actor {}: area {} below min_valid_pixels {}",
                    actor.object_id, area, config.min_valid_pixels
                )));
            }
            for frame in 0..self.frame_count {
                let (x, y) = actor.position(frame);
                let in_canvas = x >= 0.0
                    && y >= 0.0
                    && x + actor.size[0] as f64 <= self.width as f64
                    && y + actor.size[1] as f64 <= self.height as f64
                    && x - actor.disparity >= 0.0;
                if !in_canvas {
                    return Err(Error::Input(format!(
                        "actor {}: outside the canvas (or the right view) at frame {frame}",
                        actor.object_id
                    )));
                }
            }
        }
        // Reject occlusion: actors may not overlap in either view.
        for frame in 0..self.frame_count {
            for (i, a) in self.actors.iter().enumerate() {
                for b in &self.actors[i + 1..] {
                    let (ax, ay) = a.position(frame);
                    let (bx, by) = b.position(frame);
                    for (ax, bx) in [
                        (ax, bx),
                        (ax - a.disparity, bx - b.disparity),
                    ] {
                        let overlap_x = ax < bx + b.size[0] as f64
                            && bx < ax + a.size[0] as f64;
                        let overlap_y = ay < by + b.size[1] as f64
                            && by < ay + a.size[1] as f64;
                        if overlap_x && overlap_y {
                            return Err(Error::Input(format!(
                                "actors {} and {} overlap at frame {frame}",
                                a.object_id, b.object_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exact per-frame, per-actor aggregates and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEntry {
    pub frame_index: usize,
    pub object_id: u32,
    pub mean_disparity: f64,
    pub mean_flow: (f64, f64),
    pub has_flow: bool,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub entries: Vec<TruthEntry>,
}

impl SceneTruth {
    pub fn to_ground_truth(&self) -> GroundTruthFile {
        GroundTruthFile {
            entries: self
                .entries
                .iter()
                .map(|e| GroundTruthEntry {
                    frame_index: e.frame_index,
                    object_id: e.object_id,
                    depth: e.labels.depth,
                    x_dir: e.labels.x_dir,
                    y_dir: e.labels.y_dir,
                    intensity: e.labels.intensity,
                })
                .collect(),
        }
    }

    pub fn entry(&self, frame_index: usize, object_id: u32) -> Option<&TruthEntry> {
        self.entries
            .iter()
            .find(|e| e.frame_index == frame_index && e.object_id == object_id)
    }
}

/// Straight-line re-statement of the labeling rules, kept independent of the
/// analysis module's classifier; the two are cross-checked in tests.
pub fn label_from_aggregates(
    mean_disparity: Option<f64>,
    x_m: f64,
    y_m: f64,
    config: &AnalysisConfig,
) -> LabelSet {
    let depth = match mean_disparity {
        None => DepthLabel::Unknown,
        Some(d) => {
            let normalized = d / config.d_max as f64;
            let [t0, t1, t2] = config.depth_thresholds;
            if normalized >= t0 {
                DepthLabel::VeryClose
            } else if normalized >= t1 {
                DepthLabel::Close
            } else if normalized >= t2 {
                DepthLabel::Far
            } else {
                DepthLabel::VeryFar
            }
        }
    };

    let x_dir = if x_m.abs() <= config.dir_epsilon_x {
        XDirLabel::StableDirection
    } else if x_m > 0.0 {
        XDirLabel::LeftToRight
    } else {
        XDirLabel::RightToLeft
    };

    let down_is_approaching =
        matches!(config.y_sign_approaching, YSignConvention::DownIsApproaching);
    let y_dir = if y_m.abs() <= config.dir_epsilon_y {
        YDirLabel::StableDistance
    } else if (y_m > 0.0) == down_is_approaching {
        YDirLabel::Approaching
    } else {
        YDirLabel::MovingAway
    };

    let vl = match config.intensity_metric {
        IntensityMetric::Product => (x_m * y_m).abs(),
        IntensityMetric::Euclidean => x_m.hypot(y_m),
    };
    let [c0, c1, c2, c3] = config.intensity_thresholds;
    let intensity = if vl < c0 {
        IntensityLabel::Stopped
    } else if vl < c1 {
        IntensityLabel::Slow
    } else if vl < c2 {
        IntensityLabel::AverageSpeed
    } else if vl < c3 {
        IntensityLabel::Fast
    } else {
        IntensityLabel::VeryFast
    };

    LabelSet {
        depth,
        x_dir,
        y_dir,
        intensity,
    }
}

/// Labels every (frame, actor) cell from the exact analytic aggregates,
/// bypassing all kernels. Frame 0 has no flow and carries `(0, 0)`.
pub fn truth_labels(script: &SceneScript, config: &AnalysisConfig) -> Result<SceneTruth> {
    script.validate(config)?;
    let mut actors: Vec<&ActorScript> = script.actors.iter().collect();
    actors.sort_by_key(|a| a.object_id);
    let mut entries = Vec::new();
    for frame in 0..script.frame_count {
        for actor in &actors {
            let has_flow = frame > 0;
            let (x_m, y_m) = if has_flow {
                (actor.velocity[0], actor.velocity[1])
            } else {
                (0.0, 0.0)
            };
            entries.push(TruthEntry {
                frame_index: frame,
                object_id: actor.object_id,
                mean_disparity: actor.disparity,
                mean_flow: (x_m, y_m),
                has_flow,
                labels: label_from_aggregates(Some(actor.disparity), x_m, y_m, config),
            });
        }
    }
    Ok(SceneTruth { entries })
}

/// Everything a rendered scene produces.
#[derive(Debug, Clone)]
pub struct SceneOutputs {
    pub frames: Vec<StereoPair>,
    pub detections: DetectionFile,
    pub truth: GroundTruthFile,
    pub truth_detail: SceneTruth,
    pub config: AnalysisConfig,
}

/// Renders the scripted scene: textured background, actors stamped at their
/// per-frame positions (shifted left by their disparity in the right view),
/// exact masks, and analytic ground truth. Fully deterministic in
/// `(script, seed)`.
pub fn render_scene(script: &SceneScript, seed: u64) -> Result<SceneOutputs> {
    let config = script.config()?;
    script.validate(&config)?;

    let background = textured_image(
        script.width,
        script.height,
        mix_seed(script.background_seed, seed),
        3,
    );
    // Per-actor texture tiles with a one-pixel apron for bilinear sampling.
    let tiles: BTreeMap<u32, ImageBuffer> = script
        .actors
        .iter()
        .map(|a| {
            (
                a.object_id,
                textured_image(
                    a.size[0] as usize + 2,
                    a.size[1] as usize + 2,
                    mix_seed(a.texture_seed, seed),
                    3,
                ),
            )
        })
        .collect();

    let mut actors: Vec<&ActorScript> = script.actors.iter().collect();
    actors.sort_by_key(|a| a.object_id);

    let mut frames = Vec::with_capacity(script.frame_count);
    let mut det_frames = Vec::with_capacity(script.frame_count);
    for frame in 0..script.frame_count {
        let mut left: Vec<f32> = background.data().to_vec();
        let mut right: Vec<f32> = background.data().to_vec();
        let mut detections = Vec::new();
        for actor in &actors {
            let tile = &tiles[&actor.object_id];
            let (ax, ay) = actor.position(frame);
            let (x0, y0, x1, y1) = actor.pixel_rect(frame);
            let mut mask = vec![false; script.width * script.height];
            for py in y0..y1 {
                for px in x0..x1 {
                    let value = tile.sample_bilinear(
                        (px as f64 - ax + 1.0) as f32,
                        (py as f64 - ay + 1.0) as f32,
                    );
                    left[py as usize * script.width + px as usize] = value;
                    mask[py as usize * script.width + px as usize] = true;
                }
            }
            // Right view: the actor sits `disparity` pixels to the left.
            let rx = ax - actor.disparity;
            let rx0 = rx.ceil() as i64;
            let rx1 = (rx + actor.size[0] as f64).ceil() as i64;
            for py in y0..y1 {
                for px in rx0..rx1 {
                    let value = tile.sample_bilinear(
                        (px as f64 - rx + 1.0) as f32,
                        (py as f64 - ay + 1.0) as f32,
                    );
                    right[py as usize * script.width + px as usize] = value;
                }
            }
            detections.push(InstanceMask {
                object_id: actor.object_id,
                class_name: actor.class_name.clone(),
                score: 1.0,
                size: [script.height, script.width],
                rle: encode_rle(&mask, script.height, script.width)?,
            });
        }
        frames.push(StereoPair::new(
            ImageBuffer::new(script.width, script.height, left)?,
            ImageBuffer::new(script.width, script.height, right)?,
            frame,
        )?);
        det_frames.push(FrameDetections {
            frame_index: frame,
            detections,
        });
    }

    let detections = DetectionFile { frames: det_frames };
    detections.validate()?;
    let truth_detail = truth_labels(script, &config)?;
    Ok(SceneOutputs {
        frames,
        detections,
        truth: truth_detail.to_ground_truth(),
        truth_detail,
        config,
    })
}

/// Small static one-actor scene used across the test suites.
pub fn single_actor_scene(frame_count: usize) -> SceneScript {
    SceneScript {
        width: 128,
        height: 96,
        frame_count,
        background_seed: 42,
        config_overrides: [("d_max".to_string(), "32".to_string())].into(),
        actors: vec![ActorScript {
            object_id: 1,
            class_name: "car".into(),
            size: [48, 36],
            start: [64.0, 30.0],
            velocity: [0.0, 0.0],
            disparity: 16.0,
            texture_seed: 9,
        }],
    }
}
