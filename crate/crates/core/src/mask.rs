//! Instance segmentation ingest: `detections.json` parsing and the
//! uncompressed RLE mask codec.
//!
//! Masks use the COCO uncompressed-RLE convention: counts run down columns
//! (column-major), alternating background/foreground with background first.
//! An all-background 4x4 mask is `[16]`, an all-foreground one is `[0, 16]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One detected object in one frame, mask kept run-length encoded.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMask {
    pub object_id: u32,
    pub class_name: String,
    pub score: f32,
    /// `[height, width]` of the frame the mask was produced for.
    pub size: [usize; 2],
    pub rle: Vec<u32>,
}

impl InstanceMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Decodes into a dense binary raster. Masks are stored encoded and
    /// decoded on demand.
    pub fn decode(&self) -> Result<MaskRaster> {
        MaskRaster::from_rle(&self.rle, self.height(), self.width())
    }

    fn validate(&self, frame_index: usize) -> Result<()> {
        let ctx = format!("frame {frame_index}, object {}", self.object_id);
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Schema(format!(
                "{ctx}: score {} outside [0, 1]",
                self.score
            )));
        }
        if self.size[0] == 0 || self.size[1] == 0 {
            return Err(Error::Schema(format!("{ctx}: empty mask size")));
        }
        let sum: u64 = self.rle.iter().map(|&c| c as u64).sum();
        let area = (self.size[0] * self.size[1]) as u64;
        if sum != area {
            return Err(Error::Schema(format!(
                "{ctx}: rle counts sum to {sum}, expected {area}"
            )));
        }
        // Foreground runs are the odd-indexed counts.
        let fg: u64 = self
            .rle
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum();
        if fg == 0 {
            return Err(Error::Schema(format!("{ctx}: mask has no foreground pixels")));
        }
        Ok(())
    }
}

/// Dense binary mask, row-major like every other raster in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl MaskRaster {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(MaskRaster {
            width,
            height,
            data,
        })
    }

    pub fn from_rle(counts: &[u32], height: usize, width: usize) -> Result<Self> {
        let data = decode_rle(counts, height, width)?;
        Ok(MaskRaster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the foreground, if any.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Mean foreground pixel coordinate.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Decodes column-major background-first RLE counts into a row-major raster.
pub fn decode_rle(counts: &[u32], height: usize, width: usize) -> Result<Vec<bool>> {
    let area = height * width;
    let sum: u64 = counts.iter().map(|&c| c as u64).sum();
    if sum != area as u64 {
        return Err(Error::Input(format!(
            "rle counts sum to {sum}, expected {area} for {height}x{width}"
        )));
    }
    let mut raster = vec![false; area];
    let mut pos = 0usize;
    let mut foreground = false;
    for &count in counts {
        if foreground {
            for p in pos..pos + count as usize {
                let row = p % height;
                let col = p / height;
                raster[row * width + col] = true;
            }
        }
        pos += count as usize;
        foreground = !foreground;
    }
    Ok(raster)
}

/// Encodes a row-major raster into canonical column-major RLE counts:
/// background first (a leading 0 if the first pixel is foreground), no other
/// zero-length runs.
pub fn encode_rle(raster: &[bool], height: usize, width: usize) -> Result<Vec<u32>> {
    if raster.len() != height * width {
        return Err(Error::Input(format!(
            "raster length {} does not match {height}x{width}",
            raster.len()
        )));
    }
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for p in 0..height * width {
        let row = p % height;
        let col = p / height;
        let bit = raster[row * width + col];
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    Ok(counts)
}

/// All detections of a sequence, grouped per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<InstanceMask>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub frames: Vec<FrameDetections>,
}

impl DetectionFile {
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        for frame in &self.frames {
            if let Some(p) = prev {
                if frame.frame_index <= p {
                    return Err(Error::Schema(format!(
                        "frame indices must be strictly increasing, {} follows {p}",
                        frame.frame_index
                    )));
                }
            }
            prev = Some(frame.frame_index);
            let mut ids = std::collections::HashSet::new();
            for det in &frame.detections {
                if !ids.insert(det.object_id) {
                    return Err(Error::Schema(format!(
                        "frame {}: duplicate object_id {}",
                        frame.frame_index, det.object_id
                    )));
                }
                det.validate(frame.frame_index)?;
            }
        }
        Ok(())
    }

    pub fn frame(&self, frame_index: usize) -> Option<&FrameDetections> {
        self.frames.iter().find(|f| f.frame_index == frame_index)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Parses and validates a `detections.json` file.
pub fn parse_detections(path: impl AsRef<Path>) -> Result<DetectionFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_str(&text)
}

pub fn parse_detections_str(text: &str) -> Result<DetectionFile> {
    let file: DetectionFile =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    file.validate()?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference codec: expand counts into a column-major bit vector, then
    /// transpose. Kept deliberately naive.
    fn decode_reference(counts: &[u32], height: usize, width: usize) -> Vec<bool> {
        let mut colmajor = Vec::with_capacity(height * width);
        let mut fg = false;
        for &c in counts {
            colmajor.extend(std::iter::repeat(fg).take(c as usize));
            fg = !fg;
        }
        assert_eq!(colmajor.len(), height * width);
        let mut raster = vec![false; height * width];
        for (p, bit) in colmajor.iter().enumerate() {
            raster[(p % height) * width + p / height] = *bit;
        }
        raster
    }

    #[test]
    fn all_background_and_all_foreground() {
        assert_eq!(decode_rle(&[16], 4, 4).unwrap(), vec![false; 16]);
        assert_eq!(decode_rle(&[0, 16], 4, 4).unwrap(), vec![true; 16]);
    }

    #[test]
    fn four_by_four_counts_6_4_6() {
        let raster = decode_rle(&[6, 4, 6], 4, 4).unwrap();
        // Column-major positions 6..10 are foreground.
        let expected_positions: Vec<(usize, usize)> = vec![(2, 1), (3, 1), (0, 2), (1, 2)];
        for row in 0..4 {
            for col in 0..4 {
                let expect = expected_positions.contains(&(row, col));
                assert_eq!(raster[row * 4 + col], expect, "row {row} col {col}");
            }
        }
        assert_eq!(raster.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn sum_mismatch_rejected() {
        assert!(decode_rle(&[6, 4, 5], 4, 4).is_err());
    }

    #[test]
    fn exhaustive_3x3_round_trip_against_reference() {
        for bits in 0..512u32 {
            let raster: Vec<bool> = (0..9).map(|i| bits & (1 << i) != 0).collect();
            let counts = encode_rle(&raster, 3, 3).unwrap();
            assert_eq!(decode_rle(&counts, 3, 3).unwrap(), raster, "bits {bits:#b}");
            assert_eq!(decode_reference(&counts, 3, 3), raster, "bits {bits:#b}");
            // Canonical form: no interior zero runs.
            for (i, &c) in counts.iter().enumerate() {
                assert!(c > 0 || i == 0, "non-leading zero run in {counts:?}");
            }
        }
    }

    #[test]
    fn parse_empty_frames_is_valid() {
        let file = parse_detections_str(r#"{"frames":[]}"#).unwrap();
        assert!(file.frames.is_empty());
    }

    #[test]
    fn parse_one_mask() {
        let text = r#"{"frames":[{"frame_index":0,"detections":[
            {"object_id":1,"class_name":"car","score":0.9,"size":[4,4],"rle":[6,4,6]}
        ]}]}"#;
        let file = parse_detections_str(text).unwrap();
        let mask = file.frames[0].detections[0].decode().unwrap();
        assert_eq!(mask.area(), 4);
        assert!(mask.get(1, 2));
    }

    #[test]
    fn rle_sum_mismatch_rejected_at_parse() {
        let text = r#"{"frames":[{"frame_index":0,"detections":[
            {"object_id":1,"class_name":"car","score":0.9,"size":[4,4],"rle":[6,4,5]}
        ]}]}"#;
        let err = parse_detections_str(text).unwrap_err();
        assert!(err.to_string().contains("rle counts sum"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = r#"{"frames":[],"extra":1}"#;
        assert!(parse_detections_str(text).is_err());
    }

    #[test]
    fn duplicate_object_id_rejected() {
        let text = r#"{"frames":[{"frame_index":0,"detections":[
            {"object_id":1,"class_name":"car","score":0.9,"size":[2,2],"rle":[0,4]},
            {"object_id":1,"class_name":"bus","score":0.8,"size":[2,2],"rle":[0,4]}
        ]}]}"#;
        let err = parse_detections_str(text).unwrap_err();
        assert!(err.to_string().contains("duplicate object_id"), "{err}");
    }

    #[test]
    fn non_increasing_frames_rejected() {
        let text = r#"{"frames":[{"frame_index":1,"detections":[]},{"frame_index":1,"detections":[]}]}"#;
        let err = parse_detections_str(text).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn empty_mask_rejected() {
        let text = r#"{"frames":[{"frame_index":0,"detections":[
            {"object_id":1,"class_name":"car","score":0.9,"size":[2,2],"rle":[4]}
        ]}]}"#;
        let err = parse_detections_str(text).unwrap_err();
        assert!(err.to_string().contains("no foreground"), "{err}");
    }

    #[test]
    fn bbox_and_centroid() {
        let raster = decode_rle(&[6, 4, 6], 4, 4).unwrap();
        let mask = MaskRaster::new(4, 4, raster).unwrap();
        assert_eq!(mask.bbox(), Some((1, 0, 2, 3)));
        let (cx, cy) = mask.centroid().unwrap();
        assert!((cx - 1.5).abs() < 1e-12);
        assert!((cy - 1.5).abs() < 1e-12);
    }
}
