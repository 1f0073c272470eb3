//! RGB overlay rendering: class tints over instance masks, label text
//! blocks, flow arrows, and the disparity/flow preview images. Everything is
//! integer/deterministic so re-runs are byte-identical.

use std::path::Path;

use obstacle_core::analysis::AnalyzedObject;
use obstacle_core::disparity::DisparityMap;
use obstacle_core::error::{Error, Result};
use obstacle_core::flow::FlowField;
use obstacle_core::image::ImageBuffer;

use crate::font;

/// Tint opacity over mask pixels.
const TINT_ALPHA: f32 = 0.4;
/// Flow arrow gain and length cap, pixels.
const ARROW_GAIN: f32 = 5.0;
const ARROW_MAX_LEN: f32 = 50.0;

pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Canvas {
    pub fn from_luminance(img: &ImageBuffer) -> Canvas {
        let mut data = Vec::with_capacity(img.width() * img.height() * 3);
        for &v in img.data() {
            let g = (v * 255.0).round() as u8;
            data.extend_from_slice(&[g, g, g]);
        }
        Canvas {
            width: img.width(),
            height: img.height(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[cfg(test)]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Out-of-bounds writes are silently discarded.
    pub fn set(&mut self, x: isize, y: isize, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn blend(&mut self, x: usize, y: usize, rgb: [u8; 3], alpha: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let base = self.data[i + c] as f32;
            self.data[i + c] = (base * (1.0 - alpha) + rgb[c] as f32 * alpha).round() as u8;
        }
    }

    pub fn draw_line(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, rgb: [u8; 3]) {
        // Bresenham.
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.set(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn draw_text(&mut self, x: isize, y: isize, text: &str, rgb: [u8; 3]) {
        let mut cx = x;
        for ch in text.chars() {
            let rows = font::glyph(ch);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..font::GLYPH_WIDTH {
                    if bits & (1 << (font::GLYPH_WIDTH - 1 - rx)) != 0 {
                        self.set(cx + rx as isize, y + ry as isize, rgb);
                    }
                }
            }
            cx += font::ADVANCE as isize;
        }
    }

    pub fn fill_rect(&mut self, x0: isize, y0: isize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..y0 + h as isize {
            for x in x0..x0 + w as isize {
                self.set(x, y, rgb);
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .ok_or_else(|| Error::Internal("canvas size mismatch".into()))?;
        img.save(path)
            .map_err(|e| Error::decode(path, format!("cannot encode png: {e}")))
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Deterministic per-class tint: FNV-1a hash of the class name to a hue.
pub fn class_tint(class_name: &str) -> [u8; 3] {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in class_name.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hsv_to_rgb((hash % 360) as f32, 0.85, 1.0)
}

fn draw_arrow(canvas: &mut Canvas, from: (f32, f32), vector: (f32, f32), rgb: [u8; 3]) {
    let norm = (vector.0 * vector.0 + vector.1 * vector.1).sqrt();
    if norm < 1.0 {
        return;
    }
    let scale = if norm > ARROW_MAX_LEN {
        ARROW_MAX_LEN / norm
    } else {
        1.0
    };
    let tip = (from.0 + vector.0 * scale, from.1 + vector.1 * scale);
    let round = |v: f32| v.round() as isize;
    canvas.draw_line(round(from.0), round(from.1), round(tip.0), round(tip.1), rgb);
    // Two head strokes at +-150 degrees of the shaft direction.
    let angle = vector.1.atan2(vector.0);
    for side in [-1.0f32, 1.0] {
        let a = angle + side * 2.618; // 150 degrees
        let hx = tip.0 + 4.0 * a.cos();
        let hy = tip.1 + 4.0 * a.sin();
        canvas.draw_line(round(tip.0), round(tip.1), round(hx), round(hy), rgb);
    }
}

/// Tints the object's mask, writes its label block above the bounding box,
/// and draws the mean-flow arrow from the mask centroid.
pub fn overlay_object(canvas: &mut Canvas, object: &AnalyzedObject) -> Result<()> {
    let mask = obstacle_core::mask::MaskRaster::from_rle(
        &object.rle,
        object.size[0],
        object.size[1],
    )?;
    if mask.width() != canvas.width() || mask.height() != canvas.height() {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs frame {}x{}",
            mask.width(),
            mask.height(),
            canvas.width(),
            canvas.height()
        )));
    }
    let tint = class_tint(&object.class_name);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                canvas.blend(x, y, tint, TINT_ALPHA);
            }
        }
    }

    let lines = [
        object.class_name.as_str(),
        object.labels.depth.as_str(),
        object.labels.x_dir.as_str(),
        object.labels.y_dir.as_str(),
        object.labels.intensity.as_str(),
    ];
    if let Some((x0, y0, _, _)) = mask.bbox() {
        let line_height = font::GLYPH_HEIGHT + 1;
        let block_height = lines.len() * line_height + 2;
        let block_width = lines
            .iter()
            .map(|l| l.chars().count() * font::ADVANCE)
            .max()
            .unwrap_or(0)
            + 2;
        // Above the bounding box; dropped inside when there is no headroom.
        let top = y0 as isize - block_height as isize - 1;
        let top = if top < 0 { y0 as isize + 1 } else { top };
        let left = x0 as isize;
        canvas.fill_rect(left, top, block_width, block_height, [0, 0, 0]);
        for (i, line) in lines.iter().enumerate() {
            canvas.draw_text(
                left + 1,
                top + 1 + (i * line_height) as isize,
                line,
                [255, 255, 255],
            );
        }
    }

    if object.has_flow {
        if let Some((cx, cy)) = mask.centroid() {
            draw_arrow(
                canvas,
                (cx as f32, cy as f32),
                (
                    object.mean_flow_x as f32 * ARROW_GAIN,
                    object.mean_flow_y as f32 * ARROW_GAIN,
                ),
                [0, 255, 0],
            );
        }
    }
    Ok(())
}

/// Colorized disparity preview: hue sweeps blue (far/zero) to red (d_max),
/// invalid pixels black.
pub fn disparity_preview(map: &DisparityMap) -> Canvas {
    let mut canvas = Canvas {
        width: map.width(),
        height: map.height(),
        data: vec![0u8; map.width() * map.height() * 3],
    };
    for y in 0..map.height() {
        for x in 0..map.width() {
            if let Some(d) = map.get(x, y) {
                let t = (d / map.d_max()).clamp(0.0, 1.0);
                let rgb = hsv_to_rgb(240.0 * (1.0 - t), 1.0, 1.0);
                canvas.set(x as isize, y as isize, rgb);
            }
        }
    }
    canvas
}

/// Flow preview: the frame with arrows on a fixed-stride grid.
pub fn flow_preview(base: &ImageBuffer, flow: &FlowField) -> Canvas {
    let stride = 16usize;
    let mut canvas = Canvas::from_luminance(base);
    for y in (stride / 2..flow.height()).step_by(stride) {
        for x in (stride / 2..flow.width()).step_by(stride) {
            let (u, v) = flow.get(x, y);
            draw_arrow(&mut canvas, (x as f32, y as f32), (u, v), [0, 255, 0]);
        }
    }
    canvas
}
