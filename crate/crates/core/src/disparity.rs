//! Dense disparity from a rectified stereo pair.
//!
//! Window-based matching: for every left pixel the sum of absolute
//! differences over a `(2r+1) x (2r+1)` window is minimized over candidate
//! disparities `[0, d_max]`, refined to subpixel precision with a parabolic
//! fit. Pixels are invalidated by a left-right consistency check, a texture
//! floor, and the left border rule (`x < d_max`).

use std::path::Path;

use crate::config::AnalysisConfig;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, StereoPair};

/// Per-pixel disparity plus validity mask. Invalid pixels carry disparity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    disparity: Vec<f32>,
    valid: Vec<bool>,
    /// Search limit the map was computed with; used for normalization.
    d_max: f32,
}

impl DisparityMap {
    pub fn new(
        width: usize,
        height: usize,
        disparity: Vec<f32>,
        valid: Vec<bool>,
        d_max: f32,
    ) -> Result<Self> {
        if disparity.len() != width * height || valid.len() != width * height {
            return Err(Error::Input(format!(
                "disparity/valid length does not match {width}x{height}"
            )));
        }
        for i in 0..disparity.len() {
            if valid[i] {
                if !(disparity[i] >= 0.0 && disparity[i] <= d_max) {
                    return Err(Error::Input(format!(
                        "valid disparity {} outside [0, {d_max}]",
                        disparity[i]
                    )));
                }
            } else if disparity[i] != 0.0 {
                return Err(Error::Input(
                    "invalid pixels must carry disparity 0".into(),
                ));
            }
        }
        Ok(DisparityMap {
            width,
            height,
            disparity,
            valid,
            d_max,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> f32 {
        self.d_max
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.disparity[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn disparities(&self) -> &[f32] {
        &self.disparity
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Box-filtered absolute-difference costs for one candidate disparity.
struct CostSlice {
    plane: Vec<f32>,
}

/// Replicated-edge box sum along rows, radius `r`.
fn box_sum_rows(src: &[f32], width: usize, height: usize, r: usize, dst: &mut [f32]) {
    let ri = r as isize;
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let clamp = |x: isize| row[x.clamp(0, width as isize - 1) as usize];
        let mut sum = 0.0f32;
        for k in -ri..=ri {
            sum += clamp(k);
        }
        let out = &mut dst[y * width..(y + 1) * width];
        out[0] = sum;
        for x in 1..width {
            let xi = x as isize;
            sum += clamp(xi + ri) - clamp(xi - 1 - ri);
            out[x] = sum;
        }
    }
}

/// Replicated-edge box sum along columns, radius `r`.
fn box_sum_cols(src: &[f32], width: usize, height: usize, r: usize, dst: &mut [f32]) {
    let ri = r as isize;
    let clamp_row = |y: isize| {
        let yc = y.clamp(0, height as isize - 1) as usize;
        &src[yc * width..(yc + 1) * width]
    };
    // Running column sums for the whole row at once.
    let mut sums = vec![0.0f32; width];
    for k in -ri..=ri {
        let row = clamp_row(k);
        for x in 0..width {
            sums[x] += row[x];
        }
    }
    dst[..width].copy_from_slice(&sums);
    for y in 1..height {
        let yi = y as isize;
        let add = clamp_row(yi + ri);
        let sub = clamp_row(yi - 1 - ri);
        for x in 0..width {
            sums[x] += add[x] - sub[x];
        }
        dst[y * width..(y + 1) * width].copy_from_slice(&sums);
    }
}

fn box_filter(src: &[f32], width: usize, height: usize, r: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; width * height];
    let mut out = vec![0.0f32; width * height];
    box_sum_rows(src, width, height, r, &mut tmp);
    box_sum_cols(&tmp, width, height, r, &mut out);
    out
}

/// SAD cost slice for candidate `d`. `flip` selects the matching direction:
/// `false` matches left pixel x against right pixel x-d (left-referenced),
/// `true` matches right pixel x against left pixel x+d (right-referenced).
fn cost_slice(
    reference: &ImageBuffer,
    target: &ImageBuffer,
    d: usize,
    r: usize,
    flip: bool,
) -> CostSlice {
    let (w, h) = (reference.width(), reference.height());
    let mut ad = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let tx = if flip {
                (x + d).min(w - 1)
            } else {
                x.saturating_sub(d)
            };
            ad[y * w + x] = (reference.get(x, y) - target.get(tx, y)).abs();
        }
    }
    CostSlice {
        plane: box_filter(&ad, w, h, r),
    }
}

/// Winner-take-all state folded across cost slices. Tracks the cost of the
/// slices adjacent to the winner for the parabolic refinement.
struct WtaState {
    best_cost: Vec<f32>,
    best_d: Vec<i32>,
    cost_before: Vec<f32>,
    cost_after: Vec<f32>,
}

impl WtaState {
    fn new(len: usize) -> Self {
        WtaState {
            best_cost: vec![f32::INFINITY; len],
            best_d: vec![-1; len],
            cost_before: vec![f32::NAN; len],
            cost_after: vec![f32::NAN; len],
        }
    }

    /// Folds candidate `d` over pixel range `xs` of each row. `prev` holds
    /// the cost slice of candidate `d-1`.
    fn fold(
        &mut self,
        slice: &CostSlice,
        prev: Option<&CostSlice>,
        d: usize,
        width: usize,
        height: usize,
        xs: std::ops::Range<usize>,
    ) {
        for y in 0..height {
            for x in xs.clone() {
                let i = y * width + x;
                let c = slice.plane[i];
                // Strict inequality: the smallest disparity wins ties.
                if c < self.best_cost[i] {
                    self.best_cost[i] = c;
                    self.best_d[i] = d as i32;
                    self.cost_before[i] = match prev {
                        Some(p) => p.plane[i],
                        None => f32::NAN,
                    };
                    self.cost_after[i] = f32::NAN;
                } else if self.best_d[i] == d as i32 - 1 {
                    self.cost_after[i] = c;
                }
            }
        }
    }

    /// Subpixel-refined disparity per pixel.
    fn refined(&self) -> Vec<f32> {
        self.best_d
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d < 0 {
                    return 0.0;
                }
                let c0 = self.best_cost[i];
                let cm = self.cost_before[i];
                let cp = self.cost_after[i];
                let mut offset = 0.0f32;
                if cm.is_finite() && cp.is_finite() {
                    let denom = cm - 2.0 * c0 + cp;
                    if denom > 0.0 {
                        offset = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                    }
                }
                d as f32 + offset
            })
            .collect()
    }
}

/// Raw winner-take-all disparity with subpixel refinement, no validity
/// filtering. Used for both view directions.
fn raw_disparity(
    reference: &ImageBuffer,
    target: &ImageBuffer,
    d_max: usize,
    r: usize,
    flip: bool,
) -> Vec<f32> {
    let (w, h) = (reference.width(), reference.height());
    let mut state = WtaState::new(w * h);
    let mut prev: Option<CostSlice> = None;
    for d in 0..=d_max {
        let slice = cost_slice(reference, target, d, r, flip);
        // Restrict to pixels whose matching sample stays in bounds.
        let xs = if flip { 0..w.saturating_sub(d) } else { d..w };
        state.fold(&slice, prev.as_ref(), d, w, h, xs);
        prev = Some(slice);
    }
    state.refined()
}

/// Dense disparity map for the left view of a rectified pair.
pub fn compute_disparity(pair: &StereoPair, config: &AnalysisConfig) -> Result<DisparityMap> {
    let left = &pair.left;
    let right = &pair.right;
    if !left.same_dimensions(right) {
        return Err(Error::Dimension(format!(
            "stereo pair {}x{} vs {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    let (w, h) = (left.width(), left.height());
    let d_max = config.d_max as usize;
    if d_max >= w {
        return Err(Error::Input(format!(
            "d_max {d_max} must be smaller than image width {w}"
        )));
    }
    let r = config.block_radius;

    let disp_left = raw_disparity(left, right, d_max, r, false);
    let disp_right = raw_disparity(right, left, d_max, r, true);

    // Texture floor: window variance of the left image.
    let squared: Vec<f32> = left.data().iter().map(|v| v * v).collect();
    let sum = box_filter(left.data(), w, h, r);
    let sum_sq = box_filter(&squared, w, h, r);
    let n = ((2 * r + 1) * (2 * r + 1)) as f32;

    let mut disparity = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x < d_max {
                continue;
            }
            let mean = sum[i] / n;
            let variance = (sum_sq[i] / n - mean * mean).max(0.0);
            if variance < config.min_texture {
                continue;
            }
            let d = disp_left[i];
            let xr = (x as f32 - d).round();
            let xr = (xr.max(0.0) as usize).min(w - 1);
            if (d - disp_right[y * w + xr]).abs() > config.lr_consistency_tau {
                continue;
            }
            disparity[i] = d;
            valid[i] = true;
        }
    }

    DisparityMap::new(w, h, disparity, valid, d_max as f32)
}

/// Renders the map as an intensity image: `d_max` maps to 1.0, zero and
/// invalid pixels to 0.0.
pub fn disparity_to_image(map: &DisparityMap) -> ImageBuffer {
    ImageBuffer::from_fn(map.width(), map.height(), |x, y| {
        map.get(x, y).map_or(0.0, |d| d / map.d_max())
    })
}

/// Writes the KITTI disparity convention: 16-bit grayscale PNG with
/// `value = round(disparity * 256)`, 0 reserved for invalid pixels. Valid
/// encodings are clamped to at least 1 so validity survives the round trip.
pub fn save_disparity_png(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = (0..map.width() * map.height())
        .map(|i| {
            if map.validity()[i] {
                let v = (map.disparities()[i] * 256.0).round();
                v.clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw)
            .ok_or_else(|| Error::Internal("disparity buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::decode(path, format!("cannot encode png: {e}")))
}

/// Reads a disparity PNG written by [`save_disparity_png`].
pub fn load_disparity_png(path: impl AsRef<Path>, d_max: f32) -> Result<DisparityMap> {
    let path = path.as_ref();
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let img = match decoded {
        image::DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::decode(
                path,
                format!(
                    "expected 16-bit grayscale disparity png, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut disparity = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    for (i, &v) in img.as_raw().iter().enumerate() {
        if v != 0 {
            disparity[i] = v as f32 / 256.0;
            valid[i] = true;
        }
    }
    DisparityMap::new(w, h, disparity, valid, d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AnalysisConfig;
    use crate::synth;

    fn small_config(d_max: u32) -> AnalysisConfig {
        AnalysisConfig {
            d_max,
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn identical_images_give_near_zero_disparity() {
        let img = synth::noise_image(64, 48, 7);
        let pair = StereoPair::new(img.clone(), img, 0).unwrap();
        let map = compute_disparity(&pair, &small_config(16)).unwrap();
        assert!(map.valid_count() > 500, "valid: {}", map.valid_count());
        for y in 0..48 {
            for x in 0..64 {
                if let Some(d) = map.get(x, y) {
                    assert!(d.abs() <= 0.5, "({x},{y}) -> {d}");
                }
            }
        }
    }

    #[test]
    fn constant_shift_recovered_within_half_pixel() {
        let pair = synth::constant_shift_stereo(96, 64, 5, 21);
        let cfg = small_config(16);
        let map = compute_disparity(&pair, &cfg).unwrap();
        let r = cfg.block_radius;
        let mut total = 0usize;
        let mut close = 0usize;
        for y in r..64 - r {
            for x in 16 + r..96 - r {
                if let Some(d) = map.get(x, y) {
                    total += 1;
                    if (d - 5.0).abs() <= 0.5 {
                        close += 1;
                    }
                }
            }
        }
        assert!(total > 1000, "only {total} valid interior pixels");
        let frac = close as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac:.3} within 0.5 px");
    }

    #[test]
    fn uniform_pair_has_no_valid_pixels() {
        let flat = ImageBuffer::from_fn(40, 30, |_, _| 0.5);
        let pair = StereoPair::new(flat.clone(), flat, 0).unwrap();
        let map = compute_disparity(&pair, &small_config(8)).unwrap();
        assert_eq!(map.valid_count(), 0);
    }

    #[test]
    fn left_border_columns_are_invalid() {
        let pair = synth::constant_shift_stereo(64, 32, 3, 3);
        let map = compute_disparity(&pair, &small_config(12)).unwrap();
        for y in 0..32 {
            for x in 0..12 {
                assert!(!map.is_valid(x, y), "({x},{y}) should be border-invalid");
            }
        }
    }

    #[test]
    fn valid_disparities_stay_in_range() {
        let pair = synth::constant_shift_stereo(80, 40, 9, 11);
        let cfg = small_config(24);
        let map = compute_disparity(&pair, &cfg).unwrap();
        for (i, &v) in map.validity().iter().enumerate() {
            if v {
                let d = map.disparities()[i];
                assert!((0.0..=24.0).contains(&d), "disparity {d} out of range");
            } else {
                assert_eq!(map.disparities()[i], 0.0);
            }
        }
    }

    #[test]
    fn left_right_consistency_holds_by_construction() {
        let pair = synth::constant_shift_stereo(72, 48, 4, 5);
        let cfg = small_config(16);
        let map = compute_disparity(&pair, &cfg).unwrap();
        let (w, h) = (72, 48);
        let disp_right = raw_disparity(
            &pair.right,
            &pair.left,
            cfg.d_max as usize,
            cfg.block_radius,
            true,
        );
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = map.get(x, y) {
                    let xr = ((x as f32 - d).round().max(0.0) as usize).min(w - 1);
                    let dr = disp_right[y * w + xr];
                    assert!(
                        (d - dr).abs() <= cfg.lr_consistency_tau,
                        "({x},{y}): {d} vs {dr}"
                    );
                }
            }
        }
    }

    #[test]
    fn shift_equivariance_on_synthetic_texture() {
        // The same scene cropped at two origins must agree on the overlap.
        let (w, h, s) = (80usize, 50usize, 6usize);
        let (dx, dy) = (3usize, 2usize);
        let canvas = synth::noise_image(w + s + dx, h + dy, 13);
        let crop = |ox: usize, oy: usize| {
            let left = ImageBuffer::from_fn(w, h, |x, y| canvas.get(x + ox, y + oy));
            let right = ImageBuffer::from_fn(w, h, |x, y| canvas.get(x + ox + s, y + oy));
            StereoPair::new(left, right, 0).unwrap()
        };
        let cfg = small_config(12);
        let map_a = compute_disparity(&crop(0, 0), &cfg).unwrap();
        let map_b = compute_disparity(&crop(dx, dy), &cfg).unwrap();
        let margin = cfg.d_max as usize + cfg.block_radius + dx.max(dy) + 1;
        for y in margin..h - margin - dy {
            for x in margin..w - margin - dx {
                let a = map_a.get(x + dx, y + dy);
                let b = map_b.get(x, y);
                // The sliding window sums accumulate in a different order per
                // crop, so agreement is to float tolerance, not bit-exact.
                match (a, b) {
                    (Some(da), Some(db)) => {
                        assert!((da - db).abs() <= 1e-4, "({x},{y}): {da} vs {db}")
                    }
                    (a, b) => assert_eq!(a, b, "validity mismatch at ({x},{y})"),
                }
            }
        }
    }

    #[test]
    fn monotone_shift_oracle() {
        for &s in &[1usize, 4, 16, 64] {
            let pair = synth::constant_shift_stereo(160, 64, s as u32, 100 + s as u64);
            let cfg = small_config(s as u32 + 8);
            let map = compute_disparity(&pair, &cfg).unwrap();
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for y in 0..64 {
                for x in 0..160 {
                    if let Some(d) = map.get(x, y) {
                        sum += d as f64;
                        n += 1;
                    }
                }
            }
            assert!(n > 100, "shift {s}: only {n} valid");
            let mean = sum / n as f64;
            assert!((mean - s as f64).abs() <= 0.5, "shift {s}: mean {mean}");
        }
    }

    #[test]
    fn determinism_across_runs() {
        let pair = synth::constant_shift_stereo(64, 48, 7, 99);
        let cfg = small_config(16);
        let a = compute_disparity(&pair, &cfg).unwrap();
        let b = compute_disparity(&pair, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn to_image_scaling() {
        let all_invalid = DisparityMap::new(4, 2, vec![0.0; 8], vec![false; 8], 64.0).unwrap();
        assert!(disparity_to_image(&all_invalid).data().iter().all(|&v| v == 0.0));

        let full = DisparityMap::new(4, 2, vec![64.0; 8], vec![true; 8], 64.0).unwrap();
        assert!(disparity_to_image(&full).data().iter().all(|&v| v == 1.0));

        let half = DisparityMap::new(4, 2, vec![32.0; 8], vec![true; 8], 64.0).unwrap();
        assert!(disparity_to_image(&half).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn kitti_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disp.png");
        let (w, h) = (23usize, 17usize);
        let mut disparity = vec![0.0f32; w * h];
        let mut valid = vec![false; w * h];
        for i in 0..w * h {
            if i % 3 != 0 {
                disparity[i] = (i % 97) as f32 * 0.625 + 0.5;
                valid[i] = true;
            }
        }
        let map = DisparityMap::new(w, h, disparity, valid, 64.0).unwrap();
        save_disparity_png(&map, &path).unwrap();
        let back = load_disparity_png(&path, 64.0).unwrap();
        assert_eq!(back.validity(), map.validity());
        for i in 0..w * h {
            assert!(
                (back.disparities()[i] - map.disparities()[i]).abs() <= 0.5 / 256.0,
                "pixel {i}: {} vs {}",
                back.disparities()[i],
                map.disparities()[i]
            );
        }
    }

    #[test]
    fn dmax_wider_than_image_rejected() {
        let img = synth::noise_image(32, 32, 1);
        let pair = StereoPair::new(img.clone(), img, 0).unwrap();
        let err = compute_disparity(&pair, &small_config(32)).unwrap_err();
        assert!(err.to_string().contains("d_max"));
    }
}
