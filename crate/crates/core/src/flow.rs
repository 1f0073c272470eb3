//! Dense two-frame optical flow via per-pixel quadratic polynomial
//! expansion, displacement from coefficient algebra, and a coarse-to-fine
//! pyramid with iterative refinement.
//!
//! Each image is locally modeled as `f(x0 + d) ~ c + b.d + d' A d` under a
//! Gaussian applicability window. For two frames related by a displacement,
//! the coefficients satisfy `A d = -(b2 - b1)/2`; the per-pixel normal
//! equations are aggregated over a box window before solving, and an a
//! priori displacement enters by sampling the second frame's coefficients at
//! the warped position. Borders are handled by edge replication throughout.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::AnalysisConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Magic bytes of the Middlebury flow format (the float 202021.25).
const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Per-pixel 2-vector displacement field. `u` is horizontal (positive =
/// rightward), `v` vertical (positive = downward), both in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::Input(format!(
                "flow component length does not match {width}x{height}"
            )));
        }
        if u.iter().chain(&v).any(|val| !val.is_finite()) {
            return Err(Error::Input("flow values must be finite".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    /// Largest absolute component over the whole field.
    pub fn max_abs(&self) -> f32 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f32, |m, &val| m.max(val.abs()))
    }
}

/// Per-pixel coefficients of the local quadratic model
/// `f(x0 + d) ~ c + b.d + d' A d` with `A = [[a_xx, a_xy], [a_xy, a_yy]]`.
/// Symmetry of `A` holds by representation.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    width: usize,
    height: usize,
    a_xx: Vec<f32>,
    a_yy: Vec<f32>,
    a_xy: Vec<f32>,
    b_x: Vec<f32>,
    b_y: Vec<f32>,
    c: Vec<f32>,
}

impl PolyExpansion {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Coefficients at a pixel: `(A, b, c)` with `A = [[xx, xy], [xy, yy]]`.
    pub fn coefficients(&self, x: usize, y: usize) -> ([[f32; 2]; 2], [f32; 2], f32) {
        let i = y * self.width + x;
        (
            [[self.a_xx[i], self.a_xy[i]], [self.a_xy[i], self.a_yy[i]]],
            [self.b_x[i], self.b_y[i]],
            self.c[i],
        )
    }
}

/// Kernel/algorithm parameters for [`compute_flow`], drawn from
/// [`AnalysisConfig`].
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f32,
    pub window_radius: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f32,
}

impl FlowParams {
    pub fn from_config(config: &AnalysisConfig) -> Self {
        FlowParams {
            pyramid_levels: config.pyramid_levels,
            pyramid_scale: config.pyramid_scale,
            window_radius: config.window_radius,
            iterations: config.iterations,
            poly_n: config.poly_n,
            poly_sigma: config.poly_sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.iterations == 0 || self.window_radius == 0 {
            return Err(Error::Input(
                "pyramid_levels, iterations and window_radius must be >= 1".into(),
            ));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Input("pyramid_scale must lie in (0, 1)".into()));
        }
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return Err(Error::Input("poly_n must be odd and >= 3".into()));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::Input("poly_sigma must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams::from_config(&AnalysisConfig::default())
    }
}

/// Correlation along rows with edge replication: `out(x) = sum_t f(x+t) k[t+m]`.
fn correlate_rows(src: &[f32], width: usize, height: usize, kernel: &[f32]) -> Vec<f32> {
    let m = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0f32;
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - m).clamp(0, width as isize - 1) as usize;
                acc += row[sx] * k;
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Correlation along columns with edge replication.
fn correlate_cols(src: &[f32], width: usize, height: usize, kernel: &[f32]) -> Vec<f32> {
    let m = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        for (ki, &k) in kernel.iter().enumerate() {
            let sy = (y as isize + ki as isize - m).clamp(0, height as isize - 1) as usize;
            let srow = &src[sy * width..(sy + 1) * width];
            let orow = &mut out[y * width..(y + 1) * width];
            for x in 0..width {
                orow[x] += srow[x] * k;
            }
        }
    }
    out
}

/// Weighted least-squares quadratic fit at every pixel with Gaussian
/// applicability of scale `poly_sigma` over a `poly_n` window.
pub fn poly_expand(img: &ImageBuffer, poly_n: usize, poly_sigma: f32) -> Result<PolyExpansion> {
    if poly_n < 3 || poly_n % 2 == 0 {
        return Err(Error::Input("poly_n must be odd and >= 3".into()));
    }
    if !(poly_sigma > 0.0) {
        return Err(Error::Input("poly_sigma must be > 0".into()));
    }
    let (w, h) = (img.width(), img.height());
    if w < poly_n || h < poly_n {
        return Err(Error::Input(format!(
            "image {w}x{h} smaller than polynomial window {poly_n}"
        )));
    }
    let m = (poly_n as isize - 1) / 2;

    // 1-D applicability and moment kernels.
    let mut k0 = Vec::with_capacity(poly_n);
    let mut k1 = Vec::with_capacity(poly_n);
    let mut k2 = Vec::with_capacity(poly_n);
    let sigma2 = (poly_sigma as f64) * (poly_sigma as f64);
    let mut norm = 0.0f64;
    for t in -m..=m {
        norm += (-((t * t) as f64) / (2.0 * sigma2)).exp();
    }
    for t in -m..=m {
        let g = (-((t * t) as f64) / (2.0 * sigma2)).exp() / norm;
        k0.push(g as f32);
        k1.push((t as f64 * g) as f32);
        k2.push(((t * t) as f64 * g) as f32);
    }

    // Gram matrix scalars; the separable weights make it the same at every
    // pixel. q_k are the 1-D moments of the applicability.
    let q0: f64 = k0.iter().map(|&v| v as f64).sum();
    let q2: f64 = k2.iter().map(|&v| v as f64).sum();
    let q4: f64 = (-m..=m)
        .zip(&k0)
        .map(|(t, &g)| ((t * t * t * t) as f64) * g as f64)
        .sum();
    let s0 = q0 * q0;
    let s2 = q2 * q0;
    let s4 = q4 * q0;
    let s22 = q2 * q2;

    // Projections onto the six basis functions via separable correlations.
    let r0 = correlate_rows(img.data(), w, h, &k0);
    let r1 = correlate_rows(img.data(), w, h, &k1);
    let r2 = correlate_rows(img.data(), w, h, &k2);
    let p1 = correlate_cols(&r0, w, h, &k0);
    let px = correlate_cols(&r1, w, h, &k0);
    let py = correlate_cols(&r0, w, h, &k1);
    let pxx = correlate_cols(&r2, w, h, &k0);
    let pyy = correlate_cols(&r0, w, h, &k2);
    let pxy = correlate_cols(&r1, w, h, &k1);

    // Closed-form solve. b_x, b_y and the xy term decouple; (c, f_xx, f_yy)
    // reduce to a symmetric 2x2 system in c and f_xx + f_yy.
    let det_cs = s0 * (s4 + s22) - 2.0 * s2 * s2;
    let diff = s4 - s22;
    if det_cs.abs() < 1e-30 || diff.abs() < 1e-30 {
        return Err(Error::Internal(
            "degenerate polynomial expansion basis".into(),
        ));
    }

    let n = w * h;
    let mut exp = PolyExpansion {
        width: w,
        height: h,
        a_xx: vec![0.0; n],
        a_yy: vec![0.0; n],
        a_xy: vec![0.0; n],
        b_x: vec![0.0; n],
        b_y: vec![0.0; n],
        c: vec![0.0; n],
    };
    for i in 0..n {
        let v1 = p1[i] as f64;
        let vxx = pxx[i] as f64;
        let vyy = pyy[i] as f64;
        let sum_q = vxx + vyy;
        let c = ((s4 + s22) * v1 - s2 * sum_q) / det_cs;
        let p = (s0 * sum_q - 2.0 * s2 * v1) / det_cs;
        let q = (vxx - vyy) / diff;
        exp.c[i] = c as f32;
        exp.a_xx[i] = (0.5 * (p + q)) as f32;
        exp.a_yy[i] = (0.5 * (p - q)) as f32;
        exp.a_xy[i] = (0.5 * (pxy[i] as f64) / s22) as f32;
        exp.b_x[i] = (px[i] as f64 / s2) as f32;
        exp.b_y[i] = (py[i] as f64 / s2) as f32;
    }
    Ok(exp)
}

#[inline]
fn plane_bilinear(plane: &[f32], width: usize, height: usize, x: f32, y: f32) -> f32 {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let clamp = |xi: isize, yi: isize| {
        let xc = xi.clamp(0, width as isize - 1) as usize;
        let yc = yi.clamp(0, height as isize - 1) as usize;
        plane[yc * width + xc]
    };
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let v00 = clamp(x0, y0);
    let v10 = clamp(x0 + 1, y0);
    let v01 = clamp(x0, y0 + 1);
    let v11 = clamp(x0 + 1, y0 + 1);
    let top = v00 + fx * (v10 - v00);
    let bottom = v01 + fx * (v11 - v01);
    top + fy * (bottom - top)
}

/// Box sums over a `(2r+1)^2` window with edge replication, in place over
/// several planes.
fn box_sum_planes(planes: &mut [Vec<f32>], width: usize, height: usize, r: usize) {
    let ri = r as isize;
    for plane in planes.iter_mut() {
        // Rows.
        let mut tmp = vec![0.0f32; width * height];
        for y in 0..height {
            let row = &plane[y * width..(y + 1) * width];
            let clamp = |x: isize| row[x.clamp(0, width as isize - 1) as usize];
            let mut sum = 0.0f32;
            for k in -ri..=ri {
                sum += clamp(k);
            }
            tmp[y * width] = sum;
            for x in 1..width {
                let xi = x as isize;
                sum += clamp(xi + ri) - clamp(xi - 1 - ri);
                tmp[y * width + x] = sum;
            }
        }
        // Columns.
        let clamp_row = |y: isize| {
            let yc = y.clamp(0, height as isize - 1) as usize;
            &tmp[yc * width..(yc + 1) * width]
        };
        let mut sums = vec![0.0f32; width];
        for k in -ri..=ri {
            let row = clamp_row(k);
            for x in 0..width {
                sums[x] += row[x];
            }
        }
        plane[..width].copy_from_slice(&sums);
        for y in 1..height {
            let yi = y as isize;
            let add = clamp_row(yi + ri);
            let sub = clamp_row(yi - 1 - ri);
            for x in 0..width {
                sums[x] += add[x] - sub[x];
            }
            plane[y * width..(y + 1) * width].copy_from_slice(&sums);
        }
    }
}

/// One displacement update: solves the aggregated normal equations of
/// `A d = -(b2 - b1)/2` per pixel, sampling the `next` expansion at positions
/// warped by the prior. Near-singular systems keep the prior displacement.
pub fn flow_step(
    prev: &PolyExpansion,
    next: &PolyExpansion,
    prior: &FlowField,
    window_radius: usize,
) -> Result<FlowField> {
    let (w, h) = (prev.width, prev.height);
    if next.width != w || next.height != h || prior.width != w || prior.height != h {
        return Err(Error::Dimension(format!(
            "flow_step inputs disagree: prev {}x{}, next {}x{}, prior {}x{}",
            w, h, next.width, next.height, prior.width, prior.height
        )));
    }

    let n = w * h;
    let mut g11 = vec![0.0f32; n];
    let mut g12 = vec![0.0f32; n];
    let mut g22 = vec![0.0f32; n];
    let mut h1 = vec![0.0f32; n];
    let mut h2 = vec![0.0f32; n];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let du = prior.u[i];
            let dv = prior.v[i];
            let fx = x as f32 + du;
            let fy = y as f32 + dv;

            let a_xx2 = plane_bilinear(&next.a_xx, w, h, fx, fy);
            let a_yy2 = plane_bilinear(&next.a_yy, w, h, fx, fy);
            let a_xy2 = plane_bilinear(&next.a_xy, w, h, fx, fy);
            let b_x2 = plane_bilinear(&next.b_x, w, h, fx, fy);
            let b_y2 = plane_bilinear(&next.b_y, w, h, fx, fy);

            let a11 = 0.5 * (prev.a_xx[i] + a_xx2);
            let a12 = 0.5 * (prev.a_xy[i] + a_xy2);
            let a22 = 0.5 * (prev.a_yy[i] + a_yy2);

            // The prior term keeps the solved displacement total, not
            // incremental.
            let db1 = -0.5 * (b_x2 - prev.b_x[i]) + a11 * du + a12 * dv;
            let db2 = -0.5 * (b_y2 - prev.b_y[i]) + a12 * du + a22 * dv;

            g11[i] = a11 * a11 + a12 * a12;
            g12[i] = a12 * (a11 + a22);
            g22[i] = a12 * a12 + a22 * a22;
            h1[i] = a11 * db1 + a12 * db2;
            h2[i] = a12 * db1 + a22 * db2;
        }
    }

    {
        let mut planes = [g11, g12, g22, h1, h2];
        box_sum_planes(&mut planes, w, h, window_radius);
        let [pg11, pg12, pg22, ph1, ph2] = planes;
        g11 = pg11;
        g12 = pg12;
        g22 = pg22;
        h1 = ph1;
        h2 = ph2;
    }

    let mut u = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    for i in 0..n {
        let det = g11[i] as f64 * g22[i] as f64 - g12[i] as f64 * g12[i] as f64;
        let trace = g11[i] as f64 + g22[i] as f64;
        if det <= 1e-9 * trace * trace {
            u[i] = prior.u[i];
            v[i] = prior.v[i];
        } else {
            u[i] = ((g22[i] as f64 * h1[i] as f64 - g12[i] as f64 * h2[i] as f64) / det) as f32;
            v[i] = ((g11[i] as f64 * h2[i] as f64 - g12[i] as f64 * h1[i] as f64) / det) as f32;
        }
    }
    FlowField::new(w, h, u, v)
}

/// 5-tap binomial blur ([1 4 6 4 1]/16), separable, edge replication.
pub(crate) fn binomial_blur(img: &ImageBuffer) -> ImageBuffer {
    let kernel = [1.0f32 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width(), img.height());
    let tmp = correlate_rows(img.data(), w, h, &kernel);
    let out = correlate_cols(&tmp, w, h, &kernel);
    ImageBuffer::from_fn(w, h, |x, y| out[y * w + x])
}

/// Bilinear resample with center alignment.
pub(crate) fn resize_plane(
    src: &[f32],
    sw: usize,
    sh: usize,
    dw: usize,
    dh: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; dw * dh];
    let sx_ratio = sw as f32 / dw as f32;
    let sy_ratio = sh as f32 / dh as f32;
    for y in 0..dh {
        let sy = (y as f32 + 0.5) * sy_ratio - 0.5;
        for x in 0..dw {
            let sx = (x as f32 + 0.5) * sx_ratio - 0.5;
            out[y * dw + x] = plane_bilinear(src, sw, sh, sx, sy);
        }
    }
    out
}

fn downsample(img: &ImageBuffer, scale: f32) -> ImageBuffer {
    let dw = ((img.width() as f32 * scale).round() as usize).max(1);
    let dh = ((img.height() as f32 * scale).round() as usize).max(1);
    let blurred = binomial_blur(img);
    let data = resize_plane(blurred.data(), img.width(), img.height(), dw, dh);
    ImageBuffer::from_fn(dw, dh, |x, y| data[y * dw + x])
}

fn resize_flow(flow: &FlowField, dw: usize, dh: usize, gain: f32) -> FlowField {
    let u: Vec<f32> = resize_plane(&flow.u, flow.width, flow.height, dw, dh)
        .iter()
        .map(|&val| val * gain)
        .collect();
    let v: Vec<f32> = resize_plane(&flow.v, flow.width, flow.height, dw, dh)
        .iter()
        .map(|&val| val * gain)
        .collect();
    FlowField {
        width: dw,
        height: dh,
        u,
        v,
    }
}

/// Dense flow from `prev` to `next` over a blur-and-subsample pyramid,
/// refining `iterations` times per level from the coarsest up.
///
/// The level count is clamped (with a warning) when the image cannot support
/// the requested depth.
pub fn compute_flow(
    prev: &ImageBuffer,
    next: &ImageBuffer,
    params: &FlowParams,
) -> Result<FlowField> {
    if !prev.same_dimensions(next) {
        return Err(Error::Dimension(format!(
            "flow frames {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    params.validate()?;
    if prev.width() < params.poly_n || prev.height() < params.poly_n {
        return Err(Error::Input(format!(
            "image {}x{} smaller than polynomial window {}",
            prev.width(),
            prev.height(),
            params.poly_n
        )));
    }

    // Image pyramid, level 0 finest.
    let mut pyramid = vec![(prev.clone(), next.clone())];
    for level in 1..params.pyramid_levels {
        let (last_prev, last_next) = pyramid.last().unwrap();
        let next_w = ((last_prev.width() as f32 * params.pyramid_scale).round() as usize).max(1);
        let next_h = ((last_prev.height() as f32 * params.pyramid_scale).round() as usize).max(1);
        if next_w < params.poly_n || next_h < params.poly_n {
            log::warn!(
                "pyramid clamped to {level} levels ({} requested): {next_w}x{next_h} is smaller than the polynomial window",
                params.pyramid_levels
            );
            break;
        }
        let p = downsample(last_prev, params.pyramid_scale);
        let n = downsample(last_next, params.pyramid_scale);
        pyramid.push((p, n));
    }

    let coarsest = pyramid.last().unwrap();
    let mut flow = FlowField::zeros(coarsest.0.width(), coarsest.0.height());
    for (level_prev, level_next) in pyramid.iter().rev() {
        if flow.width != level_prev.width() || flow.height != level_prev.height() {
            flow = resize_flow(
                &flow,
                level_prev.width(),
                level_prev.height(),
                1.0 / params.pyramid_scale,
            );
        }
        let e1 = poly_expand(level_prev, params.poly_n, params.poly_sigma)?;
        let e2 = poly_expand(level_next, params.poly_n, params.poly_sigma)?;
        for _ in 0..params.iterations {
            flow = flow_step(&e1, &e2, &flow, params.window_radius)?;
        }
    }
    Ok(flow)
}

/// Bilinear backward warp: `out(x) = img(x + flow(x))`, edge clamped.
pub fn warp_image(img: &ImageBuffer, flow: &FlowField) -> Result<ImageBuffer> {
    if img.width() != flow.width || img.height() != flow.height {
        return Err(Error::Dimension(format!(
            "warp image {}x{} vs flow {}x{}",
            img.width(),
            img.height(),
            flow.width,
            flow.height
        )));
    }
    Ok(ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let (u, v) = flow.get(x, y);
        img.sample_bilinear(x as f32 + u, y as f32 + v)
    }))
}

/// Writes the Middlebury `.flo` format: "PIEH", width and height as
/// little-endian i32, then row-major interleaved (u, v) little-endian f32.
pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes =
        Vec::with_capacity(4 + 8 + field.width * field.height * 8);
    bytes.extend_from_slice(&FLO_MAGIC);
    bytes.extend_from_slice(&(field.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(field.height as i32).to_le_bytes());
    for y in 0..field.height {
        for x in 0..field.width {
            let (u, v) = field.get(x, y);
            bytes.extend_from_slice(&u.to_le_bytes());
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.flo` file written by [`write_flo`].
pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || bytes[0..4] != FLO_MAGIC {
        return Err(Error::decode(path, "not a .flo file (bad magic)"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::decode(path, "non-positive dimensions"));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::decode(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = 12 + i * 8;
        u.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        v.push(f32::from_le_bytes(
            bytes[off + 4..off + 8].try_into().unwrap(),
        ));
    }
    FlowField::new(w, h, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    /// Mean endpoint error against a constant true displacement over the
    /// interior (margin pixels skipped on every side).
    fn mean_epe(flow: &FlowField, truth: (f32, f32), margin: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in margin..flow.height() - margin {
            for x in margin..flow.width() - margin {
                let (u, v) = flow.get(x, y);
                let du = (u - truth.0) as f64;
                let dv = (v - truth.1) as f64;
                sum += (du * du + dv * dv).sqrt();
                n += 1;
            }
        }
        sum / n as f64
    }

    fn mean_flow(flow: &FlowField, margin: usize) -> (f64, f64) {
        let mut su = 0.0f64;
        let mut sv = 0.0f64;
        let mut n = 0usize;
        for y in margin..flow.height() - margin {
            for x in margin..flow.width() - margin {
                let (u, v) = flow.get(x, y);
                su += u as f64;
                sv += v as f64;
                n += 1;
            }
        }
        (su / n as f64, sv / n as f64)
    }

    #[test]
    fn expansion_of_constant_image() {
        let img = ImageBuffer::from_fn(32, 24, |_, _| 0.37);
        let exp = poly_expand(&img, 5, 1.1).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                let (a, b, c) = exp.coefficients(x, y);
                assert!((c - 0.37).abs() < 1e-4, "c at ({x},{y}) = {c}");
                for row in a {
                    for val in row {
                        assert!(val.abs() < 1e-4);
                    }
                }
                assert!(b[0].abs() < 1e-4 && b[1].abs() < 1e-4);
            }
        }
    }

    #[test]
    fn expansion_of_linear_ramp() {
        let alpha = 0.0125f32;
        let img = ImageBuffer::from_fn(40, 20, |x, _| 0.1 + alpha * x as f32);
        let exp = poly_expand(&img, 5, 1.1).unwrap();
        for y in 3..17 {
            for x in 3..37 {
                let (a, b, _) = exp.coefficients(x, y);
                assert!((b[0] - alpha).abs() < 1e-4, "b_x at ({x},{y}) = {}", b[0]);
                assert!(b[1].abs() < 1e-4);
                for row in a {
                    for val in row {
                        assert!(val.abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn expansion_recovers_known_quadratic() {
        // f(x,y) centered on the middle pixel, small enough to stay in [0,1].
        let (cx, cy) = (15.0f32, 10.0f32);
        let (axx, ayy, axy) = (2.0e-3f32, -1.5e-3f32, 8.0e-4f32);
        let (bx, by, c0) = (6.0e-3f32, -4.0e-3f32, 0.5f32);
        let img = ImageBuffer::from_fn(31, 21, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            c0 + bx * dx + by * dy + axx * dx * dx + ayy * dy * dy + axy * dx * dy
        });
        let exp = poly_expand(&img, 7, 1.5).unwrap();
        let (a, b, c) = exp.coefficients(15, 10);
        assert!((a[0][0] - axx).abs() < 1e-3, "a_xx {}", a[0][0]);
        assert!((a[1][1] - ayy).abs() < 1e-3, "a_yy {}", a[1][1]);
        // The symmetric matrix carries half the xy cross term per side.
        assert!((a[0][1] - axy / 2.0).abs() < 1e-3, "a_xy {}", a[0][1]);
        assert!((b[0] - bx).abs() < 1e-3);
        assert!((b[1] - by).abs() < 1e-3);
        assert!((c - c0).abs() < 1e-3);
    }

    #[test]
    fn flow_step_identity_is_zero() {
        let img = synth::textured_image(48, 36, 5, 3);
        let exp = poly_expand(&img, 5, 1.1).unwrap();
        let prior = FlowField::zeros(48, 36);
        let flow = flow_step(&exp, &exp, &prior, 7).unwrap();
        assert!(flow.max_abs() <= 1e-6, "max {}", flow.max_abs());
    }

    #[test]
    fn flow_step_recovers_small_shift() {
        // A single step linearizes around the prior, so the texture must be
        // smooth relative to the 3 px displacement.
        let canvas = synth::low_frequency_image(102, 72, 9);
        let crop = |ox: usize| {
            ImageBuffer::from_fn(96, 72, |x, y| canvas.get(x + ox, y))
        };
        let prev = crop(3);
        let next = crop(0); // next(x) = prev(x - 3): content moves rightward
        let e1 = poly_expand(&prev, 7, 1.8).unwrap();
        let e2 = poly_expand(&next, 7, 1.8).unwrap();
        let flow = flow_step(&e1, &e2, &FlowField::zeros(96, 72), 9).unwrap();
        let (mu, mv) = mean_flow(&flow, 12);
        assert!((mu - 3.0).abs() <= 0.5, "mean u {mu}");
        assert!(mv.abs() <= 0.5, "mean v {mv}");
    }

    #[test]
    fn flow_step_keeps_prior_in_flat_regions() {
        let img = ImageBuffer::from_fn(32, 32, |_, _| 0.5);
        let exp = poly_expand(&img, 5, 1.1).unwrap();
        let prior = FlowField::new(32, 32, vec![1.25; 32 * 32], vec![-0.75; 32 * 32]).unwrap();
        let flow = flow_step(&exp, &exp, &prior, 5).unwrap();
        assert_eq!(flow.u(), prior.u());
        assert_eq!(flow.v(), prior.v());
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = synth::textured_image(64, 64, 42, 3);
        let flow = compute_flow(&img, &img, &FlowParams::default()).unwrap();
        assert!(flow.max_abs() <= 1e-3, "max {}", flow.max_abs());
    }

    #[test]
    fn small_translation_recovered() {
        let (prev, next) = synth::translated_pair(128, 128, 2, 1, 17, 4);
        let flow = compute_flow(&prev, &next, &FlowParams::default()).unwrap();
        let epe = mean_epe(&flow, (2.0, 1.0), 16);
        assert!(epe <= 0.5, "mean endpoint error {epe}");
    }

    #[test]
    fn large_shift_needs_the_pyramid() {
        let (prev, next) = synth::translated_pair(128, 128, 12, 0, 23, 4);
        let mut params = FlowParams::default();
        params.pyramid_levels = 3;
        let flow = compute_flow(&prev, &next, &params).unwrap();
        let epe3 = mean_epe(&flow, (12.0, 0.0), 20);
        assert!(epe3 <= 1.0, "3-level epe {epe3}");

        params.pyramid_levels = 1;
        let flow1 = compute_flow(&prev, &next, &params).unwrap();
        let epe1 = mean_epe(&flow1, (12.0, 0.0), 20);
        assert!(epe1 > 1.0, "1-level epe {epe1} unexpectedly small");
    }

    #[test]
    fn approximate_antisymmetry() {
        let (a, b) = synth::translated_pair(96, 96, 4, -2, 31, 4);
        let params = FlowParams::default();
        let fwd = compute_flow(&a, &b, &params).unwrap();
        let bwd = compute_flow(&b, &a, &params).unwrap();
        let (fu, fv) = mean_flow(&fwd, 14);
        let (bu, bv) = mean_flow(&bwd, 14);
        assert!((fu + bu).abs() <= 0.5, "u: {fu} vs {bu}");
        assert!((fv + bv).abs() <= 0.5, "v: {fv} vs {bv}");
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let img = synth::noise_image(33, 27, 3);
        let warped = warp_image(&img, &FlowField::zeros(33, 27)).unwrap();
        assert_eq!(warped.data(), img.data());
    }

    #[test]
    fn warp_shifts_ramp_by_one_column() {
        let img = ImageBuffer::from_fn(20, 10, |x, _| x as f32 / 32.0);
        let flow = FlowField::new(20, 10, vec![1.0; 200], vec![0.0; 200]).unwrap();
        let warped = warp_image(&img, &flow).unwrap();
        for y in 0..10 {
            for x in 0..19 {
                assert!((warped.get(x, y) - img.get(x + 1, y)).abs() < 1e-6);
            }
            // Edge clamp on the last column.
            assert!((warped.get(19, y) - img.get(19, y)).abs() < 1e-6);
        }
    }

    #[test]
    fn warping_by_computed_flow_improves_photometric_error() {
        for &(dx, dy) in &[(1i32, 0i32), (3, 2), (-2, 4), (6, -3)] {
            let seed = 7 + dx.unsigned_abs() as u64 * 13 + dy.unsigned_abs() as u64;
            let (prev, next) = synth::translated_pair(96, 96, dx, dy, seed, 4);
            let flow = compute_flow(&prev, &next, &FlowParams::default()).unwrap();
            let warped = warp_image(&next, &flow).unwrap();
            let l1 = |a: &ImageBuffer, b: &ImageBuffer| -> f64 {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs() as f64)
                    .sum::<f64>()
                    / a.data().len() as f64
            };
            let before = l1(&next, &prev);
            let after = l1(&warped, &prev);
            assert!(
                after < before,
                "shift ({dx},{dy}): warp did not reduce error ({after} vs {before})"
            );
        }
    }

    #[test]
    fn pyramid_clamps_for_tiny_images() {
        let img = synth::noise_image(12, 12, 8);
        let mut params = FlowParams::default();
        params.pyramid_levels = 6;
        // 12 -> 6 -> 3 would undercut poly_n = 5; must clamp, not fail.
        let flow = compute_flow(&img, &img, &params).unwrap();
        assert!(flow.max_abs() <= 1e-3);
    }

    #[test]
    fn determinism_across_runs() {
        let (prev, next) = synth::translated_pair(80, 60, 3, -1, 77, 4);
        let a = compute_flow(&prev, &next, &FlowParams::default()).unwrap();
        let b = compute_flow(&prev, &next, &FlowParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.flo");
        let n = 13 * 9;
        let u: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin() * 20.0).collect();
        let v: Vec<f32> = (0..n).map(|i| (i as f32 * 0.11).cos() * -5.0).collect();
        let field = FlowField::new(13, 9, u, v).unwrap();
        write_flo(&field, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back, field);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_flo(&path).is_err());
    }

    #[test]
    fn flo_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.flo");
        let mut bytes = b"PIEH".to_vec();
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]); // far fewer than 4*4*8
        std::fs::write(&path, bytes).unwrap();
        assert!(read_flo(&path).is_err());
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = synth::noise_image(32, 32, 1);
        let b = synth::noise_image(33, 32, 1);
        assert!(compute_flow(&a, &b, &FlowParams::default()).is_err());
        assert!(warp_image(&a, &FlowField::zeros(33, 32)).is_err());
    }
}
