//! Analysis configuration: kernel parameters and label thresholds.
//!
//! Configs are plain-text `key=value` files with `#` comments. Missing keys
//! take the documented defaults; unknown or malformed keys are rejected so a
//! typo never silently runs with defaults.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// How the per-object movement intensity `VL` is derived from the mean flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityMetric {
    /// `|xM * yM|` — the literal product form. Degenerates to zero for
    /// axis-aligned motion.
    Product,
    /// `sqrt(xM^2 + yM^2)` — magnitude alternative without the axis-aligned
    /// degeneracy.
    Euclidean,
}

/// Maps the sign of the mean vertical flow to approaching / moving away.
///
/// With a forward-facing road camera, approaching objects grow and their
/// centroids move downward in the image, so downward (positive v) defaults to
/// approaching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YSignConvention {
    DownIsApproaching,
    UpIsApproaching,
}

/// Every tunable of the pipeline. All distances are in pixels, velocities in
/// pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Largest disparity searched, exclusive upper bound on object disparity.
    pub d_max: u32,
    /// Matching window radius; the window is `(2r+1) x (2r+1)`.
    pub block_radius: usize,
    /// Left-right consistency tolerance in pixels.
    pub lr_consistency_tau: f32,
    /// Minimum luminance variance inside the matching window; flatter
    /// windows are marked invalid (aperture problem).
    pub min_texture: f32,
    /// Pyramid depth for optical flow (1 = single level).
    pub pyramid_levels: usize,
    /// Per-level downscale ratio, in (0, 1).
    pub pyramid_scale: f32,
    /// Radius of the box window aggregating the flow normal equations.
    pub window_radius: usize,
    /// Flow refinement iterations per pyramid level.
    pub iterations: usize,
    /// Polynomial expansion window size (odd, >= 3).
    pub poly_n: usize,
    /// Gaussian applicability sigma for the polynomial expansion.
    pub poly_sigma: f32,
    /// Descending cutoffs on mean disparity normalized by `d_max`:
    /// `>= t0` very close, `>= t1` close, `>= t2` far, else very far.
    /// Held in f64 so boundary values classify exactly.
    pub depth_thresholds: [f64; 3],
    /// Dead zone for the x-direction label, pixels/frame.
    pub dir_epsilon_x: f64,
    /// Dead zone for the y-direction label, pixels/frame.
    pub dir_epsilon_y: f64,
    /// Ascending cutoffs mapping `VL` to stopped / slow / average_speed /
    /// fast / very_fast. Boundary values take the higher label.
    pub intensity_thresholds: [f64; 4],
    pub intensity_metric: IntensityMetric,
    /// Minimum number of valid disparity pixels under a mask for the mean
    /// disparity to count.
    pub min_valid_pixels: usize,
    pub y_sign_approaching: YSignConvention,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            d_max: 128,
            block_radius: 4,
            lr_consistency_tau: 1.0,
            min_texture: 1e-4,
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_radius: 7,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
            depth_thresholds: [0.5, 0.25, 0.1],
            dir_epsilon_x: 0.5,
            dir_epsilon_y: 0.5,
            intensity_thresholds: [0.25, 1.0, 4.0, 9.0],
            intensity_metric: IntensityMetric::Product,
            min_valid_pixels: 25,
            y_sign_approaching: YSignConvention::DownIsApproaching,
        }
    }
}

impl AnalysisConfig {
    /// Checks every invariant, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 {
            return Err(Error::config("d_max", "must be at least 1"));
        }
        if self.lr_consistency_tau < 0.0 || !self.lr_consistency_tau.is_finite() {
            return Err(Error::config("lr_consistency_tau", "must be >= 0"));
        }
        if self.min_texture < 0.0 || !self.min_texture.is_finite() {
            return Err(Error::config("min_texture", "must be >= 0"));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::config("pyramid_levels", "must be at least 1"));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::config("pyramid_scale", "must lie in (0, 1)"));
        }
        if self.window_radius == 0 {
            return Err(Error::config("window_radius", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return Err(Error::config("poly_n", "must be odd and >= 3"));
        }
        if !(self.poly_sigma > 0.0) || !self.poly_sigma.is_finite() {
            return Err(Error::config("poly_sigma", "must be > 0"));
        }
        let t = &self.depth_thresholds;
        if !t.iter().all(|v| v.is_finite()) || !(t[0] > t[1] && t[1] > t[2]) {
            return Err(Error::config(
                "depth_thresholds",
                "must be three finite strictly descending values",
            ));
        }
        if self.dir_epsilon_x < 0.0 || !self.dir_epsilon_x.is_finite() {
            return Err(Error::config("dir_epsilon_x", "must be >= 0"));
        }
        if self.dir_epsilon_y < 0.0 || !self.dir_epsilon_y.is_finite() {
            return Err(Error::config("dir_epsilon_y", "must be >= 0"));
        }
        let c = &self.intensity_thresholds;
        if !c.iter().all(|v| v.is_finite() && *v >= 0.0)
            || !(c[0] < c[1] && c[1] < c[2] && c[2] < c[3])
        {
            return Err(Error::config(
                "intensity_thresholds",
                "must be four non-negative strictly ascending values",
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_max" => self.d_max = parse_num(key, value)?,
            "block_radius" => self.block_radius = parse_num(key, value)?,
            "lr_consistency_tau" => self.lr_consistency_tau = parse_num(key, value)?,
            "min_texture" => self.min_texture = parse_num(key, value)?,
            "pyramid_levels" => self.pyramid_levels = parse_num(key, value)?,
            "pyramid_scale" => self.pyramid_scale = parse_num(key, value)?,
            "window_radius" => self.window_radius = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "poly_n" => self.poly_n = parse_num(key, value)?,
            "poly_sigma" => self.poly_sigma = parse_num(key, value)?,
            "depth_thresholds" => self.depth_thresholds = parse_list(key, value)?,
            "dir_epsilon_x" => self.dir_epsilon_x = parse_num(key, value)?,
            "dir_epsilon_y" => self.dir_epsilon_y = parse_num(key, value)?,
            "intensity_thresholds" => self.intensity_thresholds = parse_list(key, value)?,
            "intensity_metric" => {
                self.intensity_metric = match value {
                    "product" => IntensityMetric::Product,
                    "euclidean" => IntensityMetric::Euclidean,
                    other => {
                        return Err(Error::config(
                            key,
                            format!("expected `product` or `euclidean`, got `{other}`"),
                        ))
                    }
                }
            }
            "min_valid_pixels" => self.min_valid_pixels = parse_num(key, value)?,
            "y_sign_approaching" => {
                self.y_sign_approaching = match value {
                    "down_is_approaching" => YSignConvention::DownIsApproaching,
                    "up_is_approaching" => YSignConvention::UpIsApproaching,
                    other => {
                        return Err(Error::config(
                            key,
                            format!(
                                "expected `down_is_approaching` or `up_is_approaching`, got `{other}`"
                            ),
                        ))
                    }
                }
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::config(
            key,
            format!("expected {N} comma-separated values, got {}", parts.len()),
        ));
    }
    let mut out = [0.0f64; N];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_num(key, part)?;
    }
    Ok(out)
}

/// Parses config text. The result is fully validated; there is no partially
/// applied state on error.
pub fn parse_config(text: &str) -> Result<AnalysisConfig> {
    let mut cfg = AnalysisConfig::default();
    let mut seen = HashSet::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", line_no + 1),
                format!("expected key=value, got `{line}`"),
            )
        })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::config(key, "duplicate key"));
        }
        cfg.apply(key, value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file, falling back to all defaults for missing keys.
pub fn load_config(path: impl AsRef<Path>) -> Result<AnalysisConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Serializes a config as `key=value` lines that [`parse_config`] accepts.
pub fn config_to_text(cfg: &AnalysisConfig) -> String {
    let metric = match cfg.intensity_metric {
        IntensityMetric::Product => "product",
        IntensityMetric::Euclidean => "euclidean",
    };
    let y_sign = match cfg.y_sign_approaching {
        YSignConvention::DownIsApproaching => "down_is_approaching",
        YSignConvention::UpIsApproaching => "up_is_approaching",
    };
    format!(
        "d_max={}\n\
         block_radius={}\n\
         lr_consistency_tau={}\n\
         min_texture={}\n\
         pyramid_levels={}\n\
         pyramid_scale={}\n\
         window_radius={}\n\
         iterations={}\n\
         poly_n={}\n\
         poly_sigma={}\n\
         depth_thresholds={},{},{}\n\
         dir_epsilon_x={}\n\
         dir_epsilon_y={}\n\
         intensity_thresholds={},{},{},{}\n\
         intensity_metric={}\n\
         min_valid_pixels={}\n\
         y_sign_approaching={}\n",
        cfg.d_max,
        cfg.block_radius,
        cfg.lr_consistency_tau,
        cfg.min_texture,
        cfg.pyramid_levels,
        cfg.pyramid_scale,
        cfg.window_radius,
        cfg.iterations,
        cfg.poly_n,
        cfg.poly_sigma,
        cfg.depth_thresholds[0],
        cfg.depth_thresholds[1],
        cfg.depth_thresholds[2],
        cfg.dir_epsilon_x,
        cfg.dir_epsilon_y,
        cfg.intensity_thresholds[0],
        cfg.intensity_thresholds[1],
        cfg.intensity_thresholds[2],
        cfg.intensity_thresholds[3],
        metric,
        cfg.min_valid_pixels,
        y_sign,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, AnalysisConfig::default());
    }

    #[test]
    fn single_override_keeps_other_defaults() {
        let cfg = parse_config("d_max=64").unwrap();
        assert_eq!(cfg.d_max, 64);
        assert_eq!(cfg.block_radius, AnalysisConfig::default().block_radius);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# a comment\n\nd_max=32   # trailing\n").unwrap();
        assert_eq!(cfg.d_max, 32);
    }

    #[test]
    fn non_descending_depth_thresholds_rejected() {
        let err = parse_config("depth_thresholds=0.5,0.25,0.6").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("depth_thresholds"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("dmax=64").unwrap_err();
        assert!(err.to_string().contains("dmax"));
    }

    #[test]
    fn malformed_line_rejected() {
        let err = parse_config("d_max 64").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = parse_config("d_max=64\nd_max=32").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn pyramid_scale_bounds_enforced() {
        assert!(parse_config("pyramid_scale=1.0").is_err());
        assert!(parse_config("pyramid_scale=0.0").is_err());
        assert!(parse_config("pyramid_scale=0.75").is_ok());
    }

    #[test]
    fn poly_n_must_be_odd() {
        assert!(parse_config("poly_n=4").is_err());
        assert!(parse_config("poly_n=1").is_err());
        assert!(parse_config("poly_n=7").is_ok());
    }

    #[test]
    fn enum_keys_parse() {
        let cfg = parse_config("intensity_metric=euclidean\ny_sign_approaching=up_is_approaching")
            .unwrap();
        assert_eq!(cfg.intensity_metric, IntensityMetric::Euclidean);
        assert_eq!(cfg.y_sign_approaching, YSignConvention::UpIsApproaching);
        assert!(parse_config("intensity_metric=manhattan").is_err());
    }

    #[test]
    fn intensity_thresholds_must_ascend() {
        assert!(parse_config("intensity_thresholds=1,2,3,3").is_err());
        assert!(parse_config("intensity_thresholds=0.1,0.5,2,8").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = AnalysisConfig::default();
        cfg.d_max = 72;
        cfg.intensity_metric = IntensityMetric::Euclidean;
        cfg.depth_thresholds = [0.45, 0.2, 0.05];
        let back = parse_config(&config_to_text(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }
}
