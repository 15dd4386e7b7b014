//! Depth-threshold refinement: recover static detail from the clear input
//! while keeping generated occluding snow.

use crate::error::{Error, Result};
use crate::range_codec::RangeImage;

#[derive(Debug, Clone, Copy)]
pub struct PostprocessParams {
    /// Base threshold in meters.
    pub lambda: f32,
    /// Exponential rate per meter.
    pub nu: f32,
}

impl PostprocessParams {
    pub fn new(lambda: f32, nu: f32) -> Result<Self> {
        if lambda < 0.0 || nu < 0.0 {
            return Err(Error::invalid("postprocess", format!("lambda={lambda} nu={nu} must be >= 0")));
        }
        Ok(PostprocessParams { lambda, nu })
    }
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams { lambda: 0.3, nu: 0.02 }
    }
}

/// Pixel-wise threshold d_t = lambda * exp(nu * d_y), strictly increasing in
/// depth for nu > 0.
pub fn depth_threshold(depth_m: &[f32], p: &PostprocessParams) -> Vec<f32> {
    depth_m.iter().map(|&d| p.lambda * (p.nu * d).exp()).collect()
}

/// Blends clear scene `x` with generated adverse scene `y`. Pixels whose
/// depths agree within the threshold come from `x` (static environment);
/// elsewhere the nearer return wins, keeping occluding snow from `y`.
/// No-return pixels are compared at depth r_max so generated snow always
/// occludes empty sky.
pub fn postprocess(x: &RangeImage, y: &RangeImage, p: &PostprocessParams) -> Result<RangeImage> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::ShapeMismatch {
            op: "postprocess",
            lhs: vec![x.height, x.width],
            rhs: vec![y.height, y.width],
        });
    }
    if x.r_max != y.r_max {
        return Err(Error::invalid("postprocess", format!("r_max mismatch: {} vs {}", x.r_max, y.r_max)));
    }
    let (dx, vx) = x.depth_meters();
    let (dy, vy) = y.depth_meters();
    let mut out = RangeImage::sentinel(x.height, x.width, x.r_max);
    for i in 0..out.depth.len() {
        let depth_x = if vx[i] { dx[i] } else { x.r_max };
        let depth_y = if vy[i] { dy[i] } else { y.r_max };
        let d_t = p.lambda * (p.nu * depth_y).exp();
        let delta = (depth_x - depth_y).abs();
        out.depth[i] = if delta < d_t {
            x.depth[i]
        } else if depth_x <= depth_y {
            x.depth[i]
        } else {
            y.depth[i]
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(depths_m: &[f32], r_max: f32) -> RangeImage {
        // -1 meters encodes a sentinel pixel
        let depth = depths_m
            .iter()
            .map(|&m| if m < 0.0 { -1.0 } else { 2.0 * m / r_max - 1.0 })
            .collect();
        RangeImage { height: 1, width: depths_m.len(), depth, r_max }
    }

    #[test]
    fn threshold_scalar_values() {
        let p = PostprocessParams::new(0.3, 0.02).unwrap();
        let t = depth_threshold(&[0.0, 50.0], &p);
        assert!((t[0] - 0.3).abs() < 1e-6);
        assert!((t[1] - 0.3 * 1.0f32.exp()).abs() < 1e-4); // ~0.8155
        let flat = PostprocessParams::new(0.5, 0.0).unwrap();
        let t = depth_threshold(&[0.0, 10.0, 100.0], &flat);
        assert!(t.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn static_pixel_recovered_from_clear() {
        // depths agree within the threshold -> clear pixel wins
        let p = PostprocessParams::new(0.3, 0.02).unwrap();
        let x = img(&[40.0], 120.0);
        let y = img(&[40.2], 120.0);
        let out = postprocess(&x, &y, &p).unwrap();
        assert_eq!(out.depth[0], x.depth[0]);
    }

    #[test]
    fn occluding_snow_kept_from_adverse() {
        let p = PostprocessParams::new(0.3, 0.02).unwrap();
        let x = img(&[30.0], 120.0);
        let y = img(&[5.0], 120.0);
        // d_t = 0.3*e^0.1 ~ 0.33 < delta = 25 -> minDepth picks y
        let out = postprocess(&x, &y, &p).unwrap();
        assert_eq!(out.depth[0], y.depth[0]);
    }

    #[test]
    fn huge_lambda_returns_clear_everywhere() {
        let p = PostprocessParams::new(1e6, 0.02).unwrap();
        let x = img(&[10.0, 50.0, -1.0], 120.0);
        let y = img(&[3.0, 80.0, 7.0], 120.0);
        let out = postprocess(&x, &y, &p).unwrap();
        assert_eq!(out.depth, x.depth);
    }

    #[test]
    fn zero_lambda_is_pure_min_depth() {
        let p = PostprocessParams::new(0.0, 0.02).unwrap();
        let x = img(&[10.0, 50.0], 120.0);
        let y = img(&[3.0, 80.0], 120.0);
        let out = postprocess(&x, &y, &p).unwrap();
        assert_eq!(out.depth[0], y.depth[0]);
        assert_eq!(out.depth[1], x.depth[1]);
    }

    #[test]
    fn sentinel_sky_is_occluded_by_snow() {
        let p = PostprocessParams::default();
        let x = img(&[-1.0], 120.0);
        let y = img(&[4.0], 120.0);
        let out = postprocess(&x, &y, &p).unwrap();
        assert_eq!(out.depth[0], y.depth[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = PostprocessParams::default();
        let x = img(&[1.0, 2.0], 120.0);
        let y = img(&[1.0], 120.0);
        assert!(postprocess(&x, &y, &p).is_err());
        let y2 = img(&[1.0, 2.0], 100.0);
        assert!(postprocess(&x, &y2, &p).is_err());
    }
}
