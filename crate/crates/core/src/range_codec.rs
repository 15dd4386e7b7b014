//! Point cloud <-> range image projection with beam-id or uniform elevation
//! row partitioning, plus the on-disk .rimg / .lpc / PGM formats.

use std::f32::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SENTINEL: f32 = -1.0;
const SENTINEL_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub beam: Vec<u16>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, beam: Vec<u16>) -> Result<Self> {
        if points.len() != beam.len() {
            return Err(Error::invalid("point_cloud", format!("{} points but {} beam ids", points.len(), beam.len())));
        }
        for p in &points {
            let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            if !r2.is_finite() || r2 <= 0.0 {
                return Err(Error::invalid("point_cloud", format!("point {:?} has non-positive or non-finite range", p)));
            }
        }
        Ok(PointCloud { points, beam })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElevationMode {
    /// Row = per-point beam id (the sensor's physical channel).
    Beam,
    /// Row = uniform elevation bin over [phi_min, phi_max).
    Uniform,
}

#[derive(Debug, Clone)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    pub r_max: f32,
    pub mode: ElevationMode,
    pub phi_min: f32,
    pub phi_max: f32,
    /// Per-row elevation angles, required to unproject in beam mode.
    pub beam_elevations: Option<Vec<f32>>,
}

impl SensorConfig {
    /// Beam-mode config with linearly spaced elevations over
    /// [-25 deg, +15 deg], the synthetic-sensor default.
    pub fn beam_linear(height: usize, width: usize, r_max: f32) -> Self {
        let lo = -25.0f32.to_radians();
        let hi = 15.0f32.to_radians();
        let elev = (0..height)
            .map(|i| lo + (hi - lo) * (i as f32 + 0.5) / height as f32)
            .collect();
        SensorConfig {
            height,
            width,
            r_max,
            mode: ElevationMode::Beam,
            phi_min: lo,
            phi_max: hi,
            beam_elevations: Some(elev),
        }
    }

    /// The full-scale sensor: 128 x 1024 beam-partitioned image.
    pub fn full_scale() -> Self {
        Self::beam_linear(128, 1024, 120.0)
    }

    /// Small config used throughout the tests and toy runs.
    pub fn toy() -> Self {
        Self::beam_linear(32, 64, 120.0)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.r_max <= 0.0 {
            return Err(Error::invalid("sensor_config", "H, W must be >= 1 and r_max > 0"));
        }
        if self.mode == ElevationMode::Uniform && self.phi_min >= self.phi_max {
            return Err(Error::invalid("sensor_config", "phi_min must be < phi_max in uniform mode"));
        }
        if let Some(e) = &self.beam_elevations {
            if e.len() != self.height {
                return Err(Error::invalid("sensor_config", "beam_elevations length must equal H"));
            }
            if e.len() > 1 {
                let inc = e.windows(2).all(|w| w[0] < w[1]);
                let dec = e.windows(2).all(|w| w[0] > w[1]);
                if !(inc || dec) {
                    return Err(Error::invalid("sensor_config", "beam_elevations must be strictly monotonic"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    /// Normalized depth in [-1, 1]; -1 is the no-return sentinel.
    pub depth: Vec<f32>,
    pub r_max: f32,
}

impl RangeImage {
    pub fn sentinel(height: usize, width: usize, r_max: f32) -> Self {
        RangeImage { height, width, depth: vec![SENTINEL; height * width], r_max }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width + col]
    }

    pub fn is_return(d: f32) -> bool {
        d > SENTINEL + SENTINEL_EPS
    }

    /// Meters per pixel plus a validity mask; sentinel pixels map to 0 m.
    pub fn depth_meters(&self) -> (Vec<f32>, Vec<bool>) {
        let mut meters = vec![0.0f32; self.depth.len()];
        let mut valid = vec![false; self.depth.len()];
        for (i, &d) in self.depth.iter().enumerate() {
            if Self::is_return(d) {
                meters[i] = (d + 1.0) / 2.0 * self.r_max;
                valid[i] = true;
            }
        }
        (meters, valid)
    }
}

fn normalized_depth(r: f64, r_max: f32) -> f32 {
    ((2.0 * r / r_max as f64 - 1.0).clamp(-1.0, 1.0)) as f32
}

/// Projects a cloud to a range image. Pixel collisions keep the nearest
/// point (ties: first seen); pixels without a point hold the sentinel.
pub fn project(cloud: &PointCloud, cfg: &SensorConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let mut img = RangeImage::sentinel(cfg.height, cfg.width, cfg.r_max);
    let mut best_r = vec![f64::INFINITY; cfg.height * cfg.width];
    for (p, &b) in cloud.points.iter().zip(&cloud.beam) {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let r = (x * x + y * y + z * z).sqrt();
        let row = match cfg.mode {
            ElevationMode::Beam => {
                if (b as usize) >= cfg.height {
                    return Err(Error::invalid("project", format!("beam id {b} >= image height {}", cfg.height)));
                }
                b as usize
            }
            ElevationMode::Uniform => {
                let phi = (z / r).asin() as f32;
                let t = (phi - cfg.phi_min) / (cfg.phi_max - cfg.phi_min);
                ((t * cfg.height as f32).floor() as isize).clamp(0, cfg.height as isize - 1) as usize
            }
        };
        let theta = y.atan2(x);
        let col = (((theta + PI as f64) / (2.0 * PI as f64) * cfg.width as f64).floor() as usize) % cfg.width;
        let idx = row * cfg.width + col;
        if r < best_r[idx] {
            best_r[idx] = r;
            img.depth[idx] = normalized_depth(r, cfg.r_max);
        }
    }
    Ok(img)
}

/// Inverse projection: one point per non-sentinel pixel at the pixel-center
/// azimuth and the row elevation.
pub fn unproject(img: &RangeImage, cfg: &SensorConfig) -> Result<PointCloud> {
    cfg.validate()?;
    if img.height != cfg.height || img.width != cfg.width {
        return Err(Error::ShapeMismatch {
            op: "unproject",
            lhs: vec![img.height, img.width],
            rhs: vec![cfg.height, cfg.width],
        });
    }
    let elevations: Vec<f32> = match cfg.mode {
        ElevationMode::Beam => cfg
            .beam_elevations
            .clone()
            .ok_or_else(|| Error::invalid("unproject", "beam mode requires beam_elevations"))?,
        ElevationMode::Uniform => (0..cfg.height)
            .map(|r| cfg.phi_min + (cfg.phi_max - cfg.phi_min) * (r as f32 + 0.5) / cfg.height as f32)
            .collect(),
    };
    let mut points = Vec::new();
    let mut beam = Vec::new();
    for row in 0..img.height {
        let phi = elevations[row] as f64;
        let (sin_phi, cos_phi) = (phi.sin(), phi.cos());
        for col in 0..img.width {
            let d = img.at(row, col);
            if !RangeImage::is_return(d) {
                continue;
            }
            let r = (d as f64 + 1.0) / 2.0 * img.r_max as f64;
            let theta = (col as f64 + 0.5) / img.width as f64 * 2.0 * PI as f64 - PI as f64;
            points.push([
                (r * cos_phi * theta.cos()) as f32,
                (r * cos_phi * theta.sin()) as f32,
                (r * sin_phi) as f32,
            ]);
            beam.push(row as u16);
        }
    }
    PointCloud::new(points, beam)
}

const RIMG_MAGIC: &[u8; 4] = b"RIM1";
const LPC_MAGIC: &[u8; 4] = b"LPC1";

pub fn save_rimg(img: &RangeImage, path: &Path) -> Result<()> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut buf = Vec::with_capacity(16 + img.depth.len() * 4);
    buf.extend_from_slice(RIMG_MAGIC);
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&img.r_max.to_le_bytes());
    for &d in &img.depth {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    std::fs::File::create(path).map_err(io_err)?.write_all(&buf).map_err(io_err)
}

pub fn load_rimg(path: &Path) -> Result<RangeImage> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let fmt = |msg: &str| Error::Format { path: path.display().to_string(), msg: msg.to_string() };
    if bytes.len() < 16 || &bytes[..4] != RIMG_MAGIC {
        return Err(fmt("bad .rimg header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let r_max = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if bytes.len() != 16 + h * w * 4 {
        return Err(fmt("unexpected .rimg payload size"));
    }
    let depth: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(RangeImage { height: h, width: w, depth, r_max })
}

pub fn save_lpc(cloud: &PointCloud, path: &Path) -> Result<()> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut buf = Vec::with_capacity(8 + cloud.len() * 16);
    buf.extend_from_slice(LPC_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (p, &b) in cloud.points.iter().zip(&cloud.beam) {
        for &c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&b.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
    }
    std::fs::File::create(path).map_err(io_err)?.write_all(&buf).map_err(io_err)
}

pub fn load_lpc(path: &Path) -> Result<PointCloud> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let fmt = |msg: &str| Error::Format { path: path.display().to_string(), msg: msg.to_string() };
    if bytes.len() < 8 || &bytes[..4] != LPC_MAGIC {
        return Err(fmt("bad .lpc header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * 16 {
        return Err(fmt("unexpected .lpc payload size"));
    }
    let mut points = Vec::with_capacity(count);
    let mut beam = Vec::with_capacity(count);
    for rec in bytes[8..].chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        points.push([f(0), f(4), f(8)]);
        beam.push(u16::from_le_bytes([rec[12], rec[13]]));
    }
    PointCloud::new(points, beam)
}

/// P5 PGM export, maxval 255; pixel = round((d+1)/2 * 255), sentinel -> 0.
pub fn save_pgm(img: &RangeImage, path: &Path) -> Result<()> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for &d in &img.depth {
        buf.push(((d + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::File::create(path).map_err(io_err)?.write_all(&buf).map_err(io_err)
}
