//! Ray-cast synthetic clear scenes plus a per-ray snow clutter model,
//! producing paired clear/snow clouds for toy training and evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::range_codec::{project, save_lpc, save_rimg, PointCloud, SensorConfig};

/// Axis-aligned box given by center and half-extents, in world frame
/// (ground plane is z = 0).
#[derive(Debug, Clone, Copy)]
pub struct Box3 {
    pub center: [f32; 3],
    pub half_extents: [f32; 3],
}

/// Thin vertical wall segment, axis-aligned.
#[derive(Debug, Clone, Copy)]
pub struct Wall {
    /// true: wall runs along the y axis at x = position; false: along x at y = position.
    pub along_y: bool,
    pub position: f32,
    pub from: f32,
    pub to: f32,
    pub height: f32,
    pub thickness: f32,
}

impl Wall {
    fn to_box(self) -> Box3 {
        let mid = 0.5 * (self.from + self.to);
        let half_len = 0.5 * (self.to - self.from).abs();
        if self.along_y {
            Box3 {
                center: [self.position, mid, self.height / 2.0],
                half_extents: [self.thickness / 2.0, half_len, self.height / 2.0],
            }
        } else {
            Box3 {
                center: [mid, self.position, self.height / 2.0],
                half_extents: [half_len, self.thickness / 2.0, self.height / 2.0],
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub boxes: Vec<Box3>,
    pub walls: Vec<Wall>,
    pub sensor_height: f32,
}

impl SceneSpec {
    /// Random street-like scene: ground plane, a handful of boxes, one wall.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_boxes = rng.gen_range(2..=6);
        let boxes = (0..n_boxes)
            .map(|_| {
                let r = rng.gen_range(5.0f32..35.0);
                let theta = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
                let hx = rng.gen_range(0.3f32..2.0);
                let hy = rng.gen_range(0.3f32..2.0);
                let hz = rng.gen_range(0.4f32..2.5);
                Box3 {
                    center: [r * theta.cos(), r * theta.sin(), hz],
                    half_extents: [hx, hy, hz],
                }
            })
            .collect();
        let walls = vec![Wall {
            along_y: true,
            position: rng.gen_range(20.0f32..45.0),
            from: -40.0,
            to: 40.0,
            height: rng.gen_range(2.0f32..4.0),
            thickness: 0.3,
        }];
        SceneSpec { seed, boxes, walls, sensor_height: 1.8 }
    }
}

/// Snow clutter model: per returning ray, with probability `rate`, a snow
/// particle return at an exponentially near-biased range.
#[derive(Debug, Clone, Copy)]
pub struct SnowSpec {
    /// Expected snow returns per beam-ray, clamped to [0, 1] as a probability.
    pub rate: f32,
    /// Exponential decay per meter of the snow-return distance.
    pub near_bias: f32,
    /// Snow return replaces the surface return on that ray.
    pub occlusion: bool,
}

impl SnowSpec {
    pub fn new(rate: f32, near_bias: f32, occlusion: bool) -> Result<Self> {
        if rate < 0.0 || near_bias <= 0.0 {
            return Err(Error::invalid("snow_spec", format!("rate={rate} near_bias={near_bias}")));
        }
        Ok(SnowSpec { rate, near_bias, occlusion })
    }
}

impl Default for SnowSpec {
    fn default() -> Self {
        SnowSpec { rate: 0.4, near_bias: 0.12, occlusion: true }
    }
}

fn ray_box(origin: &[f32; 3], dir: &[f32; 3], b: &Box3) -> Option<f32> {
    // slab test
    let mut t_near = 0.0f32;
    let mut t_far = f32::INFINITY;
    for a in 0..3 {
        let lo = b.center[a] - b.half_extents[a];
        let hi = b.center[a] + b.half_extents[a];
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
        } else {
            let inv = 1.0 / dir[a];
            let (mut t0, mut t1) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
    }
    if t_near > 1e-4 {
        Some(t_near)
    } else {
        None
    }
}

/// Range to the nearest primitive along the ray, if any (<= r_max).
fn cast_ray(spec: &SceneSpec, dir: &[f32; 3], r_max: f32) -> Option<f32> {
    let origin = [0.0f32, 0.0, spec.sensor_height];
    let mut best = f32::INFINITY;
    if dir[2] < -1e-9 {
        let t = -spec.sensor_height / dir[2];
        if t > 1e-4 {
            best = t;
        }
    }
    for b in &spec.boxes {
        if let Some(t) = ray_box(&origin, dir, b) {
            best = best.min(t);
        }
    }
    for w in &spec.walls {
        if let Some(t) = ray_box(&origin, dir, &w.to_box()) {
            best = best.min(t);
        }
    }
    (best <= r_max).then_some(best)
}

/// One ray per (beam, azimuth bin) at bin-center angles; the nearest
/// primitive hit within r_max becomes a point in the sensor frame.
pub fn gen_clear(spec: &SceneSpec, cfg: &SensorConfig) -> Result<PointCloud> {
    let elevations = cfg
        .beam_elevations
        .as_ref()
        .ok_or_else(|| Error::invalid("gen_clear", "sensor config needs beam_elevations"))?;
    let mut points = Vec::new();
    let mut beam = Vec::new();
    for (row, &phi) in elevations.iter().enumerate() {
        let (sp, cp) = (phi.sin(), phi.cos());
        for col in 0..cfg.width {
            let theta = (col as f32 + 0.5) / cfg.width as f32 * 2.0 * std::f32::consts::PI - std::f32::consts::PI;
            let dir = [cp * theta.cos(), cp * theta.sin(), sp];
            if let Some(r) = cast_ray(spec, &dir, cfg.r_max) {
                points.push([dir[0] * r, dir[1] * r, dir[2] * r]);
                beam.push(row as u16);
            }
        }
    }
    PointCloud::new(points, beam)
}

fn truncated_exp(lambda: f32, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> f32 {
    // inverse CDF of Exp(lambda) conditioned on (lo, hi)
    let u: f32 = rng.gen_range(0.0..1.0);
    let e_lo = (-lambda * lo).exp();
    let e_hi = (-lambda * hi).exp();
    -((e_lo - u * (e_lo - e_hi)).ln()) / lambda
}

/// Adds per-ray snow clutter. Every input point stands for one returning
/// ray; snow on that ray lands between 0.5 m and the surface range.
pub fn add_snow(cloud: &PointCloud, spec: &SnowSpec, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let p_snow = spec.rate.min(1.0) as f64;
    let mut points = Vec::with_capacity(cloud.len());
    let mut beam = Vec::with_capacity(cloud.len());
    for (p, &b) in cloud.points.iter().zip(&cloud.beam) {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let snowed = r > 0.5 && p_snow > 0.0 && rng.gen_bool(p_snow);
        if snowed {
            let r_s = truncated_exp(spec.near_bias, 0.5, r, rng);
            let scale = r_s / r;
            points.push([p[0] * scale, p[1] * scale, p[2] * scale]);
            beam.push(b);
            if !spec.occlusion {
                points.push(*p);
                beam.push(b);
            }
        } else {
            points.push(*p);
            beam.push(b);
        }
    }
    PointCloud::new(points, beam)
}

/// A generated pair of scenes plus their file names.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub index: usize,
    pub clear: PointCloud,
    pub snow: PointCloud,
}

pub fn gen_scene_pair(index: usize, seed: u64, snow: &SnowSpec, cfg: &SensorConfig) -> Result<ScenePair> {
    let scene = SceneSpec::random(seed.wrapping_add(index as u64));
    let clear = gen_clear(&scene, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64) ^ 0x5e0f_77aa);
    let snow_cloud = add_snow(&clear, snow, &mut rng)?;
    Ok(ScenePair { index, clear, snow: snow_cloud })
}

/// Generates `n_scenes` paired clear/snow scenes into `out_dir`, writing
/// scene_<idx>_{clear|snow}.{lpc,rimg} plus a tab-separated dataset.txt
/// manifest. Deterministic per seed.
pub fn gen_dataset(n_scenes: usize, snow: &SnowSpec, cfg: &SensorConfig, seed: u64, out_dir: &Path) -> Result<()> {
    if n_scenes == 0 {
        return Err(Error::invalid("gen_dataset", "n_scenes must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.display().to_string(), source: e })?;
    let pairs: Vec<ScenePair> = (0..n_scenes)
        .into_par_iter()
        .map(|i| gen_scene_pair(i, seed, snow, cfg))
        .collect::<Result<_>>()?;
    let mut manifest = String::new();
    for pair in &pairs {
        let stem = format!("scene_{}", pair.index);
        let clear_img = project(&pair.clear, cfg)?;
        let snow_img = project(&pair.snow, cfg)?;
        save_lpc(&pair.clear, &out_dir.join(format!("{stem}_clear.lpc")))?;
        save_lpc(&pair.snow, &out_dir.join(format!("{stem}_snow.lpc")))?;
        save_rimg(&clear_img, &out_dir.join(format!("{stem}_clear.rimg")))?;
        save_rimg(&snow_img, &out_dir.join(format!("{stem}_snow.rimg")))?;
        manifest.push_str(&format!(
            "{stem}_clear.lpc\t{stem}_snow.lpc\t{stem}_clear.rimg\t{stem}_snow.rimg\n"
        ));
    }
    std::fs::write(out_dir.join("dataset.txt"), manifest)
        .map_err(|e| Error::Io { path: out_dir.display().to_string(), source: e })?;
    Ok(())
}
