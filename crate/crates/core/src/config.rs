//! Plain-text key=value pipeline configuration. Unknown keys are rejected;
//! command-line flags override file values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::EncoderConfig;
use crate::quantize::QuantizerKind;
use crate::range_codec::{ElevationMode, SensorConfig};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    // sensor
    pub height: usize,
    pub width: usize,
    pub r_max: f32,
    pub mode: ElevationMode,
    // autoencoder
    pub quantizer: QuantizerKind,
    pub f_h: usize,
    pub f_w: usize,
    pub n_z: usize,
    pub base_channels: usize,
    pub codebook_size: usize,
    // diffusion
    pub t_total: usize,
    pub t_aug: usize,
    pub guidance_w: f32,
    pub p_uncond: f32,
    // postprocess
    pub lambda: f32,
    pub nu: f32,
    // training
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// Toy-scale defaults: 32x64 sensor, LQ quantizer, T = 100.
    fn default() -> Self {
        PipelineConfig {
            height: 32,
            width: 64,
            r_max: 120.0,
            mode: ElevationMode::Beam,
            quantizer: QuantizerKind::Lq,
            f_h: 4,
            f_w: 8,
            n_z: 8,
            base_channels: 8,
            codebook_size: 16,
            t_total: 100,
            t_aug: 50,
            guidance_w: 2.0,
            p_uncond: 0.1,
            lambda: 0.3,
            nu: 0.02,
            steps: 400,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid("config", format!("bad value {value:?} for key {key:?}")))
}

impl PipelineConfig {
    /// Applies one key=value assignment. Used both by the file parser and by
    /// flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "r_max" => self.r_max = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "beam" => ElevationMode::Beam,
                    "uniform" => ElevationMode::Uniform,
                    _ => return Err(Error::invalid("config", format!("mode must be beam or uniform, got {value:?}"))),
                }
            }
            "quantizer" => self.quantizer = parse(key, value)?,
            "f_h" => self.f_h = parse(key, value)?,
            "f_w" => self.f_w = parse(key, value)?,
            "n_z" => self.n_z = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "codebook_size" => self.codebook_size = parse(key, value)?,
            "t_total" => self.t_total = parse(key, value)?,
            "t_aug" => self.t_aug = parse(key, value)?,
            "guidance_w" => self.guidance_w = parse(key, value)?,
            "p_uncond" => self.p_uncond = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "nu" => self.nu = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::invalid("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a key=value file over the defaults. Blank lines and lines
    /// starting with '#' are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        let mut cfg = PipelineConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected key=value", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.lr <= 0.0 {
            return Err(Error::invalid("config", "steps, batch must be >= 1 and lr > 0"));
        }
        if self.t_total == 0 || self.t_aug >= self.t_total {
            return Err(Error::invalid("config", "need t_total >= 1 and t_aug < t_total"));
        }
        Ok(())
    }

    pub fn sensor(&self) -> SensorConfig {
        let mut cfg = SensorConfig::beam_linear(self.height, self.width, self.r_max);
        if self.mode == ElevationMode::Uniform {
            cfg.mode = ElevationMode::Uniform;
            cfg.beam_elevations = None;
        }
        cfg
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { f_h: self.f_h, f_w: self.f_w, n_z: self.n_z, base_channels: self.base_channels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn file_overrides_defaults() {
        let f = write_cfg("# comment\n\nheight=16\nquantizer = vq\nlambda=0.5\n");
        let cfg = PipelineConfig::load(f.path()).unwrap();
        assert_eq!(cfg.height, 16);
        assert_eq!(cfg.quantizer, QuantizerKind::Vq);
        assert_eq!(cfg.lambda, 0.5);
        // untouched keys keep defaults
        assert_eq!(cfg.width, 64);
    }

    #[test]
    fn unknown_key_rejected() {
        let f = write_cfg("heigth=16\n");
        assert!(PipelineConfig::load(f.path()).is_err());
    }

    #[test]
    fn bad_value_and_missing_equals_rejected() {
        assert!(PipelineConfig::load(write_cfg("height=abc\n").path()).is_err());
        assert!(PipelineConfig::load(write_cfg("height 16\n").path()).is_err());
    }

    #[test]
    fn invalid_combination_rejected() {
        let f = write_cfg("t_total=10\nt_aug=10\n");
        assert!(PipelineConfig::load(f.path()).is_err());
    }

    #[test]
    fn sensor_and_encoder_derivation() {
        let cfg = PipelineConfig::default();
        let s = cfg.sensor();
        assert_eq!((s.height, s.width), (32, 64));
        assert!(s.beam_elevations.is_some());
        let e = cfg.encoder();
        assert_eq!((e.f_h, e.f_w, e.n_z), (4, 8, 8));
    }
}
