//! Toy convolutional encoder/decoder and the FiLM-conditioned denoiser.
//!
//! All parameters live in a [`ParamStore`] under "ae.*" / "ldm.*" names and
//! are staged onto a tape per forward pass.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Spatial downscale factors; each must be even (two strided stages).
    pub f_h: usize,
    pub f_w: usize,
    pub n_z: usize,
    pub base_channels: usize,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        EncoderConfig { f_h: 4, f_w: 8, n_z: 8, base_channels: 8 }
    }

    /// The full-scale configuration: f_h=4, f_w=8, n_z=16.
    pub fn full_scale() -> Self {
        EncoderConfig { f_h: 4, f_w: 8, n_z: 16, base_channels: 32 }
    }

    fn stage_strides(&self) -> Result<[(usize, usize); 2]> {
        if self.f_h % 2 != 0 || self.f_w % 2 != 0 || self.f_h < 2 || self.f_w < 2 {
            return Err(Error::invalid("encoder_config", format!("f_h={} f_w={} must be even and >= 2", self.f_h, self.f_w)));
        }
        Ok([(2, 2), (self.f_h / 2, self.f_w / 2)])
    }
}

/// Weather conditioning label. Null is a dedicated third embedding used for
/// classifier-free guidance, never encoded as "clear".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeatherLabel {
    Clear,
    Adverse,
    Null,
}

impl WeatherLabel {
    pub fn index(self) -> usize {
        match self {
            WeatherLabel::Clear => 0,
            WeatherLabel::Adverse => 1,
            WeatherLabel::Null => 2,
        }
    }
}

pub const TIME_EMBED_DIM: usize = 64;
pub const LABEL_EMBED_DIM: usize = 16;

fn he_std(c_in: usize, k: usize) -> f32 {
    (2.0 / (c_in * k * k) as f32).sqrt()
}

fn init_conv(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) {
    store.insert_normal(&format!("{name}.w"), &[c_out, c_in, kh, kw], he_std(c_in, kh.max(kw)), rng);
    store.insert_zeros(&format!("{name}.b"), &[c_out]);
}

fn init_deconv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) {
    store.insert_normal(&format!("{name}.w"), &[c_in, c_out, kh, kw], he_std(c_in, kh.max(kw)), rng);
    store.insert_zeros(&format!("{name}.b"), &[c_out]);
}

fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f32, rng: &mut ChaCha8Rng) {
    store.insert_normal(&format!("{name}.w"), &[d_in, d_out], std, rng);
    store.insert_zeros(&format!("{name}.b"), &[d_out]);
}

type Ids = BTreeMap<String, TensorId>;

fn param(ids: &Ids, name: &str) -> Result<TensorId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
}

fn conv(tape: &mut Tape, ids: &Ids, name: &str, x: TensorId, stride: (usize, usize), pad: usize) -> Result<TensorId> {
    let w = param(ids, &format!("{name}.w"))?;
    let b = param(ids, &format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.bias_add(y, b)
}

fn deconv(tape: &mut Tape, ids: &Ids, name: &str, x: TensorId, stride: (usize, usize), pad: usize) -> Result<TensorId> {
    let w = param(ids, &format!("{name}.w"))?;
    let b = param(ids, &format!("{name}.b"))?;
    let y = tape.conv2d_transpose(x, w, stride, pad)?;
    tape.bias_add(y, b)
}

fn linear(tape: &mut Tape, ids: &Ids, name: &str, x: TensorId) -> Result<TensorId> {
    let w = param(ids, &format!("{name}.w"))?;
    let b = param(ids, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.bias_add(y, b)
}

/// Initializes encoder + decoder parameters (names "ae.enc.*", "ae.dec.*").
pub fn init_autoencoder(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let strides = cfg.stage_strides()?;
    let c = cfg.base_channels;
    let mut store = ParamStore::new();
    init_conv(&mut store, "ae.enc.conv0", c, 1, 3, 3, rng);
    init_conv(&mut store, "ae.enc.conv1", 2 * c, c, 3, 3, rng);
    init_conv(&mut store, "ae.enc.conv2", 2 * c, 2 * c, 3, 3, rng);
    init_conv(&mut store, "ae.enc.conv3", cfg.n_z, 2 * c, 3, 3, rng);
    init_conv(&mut store, "ae.dec.conv0", 2 * c, cfg.n_z, 3, 3, rng);
    // transpose kernels sized stride+2 with pad 1 restore the stage shape
    let (s1h, s1w) = strides[1];
    init_deconv(&mut store, "ae.dec.deconv1", 2 * c, 2 * c, s1h + 2, s1w + 2, rng);
    init_deconv(&mut store, "ae.dec.deconv2", 2 * c, c, 4, 4, rng);
    init_conv(&mut store, "ae.dec.conv3", 1, c, 3, 3, rng);
    Ok(store)
}

/// x (N,1,H,W) -> latent (N, n_z, H/f_h, W/f_w).
pub fn encode(tape: &mut Tape, ids: &Ids, x: TensorId, cfg: &EncoderConfig) -> Result<TensorId> {
    let dims = tape.dims(x).to_vec();
    if dims.len() != 4 || dims[1] != 1 {
        return Err(Error::invalid("encode", format!("expected (N,1,H,W) input, got {dims:?}")));
    }
    if dims[2] % cfg.f_h != 0 || dims[3] % cfg.f_w != 0 {
        return Err(Error::invalid(
            "encode",
            format!("input {}x{} not divisible by factors {}x{}", dims[2], dims[3], cfg.f_h, cfg.f_w),
        ));
    }
    let strides = cfg.stage_strides()?;
    let mut h = conv(tape, ids, "ae.enc.conv0", x, (1, 1), 1)?;
    h = tape.silu(h)?;
    h = conv(tape, ids, "ae.enc.conv1", h, strides[0], 1)?;
    h = tape.silu(h)?;
    h = conv(tape, ids, "ae.enc.conv2", h, strides[1], 1)?;
    h = tape.silu(h)?;
    conv(tape, ids, "ae.enc.conv3", h, (1, 1), 1)
}

/// Latent (N, n_z, h, w) -> reconstruction (N,1,H,W) in (-1,1) via tanh.
pub fn decode(tape: &mut Tape, ids: &Ids, z: TensorId, cfg: &EncoderConfig) -> Result<TensorId> {
    let dims = tape.dims(z).to_vec();
    if dims.len() != 4 || dims[1] != cfg.n_z {
        return Err(Error::invalid("decode", format!("expected (N,{},h,w) latent, got {dims:?}", cfg.n_z)));
    }
    let strides = cfg.stage_strides()?;
    let mut h = conv(tape, ids, "ae.dec.conv0", z, (1, 1), 1)?;
    h = tape.silu(h)?;
    h = deconv(tape, ids, "ae.dec.deconv1", h, strides[1], 1)?;
    h = tape.silu(h)?;
    h = deconv(tape, ids, "ae.dec.deconv2", h, strides[0], 1)?;
    h = tape.silu(h)?;
    let out = conv(tape, ids, "ae.dec.conv3", h, (1, 1), 1)?;
    tape.tanh(out)
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserConfig {
    pub n_z: usize,
    pub base_channels: usize,
    /// Total diffusion steps; denoise accepts 1 <= t <= t_total.
    pub t_total: usize,
}

impl DenoiserConfig {
    pub fn toy(n_z: usize, t_total: usize) -> Self {
        DenoiserConfig { n_z, base_channels: 16, t_total }
    }

    fn cond_dim(&self) -> usize {
        TIME_EMBED_DIM + LABEL_EMBED_DIM
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000.0f32).powf(-(i as f32) / half as f32);
        e.push((t as f32 * freq).sin());
    }
    for i in 0..half {
        let freq = (10_000.0f32).powf(-(i as f32) / half as f32);
        e.push((t as f32 * freq).cos());
    }
    e
}

/// Initializes denoiser parameters ("ldm.*"): a 2-down/2-up U-net with a
/// FiLM site after every stage and a learned 3-row label embedding
/// (clear / adverse / null).
pub fn init_denoiser(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let c = cfg.base_channels;
    let nz = cfg.n_z;
    let mut store = ParamStore::new();
    store.insert_normal("ldm.label_embed", &[3, LABEL_EMBED_DIM], 0.02, rng);
    init_conv(&mut store, "ldm.conv_in", c, nz, 3, 3, rng);
    init_conv(&mut store, "ldm.down", 2 * c, c, 3, 3, rng);
    init_conv(&mut store, "ldm.mid", 2 * c, 2 * c, 3, 3, rng);
    init_deconv(&mut store, "ldm.up", 2 * c, c, 4, 4, rng);
    init_conv(&mut store, "ldm.fuse", c, 2 * c, 3, 3, rng);
    init_conv(&mut store, "ldm.conv_out", nz, c, 3, 3, rng);
    let d = cfg.cond_dim();
    for (site, ch) in [(0usize, c), (1, 2 * c), (2, 2 * c), (3, c)] {
        // gamma is 1 + dgamma, so zero-init weights start at identity
        init_linear(&mut store, &format!("ldm.film{site}.gamma"), d, ch, 0.01, rng);
        init_linear(&mut store, &format!("ldm.film{site}.beta"), d, ch, 0.01, rng);
    }
    Ok(store)
}

/// Per-channel modulation of `a` by gamma/beta computed from `cond` at one
/// FiLM site: gamma = 1 + f_i(cond), beta = h_i(cond), applied uniformly
/// across spatial positions.
pub fn film_apply(tape: &mut Tape, ids: &Ids, site: usize, a: TensorId, cond: TensorId) -> Result<TensorId> {
    let dgamma = linear(tape, ids, &format!("ldm.film{site}.gamma"), cond)?;
    let gamma = tape.add_scalar(dgamma, 1.0)?;
    let beta = linear(tape, ids, &format!("ldm.film{site}.beta"), cond)?;
    tape.affine_scale_shift(a, gamma, beta)
}

/// Builds the conditioning vector e_t concatenated with the label embedding,
/// shape (N, 80).
pub fn conditioning(tape: &mut Tape, ids: &Ids, t: usize, labels: &[WeatherLabel]) -> Result<TensorId> {
    let n = labels.len();
    let e_t = time_embedding(t, TIME_EMBED_DIM);
    let mut et_data = Vec::with_capacity(n * TIME_EMBED_DIM);
    for _ in 0..n {
        et_data.extend_from_slice(&e_t);
    }
    let et = tape.constant(&[n, TIME_EMBED_DIM], et_data)?;
    let table = param(ids, "ldm.label_embed")?;
    let indices: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let emb4 = tape.gather_vq(table, &indices, (n, 1, 1))?;
    let emb = tape.reshape(emb4, &[n, LABEL_EMBED_DIM])?;
    tape.concat(&[et, emb], 1)
}

/// Predicts the noise in z_t. z_t is (N, n_z, h, w); every FiLM site sees
/// e_t concatenated with the label embedding.
pub fn denoise_eps(
    tape: &mut Tape,
    ids: &Ids,
    z_t: TensorId,
    t: usize,
    labels: &[WeatherLabel],
    cfg: &DenoiserConfig,
) -> Result<TensorId> {
    let dims = tape.dims(z_t).to_vec();
    if dims.len() != 4 || dims[1] != cfg.n_z {
        return Err(Error::invalid("denoise_eps", format!("expected (N,{},h,w) latent, got {dims:?}", cfg.n_z)));
    }
    if dims[0] != labels.len() {
        return Err(Error::invalid("denoise_eps", format!("{} labels for batch of {}", labels.len(), dims[0])));
    }
    if t < 1 || t > cfg.t_total {
        return Err(Error::invalid("denoise_eps", format!("step {t} outside [1, {}]", cfg.t_total)));
    }
    let cond = conditioning(tape, ids, t, labels)?;

    let mut h0 = conv(tape, ids, "ldm.conv_in", z_t, (1, 1), 1)?;
    h0 = tape.silu(h0)?;
    h0 = film_apply(tape, ids, 0, h0, cond)?;

    let mut h1 = conv(tape, ids, "ldm.down", h0, (2, 2), 1)?;
    h1 = tape.silu(h1)?;
    h1 = film_apply(tape, ids, 1, h1, cond)?;

    let mut h2 = conv(tape, ids, "ldm.mid", h1, (1, 1), 1)?;
    h2 = tape.silu(h2)?;
    h2 = film_apply(tape, ids, 2, h2, cond)?;

    let mut u = deconv(tape, ids, "ldm.up", h2, (2, 2), 1)?;
    u = tape.silu(u)?;
    let cat = tape.concat(&[u, h0], 1)?;
    let mut f = conv(tape, ids, "ldm.fuse", cat, (1, 1), 1)?;
    f = tape.silu(f)?;
    f = film_apply(tape, ids, 3, f, cond)?;

    conv(tape, ids, "ldm.conv_out", f, (1, 1), 1)
}
