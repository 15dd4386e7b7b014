//! Training loops: quantized autoencoder first, then the latent denoiser on
//! top of the frozen autoencoder. Also hosts the forward-only encode/decode
//! helpers the augmentation pipeline shares with training.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{train_step_ldm, DiffusionSchedule, GuidanceConfig};
use crate::error::{Error, Result};
use crate::nets::{decode, encode, init_autoencoder, init_denoiser, DenoiserConfig, EncoderConfig, WeatherLabel};
use crate::quantize::{
    commit_loss, lq_from_store, lq_into_store, lq_quantize, lq_quantize_node, quantize_loss, vq_from_store,
    vq_into_store, vq_quantize, vq_quantize_node, LatentGrid, LqCodebooks, QuantizeNodes, QuantizerKind, VqCodebook,
};
use crate::range_codec::{load_rimg, RangeImage};
use crate::tensor::{ParamStore, Sgd, Tape, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub quantizer: QuantizerKind,
    pub seed: u64,
    /// VQ codebook entries (K) or LQ per-component levels (r_c).
    pub codebook_size: usize,
}

impl TrainConfig {
    pub fn toy(quantizer: QuantizerKind, seed: u64) -> Self {
        let codebook_size = match quantizer {
            QuantizerKind::Vq => 128,
            QuantizerKind::Lq => 16,
        };
        TrainConfig { steps: 400, batch: 4, lr: 1e-3, quantizer, seed, codebook_size }
    }
}

/// Paired clear/snow range images, index-aligned.
pub struct Dataset {
    pub clear: Vec<RangeImage>,
    pub snow: Vec<RangeImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clear.is_empty()
    }
}

/// Loads the .rimg pairs listed in a dataset.txt manifest (tab-separated
/// clear.lpc, snow.lpc, clear.rimg, snow.rimg per line).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("dataset.txt");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::Io { path: manifest.display().to_string(), source: e })?;
    let mut clear = Vec::new();
    let mut snow = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format {
                path: manifest.display().to_string(),
                msg: format!("line {}: expected 4 tab-separated columns", lineno + 1),
            });
        }
        clear.push(load_rimg(&dir.join(cols[2]))?);
        snow.push(load_rimg(&dir.join(cols[3]))?);
    }
    if clear.is_empty() {
        return Err(Error::Format { path: manifest.display().to_string(), msg: "empty manifest".into() });
    }
    Ok(Dataset { clear, snow })
}

fn quantize_on_tape(
    tape: &mut Tape,
    kind: QuantizerKind,
    z: TensorId,
    codebook: TensorId,
) -> Result<QuantizeNodes> {
    match kind {
        QuantizerKind::Vq => vq_quantize_node(tape, z, codebook),
        QuantizerKind::Lq => lq_quantize_node(tape, z, codebook),
    }
}

fn codebook_param(kind: QuantizerKind) -> &'static str {
    match kind {
        QuantizerKind::Vq => crate::quantize::VQ_PARAM,
        QuantizerKind::Lq => crate::quantize::LQ_PARAM,
    }
}

/// Deterministic mixed-weather batch: clear and snow images alternate,
/// cycling through the dataset.
fn batch_images<'a>(ds: &'a Dataset, step: usize, batch: usize) -> Vec<(&'a RangeImage, WeatherLabel)> {
    (0..batch)
        .map(|i| {
            let k = step * batch + i;
            let idx = (k / 2) % ds.len();
            if k % 2 == 0 {
                (&ds.clear[idx], WeatherLabel::Clear)
            } else {
                (&ds.snow[idx], WeatherLabel::Adverse)
            }
        })
        .collect()
}

fn stack_batch(tape: &mut Tape, imgs: &[(&RangeImage, WeatherLabel)]) -> Result<TensorId> {
    let (h, w) = (imgs[0].0.height, imgs[0].0.width);
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for (img, _) in imgs {
        if img.height != h || img.width != w {
            return Err(Error::invalid("stack_batch", "all images in a batch must share one shape"));
        }
        data.extend_from_slice(&img.depth);
    }
    tape.leaf(&[imgs.len(), 1, h, w], data, false)
}

/// Trains encoder, decoder, and codebook jointly: L1 reconstruction plus
/// quantize and commit losses at unit weights. Appends one CSV line per step
/// to `log` ("step,l_rec,l_quantize,l_commit"); aborts with the step number
/// if the loss goes non-finite. Returns the trained store (autoencoder +
/// codebook).
pub fn train_autoencoder(
    ds: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<ParamStore> {
    if ds.is_empty() {
        return Err(Error::stage("train_ae", "dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_autoencoder(enc_cfg, &mut rng)?;
    match cfg.quantizer {
        QuantizerKind::Vq => vq_into_store(&VqCodebook::init(cfg.codebook_size, enc_cfg.n_z, cfg.seed ^ 0x51), &mut store),
        QuantizerKind::Lq => lq_into_store(&LqCodebooks::init(enc_cfg.n_z, cfg.codebook_size), &mut store),
    }
    let mut opt = Sgd::new(cfg.lr, 0.9);
    if let Some(log) = log.as_mut() {
        writeln!(log, "step,l_rec,l_quantize,l_commit").map_err(log_err)?;
    }
    for step in 0..cfg.steps {
        let imgs = batch_images(ds, step, cfg.batch);
        let mut tape = Tape::new();
        let ids = store.stage(&mut tape)?;
        let x = stack_batch(&mut tape, &imgs)?;
        let z = encode(&mut tape, &ids, x, enc_cfg)?;
        let cb = ids[codebook_param(cfg.quantizer)];
        let q = quantize_on_tape(&mut tape, cfg.quantizer, z, cb)?;
        let x_hat = decode(&mut tape, &ids, q.straight_through, enc_cfg)?;
        let l_rec = tape.l1_loss(x_hat, x)?;
        let l_quant = quantize_loss(&mut tape, z, q.raw)?;
        let l_commit = commit_loss(&mut tape, z, q.raw)?;
        let partial = tape.add(l_rec, l_quant)?;
        let loss = tape.add(partial, l_commit)?;
        let vals = (tape.data(l_rec)[0], tape.data(l_quant)[0], tape.data(l_commit)[0]);
        if !(vals.0.is_finite() && vals.1.is_finite() && vals.2.is_finite()) {
            return Err(Error::stage("train_ae", format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut store, &ids, &grads);
        if let Some(log) = log.as_mut() {
            writeln!(log, "{step},{:.6},{:.6},{:.6}", vals.0, vals.1, vals.2).map_err(log_err)?;
        }
        if step % 50 == 0 {
            eprintln!("train_ae: step {step}/{} l_rec={:.4}", cfg.steps, vals.0);
        }
    }
    Ok(store)
}

fn log_err(e: std::io::Error) -> Error {
    Error::Io { path: "train log".into(), source: e }
}

/// Forward-only encode of one range image through a trained store.
pub fn encode_image(store: &ParamStore, enc_cfg: &EncoderConfig, img: &RangeImage) -> Result<LatentGrid> {
    let mut tape = Tape::new();
    let ids = store.stage_frozen(&mut tape)?;
    let x = tape.leaf(&[1, 1, img.height, img.width], img.depth.clone(), false)?;
    let z = encode(&mut tape, &ids, x, enc_cfg)?;
    let dims = tape.dims(z).to_vec();
    Ok(LatentGrid::from_chw(tape.data(z), dims[1], dims[2], dims[3]))
}

/// Forward-only decode of one latent back to a range image.
pub fn decode_latent(
    store: &ParamStore,
    enc_cfg: &EncoderConfig,
    z: &LatentGrid,
    r_max: f32,
) -> Result<RangeImage> {
    let mut tape = Tape::new();
    let ids = store.stage_frozen(&mut tape)?;
    let zt = tape.leaf(&[1, z.n_z, z.h, z.w], z.to_chw(), false)?;
    let x = decode(&mut tape, &ids, zt, enc_cfg)?;
    let dims = tape.dims(x).to_vec();
    Ok(RangeImage { height: dims[2], width: dims[3], depth: tape.data(x).to_vec(), r_max })
}

/// Value-level quantization of a latent against the codebook stored under the
/// quantizer's parameter name.
pub fn quantize_latent(store: &ParamStore, kind: QuantizerKind, z: &LatentGrid) -> Result<LatentGrid> {
    match kind {
        QuantizerKind::Vq => Ok(vq_quantize(z, &vq_from_store(store)?)?.0),
        QuantizerKind::Lq => Ok(lq_quantize(z, &lq_from_store(store)?)?.0),
    }
}

/// Trains the latent denoiser over the frozen autoencoder. Latents are
/// precomputed once (encode + quantize); labels are clear = 0, snow = 1.
/// Returns the trained denoiser store; the autoencoder store is untouched
/// and verified bit-identical afterwards.
pub fn train_ldm(
    ds: &Dataset,
    ae_store: &ParamStore,
    enc_cfg: &EncoderConfig,
    den_cfg: &DenoiserConfig,
    sched: &DiffusionSchedule,
    guid: &GuidanceConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<ParamStore> {
    if ds.is_empty() {
        return Err(Error::stage("train_ldm", "dataset is empty"));
    }
    if sched.t_total != den_cfg.t_total {
        return Err(Error::stage("train_ldm", "schedule and denoiser disagree on T"));
    }
    let ae_before: Vec<(String, Vec<f32>)> =
        ae_store.iter().map(|(n, p)| (n.to_string(), p.data.clone())).collect();
    // frozen AE: encode the whole dataset once
    let mut latents: Vec<(LatentGrid, WeatherLabel)> = Vec::with_capacity(2 * ds.len());
    for i in 0..ds.len() {
        let zc = encode_image(ae_store, enc_cfg, &ds.clear[i])?;
        let zs = encode_image(ae_store, enc_cfg, &ds.snow[i])?;
        latents.push((quantize_latent(ae_store, cfg.quantizer, &zc)?, WeatherLabel::Clear));
        latents.push((quantize_latent(ae_store, cfg.quantizer, &zs)?, WeatherLabel::Adverse));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1d1));
    let mut store = init_denoiser(den_cfg, &mut rng)?;
    let mut opt = Sgd::new(cfg.lr, 0.9);
    if let Some(log) = log.as_mut() {
        writeln!(log, "step,l_eps").map_err(log_err)?;
    }
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let (z, l) = &latents[(step * cfg.batch + i) % latents.len()];
            batch.push(z.clone());
            labels.push(*l);
        }
        let loss = train_step_ldm(&batch, &labels, sched, guid, &mut rng, &mut store, den_cfg, &mut opt)?;
        if !loss.is_finite() {
            return Err(Error::stage("train_ldm", format!("non-finite loss at step {step}")));
        }
        if let Some(log) = log.as_mut() {
            writeln!(log, "{step},{loss:.6}").map_err(log_err)?;
        }
        if step % 50 == 0 {
            eprintln!("train_ldm: step {step}/{} l_eps={loss:.4}", cfg.steps);
        }
    }
    for (name, data) in &ae_before {
        let now = ae_store.get(name).expect("ae param vanished");
        if &now.data != data {
            return Err(Error::stage("train_ldm", format!("frozen parameter {name} changed")));
        }
    }
    Ok(store)
}

/// Knobs for the augmentation pipeline.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    /// Partial-diffusion depth; 0 is the identity edit.
    pub t_aug: usize,
    /// Classifier-free guidance weight.
    pub w: f32,
    /// Snap the edited latent back onto the codebook before decoding.
    pub requantize: bool,
    pub seed: u64,
}

/// Full augmentation of one clear range image: encode, quantize, partial
/// diffusion toward adverse weather, (re)quantize, decode. Postprocessing
/// against the input is left to the caller so both variants can be saved.
pub fn augment_image(
    ae_store: &ParamStore,
    ldm_store: &ParamStore,
    enc_cfg: &EncoderConfig,
    den_cfg: &DenoiserConfig,
    sched: &DiffusionSchedule,
    quantizer: QuantizerKind,
    img: &RangeImage,
    aug: &AugmentConfig,
) -> Result<RangeImage> {
    let z = encode_image(ae_store, enc_cfg, img).map_err(|e| Error::stage("augment/encode", e.to_string()))?;
    let zq = quantize_latent(ae_store, quantizer, &z).map_err(|e| Error::stage("augment/quantize", e.to_string()))?;
    let denoiser = crate::diffusion::Denoiser::new(ldm_store, *den_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
    let mut edited = crate::diffusion::partial_augment(&denoiser, &zq, aug.t_aug, aug.w, sched, &mut rng)
        .map_err(|e| Error::stage("augment/diffusion", e.to_string()))?;
    if aug.requantize {
        edited = quantize_latent(ae_store, quantizer, &edited)
            .map_err(|e| Error::stage("augment/requantize", e.to_string()))?;
    }
    decode_latent(ae_store, enc_cfg, &edited, img.r_max).map_err(|e| Error::stage("augment/decode", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range_codec::SensorConfig;
    use crate::synthdata::{gen_dataset, SnowSpec};

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SensorConfig::toy();
        gen_dataset(4, &SnowSpec::default(), &cfg, 5, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn dataset_roundtrip() {
        let (_dir, ds) = tiny_dataset();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.clear[0].height, 32);
        assert_eq!(ds.snow[0].width, 64);
    }

    #[test]
    fn batches_alternate_weather() {
        let (_dir, ds) = tiny_dataset();
        let b = batch_images(&ds, 0, 4);
        assert_eq!(b[0].1, WeatherLabel::Clear);
        assert_eq!(b[1].1, WeatherLabel::Adverse);
        assert_eq!(b[2].1, WeatherLabel::Clear);
        // same step -> same batch
        let b2 = batch_images(&ds, 0, 4);
        for (x, y) in b.iter().zip(&b2) {
            assert_eq!(x.0.depth, y.0.depth);
        }
    }

    #[test]
    fn ae_loss_decreases_on_tiny_run() {
        let (_dir, ds) = tiny_dataset();
        let enc_cfg = EncoderConfig::toy();
        let cfg = TrainConfig { steps: 30, batch: 2, lr: 1e-3, quantizer: QuantizerKind::Lq, seed: 0, codebook_size: 16 };
        let mut log = Vec::new();
        let store = train_autoencoder(&ds, &enc_cfg, &cfg, Some(&mut log)).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,l_rec,l_quantize,l_commit");
        assert_eq!(lines.len(), 31);
        let rec = |line: &str| line.split(',').nth(1).unwrap().parse::<f32>().unwrap();
        let first = rec(lines[1]);
        let last = rec(lines[30]);
        assert!(last < first, "l_rec should drop: {first} -> {last}");
        assert!(store.get("ae.enc.conv0.w").is_some());
        assert!(store.get(crate::quantize::LQ_PARAM).is_some());
    }

    #[test]
    fn encode_decode_shapes() {
        let (_dir, ds) = tiny_dataset();
        let enc_cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = init_autoencoder(&enc_cfg, &mut rng).unwrap();
        lq_into_store(&LqCodebooks::init(enc_cfg.n_z, 16), &mut store);
        let z = encode_image(&store, &enc_cfg, &ds.clear[0]).unwrap();
        assert_eq!((z.h, z.w, z.n_z), (32 / enc_cfg.f_h, 64 / enc_cfg.f_w, enc_cfg.n_z));
        let zq = quantize_latent(&store, QuantizerKind::Lq, &z).unwrap();
        let img = decode_latent(&store, &enc_cfg, &zq, 120.0).unwrap();
        assert_eq!((img.height, img.width), (32, 64));
        assert!(img.depth.iter().all(|d| (-1.0..=1.0).contains(d)));
    }

    #[test]
    fn ldm_trains_without_touching_ae() {
        let (_dir, ds) = tiny_dataset();
        let enc_cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ae = init_autoencoder(&enc_cfg, &mut rng).unwrap();
        lq_into_store(&LqCodebooks::init(enc_cfg.n_z, 16), &mut ae);
        let sched = DiffusionSchedule::toy();
        let den_cfg = DenoiserConfig::toy(enc_cfg.n_z, sched.t_total);
        let cfg = TrainConfig { steps: 5, batch: 2, lr: 1e-3, quantizer: QuantizerKind::Lq, seed: 3, codebook_size: 16 };
        let guid = GuidanceConfig::default();
        let store = train_ldm(&ds, &ae, &enc_cfg, &den_cfg, &sched, &guid, &cfg, None).unwrap();
        assert!(store.get("ldm.conv_in.w").is_some());
        assert!(store.get("ae.enc.conv0.w").is_none(), "denoiser store must not carry AE params");
    }
}
