//! DDPM schedule, epsilon-prediction training with condition dropout,
//! classifier-free guided sampling, and partial-diffusion augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::{denoise_eps, DenoiserConfig, WeatherLabel};
use crate::quantize::LatentGrid;
use crate::tensor::params::{ParamStore, Sgd};
use crate::tensor::Tape;

/// Forward-process tables. Steps are 1-based conceptually: `beta(t)` for
/// t in [1, T] reads the physical index t-1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_total: usize,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

impl DiffusionSchedule {
    /// Linear beta schedule (standard DDPM ramp 1e-4 -> 0.02).
    pub fn linear(t_total: usize, beta_start: f32, beta_end: f32) -> Self {
        let betas: Vec<f32> = (0..t_total)
            .map(|i| {
                if t_total == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f32 / (t_total - 1) as f32
                }
            })
            .collect();
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_total);
        let mut prod = 1.0f32;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        DiffusionSchedule { t_total, betas, alphas, alpha_bars }
    }

    pub fn toy() -> Self {
        Self::linear(100, 1e-4, 0.02)
    }

    pub fn full_scale() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t < 1 || t > self.t_total {
            return Err(Error::invalid(op, format!("step {t} outside [1, {}]", self.t_total)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t - 1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    /// Guidance scale, >= 0.
    pub w: f32,
    /// Probability of replacing the label with the null embedding in training.
    pub p_uncond: f32,
}

impl GuidanceConfig {
    pub fn new(w: f32, p_uncond: f32) -> Result<Self> {
        if w < 0.0 || !(0.0..1.0).contains(&p_uncond) {
            return Err(Error::invalid("guidance", format!("w={w} p_uncond={p_uncond}")));
        }
        Ok(GuidanceConfig { w, p_uncond })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 2.0, p_uncond: 0.1 }
    }
}

pub fn sample_noise_like(grid: &LatentGrid, rng: &mut ChaCha8Rng) -> LatentGrid {
    let values = (0..grid.values.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentGrid { h: grid.h, w: grid.w, n_z: grid.n_z, values }
}

/// Closed-form forward diffusion: sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.
pub fn q_sample(z0: &LatentGrid, t: usize, noise: &LatentGrid, sched: &DiffusionSchedule) -> Result<LatentGrid> {
    sched.check_t("q_sample", t)?;
    if z0.values.len() != noise.values.len() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: vec![z0.h, z0.w, z0.n_z],
            rhs: vec![noise.h, noise.w, noise.n_z],
        });
    }
    let ab = sched.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = z0
        .values
        .iter()
        .zip(&noise.values)
        .map(|(z, n)| s0 * z + s1 * n)
        .collect();
    Ok(LatentGrid { h: z0.h, w: z0.w, n_z: z0.n_z, values })
}

/// Frozen denoiser: parameters plus architecture config.
pub struct Denoiser<'a> {
    pub store: &'a ParamStore,
    pub cfg: DenoiserConfig,
}

impl<'a> Denoiser<'a> {
    pub fn new(store: &'a ParamStore, cfg: DenoiserConfig) -> Self {
        Denoiser { store, cfg }
    }

    /// Single-sample noise prediction.
    pub fn eps(&self, z_t: &LatentGrid, t: usize, label: WeatherLabel) -> Result<LatentGrid> {
        let mut tape = Tape::new();
        let ids = self.store.stage_frozen(&mut tape)?;
        let z = tape.leaf(&[1, z_t.n_z, z_t.h, z_t.w], z_t.to_chw(), false)?;
        let out = denoise_eps(&mut tape, &ids, z, t, &[label], &self.cfg)?;
        Ok(LatentGrid::from_chw(tape.data(out), z_t.n_z, z_t.h, z_t.w))
    }
}

/// Classifier-free guidance: (1+w) eps(z,t,b) - w eps(z,t,null).
/// With w = 0 this is bit-identical to the conditional prediction.
pub fn guided_eps(denoiser: &Denoiser, z_t: &LatentGrid, t: usize, b: WeatherLabel, w: f32) -> Result<LatentGrid> {
    if b == WeatherLabel::Null {
        return Err(Error::invalid("guided_eps", "label must be clear or adverse"));
    }
    let cond = denoiser.eps(z_t, t, b)?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = denoiser.eps(z_t, t, WeatherLabel::Null)?;
    let values = cond
        .values
        .iter()
        .zip(&uncond.values)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(LatentGrid { h: cond.h, w: cond.w, n_z: cond.n_z, values })
}

/// One reverse DDPM step. At t = 1 no noise is added, so the final step is
/// deterministic.
pub fn p_sample_step(
    denoiser: &Denoiser,
    z_t: &LatentGrid,
    t: usize,
    b: WeatherLabel,
    w: f32,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    sched.check_t("p_sample_step", t)?;
    let eps = guided_eps(denoiser, z_t, t, b, w)?;
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut values: Vec<f32> = z_t
        .values
        .iter()
        .zip(&eps.values)
        .map(|(z, e)| inv_sqrt_alpha * (z - coef * e))
        .collect();
    if t > 1 {
        let ab_prev = sched.alpha_bar(t - 1);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        for v in &mut values {
            *v += sigma * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(LatentGrid { h: z_t.h, w: z_t.w, n_z: z_t.n_z, values })
}

/// Partial diffusion: noise the clear latent to step t_aug, then denoise
/// back down conditioned on adverse weather (b = 1). t_aug = 0 is the
/// identity; t_aug must stay strictly below T.
pub fn partial_augment(
    denoiser: &Denoiser,
    z_clear: &LatentGrid,
    t_aug: usize,
    w: f32,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    if t_aug >= sched.t_total {
        return Err(Error::invalid("partial_augment", format!("t_aug {t_aug} must be < T = {}", sched.t_total)));
    }
    if t_aug == 0 {
        return Ok(z_clear.clone());
    }
    let noise = sample_noise_like(z_clear, rng);
    let mut z = q_sample(z_clear, t_aug, &noise, sched)?;
    for t in (1..=t_aug).rev() {
        z = p_sample_step(denoiser, &z, t, WeatherLabel::Adverse, w, sched, rng)?;
        if t % 10 == 0 {
            eprintln!("partial_augment: step {t}/{t_aug}");
        }
    }
    Ok(z)
}

/// One LDM optimization step: samples t and noise, drops the condition with
/// probability p_uncond, minimizes MSE between predicted and true noise.
/// Returns the loss.
pub fn train_step_ldm(
    z0_batch: &[LatentGrid],
    labels: &[WeatherLabel],
    sched: &DiffusionSchedule,
    guid: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore,
    cfg: &DenoiserConfig,
    opt: &mut Sgd,
) -> Result<f32> {
    if z0_batch.is_empty() || z0_batch.len() != labels.len() {
        return Err(Error::invalid("train_step_ldm", "batch and labels must be non-empty and equal length"));
    }
    let t = rng.gen_range(1..=sched.t_total);
    let (nz, h, w) = (z0_batch[0].n_z, z0_batch[0].h, z0_batch[0].w);
    let n = z0_batch.len();
    let mut zt_data = Vec::with_capacity(n * nz * h * w);
    let mut noise_data = Vec::with_capacity(n * nz * h * w);
    let mut used_labels = Vec::with_capacity(n);
    for (z0, &label) in z0_batch.iter().zip(labels) {
        let noise = sample_noise_like(z0, rng);
        let zt = q_sample(z0, t, &noise, sched)?;
        zt_data.extend_from_slice(&zt.to_chw());
        noise_data.extend_from_slice(&noise.to_chw());
        let dropped = rng.gen_bool(guid.p_uncond as f64);
        used_labels.push(if dropped { WeatherLabel::Null } else { label });
    }
    let mut tape = Tape::new();
    let ids = store.stage(&mut tape)?;
    let z_t = tape.leaf(&[n, nz, h, w], zt_data, false)?;
    let target = tape.leaf(&[n, nz, h, w], noise_data, false)?;
    let eps_hat = denoise_eps(&mut tape, &ids, z_t, t, &used_labels, cfg)?;
    let loss = tape.mse_loss(eps_hat, target)?;
    let loss_val = tape.data(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite { op: "train_step_ldm" });
    }
    let grads = tape.backward(loss)?;
    opt.step(store, &ids, &grads);
    Ok(loss_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_denoiser;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_tables_consistent() {
        let s = DiffusionSchedule::toy();
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        // abar_t equals the direct product
        let mut prod = 1.0f64;
        for t in 1..=s.t_total {
            prod *= s.alpha(t) as f64;
            assert!((s.alpha_bar(t) as f64 - prod).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = DiffusionSchedule::toy();
        let z0 = LatentGrid::new(2, 2, 2, vec![0.5; 8]).unwrap();
        let zero_noise = LatentGrid::zeros(2, 2, 2);
        // noise = 0 -> exactly sqrt(abar_t) z0
        let zt = q_sample(&z0, 7, &zero_noise, &s).unwrap();
        let expect = s.alpha_bar(7).sqrt() * 0.5;
        assert!(zt.values.iter().all(|&v| v == expect));
        // t = 1 with tiny beta stays close to z0
        let noise = sample_noise_like(&z0, &mut rng(0));
        let zt = q_sample(&z0, 1, &noise, &s).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * 3.0;
        for (v, z) in zt.values.iter().zip(&z0.values) {
            assert!((v - z).abs() <= bound + 1e-4);
        }
        assert!(q_sample(&z0, 0, &noise, &s).is_err());
        assert!(q_sample(&z0, 101, &noise, &s).is_err());
    }

    #[test]
    fn q_sample_terminal_statistics() {
        // full-scale schedule: at t = T the marginal is ~N(0,1)
        let s = DiffusionSchedule::full_scale();
        let n = 100_000usize;
        let z0 = LatentGrid::new(100, 100, 10, vec![0.0; n]).unwrap();
        let noise = sample_noise_like(&z0, &mut rng(42));
        let zt = q_sample(&z0, s.t_total, &noise, &s).unwrap();
        let mean: f64 = zt.values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = zt.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.95..=1.05).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn q_sample_second_moment() {
        // E||z_t||^2 = abar ||z0||^2 + (1 - abar) N within 2%
        let s = DiffusionSchedule::toy();
        let n = 50_000usize;
        let z0 = LatentGrid::new(100, 100, 5, vec![0.7; n]).unwrap();
        let noise = sample_noise_like(&z0, &mut rng(3));
        let t = 50;
        let zt = q_sample(&z0, t, &noise, &s).unwrap();
        let got: f64 = zt.values.iter().map(|&v| (v as f64).powi(2)).sum();
        let ab = s.alpha_bar(t) as f64;
        let want = ab * 0.49 * n as f64 + (1.0 - ab) * n as f64;
        assert!((got - want).abs() / want < 0.02, "{got} vs {want}");
    }

    #[test]
    fn guidance_algebra() {
        let cfg = DenoiserConfig { n_z: 2, base_channels: 4, t_total: 10 };
        let store = init_denoiser(&cfg, &mut rng(1)).unwrap();
        let den = Denoiser::new(&store, cfg);
        let z = LatentGrid::new(4, 4, 2, (0..32).map(|i| (i as f32 - 16.0) / 20.0).collect()).unwrap();
        // w = 0 bit-identical to the conditional prediction
        let g0 = guided_eps(&den, &z, 3, WeatherLabel::Adverse, 0.0).unwrap();
        let c = den.eps(&z, 3, WeatherLabel::Adverse).unwrap();
        assert_eq!(g0.values, c.values);
        // w = 1 -> 2 eps_c - eps_u elementwise
        let u = den.eps(&z, 3, WeatherLabel::Null).unwrap();
        let g1 = guided_eps(&den, &z, 3, WeatherLabel::Adverse, 1.0).unwrap();
        for ((g, c), u) in g1.values.iter().zip(&c.values).zip(&u.values) {
            assert!((g - (2.0 * c - u)).abs() < 1e-6);
        }
        assert!(guided_eps(&den, &z, 3, WeatherLabel::Null, 1.0).is_err());
    }

    #[test]
    fn p_sample_final_step_deterministic() {
        let cfg = DenoiserConfig { n_z: 2, base_channels: 4, t_total: 10 };
        let store = init_denoiser(&cfg, &mut rng(1)).unwrap();
        let den = Denoiser::new(&store, cfg);
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.02);
        let z = LatentGrid::new(4, 4, 2, vec![0.3; 32]).unwrap();
        let a = p_sample_step(&den, &z, 1, WeatherLabel::Adverse, 1.0, &sched, &mut rng(100)).unwrap();
        let b = p_sample_step(&den, &z, 1, WeatherLabel::Adverse, 1.0, &sched, &mut rng(999)).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.len(), z.values.len());
    }

    #[test]
    fn partial_augment_identity_and_bounds() {
        let cfg = DenoiserConfig { n_z: 2, base_channels: 4, t_total: 10 };
        let store = init_denoiser(&cfg, &mut rng(1)).unwrap();
        let den = Denoiser::new(&store, cfg);
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.02);
        let z = LatentGrid::new(4, 4, 2, vec![0.2; 32]).unwrap();
        let out = partial_augment(&den, &z, 0, 1.0, &sched, &mut rng(0)).unwrap();
        assert_eq!(out.values, z.values);
        assert!(partial_augment(&den, &z, 10, 1.0, &sched, &mut rng(0)).is_err());
        // a short chain stays finite
        let out = partial_augment(&den, &z, 5, 1.0, &sched, &mut rng(0)).unwrap();
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_step_runs_and_uncond_drop_blocks_label_grads() {
        let cfg = DenoiserConfig { n_z: 2, base_channels: 4, t_total: 10 };
        let mut store = init_denoiser(&cfg, &mut rng(1)).unwrap();
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.02);
        let guid = GuidanceConfig { w: 0.0, p_uncond: 1.0 };
        let mut opt = Sgd::new(1e-3, 0.9);
        let z0 = LatentGrid::new(4, 4, 2, vec![0.1; 32]).unwrap();
        let before = store.get("ldm.label_embed").unwrap().data.clone();
        let loss = train_step_ldm(
            &[z0.clone()],
            &[WeatherLabel::Adverse],
            &sched,
            &guid,
            &mut rng(0),
            &mut store,
            &cfg,
            &mut opt,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let after = &store.get("ldm.label_embed").unwrap().data;
        // with p_uncond = 1 only the null row (index 2) may move
        assert_eq!(&before[..2 * 16], &after[..2 * 16]);
    }
}
