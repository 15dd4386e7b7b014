//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snowaug::diffusion::{
    guided_eps, partial_augment, q_sample, sample_noise_like, Denoiser, DiffusionSchedule, GuidanceConfig,
};
use snowaug::metrics::{chamfer, jsd_voxel};
use snowaug::nets::{init_denoiser, DenoiserConfig, EncoderConfig, WeatherLabel};
use snowaug::postprocess::{depth_threshold, postprocess, PostprocessParams};
use snowaug::quantize::{
    lq_quantize, lq_quantize_node, vq_quantize, vq_quantize_node, LatentGrid, LqCodebooks, QuantizerKind, VqCodebook,
};
use snowaug::range_codec::{project, unproject, PointCloud, RangeImage, SensorConfig};
use snowaug::synthdata::{gen_dataset, SnowSpec};
use snowaug::tensor::{check_gradients, Tape, TensorId};
use snowaug::train::{
    augment_image, decode_latent, encode_image, load_dataset, quantize_latent, train_autoencoder, train_ldm,
    AugmentConfig, TrainConfig,
};
use snowaug::Result;

fn criterion<F>(n: u32, desc: &str, f: F)
where
    F: FnOnce() + std::panic::UnwindSafe,
{
    let outcome = std::panic::catch_unwind(f);
    let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
    println!("criterion {n:02} {status}: {desc}");
    if let Err(e) = outcome {
        std::panic::resume_unwind(e);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(h: usize, w: usize, n_z: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    let values = (0..h * w * n_z).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
    LatentGrid::new(h, w, n_z, values).unwrap()
}

#[test]
fn c01_quantizer_brute_force() {
    criterion(1, "VQ/LQ index selection matches exhaustive brute force", || {
        let mut r = rng(10);
        for case in 0..500 {
            let (h, w, n_z) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
            let z = random_grid(h, w, n_z, &mut r);
            let k = r.gen_range(1..=16);
            let flat: Vec<f32> = (0..k * n_z).map(|_| r.gen_range(-1.5f32..1.5)).collect();
            let cb = VqCodebook::from_flat(k, n_z, flat).unwrap();
            let (_, idx) = vq_quantize(&z, &cb).unwrap();
            for (site, &got) in idx.iter().enumerate() {
                let (i, j) = (site / w, site % w);
                let zv = z.site(i, j);
                let mut best = (0usize, f32::INFINITY);
                for c in 0..k {
                    let d: f32 = cb.code(c).iter().zip(zv).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                assert_eq!(got, best.0, "vq case {case} site {site}");
            }

            let rc = r.gen_range(1..=16);
            let flat: Vec<f32> = (0..n_z * rc).map(|_| r.gen_range(-1.5f32..1.5)).collect();
            let cbs = LqCodebooks::from_flat(n_z, rc, flat).unwrap();
            let (_, idx) = lq_quantize(&z, &cbs).unwrap();
            for (site, chunk) in idx.chunks(n_z).enumerate() {
                let (i, j) = (site / w, site % w);
                let zv = z.site(i, j);
                for (c, &got) in chunk.iter().enumerate() {
                    let book = cbs.codebook(c);
                    let mut best = (0usize, f32::INFINITY);
                    for (e, &v) in book.iter().enumerate() {
                        let d = (v - zv[c]) * (v - zv[c]);
                        if d < best.1 {
                            best = (e, d);
                        }
                    }
                    assert_eq!(got, best.0, "lq case {case} site {site} comp {c}");
                }
            }
        }
    });
}

#[test]
fn c02_straight_through_gradient() {
    criterion(2, "backward of sum(z_q) w.r.t. z is all-ones for both quantizers", || {
        let mut r = rng(20);
        let z = random_grid(3, 4, 5, &mut r);
        let cb = VqCodebook::init(7, 5, 3);
        let cbs = LqCodebooks::init(5, 6);

        let mut tape = Tape::new();
        let zt = tape.leaf(&[1, 5, 3, 4], z.to_chw(), true).unwrap();
        let cbt = tape.leaf(&[7, 5], cb.vectors.clone(), true).unwrap();
        let q = vq_quantize_node(&mut tape, zt, cbt).unwrap();
        let s = tape.sum(q.straight_through).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(zt, 60).iter().all(|&g| g == 1.0), "vq straight-through");

        let mut tape = Tape::new();
        let zt = tape.leaf(&[1, 5, 3, 4], z.to_chw(), true).unwrap();
        let cbt = tape.leaf(&[5, 6], cbs.values.clone(), true).unwrap();
        let q = lq_quantize_node(&mut tape, zt, cbt).unwrap();
        let s = tape.sum(q.straight_through).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(zt, 60).iter().all(|&g| g == 1.0), "lq straight-through");
    });
}

#[test]
fn c03_learnable_budgets() {
    criterion(3, "full-scale configs give exactly 262144 (VQ) and 4096 (LQ) learnable scalars", || {
        assert_eq!(VqCodebook::init(16384, 16, 0).learnable_count(), 262_144);
        assert_eq!(LqCodebooks::init(16, 256).learnable_count(), 4_096);
    });
}

fn check_op<F>(name: &str, dims: &[&[usize]], tol: f32, build: F)
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    for seed in 0..5u64 {
        let err = check_gradients(dims, seed, &build).unwrap();
        assert!(err < tol, "{name} seed {seed}: rel err {err} >= {tol}");
    }
}

#[test]
fn c04_op_gradient_checks() {
    criterion(4, "finite-difference gradient check over every op, seeds 0-4", || {
        check_op("add", &[&[2, 3], &[2, 3]], 1e-4, |t, l| {
            let y = t.add(l[0], l[1])?;
            t.sum(y)
        });
        check_op("sub", &[&[2, 3], &[2, 3]], 1e-4, |t, l| {
            let y = t.sub(l[0], l[1])?;
            t.sum(y)
        });
        check_op("mul", &[&[2, 3], &[2, 3]], 1e-4, |t, l| {
            let y = t.mul(l[0], l[1])?;
            t.sum(y)
        });
        check_op("scale", &[&[7]], 1e-4, |t, l| {
            let y = t.scale(l[0], 1.7)?;
            t.sum(y)
        });
        check_op("add_scalar", &[&[7]], 1e-4, |t, l| {
            let y = t.add_scalar(l[0], 0.3)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("matmul", &[&[3, 4], &[4, 2]], 1e-4, |t, l| {
            let y = t.matmul(l[0], l[1])?;
            t.sum(y)
        });
        check_op("bias_add_2d", &[&[2, 3], &[3]], 1e-4, |t, l| {
            let y = t.bias_add(l[0], l[1])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("bias_add_4d", &[&[1, 3, 2, 2], &[3]], 1e-4, |t, l| {
            let y = t.bias_add(l[0], l[1])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("relu", &[&[9]], 1e-3, |t, l| {
            let y = t.relu(l[0])?;
            t.sum(y)
        });
        check_op("silu", &[&[9]], 1e-4, |t, l| {
            let y = t.silu(l[0])?;
            t.sum(y)
        });
        check_op("tanh", &[&[9]], 1e-4, |t, l| {
            let y = t.tanh(l[0])?;
            t.sum(y)
        });
        check_op("reshape", &[&[2, 3], &[6]], 1e-4, |t, l| {
            let y = t.reshape(l[0], &[6])?;
            let y = t.mul(y, l[1])?;
            t.sum(y)
        });
        check_op("concat", &[&[2, 3], &[2, 2]], 1e-4, |t, l| {
            let y = t.concat(&[l[0], l[1]], 1)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("mean", &[&[8]], 1e-4, |t, l| {
            let y = t.mul(l[0], l[0])?;
            t.sum(y)
        });
        check_op("sum", &[&[8]], 1e-4, |t, l| {
            let y = t.mul(l[0], l[0])?;
            t.sum(y)
        });
        check_op("l1_loss", &[&[7], &[7]], 1e-3, |t, l| {
            // shift one side so |a - b| never straddles zero under FD eps
            let b = t.add_scalar(l[1], 3.0)?;
            t.l1_loss(l[0], b)
        });
        check_op("mse_loss", &[&[7], &[7]], 1e-4, |t, l| t.mse_loss(l[0], l[1]));
        check_op("stop_gradient", &[&[6]], 1e-4, |t, l| {
            let c = t.constant(&[6], vec![0.5; 6])?;
            let sg = t.stop_gradient(c)?;
            let y = t.mul(l[0], sg)?;
            t.sum(y)
        });
        check_op("affine_scale_shift", &[&[2, 3, 2, 2], &[2, 3], &[2, 3]], 1e-4, |t, l| {
            let y = t.affine_scale_shift(l[0], l[1], l[2])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("gather_vq", &[&[5, 3]], 1e-4, |t, l| {
            let y = t.gather_vq(l[0], &[0, 2, 4, 1], (1, 2, 2))?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("gather_lq", &[&[3, 4]], 1e-4, |t, l| {
            let idx = [0, 1, 2, 3, 3, 2, 1, 0, 0, 2, 1, 3];
            let y = t.gather_lq(l[0], &idx, &[1, 3, 2, 2])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check_op("conv2d", &[&[1, 2, 5, 6], &[3, 2, 3, 3]], 1e-3, |t, l| {
            let y = t.conv2d(l[0], l[1], (1, 1), 1)?;
            t.sum(y)
        });
        check_op("conv2d_strided", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], 1e-3, |t, l| {
            let y = t.conv2d(l[0], l[1], (2, 2), 1)?;
            t.sum(y)
        });
        check_op("conv2d_transpose", &[&[1, 2, 3, 4], &[2, 3, 4, 4]], 1e-3, |t, l| {
            let y = t.conv2d_transpose(l[0], l[1], (2, 2), 1)?;
            t.sum(y)
        });
    });
}

#[test]
fn c05_projection_round_trip() {
    criterion(5, "project/unproject round trip within range and azimuth bounds", || {
        let cfg = SensorConfig::beam_linear(32, 64, 120.0);
        let elev = cfg.beam_elevations.clone().unwrap();
        let mut r = rng(50);
        // 1000 points in distinct pixels, each exactly on its row elevation
        let mut taken = std::collections::HashSet::new();
        let mut points = Vec::new();
        let mut beams = Vec::new();
        let mut truth = Vec::new();
        while points.len() < 1000 {
            let row = r.gen_range(0..32usize);
            let col = r.gen_range(0..64usize);
            if !taken.insert((row, col)) {
                continue;
            }
            let range = r.gen_range(1.0f32..119.0);
            let theta = (col as f32 + r.gen_range(0.01..0.99)) / 64.0 * 2.0 * std::f32::consts::PI
                - std::f32::consts::PI;
            let (phi, range64, theta64) = (elev[row] as f64, range as f64, theta as f64);
            points.push([
                (range64 * phi.cos() * theta64.cos()) as f32,
                (range64 * phi.cos() * theta64.sin()) as f32,
                (range64 * phi.sin()) as f32,
            ]);
            beams.push(row as u16);
            truth.push((row, col, range, theta));
        }
        let cloud = PointCloud::new(points, beams).unwrap();
        let img = project(&cloud, &cfg).unwrap();
        let back = unproject(&img, &cfg).unwrap();
        // index the recovered points by pixel
        let mut by_pixel = std::collections::HashMap::new();
        for (p, &b) in back.points.iter().zip(&back.beam) {
            let theta = p[1].atan2(p[0]);
            let col = (((theta + std::f32::consts::PI) / (2.0 * std::f32::consts::PI) * 64.0).floor() as usize)
                .min(63);
            by_pixel.insert((b as usize, col), *p);
        }
        for (row, col, range, theta) in truth {
            let p = by_pixel[&(row, col)];
            let r_back = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r_back - range).abs() <= 120.0 * 1e-6, "range {range} -> {r_back}");
            let theta_back = p[1].atan2(p[0]);
            let mut dtheta = (theta_back - theta).abs();
            if dtheta > std::f32::consts::PI {
                dtheta = 2.0 * std::f32::consts::PI - dtheta;
            }
            assert!(dtheta <= std::f32::consts::PI / 64.0, "azimuth {theta} -> {theta_back}");
        }
    });
}

#[test]
fn c06_diffusion_forward_statistics() {
    criterion(6, "q_sample statistics at t=T and partial_augment identity at t_aug=0", || {
        let sched = DiffusionSchedule::full_scale();
        let z0 = LatentGrid::zeros(50, 50, 40); // 1e5 elements
        let mut r = rng(60);
        let noise = sample_noise_like(&z0, &mut r);
        let zt = q_sample(&z0, sched.t_total, &noise, &sched).unwrap();
        let n = zt.values.len() as f64;
        let mean: f64 = zt.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = zt.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.95..=1.05).contains(&var.sqrt()), "std {}", var.sqrt());

        let toy = DiffusionSchedule::toy();
        let cfg = DenoiserConfig::toy(4, toy.t_total);
        let store = init_denoiser(&cfg, &mut r).unwrap();
        let den = Denoiser::new(&store, cfg);
        let z = random_grid(4, 4, 4, &mut r);
        let out = partial_augment(&den, &z, 0, 2.0, &toy, &mut r).unwrap();
        assert_eq!(out.values, z.values, "t_aug = 0 must be the identity");
    });
}

#[test]
fn c07_classifier_free_guidance() {
    criterion(7, "w=0 guidance bit-identical to conditional; CFG algebra to 1e-6", || {
        let sched = DiffusionSchedule::toy();
        let cfg = DenoiserConfig::toy(4, sched.t_total);
        let mut r = rng(70);
        let store = init_denoiser(&cfg, &mut r).unwrap();
        let den = Denoiser::new(&store, cfg);
        let z = random_grid(4, 4, 4, &mut r);
        let cond = den.eps(&z, 30, WeatherLabel::Adverse).unwrap();
        let w0 = guided_eps(&den, &z, 30, WeatherLabel::Adverse, 0.0).unwrap();
        assert_eq!(w0.values, cond.values, "w = 0 must early-return the conditional");
        let uncond = den.eps(&z, 30, WeatherLabel::Null).unwrap();
        let w = 2.0f32;
        let guided = guided_eps(&den, &z, 30, WeatherLabel::Adverse, w).unwrap();
        for i in 0..guided.values.len() {
            let want = (1.0 + w) * cond.values[i] - w * uncond.values[i];
            assert!((guided.values[i] - want).abs() < 1e-6);
        }
    });
}

#[test]
fn c08_postprocess_contracts() {
    criterion(8, "depth-threshold blend: scalar cases, lambda extremes, pixel provenance", || {
        let p = PostprocessParams::new(0.3, 0.02).unwrap();
        let t = depth_threshold(&[0.0, 50.0], &p);
        assert_eq!(t[0], 0.3);
        assert!((t[1] - 0.3 * 1.0f32.exp()).abs() < 1e-5);

        let mut r = rng(80);
        let rand_img = |r: &mut ChaCha8Rng| RangeImage {
            height: 8,
            width: 16,
            depth: (0..128)
                .map(|_| if r.gen_bool(0.1) { -1.0 } else { r.gen_range(-0.99f32..1.0) })
                .collect(),
            r_max: 120.0,
        };
        for _ in 0..100 {
            let x = rand_img(&mut r);
            let y = rand_img(&mut r);
            let huge = postprocess(&x, &y, &PostprocessParams::new(1e6, 0.02).unwrap()).unwrap();
            assert_eq!(huge.depth, x.depth, "lambda -> inf returns the clear input");
            let zero = postprocess(&x, &y, &PostprocessParams::new(0.0, 0.02).unwrap()).unwrap();
            let out = postprocess(&x, &y, &p).unwrap();
            for i in 0..x.depth.len() {
                assert!(out.depth[i] == x.depth[i] || out.depth[i] == y.depth[i], "pixel provenance");
                // lambda = 0: pure min-depth blend at the r_max-sentinel convention
                let dx = if RangeImage::is_return(x.depth[i]) { x.depth[i] } else { 1.0 };
                let dy = if RangeImage::is_return(y.depth[i]) { y.depth[i] } else { 1.0 };
                let want = if dx <= dy { x.depth[i] } else { y.depth[i] };
                assert_eq!(zero.depth[i], want);
            }
        }
    });
}

#[test]
fn c09_metrics_oracles() {
    criterion(9, "CD matches brute force; CD/JSD identities and bounds", || {
        let mut r = rng(90);
        let cloud = |r: &mut ChaCha8Rng| {
            let pts: Vec<[f32; 3]> = (0..100)
                .map(|_| [r.gen_range(1.0f32..20.0), r.gen_range(-10.0f32..10.0), r.gen_range(-2.0f32..5.0)])
                .collect();
            PointCloud::new(pts, vec![0; 100]).unwrap()
        };
        let a = cloud(&mut r);
        let b = cloud(&mut r);
        let cd = chamfer(&a, &b).unwrap();
        let directed = |x: &PointCloud, y: &PointCloud| {
            x.points
                .iter()
                .map(|p| {
                    y.points
                        .iter()
                        .map(|q| {
                            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / 100.0
        };
        assert!((cd - (directed(&a, &b) + directed(&b, &a))).abs() < 1e-6);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(jsd_voxel(&a, &a, 0.15).unwrap(), 0.0);
        let j = jsd_voxel(&a, &b, 0.15).unwrap();
        assert!((0.0..=1.0).contains(&j));
        let mut far = a.clone();
        for p in &mut far.points {
            p[0] += 500.0;
        }
        assert_eq!(jsd_voxel(&a, &far, 0.15).unwrap(), 1.0);
    });
}

/// Shared toy-run plumbing for criteria 10 and 11.
struct ToyRun {
    dir: tempfile::TempDir,
    sensor: SensorConfig,
    enc: EncoderConfig,
}

fn make_dataset(scenes: usize, seed: u64) -> ToyRun {
    let dir = tempfile::tempdir().unwrap();
    let sensor = SensorConfig::toy();
    let snow = SnowSpec::new(0.5, 0.15, true).unwrap();
    gen_dataset(scenes, &snow, &sensor, seed, dir.path()).unwrap();
    ToyRun { dir, sensor, enc: EncoderConfig::toy() }
}

#[test]
fn c10_lq_matches_vq_reconstruction() {
    criterion(10, "toy LQ autoencoder within 1.05x of VQ on mean CD and JSD (seeds 0-2)", || {
        let run = make_dataset(200, 77);
        let ds = load_dataset(run.dir.path()).unwrap();
        // identical budgets: 128 * n_z scalars each
        let budget = 128;
        let mut means = Vec::new();
        for quantizer in [QuantizerKind::Vq, QuantizerKind::Lq] {
            let (mut cd_sum, mut jsd_sum, mut count) = (0.0f64, 0.0f64, 0usize);
            for seed in 0..3u64 {
                let cfg = TrainConfig {
                    steps: 500,
                    batch: 4,
                    lr: 1e-3,
                    quantizer,
                    seed,
                    codebook_size: budget,
                };
                let store = train_autoencoder(&ds, &run.enc, &cfg, None).unwrap();
                for img in &ds.clear {
                    let z = encode_image(&store, &run.enc, img).unwrap();
                    let zq = quantize_latent(&store, quantizer, &z).unwrap();
                    let recon = decode_latent(&store, &run.enc, &zq, img.r_max).unwrap();
                    let original = unproject(img, &run.sensor).unwrap();
                    let recovered = unproject(&recon, &run.sensor).unwrap();
                    cd_sum += chamfer(&original, &recovered).unwrap();
                    jsd_sum += jsd_voxel(&original, &recovered, 0.15).unwrap();
                    count += 1;
                }
            }
            means.push((cd_sum / count as f64, jsd_sum / count as f64));
        }
        let (vq_cd, vq_jsd) = means[0];
        let (lq_cd, lq_jsd) = means[1];
        eprintln!("c10: VQ mean CD {vq_cd:.4} JSD {vq_jsd:.4}; LQ mean CD {lq_cd:.4} JSD {lq_jsd:.4}");
        assert!(lq_cd <= 1.05 * vq_cd, "LQ CD {lq_cd} vs VQ {vq_cd}");
        assert!(lq_jsd <= 1.05 * vq_jsd, "LQ JSD {lq_jsd} vs VQ {vq_jsd}");
    });
}

#[test]
fn c11_end_to_end_augmentation() {
    criterion(11, "toy pipeline adds near-field returns on >= 80% of held-out scenes", || {
        let train_run = make_dataset(60, 0);
        let ds = load_dataset(train_run.dir.path()).unwrap();
        let cfg = TrainConfig {
            steps: 800,
            batch: 4,
            lr: 1e-3,
            quantizer: QuantizerKind::Lq,
            seed: 0,
            codebook_size: 32,
        };
        let ae = train_autoencoder(&ds, &train_run.enc, &cfg, None).unwrap();
        let sched = DiffusionSchedule::toy();
        let den_cfg = DenoiserConfig::toy(train_run.enc.n_z, sched.t_total);
        let guid = GuidanceConfig::default();
        let ldm_cfg = TrainConfig { steps: 1200, ..cfg };
        let ldm = train_ldm(&ds, &ae, &train_run.enc, &den_cfg, &sched, &guid, &ldm_cfg, None).unwrap();

        let held_out = make_dataset(50, 10_000);
        let held = load_dataset(held_out.dir.path()).unwrap();
        let params = PostprocessParams::default();
        let near_count = |img: &RangeImage| {
            let (m, valid) = img.depth_meters();
            m.iter().zip(&valid).filter(|(d, &v)| v && **d < 10.0).count()
        };
        let mut gained = 0usize;
        for (i, x) in held.clear.iter().enumerate() {
            let aug = AugmentConfig { t_aug: sched.t_total / 2, w: 2.0, requantize: true, seed: 900 + i as u64 };
            let y = augment_image(&ae, &ldm, &train_run.enc, &den_cfg, &sched, cfg.quantizer, x, &aug).unwrap();
            let refined = postprocess(x, &y, &params).unwrap();
            // determinism under the fixed seed
            let y2 = augment_image(&ae, &ldm, &train_run.enc, &den_cfg, &sched, cfg.quantizer, x, &aug).unwrap();
            assert_eq!(y.depth, y2.depth, "augment must be deterministic under a fixed seed");
            if near_count(&refined) > near_count(x) {
                gained += 1;
            }
        }
        eprintln!("c11: {gained}/50 held-out scenes gained near-field returns");
        assert!(gained >= 40, "only {gained}/50 scenes gained near-field returns");
    });
}

#[test]
fn c12_out_of_scope_note() {
    criterion(12, "3D-detection validation and qualitative full-dataset figures are out of scope", || {
        // No executable content: downstream detector training and the
        // real-dataset qualitative study require data and compute beyond
        // this artifact. Stated here so the omission is deliberate.
    });
}
