//! Pipeline CLI: synthetic data, codec round trips, training, augmentation,
//! postprocessing, metrics, and PGM export. Results go to stdout, progress
//! to stderr; exit code 0 only when all outputs were written.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use snowaug::config::PipelineConfig;
use snowaug::diffusion::{DiffusionSchedule, GuidanceConfig};
use snowaug::metrics::{chamfer, jsd_voxel};
use snowaug::nets::DenoiserConfig;
use snowaug::postprocess::{postprocess, PostprocessParams};
use snowaug::range_codec::{load_lpc, load_rimg, project, save_lpc, save_pgm, save_rimg, unproject};
use snowaug::synthdata::{gen_dataset, SnowSpec};
use snowaug::tensor::params::{load_checkpoint, save_checkpoint};
use snowaug::train::{augment_image, load_dataset, train_autoencoder, train_ldm, AugmentConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "snowaug", about = "LiDAR snow augmentation pipeline", version)]
struct Cli {
    /// Optional key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scene-parallel commands (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired clear/snow synthetic dataset.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 0.4)]
        rate: f32,
        #[arg(long, default_value_t = 0.12)]
        near_bias: f32,
        #[arg(long)]
        no_occlusion: bool,
    },
    /// Project a .lpc point cloud to a .rimg range image.
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Unproject a .rimg range image to a .lpc point cloud.
    Unproject {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the quantized autoencoder.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the latent denoiser over a frozen autoencoder checkpoint.
    TrainLdm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Augment a clear scene with snow; writes the raw decode and, next to
    /// it, the postprocessed variant.
    Augment {
        #[arg(long)]
        clear: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Postprocessed output path (default: <out stem>_refined.rimg).
        #[arg(long)]
        refined: Option<PathBuf>,
        #[arg(long)]
        t_aug: Option<usize>,
        #[arg(long)]
        w: Option<f32>,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        nu: Option<f32>,
        /// Decode the edited latent directly instead of snapping it back
        /// onto the codebook first.
        #[arg(long)]
        no_requantize: bool,
    },
    /// Blend a clear and an adverse range image with the depth threshold.
    Postprocess {
        #[arg(long)]
        clear: PathBuf,
        #[arg(long)]
        adverse: PathBuf,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        nu: Option<f32>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print Chamfer distance and JSD between two .lpc clouds.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        resolution: f32,
    },
    /// Export a .rimg as an 8-bit P5 PGM.
    ExportPgm {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    quantizer: Option<String>,
    #[arg(long)]
    codebook_size: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut PipelineConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.batch {
        cfg.batch = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(q) = &f.quantizer {
        cfg.quantizer = q.parse()?;
    }
    if let Some(v) = f.codebook_size {
        cfg.codebook_size = v;
    }
    cfg.validate()?;
    Ok(())
}

fn train_config(cfg: &PipelineConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        quantizer: cfg.quantizer,
        seed: cfg.seed,
        codebook_size: cfg.codebook_size,
    }
}

fn open_log(path: &Option<PathBuf>) -> Result<Option<std::fs::File>> {
    path.as_ref()
        .map(|p| std::fs::File::create(p).with_context(|| format!("creating log {}", p.display())))
        .transpose()
}

fn refined_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}_refined.rimg"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global()?;
    }
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth { out, scenes, rate, near_bias, no_occlusion } => {
            let snow = SnowSpec::new(*rate, *near_bias, !no_occlusion)?;
            gen_dataset(*scenes, &snow, &cfg.sensor(), cfg.seed, out)?;
            println!("wrote {scenes} scene pairs to {}", out.display());
        }
        Cmd::Project { cloud, out } => {
            let img = project(&load_lpc(cloud)?, &cfg.sensor())?;
            save_rimg(&img, out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Unproject { image, out } => {
            let cloud = unproject(&load_rimg(image)?, &cfg.sensor())?;
            save_lpc(&cloud, out)?;
            println!("wrote {} ({} points)", out.display(), cloud.len());
        }
        Cmd::TrainAe { data, out, log, train } => {
            apply_train_flags(&mut cfg, train)?;
            let ds = load_dataset(data)?;
            let mut log = open_log(log)?;
            let store = train_autoencoder(
                &ds,
                &cfg.encoder(),
                &train_config(&cfg),
                log.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            save_checkpoint(&store, out)?;
            println!("wrote {}", out.display());
        }
        Cmd::TrainLdm { data, ae, out, log, train } => {
            apply_train_flags(&mut cfg, train)?;
            let ds = load_dataset(data)?;
            let ae_store = load_checkpoint(ae).context("loading autoencoder checkpoint")?;
            let sched = DiffusionSchedule::linear(cfg.t_total, 1e-4, 0.02);
            let den_cfg = DenoiserConfig::toy(cfg.n_z, cfg.t_total);
            let guid = GuidanceConfig::new(cfg.guidance_w, cfg.p_uncond)?;
            let mut log = open_log(log)?;
            let store = train_ldm(
                &ds,
                &ae_store,
                &cfg.encoder(),
                &den_cfg,
                &sched,
                &guid,
                &train_config(&cfg),
                log.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            save_checkpoint(&store, out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Augment { clear, ae, ldm, out, refined, t_aug, w, lambda, nu, no_requantize } => {
            let x = load_rimg(clear)?;
            let ae_store = load_checkpoint(ae).context("loading autoencoder checkpoint")?;
            let ldm_store = load_checkpoint(ldm).context("loading denoiser checkpoint")?;
            let sched = DiffusionSchedule::linear(cfg.t_total, 1e-4, 0.02);
            let den_cfg = DenoiserConfig::toy(cfg.n_z, cfg.t_total);
            let aug = AugmentConfig {
                t_aug: t_aug.unwrap_or(cfg.t_aug),
                w: w.unwrap_or(cfg.guidance_w),
                requantize: !no_requantize,
                seed: cfg.seed,
            };
            let y = augment_image(&ae_store, &ldm_store, &cfg.encoder(), &den_cfg, &sched, cfg.quantizer, &x, &aug)?;
            save_rimg(&y, out)?;
            let params = PostprocessParams::new(lambda.unwrap_or(cfg.lambda), nu.unwrap_or(cfg.nu))?;
            let y_refined = postprocess(&x, &y, &params)?;
            let refined = refined.clone().unwrap_or_else(|| refined_path(out));
            save_rimg(&y_refined, &refined)?;
            println!("wrote {}", out.display());
            println!("wrote {}", refined.display());
        }
        Cmd::Postprocess { clear, adverse, lambda, nu, out } => {
            let x = load_rimg(clear)?;
            let y = load_rimg(adverse)?;
            let params = PostprocessParams::new(lambda.unwrap_or(cfg.lambda), nu.unwrap_or(cfg.nu))?;
            save_rimg(&postprocess(&x, &y, &params)?, out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { reference, hyp, resolution } => {
            let a = load_lpc(reference)?;
            let b = load_lpc(hyp)?;
            println!("CD {:.6}", chamfer(&a, &b)?);
            println!("JSD {:.6}", jsd_voxel(&a, &b, *resolution)?);
        }
        Cmd::ExportPgm { image, out } => {
            save_pgm(&load_rimg(image)?, out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
