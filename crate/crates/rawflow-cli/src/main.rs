//! Command-line entry point: dataset generation, the three training stages,
//! inference, evaluation, and the ablation grid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rawflow_core::config::{self, RunConfig};
use rawflow_core::dataset;
use rawflow_core::dlfm::{GuidanceMode, Variant};
use rawflow_core::error::Error as CoreError;
use rawflow_core::trainer;

#[derive(Parser)]
#[command(name = "rawflow", version, about = "RGB-to-RAW reconstruction via deterministic latent flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config overrides, e.g. -s train.lr=0.001.
    #[arg(long = "set", short = 's', value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Args, Clone)]
struct SamplerOpts {
    /// Number of Euler steps (defaults to the config value).
    #[arg(long)]
    steps: Option<usize>,
    /// Sampler variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Guidance mode.
    #[arg(long, value_parser = parse_guidance)]
    guidance: Option<GuidanceMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData(CommonOpts),
    /// Stage 1: train the dual-domain autoencoder.
    TrainDlae {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 2: train the flow module on frozen latents.
    TrainDlfm {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        sampler: SamplerOpts,
    },
    /// Stage 3: end-to-end fine-tuning.
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        sampler: SamplerOpts,
    },
    /// Reconstruct RAW images for the test split.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        sampler: SamplerOpts,
    },
    /// Evaluate reconstructions (from a checkpoint or a prediction dir).
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to run inference with (mutually exclusive with --pred).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory of predicted ".rt" RAWs named like the dataset pairs.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerOpts,
    },
    /// Run the ablation grid and emit one comparison CSV.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Seeds for the grid.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got '{s}'")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "deterministic" => Ok(Variant::Deterministic),
        "stochastic" => Ok(Variant::Stochastic),
        other => Err(format!("unknown variant '{other}'")),
    }
}

fn parse_guidance(s: &str) -> Result<GuidanceMode, String> {
    match s {
        "cross" => Ok(GuidanceMode::Cross),
        "single" => Ok(GuidanceMode::Single),
        "latent" => Ok(GuidanceMode::Latent),
        other => Err(format!("unknown guidance mode '{other}'")),
    }
}

fn load_cfg(common: &CommonOpts, sampler: Option<&SamplerOpts>) -> rawflow_core::Result<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(s) = sampler {
        if let Some(steps) = s.steps {
            overrides.push(("sampler.steps".into(), steps.to_string()));
        }
        if let Some(v) = s.variant {
            let name = match v {
                Variant::Deterministic => "deterministic",
                Variant::Stochastic => "stochastic",
            };
            overrides.push(("sampler.variant".into(), format!("\"{name}\"")));
        }
        if let Some(g) = s.guidance {
            let name = match g {
                GuidanceMode::Cross => "cross",
                GuidanceMode::Single => "single",
                GuidanceMode::Latent => "latent",
            };
            overrides.push(("guidance".into(), format!("\"{name}\"")));
        }
    }
    config::load_config(&common.config, &overrides)
}

fn run() -> rawflow_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_cfg(&common, None)?;
            cfg.write_snapshot(&common.out)?;
            let manifest = dataset::generate_dataset(&cfg.data, cfg.seed, &common.out)?;
            log::info!(
                "generated {} pairs ({} train / {} test) in {}",
                manifest.pairs.len(),
                manifest.train.len(),
                manifest.test.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::TrainDlae { common, data } => {
            let cfg = load_cfg(&common, None)?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let mut models = trainer::build_models(&cfg)?;
            let best = trainer::train_stage1(&cfg, &ds, &mut models, &common.out)?;
            log::info!("stage 1 best validation loss: {best}");
            Ok(())
        }
        Command::TrainDlfm { common, data, ckpt, sampler } => {
            let cfg = load_cfg(&common, Some(&sampler))?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let mut models = trainer::load_models(&cfg, &ckpt)?;
            let best = trainer::train_stage2(&cfg, &ds, &mut models, &common.out)?;
            log::info!("stage 2 best validation flow loss: {best}");
            Ok(())
        }
        Command::Finetune { common, data, ckpt, sampler } => {
            let cfg = load_cfg(&common, Some(&sampler))?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let mut models = trainer::load_models(&cfg, &ckpt)?;
            let best = trainer::train_stage3(&cfg, &ds, &mut models, &common.out)?;
            log::info!("stage 3 best validation loss: {best}");
            Ok(())
        }
        Command::Infer { common, data, ckpt, sampler } => {
            let cfg = load_cfg(&common, Some(&sampler))?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let models = trainer::load_models(&cfg, &ckpt)?;
            let raw_dir = common.out.join("raw");
            let preview_dir = common.out.join("preview");
            std::fs::create_dir_all(&raw_dir).map_err(|e| CoreError::io(&raw_dir, e))?;
            std::fs::create_dir_all(&preview_dir).map_err(|e| CoreError::io(&preview_dir, e))?;
            for &i in &ds.manifest.test {
                let pair = &ds.pairs[i];
                let pred = trainer::reconstruct_pair(&models, &cfg, pair, i)?;
                dataset::write_raw_f32(&raw_dir.join(format!("{}.rt", pair.name)), &pred)?;
                let preview = rawflow_core::data_isp::render_rgb(&pred, &ds.manifest.isp)?;
                write_png(&preview_dir.join(format!("{}.png", pair.name)), &preview)?;
            }
            log::info!("reconstructed {} test images into {}", ds.manifest.test.len(), common.out.display());
            Ok(())
        }
        Command::Eval { common, data, ckpt, pred, sampler } => {
            let cfg = load_cfg(&common, Some(&sampler))?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let report = match (&ckpt, &pred) {
                (Some(ckpt), None) => {
                    let models = trainer::load_models(&cfg, ckpt)?;
                    trainer::evaluate_reconstruction(&models, &cfg, &ds, &ds.manifest.test.clone())?
                }
                (None, Some(pred_dir)) => evaluate_pred_dir(&cfg, &ds, pred_dir)?,
                _ => {
                    return Err(CoreError::config(
                        "eval needs exactly one of --ckpt or --pred",
                    ))
                }
            };
            report.write_csv(&common.out.join("eval.csv"))?;
            report.write_json(&common.out.join("eval_summary.json"))?;
            log::info!(
                "PSNR raw {:.3} dB, SSIM raw {:.4}, PSNR rgb {:.3} dB, SSIM rgb {:.4} over {} pairs",
                report.mean_psnr_raw,
                report.mean_ssim_raw,
                report.mean_psnr_rgb,
                report.mean_ssim_rgb,
                report.count
            );
            Ok(())
        }
        Command::Ablate { common, data, seeds } => {
            let cfg = load_cfg(&common, None)?;
            cfg.write_snapshot(&common.out)?;
            let ds = dataset::load_dataset(&data)?;
            let rows = trainer::run_ablation(&cfg, &ds, &seeds, &common.out)?;
            log::info!("ablation grid finished: {} rows in {}", rows.len(), common.out.join("ablation.csv").display());
            Ok(())
        }
    }
}

/// Evaluate a directory of predicted ".rt" RAWs against the dataset's test
/// split. Predictions are matched by pair name.
fn evaluate_pred_dir(
    cfg: &RunConfig,
    ds: &dataset::Dataset,
    pred_dir: &Path,
) -> rawflow_core::Result<rawflow_core::metrics::EvalReport> {
    let mut rows = Vec::new();
    for &i in &ds.manifest.test {
        let pair = &ds.pairs[i];
        let path = pred_dir.join(format!("{}.rt", pair.name));
        let pred = dataset::read_raw(&path, ds.manifest.isp.raw_bit_depth)?;
        rows.push(rawflow_core::metrics::evaluate(
            &pair.name,
            &pred,
            &pair.raw,
            &ds.manifest.isp,
        )?);
    }
    rawflow_core::metrics::EvalReport::from_rows(rows, &cfg.fingerprint())
}

fn write_png(path: &Path, img: &rawflow_core::data_isp::RgbImage) -> rawflow_core::Result<()> {
    let (_, h, w) = img.data.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data[[0, y, x]] * 255.0).round() as u8,
                (img.data[[1, y, x]] * 255.0).round() as u8,
                (img.data[[2, y, x]] * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| CoreError::Data(format!("png encode {}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RAWFLOW_LOG", "info"))
        .format_timestamp_secs()
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let code = match e.category() {
                "config" => 2,
                "data" => 3,
                "numeric" => 4,
                "io" => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
