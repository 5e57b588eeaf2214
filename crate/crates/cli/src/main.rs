use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camogen_core::pipeline::{self, RunConfig, SynthConfig, TrainedModel};
use camogen_core::raster::{Mask, RgbImage};
use camogen_core::Error;
use clap::{Parser, Subcommand};

/// Foreground-aware camouflaged image generation.
#[derive(Parser)]
#[command(name = "camogen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codec, then the conditioned denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue stage 2 from a step checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        report_every: usize,
    },
    /// Generate a camouflaged image around the masked object.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one image per dataset sample and write a metric report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the generated images here.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Write a procedural dataset of image/mask pairs.
    SynthData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print the documented default configuration.
    DefaultConfig,
}

fn train(config: &Path, resume: Option<&Path>, report_every: usize) -> Result<(), Error> {
    let cfg = RunConfig::load(config)?;
    let outcome = pipeline::run_training(&cfg, resume, |step, b| {
        if report_every > 0 && step % report_every == 0 {
            println!(
                "step {step:>6}  total {:.5}  fadl_fg {:.5}  fadl_bg {:.5}  bgrec {:.5}",
                b.total, b.fadl_fg, b.fadl_bg, b.bgrec
            );
        }
    })?;
    if let Some(report) = &outcome.codec_report {
        let last = report.losses.last().map_or(f64::NAN, |l| l.recon);
        println!(
            "codec: final recon {last:.5}, {} revived, {} reseeded",
            report.revived, report.final_reseeds
        );
    }
    println!(
        "trained steps {}..{}; codec checksum {:08x}; checkpoint {}",
        outcome.first_step,
        outcome.first_step + outcome.losses.len(),
        outcome.codec_checksum,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn generate(ckpt: &Path, image: &Path, mask: &Path, seed: u64, out: &Path) -> Result<(), Error> {
    let trained = TrainedModel::load(ckpt)?;
    let source = RgbImage::load_png(image)?;
    let mask_img = Mask::load_png(mask)?;
    if mask_img.foreground_count() == 0 {
        return Err(Error::Input(format!("{}: mask has no foreground", mask.display())));
    }
    let generated = pipeline::generate(&trained, &source, &mask_img, seed)?;
    generated.image.save_png(out)
}

fn evaluate(ckpt: &Path, data: &Path, out: &Path, images: Option<&Path>) -> Result<(), Error> {
    let trained = TrainedModel::load(ckpt)?;
    let report = pipeline::evaluate(&trained, data, images)?;
    std::fs::write(out, report.to_key_values()).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            resume,
            report_every,
        } => train(&config, resume.as_deref(), report_every),
        Command::Generate {
            ckpt,
            image,
            mask,
            seed,
            out,
        } => generate(&ckpt, &image, &mask, seed, &out),
        Command::Evaluate {
            ckpt,
            data,
            out,
            images,
        } => evaluate(&ckpt, &data, &out, images.as_deref()),
        Command::SynthData { seed, n, out, size } => {
            let config = SynthConfig {
                count: n,
                height: size,
                width: size,
                ..SynthConfig::default()
            };
            let manifest = pipeline::synthesize(&out, &config, seed)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
