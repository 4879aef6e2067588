//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use indexmap::IndexMap;
use serde_json::json;

use crate::cfa::{self, BayerPattern, ColorImage, DegradationSpec, PackedInput};
use crate::error::{Error, Result};
use crate::io::checkpoint::{self, Checkpoint};
use crate::io::{self, RunConfig};
use crate::metrics::{self, EvalSettings};
use crate::models::Generator;
use crate::synth;
use crate::tensor::Tensor;
use crate::training;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "jdd", version, about = "Joint demosaicing and denoising with a GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mosaic and add noise to every PNG in a directory.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "rggb")]
        pattern: BayerPattern,
        #[arg(long)]
        no_clip: bool,
    },
    /// Train generator and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing checkpoints in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Reconstruct images with a trained generator.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// A PNG, a packed `.bjdd` file from `degrade`, or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a generator on a directory of clean PNGs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Border pixels excluded from the metrics.
        #[arg(long, default_value_t = 0)]
        crop: usize,
        #[arg(long)]
        no_clip: bool,
    },
    /// Write procedurally generated RGB images for demos and smoke tests.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERICAL,
        Error::InvalidArgument(_) | Error::Config(_) | Error::WouldOverwrite(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Degrade { input, output, sigma, seed, pattern, no_clip } => {
            let spec = DegradationSpec { sigma, seed, clip: !no_clip };
            degrade_dir(&input, &output, pattern, &spec)
        }
        Command::Train { config, data, out, force } => {
            let cfg = RunConfig::load(&config)?;
            let data = data
                .or(cfg.data.clone())
                .ok_or_else(|| Error::InvalidArgument("no data directory given (--data or config `data`)".into()))?;
            let out = out
                .or(cfg.out.clone())
                .ok_or_else(|| Error::InvalidArgument("no output directory given (--out or config `out`)".into()))?;
            let images: Vec<ColorImage> = io::load_dir(&data)?.into_iter().map(|(_, img)| img).collect();
            if images.is_empty() {
                return Err(Error::EmptyDataset(format!("no PNG files in {}", data.display())));
            }
            let summary = training::train_loop(&images, &cfg.train, &out, force)?;
            if let Some(last) = summary.logs.last() {
                eprintln!("trained {} steps, last row: {}", summary.logs.len(), last.csv_row());
            }
            eprintln!("wrote {} checkpoint(s) and {}", summary.checkpoints.len(), summary.log_path.display());
            Ok(())
        }
        Command::Infer { model, input, output, sigma, seed } => {
            let spec = DegradationSpec { sigma, seed, clip: true };
            infer(&model, &input, &output, &spec)
        }
        Command::Eval { model, data, sigma, seed, report, crop, no_clip } => {
            let spec = DegradationSpec { sigma, seed, clip: !no_clip };
            let rows = evaluate(&model, &data, &spec, crop)?;
            let text = metrics::format_report(&rows);
            fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
            if let Some(avg) = text.lines().last() {
                eprintln!("{avg}");
            }
            Ok(())
        }
        Command::Synth { output, count, size, seed } => {
            if size == 0 || size % 2 != 0 {
                return Err(Error::InvalidArgument(format!("size must be even and positive, got {size}")));
            }
            create_dir(&output)?;
            for (i, img) in synth::synthetic_patches(count, size, seed).iter().enumerate() {
                io::save_png(&output.join(format!("synth_{i:04}.png")), img)?;
            }
            Ok(())
        }
    }
}

/// Writes `<stem>_mosaic.png` (8-bit preview) and `<stem>_packed.bjdd`
/// (exact f32 mosaic and packed input) for every PNG in `input`.
pub fn degrade_dir(input: &Path, output: &Path, pattern: BayerPattern, spec: &DegradationSpec) -> Result<()> {
    spec.validate()?;
    let files = io::list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", input.display())));
    }
    create_dir(output)?;
    for (i, path) in files.iter().enumerate() {
        let img = io::load_png(path)?;
        let (m, packed) = cfa::degrade(&img, pattern, spec, i as u64)?;
        let name = stem(path);
        io::save_gray_png(&output.join(format!("{name}_mosaic.png")), &m)?;
        let meta = json!({
            "kind": PACKED_KIND,
            "pattern": pattern,
            "packing_order": pattern.packing_order(),
            "sigma": spec.sigma,
            "seed": spec.seed,
            "clip": spec.clip,
            "index": i,
            "source": path.file_name().and_then(|n| n.to_str()),
        });
        let mut tensors = IndexMap::new();
        tensors.insert("mosaic".to_string(), m.into_tensor());
        tensors.insert("packed".to_string(), packed.into_tensor());
        let ckpt = Checkpoint { metadata: serde_json::to_string_pretty(&meta)?, tensors };
        checkpoint::save_checkpoint(&output.join(format!("{name}_packed.bjdd")), &ckpt)?;
    }
    Ok(())
}

pub const PACKED_KIND: &str = "packed-input";

/// Reads the packed input written by [`degrade_dir`].
pub fn load_packed(path: &Path) -> Result<PackedInput> {
    let ckpt = checkpoint::load_checkpoint(path)?;
    let meta: serde_json::Value = serde_json::from_str(&ckpt.metadata)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(PACKED_KIND) {
        return Err(Error::MalformedCheckpoint(format!("{} is not a packed input file", path.display())));
    }
    let t = ckpt
        .tensors
        .get("packed")
        .cloned()
        .ok_or_else(|| Error::MalformedCheckpoint("missing `packed` tensor".into()))?;
    PackedInput::from_tensor(t)
}

fn run_generator(generator: &Generator<f32>, packed: &PackedInput) -> Result<ColorImage> {
    let out = generator.infer(&Tensor::stack(&[packed.tensor()])?)?;
    Ok(ColorImage::from_tensor(out.unstack().pop().expect("batch of one"))?.clipped())
}

pub fn infer(model: &Path, input: &Path, output: &Path, spec: &DegradationSpec) -> Result<()> {
    spec.validate()?;
    let (generator, _, meta) = checkpoint::load_models(model)?;
    let settings = EvalSettings { pattern: meta.pattern, degradation: *spec, crop: 0 };
    create_dir(output)?;
    let is_packed = input.extension().and_then(|e| e.to_str()) == Some("bjdd");
    if is_packed {
        let rec = run_generator(&generator, &load_packed(input)?)?;
        return io::save_png(&output.join(format!("{}.png", stem(input))), &rec);
    }
    let files = if input.is_dir() { io::list_pngs(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", input.display())));
    }
    for (i, path) in files.iter().enumerate() {
        let img = io::load_png(path)?;
        let rec = metrics::reconstruct(&generator, &img, &settings, i as u64)?;
        io::save_png(&output.join(format!("{}.png", stem(path))), &rec)?;
    }
    Ok(())
}

/// Metrics rows (without the `AVG` row) for every PNG in `data`.
pub fn evaluate(model: &Path, data: &Path, spec: &DegradationSpec, crop: usize) -> Result<Vec<metrics::MetricsRow>> {
    spec.validate()?;
    let (generator, _, meta) = checkpoint::load_models(model)?;
    let images = io::load_dir(data)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", data.display())));
    }
    let settings = EvalSettings { pattern: meta.pattern, degradation: *spec, crop };
    metrics::evaluate_images(&generator, &images, &settings)
}
