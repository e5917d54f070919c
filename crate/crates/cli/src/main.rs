use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use coseg::data::netpbm::Raster;
use coseg::data::synth::{generate_range, SynthConfig};
use coseg::data::{load_dataset, save_dataset, SegSample};
use coseg::export::export_heatmaps;
use coseg::gradcheck;
use coseg::model::{Checkpoint, ModelConfig};
use coseg::tensor::{AdjointFault, OpTag, Scalar};
use coseg::train::{checkpoint_precision, log_path, LoadedModel, Precision, RunConfig, Trainer};
use serde_json::json;

#[derive(Parser)]
#[command(name = "coseg", version, about = "Heatmap-guided class-embedding segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip this many leading samples of the stream (held-out splits).
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// Train a model; writes a checkpoint and `<out>.log.jsonl`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many total steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint; prints metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ignore_index: Option<usize>,
        /// Run config whose model section overrides the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
        /// Scale the adjoints of one op family by 1.01 (negative control).
        #[arg(long, hide = true)]
        corrupt_adjoint: Option<String>,
    },
    /// Write per-layer, per-category heatmaps and the prediction as PGM.
    ExportHeatmaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            num,
            size,
            classes,
            seed,
            offset,
        } => synth(&out, num, size, classes, seed, offset)?,
        Command::Train {
            config,
            out,
            resume,
            stop_after,
        } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(cfg, &out, resume.as_deref(), stop_after)?,
                Precision::F64 => train::<f64>(cfg, &out, resume.as_deref(), stop_after)?,
            }
        }
        Command::Eval {
            ckpt,
            data,
            ignore_index,
            config,
            batch_size,
        } => {
            let model_cfg = match config {
                Some(p) => Some(RunConfig::load(&p)?.model()),
                None => None,
            };
            let metrics = match checkpoint_precision(&ckpt)? {
                Precision::F32 => eval::<f32>(&ckpt, &data, ignore_index, model_cfg, batch_size)?,
                Precision::F64 => eval::<f64>(&ckpt, &data, ignore_index, model_cfg, batch_size)?,
            };
            println!("{metrics}");
        }
        Command::Gradcheck {
            seed,
            eps,
            corrupt_adjoint,
        } => {
            let fault = corrupt_adjoint
                .map(|name| -> Result<AdjointFault> {
                    Ok(AdjointFault {
                        op: parse_op(&name)?,
                        scale: 1.01,
                    })
                })
                .transpose()?;
            let report = gradcheck::run(seed, eps, fault)?;
            print!("{}", report.render());
            if !report.passed() {
                let failed = report.lines.iter().filter(|l| !l.passed()).count();
                eprintln!("gradcheck: {failed} component(s) above {:e}", gradcheck::TOLERANCE);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportHeatmaps { ckpt, image, out } => {
            let written = match checkpoint_precision(&ckpt)? {
                Precision::F32 => export::<f32>(&ckpt, &image, &out)?,
                Precision::F64 => export::<f64>(&ckpt, &image, &out)?,
            };
            eprintln!("wrote {} files to {}", written, out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(out: &Path, num: usize, size: usize, classes: usize, seed: u64, offset: usize) -> Result<()> {
    let cfg = SynthConfig::new(seed, num, size, classes);
    let (samples, report) = generate_range(&cfg, offset..offset + num)?;
    save_dataset(&samples, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!(
        "{}",
        json!({
            "samples": num,
            "size": size,
            "classes": classes,
            "pixel_frequency": report.pixel_frequency,
            "presence": report.presence,
        })
    );
    Ok(())
}

fn train<T: Scalar>(cfg: RunConfig, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let Some(dir) = cfg.train_data.clone() else {
        bail!("config: train_data is required for training");
    };
    let samples = load_dataset(&dir)?;
    let mut trainer = Trainer::<T>::new(cfg, samples)?;
    if let Some(path) = resume {
        let ckpt = Checkpoint::<T>::load(path)?;
        trainer.resume_from(&ckpt)?;
    }
    let log = log_path(out);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log)
        .with_context(|| format!("opening {}", log.display()))?;
    let mut writer = BufWriter::new(file);
    let records = trainer.run(stop_after, Some(&mut writer))?;
    writer.flush().with_context(|| format!("writing {}", log.display()))?;
    trainer.save(out)?;
    if let Some(last) = records.last() {
        eprintln!(
            "step {} l_total {:.5} l_main {:.5}",
            last.step, last.loss.l_total, last.loss.l_main
        );
    }
    Ok(())
}

fn eval<T: Scalar>(
    ckpt: &Path,
    data: &Path,
    ignore: Option<usize>,
    config: Option<ModelConfig>,
    batch_size: usize,
) -> Result<String> {
    let model = LoadedModel::<T>::from_checkpoint(&Checkpoint::load(ckpt)?, config)?;
    let samples = load_dataset(data)?;
    let cm = model.evaluate(&samples, batch_size, ignore)?;
    Ok(serde_json::to_string(&cm.summarize()?)?)
}

fn export<T: Scalar>(ckpt: &Path, image: &Path, out: &Path) -> Result<usize> {
    let model = LoadedModel::<T>::from_checkpoint(&Checkpoint::load(ckpt)?, None)?;
    let raster = Raster::read(image)?;
    if raster.channels != 3 {
        bail!("{}: expected a PPM image", image.display());
    }
    let sample = SegSample {
        width: raster.width,
        height: raster.height,
        label: vec![0; raster.width * raster.height],
        image: raster.data,
    };
    Ok(export_heatmaps(&model, &sample, out)?.len())
}

fn parse_op(name: &str) -> Result<OpTag> {
    Ok(match name {
        "binary" => OpTag::Binary,
        "affine" => OpTag::Affine,
        "activation" => OpTag::Activation,
        "matmul" => OpTag::MatMul,
        "transpose" => OpTag::Transpose,
        "softmax" => OpTag::Softmax,
        "log_softmax" => OpTag::LogSoftmax,
        "conv2d" => OpTag::Conv2d,
        "upsample" => OpTag::Upsample,
        "reduce" => OpTag::Reduce,
        "concat" => OpTag::Concat,
        "gather_rows" => OpTag::GatherRows,
        "reshape" => OpTag::Reshape,
        "permute" => OpTag::Permute,
        "select" => OpTag::Select,
        other => bail!("unknown op family '{other}'"),
    })
}
