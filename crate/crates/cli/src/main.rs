use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use metaformer_core::checkpoint;
use metaformer_core::config::{self, ModelConfig, Variant};
use metaformer_core::gradcheck::{gradcheck, GradcheckOptions};
use metaformer_core::train::{train_model, StepRecord, TrainOptions, DEFAULT_LABEL_SMOOTHING};
use metaformer_core::{analyze, Error, Model};
use serde::Serialize;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "metaformer", version, about = "MetaFormer / PoolFormer model tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and MAC counts per stage.
    #[command(group(ArgGroup::new("model").required(true).args(["config", "variant", "preset"])))]
    Describe {
        #[arg(long)]
        config: Option<PathBuf>,
        /// S12, S24, S36, M36 or M48.
        #[arg(long)]
        variant: Option<String>,
        /// A named ablation config, e.g. S12-pool-pool-attn-attn (see `list-presets`).
        #[arg(long)]
        preset: Option<String>,
        /// Square input side; defaults to the config's input size (224 for variants).
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Compare analytic gradients with central finite differences in f64.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train on the synthetic 4-class shape dataset and write a checkpoint.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Peak learning rate; defaults to batch_size / 1024 * 1e-3.
        #[arg(long)]
        lr: Option<f64>,
        /// Warmup steps; defaults to ceil(steps * 5 / 300).
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_LABEL_SMOOTHING)]
        label_smoothing: f64,
        #[arg(long)]
        out: PathBuf,
        /// NDJSON metrics destination; stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Classify one input tensor file with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// List the names accepted by `describe --preset`.
    ListPresets,
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
        _ => Ok(()),
    }
}

fn describe(
    config: Option<PathBuf>,
    variant: Option<String>,
    preset: Option<String>,
    input_size: Option<usize>,
    format: Format,
) -> Result<()> {
    let config = match (config, variant, preset) {
        (Some(path), _, _) => ModelConfig::from_path(&path)?,
        (_, Some(v), _) => ModelConfig::variant(v.parse::<Variant>()?),
        (_, _, Some(p)) => config::preset(&p).ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{p}`")))?,
        _ => unreachable!("clap requires one model source"),
    };
    let report = analyze(&config, input_size.unwrap_or(config.input_size))?;
    match format {
        Format::Json => emit(&(report.to_json() + "\n")),
        Format::Table => emit(&report.to_table()),
    }
}

fn run_gradcheck(config: PathBuf, opts: GradcheckOptions, format: Format) -> Result<bool> {
    let config = ModelConfig::from_path(&config)?;
    let report = gradcheck(&config, &opts)?;
    match format {
        Format::Json => emit(&(serde_json::to_string_pretty(&report)? + "\n"))?,
        Format::Table => {
            let mut text = String::new();
            for g in &report.groups {
                text += &format!(
                    "{:<6} {:<20} checked {:>3}  max rel err {:.3e}\n",
                    if g.passed { "PASS" } else { "FAIL" },
                    g.group,
                    g.checked,
                    g.max_rel_err
                );
            }
            text += &format!(
                "{} (tolerance {:e})\n",
                if report.passed { "all groups passed" } else { "gradient check FAILED" },
                report.tolerance
            );
            emit(&text)?;
        }
    }
    Ok(report.passed)
}

fn train_toy(config: PathBuf, opts: TrainOptions, out: PathBuf, metrics: Option<PathBuf>) -> Result<()> {
    let config = ModelConfig::from_path(&config)?;
    let mut model = Model::<f32>::build(&config, opts.seed)?;
    let mut sink: Box<dyn Write> = match &metrics {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating metrics file {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let report = train_model(&mut model, &opts, |r: &StepRecord| {
        if write_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut sink, r).map_err(io::Error::from).and_then(|_| writeln!(sink)) {
                write_err = Some(e);
            }
        }
    })?;
    let flushed = match write_err {
        Some(e) => Err(e),
        None => sink.flush(),
    };
    match flushed {
        // a reader that went away (e.g. `| head`) should not cost the checkpoint
        Err(e) if metrics.is_some() || e.kind() != io::ErrorKind::BrokenPipe => {
            return Err(e).context("writing metrics")
        }
        _ => {}
    }
    checkpoint::save(&model, &out)?;
    eprintln!(
        "probe loss {:.4} -> {:.4}, probe accuracy {:.3} -> {:.3}; checkpoint {}",
        report.initial.loss,
        report.last.loss,
        report.initial.accuracy,
        report.last.accuracy,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Ranked {
    class: usize,
    probability: f64,
}

#[derive(Serialize)]
struct InferOutput {
    topk: Vec<Ranked>,
}

fn infer(ckpt: PathBuf, input: PathBuf, topk: usize) -> Result<()> {
    let model = checkpoint::load(&ckpt)?;
    let x = checkpoint::load_input(&input)?;
    if x.shape()[0] != 1 {
        return Err(Error::InvalidArgument(format!("input must hold one image [1, C, H, W], got {:?}", x.shape())).into());
    }
    let logits = model.infer(&x)?;
    let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut ranked: Vec<Ranked> = exps
        .iter()
        .enumerate()
        .map(|(class, e)| Ranked {
            class,
            probability: e / total,
        })
        .collect();
    ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.class.cmp(&b.class)));
    ranked.truncate(topk);
    emit(&(serde_json::to_string_pretty(&InferOutput { topk: ranked })? + "\n"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Describe {
            config,
            variant,
            preset,
            input_size,
            format,
        } => describe(config, variant, preset, input_size, format)?,
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            samples,
            format,
            corrupt_backward,
        } => {
            let opts = GradcheckOptions {
                seed,
                tolerance,
                samples_per_tensor: samples,
                corrupt_analytic: corrupt_backward,
                ..GradcheckOptions::default()
            };
            if !run_gradcheck(config, opts, format)? {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Command::TrainToy {
            config,
            steps,
            batch_size,
            seed,
            lr,
            warmup,
            label_smoothing,
            out,
            metrics,
        } => {
            let opts = TrainOptions {
                steps,
                batch_size,
                seed,
                lr,
                warmup,
                label_smoothing,
                ..TrainOptions::default()
            };
            train_toy(config, opts, out, metrics)?
        }
        Command::Infer { ckpt, input, topk } => infer(ckpt, input, topk)?,
        Command::ListPresets => {
            let names: String = config::presets().into_iter().map(|(name, _)| format!("{name}\n")).collect();
            emit(&names)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Error>().is_some_and(Error::is_validation);
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
