use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use l2c_core::calibrate::CalibConfig;
use l2c_core::codec::bench::{bench_source, default_sources, Source};
use l2c_core::codec::unpack_archive;
use l2c_core::entropy::Kernel;
use l2c_core::model_io::{load_calibration, load_raw_model, save_raw_model};
use l2c_core::pipeline;
use l2c_core::report::report;
use l2c_core::toy::{train_toy, write_toy, ToyConfig};
use l2c_core::transform::Variant;

const EXIT_MISMATCH: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_TARGET_MISSED: u8 = 3;
const EXIT_TOY: u8 = 4;

#[derive(Parser)]
#[command(name = "l2c", version, about = "Post-training weight compression with learned transforms and range coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate transforms on a model and write a compressed archive.
    Compress(CompressArgs),
    /// Decode an archive back into a raw model file.
    Decompress {
        archive: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check that an archive decodes and re-encodes exactly, and measure how
    /// far its outputs are from the original model.
    Verify {
        archive: PathBuf,
        model: PathBuf,
        calib: PathBuf,
    },
    /// Per-layer statistics of an archive.
    Report {
        archive: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the small spiral MLP and write it with its calibration and eval sets.
    MakeToy {
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ToyConfig::default().steps)]
        steps: usize,
    },
    /// Compare entropy bound, Huffman and range coding on synthetic streams.
    BenchCodec(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CompressArgs {
    model: PathBuf,
    calib: PathBuf,
    /// Output archive; defaults to the model path with an `.l2cm` extension.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0)]
    target_cr: f64,
    #[arg(long, default_value = "joint", value_parser = parse_variant)]
    transform: Variant,
    #[arg(long, default_value = "cosine", value_parser = parse_kernel)]
    kernel: Kernel,
    #[arg(long, default_value_t = 64)]
    resolution: u32,
    #[arg(long, default_value_t = CalibConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = CalibConfig::default().transform_iters)]
    transform_iters: usize,
    #[arg(long, default_value_t = CalibConfig::default().finetune_iters)]
    finetune_iters: usize,
    /// Skip weight fine-tuning; only the transforms are trained.
    #[arg(long)]
    no_finetune: bool,
    /// Use only the first N calibration samples.
    #[arg(long)]
    calib_limit: Option<usize>,
    #[arg(long, default_value_t = CalibConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = CalibConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-layer report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Symbols per stream.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one family.
    #[arg(long, value_parser = ["gaussian", "laplacian", "zipf", "uniform"])]
    dist: Option<String>,
    #[arg(long)]
    json: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: l2c_core::error::Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<Kernel, String> {
    s.parse().map_err(|e: l2c_core::error::Error| e.to_string())
}

/// Failures that should end the process with a specific code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_INPUT)
            }
        },
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Compress(args) => compress(args),
        Command::Decompress { archive, output } => {
            let bytes = read(&archive)?;
            let model = pipeline::decompress(&bytes).with_context(|| format!("decoding {}", archive.display()))?;
            let out = output.unwrap_or_else(|| with_suffix(&archive, "decoded.l2rm"));
            save_raw_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Verify { archive, model, calib } => {
            let bytes = read(&archive)?;
            let original = load_raw_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let calib = load_calibration(&calib).with_context(|| format!("loading {}", calib.display()))?;
            let v = pipeline::verify(&bytes, &original, &calib)?;
            match v.mismatch {
                Some((layer, why)) => {
                    eprintln!("verification failed at layer {layer}: {why}");
                    Err(Exit(EXIT_MISMATCH).into())
                }
                None => {
                    println!("ok: payloads re-encode exactly and decoded outputs match");
                    println!("max abs output deviation from original: {:.6e}", v.max_abs_deviation);
                    println!("output mse vs original: {:.6e}", v.mse);
                    Ok(())
                }
            }
        }
        Command::Report { archive, format, output } => {
            let bytes = read(&archive)?;
            let a = unpack_archive(&bytes).with_context(|| format!("decoding {}", archive.display()))?;
            let r = report(&a)?;
            let text = match format {
                Format::Csv => r.to_csv(),
                Format::Json => r.to_json() + "\n",
            };
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::MakeToy { dir, seed, steps } => {
            let cfg = ToyConfig {
                seed,
                steps,
                ..ToyConfig::default()
            };
            let art = train_toy(&cfg)?;
            println!(
                "train accuracy {:.4}, eval accuracy {:.4}",
                art.train_accuracy, art.eval_accuracy
            );
            if !art.reached_target(&cfg) {
                eprintln!(
                    "training accuracy {:.4} is below {:.2}; try another seed or more steps",
                    art.train_accuracy, cfg.target_accuracy
                );
                return Err(Exit(EXIT_TOY).into());
            }
            write_toy(&dir, &art).with_context(|| format!("writing into {}", dir.display()))?;
            println!("wrote toy model and calibration data to {}", dir.display());
            Ok(())
        }
        Command::BenchCodec(args) => bench(args),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn compress(args: CompressArgs) -> Result<()> {
    let model = load_raw_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let mut calib = load_calibration(&args.calib).with_context(|| format!("loading {}", args.calib.display()))?;
    if let Some(n) = args.calib_limit {
        anyhow::ensure!(n > 0, "--calib-limit must be positive");
        calib.truncate(n);
    }
    let mut cfg = CalibConfig {
        cr_target: args.target_cr,
        lambda: args.lambda,
        epochs: args.epochs,
        transform_iters: args.transform_iters,
        finetune_iters: if args.no_finetune { 0 } else { args.finetune_iters },
        batch_size: args.batch_size,
        variant: args.transform,
        seed: args.seed,
        ..CalibConfig::default()
    };
    cfg.counter.kernel = args.kernel;
    cfg.counter.resolution = args.resolution;
    cfg.counter.seed = args.seed;
    cfg.validate()?;

    let out = pipeline::compress(&model, &calib, &cfg)?;
    let path = args.output.unwrap_or_else(|| with_suffix(&args.model, "l2cm"));
    std::fs::write(&path, &out.bytes).with_context(|| format!("writing {}", path.display()))?;

    let r = report(&out.archive)?;
    print!("{}", r.to_csv());
    if let Some(p) = &args.report_json {
        std::fs::write(p, r.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    let file_cr = out.file_cr();
    println!(
        "wrote {} ({} bytes): file CR {:.3}, entropy CR {:.3}, target {}",
        path.display(),
        out.bytes.len(),
        file_cr,
        out.entropy_cr(),
        args.target_cr
    );
    if file_cr < args.target_cr {
        eprintln!("target missed: file CR {file_cr:.3} < {}", args.target_cr);
        return Err(Exit(EXIT_TARGET_MISSED).into());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    anyhow::ensure!(args.n > 0, "--n must be positive");
    let sources: Vec<Source> = default_sources()
        .into_iter()
        .filter(|s| args.dist.as_deref().is_none_or(|d| d == s.family()))
        .collect();
    let rows = sources
        .into_iter()
        .map(|s| bench_source(s, args.n, args.seed))
        .collect::<Result<Vec<_>, _>>()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!(
        "{:<10} {:<14} {:>9} {:>14} {:>14} {:>12}",
        "family", "params", "distinct", "entropy_bytes", "huffman_bytes", "range_bytes"
    );
    for r in rows {
        println!(
            "{:<10} {:<14} {:>9} {:>14.1} {:>14} {:>12}",
            r.family, r.params, r.distinct, r.entropy_bytes, r.huffman_bytes, r.range_bytes
        );
    }
    Ok(())
}
