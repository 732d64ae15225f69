//! `vitrc` command-line front end.
//!
//! Exit codes: 0 success, 1 environment or I/O failure, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::bench::bench;
use crate::config::ModelConfig;
use crate::error::Error;
use crate::imaging::{render_heatmap, Preprocess};
use crate::metrics::{evaluate_dataset, SaliencyMethod};
use crate::model_io::{save_model, synth_toy_model};
use crate::recipro_cam::{explain_detailed, ClassSelector, ClsMode, ExplainOptions, Kernel};
use crate::tensor::{argmax, softmax};
use crate::vit::{SplitMode, SplitSpec, Vit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ENV: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vitrc", version, about = "Gradient-free ViT saliency maps and ADCC evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Saliency map for one image: heatmap PNG plus raw map document.
    Explain(ExplainArgs),
    /// ADCC evaluation over a directory of images.
    Evaluate(EvaluateArgs),
    /// Mean explanation latency per mask kernel.
    Bench(BenchArgs),
    /// Write a deterministic synthetic model.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Dirac,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Ln,
    Block,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value = "ln")]
    pub split: SplitArg,
    /// Split block; negative values count from the end.
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub block_index: isize,
    /// Zero the class token in every mask.
    #[arg(long)]
    pub no_cls_token: bool,
}

impl MethodArgs {
    fn options(&self) -> ExplainOptions {
        ExplainOptions {
            kernel: match self.kernel {
                KernelArg::Gaussian => Kernel::Gaussian,
                KernelArg::Dirac => Kernel::Dirac,
            },
            cls_mode: if self.no_cls_token {
                ClsMode::ZeroCls
            } else {
                ClsMode::KeepCls
            },
            split: SplitSpec::new(
                match self.split {
                    SplitArg::Ln => SplitMode::Ln,
                    SplitArg::Block => SplitMode::Block,
                },
                self.block_index,
            ),
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Target class index or `auto` for the top-1 prediction.
    #[arg(long, default_value = "auto")]
    pub class: ClassSelector,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Heatmap overlay PNG.
    #[arg(long, default_value = "heatmap.png")]
    pub out: PathBuf,
    /// Raw saliency map document.
    #[arg(long, default_value = "saliency.json")]
    pub raw_out: PathBuf,
    /// Worker threads for the masked batch (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images_dir: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Report path; the CSV export goes next to it with a `.csv` extension.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "auto")]
    pub class: ClassSelector,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Timed iterations per kernel.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 224 px input, 32 px patches (7×7 grid), D=32, 2 heads, 2 blocks, 10 classes.
    Toy,
    Tiny,
    Small,
    Base,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(7, 32, 32, 2, 2, 10),
            Preset::Tiny => ModelConfig::deit_tiny(),
            Preset::Small => ModelConfig::deit_small(),
            Preset::Base => ModelConfig::deit_base(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: Preset,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ClassOutOfRange { .. } | Error::BlockOutOfRange { .. } => EXIT_USAGE,
            _ => EXIT_ENV,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError {
            code: EXIT_ENV,
            message: format!("thread pool: {e}"),
        })?;
    Ok(pool.install(f))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path, method: &MethodArgs) -> Result<Vit, CliError> {
    let vit = Vit::load(path)?;
    method.options().split.resolve(vit.config().depth)?;
    info!("loaded {} ({:?})", path.display(), vit.config());
    Ok(vit)
}

pub fn cmd_explain(args: &ExplainArgs) -> CliResult {
    let vit = load_model(&args.model, &args.method)?;
    let pre = Preprocess::for_size(vit.config().image_size);
    let image = pre.load(&args.image)?;
    let opts = args.method.options();
    let (probs, explanation) = with_workers(args.workers, || {
        let probs = softmax(&vit.forward_full(&image)?);
        let e = explain_detailed(&vit, &image, args.class, &opts)?;
        Ok::<_, Error>((probs, e))
    })??;
    let predicted = argmax(&probs);
    println!("predicted class {predicted} confidence {:.4}", probs[predicted]);
    let s = &explanation.saliency;
    println!(
        "target class {} kernel {} split {} {}",
        s.class_id, opts.kernel, opts.split, opts.cls_mode
    );
    s.save(&args.raw_out)?;
    render_heatmap(&args.image, s, &args.out, &pre)?;
    println!("wrote {} and {}", args.out.display(), args.raw_out.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult {
    let vit = load_model(&args.model, &args.method)?;
    let pre = Preprocess::for_size(vit.config().image_size);
    let method = SaliencyMethod::ReciproCam(args.method.options());
    let report = with_workers(args.workers, || {
        evaluate_dataset(&vit, &args.images_dir, &method, args.limit, &pre)
    })??;
    write_text(&args.out, &report.to_json()?)?;
    let csv_path = args.out.with_extension("csv");
    write_text(&csv_path, &report.to_csv()?)?;
    info!(
        "{} records written to {} and {}",
        report.records.len(),
        args.out.display(),
        csv_path.display()
    );
    println!("{}", report.summary_line());
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult {
    let vit = load_model(&args.model, &args.method)?;
    let pre = Preprocess::for_size(vit.config().image_size);
    let image = pre.load(&args.image)?;
    let opts = args.method.options();
    let report = with_workers(args.workers, || {
        bench(&vit, &image, args.class, &opts, args.iters, 2)
    })??;
    for v in [&report.dirac, &report.gaussian] {
        println!(
            "{:<8} mean {:.3} ms  fps {:.2}  prefix {:.3} ms  suffix {:.3} ms",
            v.kernel, v.mean_ms, v.fps, v.prefix_ms, v.suffix_ms
        );
    }
    println!("gaussian/dirac ratio {:.3}", report.ratio());
    if let Some(out) = &args.out {
        write_text(out, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult {
    let cfg = args.preset.config();
    let weights = synth_toy_model(args.seed, &cfg)?;
    save_model(&args.out, &cfg, &weights)?;
    println!("wrote {} (seed {}, {:?})", args.out.display(), args.seed, cfg);
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Explain(a) => cmd_explain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}
