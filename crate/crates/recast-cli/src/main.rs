//! Network recasting pipeline CLI.

mod commands;
mod config;
mod dataspec;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use commands::{
    cmd_analyze, cmd_eval, cmd_export_plotdata, cmd_finetune, cmd_recast, cmd_train, AnalyzeArgs,
    CliError, EvalArgs, ExportArgs, FinetuneArgs, RecastArgs, TrainArgs,
};
use config::{resolve, ConfigFile};
use dataspec::DataSpec;

#[derive(Parser)]
#[command(
    name = "recast",
    about = "Train CNN teachers, recast them into differently-architected students, and account inference costs",
    version
)]
struct Cli {
    /// Config file with [train]/[recast]/... sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher network from scratch (SGD with Nesterov momentum)
    Train(TrainCli),
    /// Sequentially recast a trained teacher per a plan, optionally fine-tune
    Recast(RecastCli),
    /// Knowledge-distillation fine-tuning of a student against a teacher
    Finetune(FinetuneCli),
    /// Analytic cost report (params, mults, activation loads)
    Analyze(AnalyzeCli),
    /// Top-1 accuracy of a checkpoint on a dataset
    Eval(EvalCli),
    /// Collect recast run summaries into a plot-ready error-vs-cost table
    ExportPlotdata(ExportCli),
}

#[derive(Args)]
struct TrainCli {
    /// preset:NAME | file:arch.txt
    #[arg(long)]
    arch: Option<String>,
    /// synth:k=v,.. | cifar:paths | idx:img,lbl | raw:path
    #[arg(long)]
    data: Option<String>,
    /// Validation data spec (defaults derived for synth data)
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// LR schedule, e.g. `6:10,9:10` (divide by 10 at epochs 6 and 9)
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve under $RECAST_OUT_ROOT)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecastCli {
    /// Teacher checkpoint
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// file:plan.txt | all-conv | dense-basic | compress:R
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long)]
    epochs_per_block: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Run KD fine-tuning after the sequential recast
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneCli {
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeCli {
    /// preset:NAME | file:arch.txt | ckpt:net.rcnet
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// CxHxW, defaults to the architecture's declared input
    #[arg(long)]
    input_shape: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    /// Dataset whose statistics normalize the eval images (usually the
    /// train spec); defaults to norm.kv next to the checkpoint
    #[arg(long)]
    norm_data: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCli {
    /// Comma-separated recast run directories
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn required<T>(v: Option<T>, flag: &str, section: &str) -> Result<T, CliError> {
    v.ok_or_else(|| {
        CliError::Config(anyhow::anyhow!(
            "missing `--{flag}` (or `{flag}` under [{section}] in the config file)"
        ))
    })
}

fn file_of(cli_config: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match cli_config {
        Some(path) => ConfigFile::load(path).map_err(CliError::Config),
        None => Ok(ConfigFile::default()),
    }
}

fn opt_string(flag: &Option<String>, file: Option<&str>) -> Option<String> {
    flag.clone().or_else(|| file.map(|s| s.to_string()))
}

fn parse_data(spec: &str) -> Result<DataSpec, CliError> {
    DataSpec::parse(spec).map_err(CliError::Config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = file_of(&cli.config)?;
    let r = |e: anyhow::Error| CliError::Config(e);
    match cli.command {
        Command::Train(t) => {
            let sec = "train";
            let arch = required(opt_string(&t.arch, cfg.get(sec, "arch")), "arch", sec)?;
            let data_s = required(opt_string(&t.data, cfg.get(sec, "data")), "data", sec)?;
            let val = opt_string(&t.val_data, cfg.get(sec, "val-data"))
                .map(|s| parse_data(&s))
                .transpose()?;
            let args = TrainArgs {
                arch,
                data: parse_data(&data_s)?,
                val,
                classes: resolve(t.classes, cfg.get(sec, "classes"), 4).map_err(r)?,
                epochs: resolve(t.epochs, cfg.get(sec, "epochs"), 10).map_err(r)?,
                lr: resolve(t.lr, cfg.get(sec, "lr"), 0.05).map_err(r)?,
                momentum: resolve(t.momentum, cfg.get(sec, "momentum"), 0.9).map_err(r)?,
                weight_decay: resolve(t.weight_decay, cfg.get(sec, "weight-decay"), 5e-4)
                    .map_err(r)?,
                milestones: resolve(
                    t.milestones,
                    cfg.get(sec, "milestones"),
                    "6:10".to_string(),
                )
                .map_err(r)?,
                batch: resolve(t.batch, cfg.get(sec, "batch"), 128).map_err(r)?,
                seed: resolve(t.seed, cfg.get(sec, "seed"), 1).map_err(r)?,
                out: required(
                    t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
                    "out",
                    sec,
                )?,
            };
            cmd_train(&args)
        }
        Command::Recast(t) => {
            let sec = "recast";
            let args = RecastArgs {
                teacher: required(
                    t.teacher.or_else(|| cfg.get(sec, "teacher").map(PathBuf::from)),
                    "teacher",
                    sec,
                )?,
                plan: required(opt_string(&t.plan, cfg.get(sec, "plan")), "plan", sec)?,
                data: parse_data(&required(
                    opt_string(&t.data, cfg.get(sec, "data")),
                    "data",
                    sec,
                )?)?,
                val: opt_string(&t.val_data, cfg.get(sec, "val-data"))
                    .map(|s| parse_data(&s))
                    .transpose()?,
                epochs_per_block: resolve(t.epochs_per_block, cfg.get(sec, "epochs-per-block"), 8)
                    .map_err(r)?,
                lr: resolve(t.lr, cfg.get(sec, "lr"), 5e-4).map_err(r)?,
                finetune: t.finetune || cfg.get(sec, "finetune") == Some("true"),
                finetune_epochs: resolve(t.finetune_epochs, cfg.get(sec, "finetune-epochs"), 8)
                    .map_err(r)?,
                finetune_lr: resolve(t.finetune_lr, cfg.get(sec, "finetune-lr"), 1e-4)
                    .map_err(r)?,
                batch: resolve(t.batch, cfg.get(sec, "batch"), 128).map_err(r)?,
                seed: resolve(t.seed, cfg.get(sec, "seed"), 1).map_err(r)?,
                out: required(
                    t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
                    "out",
                    sec,
                )?,
            };
            cmd_recast(&args)
        }
        Command::Finetune(t) => {
            let sec = "finetune";
            let args = FinetuneArgs {
                teacher: required(
                    t.teacher.or_else(|| cfg.get(sec, "teacher").map(PathBuf::from)),
                    "teacher",
                    sec,
                )?,
                student: required(
                    t.student.or_else(|| cfg.get(sec, "student").map(PathBuf::from)),
                    "student",
                    sec,
                )?,
                data: parse_data(&required(
                    opt_string(&t.data, cfg.get(sec, "data")),
                    "data",
                    sec,
                )?)?,
                val: opt_string(&t.val_data, cfg.get(sec, "val-data"))
                    .map(|s| parse_data(&s))
                    .transpose()?,
                epochs: resolve(t.epochs, cfg.get(sec, "epochs"), 8).map_err(r)?,
                lr: resolve(t.lr, cfg.get(sec, "lr"), 1e-4).map_err(r)?,
                batch: resolve(t.batch, cfg.get(sec, "batch"), 128).map_err(r)?,
                seed: resolve(t.seed, cfg.get(sec, "seed"), 1).map_err(r)?,
                out: required(
                    t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
                    "out",
                    sec,
                )?,
            };
            cmd_finetune(&args)
        }
        Command::Analyze(t) => {
            let sec = "analyze";
            let args = AnalyzeArgs {
                arch: required(opt_string(&t.arch, cfg.get(sec, "arch")), "arch", sec)?,
                classes: resolve(t.classes, cfg.get(sec, "classes"), 10).map_err(r)?,
                input_shape: opt_string(&t.input_shape, cfg.get(sec, "input-shape")),
                out: t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
            };
            cmd_analyze(&args)
        }
        Command::Eval(t) => {
            let sec = "eval";
            let args = EvalArgs {
                checkpoint: required(
                    t.checkpoint
                        .or_else(|| cfg.get(sec, "checkpoint").map(PathBuf::from)),
                    "checkpoint",
                    sec,
                )?,
                data: parse_data(&required(
                    opt_string(&t.data, cfg.get(sec, "data")),
                    "data",
                    sec,
                )?)?,
                norm_data: opt_string(&t.norm_data, cfg.get(sec, "norm-data"))
                    .map(|s| parse_data(&s))
                    .transpose()?,
                batch: resolve(t.batch, cfg.get(sec, "batch"), 256).map_err(r)?,
                out: t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
            };
            cmd_eval(&args)
        }
        Command::ExportPlotdata(t) => {
            let sec = "export-plotdata";
            let runs_s = required(opt_string(&t.runs, cfg.get(sec, "runs")), "runs", sec)?;
            let args = ExportArgs {
                runs: runs_s.split(',').map(PathBuf::from).collect(),
                out: required(
                    t.out.or_else(|| cfg.get(sec, "out").map(PathBuf::from)),
                    "out",
                    sec,
                )?,
            };
            cmd_export_plotdata(&args)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
