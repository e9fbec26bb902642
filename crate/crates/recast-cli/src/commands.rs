//! The pipeline commands: train, recast, finetune, analyze, eval,
//! export-plotdata.

use anyhow::{anyhow, bail, Context, Result};
use std::path::{Path, PathBuf};

use recast_core::cost;
use recast_core::data::{BatchStream, ChannelStats, Dataset, Split};
use recast_core::engine::{
    evaluate, kd_finetune, make_compression_plan, sequential_recast, train_backprop, RecastConfig,
    RecastPlan, TrainLog,
};
use recast_core::net::{parse_arch, preset_spec, NetSpec, Network};
use recast_core::tensor::OptimizerConfig;

use crate::config::Resolved;
use crate::dataspec::DataSpec;

/// Configuration and validation problems exit with 2, runtime failures
/// with 3.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(e) | CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

pub type CliResult = std::result::Result<(), CliError>;

fn cfg_err<T>(r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(CliError::Config)
}

fn run_err<T>(r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

/// Output directories resolve against `RECAST_OUT_ROOT` when relative.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("RECAST_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// `preset:NAME`, `file:arch.txt`, or `ckpt:net.rcnet`.
pub fn resolve_arch(spec: &str, num_classes: usize) -> Result<NetSpec> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("arch spec `{spec}` needs a `preset:`/`file:`/`ckpt:` prefix"))?;
    match kind {
        "preset" => Ok(preset_spec(rest, num_classes)?),
        "file" => {
            let text = std::fs::read_to_string(rest)
                .with_context(|| format!("reading arch file `{rest}`"))?;
            Ok(parse_arch(&text, num_classes)?)
        }
        "ckpt" => Ok(Network::load(Path::new(rest))?.spec()),
        other => bail!("unknown arch kind `{other}`"),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|t| t.parse::<usize>().map_err(|_| anyhow!("bad shape `{s}`")))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        bail!("input shape needs CxHxW, got `{s}`");
    }
    Ok([dims[0], dims[1], dims[2]])
}

fn parse_milestones(s: &str) -> Result<Vec<(usize, f64)>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|pair| {
            let (e, d) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("milestone `{pair}` needs `epoch:divisor`"))?;
            Ok((e.parse::<usize>()?, d.parse::<f64>()?))
        })
        .collect()
}

fn write_norm_kv(dir: &Path, stats: &ChannelStats) -> Result<()> {
    let mut out = String::new();
    let join = |v: &[f32]| {
        v.iter()
            .map(|x| format!("{x:.8}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&format!("mean={}\n", join(&stats.mean)));
    out.push_str(&format!("std={}\n", join(&stats.std)));
    std::fs::write(dir.join("norm.kv"), out)?;
    Ok(())
}

fn read_norm_kv(path: &Path) -> Result<ChannelStats> {
    let text = std::fs::read_to_string(path)?;
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("mean=") {
            mean = Some(
                v.split(',')
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            );
        } else if let Some(v) = line.strip_prefix("std=") {
            std = Some(
                v.split(',')
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            );
        }
    }
    Ok(ChannelStats {
        mean: mean.ok_or_else(|| anyhow!("norm file missing mean"))?,
        std: std.ok_or_else(|| anyhow!("norm file missing std"))?,
    })
}

fn write_metrics(dir: &Path, name: &str, log: &TrainLog) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_acc,lr\n");
    for line in &log.lines {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(dir.join(name), out)?;
    Ok(())
}

/// Load train/val datasets and attach train-split normalization to both.
fn load_train_val(data: &DataSpec, val: Option<&DataSpec>) -> Result<(Dataset, Dataset)> {
    let mut train = data.load()?;
    train.split = Split::Train;
    let stats = train.compute_norm();
    let val_spec = match val {
        Some(v) => v.clone(),
        None => data
            .default_val()
            .ok_or_else(|| anyhow!("file-backed data needs an explicit --val-data spec"))?,
    };
    let mut val = val_spec.load()?;
    val.split = Split::Val;
    val.norm = Some(stats);
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub arch: String,
    pub data: DataSpec,
    pub val: Option<DataSpec>,
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: String,
    pub batch: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult {
    let spec = cfg_err(resolve_arch(&args.arch, args.classes))?;
    let milestones = cfg_err(parse_milestones(&args.milestones))?;
    let optimizer = OptimizerConfig::sgd_nesterov(args.lr, args.momentum, args.weight_decay)
        .with_schedule(milestones);
    cfg_err(optimizer.validate().map_err(Into::into))?;
    let (train, val) = cfg_err(load_train_val(&args.data, args.val.as_ref()))?;
    if train.image_shape() != spec.input_shape {
        return Err(CliError::Config(anyhow!(
            "dataset images {:?} do not match arch input {:?}",
            train.image_shape(),
            spec.input_shape
        )));
    }
    let out = resolve_out(&args.out);
    cfg_err(std::fs::create_dir_all(&out).map_err(Into::into))?;

    let mut resolved = Resolved::new("train");
    resolved.set("arch", &args.arch);
    resolved.set("classes", args.classes);
    resolved.set("epochs", args.epochs);
    resolved.set("lr", args.lr);
    resolved.set("momentum", args.momentum);
    resolved.set("weight_decay", args.weight_decay);
    resolved.set("milestones", &args.milestones);
    resolved.set("batch", args.batch);
    resolved.set("seed", args.seed);
    cfg_err(resolved.write(&out))?;

    let mut net = run_err(Network::build(&spec, args.seed).map_err(Into::into))?;
    let stream = BatchStream::new(&train, args.batch, args.seed.wrapping_add(1), true);
    let log = run_err(
        train_backprop(&mut net, &stream, &val, args.epochs, &optimizer).map_err(Into::into),
    )?;
    run_err(net.save(out.join("teacher.rcnet")).map_err(Into::into))?;
    run_err(write_metrics(&out, "metrics.csv", &log))?;
    run_err(write_norm_kv(&out, train.norm.as_ref().unwrap()))?;
    println!(
        "trained {} for {} epochs: best val acc {:.4} (epoch {}); checkpoint at {}",
        args.arch,
        args.epochs,
        log.best_val_acc,
        log.best_epoch,
        out.join("teacher.rcnet").display()
    );
    Ok(())
}

/// `file:plan.txt`, `all-conv`, `dense-basic`, or `compress:<r>`.
pub fn resolve_plan(spec: &str, teacher: &NetSpec) -> Result<RecastPlan> {
    let plan = if let Some(path) = spec.strip_prefix("file:") {
        RecastPlan::parse(
            &std::fs::read_to_string(path).with_context(|| format!("reading plan `{path}`"))?,
        )?
    } else if spec == "all-conv" {
        RecastPlan::all_to_convolution(teacher)
    } else if spec == "dense-basic" {
        RecastPlan::dense_to_basic(teacher)
    } else if let Some(r) = spec.strip_prefix("compress:") {
        make_compression_plan(teacher, r.parse::<f64>().context("compression ratio")?)?
    } else {
        bail!("unknown plan spec `{spec}` (file:PATH, all-conv, dense-basic, compress:R)");
    };
    plan.validate(teacher)?;
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct RecastArgs {
    pub teacher: PathBuf,
    pub plan: String,
    pub data: DataSpec,
    pub val: Option<DataSpec>,
    pub epochs_per_block: usize,
    pub lr: f64,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_recast(args: &RecastArgs) -> CliResult {
    let mut teacher = cfg_err(Network::load(&args.teacher).map_err(Into::into))?;
    let teacher_spec = teacher.spec();
    let plan = cfg_err(resolve_plan(&args.plan, &teacher_spec))?;
    let (train, val) = cfg_err(load_train_val(&args.data, args.val.as_ref()))?;
    let out = resolve_out(&args.out);
    cfg_err(std::fs::create_dir_all(&out).map_err(Into::into))?;

    let mut resolved = Resolved::new("recast");
    resolved.set("teacher", args.teacher.display());
    resolved.set("plan", &args.plan);
    resolved.set("epochs_per_block", args.epochs_per_block);
    resolved.set("lr", args.lr);
    resolved.set("finetune", args.finetune);
    resolved.set("finetune_epochs", args.finetune_epochs);
    resolved.set("finetune_lr", args.finetune_lr);
    resolved.set("batch", args.batch);
    resolved.set("seed", args.seed);
    cfg_err(resolved.write(&out))?;
    cfg_err(std::fs::write(out.join("plan.resolved"), plan.format()).map_err(Into::into))?;

    let config = RecastConfig {
        epochs_per_block: args.epochs_per_block,
        optimizer: OptimizerConfig::adam(args.lr).with_schedule(vec![(5, 10.0)]),
        finetune_epochs: args.finetune_epochs,
        finetune_optimizer: OptimizerConfig::adam(args.finetune_lr).with_schedule(vec![(5, 10.0)]),
        freeze_prefix: false,
        seed: args.seed,
    };
    let stream = BatchStream::new(&train, args.batch, args.seed.wrapping_add(1), true);
    let (mut student, log) = run_err(
        sequential_recast(&mut teacher, &plan, &stream, &config).map_err(Into::into),
    )?;

    let mut ft_lines = String::new();
    if args.finetune {
        let ft = run_err(
            kd_finetune(
                &mut teacher,
                &mut student,
                &stream,
                &val,
                config.finetune_epochs,
                &config.finetune_optimizer,
            )
            .map_err(Into::into),
        )?;
        ft_lines = ft.lines.join("\n");
    }

    // step logs
    let mut log_text = String::from("step,epoch,loss,lr\n");
    for line in &log.lines {
        log_text.push_str(line);
        log_text.push('\n');
    }
    run_err(std::fs::write(out.join("recast_log.csv"), log_text).map_err(Into::into))?;
    if args.finetune {
        run_err(
            std::fs::write(
                out.join("finetune_metrics.csv"),
                format!("epoch,train_loss,val_acc,lr\n{ft_lines}\n"),
            )
            .map_err(Into::into),
        )?;
    }

    // before/after cost reports
    let student_spec = student.spec();
    let cost_t = cost::cost_report(&teacher_spec);
    let cost_s = cost::cost_report(&student_spec);
    run_err(std::fs::write(out.join("cost_teacher.txt"), cost_t.text()).map_err(Into::into))?;
    run_err(std::fs::write(out.join("cost_teacher.kv"), cost_t.kv()).map_err(Into::into))?;
    run_err(std::fs::write(out.join("cost_student.txt"), cost_s.text()).map_err(Into::into))?;
    run_err(std::fs::write(out.join("cost_student.kv"), cost_s.kv()).map_err(Into::into))?;

    let teacher_acc = run_err(evaluate(&mut teacher, &val, args.batch).map_err(Into::into))?;
    let student_acc = run_err(evaluate(&mut student, &val, args.batch).map_err(Into::into))?;
    let summary = format!(
        "teacher_params={}\nteacher_mults={}\nteacher_act_load={}\nteacher_val_acc={:.4}\n\
         student_params={}\nstudent_mults={}\nstudent_act_load={}\nstudent_val_acc={:.4}\n",
        cost_t.params(),
        cost_t.mults(),
        cost_t.act_load(),
        teacher_acc,
        cost_s.params(),
        cost_s.mults(),
        cost_s.act_load(),
        student_acc
    );
    run_err(std::fs::write(out.join("summary.kv"), summary).map_err(Into::into))?;
    run_err(write_norm_kv(&out, train.norm.as_ref().unwrap()))?;
    run_err(net_save(&student, &out.join("student.rcnet")))?;
    println!(
        "recast {} blocks ({} steps): teacher acc {:.4}, student acc {:.4}; act load {} -> {}",
        teacher_spec.blocks.len(),
        log.steps.len(),
        teacher_acc,
        student_acc,
        cost_t.act_load(),
        cost_s.act_load()
    );
    Ok(())
}

fn net_save(net: &Network, path: &Path) -> Result<()> {
    net.save(path)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FinetuneArgs {
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub data: DataSpec,
    pub val: Option<DataSpec>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> CliResult {
    let mut teacher = cfg_err(Network::load(&args.teacher).map_err(Into::into))?;
    let mut student = cfg_err(Network::load(&args.student).map_err(Into::into))?;
    let (train, val) = cfg_err(load_train_val(&args.data, args.val.as_ref()))?;
    let out = resolve_out(&args.out);
    cfg_err(std::fs::create_dir_all(&out).map_err(Into::into))?;

    let mut resolved = Resolved::new("finetune");
    resolved.set("teacher", args.teacher.display());
    resolved.set("student", args.student.display());
    resolved.set("epochs", args.epochs);
    resolved.set("lr", args.lr);
    resolved.set("batch", args.batch);
    resolved.set("seed", args.seed);
    cfg_err(resolved.write(&out))?;

    let optimizer = OptimizerConfig::adam(args.lr).with_schedule(vec![(5, 10.0)]);
    let stream = BatchStream::new(&train, args.batch, args.seed.wrapping_add(1), true);
    let log = run_err(
        kd_finetune(&mut teacher, &mut student, &stream, &val, args.epochs, &optimizer)
            .map_err(Into::into),
    )?;
    run_err(net_save(&student, &out.join("student_ft.rcnet")))?;
    run_err(write_metrics(&out, "metrics.csv", &log))?;
    println!(
        "fine-tuned for {} epochs: best val acc {:.4} (epoch {})",
        args.epochs, log.best_val_acc, log.best_epoch
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub arch: String,
    pub classes: usize,
    pub input_shape: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult {
    let spec = cfg_err(resolve_arch(&args.arch, args.classes))?;
    let report = match &args.input_shape {
        Some(s) => {
            let shape = cfg_err(parse_shape(s))?;
            if shape[0] != spec.input_shape[0] {
                return Err(CliError::Config(anyhow!(
                    "channel count {} does not match the architecture's {}",
                    shape[0],
                    spec.input_shape[0]
                )));
            }
            cost::cost_report_at(&spec, (shape[1], shape[2]))
        }
        None => cost::cost_report(&spec),
    };
    print!("{}", report.text());
    if let Some(out) = &args.out {
        let out = resolve_out(out);
        run_err(std::fs::create_dir_all(&out).map_err(Into::into))?;
        run_err(std::fs::write(out.join("cost.txt"), report.text()).map_err(Into::into))?;
        run_err(std::fs::write(out.join("cost.kv"), report.kv()).map_err(Into::into))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: DataSpec,
    pub norm_data: Option<DataSpec>,
    pub batch: usize,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult {
    let mut net = cfg_err(Network::load(&args.checkpoint).map_err(Into::into))?;
    let mut data = cfg_err(args.data.load().map_err(Into::into))?;
    data.split = Split::Test;
    data.norm = match &args.norm_data {
        Some(spec) => {
            let mut norm_src = cfg_err(spec.load())?;
            Some(norm_src.compute_norm())
        }
        None => {
            // fall back to the stats written next to the checkpoint
            let sibling = args.checkpoint.parent().map(|d| d.join("norm.kv"));
            match sibling {
                Some(p) if p.exists() => Some(cfg_err(read_norm_kv(&p))?),
                _ => None,
            }
        }
    };
    let acc = run_err(evaluate(&mut net, &data, args.batch).map_err(Into::into))?;
    println!("accuracy {:.4} error {:.4}", acc, 1.0 - acc);
    if let Some(out) = &args.out {
        let out = resolve_out(out);
        run_err(std::fs::create_dir_all(&out).map_err(Into::into))?;
        run_err(
            std::fs::write(
                out.join("eval.kv"),
                format!("accuracy={acc:.4}\nerror={:.4}\n", 1.0 - acc),
            )
            .map_err(Into::into),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExportArgs {
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
}

/// Tabular error-vs-cost series from recast run directories: one baseline
/// row and one recast row per run.
pub fn cmd_export_plotdata(args: &ExportArgs) -> CliResult {
    let mut rows: Vec<(String, String, u64, u64, u64, f64)> = Vec::new();
    for dir in &args.runs {
        let path = resolve_out(dir).join("summary.kv");
        let text = cfg_err(
            std::fs::read_to_string(&path)
                .with_context(|| format!("reading `{}`", path.display())),
        )?;
        let get = |key: &str| -> Result<f64> {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .ok_or_else(|| anyhow!("`{}` missing key {key}", path.display()))?
                .parse::<f64>()
                .map_err(Into::into)
        };
        let run = dir.display().to_string();
        for variant in ["teacher", "student"] {
            let label = if variant == "teacher" { "baseline" } else { "recast" };
            rows.push((
                run.clone(),
                label.to_string(),
                cfg_err(get(&format!("{variant}_params")))? as u64,
                cfg_err(get(&format!("{variant}_mults")))? as u64,
                cfg_err(get(&format!("{variant}_act_load")))? as u64,
                cfg_err(get(&format!("{variant}_val_acc")))?,
            ));
        }
    }
    let mut out_text = String::from("run\tvariant\tparams\tmults\tact_load\tval_acc\tval_err\n");
    for (run, variant, params, mults, acts, acc) in &rows {
        out_text.push_str(&format!(
            "{run}\t{variant}\t{params}\t{mults}\t{acts}\t{acc:.4}\t{:.4}\n",
            1.0 - acc
        ));
    }
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent() {
        run_err(std::fs::create_dir_all(parent).map_err(Into::into))?;
    }
    run_err(std::fs::write(&out, out_text).map_err(Into::into))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
