//! Command-line front end. Every subcommand reads one config file, writes a
//! resolved snapshot (`resolved.toml`) beside its outputs, and on failure
//! prints a single `ERROR <code> <message>` line and exits nonzero.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DataSource, ExperimentConfig, Mode};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::input_gradient;
use crate::metrics::{
    evaluate, export_input_gradients, loss_landscape_grid, mean_alignment, random_direction, write_grid_csv,
    EvalReport, EvalRow,
};
use crate::nn::{load_checkpoint, save_checkpoint, write_params, Model};
use crate::rng;
use crate::trainer::{finetune_teacher, run_experiment, train_adversarial, train_standard, RunLog};
use crate::transforms::InputTransform;

#[derive(Debug, Parser)]
#[command(name = "igam", about = "Robustness transfer by input gradient adversarial matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Flat TOML config with dotted keys.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cross-entropy training of `model.arch` on natural images.
    TrainStandard(Common),
    /// PGD adversarial training of `model.arch`.
    TrainAt(Common),
    /// Retrain only the logit layer of `teacher.checkpoint` on the target task.
    FinetuneTeacher(Common),
    /// Teacher finetuning followed by gradient matching of a fresh student.
    TrainIgam(Common),
    /// Clean, FGSM and PGD accuracy of `model.checkpoint`.
    Evaluate(Common),
    /// Input-gradient saliency images of `model.checkpoint`.
    ExportGradients(Common),
    /// Loss over the plane spanned by the adversarial and a random direction.
    Landscape(Common),
    /// Merge evaluation CSVs listed in `report.inputs` into one table.
    Report(Common),
}

impl Command {
    fn parts(&self) -> (Mode, &Common) {
        match self {
            Command::TrainStandard(c) => (Mode::TrainStandard, c),
            Command::TrainAt(c) => (Mode::TrainAt, c),
            Command::FinetuneTeacher(c) => (Mode::FinetuneTeacher, c),
            Command::TrainIgam(c) => (Mode::TrainIgam, c),
            Command::Evaluate(c) => (Mode::Evaluate, c),
            Command::ExportGradients(c) => (Mode::ExportGradients, c),
            Command::Landscape(c) => (Mode::Landscape, c),
            Command::Report(c) => (Mode::Report, c),
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Runs one invocation given its arguments (without the program name).
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("igam")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(&cli)
}

/// `ERROR <code> <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().lines().map(str::trim).collect::<Vec<_>>().join("; ").replace(":; ", ": ");
    format!("ERROR {} {}", e.code(), msg)
}

fn execute(cli: &Cli) -> Result<()> {
    let (mode, common) = cli.command.parts();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.check_mode(mode)?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("resolved.toml"), cfg.to_toml())?;
    let out = common.out.as_path();
    match mode {
        Mode::TrainStandard => train_baseline(&cfg, out, false),
        Mode::TrainAt => train_baseline(&cfg, out, true),
        Mode::FinetuneTeacher => finetune_only(&cfg, out),
        Mode::TrainIgam => train_igam(&cfg, out),
        Mode::Evaluate => evaluate_checkpoint(&cfg, out),
        Mode::ExportGradients => export_gradients(&cfg, out),
        Mode::Landscape => landscape(&cfg, out),
        Mode::Report => report(&cfg, out),
    }
}

fn cap(d: Dataset<f64>, n: usize) -> Dataset<f64> {
    if n == 0 || n >= d.len() {
        d
    } else {
        d.split_at(n).0
    }
}

/// Train and test splits as configured.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let (train, test) = match &cfg.data.source {
        DataSource::Synthetic(spec) => {
            let mut tr = spec.clone();
            tr.n = cfg.data.n_train;
            let mut te = spec.clone();
            te.n = cfg.data.n_test;
            (
                synth_dataset(&tr, rng::stream_seed(cfg.seed, "data/train"))?,
                synth_dataset(&te, rng::stream_seed(cfg.seed, "data/test"))?,
            )
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
    };
    let (train, test) = if cfg.data.classes.is_empty() {
        (train, test)
    } else {
        (train.filter_classes(&cfg.data.classes), test.filter_classes(&cfg.data.classes))
    };
    let (train, test) = match cfg.data.source {
        DataSource::Synthetic(_) => (train, test),
        DataSource::Idx { .. } => (cap(train, cfg.data.n_train), cap(test, cfg.data.n_test)),
    };
    if train.shape() != cfg.data.shape {
        return Err(Error::shape(
            "data",
            format!("loaded images are {:?}, config says {:?}", train.shape(), cfg.data.shape),
        ));
    }
    Ok((train, test))
}

fn row_name(cfg: &ExperimentConfig, mode: Mode) -> String {
    cfg.eval_name.clone().unwrap_or_else(|| mode.default_row().to_string())
}

fn save_log(log: &RunLog, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn save_report(rows: Vec<EvalRow>, path: &Path) -> Result<EvalReport> {
    let report = EvalReport { rows };
    report.save(path)?;
    Ok(report)
}

fn with_alignment(cfg: &ExperimentConfig, mut row: EvalRow, model: &Model<f64>, test: &Dataset<f64>) -> Result<EvalRow> {
    if cfg.eval_alignment {
        row.alignment = Some(mean_alignment(model, test, cfg.eval.batch_size)?);
    }
    Ok(row)
}

fn student(cfg: &ExperimentConfig, classes: usize) -> Result<Model<f64>> {
    Model::build(&cfg.model_arch, cfg.data.shape, classes, rng::stream_seed(cfg.seed, rng::INIT_STUDENT))
}

fn load_model(arch: &str, shape: [usize; 3], classes: usize, path: &Path) -> Result<Model<f64>> {
    let mut m = Model::build(arch, shape, classes, 0)?;
    load_checkpoint(&mut m, path).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(m)
}

fn train_baseline(cfg: &ExperimentConfig, out: &Path, adversarial: bool) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let mut model = student(cfg, train.num_classes())?;
    let log = if adversarial {
        train_adversarial(&mut model, &train, &cfg.train, &cfg.attack)?
    } else {
        train_standard(&mut model, &train, &cfg.train)?
    };
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    save_log(&log, &out.join("runlog.csv"))?;
    let mode = if adversarial { Mode::TrainAt } else { Mode::TrainStandard };
    let row = evaluate(&row_name(cfg, mode), &model, &test, &cfg.eval)?;
    save_report(vec![with_alignment(cfg, row, &model, &test)?], &out.join("eval.csv"))?;
    Ok(())
}

fn teacher_and_transform(cfg: &ExperimentConfig) -> Result<(Model<f64>, InputTransform<f64>)> {
    let path = cfg.teacher_checkpoint.as_deref().ok_or(Error::Unreachable)?;
    let teacher = load_model(&cfg.teacher_arch, cfg.teacher_shape, cfg.teacher_classes, path)?;
    let transform = InputTransform::build(&cfg.transform, cfg.data.shape, cfg.teacher_shape)?;
    Ok((teacher, transform))
}

fn save_adapter(transform: &InputTransform<f64>, out: &Path) -> Result<()> {
    let params = transform.params();
    if !params.is_empty() {
        let mut buf = Vec::new();
        write_params(params, &mut buf)?;
        fs::write(out.join("adapter.ckpt"), buf)?;
    }
    Ok(())
}

/// Test images pushed through the adapter (clipped to `[0, 1]`), so the
/// finetuned teacher can be attacked in its own input space.
fn through_adapter(transform: &InputTransform<f64>, data: &Dataset<f64>) -> Result<Dataset<f64>> {
    let t = transform.resolve(&mut rng::stream(0, "eval/pad-offset"));
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, _) = data.batch(&all)?;
    let _mode = crate::autodiff::set_grad_enabled(false);
    let y = t.apply(&x)?;
    let images = y.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Dataset::new(images, data.labels().to_vec(), t.source_shape(), data.num_classes(), "adapted")
}

fn finetune_only(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let (mut teacher, mut transform) = teacher_and_transform(cfg)?;
    teacher.freeze_all_but_logits(train.num_classes(), rng::stream_seed(cfg.seed, rng::INIT_TEACHER))?;
    let log = finetune_teacher(&mut teacher, &mut transform, &train, &cfg.train)?;
    save_checkpoint(&teacher, &out.join("teacher.ckpt"))?;
    save_adapter(&transform, out)?;
    save_log(&log, &out.join("runlog.csv"))?;
    let adapted = through_adapter(&transform, &test)?;
    let row = evaluate(&row_name(cfg, Mode::FinetuneTeacher), &teacher, &adapted, &cfg.eval)?;
    save_report(vec![with_alignment(cfg, row, &teacher, &adapted)?], &out.join("eval.csv"))?;
    Ok(())
}

fn train_igam(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let (teacher, transform) = teacher_and_transform(cfg)?;
    let s = student(cfg, train.num_classes())?;
    let disc_shape = transform.discriminator_shape();
    let disc = Model::build(&cfg.disc_arch, disc_shape, 1, rng::stream_seed(cfg.seed, rng::INIT_DISC))?;
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.seed = cfg.seed;
    let ckpt_dir = out.join("checkpoints");
    let mut on_epoch = |epoch: usize, t: &mut crate::trainer::IgamTrainer<f64>| -> Result<()> {
        fs::create_dir_all(&ckpt_dir)?;
        let rel = format!("checkpoints/student_epoch{epoch:03}.ckpt");
        save_checkpoint(&t.student, &out.join(&rel))?;
        let step = t.steps_taken();
        t.log.checkpoints.push((step, rel));
        Ok(())
    };
    let exp = run_experiment(
        teacher,
        s,
        disc,
        transform,
        &cfg.train,
        &eval_cfg,
        &train,
        &test,
        &row_name(cfg, Mode::TrainIgam),
        &mut on_epoch,
    )?;
    save_checkpoint(&exp.student, &out.join("student.ckpt"))?;
    save_checkpoint(&exp.disc, &out.join("disc.ckpt"))?;
    save_checkpoint(&exp.teacher, &out.join("teacher.ckpt"))?;
    save_adapter(&exp.transform, out)?;
    save_log(&exp.log, &out.join("runlog.csv"))?;
    save_log(&exp.finetune_log, &out.join("finetune_log.csv"))?;
    let mut ck = String::from("step,path\n");
    for (step, path) in &exp.log.checkpoints {
        ck.push_str(&format!("{step},{path}\n"));
    }
    fs::write(out.join("checkpoints.csv"), ck)?;
    fs::write(
        out.join("matching.csv"),
        format!(
            "phase,cos_sim,l_diff\ninit,{},{}\nfinal,{},{}\n",
            exp.matching_before.0, exp.matching_before.1, exp.matching_after.0, exp.matching_after.1
        ),
    )?;
    if !exp.log.diagnostics.is_empty() {
        fs::write(out.join("diagnostics.txt"), exp.log.diagnostics.join("\n") + "\n")?;
    }
    let mut row = exp.row;
    if !cfg.eval_alignment {
        row.alignment = None;
    }
    save_report(vec![row], &out.join("eval.csv"))?;
    Ok(())
}

fn checkpoint_model(cfg: &ExperimentConfig, classes: usize) -> Result<(Model<f64>, String)> {
    let path = cfg.model_checkpoint.as_deref().ok_or(Error::Unreachable)?;
    let model = load_model(&cfg.model_arch, cfg.data.shape, classes, path)?;
    let name = cfg.eval_name.clone().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    Ok((model, name))
}

fn evaluate_checkpoint(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let (model, name) = checkpoint_model(cfg, train.num_classes())?;
    let row = evaluate(&name, &model, &test, &cfg.eval)?;
    save_report(vec![with_alignment(cfg, row, &model, &test)?], &out.join("eval.csv"))?;
    Ok(())
}

fn export_gradients(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let (model, name) = checkpoint_model(cfg, train.num_classes())?;
    let n = cfg.export_count.min(test.len());
    let first: Vec<usize> = (0..n).collect();
    export_input_gradients(&name, &model, &test.subset(&first), out.join("gradients"))?;
    Ok(())
}

fn landscape(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let (model, _) = checkpoint_model(cfg, train.num_classes())?;
    if cfg.landscape_index >= test.len() {
        return Err(Error::InvalidArgument(format!(
            "landscape.index {} out of range for {} test samples",
            cfg.landscape_index,
            test.len()
        )));
    }
    let (x, y) = test.batch(&[cfg.landscape_index])?;
    let label = test.labels()[cfg.landscape_index];
    // unit-norm adversarial direction: the FGSM sign step, normalised
    let _mode = crate::autodiff::set_grad_enabled(true);
    let g = input_gradient(&model, &x.with_grad(), &y, false)?;
    let s: Vec<f64> = g.data().iter().map(|v| crate::attacks::sign(*v)).collect();
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let adv = if norm > 0.0 {
        crate::autodiff::Tensor::from_vec(x.shape(), s.iter().map(|v| v / norm).collect())?
    } else {
        crate::autodiff::Tensor::zeros(x.shape())?
    };
    let rand = random_direction(x.shape(), &mut rng::stream(cfg.seed, "landscape/direction"))?;
    let grid = loss_landscape_grid(
        &model,
        &x,
        label,
        &adv,
        &rand,
        cfg.landscape_extent,
        cfg.landscape_resolution,
    )?;
    let mut buf = Vec::new();
    write_grid_csv(&grid, &mut buf)?;
    fs::write(out.join("landscape.csv"), buf)?;
    Ok(())
}

fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut merged = EvalReport::default();
    for path in &cfg.report_inputs {
        merged.merge(&EvalReport::load(path)?)?;
    }
    merged.save(out.join("report.csv"))?;
    print!("{}", merged.to_csv_string()?);
    Ok(())
}
