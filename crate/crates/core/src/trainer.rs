//! Training loops: standard, PGD adversarial training, teacher logit
//! finetuning through an input adapter, and the alternating
//! student/discriminator gradient-matching loop.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{adversarial_train_epoch, AttackConfig};
use crate::autodiff::{grad, set_grad_enabled, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_alignment, EvalConfig, EvalRow};
use crate::losses::{
    discriminator_accuracy, input_gradient_with, student_objective, xent, xent_logits, AdvForm, AdvOptions,
    LossWeights,
};
use crate::nn::{Model, Sgd};
use crate::rng;
use crate::scalar::Real;
use crate::transforms::InputTransform;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub lr_teacher: T,
    pub lr_student: T,
    pub lr_disc: T,
    pub momentum: T,
    pub lambda_adv: T,
    pub lambda_diff: T,
    /// The discriminator ascends once per this many student steps.
    pub disc_update_period: usize,
    pub finetune_epochs: usize,
    pub igam_epochs: usize,
    /// Epochs of standard or adversarial training.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub non_saturating: bool,
    pub standardize_j: bool,
    /// Steps with `|L_adv|` above this (or any non-finite loss) are skipped.
    pub divergence_limit: f64,
    /// Global-norm cap on each student gradient step in gradient matching.
    pub grad_clip: Option<T>,
    /// Adversarial training ramps epsilon (and eta with it) linearly over this
    /// many initial epochs: epoch `e < W` uses `eps * (e + 1) / (W + 1)`.
    pub epsilon_warmup: usize,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            lr_teacher: T::lit(0.05),
            lr_student: T::lit(0.05),
            lr_disc: T::lit(0.01),
            momentum: T::lit(0.9),
            lambda_adv: T::one(),
            lambda_diff: T::lit(10.0),
            disc_update_period: 5,
            finetune_epochs: 1,
            igam_epochs: 1,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            non_saturating: false,
            standardize_j: false,
            divergence_limit: 50.0,
            grad_clip: None,
            epsilon_warmup: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    /// All violations, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lr_teacher", self.lr_teacher),
            ("lr_student", self.lr_student),
            ("lr_disc", self.lr_disc),
        ] {
            if !(v > T::zero() && v.is_finite()) {
                errs.push(format!("train.{name} must be > 0, got {v}"));
            }
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            errs.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_diff", self.lambda_diff)] {
            if !(v >= T::zero() && v.is_finite()) {
                errs.push(format!("igam.{name} must be >= 0, got {v}"));
            }
        }
        if self.disc_update_period == 0 {
            errs.push("igam.disc_update_period must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > T::zero() && c.is_finite()) {
                errs.push(format!("igam.grad_clip must be > 0, got {c}"));
            }
        }
        if !(self.divergence_limit > 0.0) {
            errs.push("igam.divergence_limit must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn weights(&self) -> LossWeights<T> {
        LossWeights {
            lambda_adv: self.lambda_adv,
            lambda_diff: self.lambda_diff,
        }
    }
}

/// One logged optimisation step. Quantities a mode does not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_xent: f64,
    pub l_adv: Option<f64>,
    pub l_diff: Option<f64>,
    pub disc_acc: Option<f64>,
    pub cos_sim: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// Skipped steps and other non-fatal events.
    pub diagnostics: Vec<String>,
    /// `(step, path)` of every checkpoint written during the run.
    pub checkpoints: Vec<(usize, String)>,
}

pub const RUNLOG_HEADER: [&str; 6] = ["step", "l_xent", "l_adv", "l_diff", "disc_acc", "cos_sim"];

impl RunLog {
    fn push(&mut self, r: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|p| p.step < r.step));
        self.records.push(r);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        out.write_record(RUNLOG_HEADER).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                r.l_xent.to_string(),
                opt(r.l_adv),
                opt(r.l_diff),
                opt(r.disc_acc),
                opt(r.cos_sim),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<RunLog> {
        let mut rd = csv::Reader::from_reader(r);
        let io = |e: csv::Error| Error::Io(e.to_string());
        let header = rd.headers().map_err(io)?.clone();
        if header.iter().ne(RUNLOG_HEADER) {
            return Err(Error::Io(format!("unexpected run-log header {header:?}")));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Io(format!("bad number '{s}'")))
            }
        };
        let mut log = RunLog::default();
        for row in rd.records() {
            let row = row.map_err(io)?;
            log.records.push(StepRecord {
                step: row[0].parse().map_err(|_| Error::Io(format!("bad step '{}'", &row[0])))?,
                l_xent: num(&row[1])?.unwrap_or(f64::NAN),
                l_adv: num(&row[2])?,
                l_diff: num(&row[3])?,
                disc_acc: num(&row[4])?,
                cos_sim: num(&row[5])?,
            });
        }
        Ok(log)
    }
}

fn param_grads<T: Real>(loss: &Tensor<T>, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let refs: Vec<&Tensor<T>> = params.iter().collect();
    grad(loss, &refs, false)
}

/// One epoch of plain cross-entropy training on shuffled batches.
pub fn standard_epoch<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    data: &Dataset<T>,
    batch_size: usize,
    shuffle: &mut R,
    log: &mut RunLog,
) -> Result<()> {
    let _mode = set_grad_enabled(true);
    for idx in data.batch_indices(batch_size, Some(shuffle)) {
        let (x, y) = data.batch(&idx)?;
        let loss = xent(model, &x, &y)?;
        let grads = param_grads(&loss, &model.trainable())?;
        opt.step(model, &grads)?;
        let step = log.records.last().map_or(0, |r| r.step + 1);
        log.push(StepRecord {
            step,
            l_xent: loss.item()?.as_f64(),
            l_adv: None,
            l_diff: None,
            disc_acc: None,
            cos_sim: None,
        });
    }
    Ok(())
}

/// Standard training for `cfg.epochs` epochs.
pub fn train_standard<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig<T>) -> Result<RunLog> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.lr_student, cfg.momentum);
    let mut shuffle = rng::stream(cfg.seed, rng::DATA_SHUFFLE);
    let mut log = RunLog::default();
    for _ in 0..cfg.epochs {
        standard_epoch(model, &mut opt, data, cfg.batch_size, &mut shuffle, &mut log)?;
    }
    Ok(log)
}

/// PGD adversarial training for `cfg.epochs` epochs; one record per epoch
/// holding the mean adversarial loss.
pub fn train_adversarial<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig<T>,
    attack: &AttackConfig<T>,
) -> Result<RunLog> {
    cfg.validate()?;
    attack.validate()?;
    let mut opt = Sgd::new(cfg.lr_student, cfg.momentum);
    let mut shuffle = rng::stream(cfg.seed, rng::DATA_SHUFFLE);
    let mut attack_rng = rng::stream(cfg.seed, rng::ATTACK);
    let mut log = RunLog::default();
    for epoch in 0..cfg.epochs {
        let mut at = *attack;
        if epoch < cfg.epsilon_warmup {
            let f = T::lit((epoch + 1) as f64 / (cfg.epsilon_warmup + 1) as f64);
            at.epsilon = attack.epsilon * f;
            at.eta = attack.eta * f;
        }
        let stats = adversarial_train_epoch(model, &mut opt, data, &at, cfg.batch_size, &mut shuffle, &mut attack_rng)?;
        log.push(StepRecord {
            step: epoch,
            l_xent: stats.mean_loss,
            l_adv: None,
            l_diff: None,
            disc_acc: None,
            cos_sim: None,
        });
    }
    Ok(log)
}

fn check_adapter<T: Real>(teacher: &Model<T>, transform: &InputTransform<T>, data: &Dataset<T>) -> Result<()> {
    if transform.source_shape() != teacher.input_shape() || transform.target_shape() != data.shape() {
        return Err(Error::shape(
            "transform",
            format!(
                "transform {:?} -> {:?}, data {:?}, teacher input {:?}",
                transform.target_shape(),
                transform.source_shape(),
                data.shape(),
                teacher.input_shape()
            ),
        ));
    }
    Ok(())
}

/// Trains the teacher's unfrozen parameters (the logit layer after
/// `freeze_all_but_logits`) together with any trainable adapter on the target
/// task, then freezes the adapter. Frozen parameters are untouched.
pub fn finetune_teacher<T: Real>(
    teacher: &mut Model<T>,
    transform: &mut InputTransform<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig<T>,
) -> Result<RunLog> {
    cfg.validate()?;
    check_adapter(teacher, transform, data)?;
    let _mode = set_grad_enabled(true);
    let mut opt = Sgd::new(cfg.lr_teacher, cfg.momentum);
    let mut shuffle = rng::stream(cfg.seed, "finetune/shuffle");
    let mut pad = rng::stream(cfg.seed, "finetune/pad-offset");
    let mut log = RunLog::default();
    for _ in 0..cfg.finetune_epochs {
        for idx in data.batch_indices(cfg.batch_size, Some(&mut shuffle)) {
            let (x, y) = data.batch(&idx)?;
            let t = transform.resolve(&mut pad);
            let loss = xent_logits(&teacher.logits(&t.apply(&x)?)?, &y)?;
            let model_params = teacher.trainable();
            let adapter_params = transform.trainable();
            let all: Vec<Tensor<T>> = model_params.iter().chain(&adapter_params).cloned().collect();
            let mut grads = param_grads(&loss, &all)?;
            let adapter_grads = grads.split_off(model_params.len());
            opt.step(teacher, &grads)?;
            for (p, g) in transform.params_mut().into_iter().filter(|p| !p.is_frozen()).zip(&adapter_grads) {
                opt.update(p, g, T::one())?;
            }
            let step = log.records.last().map_or(0, |r| r.step + 1);
            log.push(StepRecord {
                step,
                l_xent: loss.item()?.as_f64(),
                l_adv: None,
                l_diff: None,
                disc_acc: None,
                cos_sim: None,
            });
        }
    }
    transform.freeze();
    Ok(log)
}

/// Teacher input gradient for target-space images: the transform stays in
/// the graph, so `J_t` lives in the student's input space.
pub fn teacher_gradient<T: Real>(
    teacher: &Model<T>,
    transform: &InputTransform<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<Tensor<T>> {
    let _mode = set_grad_enabled(true);
    input_gradient_with(|x| teacher.logits(&transform.apply(x)?), &x.with_grad(), y, false)
}

/// Mean over samples of `cos(a_i, b_i)`; a zero vector has cosine 0.
pub fn mean_cosine<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.shape()[0].max(1);
    let d = a.numel() / n;
    let mut total = 0.0;
    for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (&p, &q) in ra.iter().zip(rb) {
            let (p, q) = (p.as_f64(), q.as_f64());
            ab += p * q;
            aa += p * p;
            bb += q * q;
        }
        if aa > 0.0 && bb > 0.0 {
            total += ab / (aa.sqrt() * bb.sqrt());
        }
    }
    total / n as f64
}

/// Alternating student / discriminator optimisation against a frozen teacher.
pub struct IgamTrainer<T: Real> {
    pub student: Model<T>,
    pub disc: Model<T>,
    teacher: Model<T>,
    transform: InputTransform<T>,
    cfg: TrainConfig<T>,
    student_opt: Sgd<T>,
    disc_opt: Sgd<T>,
    shuffle: ChaCha8Rng,
    pad: ChaCha8Rng,
    teacher_digest: u64,
    step: usize,
    pub log: RunLog,
}

impl<T: Real> IgamTrainer<T> {
    /// The teacher and adapter are frozen here and must stay bit-identical for
    /// the whole run.
    pub fn new(
        student: Model<T>,
        mut teacher: Model<T>,
        disc: Model<T>,
        mut transform: InputTransform<T>,
        cfg: TrainConfig<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if student.input_shape() != transform.target_shape() {
            return Err(Error::shape(
                "igam",
                format!("student input {:?} vs transform {:?}", student.input_shape(), transform.target_shape()),
            ));
        }
        if transform.source_shape() != teacher.input_shape() {
            return Err(Error::shape(
                "igam",
                format!("teacher input {:?} vs transform {:?}", teacher.input_shape(), transform.source_shape()),
            ));
        }
        let disc_shape = if transform.crops() {
            transform.discriminator_shape()
        } else {
            transform.target_shape()
        };
        if disc.input_shape() != disc_shape {
            return Err(Error::shape(
                "igam",
                format!("discriminator input {:?} vs gradient view {:?}", disc.input_shape(), disc_shape),
            ));
        }
        teacher.freeze_all();
        transform.freeze();
        Ok(IgamTrainer {
            student_opt: Sgd::new(cfg.lr_student, cfg.momentum).with_clip(cfg.grad_clip),
            disc_opt: Sgd::new(cfg.lr_disc, cfg.momentum),
            shuffle: rng::stream(cfg.seed, rng::DATA_SHUFFLE),
            pad: rng::stream(cfg.seed, rng::PAD_OFFSET),
            teacher_digest: teacher.param_digest(),
            student,
            disc,
            teacher,
            transform,
            cfg,
            step: 0,
            log: RunLog::default(),
        })
    }

    pub fn teacher(&self) -> &Model<T> {
        &self.teacher
    }

    pub fn transform(&self) -> &InputTransform<T> {
        &self.transform
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One pass over `data` in shuffled batches.
    pub fn epoch(&mut self, data: &Dataset<T>) -> Result<()> {
        for idx in data.batch_indices(self.cfg.batch_size, Some(&mut self.shuffle)) {
            let (x, y) = data.batch(&idx)?;
            self.train_step(&x, &y)?;
        }
        Ok(())
    }

    /// One student step (and, every `disc_update_period` steps, one
    /// discriminator ascent step) on a batch.
    pub fn train_step(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let step = self.step;
        self.step += 1;
        match self.try_step(step, x, y) {
            Ok(()) => {}
            Err(Error::NonFiniteValue(what)) => {
                self.log.diagnostics.push(format!("step {step}: skipped, non-finite {what}"));
            }
            Err(e) => return Err(e),
        }
        if self.teacher.param_digest() != self.teacher_digest {
            return Err(Error::TeacherMutated);
        }
        Ok(())
    }

    fn try_step(&mut self, step: usize, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let _mode = set_grad_enabled(true);
        let t = self.transform.resolve(&mut self.pad);
        let j_t = teacher_gradient(&self.teacher, &t, x, y)?;
        let crop = |j: &Tensor<T>| t.crop_for_discriminator(j);
        let opts = AdvOptions {
            form: if self.cfg.non_saturating {
                AdvForm::NonSaturating
            } else {
                AdvForm::Saturating
            },
            standardize: self.cfg.standardize_j,
            view: if t.crops() { Some(&crop) } else { None },
        };
        let obj = student_objective(&self.student, &self.disc, &x.with_grad(), y, &j_t, self.cfg.weights(), &opts)?;
        let l_adv = obj.l_adv.item()?.as_f64();
        if l_adv.abs() > self.cfg.divergence_limit {
            self.log.diagnostics.push(format!("step {step}: skipped, |L_adv| = {l_adv} over limit"));
            return Ok(());
        }
        let student_grads = param_grads(&obj.total, &self.student.trainable())?;
        let disc_due = (step + 1) % self.cfg.disc_update_period == 0;
        let disc_grads = if disc_due {
            Some(param_grads(&obj.l_adv, &self.disc.trainable())?)
        } else {
            None
        };
        self.student_opt.step(&mut self.student, &student_grads)?;
        if let Some(g) = disc_grads {
            self.disc_opt.ascend(&mut self.disc, &g)?;
        }
        self.log.push(StepRecord {
            step,
            l_xent: obj.xent.item()?.as_f64(),
            l_adv: Some(l_adv),
            l_diff: Some(obj.l_diff.item()?.as_f64()),
            disc_acc: Some(discriminator_accuracy(&obj.disc_logits.0, &obj.disc_logits.1)),
            cos_sim: Some(mean_cosine(&obj.j_s, &j_t)),
        });
        Ok(())
    }

    /// Mean `cos(J_s, J_t)` and mean `L_diff` over `data` (in batches of the
    /// configured size), for tracking gradient matching on held-out samples.
    pub fn matching_stats(&self, data: &Dataset<T>) -> Result<(f64, f64)> {
        let t = self.transform.resolve(&mut rng::stream(self.cfg.seed, "eval/pad-offset"));
        gradient_matching(&self.student, &self.teacher, &t, data, self.cfg.batch_size)
    }

    pub fn into_parts(self) -> (Model<T>, Model<T>, RunLog) {
        (self.student, self.disc, self.log)
    }
}

/// Mean per-sample `cos(J_s, J_t)` and `||J_s - J_t||^2` over `data`.
pub fn gradient_matching<T: Real>(
    student: &Model<T>,
    teacher: &Model<T>,
    transform: &InputTransform<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let (mut cos, mut diff) = (0.0, 0.0);
    let _mode = set_grad_enabled(true);
    for idx in data.batch_indices::<ChaCha8Rng>(batch_size, None) {
        let (x, y) = data.batch(&idx)?;
        let j_t = teacher_gradient(teacher, transform, &x, &y)?;
        let j_s = input_gradient_with(|x| student.logits(x), &x.with_grad(), &y, false)?;
        let n = idx.len() as f64;
        cos += mean_cosine(&j_s, &j_t) * n;
        diff += crate::losses::loss_diff(&j_s, &j_t)?.item()?.as_f64() * n;
    }
    let n = data.len().max(1) as f64;
    Ok((cos / n, diff / n))
}

/// Everything a full two-phase run produces.
#[derive(Debug, Clone)]
pub struct Experiment<T: Real> {
    pub student: Model<T>,
    pub disc: Model<T>,
    /// The finetuned (and frozen) teacher.
    pub teacher: Model<T>,
    pub transform: InputTransform<T>,
    pub finetune_log: RunLog,
    pub log: RunLog,
    /// Held-out `(cos, L_diff)` before and after the matching phase.
    pub matching_before: (f64, f64),
    pub matching_after: (f64, f64),
    /// Student row with `cos_sim` (held-out, after training) and mean
    /// alignment filled in.
    pub row: EvalRow,
}

/// Finetunes the teacher's logit layer (and any trainable adapter) on
/// `train`, runs `cfg.igam_epochs` of gradient matching and evaluates the
/// student on `test`. `on_epoch` sees the trainer after every epoch (for
/// checkpointing) and may record checkpoint references in its log.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment<T: Real>(
    mut teacher: Model<T>,
    student: Model<T>,
    disc: Model<T>,
    mut transform: InputTransform<T>,
    cfg: &TrainConfig<T>,
    eval: &EvalConfig<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    name: &str,
    on_epoch: &mut dyn FnMut(usize, &mut IgamTrainer<T>) -> Result<()>,
) -> Result<Experiment<T>> {
    cfg.validate()?;
    teacher.freeze_all_but_logits(train.num_classes(), rng::stream_seed(cfg.seed, rng::INIT_TEACHER))?;
    let finetune_log = finetune_teacher(&mut teacher, &mut transform, train, cfg)?;
    let mut trainer = IgamTrainer::new(student, teacher, disc, transform, cfg.clone())?;
    let matching_before = trainer.matching_stats(test)?;
    for epoch in 0..cfg.igam_epochs {
        trainer.epoch(train)?;
        on_epoch(epoch, &mut trainer)?;
    }
    let matching_after = trainer.matching_stats(test)?;
    let mut row = evaluate(name, &trainer.student, test, eval)?;
    row.cos_sim = Some(matching_after.0);
    row.alignment = Some(mean_alignment(&trainer.student, test, eval.batch_size)?);
    let IgamTrainer {
        student,
        disc,
        teacher,
        transform,
        log,
        ..
    } = trainer;
    Ok(Experiment {
        student,
        disc,
        teacher,
        transform,
        finetune_log,
        log,
        matching_before,
        matching_after,
        row,
    })
}
