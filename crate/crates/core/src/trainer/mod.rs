//! Training strategies, step-budget sweeps, evaluation and checkpoints.
//!
//! Three ways of training the compact student are compared:
//!
//! * [`Strategy::Supervised`]: hard-label loss on the augmented labeled set.
//! * [`Strategy::Distill`]: match the frozen teacher on the same augmented
//!   labeled patches.
//! * [`Strategy::DistillAux`]: match the teacher on fresh frames from the
//!   unlabeled stream, random crop only.
//!
//! Distillation never adds a hard-label term. Every run is single-threaded
//! and a pure function of its [`RunConfig`].

mod checkpoint;
mod model;
mod report;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use model::{DetForward, Model, Teacher};
pub use report::{metric, ReportRow, RunReport, CSV_HEADER};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{self, AugmentConfig, SceneSample, WorldConfig};
use crate::det_loss::{self, validate_levels, LevelSpec};
use crate::metrics::{self, AgreementCounter, ConfusionMatrix};
use crate::nn::{self, NetworkSpec, ParamSet, Role};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng::{self, FmRng, Rng};
use crate::seg_loss::{self, LabelMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Segmentation,
    Detection,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Detection => "detection",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Task> {
        match c {
            0 => Some(Task::Segmentation),
            1 => Some(Task::Detection),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "detection" | "det" => Ok(Task::Detection),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Supervised,
    Distill,
    DistillAux,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Supervised, Strategy::Distill, Strategy::DistillAux];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Supervised => "supervised",
            Strategy::Distill => "distill",
            Strategy::DistillAux => "distill-aux",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Strategy::Supervised
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Strategy> {
        Strategy::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Detection decoding settings used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thresh: 0.05,
            nms_iou: 0.6,
            max_dets: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub world: WorldConfig,
    pub teacher_spec: NetworkSpec,
    pub student_spec: NetworkSpec,
    /// Optimizer settings; `max_iter` is replaced by the step budget of
    /// each run.
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    /// Student step budget.
    pub steps: usize,
    /// Teacher step budget.
    pub teacher_steps: usize,
    pub seed: u64,
    /// Pyramid levels (detection only).
    pub levels: Vec<LevelSpec>,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

/// Default hidden widths of the segmentation teacher and student.
pub const SEG_TEACHER_HIDDEN: [usize; 3] = [24, 24, 24];
pub const SEG_STUDENT_HIDDEN: [usize; 2] = [16, 16];
pub const DET_TEACHER_HIDDEN: [usize; 3] = [24, 24, 24];
pub const DET_STUDENT_HIDDEN: [usize; 2] = [24, 24];

/// Desk-scale step budgets swept by default.
pub const DEFAULT_BUDGETS: [usize; 3] = [500, 1000, 2000];

impl RunConfig {
    pub fn segmentation() -> Self {
        let world = WorldConfig::default();
        let c = world.num_classes;
        RunConfig {
            task: Task::Segmentation,
            teacher_spec: NetworkSpec::conv_stack(Role::Teacher, 3, &SEG_TEACHER_HIDDEN, c, 1),
            student_spec: NetworkSpec::conv_stack(Role::Student, 3, &SEG_STUDENT_HIDDEN, c, 1),
            world,
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 8,
            steps: 1000,
            teacher_steps: 6000,
            seed: 0,
            levels: Vec::new(),
            eval: EvalConfig::default(),
            out_dir: None,
        }
    }

    pub fn detection() -> Self {
        let world = WorldConfig::default();
        let raw = det_loss::DetField::raw_channels(world.num_classes);
        RunConfig {
            task: Task::Detection,
            teacher_spec: NetworkSpec::conv_stack(Role::Teacher, 3, &DET_TEACHER_HIDDEN, raw, 0),
            student_spec: NetworkSpec::conv_stack(Role::Student, 3, &DET_STUDENT_HIDDEN, raw, 0),
            world,
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 32,
            steps: 1000,
            teacher_steps: 6000,
            seed: 0,
            levels: vec![
                LevelSpec::new(4, 0.0, 12.0),
                LevelSpec::new(8, 12.0, f64::INFINITY),
            ],
            eval: EvalConfig::default(),
            out_dir: None,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Segmentation => Self::segmentation(),
            Task::Detection => Self::detection(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_training()?;
        nn::validate_pair(&self.teacher_spec, &self.student_spec)?;
        if self.teacher_spec.role != Role::Teacher || self.student_spec.role != Role::Student {
            return Err(Error::InvalidArgument("network roles are swapped".into()));
        }
        Ok(())
    }

    /// Everything in [`validate`](Self::validate) except the teacher/student
    /// pairing, for runs on caller-supplied models.
    pub fn validate_training(&self) -> Result<()> {
        self.world.validate()?;
        self.augment.validate()?;
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let c = self.world.num_classes;
        let out = match self.task {
            Task::Segmentation => c,
            Task::Detection => det_loss::DetField::raw_channels(c),
        };
        if self.student_spec.in_channels() != 3 || self.student_spec.out_channels() != out {
            return Err(Error::InvalidArgument(format!(
                "{} networks must map 3 -> {out} channels",
                self.task
            )));
        }
        if self.task == Task::Detection {
            validate_levels(&self.levels)?;
            if self.student_spec.upsample_factor() != 1 {
                return Err(Error::InvalidArgument(
                    "detection networks cannot upsample".into(),
                ));
            }
        }
        Ok(())
    }

    fn sgd_for(&self, steps: usize) -> SgdConfig {
        SgdConfig {
            max_iter: steps.max(1),
            ..self.sgd
        }
    }

    fn check_teacher(&self, teacher: &Checkpoint) -> Result<Model> {
        if teacher.task != self.task {
            return Err(Error::InvalidArgument(format!(
                "teacher checkpoint is for {}, run is {}",
                teacher.task, self.task
            )));
        }
        let m = Model::new(teacher.spec.clone(), teacher.params.clone())?;
        m.check_task(self.task, self.world.num_classes)?;
        Ok(m)
    }
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Batch-mean loss at each step, before the update.
    pub losses: Vec<f64>,
    /// Gradient norm at each step.
    pub grad_norms: Vec<f64>,
    /// Unlabeled frame indices consumed, in order (distill-aux only).
    pub frames: Vec<u64>,
    /// Labeled indices consumed, in order.
    pub labeled: Vec<u64>,
}

/// Where a run's training patches come from.
enum Source<'a> {
    Labeled(&'a [SceneSample]),
    Unlabeled(data::UnlabeledStream),
}

/// Loss and parameter gradient of one augmented patch.
fn patch_loss(
    task: Task,
    cfg: &RunConfig,
    student: &Model,
    patch: &SceneSample,
    teacher: Option<&dyn Teacher>,
) -> Result<(f64, ParamSet)> {
    match task {
        Task::Segmentation => {
            let (logits, cache) = student.seg_logits(&patch.image)?;
            let (loss, grad) = match teacher {
                None => seg_loss::pixelwise_ce_loss(&logits, &patch.labels)?,
                Some(t) => seg_loss::pixelwise_kl_loss(&t.seg_targets(patch)?, &logits)?,
            };
            Ok((loss, student.seg_backward(&cache, &grad)?))
        }
        Task::Detection => {
            let c = cfg.world.num_classes;
            let fwd = student.det_forward(&patch.image, &cfg.levels, c)?;
            let l = match teacher {
                None => {
                    let targets =
                        det_loss::assign_targets(&patch.gt, &cfg.levels, patch.height(), patch.width());
                    det_loss::det_supervised_loss(&fwd.field, &targets)?
                }
                Some(t) => {
                    let tf = t.det_targets(patch, &cfg.levels, c)?;
                    det_loss::det_distill_loss(&tf, &fwd.field)?
                }
            };
            Ok((l.total, student.det_backward(&fwd, &l.grads)?))
        }
    }
}

fn labeled_set(world: &WorldConfig) -> Vec<SceneSample> {
    world
        .labeled_indices()
        .map(|i| data::generate_scene(world, i))
        .collect()
}

/// The SGD loop shared by every strategy.
///
/// Each step draws `batch_size` patches, averages loss and gradients, and
/// applies one update. With a teacher the loss is the distillation loss
/// against its outputs on the same patch; without one it is the hard-label
/// loss.
fn train_loop(
    cfg: &RunConfig,
    mut student: Model,
    source: &mut Source<'_>,
    augment: &AugmentConfig,
    teacher: Option<&dyn Teacher>,
    steps: usize,
    mut rng: FmRng,
) -> Result<(Model, TrainLog)> {
    let sgd = cfg.sgd_for(steps);
    let mut state = SgdState::new(&student.params);
    let mut log = TrainLog::default();
    let inv_b = 1.0 / cfg.batch_size as f64;
    for step in 0..steps {
        let mut grad = student.params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = match source {
                Source::Labeled(set) => {
                    let i = rng.random_range(0..set.len());
                    log.labeled.push(i as u64);
                    std::borrow::Cow::Borrowed(&set[i])
                }
                Source::Unlabeled(stream) => {
                    let (index, s) = stream.next_sample();
                    log.frames.push(index);
                    std::borrow::Cow::Owned(s)
                }
            };
            let patch = data::augment(&sample, augment, &mut rng)?;
            let (l, g) = patch_loss(cfg.task, cfg, &student, &patch, teacher)?;
            loss += l * inv_b;
            grad.add_scaled(&g, inv_b);
        }
        let gnorm = grad.norm();
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.losses.push(loss);
        log.grad_norms.push(gnorm);
        sgd_step(&mut student.params, &grad, &mut state, &sgd)?;
    }
    Ok((student, log))
}

fn checkpoint_of(cfg: &RunConfig, model: Model, strategy: Strategy, steps: usize) -> Checkpoint {
    Checkpoint {
        task: cfg.task,
        spec: model.spec,
        params: model.params,
        meta: TrainingMeta {
            strategy,
            steps: steps as u64,
            seed: cfg.seed,
        },
    }
}

fn persist(cfg: &RunConfig, name: &str, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = &cfg.out_dir {
        ckpt.save(&dir.join(name))?;
    }
    Ok(())
}

/// Trains the teacher with the hard-label loss on the augmented labeled
/// set for `cfg.teacher_steps` steps. Saved as `teacher.ckpt` when
/// `cfg.out_dir` is set.
pub fn train_teacher(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let init = nn::init_params(&cfg.teacher_spec, cfg.seed)?;
    let model = Model::new(cfg.teacher_spec.clone(), init)?;
    let set = labeled_set(&cfg.world);
    let rng = rng::seeded(cfg.seed, rng::stream::TEACHER_BATCHES);
    let (model, _) = train_loop(
        cfg,
        model,
        &mut Source::Labeled(&set),
        &cfg.augment,
        None,
        cfg.teacher_steps,
        rng,
    )?;
    let ckpt = checkpoint_of(cfg, model, Strategy::Supervised, cfg.teacher_steps);
    persist(cfg, "teacher.ckpt", &ckpt)?;
    Ok(ckpt)
}

/// Outcome of one strategy run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    /// Validation metrics (plus agreement with the teacher when given).
    pub report: RunReport,
    pub log: TrainLog,
}

/// Trains the student with `strategy` for `cfg.steps` steps and evaluates
/// it on the validation split.
pub fn run_strategy(strategy: Strategy, cfg: &RunConfig, teacher: Option<&Checkpoint>) -> Result<RunOutput> {
    cfg.validate()?;
    let teacher_model = match (strategy.needs_teacher(), teacher) {
        (true, None) => return Err(Error::MissingTeacher(strategy.name())),
        (_, Some(t)) => Some(cfg.check_teacher(t)?),
        (false, None) => None,
    };
    let init = nn::init_params(&cfg.student_spec, cfg.seed)?;
    let student = Model::new(cfg.student_spec.clone(), init)?;
    let distill_teacher = if strategy.needs_teacher() {
        teacher_model.as_ref().map(|m| m as &dyn Teacher)
    } else {
        None
    };
    let (student, log) = train_student(strategy, cfg, student, distill_teacher)?;
    let ckpt = checkpoint_of(cfg, student, strategy, cfg.steps);
    let mut report = evaluate_model(&ckpt, cfg, teacher_model.as_ref())?;
    if let Some(last) = log.losses.last() {
        report.push(strategy.name(), cfg.steps as u64, metric::TRAIN_LOSS, *last);
    }
    persist(cfg, &format!("{}-{}.ckpt", strategy.name(), cfg.steps), &ckpt)?;
    Ok(RunOutput {
        checkpoint: ckpt,
        report,
        log,
    })
}

/// The training half of [`run_strategy`] with caller-supplied initial
/// weights and teacher function. Distillation strategies require
/// `teacher`; for [`Strategy::Supervised`] it is ignored.
pub fn train_student(
    strategy: Strategy,
    cfg: &RunConfig,
    student: Model,
    teacher: Option<&dyn Teacher>,
) -> Result<(Model, TrainLog)> {
    cfg.validate_training()?;
    student.check_task(cfg.task, cfg.world.num_classes)?;
    let rng = rng::seeded(cfg.seed, rng::stream::STUDENT_BATCHES);
    match strategy {
        Strategy::Supervised => {
            let set = labeled_set(&cfg.world);
            train_loop(cfg, student, &mut Source::Labeled(&set), &cfg.augment, None, cfg.steps, rng)
        }
        Strategy::Distill => {
            let t = teacher.ok_or(Error::MissingTeacher(strategy.name()))?;
            let set = labeled_set(&cfg.world);
            train_loop(cfg, student, &mut Source::Labeled(&set), &cfg.augment, Some(t), cfg.steps, rng)
        }
        Strategy::DistillAux => {
            let t = teacher.ok_or(Error::MissingTeacher(strategy.name()))?;
            let mut src = Source::Unlabeled(data::unlabeled_stream(&cfg.world, 0));
            let aug = cfg.augment.crop_only();
            train_loop(cfg, student, &mut src, &aug, Some(t), cfg.steps, rng)
        }
    }
}

/// Validation metrics of a checkpoint. Segmentation reports mIoU, per-class
/// IoU and, with a reference, pixel agreement; detection reports the AP
/// suite.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, reference: Option<&Checkpoint>) -> Result<RunReport> {
    let reference = reference.map(|r| cfg.check_teacher(r)).transpose()?;
    evaluate_model(ckpt, cfg, reference.as_ref())
}

fn evaluate_model(ckpt: &Checkpoint, cfg: &RunConfig, reference: Option<&Model>) -> Result<RunReport> {
    if ckpt.task != cfg.task {
        return Err(Error::InvalidArgument(format!(
            "checkpoint is for {}, config is {}",
            ckpt.task, cfg.task
        )));
    }
    let model = Model::new(ckpt.spec.clone(), ckpt.params.clone())?;
    model.check_task(cfg.task, cfg.world.num_classes)?;
    if cfg.world.val_count == 0 {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let label = ckpt.label();
    let steps = ckpt.meta.steps;
    let mut report = RunReport::new(cfg.task);
    match cfg.task {
        Task::Segmentation => {
            let mut cm = ConfusionMatrix::new(cfg.world.num_classes);
            let mut agree = AgreementCounter::default();
            for i in cfg.world.val_indices() {
                let s = data::generate_scene(&cfg.world, i);
                let pred = LabelMap::from_argmax(&model.seg_logits(&s.image)?.0);
                metrics::accumulate_confusion(&pred, &s.labels, &mut cm)?;
                if let Some(r) = reference {
                    let rp = LabelMap::from_argmax(&r.seg_logits(&s.image)?.0);
                    agree.add(&pred, &rp)?;
                }
            }
            let (per_class, miou) = metrics::miou(&cm)?;
            report.push(&label, steps, metric::MIOU, miou);
            for (name, iou) in cfg.world.class_names().iter().zip(per_class) {
                if let Some(v) = iou {
                    report.push(&label, steps, &format!("{}{name}", metric::IOU_PREFIX), v);
                }
            }
            if let Some(a) = agree.value() {
                report.push(&label, steps, metric::AGREEMENT, a);
            }
        }
        Task::Detection => {
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for i in cfg.world.val_indices() {
                let s = data::generate_scene(&cfg.world, i);
                let field = model.det_field(&s.image, &cfg.levels, cfg.world.num_classes)?;
                dets.push(metrics::decode_detections(
                    &field,
                    &cfg.levels,
                    cfg.eval.score_thresh,
                    cfg.eval.nms_iou,
                    cfg.eval.max_dets,
                ));
                gts.push(s.gt);
            }
            let ap = metrics::coco_ap_suite(&dets, &gts)?;
            for (name, v) in ap.named() {
                if let Some(v) = v {
                    report.push(&label, steps, name, v);
                }
            }
        }
    }
    Ok(report)
}

/// Pixel agreement between two segmentation checkpoints on the validation
/// split.
pub fn agreement_between(a: &Checkpoint, b: &Checkpoint, cfg: &RunConfig) -> Result<f64> {
    if cfg.task != Task::Segmentation || a.task != cfg.task || b.task != cfg.task {
        return Err(Error::InvalidArgument(
            "agreement is defined for segmentation checkpoints".into(),
        ));
    }
    let ma = Model::new(a.spec.clone(), a.params.clone())?;
    let mb = Model::new(b.spec.clone(), b.params.clone())?;
    let mut agree = AgreementCounter::default();
    for i in cfg.world.val_indices() {
        let s = data::generate_scene(&cfg.world, i);
        let pa = LabelMap::from_argmax(&ma.seg_logits(&s.image)?.0);
        let pb = LabelMap::from_argmax(&mb.seg_logits(&s.image)?.0);
        agree.add(&pa, &pb)?;
    }
    agree
        .value()
        .ok_or_else(|| Error::InvalidArgument("validation split is empty".into()))
}

/// A finished sweep.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub teacher: Checkpoint,
    pub report: RunReport,
}

/// Trains the teacher once, then every strategy at every budget, and marks
/// the best budget per strategy on the validation split.
pub fn sweep(cfg: &RunConfig, budgets: &[usize]) -> Result<SweepOutput> {
    let teacher = train_teacher(cfg)?;
    sweep_with_teacher(cfg, budgets, teacher)
}

pub fn sweep_with_teacher(cfg: &RunConfig, budgets: &[usize], teacher: Checkpoint) -> Result<SweepOutput> {
    if budgets.is_empty() {
        return Err(Error::InvalidArgument("no step budgets to sweep".into()));
    }
    cfg.validate()?;
    let mut report = evaluate(&teacher, cfg, None)?;
    for strategy in Strategy::ALL {
        for &steps in budgets {
            let run_cfg = RunConfig {
                steps,
                ..cfg.clone()
            };
            let out = run_strategy(strategy, &run_cfg, Some(&teacher))?;
            report.extend(out.report);
        }
    }
    report.mark_best();
    if let Some(dir) = &cfg.out_dir {
        crate::fsutil::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
        crate::fsutil::write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    }
    Ok(SweepOutput { teacher, report })
}
