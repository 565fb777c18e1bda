use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::{ClassifierModel, ModelArch};
use crate::numerics::{Matrix, Rng};
use crate::train::backward::{backward, teacher_logits, Objective, DEFAULT_BALANCE_COEF};
use crate::train::loss::{DistillMode, KlDirection, LossBreakdown};
use crate::train::optim::{optimizer_step, AdamState, LinearDecay};
use crate::workbench::{Dataset, Example};

/// Supervised training of a teacher or a from-scratch baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the load-balance loss on MoE blocks.
    pub balance_coef: f64,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 32,
            learning_rate: 1e-2,
            balance_coef: DEFAULT_BALANCE_COEF,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.steps, self.batch_size, self.learning_rate)?;
        Objective::Supervised {
            balance_coef: self.balance_coef,
        }
        .validate()
    }
}

/// Student distillation against a frozen teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub mode: DistillMode,
    pub kl_direction: KlDirection,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.25,
            temperature: 1.0,
            mode: DistillMode::Soft,
            kl_direction: KlDirection::TeacherToStudent,
            steps: 600,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.steps, self.batch_size, self.learning_rate)?;
        self.objective().validate()
    }

    pub fn objective(&self) -> Objective {
        Objective::Distill {
            alpha: self.alpha,
            temperature: self.temperature,
            mode: self.mode,
            direction: self.kl_direction,
        }
    }
}

fn check_schedule(steps: usize, batch: usize, lr: f64) -> Result<()> {
    if steps == 0 || batch == 0 {
        return Err(Error::Config(
            "steps and batch_size must be positive".into(),
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be > 0")));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub main: f64,
    pub distill: f64,
    pub balance: f64,
    pub total: f64,
    pub lr: f64,
    pub heldout_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,main,distill,balance,total,lr,heldout_acc";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let acc = r.heldout_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.main, r.distill, r.balance, r.total, r.lr, acc
            );
        }
        out
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// Last recorded held-out accuracy.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.heldout_acc)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: TrainingLog,
}

struct Schedule {
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    eval_every: usize,
}

/// Epoch-wise shuffled mini-batches.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Batcher {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn fit(
    model: &mut ClassifierModel,
    data: &Dataset,
    heldout: Option<&Dataset>,
    objective: Objective,
    targets: Option<&[Vec<f64>]>,
    schedule: Schedule,
    rng: &mut Rng,
) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let decay = LinearDecay {
        initial: schedule.learning_rate,
        total_steps: schedule.steps,
    };
    let mut state = AdamState::new(model);
    let mut batcher = Batcher::new(data.len());
    let mut log = TrainingLog::default();
    for step in 0..schedule.steps {
        let idx = batcher.next(schedule.batch_size, rng);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.examples[i]).collect();
        let noise: Option<Vec<Vec<Matrix>>> = idx.iter().map(|_| model.draw_noise(rng)).collect();
        let tl: Option<Vec<&[f64]>> =
            targets.map(|t| idx.iter().map(|&i| t[i].as_slice()).collect());
        let (loss, grads) = backward(model, &batch, &objective, tl.as_deref(), noise.as_deref())
            .map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { step, detail },
                other => other,
            })?;
        let lr = optimizer_step(model, &grads, &mut state, &decay)?;
        let last = step + 1 == schedule.steps;
        let due = schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0;
        let heldout_acc = match heldout {
            Some(h) if last || due => Some(accuracy(model, h)?),
            _ => None,
        };
        log.rows.push(row(step, &loss, lr, heldout_acc));
    }
    Ok(log)
}

fn row(step: usize, loss: &LossBreakdown, lr: f64, heldout_acc: Option<f64>) -> LogRow {
    LogRow {
        step,
        main: loss.main,
        distill: loss.distill,
        balance: loss.balance,
        total: loss.total,
        lr,
        heldout_acc,
    }
}

/// Train `model` in place on cross-entropy (plus the balance term when it
/// has MoE stages), drawing router noise during training.
pub fn train_supervised(
    mut model: ClassifierModel,
    cfg: &TrainConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(1);
    let objective = Objective::Supervised {
        balance_coef: cfg.balance_coef,
    };
    let log = fit(
        &mut model,
        data,
        heldout,
        objective,
        None,
        Schedule {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            eval_every: cfg.eval_every,
        },
        &mut rng,
    )?;
    Ok(TrainOutcome { model, log })
}

/// Randomly initialise an MoE classifier from `cfg.seed` and train it.
pub fn train_teacher(
    arch: &ModelArch,
    cfg: &TrainConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<TrainOutcome> {
    let model = ClassifierModel::random(arch, &mut Rng::new(cfg.seed).fork(0))?;
    if !model.has_moe() {
        return Err(Error::Config(
            "teacher architecture has no MoE stage".into(),
        ));
    }
    train_supervised(model, cfg, data, heldout)
}

/// Distil a frozen teacher into `student`. Teacher logits are computed once
/// with routing noise off.
pub fn distill_student(
    student: ClassifierModel,
    teacher: &ClassifierModel,
    cfg: &DistillConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (s, t) = (student.arch(), teacher.arch());
    if (s.input_dim, s.seq_len, s.num_classes) != (t.input_dim, t.seq_len, t.num_classes) {
        return Err(Error::structural(
            "interface",
            "teacher and student disagree on input or class count",
        ));
    }
    let targets = match cfg.mode {
        DistillMode::None => None,
        _ => Some(teacher_logits(teacher, &data.examples)?),
    };
    distill_from_logits(student, targets.as_deref(), cfg, data, heldout)
}

/// [`distill_student`] with the teacher's logits on `data` precomputed,
/// one row per example. `None` is only valid with [`DistillMode::None`].
pub fn distill_from_logits(
    mut student: ClassifierModel,
    targets: Option<&[Vec<f64>]>,
    cfg: &DistillConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match targets {
        Some(t) if t.len() != data.len() => {
            return Err(Error::Argument(format!(
                "{} teacher rows for {} examples",
                t.len(),
                data.len()
            )));
        }
        Some(t) if t.iter().any(|r| r.len() != student.num_classes()) => {
            return Err(Error::structural(
                "interface",
                "teacher logits have the wrong width",
            ));
        }
        None if cfg.mode != DistillMode::None => {
            return Err(Error::Argument("distillation needs teacher logits".into()));
        }
        _ => {}
    }
    let mut rng = Rng::new(cfg.seed).fork(2);
    let log = fit(
        &mut student,
        data,
        heldout,
        cfg.objective(),
        targets,
        Schedule {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            eval_every: cfg.eval_every,
        },
        &mut rng,
    )?;
    Ok(TrainOutcome {
        model: student,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, FfnKind};

    fn tiny_task(seed: u64, n: usize) -> Dataset {
        // label is the sign of the first feature summed over tokens
        let mut rng = Rng::new(seed);
        let examples = (0..n)
            .map(|_| {
                let tokens = Matrix::from_fn(3, 2, |_, _| rng.normal(1.0));
                let label = usize::from(tokens.column(0).iter().sum::<f64>() > 0.0);
                Example { tokens, label }
            })
            .collect();
        Dataset {
            examples,
            num_classes: 2,
        }
    }

    fn arch(ffn: FfnKind) -> ModelArch {
        ModelArch {
            input_dim: 2,
            d_model: 8,
            d_ff: 8,
            seq_len: 3,
            num_classes: 2,
            blocks: 1,
            parameter_sharing: true,
            activation: Activation::Gelu,
            ffn,
        }
    }

    fn moe() -> FfnKind {
        FfnKind::Moe {
            experts: 2,
            top_k: 1,
            router_noise: true,
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 40,
            batch_size: 8,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let data = tiny_task(0, 200);
        let test = tiny_task(1, 200);
        let a = train_teacher(&arch(moe()), &quick(), &data, Some(&test)).unwrap();
        let b = train_teacher(&arch(moe()), &quick(), &data, Some(&test)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let acc = a.log.final_accuracy().unwrap();
        assert!(acc > 0.8, "{acc}");
        let first = &a.log.rows[0];
        assert!(first.balance > 0.0);
        assert_eq!(a.log.last().unwrap().lr, 0.0);
    }

    #[test]
    fn distillation_leaves_teacher_untouched() {
        let data = tiny_task(2, 120);
        let teacher = train_teacher(&arch(moe()), &quick(), &data, None)
            .unwrap()
            .model;
        let before = teacher.clone();
        let student = ClassifierModel::random(&arch(FfnKind::Dense), &mut Rng::new(7)).unwrap();
        let cfg = DistillConfig {
            steps: 20,
            batch_size: 8,
            ..Default::default()
        };
        let s1 = distill_student(student.clone(), &teacher, &cfg, &data, None).unwrap();
        let s2 = distill_student(student, &teacher, &cfg, &data, None).unwrap();
        assert_eq!(teacher, before);
        assert_eq!(s1.model, s2.model);
        assert!(s1.log.rows.iter().all(|r| r.distill >= 0.0));
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let log = TrainingLog {
            rows: vec![
                row(0, &LossBreakdown::default(), 0.1, Some(0.5)),
                row(1, &LossBreakdown::default(), 0.0, None),
            ],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines[1], "0,0,0,0,0,0.1,0.5");
        assert_eq!(lines[2], "1,0,0,0,0,0,");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = tiny_task(0, 10);
        let bad = DistillConfig {
            alpha: -0.1,
            ..Default::default()
        };
        let m = ClassifierModel::random(&arch(FfnKind::Dense), &mut Rng::new(0)).unwrap();
        assert!(distill_student(m.clone(), &m, &bad, &data, None).is_err());
        let dense_teacher = train_teacher(&arch(FfnKind::Dense), &quick(), &data, None);
        assert!(dense_teacher.is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let data = tiny_task(0, 10);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            steps: 5,
            batch_size: 4,
            ..Default::default()
        };
        let m = ClassifierModel::random(&arch(FfnKind::Dense), &mut Rng::new(0)).unwrap();
        match train_supervised(m, &cfg, &data, None) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
