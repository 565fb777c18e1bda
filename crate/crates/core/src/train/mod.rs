//! Losses, exact reverse-mode gradients, Adam with linear decay, and the
//! teacher and student training loops.

mod backward;
mod loss;
mod optim;
mod trainer;

pub use backward::{backward, teacher_logits, GradientSet, Objective, DEFAULT_BALANCE_COEF};
pub use loss::{
    cross_entropy, hard_kd_loss, soft_kd_loss, soft_kd_loss_directed, total_loss, DistillMode,
    KlDirection, LossBreakdown,
};
pub use optim::{
    adam_update, optimizer_step, AdamState, LinearDecay, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use trainer::{
    distill_from_logits, distill_student, train_supervised, train_teacher, DistillConfig, LogRow,
    TrainConfig, TrainOutcome, TrainingLog, LOG_HEADER,
};
