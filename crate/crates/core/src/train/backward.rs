use crate::error::{Error, Result};
use crate::model::{dispatch_fractions, ClassifierModel, ForwardOptions, RoutingOutcome};
use crate::numerics::{norm2, Matrix};
use crate::train::loss::{
    cross_entropy, cross_entropy_grad, hard_kd_loss, soft_kd_grad, soft_kd_loss_directed,
    DistillMode, KlDirection, LossBreakdown,
};
use crate::workbench::Example;

/// Balance-loss coefficient used when none is configured.
pub const DEFAULT_BALANCE_COEF: f64 = 0.01;

/// What a training step optimises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Cross-entropy plus `balance_coef · L_balance` on MoE blocks.
    Supervised { balance_coef: f64 },
    /// `α·CE + (1 − α)·KD` against frozen teacher logits.
    Distill {
        alpha: f64,
        temperature: f64,
        mode: DistillMode,
        direction: KlDirection,
    },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Supervised { balance_coef } => {
                if !(balance_coef >= 0.0 && balance_coef.is_finite()) {
                    return Err(Error::Config(format!("balance coefficient {balance_coef}")));
                }
            }
            Objective::Distill {
                alpha, temperature, ..
            } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!(
                        "temperature {temperature} must be > 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One gradient tensor per trainable tensor of the model, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl GradientSet {
    fn from_accumulator(acc: &ClassifierModel) -> Self {
        GradientSet {
            entries: acc
                .trainable()
                .into_iter()
                .map(|(name, t)| (name, t.to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Global L2 norm over every entry.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, g)| norm2(g).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// Mean loss and its exact gradient over `batch`.
///
/// `teacher_logits[i]` pairs with `batch[i]` and is required by
/// [`Objective::Distill`] unless the mode is `None`. `noise[i]` is the
/// router noise for `batch[i]`; top-K selection is treated as constant.
pub fn backward(
    model: &ClassifierModel,
    batch: &[&Example],
    objective: &Objective,
    teacher_logits: Option<&[&[f64]]>,
    noise: Option<&[Vec<Matrix>]>,
) -> Result<(LossBreakdown, GradientSet)> {
    objective.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let needs_teacher = matches!(
        objective,
        Objective::Distill { mode, .. } if *mode != DistillMode::None
    );
    if needs_teacher && teacher_logits.map(|t| t.len()) != Some(batch.len()) {
        return Err(Error::Argument(
            "distillation needs one teacher logit vector per example".into(),
        ));
    }
    if let Some(n) = noise {
        if n.len() != batch.len() {
            return Err(Error::Argument(
                "noise count differs from batch size".into(),
            ));
        }
    }

    let passes = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let opts = ForwardOptions {
                noise: noise.map(|n| n[i].as_slice()),
                forced_expert: None,
            };
            model.forward(&ex.tokens, opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut loss = LossBreakdown::default();

    // Load balancing needs the batch-level dispatch fractions first.
    let (balance_coef, prob_grads) = match *objective {
        Objective::Supervised { balance_coef } if model.has_moe() => {
            let blocks = passes[0].routing.len();
            let mut grads = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let per_block: Vec<RoutingOutcome> =
                    passes.iter().map(|p| p.routing[b].clone()).collect();
                loss.balance += crate::model::balance_loss(&per_block)? / blocks as f64;
                let e = per_block[0].num_experts as f64;
                let tokens: usize = per_block.iter().map(|o| o.tokens.len()).sum();
                let scale = balance_coef * e / tokens as f64 / blocks as f64;
                grads.push(
                    dispatch_fractions(&per_block)
                        .into_iter()
                        .map(|m| scale * m)
                        .collect::<Vec<f64>>(),
                );
            }
            (balance_coef, Some(grads))
        }
        _ => (0.0, None),
    };

    let mut acc = ClassifierModel::zeros(&model.arch())?;
    for (i, (ex, pass)) in batch.iter().zip(&passes).enumerate() {
        let z = &pass.logits;
        if ex.label >= z.len() {
            return Err(Error::Argument(format!(
                "label {} for {} classes",
                ex.label,
                z.len()
            )));
        }
        let main = cross_entropy(z, ex.label);
        let mut dz = cross_entropy_grad(z, ex.label);
        loss.main += main / n;
        match *objective {
            Objective::Supervised { .. } => {}
            Objective::Distill {
                mode: DistillMode::None,
                ..
            } => {}
            Objective::Distill {
                alpha,
                temperature,
                mode,
                direction,
            } => {
                let zt = teacher_logits.expect("checked above")[i];
                let (distill, dd) = match mode {
                    DistillMode::Soft => (
                        soft_kd_loss_directed(z, zt, temperature, direction)?,
                        soft_kd_grad(z, zt, temperature, direction),
                    ),
                    DistillMode::Hard => {
                        let target = crate::numerics::argmax(zt);
                        (hard_kd_loss(z, zt)?, cross_entropy_grad(z, target))
                    }
                    DistillMode::None => unreachable!(),
                };
                loss.distill += distill / n;
                for (g, d) in dz.iter_mut().zip(&dd) {
                    *g = alpha * *g + (1.0 - alpha) * d;
                }
            }
        }
        dz.iter_mut().for_each(|g| *g /= n);
        model.backward(
            &ex.tokens,
            &pass.cache,
            &dz,
            prob_grads.as_deref(),
            &mut acc,
        )?;
    }

    loss.total = match *objective {
        Objective::Supervised { .. } => loss.main + balance_coef * loss.balance,
        Objective::Distill {
            mode: DistillMode::None,
            ..
        } => loss.main,
        Objective::Distill { alpha, .. } => alpha * loss.main + (1.0 - alpha) * loss.distill,
    };
    let grads = GradientSet::from_accumulator(&acc);
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((loss, grads))
}

/// Logits of a frozen model with routing noise off.
pub fn teacher_logits(teacher: &ClassifierModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| teacher.logits(&ex.tokens))
        .collect()
}
