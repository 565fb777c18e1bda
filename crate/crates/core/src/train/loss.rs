use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax, softmax};

/// Which distillation term accompanies the supervised loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// Temperature-softened KL against the teacher's distribution.
    #[default]
    Soft,
    /// Cross-entropy against the teacher's argmax.
    Hard,
    /// Plain supervised training.
    None,
}

/// Argument order of the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`
    #[default]
    TeacherToStudent,
    /// `KL(student ‖ teacher)`
    StudentToTeacher,
}

/// Per-step loss values. `total` is what gets differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub distill: f64,
    pub balance: f64,
    pub total: f64,
}

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn check_lengths(z_s: &[f64], z_t: &[f64]) -> Result<()> {
    if z_s.len() != z_t.len() {
        return Err(Error::shape(
            "distillation",
            format!("student {} logits, teacher {}", z_s.len(), z_t.len()),
        ));
    }
    Ok(())
}

/// Cross-entropy of `softmax(z)` against class `label`.
pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    -log_softmax(z)[label]
}

pub(crate) fn cross_entropy_grad(z: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(z);
    g[label] -= 1.0;
    g
}

fn scaled(z: &[f64], t: f64) -> Vec<f64> {
    z.iter().map(|v| v / t).collect()
}

fn kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log
        .iter()
        .zip(q_log)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// `T² · KL(softmax(z_t/T) ‖ softmax(z_s/T))`.
pub fn soft_kd_loss(z_s: &[f64], z_t: &[f64], temperature: f64) -> Result<f64> {
    soft_kd_loss_directed(z_s, z_t, temperature, KlDirection::TeacherToStudent)
}

pub fn soft_kd_loss_directed(
    z_s: &[f64],
    z_t: &[f64],
    temperature: f64,
    direction: KlDirection,
) -> Result<f64> {
    check_lengths(z_s, z_t)?;
    check_finite(z_s, "student logits")?;
    check_finite(z_t, "teacher logits")?;
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let ls = log_softmax(&scaled(z_s, temperature));
    let lt = log_softmax(&scaled(z_t, temperature));
    let value = match direction {
        KlDirection::TeacherToStudent => kl(&lt, &ls),
        KlDirection::StudentToTeacher => kl(&ls, &lt),
    };
    // clamp tiny negative round-off
    Ok((temperature * temperature * value).max(0.0))
}

pub(crate) fn soft_kd_grad(z_s: &[f64], z_t: &[f64], t: f64, direction: KlDirection) -> Vec<f64> {
    let ls = log_softmax(&scaled(z_s, t));
    let lt = log_softmax(&scaled(z_t, t));
    match direction {
        // d/dz_s of T²·Σ p_t (log p_t − log p_s) = T·(p_s − p_t)
        KlDirection::TeacherToStudent => ls
            .iter()
            .zip(&lt)
            .map(|(a, b)| t * (a.exp() - b.exp()))
            .collect(),
        // d/du_k Σ p_s (log p_s − log p_t) = p_s,k (log p_s,k − log p_t,k − KL)
        KlDirection::StudentToTeacher => {
            let k = kl(&ls, &lt);
            ls.iter()
                .zip(&lt)
                .map(|(a, b)| t * a.exp() * (a - b - k))
                .collect()
        }
    }
}

/// Cross-entropy of `softmax(z_s)` against the teacher's argmax class.
pub fn hard_kd_loss(z_s: &[f64], z_t: &[f64]) -> Result<f64> {
    check_lengths(z_s, z_t)?;
    Ok(cross_entropy(z_s, argmax(z_t)))
}

/// `α·main + (1 − α)·distill`.
pub fn total_loss(main: f64, distill: f64, alpha: f64) -> f64 {
    alpha * main + (1.0 - alpha) * distill
}
