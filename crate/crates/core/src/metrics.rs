//! Scores and analyses: MoE benefits, accuracy, per-token FLOPs, and the
//! signal/noise split of an SVD-gathered layer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gather::{average_bias, gather_svdkg};
use crate::model::{rank_experts, ClassifierModel, FeedForward, Ffn, MoeLayer};
use crate::numerics::{argmax, check_lambda, norm2, svd, truncate_svd, Matrix};
use crate::workbench::Dataset;

/// Three scores on a common scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub score_student: f64,
    pub score_dense: f64,
    pub score_moe: f64,
}

/// `(student − dense) / (moe − dense)`.
pub fn moe_benefits(s: &Scoreboard) -> Result<f64> {
    let denom = s.score_moe - s.score_dense;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "MoE and dense scores coincide ({})",
            s.score_dense
        )));
    }
    Ok((s.score_student - s.score_dense) / denom)
}

/// Fraction of examples whose argmax logit (noise off) is the label.
pub fn accuracy(model: &ClassifierModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric(
            "accuracy of an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    for ex in &data.examples {
        if argmax(&model.logits(&ex.tokens)?) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A feed-forward layer whose per-token cost is counted.
#[derive(Clone, Copy, Debug)]
pub enum FfnLayerRef<'a> {
    Dense(&'a Ffn),
    Moe(&'a MoeLayer),
}

impl<'a> From<&'a FeedForward> for FfnLayerRef<'a> {
    fn from(f: &'a FeedForward) -> Self {
        match f {
            FeedForward::Dense(d) => FfnLayerRef::Dense(d),
            FeedForward::Moe(m) => FfnLayerRef::Moe(m),
        }
    }
}

/// Multiply-accumulates count two FLOPs; activations, norms, biases and the
/// softmax are not counted.
pub fn dense_flops(d_model: usize, d_ff: usize) -> u64 {
    4 * d_model as u64 * d_ff as u64
}

pub fn moe_flops(d_model: usize, d_ff: usize, experts: usize, top_k: usize) -> u64 {
    top_k as u64 * dense_flops(d_model, d_ff) + 2 * d_model as u64 * experts as u64
}

pub fn flops_per_token(layer: FfnLayerRef<'_>) -> u64 {
    match layer {
        FfnLayerRef::Dense(f) => dense_flops(f.d_model(), f.d_ff()),
        FfnLayerRef::Moe(m) => moe_flops(m.d_model(), m.d_ff(), m.num_experts(), m.router.top_k),
    }
}

/// Per-token FLOPs of every block's feed-forward stage, summed.
pub fn model_ffn_flops(model: &ClassifierModel) -> u64 {
    (0..model.blocks.len())
        .map(|b| flops_per_token(model.stage_for_block(b).into()))
        .sum()
}

/// Which part of the expert the noise analysis covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// The first linear layer `W1ᵀx + b1`.
    #[default]
    FirstLayer,
    /// The whole expert `W2ᵀσ(W1ᵀx + b1) + b2`.
    FullFfn,
}

/// Result of splitting a gathered output into the selected expert's own
/// truncated response and everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDecomposition {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
    /// The gathered layer's output; `signal + noise` up to one rounding.
    pub gathered: Vec<f64>,
    pub selected_expert: usize,
    pub selected_gate: f64,
}

/// Precomputed truncations of one expert bank at one `λ`.
pub struct NoiseProbe<'a> {
    moe: &'a MoeLayer,
    target: NoiseTarget,
    /// Per-expert truncated `(W1, W2)`.
    truncated: Vec<(Matrix, Matrix)>,
    gathered: Ffn,
}

impl<'a> NoiseProbe<'a> {
    pub fn new(moe: &'a MoeLayer, lambda: f64, target: NoiseTarget) -> Result<Self> {
        check_lambda(lambda)?;
        let truncated = moe
            .experts
            .iter()
            .map(|e| {
                let t1 = truncate_svd(&svd(&e.w1)?, lambda)?;
                let t2 = truncate_svd(&svd(&e.w2)?, lambda)?;
                Ok((
                    t1.factors.leading(t1.rank).reconstruct(),
                    t2.factors.leading(t2.rank).reconstruct(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (w1, w2, _, _) = gather_svdkg(&moe.experts, lambda)?;
        let (b1, b2) = average_bias(&moe.experts)?;
        Ok(NoiseProbe {
            moe,
            target,
            truncated,
            gathered: Ffn {
                w1,
                b1,
                w2,
                b2,
                activation: moe.experts[0].activation,
            },
        })
    }

    fn apply(
        &self,
        w1: &Matrix,
        b1: &[f64],
        w2: &Matrix,
        b2: &[f64],
        x: &[f64],
    ) -> Result<Vec<f64>> {
        let mut pre = w1.tr_vec(x)?;
        pre.iter_mut().zip(b1).for_each(|(p, b)| *p += b);
        match self.target {
            NoiseTarget::FirstLayer => Ok(pre),
            NoiseTarget::FullFfn => {
                let act: Vec<f64> = pre
                    .iter()
                    .map(|&u| self.gathered.activation.apply(u))
                    .collect();
                let mut out = w2.tr_vec(&act)?;
                out.iter_mut().zip(b2).for_each(|(o, b)| *o += b);
                Ok(out)
            }
        }
    }

    pub fn decompose(&self, x: &[f64]) -> Result<NoiseDecomposition> {
        let probs = self.moe.router.probs_with_noise(x, None)?;
        let i = rank_experts(&probs, 1)[0];
        let own = &self.moe.experts[i];
        let (t1, t2) = &self.truncated[i];
        let signal = self.apply(t1, &own.b1, t2, &own.b2, x)?;
        let g = &self.gathered;
        let gathered = self.apply(&g.w1, &g.b1, &g.w2, &g.b2, x)?;
        let noise = gathered.iter().zip(&signal).map(|(g, s)| g - s).collect();
        Ok(NoiseDecomposition {
            signal,
            noise,
            gathered,
            selected_expert: i,
            selected_gate: probs[i],
        })
    }
}

/// Signal/noise split for one token at one `λ`.
pub fn noise_decompose(
    moe: &MoeLayer,
    lambda: f64,
    x: &[f64],
    target: NoiseTarget,
) -> Result<NoiseDecomposition> {
    NoiseProbe::new(moe, lambda, target)?.decompose(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScanRow {
    pub lambda: f64,
    pub mean_signal_norm: f64,
    pub mean_noise_norm: f64,
    /// `mean_noise_norm / mean_signal_norm`.
    pub ratio: f64,
    pub mean_selected_gate: f64,
}

pub const MIN_SCAN_TOKENS: usize = 100;
pub const NOISE_SCAN_HEADER: &str =
    "lambda,mean_signal_norm,mean_noise_norm,ratio,mean_selected_gate";

/// Mean signal and noise norms over `tokens` for every `λ`, sorted by `λ`.
pub fn noise_scan(
    moe: &MoeLayer,
    lambdas: &[f64],
    tokens: &[Vec<f64>],
    target: NoiseTarget,
) -> Result<Vec<NoiseScanRow>> {
    if tokens.len() < MIN_SCAN_TOKENS {
        return Err(Error::Argument(format!(
            "noise scan needs at least {MIN_SCAN_TOKENS} tokens, got {}",
            tokens.len()
        )));
    }
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    let n = tokens.len() as f64;
    grid.into_iter()
        .map(|lambda| {
            let probe = NoiseProbe::new(moe, lambda, target)?;
            let (mut s, mut e, mut g) = (0.0, 0.0, 0.0);
            for x in tokens {
                let d = probe.decompose(x)?;
                s += norm2(&d.signal);
                e += norm2(&d.noise);
                g += d.selected_gate;
            }
            let (s, e) = (s / n, e / n);
            Ok(NoiseScanRow {
                lambda,
                mean_signal_norm: s,
                mean_noise_norm: e,
                ratio: if s > 0.0 { e / s } else { f64::INFINITY },
                mean_selected_gate: g / n,
            })
        })
        .collect()
}

pub fn noise_scan_csv(rows: &[NoiseScanRow]) -> String {
    let mut out = String::from(NOISE_SCAN_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.lambda, r.mean_signal_norm, r.mean_noise_norm, r.ratio, r.mean_selected_gate
        );
    }
    out
}

/// Least-squares slope and coefficient of determination of mean noise
/// against `λ`. Reported, never asserted.
pub fn noise_linearity(rows: &[NoiseScanRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.lambda).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.mean_noise_norm).sum::<f64>() / n;
    let sxy: f64 = rows
        .iter()
        .map(|r| (r.lambda - mx) * (r.mean_noise_norm - my))
        .sum();
    let sxx: f64 = rows.iter().map(|r| (r.lambda - mx).powi(2)).sum();
    let syy: f64 = rows.iter().map(|r| (r.mean_noise_norm - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    (slope, r2)
}
