//! Knowledge gathering: collapse every MoE stage of a trained teacher into a
//! single dense feed-forward stage of the same width.
//!
//! Four merges are offered for the expert weight matrices:
//!
//! * `Sum` / `Avg`: elementwise sum or mean over experts.
//! * `TopKG`: each expert contributes its `d_ff / E` hidden units with the
//!   largest paired score `‖W1[:, j]‖ + ‖W2[j, :]‖`.
//! * `SvdKG`: each expert matrix is truncated to the smallest rank whose
//!   singular values cover a fraction `λ` of its singular mass; the
//!   truncated factors are concatenated blockwise and multiplied back out.
//!
//! Embeddings, positions, mixers, norms and the head are copied unchanged.
//! Routers are never read.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierModel, FeedForward, Ffn, FfnExpert, MoeLayer};
use crate::numerics::{
    check_lambda, column_norms, relative_frobenius, row_norms, svd, top_k_indices, truncate_svd,
    Matrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatherMethod {
    Sum,
    Avg,
    #[serde(rename = "topkg")]
    TopKg,
    #[serde(rename = "svdkg")]
    SvdKg,
}

impl GatherMethod {
    pub const ALL: [GatherMethod; 4] = [
        GatherMethod::Sum,
        GatherMethod::Avg,
        GatherMethod::TopKg,
        GatherMethod::SvdKg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatherMethod::Sum => "sum",
            GatherMethod::Avg => "avg",
            GatherMethod::TopKg => "topkg",
            GatherMethod::SvdKg => "svdkg",
        }
    }
}

impl std::str::FromStr for GatherMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GatherMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown gather method {s:?}")))
    }
}

/// How the student's biases are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasPolicy {
    /// Mean of every expert's `b1` and `b2`.
    #[default]
    Average,
    /// `b1` entries follow the hidden units chosen by Top-KG; `b2` averaged.
    Matched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatherConfig {
    pub method: GatherMethod,
    /// Retained singular-mass fraction; SVD-KG only.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub bias_policy: BiasPolicy,
    /// Let Top-KG hand leftover units to the first experts when `E ∤ d_ff`.
    #[serde(default)]
    pub allow_remainder: bool,
    #[serde(default)]
    pub seed: u64,
}

impl GatherConfig {
    pub fn new(method: GatherMethod) -> Self {
        GatherConfig {
            method,
            lambda: None,
            bias_policy: BiasPolicy::Average,
            allow_remainder: false,
            seed: 0,
        }
    }

    pub fn svdkg(lambda: f64) -> Self {
        GatherConfig {
            lambda: Some(lambda),
            ..GatherConfig::new(GatherMethod::SvdKg)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method, self.lambda) {
            (GatherMethod::SvdKg, Some(l)) => check_lambda(l)?,
            (GatherMethod::SvdKg, None) => {
                return Err(Error::Config("svdkg needs lambda".into()));
            }
            (m, Some(_)) => {
                return Err(Error::Config(format!(
                    "lambda is only used by svdkg, not {}",
                    m.name()
                )));
            }
            _ => {}
        }
        if self.bias_policy == BiasPolicy::Matched && self.method != GatherMethod::TopKg {
            return Err(Error::Config("matched bias policy requires topkg".into()));
        }
        Ok(())
    }
}

/// Ranks kept for one weight role across the expert bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    /// `K^i` per expert.
    pub ranks: Vec<usize>,
    /// `Σ K^i`.
    pub k_g: usize,
    /// Singular values per expert, descending.
    pub spectra: Vec<Vec<f64>>,
    /// Experts whose spectrum was entirely zero.
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub stage: usize,
    pub method: GatherMethod,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w1_ranks: Option<RankRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w2_ranks: Option<RankRecord>,
    /// Selected hidden units per expert, ascending (Top-KG).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_units: Option<Vec<Vec<usize>>>,
    /// Per expert, `‖C − W‖_F / ‖W‖_F` where `C` is the part of expert `W`
    /// that the merge carries into the student.
    pub w1_residuals: Vec<f64>,
    pub w2_residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatherReport {
    pub method: GatherMethod,
    pub lambda: Option<f64>,
    pub bias_policy: BiasPolicy,
    pub layers: Vec<LayerReport>,
}

fn check_bank(experts: &[FfnExpert]) -> Result<()> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Argument("expert bank is empty".into()))?;
    for (i, e) in experts.iter().enumerate() {
        if e.w1.shape() != first.w1.shape() || e.w2.shape() != first.w2.shape() {
            return Err(Error::structural(
                format!("experts.{i}"),
                "shape differs from expert 0",
            ));
        }
    }
    Ok(())
}

fn mean_vec(parts: impl Iterator<Item = Vec<f64>>, n: usize) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for p in parts {
        if acc.is_empty() {
            acc = vec![0.0; p.len()];
        }
        acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Elementwise mean of `b1` and of `b2` over the bank.
pub fn average_bias(experts: &[FfnExpert]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_bank(experts)?;
    let n = experts.len();
    Ok((
        mean_vec(experts.iter().map(|e| e.b1.clone()), n),
        mean_vec(experts.iter().map(|e| e.b2.clone()), n),
    ))
}

fn sum_matrices<'a>(parts: impl Iterator<Item = &'a Matrix>) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for p in parts {
        match &mut acc {
            None => acc = Some(p.clone()),
            Some(a) => a.add_assign(p)?,
        }
    }
    acc.ok_or_else(|| Error::Argument("expert bank is empty".into()))
}

pub fn gather_sum(experts: &[FfnExpert]) -> Result<(Matrix, Matrix)> {
    check_bank(experts)?;
    Ok((
        sum_matrices(experts.iter().map(|e| &e.w1))?,
        sum_matrices(experts.iter().map(|e| &e.w2))?,
    ))
}

pub fn gather_avg(experts: &[FfnExpert]) -> Result<(Matrix, Matrix)> {
    let (w1, w2) = gather_sum(experts)?;
    let k = 1.0 / experts.len() as f64;
    Ok((w1.scale(k), w2.scale(k)))
}

/// Paired score of every hidden unit: `‖W1[:, j]‖₂ + ‖W2[j, :]‖₂`.
pub fn unit_scores(expert: &FfnExpert) -> Vec<f64> {
    column_norms(&expert.w1)
        .into_iter()
        .zip(row_norms(&expert.w2))
        .map(|(c, r)| c + r)
        .collect()
}

/// Units each expert contributes.
pub fn topkg_quota(d_ff: usize, experts: usize, allow_remainder: bool) -> Result<Vec<usize>> {
    let rem = d_ff % experts;
    if rem != 0 && !allow_remainder {
        return Err(Error::structural(
            "topkg",
            format!("d_ff {d_ff} is not divisible by {experts} experts"),
        ));
    }
    Ok((0..experts)
        .map(|i| d_ff / experts + usize::from(i < rem))
        .collect())
}

/// Top-KG selection. Returns the student matrices and, per expert, the
/// chosen unit indices in ascending order.
pub fn gather_topkg(
    experts: &[FfnExpert],
    allow_remainder: bool,
) -> Result<(Matrix, Matrix, Vec<Vec<usize>>)> {
    check_bank(experts)?;
    let h = experts[0].d_ff();
    let quota = topkg_quota(h, experts.len(), allow_remainder)?;
    let mut selections = Vec::with_capacity(experts.len());
    let mut w1_parts = Vec::new();
    let mut w2_parts = Vec::new();
    for (e, &k) in experts.iter().zip(&quota) {
        let sel = top_k_indices(&unit_scores(e), k)?;
        if !sel.is_empty() {
            w1_parts.push(e.w1.select_columns(&sel));
            w2_parts.push(e.w2.select_rows(&sel));
        }
        selections.push(sel);
    }
    Ok((
        Matrix::hstack(&w1_parts)?,
        Matrix::vstack(&w2_parts)?,
        selections,
    ))
}

fn svd_merge(parts: &[&Matrix], lambda: f64) -> Result<(Matrix, RankRecord)> {
    let (rows, cols) = parts[0].shape();
    let mut us = Vec::with_capacity(parts.len());
    let mut vs = Vec::with_capacity(parts.len());
    let mut sigma = Vec::new();
    let mut record = RankRecord {
        ranks: Vec::new(),
        k_g: 0,
        spectra: Vec::new(),
        degenerate: Vec::new(),
    };
    for w in parts {
        let full = svd(w)?;
        let t = truncate_svd(&full, lambda)?;
        record.spectra.push(full.s);
        record.ranks.push(t.rank);
        record.degenerate.push(t.degenerate);
        let lead = t.factors.leading(t.rank);
        sigma.extend_from_slice(&lead.s);
        us.push(lead.u);
        vs.push(lead.v);
    }
    record.k_g = record.ranks.iter().sum();
    // W_g = U_g · S_g · V_gᵀ with U_g = [U_1 … U_E], V_g = [V_1 … V_E]
    let u_g = Matrix::hstack(&us)?;
    let v_g = Matrix::hstack(&vs)?;
    let us_g = Matrix::from_fn(rows, record.k_g, |r, c| u_g.get(r, c) * sigma[c]);
    let w_g = us_g.matmul(&v_g.transpose())?;
    debug_assert_eq!(w_g.shape(), (rows, cols));
    Ok((w_g, record))
}

/// SVD-KG on W1 and W2 independently.
pub fn gather_svdkg(
    experts: &[FfnExpert],
    lambda: f64,
) -> Result<(Matrix, Matrix, RankRecord, RankRecord)> {
    check_bank(experts)?;
    check_lambda(lambda)?;
    let w1s: Vec<&Matrix> = experts.iter().map(|e| &e.w1).collect();
    let w2s: Vec<&Matrix> = experts.iter().map(|e| &e.w2).collect();
    let (w1, r1) = svd_merge(&w1s, lambda)?;
    let (w2, r2) = svd_merge(&w2s, lambda)?;
    Ok((w1, w2, r1, r2))
}

/// Copy every layer the teacher and student share structurally:
/// embeddings, positions, mixers, norms and head.
pub fn copy_matched(teacher: &ClassifierModel, student: &mut ClassifierModel) -> Result<()> {
    let same = |name: &str, a: (usize, usize), b: (usize, usize)| {
        if a == b {
            Ok(())
        } else {
            Err(Error::structural(
                name,
                format!("teacher {a:?}, student {b:?}"),
            ))
        }
    };
    same("embed", teacher.embed.shape(), student.embed.shape())?;
    same(
        "position",
        teacher.position.shape(),
        student.position.shape(),
    )?;
    same("head.w", teacher.head_w.shape(), student.head_w.shape())?;
    if teacher.blocks.len() != student.blocks.len() {
        return Err(Error::structural(
            "blocks",
            format!(
                "teacher {}, student {}",
                teacher.blocks.len(),
                student.blocks.len()
            ),
        ));
    }
    for (b, (tb, sb)) in teacher.blocks.iter().zip(&student.blocks).enumerate() {
        same(
            &format!("blocks.{b}.mixer"),
            tb.mixer.shape(),
            sb.mixer.shape(),
        )?;
        same(
            &format!("blocks.{b}.norm_mix"),
            (tb.norm_mix.dim(), tb.norm_ffn.dim()),
            (sb.norm_mix.dim(), sb.norm_ffn.dim()),
        )?;
    }
    student.embed = teacher.embed.clone();
    student.position = teacher.position.clone();
    student.blocks = teacher.blocks.clone();
    student.head_w = teacher.head_w.clone();
    student.head_b = teacher.head_b.clone();
    Ok(())
}

fn residuals(originals: &[&Matrix], carried: &[Matrix]) -> Result<Vec<f64>> {
    originals
        .iter()
        .zip(carried)
        .map(|(w, c)| relative_frobenius(c, w))
        .collect()
}

fn gather_stage(moe: &MoeLayer, stage: usize, cfg: &GatherConfig) -> Result<(Ffn, LayerReport)> {
    let experts = &moe.experts;
    let w1s: Vec<&Matrix> = experts.iter().map(|e| &e.w1).collect();
    let w2s: Vec<&Matrix> = experts.iter().map(|e| &e.w2).collect();
    let (mut b1, b2) = average_bias(experts)?;
    let mut report = LayerReport {
        stage,
        method: cfg.method,
        w1_ranks: None,
        w2_ranks: None,
        selected_units: None,
        w1_residuals: Vec::new(),
        w2_residuals: Vec::new(),
    };
    let (w1, w2) = match cfg.method {
        GatherMethod::Sum | GatherMethod::Avg => {
            let (w1, w2) = if cfg.method == GatherMethod::Sum {
                gather_sum(experts)?
            } else {
                gather_avg(experts)?
            };
            let k = if cfg.method == GatherMethod::Sum {
                1.0
            } else {
                1.0 / experts.len() as f64
            };
            let c1: Vec<Matrix> = w1s.iter().map(|w| w.scale(k)).collect();
            let c2: Vec<Matrix> = w2s.iter().map(|w| w.scale(k)).collect();
            report.w1_residuals = residuals(&w1s, &c1)?;
            report.w2_residuals = residuals(&w2s, &c2)?;
            (w1, w2)
        }
        GatherMethod::TopKg => {
            let (w1, w2, sel) = gather_topkg(experts, cfg.allow_remainder)?;
            let keep = |w: &Matrix, s: &[usize], by_col: bool| {
                Matrix::from_fn(w.rows(), w.cols(), |r, c| {
                    let unit = if by_col { c } else { r };
                    if s.contains(&unit) {
                        w.get(r, c)
                    } else {
                        0.0
                    }
                })
            };
            let c1: Vec<Matrix> = w1s
                .iter()
                .zip(&sel)
                .map(|(w, s)| keep(w, s, true))
                .collect();
            let c2: Vec<Matrix> = w2s
                .iter()
                .zip(&sel)
                .map(|(w, s)| keep(w, s, false))
                .collect();
            report.w1_residuals = residuals(&w1s, &c1)?;
            report.w2_residuals = residuals(&w2s, &c2)?;
            if cfg.bias_policy == BiasPolicy::Matched {
                b1 = experts
                    .iter()
                    .zip(&sel)
                    .flat_map(|(e, s)| s.iter().map(move |&j| e.b1[j]))
                    .collect();
            }
            report.selected_units = Some(sel);
            (w1, w2)
        }
        GatherMethod::SvdKg => {
            let lambda = cfg
                .lambda
                .ok_or_else(|| Error::Config("svdkg needs lambda".into()))?;
            let (w1, w2, r1, r2) = gather_svdkg(experts, lambda)?;
            let trunc =
                |w: &Matrix, k: usize| -> Result<Matrix> { Ok(svd(w)?.leading(k).reconstruct()) };
            let c1 = w1s
                .iter()
                .zip(&r1.ranks)
                .map(|(w, &k)| trunc(w, k))
                .collect::<Result<Vec<_>>>()?;
            let c2 = w2s
                .iter()
                .zip(&r2.ranks)
                .map(|(w, &k)| trunc(w, k))
                .collect::<Result<Vec<_>>>()?;
            report.w1_residuals = residuals(&w1s, &c1)?;
            report.w2_residuals = residuals(&w2s, &c2)?;
            report.w1_ranks = Some(r1);
            report.w2_ranks = Some(r2);
            (w1, w2)
        }
    };
    let ffn = Ffn {
        w1,
        b1,
        w2,
        b2,
        activation: experts[0].activation,
    };
    ffn.validate(&format!("stages.{stage}"))?;
    Ok((ffn, report))
}

/// Dense student from an MoE teacher: matched layers copied, every MoE
/// stage gathered per `cfg`.
pub fn build_student(
    teacher: &ClassifierModel,
    cfg: &GatherConfig,
) -> Result<(ClassifierModel, GatherReport)> {
    cfg.validate()?;
    if !teacher.has_moe() {
        return Err(Error::structural(
            "stages",
            "teacher has no MoE stage to gather",
        ));
    }
    let mut stages = Vec::with_capacity(teacher.stages.len());
    let mut layers = Vec::new();
    for (i, stage) in teacher.stages.iter().enumerate() {
        match stage {
            FeedForward::Moe(m) => {
                let (ffn, report) = gather_stage(m, i, cfg)?;
                stages.push(FeedForward::Dense(ffn));
                layers.push(report);
            }
            FeedForward::Dense(f) => stages.push(FeedForward::Dense(f.clone())),
        }
    }
    let student = teacher.with_stages(stages)?;
    Ok((
        student,
        GatherReport {
            method: cfg.method,
            lambda: cfg.lambda,
            bias_policy: cfg.bias_policy,
            layers,
        },
    ))
}
