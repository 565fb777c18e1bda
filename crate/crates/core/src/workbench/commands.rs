//! Library side of the `ones` command-line tool. Each subcommand is one
//! function taking paths and settings and returning a serialisable report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gather::{build_student, GatherConfig, GatherReport};
use crate::metrics::{
    accuracy, flops_per_token, model_ffn_flops, moe_benefits, noise_scan, noise_scan_csv,
    NoiseScanRow, NoiseTarget, Scoreboard,
};
use crate::model::{ClassifierModel, FeedForward};
use crate::train::{distill_student, DistillMode, KlDirection};
use crate::workbench::checkpoint::{file_sha256, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::workbench::config::ExperimentConfig;
use crate::workbench::data::{generate_dataset, Dataset, GeneratedTask};
use crate::workbench::pipeline::{provenance, teach, write_json, write_text};

/// `<path><suffix>`, e.g. `t.ckpt` → `t.ckpt.log.csv`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Experiment config stored in a checkpoint's provenance.
pub fn stored_config(meta: &CheckpointMeta) -> Result<ExperimentConfig> {
    let value = meta.provenance.training.clone().ok_or_else(|| {
        Error::Config("checkpoint carries no experiment config in its provenance".into())
    })?;
    Ok(serde_json::from_value(value)?)
}

/// Regenerate the data a checkpoint was trained on.
pub fn stored_task(meta: &CheckpointMeta) -> Result<GeneratedTask> {
    generate_dataset(&stored_config(meta)?.task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeachReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub sha256: String,
    pub accuracy: f64,
    pub final_balance: Option<f64>,
}

/// Train a teacher; writes the checkpoint and `<out>.log.csv`.
pub fn run_teach(cfg: &ExperimentConfig, out: &Path) -> Result<TeachReport> {
    cfg.validate()?;
    let task = generate_dataset(&cfg.task)?;
    let trained = teach(cfg, &task)?;
    save_checkpoint(&trained.model, provenance(cfg, "teacher", None)?, out)?;
    let log = sidecar(out, ".log.csv");
    write_text(&log, &trained.log.to_csv())?;
    Ok(TeachReport {
        checkpoint: out.to_path_buf(),
        log,
        sha256: file_sha256(out)?,
        accuracy: accuracy(&trained.model, &task.test)?,
        final_balance: trained.log.last().map(|r| r.balance),
    })
}

/// Gather a dense student from a teacher checkpoint; writes the student
/// and `<out>.gather.json`.
pub fn run_gather(teacher: &Path, gather: &GatherConfig, out: &Path) -> Result<GatherReport> {
    let (model, meta) = load_checkpoint(teacher)?;
    let (student, report) = build_student(&model, gather)?;
    let mut prov = meta.provenance.clone();
    prov.role = "student-init".into();
    prov.gather = Some(gather.clone());
    prov.teacher_sha256 = Some(file_sha256(teacher)?);
    save_checkpoint(&student, prov, out)?;
    write_json(&sidecar(out, ".gather.json"), &report)?;
    Ok(report)
}

/// Command-line overrides on top of the distillation settings stored with
/// the teacher.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillOverrides {
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub mode: Option<DistillMode>,
    pub kl_direction: Option<KlDirection>,
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub init_accuracy: f64,
    pub accuracy: f64,
    pub teacher_sha256: String,
}

/// Distil a student against a frozen teacher on the teacher's training
/// data; writes the student and `<out>.log.csv`.
pub fn run_distill(
    student: &Path,
    teacher: &Path,
    overrides: &DistillOverrides,
    out: &Path,
) -> Result<DistillReport> {
    let hash_before = file_sha256(teacher)?;
    let (teacher_model, teacher_meta) = load_checkpoint(teacher)?;
    let (student_model, student_meta) = load_checkpoint(student)?;
    if let Some(h) = &student_meta.provenance.teacher_sha256 {
        if *h != hash_before {
            return Err(Error::Config(format!(
                "student was gathered from teacher {h}, not {hash_before}"
            )));
        }
    }
    let mut cfg = stored_config(&teacher_meta)?;
    let d = &mut cfg.distill;
    d.alpha = overrides.alpha.unwrap_or(d.alpha);
    d.temperature = overrides.temperature.unwrap_or(d.temperature);
    d.mode = overrides.mode.unwrap_or(d.mode);
    d.kl_direction = overrides.kl_direction.unwrap_or(d.kl_direction);
    d.steps = overrides.steps.unwrap_or(d.steps);
    cfg.validate()?;

    let task = generate_dataset(&cfg.task)?;
    let init_accuracy = accuracy(&student_model, &task.test)?;
    let trained = distill_student(
        student_model,
        &teacher_model,
        &cfg.distill,
        &task.train,
        Some(&task.test),
    )?;
    let mut prov = provenance(&cfg, "student", Some(hash_before.clone()))?;
    prov.gather = student_meta.provenance.gather;
    save_checkpoint(&trained.model, prov, out)?;
    let log = sidecar(out, ".log.csv");
    write_text(&log, &trained.log.to_csv())?;
    if file_sha256(teacher)? != hash_before {
        return Err(Error::Config(
            "teacher checkpoint changed during distillation".into(),
        ));
    }
    Ok(DistillReport {
        checkpoint: out.to_path_buf(),
        log,
        init_accuracy,
        accuracy: accuracy(&trained.model, &task.test)?,
        teacher_sha256: hash_before,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub role: String,
    pub seed: u64,
    pub split: Split,
    pub examples: usize,
    pub accuracy: f64,
    pub params: usize,
    pub ffn_flops_per_token: u64,
}

pub fn evaluate(
    model: &ClassifierModel,
    meta: &CheckpointMeta,
    data: &Dataset,
    split: Split,
) -> Result<Scores> {
    Ok(Scores {
        role: meta.provenance.role.clone(),
        seed: meta.provenance.seed,
        split,
        examples: data.len(),
        accuracy: accuracy(model, data)?,
        params: model.parameter_count(),
        ffn_flops_per_token: model_ffn_flops(model),
    })
}

/// Score a checkpoint on its own task; writes `out` when given.
pub fn run_eval(model: &Path, split: Split, out: Option<&Path>) -> Result<Scores> {
    let (m, meta) = load_checkpoint(model)?;
    let task = stored_task(&meta)?;
    let data = match split {
        Split::Train => &task.train,
        Split::Test => &task.test,
    };
    let scores = evaluate(&m, &meta, data, split)?;
    if let Some(p) = out {
        write_json(p, &scores)?;
    }
    Ok(scores)
}

/// A score given literally or as the `accuracy` of a scores file.
pub fn read_score(arg: &str) -> Result<f64> {
    if let Ok(v) = arg.parse::<f64>() {
        return Ok(v);
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scores: Scores = serde_json::from_str(&text)?;
    Ok(scores.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenefitsReport {
    #[serde(flatten)]
    pub scores: Scoreboard,
    pub benefits: f64,
}

pub fn run_benefits(student: &str, dense: &str, moe: &str) -> Result<BenefitsReport> {
    let scores = Scoreboard {
        score_student: read_score(student)?,
        score_dense: read_score(dense)?,
        score_moe: read_score(moe)?,
    };
    Ok(BenefitsReport {
        benefits: moe_benefits(&scores)?,
        scores,
    })
}

/// Inclusive grid `start:stop:step`, e.g. `0.1:1.0:0.1`.
pub fn parse_lambda_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("bad lambda grid {spec:?}")))?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::Argument(format!(
            "lambda grid {spec:?} is not start:stop:step"
        )));
    };
    if !(step > 0.0) || stop < start {
        return Err(Error::Argument(format!("lambda grid {spec:?} is empty")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScanReport {
    pub stage: usize,
    pub tokens: usize,
    pub target: NoiseTarget,
    pub rows: Vec<NoiseScanRow>,
    pub slope: f64,
    pub r2: f64,
}

/// Signal/noise scan of a teacher's first MoE stage on the feed-forward
/// inputs of `examples` held-out sequences; writes the CSV to `out`.
pub fn run_noise_scan(
    teacher: &Path,
    lambdas: &[f64],
    target: NoiseTarget,
    examples: usize,
    out: Option<&Path>,
) -> Result<NoiseScanReport> {
    let (model, meta) = load_checkpoint(teacher)?;
    let (stage, moe) = model
        .stages
        .iter()
        .enumerate()
        .find_map(|(i, s)| match s {
            FeedForward::Moe(m) => Some((i, m)),
            FeedForward::Dense(_) => None,
        })
        .ok_or_else(|| Error::structural("stages", "model has no MoE stage"))?;
    let task = stored_task(&meta)?;
    let blocks: Vec<usize> = (0..model.blocks.len())
        .filter(|&b| model.stage_index(b) == stage)
        .collect();
    let mut tokens = Vec::new();
    for ex in task.test.examples.iter().take(examples) {
        let inputs = model.block_ffn_inputs(&ex.tokens)?;
        for &b in &blocks {
            for t in 0..inputs[b].rows() {
                tokens.push(inputs[b].row(t).to_vec());
            }
        }
    }
    let rows = noise_scan(moe, lambdas, &tokens, target)?;
    let (slope, r2) = crate::metrics::noise_linearity(&rows);
    if let Some(p) = out {
        write_text(p, &noise_scan_csv(&rows))?;
    }
    Ok(NoiseScanReport {
        stage,
        tokens: tokens.len(),
        target,
        rows,
        slope,
        r2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Per block, in block order.
    pub blocks: Vec<u64>,
    pub ffn_flops_per_token: u64,
    pub params: usize,
}

pub fn flops_report(model: &ClassifierModel) -> FlopsReport {
    FlopsReport {
        blocks: (0..model.blocks.len())
            .map(|b| flops_per_token(model.stage_for_block(b).into()))
            .collect(),
        ffn_flops_per_token: model_ffn_flops(model),
        params: model.parameter_count(),
    }
}

pub fn run_flops(model: &Path) -> Result<FlopsReport> {
    Ok(flops_report(&load_checkpoint(model)?.0))
}
