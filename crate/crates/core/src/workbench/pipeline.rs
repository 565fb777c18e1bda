use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gather::{build_student, copy_matched, GatherMethod};
use crate::metrics::{accuracy, model_ffn_flops, moe_benefits, Scoreboard};
use crate::model::ClassifierModel;
use crate::numerics::Rng;
use crate::train::{
    distill_from_logits, teacher_logits, train_supervised, train_teacher, DistillMode, TrainConfig,
    TrainOutcome,
};
use crate::workbench::checkpoint::{file_sha256, save_checkpoint, Provenance};
use crate::workbench::config::ExperimentConfig;
use crate::workbench::data::{generate_dataset, GeneratedTask};

/// One trained model in the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub seed: u64,
    /// Held-out accuracy before distillation (students only).
    pub init_accuracy: Option<f64>,
    pub accuracy: f64,
    /// Share of the teacher's gain over the `dense` row that this model
    /// keeps; absent when teacher and dense score the same.
    pub benefits: Option<f64>,
    pub params: usize,
    pub ffn_flops_per_token: u64,
    /// Relative to the output directory.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub name: String,
    pub seed: u64,
    pub class_shift: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub teacher_sha256: String,
    /// Teacher checkpoint hash re-checked after every student was built.
    pub teacher_unchanged: bool,
    pub rows: Vec<VariantRow>,
}

pub const SUMMARY_HEADER: &str =
    "variant,seed,init_accuracy,accuracy,benefits,params,ffn_flops_per_token,checkpoint";

impl PipelineSummary {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                opt(r.init_accuracy),
                r.accuracy,
                opt(r.benefits),
                r.params,
                r.ffn_flops_per_token,
                r.checkpoint
            );
        }
        out
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Provenance stamped on every checkpoint the pipeline writes.
pub(crate) fn provenance(
    cfg: &ExperimentConfig,
    role: &str,
    teacher_sha256: Option<String>,
) -> Result<Provenance> {
    Ok(Provenance {
        role: role.to_string(),
        seed: cfg.seed,
        gather: None,
        teacher_sha256,
        training: Some(serde_json::to_value(cfg)?),
    })
}

/// Dense model with the teacher's shapes, randomly initialised from the
/// experiment seed and `stream`.
pub fn random_dense(cfg: &ExperimentConfig, stream: u64) -> Result<ClassifierModel> {
    ClassifierModel::random(
        &cfg.teacher_arch().dense(),
        &mut Rng::new(cfg.seed).fork(stream),
    )
}

pub fn teach(cfg: &ExperimentConfig, task: &GeneratedTask) -> Result<TrainOutcome> {
    train_teacher(
        &cfg.teacher_arch(),
        &cfg.teacher,
        &task.train,
        Some(&task.test),
    )
}

/// Dense model with the student's shapes trained from scratch on the
/// teacher's recipe for `steps` steps.
pub fn train_dense_baseline(
    cfg: &ExperimentConfig,
    task: &GeneratedTask,
    steps: usize,
) -> Result<TrainOutcome> {
    let train = TrainConfig {
        steps,
        ..cfg.teacher.clone()
    };
    train_supervised(
        random_dense(cfg, 10)?,
        &train,
        &task.train,
        Some(&task.test),
    )
}

/// Row name of a gathered student.
pub fn ones_variant(method: GatherMethod) -> String {
    format!("ones-{}", method.name())
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Teach, gather with every configured method, distil, evaluate and
/// compare. Artifacts land in `cfg.output_dir`; a failing stage aborts
/// with its name and leaves earlier artifacts in place.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineSummary> {
    stage("config", cfg.validate())?;
    let out = &cfg.output_dir;
    stage("config", write_json(&out.join("config.json"), cfg))?;
    let task = stage("data", generate_dataset(&cfg.task))?;

    let teacher = stage("teach", teach(cfg, &task))?;
    let teacher_path = out.join("teacher.ckpt");
    stage(
        "teach",
        save_checkpoint(
            &teacher.model,
            provenance(cfg, "teacher", None)?,
            &teacher_path,
        ),
    )?;
    stage(
        "teach",
        write_text(&out.join("teacher_log.csv"), &teacher.log.to_csv()),
    )?;
    let teacher_hash = stage("teach", file_sha256(&teacher_path))?;
    let teacher_acc = stage("eval", accuracy(&teacher.model, &task.test))?;

    let benefits = |acc: f64, dense_acc: f64| {
        moe_benefits(&Scoreboard {
            score_student: acc,
            score_dense: dense_acc,
            score_moe: teacher_acc,
        })
        .ok()
    };
    let mut dense_runs = vec![("dense", cfg.teacher.steps)];
    if cfg.baselines {
        dense_runs.push(("dense-long", cfg.dense_steps()));
    }
    let mut rows = vec![];
    let mut dense_acc = None;
    for (variant, steps) in dense_runs {
        let trained = stage("dense", train_dense_baseline(cfg, &task, steps))?;
        let rel = format!("{variant}.ckpt");
        stage(
            "dense",
            save_checkpoint(
                &trained.model,
                provenance(cfg, variant, None)?,
                &out.join(&rel),
            ),
        )?;
        stage(
            "dense",
            write_text(
                &out.join(format!("{variant}_log.csv")),
                &trained.log.to_csv(),
            ),
        )?;
        let acc = stage("eval", accuracy(&trained.model, &task.test))?;
        let reference = *dense_acc.get_or_insert(acc);
        rows.push(VariantRow {
            variant: variant.into(),
            seed: cfg.seed,
            init_accuracy: None,
            accuracy: acc,
            benefits: benefits(acc, reference),
            params: trained.model.parameter_count(),
            ffn_flops_per_token: model_ffn_flops(&trained.model),
            checkpoint: rel,
        });
    }
    let dense_acc = dense_acc.unwrap_or_default();
    rows.push(VariantRow {
        variant: "teacher".into(),
        seed: cfg.seed,
        init_accuracy: None,
        accuracy: teacher_acc,
        benefits: benefits(teacher_acc, dense_acc),
        params: teacher.model.parameter_count(),
        ffn_flops_per_token: model_ffn_flops(&teacher.model),
        checkpoint: "teacher.ckpt".into(),
    });
    let targets = match cfg.distill.mode {
        DistillMode::None => None,
        _ => Some(stage(
            "distill",
            teacher_logits(&teacher.model, &task.train.examples),
        )?),
    };

    // (variant, initial student, gather provenance, gather report)
    let mut starts = Vec::new();
    if cfg.baselines {
        starts.push(("distill".to_string(), random_dense(cfg, 11)?, None, None));
        let mut switch = random_dense(cfg, 12)?;
        stage("gather", copy_matched(&teacher.model, &mut switch))?;
        starts.push(("switch".to_string(), switch, None, None));
    }
    for &m in &cfg.gather.methods {
        let gcfg = cfg.gather.config_for(m, cfg.seed);
        let (student, report) = stage("gather", build_student(&teacher.model, &gcfg))?;
        starts.push((ones_variant(m), student, Some(gcfg), Some(report)));
    }

    for (variant, init, gcfg, report) in starts {
        let dir = PathBuf::from("students");
        let init_rel = dir.join(format!("{variant}_init.ckpt"));
        let final_rel = dir.join(format!("{variant}.ckpt"));
        let mut prov = provenance(cfg, "student-init", Some(teacher_hash.clone()))?;
        prov.gather = gcfg;
        stage(
            "gather",
            save_checkpoint(&init, prov.clone(), &out.join(&init_rel)),
        )?;
        if let Some(r) = &report {
            stage(
                "gather",
                write_json(&out.join(dir.join(format!("{variant}_gather.json"))), r),
            )?;
        }
        let init_acc = stage("eval", accuracy(&init, &task.test))?;
        let trained = stage(
            "distill",
            distill_from_logits(
                init,
                targets.as_deref(),
                &cfg.distill,
                &task.train,
                Some(&task.test),
            ),
        )?;
        prov.role = "student".into();
        stage(
            "distill",
            save_checkpoint(&trained.model, prov, &out.join(&final_rel)),
        )?;
        stage(
            "distill",
            write_text(
                &out.join(dir.join(format!("{variant}_log.csv"))),
                &trained.log.to_csv(),
            ),
        )?;
        let acc = stage("eval", accuracy(&trained.model, &task.test))?;
        rows.push(VariantRow {
            variant,
            seed: cfg.seed,
            init_accuracy: Some(init_acc),
            accuracy: acc,
            benefits: benefits(acc, dense_acc),
            params: trained.model.parameter_count(),
            ffn_flops_per_token: model_ffn_flops(&trained.model),
            checkpoint: final_rel.to_string_lossy().replace('\\', "/"),
        });
    }

    let teacher_unchanged = stage("verify", file_sha256(&teacher_path))? == teacher_hash;
    if !teacher_unchanged {
        return Err(
            Error::Config("teacher checkpoint changed during the run".into()).in_stage("verify"),
        );
    }
    let summary = PipelineSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        class_shift: task.class_shift,
        probe_accuracy: task.probe_accuracy,
        teacher_sha256: teacher_hash,
        teacher_unchanged,
        rows,
    };
    stage("report", write_json(&out.join("summary.json"), &summary))?;
    stage(
        "report",
        write_text(&out.join("summary.csv"), &summary.to_csv()),
    )?;
    Ok(summary)
}
