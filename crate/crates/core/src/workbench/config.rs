use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gather::{topkg_quota, BiasPolicy, GatherConfig, GatherMethod};
use crate::model::{Activation, FfnKind, ModelArch};
use crate::train::{DistillConfig, TrainConfig};
use crate::workbench::SyntheticTaskSpec;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ONES_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub experts: usize,
    pub top_k: usize,
    pub blocks: usize,
    pub parameter_sharing: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub router_noise: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 32,
            d_ff: 128,
            experts: 4,
            top_k: 2,
            blocks: 2,
            parameter_sharing: true,
            activation: Activation::Gelu,
            router_noise: true,
        }
    }
}

/// Gathering settings shared by every requested method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatherSettings {
    pub methods: Vec<GatherMethod>,
    pub lambda: f64,
    /// Bias policy for Top-KG; other methods always average.
    pub topkg_bias: BiasPolicy,
    pub allow_remainder: bool,
}

impl Default for GatherSettings {
    fn default() -> Self {
        GatherSettings {
            methods: GatherMethod::ALL.to_vec(),
            lambda: 0.75,
            topkg_bias: BiasPolicy::Average,
            allow_remainder: false,
        }
    }
}

impl GatherSettings {
    pub fn config_for(&self, method: GatherMethod, seed: u64) -> GatherConfig {
        GatherConfig {
            method,
            lambda: (method == GatherMethod::SvdKg).then_some(self.lambda),
            bias_policy: if method == GatherMethod::TopKg {
                self.topkg_bias
            } else {
                BiasPolicy::Average
            },
            allow_remainder: self.allow_remainder,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub model: ModelShape,
    pub task: SyntheticTaskSpec,
    pub teacher: TrainConfig,
    /// Steps for the long-budget dense baseline (`dense-long`); defaults to
    /// teacher plus distillation steps. The `dense` reference row always
    /// trains for exactly the teacher's steps.
    #[serde(default)]
    pub dense_steps: Option<usize>,
    #[serde(default)]
    pub gather: GatherSettings,
    pub distill: DistillConfig,
    /// Also run `dense-long` and the random-init (`distill`) and
    /// matched-copy (`switch`) distillation baselines.
    #[serde(default = "yes")]
    pub baselines: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Named presets. `default` and `imagenet` use α = 0.25, λ = 0.75;
    /// `nlp` uses α = 0.75, λ = 0.25; `smoke` is a seconds-long run.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            name: name.to_string(),
            seed: 0,
            model: ModelShape::default(),
            task: SyntheticTaskSpec::default(),
            teacher: TrainConfig::default(),
            dense_steps: None,
            gather: GatherSettings::default(),
            distill: DistillConfig::default(),
            baselines: true,
            output_dir: PathBuf::from("runs").join(name),
        };
        match name {
            "default" | "imagenet" => {}
            "nlp" => {
                cfg.distill.alpha = 0.75;
                cfg.gather.lambda = 0.25;
            }
            "smoke" => {
                cfg.model = ModelShape {
                    d_model: 8,
                    d_ff: 16,
                    experts: 4,
                    top_k: 2,
                    blocks: 2,
                    parameter_sharing: true,
                    activation: Activation::Gelu,
                    router_noise: true,
                };
                cfg.task.input_dim = 6;
                cfg.task.seq_len = 4;
                cfg.task.train_size = 400;
                cfg.task.test_size = 200;
                cfg.teacher.steps = 30;
                cfg.teacher.batch_size = 16;
                cfg.distill.steps = 20;
                cfg.distill.batch_size = 16;
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        cfg.set_seed(0);
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 4] = ["default", "imagenet", "nlp", "smoke"];

    /// Propagate one seed to every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.task.seed = seed;
        self.teacher.seed = seed;
        self.distill.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `ONES_SEED` if set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn teacher_arch(&self) -> ModelArch {
        let m = &self.model;
        ModelArch {
            input_dim: self.task.input_dim,
            d_model: m.d_model,
            d_ff: m.d_ff,
            seq_len: self.task.seq_len,
            num_classes: self.task.num_classes,
            blocks: m.blocks,
            parameter_sharing: m.parameter_sharing,
            activation: m.activation,
            ffn: FfnKind::Moe {
                experts: m.experts,
                top_k: m.top_k,
                router_noise: m.router_noise,
            },
        }
    }

    pub fn dense_steps(&self) -> usize {
        self.dense_steps
            .unwrap_or(self.teacher.steps + self.distill.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher_arch().validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        if self.dense_steps == Some(0) {
            return Err(Error::Config("dense_steps must be positive".into()));
        }
        for &m in &self.gather.methods {
            let g = self.gather.config_for(m, self.seed);
            g.validate()?;
            if m == GatherMethod::TopKg {
                topkg_quota(
                    self.model.d_ff,
                    self.model.experts,
                    self.gather.allow_remainder,
                )
                .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        let seeds = [self.task.seed, self.teacher.seed, self.distill.seed];
        if seeds.iter().any(|&s| s != self.seed) {
            return Err(Error::Config(
                "task, teacher and distill seeds must equal the experiment seed".into(),
            ));
        }
        Ok(())
    }
}
