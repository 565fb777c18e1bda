use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ffn::{Activation, Ffn, FfnCache};
use crate::model::moe::{Gating, MoeLayer, MoeTokenCache, RoutingOutcome};
use crate::model::norm::{LayerNorm, LayerNormCache};
use crate::numerics::{axpy, dot, Matrix, Rng};

/// Kind of feed-forward stage hosted by every block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Moe {
        experts: usize,
        top_k: usize,
        router_noise: bool,
    },
}

/// Shape description of a [`ClassifierModel`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub blocks: usize,
    pub parameter_sharing: bool,
    #[serde(default)]
    pub activation: Activation,
    pub ffn: FfnKind,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("blocks", self.blocks),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if let FfnKind::Moe { experts, top_k, .. } = self.ffn {
            if experts == 0 || top_k == 0 || top_k > experts {
                return Err(Error::Config(format!(
                    "top_k {top_k} must be in 1..={experts}"
                )));
            }
        }
        Ok(())
    }

    /// Same architecture with every feed-forward stage made dense.
    pub fn dense(&self) -> ModelArch {
        ModelArch {
            ffn: FfnKind::Dense,
            ..self.clone()
        }
    }

    pub fn num_stages(&self) -> usize {
        if self.parameter_sharing {
            1
        } else {
            self.blocks
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Dense(Ffn),
    Moe(MoeLayer),
}

impl FeedForward {
    pub fn is_moe(&self) -> bool {
        matches!(self, FeedForward::Moe(_))
    }
}

/// One residual block: fixed token mixer, then a feed-forward stage, each
/// behind its own layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `seq_len × seq_len`, not trained.
    pub mixer: Matrix,
    pub norm_mix: LayerNorm,
    pub norm_ffn: LayerNorm,
}

/// Sequence classifier: linear token embedding plus positions, a stack of
/// blocks, mean pooling and a linear head.
///
/// With parameter sharing every block runs the same feed-forward stage
/// (`stages.len() == 1`) while keeping its own norms and mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    /// `input_dim × d_model`
    pub embed: Matrix,
    /// `seq_len × d_model`
    pub position: Matrix,
    pub blocks: Vec<Block>,
    pub stages: Vec<FeedForward>,
    /// `d_model × num_classes`
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    parameter_sharing: bool,
}

/// Name, shape and trainability of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub(crate) enum StageCache {
    Dense(Vec<FfnCache>),
    Moe(Vec<MoeTokenCache>),
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    mix_norm: LayerNormCache,
    ffn_norm: LayerNormCache,
    ffn_in: Matrix,
    stage: StageCache,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
}

/// Output of a forward pass: logits, routing decisions of every MoE block
/// (empty for dense models) and the cache needed for backprop.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub routing: Vec<RoutingOutcome>,
    pub(crate) cache: ForwardCache,
}

/// Routing control for a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Pre-drawn router noise, one `seq_len × E` matrix per block.
    pub noise: Option<&'a [Matrix]>,
    /// Bypass the router and send every token to this expert with gate 1.
    pub forced_expert: Option<usize>,
}

impl ClassifierModel {
    /// Randomly initialised model. Mixers are fixed random matrices drawn
    /// from the same stream.
    pub fn random(arch: &ModelArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let d = arch.d_model;
        let embed_std = 1.0 / (arch.input_dim as f64).sqrt();
        let embed = Matrix::from_fn(arch.input_dim, d, |_, _| rng.normal(embed_std));
        let position = Matrix::from_fn(arch.seq_len, d, |_, _| rng.normal(0.02));
        let mix_std = 1.0 / (arch.seq_len as f64).sqrt();
        let blocks = (0..arch.blocks)
            .map(|_| Block {
                mixer: Matrix::from_fn(arch.seq_len, arch.seq_len, |_, _| rng.normal(mix_std)),
                norm_mix: LayerNorm::new(d),
                norm_ffn: LayerNorm::new(d),
            })
            .collect();
        let stages = (0..arch.num_stages())
            .map(|_| random_stage(arch, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_std = 1.0 / (d as f64).sqrt();
        let head_w = Matrix::from_fn(d, arch.num_classes, |_, _| rng.normal(head_std));
        Ok(ClassifierModel {
            embed,
            position,
            blocks,
            stages,
            head_w,
            head_b: vec![0.0; arch.num_classes],
            parameter_sharing: arch.parameter_sharing,
        })
    }

    /// All-zero model of the given architecture (norm gains included).
    pub fn zeros(arch: &ModelArch) -> Result<Self> {
        arch.validate()?;
        let d = arch.d_model;
        let zero_norm = || LayerNorm {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        };
        let blocks = (0..arch.blocks)
            .map(|_| Block {
                mixer: Matrix::zeros(arch.seq_len, arch.seq_len),
                norm_mix: zero_norm(),
                norm_ffn: zero_norm(),
            })
            .collect();
        let stages = (0..arch.num_stages())
            .map(|_| zero_stage(arch))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassifierModel {
            embed: Matrix::zeros(arch.input_dim, d),
            position: Matrix::zeros(arch.seq_len, d),
            blocks,
            stages,
            head_w: Matrix::zeros(d, arch.num_classes),
            head_b: vec![0.0; arch.num_classes],
            parameter_sharing: arch.parameter_sharing,
        })
    }

    /// Same embeddings, norms, mixers and head, different feed-forward
    /// stages.
    pub fn with_stages(&self, stages: Vec<FeedForward>) -> Result<Self> {
        let model = ClassifierModel {
            stages,
            ..self.clone()
        };
        model.validate()?;
        Ok(model)
    }

    pub fn parameter_sharing(&self) -> bool {
        self.parameter_sharing
    }

    pub fn stage_index(&self, block: usize) -> usize {
        if self.parameter_sharing {
            0
        } else {
            block
        }
    }

    pub fn stage_for_block(&self, block: usize) -> &FeedForward {
        &self.stages[self.stage_index(block)]
    }

    pub fn has_moe(&self) -> bool {
        self.stages.iter().any(FeedForward::is_moe)
    }

    pub fn d_model(&self) -> usize {
        self.embed.cols()
    }

    pub fn seq_len(&self) -> usize {
        self.position.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.len()
    }

    pub fn arch(&self) -> ModelArch {
        let (d_ff, activation, ffn) = match &self.stages[0] {
            FeedForward::Dense(f) => (f.d_ff(), f.activation, FfnKind::Dense),
            FeedForward::Moe(m) => (
                m.d_ff(),
                m.experts[0].activation,
                FfnKind::Moe {
                    experts: m.num_experts(),
                    top_k: m.router.top_k,
                    router_noise: m.router.noise_enabled,
                },
            ),
        };
        ModelArch {
            input_dim: self.embed.rows(),
            d_model: self.d_model(),
            d_ff,
            seq_len: self.seq_len(),
            num_classes: self.num_classes(),
            blocks: self.blocks.len(),
            parameter_sharing: self.parameter_sharing,
            activation,
            ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let s = self.seq_len();
        if self.position.cols() != d {
            return Err(Error::structural("position", "width differs from d_model"));
        }
        if self.head_w.shape() != (d, self.head_b.len()) {
            return Err(Error::structural("head", "weight/bias shapes disagree"));
        }
        let expected_stages = if self.parameter_sharing {
            1
        } else {
            self.blocks.len()
        };
        if self.stages.len() != expected_stages {
            return Err(Error::structural(
                "stages",
                format!(
                    "{} stages for {} blocks",
                    self.stages.len(),
                    self.blocks.len()
                ),
            ));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.mixer.shape() != (s, s)
                || block.norm_mix.dim() != d
                || block.norm_ffn.dim() != d
            {
                return Err(Error::structural(format!("blocks.{b}"), "shape mismatch"));
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("stages.{i}");
            match stage {
                FeedForward::Dense(f) => f.validate(&name)?,
                FeedForward::Moe(m) => m.validate(&name)?,
            }
            let (sd, sh) = match stage {
                FeedForward::Dense(f) => (f.d_model(), f.d_ff()),
                FeedForward::Moe(m) => (m.d_model(), m.d_ff()),
            };
            if sd != d {
                return Err(Error::structural(name, "stage width differs from d_model"));
            }
            let (_, first_h) = match &self.stages[0] {
                FeedForward::Dense(f) => (0, f.d_ff()),
                FeedForward::Moe(m) => (0, m.d_ff()),
            };
            if sh != first_h || stage.is_moe() != self.stages[0].is_moe() {
                return Err(Error::structural(name, "stages differ in kind or width"));
            }
        }
        Ok(())
    }

    /// Draw router noise for one input, or `None` when the model has no
    /// noisy router.
    pub fn draw_noise(&self, rng: &mut Rng) -> Option<Vec<Matrix>> {
        let noisy = self.stages.iter().any(|s| match s {
            FeedForward::Moe(m) => m.router.noise_enabled,
            FeedForward::Dense(_) => false,
        });
        if !noisy {
            return None;
        }
        let seq = self.seq_len();
        Some(
            (0..self.blocks.len())
                .map(|b| match self.stage_for_block(b) {
                    FeedForward::Moe(m) if m.router.noise_enabled => {
                        let e = m.num_experts();
                        let std = m.router.noise_std;
                        Matrix::from_fn(seq, e, |_, _| rng.normal(std))
                    }
                    _ => Matrix::zeros(seq, 1),
                })
                .collect(),
        )
    }

    /// Logits with routing noise off.
    pub fn logits(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(tokens, ForwardOptions::default())?.logits)
    }

    /// Normalised inputs seen by each block's feed-forward stage, one
    /// `seq_len × d_model` matrix per block, routing noise off.
    pub fn block_ffn_inputs(&self, tokens: &Matrix) -> Result<Vec<Matrix>> {
        let pass = self.forward(tokens, ForwardOptions::default())?;
        Ok(pass.cache.blocks.into_iter().map(|b| b.ffn_in).collect())
    }

    pub fn forward(&self, tokens: &Matrix, opts: ForwardOptions<'_>) -> Result<ForwardPass> {
        if tokens.shape() != (self.seq_len(), self.embed.rows()) {
            return Err(Error::shape(
                "classifier_forward",
                format!(
                    "tokens {:?}, expected ({}, {})",
                    tokens.shape(),
                    self.seq_len(),
                    self.embed.rows()
                ),
            ));
        }
        let seq = self.seq_len();
        let mut h = tokens.matmul(&self.embed)?;
        h.add_assign(&self.position)?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut routing = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let (mix_in, mix_norm) = block.norm_mix.forward(&h);
            h.add_assign(&block.mixer.matmul(&mix_in)?)?;
            let (ffn_in, ffn_norm) = block.norm_ffn.forward(&h);
            let stage = match self.stage_for_block(b) {
                FeedForward::Dense(f) => {
                    let mut tok_caches = Vec::with_capacity(seq);
                    for t in 0..seq {
                        let (y, c) = f.forward_cached(ffn_in.row(t));
                        axpy(1.0, &y, h.row_mut(t));
                        tok_caches.push(c);
                    }
                    StageCache::Dense(tok_caches)
                }
                FeedForward::Moe(m) => {
                    let mut tok_caches = Vec::with_capacity(seq);
                    let mut outcome = RoutingOutcome::new(m.num_experts());
                    for t in 0..seq {
                        let gating = match opts.forced_expert {
                            Some(i) => Gating::Forced(i),
                            None => Gating::Routed(opts.noise.map(|n| n[b].row(t))),
                        };
                        let (y, c) = m.forward_cached(ffn_in.row(t), gating)?;
                        axpy(1.0, &y, h.row_mut(t));
                        outcome.tokens.push(c.route.clone());
                        tok_caches.push(c);
                    }
                    routing.push(outcome);
                    StageCache::Moe(tok_caches)
                }
            };
            if !h.is_finite() {
                return Err(Error::NonFinite(format!("block {b} output")));
            }
            caches.push(BlockCache {
                mix_norm,
                ffn_norm,
                ffn_in,
                stage,
            });
        }

        let mut pooled = vec![0.0; self.d_model()];
        for t in 0..seq {
            axpy(1.0 / seq as f64, h.row(t), &mut pooled);
        }
        let mut logits = self.head_b.clone();
        for (r, &p) in pooled.iter().enumerate() {
            axpy(p, self.head_w.row(r), &mut logits);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head logits".into()));
        }
        Ok(ForwardPass {
            logits,
            routing,
            cache: ForwardCache {
                blocks: caches,
                pooled,
            },
        })
    }

    /// Reverse pass from `dlogits`. `prob_grads[b]` is an extra gradient on
    /// every token's gate probabilities in block `b` (load balancing).
    pub(crate) fn backward(
        &self,
        tokens: &Matrix,
        cache: &ForwardCache,
        dlogits: &[f64],
        prob_grads: Option<&[Vec<f64>]>,
        grad: &mut ClassifierModel,
    ) -> Result<()> {
        let seq = self.seq_len();
        let d = self.d_model();
        for (r, &p) in cache.pooled.iter().enumerate() {
            axpy(p, dlogits, grad.head_w.row_mut(r));
        }
        for (g, v) in grad.head_b.iter_mut().zip(dlogits) {
            *g += v;
        }
        let dpooled: Vec<f64> = (0..d)
            .map(|r| dot(self.head_w.row(r), dlogits) / seq as f64)
            .collect();
        let mut dh = Matrix::from_fn(seq, d, |_, c| dpooled[c]);

        for (b, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[b];
            let s = self.stage_index(b);
            let mut dffn_in = Matrix::zeros(seq, d);
            match (&self.stages[s], &mut grad.stages[s], &bc.stage) {
                (FeedForward::Dense(f), FeedForward::Dense(gf), StageCache::Dense(tc)) => {
                    for t in 0..seq {
                        f.backward(bc.ffn_in.row(t), &tc[t], dh.row(t), gf, dffn_in.row_mut(t));
                    }
                }
                (FeedForward::Moe(m), FeedForward::Moe(gm), StageCache::Moe(tc)) => {
                    let pg = prob_grads.map(|p| p[b].as_slice());
                    for t in 0..seq {
                        m.backward(
                            bc.ffn_in.row(t),
                            &tc[t],
                            dh.row(t),
                            pg,
                            gm,
                            dffn_in.row_mut(t),
                        );
                    }
                }
                _ => {
                    return Err(Error::structural(
                        format!("stages.{s}"),
                        "gradient kind mismatch",
                    ))
                }
            }
            let gblock = &mut grad.blocks[b];
            let dmid = block
                .norm_ffn
                .backward(&bc.ffn_norm, &dffn_in, &mut gblock.norm_ffn);
            dh.add_assign(&dmid)?;
            // h_mid = h_in + M · LN(h_in)
            let dmix_in = block.mixer.transpose().matmul(&dh)?;
            let din = block
                .norm_mix
                .backward(&bc.mix_norm, &dmix_in, &mut gblock.norm_mix);
            dh.add_assign(&din)?;
        }

        grad.position.add_assign(&dh)?;
        grad.embed.add_assign(&tokens.transpose().matmul(&dh)?)?;
        Ok(())
    }

    /// Layout of every stored tensor, in checkpoint order.
    pub fn tensor_layout(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, trainable: bool| {
            out.push(TensorInfo {
                name,
                shape,
                trainable,
            })
        };
        push(
            "embed".into(),
            vec![self.embed.rows(), self.embed.cols()],
            true,
        );
        push(
            "position".into(),
            vec![self.position.rows(), self.position.cols()],
            true,
        );
        for (b, block) in self.blocks.iter().enumerate() {
            let s = block.mixer.rows();
            push(format!("blocks.{b}.mixer"), vec![s, s], false);
            let d = block.norm_mix.dim();
            push(format!("blocks.{b}.norm_mix.gain"), vec![d], true);
            push(format!("blocks.{b}.norm_mix.bias"), vec![d], true);
            push(format!("blocks.{b}.norm_ffn.gain"), vec![d], true);
            push(format!("blocks.{b}.norm_ffn.bias"), vec![d], true);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let ffn_layout =
                |prefix: String, f: &Ffn, push: &mut dyn FnMut(String, Vec<usize>, bool)| {
                    push(format!("{prefix}.w1"), vec![f.w1.rows(), f.w1.cols()], true);
                    push(format!("{prefix}.b1"), vec![f.b1.len()], true);
                    push(format!("{prefix}.w2"), vec![f.w2.rows(), f.w2.cols()], true);
                    push(format!("{prefix}.b2"), vec![f.b2.len()], true);
                };
            match stage {
                FeedForward::Dense(f) => ffn_layout(format!("stages.{i}.ffn"), f, &mut push),
                FeedForward::Moe(m) => {
                    let w = &m.router.weight;
                    push(format!("stages.{i}.router"), vec![w.rows(), w.cols()], true);
                    for (e, f) in m.experts.iter().enumerate() {
                        ffn_layout(format!("stages.{i}.experts.{e}"), f, &mut push);
                    }
                }
            }
        }
        push(
            "head.w".into(),
            vec![self.head_w.rows(), self.head_w.cols()],
            true,
        );
        push("head.b".into(), vec![self.head_b.len()], true);
        out
    }

    /// Every stored tensor, same order as [`Self::tensor_layout`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.as_slice(), self.position.as_slice()];
        for block in &self.blocks {
            out.push(block.mixer.as_slice());
            out.push(&block.norm_mix.gain);
            out.push(&block.norm_mix.bias);
            out.push(&block.norm_ffn.gain);
            out.push(&block.norm_ffn.bias);
        }
        for stage in &self.stages {
            match stage {
                FeedForward::Dense(f) => push_ffn(&mut out, f),
                FeedForward::Moe(m) => {
                    out.push(m.router.weight.as_slice());
                    for f in &m.experts {
                        push_ffn(&mut out, f);
                    }
                }
            }
        }
        out.push(self.head_w.as_slice());
        out.push(&self.head_b);
        out
    }

    /// Mutable view of every stored tensor, same order as
    /// [`Self::tensor_layout`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.embed.as_mut_slice(), self.position.as_mut_slice()];
        for block in &mut self.blocks {
            out.push(block.mixer.as_mut_slice());
            out.push(&mut block.norm_mix.gain);
            out.push(&mut block.norm_mix.bias);
            out.push(&mut block.norm_ffn.gain);
            out.push(&mut block.norm_ffn.bias);
        }
        for stage in &mut self.stages {
            match stage {
                FeedForward::Dense(f) => push_ffn_mut(&mut out, f),
                FeedForward::Moe(m) => {
                    out.push(m.router.weight.as_mut_slice());
                    for f in &mut m.experts {
                        push_ffn_mut(&mut out, f);
                    }
                }
            }
        }
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
        out
    }

    /// Trainable tensors only, paired with their names.
    pub fn trainable(&self) -> Vec<(String, &[f64])> {
        self.tensor_layout()
            .into_iter()
            .zip(self.tensors())
            .filter(|(info, _)| info.trainable)
            .map(|(info, t)| (info.name, t))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let layout = self.tensor_layout();
        layout
            .into_iter()
            .zip(self.tensors_mut())
            .filter(|(info, _)| info.trainable)
            .map(|(info, t)| (info.name, t))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_ffn<'a>(out: &mut Vec<&'a [f64]>, f: &'a Ffn) {
    out.push(f.w1.as_slice());
    out.push(&f.b1);
    out.push(f.w2.as_slice());
    out.push(&f.b2);
}

fn push_ffn_mut<'a>(out: &mut Vec<&'a mut [f64]>, f: &'a mut Ffn) {
    out.push(f.w1.as_mut_slice());
    out.push(&mut f.b1);
    out.push(f.w2.as_mut_slice());
    out.push(&mut f.b2);
}

fn random_stage(arch: &ModelArch, rng: &mut Rng) -> Result<FeedForward> {
    Ok(match arch.ffn {
        FfnKind::Dense => {
            FeedForward::Dense(Ffn::random(arch.d_model, arch.d_ff, arch.activation, rng))
        }
        FfnKind::Moe {
            experts,
            top_k,
            router_noise,
        } => {
            let mut m = MoeLayer::random(
                arch.d_model,
                arch.d_ff,
                experts,
                top_k,
                arch.activation,
                rng,
            )?;
            m.router.noise_enabled = router_noise;
            FeedForward::Moe(m)
        }
    })
}

fn zero_stage(arch: &ModelArch) -> Result<FeedForward> {
    Ok(match arch.ffn {
        FfnKind::Dense => FeedForward::Dense(Ffn::zeros(arch.d_model, arch.d_ff, arch.activation)),
        FfnKind::Moe {
            experts,
            top_k,
            router_noise,
        } => {
            let bank = (0..experts)
                .map(|_| Ffn::zeros(arch.d_model, arch.d_ff, arch.activation))
                .collect();
            let router = crate::model::moe::Router::new(
                Matrix::zeros(arch.d_model, experts),
                top_k,
                router_noise,
            )?;
            FeedForward::Moe(MoeLayer::new(bank, router)?)
        }
    })
}

/// Forward one input. Router noise is drawn from `rng` when given and the
/// model's routers have noise enabled; otherwise routing is deterministic.
pub fn classifier_forward(
    model: &ClassifierModel,
    tokens: &Matrix,
    rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, Vec<RoutingOutcome>)> {
    let noise = rng.and_then(|r| model.draw_noise(r));
    let pass = model.forward(
        tokens,
        ForwardOptions {
            noise: noise.as_deref(),
            forced_expert: None,
        },
    )?;
    Ok((pass.logits, pass.routing))
}
