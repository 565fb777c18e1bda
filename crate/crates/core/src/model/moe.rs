use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ffn::{Activation, Ffn, FfnCache};
use crate::numerics::{axpy, dot, softmax, Matrix, Rng};

/// Linear router `Hᵀx + ε` followed by softmax and top-K selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `d_model × E`
    pub weight: Matrix,
    pub top_k: usize,
    /// Standard deviation of the exploration noise, `1/E`.
    pub noise_std: f64,
    /// Noise is only drawn when this is set and the caller supplies a
    /// random stream (training).
    pub noise_enabled: bool,
}

impl Router {
    pub fn new(weight: Matrix, top_k: usize, noise_enabled: bool) -> Result<Self> {
        let experts = weight.cols();
        if top_k == 0 || top_k > experts {
            return Err(Error::Argument(format!(
                "top_k {top_k} must be in 1..={experts}"
            )));
        }
        Ok(Router {
            weight,
            top_k,
            noise_std: 1.0 / experts as f64,
            noise_enabled,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.weight.cols()
    }

    /// Gate probabilities for one token with an explicit noise vector.
    pub fn probs_with_noise(&self, x: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("router input".into()));
        }
        let mut logits = self.weight.tr_vec(x)?;
        if let Some(eps) = noise {
            for (l, e) in logits.iter_mut().zip(eps) {
                *l += e;
            }
        }
        Ok(softmax(&logits))
    }

    /// Draw one token's worth of routing noise.
    pub fn sample_noise(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.num_experts())
            .map(|_| rng.normal(self.noise_std))
            .collect()
    }
}

/// `softmax(Hᵀx + ε)`, with ε ~ N(0, (1/E)²) drawn iff the router has noise
/// enabled and a stream is given.
pub fn router_probs(x: &[f64], router: &Router, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
    let noise = match rng {
        Some(rng) if router.noise_enabled => Some(router.sample_noise(rng)),
        _ => None,
    };
    router.probs_with_noise(x, noise.as_deref())
}

/// Experts ranked by descending probability (ties to the lower index),
/// truncated to `k`. The first entry is the token's primary expert.
pub fn rank_experts(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(k);
    order
}

/// Routing decision for a single token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    /// Gate probabilities over all experts (before top-K).
    pub probs: Vec<f64>,
    /// Chosen experts in descending-probability order.
    pub selected: Vec<usize>,
}

/// Routing decisions for a set of tokens passing through one MoE layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub num_experts: usize,
    pub tokens: Vec<TokenRoute>,
}

impl RoutingOutcome {
    pub fn new(num_experts: usize) -> Self {
        RoutingOutcome {
            num_experts,
            tokens: Vec::new(),
        }
    }

    /// Fraction of tokens whose primary (top-1) expert is `i`.
    pub fn dispatch_fractions(&self) -> Vec<f64> {
        dispatch_fractions(std::slice::from_ref(self))
    }

    /// Mean gate probability per expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        mean_probs(std::slice::from_ref(self))
    }
}

fn pooled_tokens(batch: &[RoutingOutcome]) -> (usize, usize) {
    let experts = batch.first().map_or(0, |o| o.num_experts);
    let n = batch.iter().map(|o| o.tokens.len()).sum();
    (experts, n)
}

pub(crate) fn dispatch_fractions(batch: &[RoutingOutcome]) -> Vec<f64> {
    let (e, n) = pooled_tokens(batch);
    let mut m = vec![0.0; e];
    for t in batch.iter().flat_map(|o| &o.tokens) {
        m[t.selected[0]] += 1.0;
    }
    m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    m
}

pub(crate) fn mean_probs(batch: &[RoutingOutcome]) -> Vec<f64> {
    let (e, _) = pooled_tokens(batch);
    // running mean
    let mut p = vec![0.0; e];
    for (k, t) in batch.iter().flat_map(|o| &o.tokens).enumerate() {
        for (acc, v) in p.iter_mut().zip(&t.probs) {
            *acc += (v - *acc) / (k + 1) as f64;
        }
    }
    p
}

/// Load-balance loss `E · Σᵢ mᵢ·P̄ᵢ` over every token in `batch`.
pub fn balance_loss(batch: &[RoutingOutcome]) -> Result<f64> {
    let (e, n) = pooled_tokens(batch);
    if n == 0 {
        return Err(Error::Argument("balance loss over an empty batch".into()));
    }
    if batch.iter().any(|o| o.num_experts != e) {
        return Err(Error::Argument(
            "routing outcomes disagree on expert count".into(),
        ));
    }
    let m = dispatch_fractions(batch);
    let p = mean_probs(batch);
    Ok(e as f64 * dot(&m, &p))
}

/// How the MoE layer chooses experts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gating<'a> {
    /// Router decides; optional pre-drawn noise for this token.
    Routed(Option<&'a [f64]>),
    /// Send the token to one expert with gate 1.
    Forced(usize),
}

#[derive(Clone, Debug)]
pub(crate) struct MoeTokenCache {
    pub route: TokenRoute,
    pub experts: Vec<(FfnCache, Vec<f64>)>,
}

/// Bank of shape-identical experts behind a router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<Ffn>,
    pub router: Router,
}

impl MoeLayer {
    pub fn new(experts: Vec<Ffn>, router: Router) -> Result<Self> {
        let layer = MoeLayer { experts, router };
        layer.validate("moe")?;
        Ok(layer)
    }

    pub fn random(
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        top_k: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let experts = (0..num_experts)
            .map(|_| Ffn::random(d_model, d_ff, activation, rng))
            .collect();
        let weight = Matrix::from_fn(d_model, num_experts, |_, _| rng.normal(0.02));
        Self::new(experts, Router::new(weight, top_k, true)?)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.weight.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.experts.first().map_or(0, Ffn::d_ff)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::structural(name, "no experts"));
        }
        if self.experts.len() != self.router.num_experts() {
            return Err(Error::structural(
                name,
                format!(
                    "{} experts but router width {}",
                    self.experts.len(),
                    self.router.num_experts()
                ),
            ));
        }
        let first = (self.experts[0].w1.shape(), self.experts[0].activation);
        for (i, e) in self.experts.iter().enumerate() {
            e.validate(&format!("{name}.experts.{i}"))?;
            if (e.w1.shape(), e.activation) != first {
                return Err(Error::structural(
                    format!("{name}.experts.{i}"),
                    "experts differ in shape or activation",
                ));
            }
        }
        if self.router.weight.rows() != self.experts[0].d_model() {
            return Err(Error::structural(name, "router width differs from d_model"));
        }
        if self.router.top_k == 0 || self.router.top_k > self.experts.len() {
            return Err(Error::structural(name, "top_k outside 1..=E"));
        }
        Ok(())
    }

    /// `Σ_{i ∈ topK} Pᵢ·eᵢ(x)` using the raw softmax gates.
    pub fn forward(&self, x: &[f64], gating: Gating<'_>) -> Result<(Vec<f64>, TokenRoute)> {
        if x.len() != self.d_model() {
            return Err(Error::shape(
                "moe_forward",
                format!("input length {} for d_model {}", x.len(), self.d_model()),
            ));
        }
        let (y, cache) = self.forward_cached(x, gating)?;
        Ok((y, cache.route))
    }

    pub(crate) fn forward_cached(
        &self,
        x: &[f64],
        gating: Gating<'_>,
    ) -> Result<(Vec<f64>, MoeTokenCache)> {
        let route = match gating {
            Gating::Routed(noise) => {
                let probs = self.router.probs_with_noise(x, noise)?;
                let selected = rank_experts(&probs, self.router.top_k);
                TokenRoute { probs, selected }
            }
            Gating::Forced(i) => {
                if i >= self.num_experts() {
                    return Err(Error::Argument(format!("forced expert {i} out of range")));
                }
                let mut probs = vec![0.0; self.num_experts()];
                probs[i] = 1.0;
                TokenRoute {
                    probs,
                    selected: vec![i],
                }
            }
        };
        let mut y = vec![0.0; self.d_model()];
        let mut experts = Vec::with_capacity(route.selected.len());
        for &i in &route.selected {
            let (out, cache) = self.experts[i].forward_cached(x);
            axpy(route.probs[i], &out, &mut y);
            experts.push((cache, out));
        }
        Ok((y, MoeTokenCache { route, experts }))
    }

    /// Backward for one token. `prob_grad` is an extra gradient on the gate
    /// probabilities (the load-balance term), added for every expert.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &MoeTokenCache,
        dy: &[f64],
        prob_grad: Option<&[f64]>,
        grad: &mut MoeLayer,
        dx: &mut [f64],
    ) {
        let e = self.num_experts();
        let probs = &cache.route.probs;
        let mut dp = match prob_grad {
            Some(g) => g.to_vec(),
            None => vec![0.0; e],
        };
        let mut scaled = vec![0.0; dy.len()];
        for (&i, (ffn_cache, out)) in cache.route.selected.iter().zip(&cache.experts) {
            dp[i] += dot(dy, out);
            for (s, d) in scaled.iter_mut().zip(dy) {
                *s = probs[i] * d;
            }
            self.experts[i].backward(x, ffn_cache, &scaled, &mut grad.experts[i], dx);
        }
        // softmax backward
        let weighted: f64 = probs.iter().zip(&dp).map(|(p, d)| p * d).sum();
        let dz: Vec<f64> = probs
            .iter()
            .zip(&dp)
            .map(|(p, d)| p * (d - weighted))
            .collect();
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, &dz, grad.router.weight.row_mut(r));
            }
            dx[r] += dot(self.router.weight.row(r), &dz);
        }
    }
}

/// Route one token and mix the selected experts' outputs.
pub fn moe_forward(
    layer: &MoeLayer,
    x: &[f64],
    rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, RoutingOutcome)> {
    let noise = match rng {
        Some(rng) if layer.router.noise_enabled => Some(layer.router.sample_noise(rng)),
        _ => None,
    };
    let (y, route) = layer.forward(x, Gating::Routed(noise.as_deref()))?;
    Ok((
        y,
        RoutingOutcome {
            num_experts: layer.num_experts(),
            tokens: vec![route],
        },
    ))
}
