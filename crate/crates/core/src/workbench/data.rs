//! Seeded synthetic sequence-classification tasks.
//!
//! Two families are provided:
//!
//! * `GaussianMixture`: every class owns a mean direction and several
//!   centred modes; each token is drawn around one of its class's modes.
//!   The class-mean shift is calibrated per seed by bisection so that a
//!   linear probe on mean-pooled tokens lands inside the configured accuracy
//!   band, which leaves per-token nonlinear structure for larger models.
//! * `NoisyParity`: labels are the parity of the signs of the first
//!   coordinate of `bits` designated tokens, with optional label flips.
//!   Not linearly separable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, axpy, softmax, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `seq_len × input_dim`
    pub tokens: Matrix,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Each token is `shift * mean[c] + mode_norm * mode + noise`, with the
    /// mode drawn per token from its class's modes. Modes are centred per
    /// class, so only the shift is visible after mean pooling; `shift` is
    /// calibrated to put the linear probe inside `probe_band`.
    GaussianMixture {
        modes_per_class: usize,
        mode_norm: f64,
        /// Standard deviation of the isotropic per-token noise.
        token_noise: f64,
        /// Accuracy band `[lo, hi]` the linear probe must land in.
        probe_band: [f64; 2],
    },
    NoisyParity {
        bits: usize,
        flip_prob: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub num_classes: usize,
    /// Feature width of a raw token.
    #[serde(alias = "d_model")]
    pub input_dim: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::GaussianMixture {
                modes_per_class: 64,
                mode_norm: 4.0,
                token_noise: 1.0,
                probe_band: [0.85, 0.95],
            },
            num_classes: 4,
            input_dim: 16,
            seq_len: 8,
            train_size: 20_000,
            test_size: 2_000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.input_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "task needs ≥ 2 classes and positive input_dim, seq_len".into(),
            ));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "train and test sizes must be positive".into(),
            ));
        }
        match &self.kind {
            TaskKind::GaussianMixture {
                modes_per_class,
                mode_norm,
                token_noise,
                probe_band,
            } => {
                if *modes_per_class == 0 || !(*token_noise > 0.0) || !(*mode_norm >= 0.0) {
                    return Err(Error::Config(
                        "gaussian mixture needs modes, mode_norm >= 0 and noise > 0".into(),
                    ));
                }
                let [lo, hi] = *probe_band;
                let chance = 1.0 / self.num_classes as f64;
                if !(chance < lo && lo < hi && hi < 1.0) {
                    return Err(Error::Config(format!("probe band {probe_band:?} invalid")));
                }
            }
            TaskKind::NoisyParity { bits, flip_prob } => {
                if self.num_classes != 2 {
                    return Err(Error::Config("parity task is binary".into()));
                }
                if *bits == 0 || *bits > self.seq_len || !(0.0..0.5).contains(flip_prob) {
                    return Err(Error::Config(
                        "parity needs 1 ≤ bits ≤ seq_len and flip_prob in [0, 0.5)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Train/test split plus what the generator decided while building it.
#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub train: Dataset,
    pub test: Dataset,
    /// Class-mean shift chosen by calibration (mixture tasks only).
    pub class_shift: Option<f64>,
    /// Linear-probe accuracy on a held-out calibration split at that scale.
    pub probe_accuracy: Option<f64>,
}

const CALIBRATION_SIZE: usize = 2_000;
const CALIBRATION_STEPS: usize = 24;

/// Build the train and test splits. Identical specs give identical data.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<GeneratedTask> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    match &spec.kind {
        TaskKind::GaussianMixture {
            modes_per_class,
            mode_norm,
            token_noise,
            probe_band,
        } => {
            let mixture = Mixture::draw(
                spec,
                *modes_per_class,
                *mode_norm,
                *token_noise,
                &mut root.fork(0),
            );
            let (scale, probe) = mixture.calibrate(spec, *probe_band, &root)?;
            let train = mixture.sample(spec, scale, spec.train_size, &mut root.fork(1));
            let test = mixture.sample(spec, scale, spec.test_size, &mut root.fork(2));
            Ok(GeneratedTask {
                train,
                test,
                class_shift: Some(scale),
                probe_accuracy: Some(probe),
            })
        }
        TaskKind::NoisyParity { bits, flip_prob } => {
            let train = parity(spec, *bits, *flip_prob, spec.train_size, &mut root.fork(1));
            let test = parity(spec, *bits, *flip_prob, spec.test_size, &mut root.fork(2));
            Ok(GeneratedTask {
                train,
                test,
                class_shift: None,
                probe_accuracy: None,
            })
        }
    }
}

/// Exactly balanced labels in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

struct Mixture {
    /// Unit class-mean directions.
    means: Vec<Vec<f64>>,
    /// `modes[c][m]`, centred per class and scaled to `mode_norm` on average.
    modes: Vec<Vec<Vec<f64>>>,
    noise: f64,
}

fn unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal(1.0)).collect();
    let n = crate::numerics::norm2(&v);
    v.into_iter().map(|x| x / n).collect()
}

impl Mixture {
    fn draw(
        spec: &SyntheticTaskSpec,
        per_class: usize,
        norm: f64,
        noise: f64,
        rng: &mut Rng,
    ) -> Self {
        let d = spec.input_dim;
        let means = (0..spec.num_classes).map(|_| unit(d, rng)).collect();
        let modes = (0..spec.num_classes)
            .map(|_| {
                let mut ms: Vec<Vec<f64>> = (0..per_class).map(|_| unit(d, rng)).collect();
                let mut centre = vec![0.0; d];
                for m in &ms {
                    for (c, x) in centre.iter_mut().zip(m) {
                        *c += x / per_class as f64;
                    }
                }
                for m in &mut ms {
                    for (x, c) in m.iter_mut().zip(&centre) {
                        *x -= c;
                    }
                }
                let rms = (ms
                    .iter()
                    .map(|m| crate::numerics::norm2(m).powi(2))
                    .sum::<f64>()
                    / per_class as f64)
                    .sqrt();
                let k = if rms > 0.0 { norm / rms } else { 0.0 };
                for m in &mut ms {
                    m.iter_mut().for_each(|x| *x *= k);
                }
                ms
            })
            .collect();
        Mixture {
            means,
            modes,
            noise,
        }
    }

    fn sample(&self, spec: &SyntheticTaskSpec, scale: f64, n: usize, rng: &mut Rng) -> Dataset {
        let labels = balanced_labels(n, spec.num_classes, rng);
        let examples = labels
            .into_iter()
            .map(|label| {
                let class_modes = &self.modes[label];
                let mean = &self.means[label];
                let mut tokens = Matrix::zeros(spec.seq_len, spec.input_dim);
                for t in 0..spec.seq_len {
                    let mode = &class_modes[rng.below(class_modes.len())];
                    let row = tokens.row_mut(t);
                    for ((x, m), mu) in row.iter_mut().zip(mode).zip(mean) {
                        *x = scale * mu + m + rng.normal(self.noise);
                    }
                }
                Example { tokens, label }
            })
            .collect();
        Dataset {
            examples,
            num_classes: spec.num_classes,
        }
    }

    /// Bisect the class shift so the probe lands at the centre of `band`.
    fn calibrate(
        &self,
        spec: &SyntheticTaskSpec,
        band: [f64; 2],
        root: &Rng,
    ) -> Result<(f64, f64)> {
        let target = 0.5 * (band[0] + band[1]);
        let probe_at = |scale: f64| {
            let fit = self.sample(spec, scale, CALIBRATION_SIZE, &mut root.fork(3));
            let eval = self.sample(spec, scale, CALIBRATION_SIZE, &mut root.fork(4));
            linear_probe_accuracy(&fit, &eval, ProbeFeatures::MeanPooled)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while probe_at(hi) < target {
            hi *= 2.0;
            if hi > 1e3 {
                return Err(Error::Config(
                    "linear probe never reaches the requested band".into(),
                ));
            }
        }
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            if probe_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let acc = probe_at(hi);
        if acc < band[0] || acc > band[1] {
            return Err(Error::Config(format!(
                "calibrated probe accuracy {acc:.3} outside {band:?}"
            )));
        }
        Ok((hi, acc))
    }
}

fn parity(spec: &SyntheticTaskSpec, bits: usize, flip: f64, n: usize, rng: &mut Rng) -> Dataset {
    let examples = (0..n)
        .map(|_| {
            let tokens = Matrix::from_fn(spec.seq_len, spec.input_dim, |_, _| rng.normal(1.0));
            let mut label = (0..bits).filter(|&t| tokens.get(t, 0) > 0.0).count() % 2;
            if flip > 0.0 && rng.coin(flip) {
                label ^= 1;
            }
            Example { tokens, label }
        })
        .collect();
    Dataset {
        examples,
        num_classes: 2,
    }
}

/// Feature map seen by the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFeatures {
    MeanPooled,
    Flattened,
}

fn probe_features(ex: &Example, kind: ProbeFeatures) -> Vec<f64> {
    match kind {
        ProbeFeatures::Flattened => ex.tokens.as_slice().to_vec(),
        ProbeFeatures::MeanPooled => {
            let (seq, d) = ex.tokens.shape();
            let mut out = vec![0.0; d];
            for t in 0..seq {
                axpy(1.0 / seq as f64, ex.tokens.row(t), &mut out);
            }
            out
        }
    }
}

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.5;

/// Fit multinomial logistic regression on `fit` by full-batch gradient
/// descent from zero and report accuracy on `eval`.
pub fn linear_probe_accuracy(fit: &Dataset, eval: &Dataset, kind: ProbeFeatures) -> f64 {
    let c = fit.num_classes;
    let xs: Vec<Vec<f64>> = fit
        .examples
        .iter()
        .map(|e| probe_features(e, kind))
        .collect();
    let d = xs[0].len();
    // standardise with fit statistics
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in &xs {
        axpy(1.0 / n, x, &mut mean);
    }
    let mut std = vec![0.0; d];
    for x in &xs {
        for k in 0..d {
            std[k] += (x[k] - mean[k]).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let norm = |x: Vec<f64>| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = xs.into_iter().map(norm).collect();

    let mut w = Matrix::zeros(d, c);
    let mut b = vec![0.0; c];
    for _ in 0..PROBE_STEPS {
        let mut gw = Matrix::zeros(d, c);
        let mut gb = vec![0.0; c];
        for (x, ex) in xs.iter().zip(&fit.examples) {
            let mut z = b.clone();
            for (k, &xk) in x.iter().enumerate() {
                axpy(xk, w.row(k), &mut z);
            }
            let mut p = softmax(&z);
            p[ex.label] -= 1.0;
            for (k, &xk) in x.iter().enumerate() {
                axpy(xk / n, &p, gw.row_mut(k));
            }
            axpy(1.0 / n, &p, &mut gb);
        }
        for (wv, g) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv -= PROBE_LR * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= PROBE_LR * g;
        }
    }

    let correct = eval
        .examples
        .iter()
        .filter(|ex| {
            let x = norm(probe_features(ex, kind));
            let mut z = b.clone();
            for (k, &xk) in x.iter().enumerate() {
                axpy(xk, w.row(k), &mut z);
            }
            argmax(&z) == ex.label
        })
        .count();
    correct as f64 / eval.len() as f64
}
