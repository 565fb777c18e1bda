use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Two-layer feed-forward network `W2ᵀ·σ(W1ᵀx + b1) + b2`.
///
/// Used both as an MoE expert and as the dense student's feed-forward stage;
/// the two differ only in how their weights are obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    /// `d_model × d_ff`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_ff × d_model`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

pub type FfnExpert = Ffn;
pub type DenseFfn = Ffn;

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

impl Ffn {
    pub fn zeros(d_model: usize, d_ff: usize, activation: Activation) -> Self {
        Ffn {
            w1: Matrix::zeros(d_model, d_ff),
            b1: vec![0.0; d_ff],
            w2: Matrix::zeros(d_ff, d_model),
            b2: vec![0.0; d_model],
            activation,
        }
    }

    /// Gaussian fan-in initialisation, zero biases.
    pub fn random(d_model: usize, d_ff: usize, activation: Activation, rng: &mut Rng) -> Self {
        let s1 = 1.0 / (d_model as f64).sqrt();
        let s2 = 1.0 / (d_ff as f64).sqrt();
        Ffn {
            w1: Matrix::from_fn(d_model, d_ff, |_, _| rng.normal(s1)),
            b1: vec![0.0; d_ff],
            w2: Matrix::from_fn(d_ff, d_model, |_, _| rng.normal(s2)),
            b2: vec![0.0; d_model],
            activation,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let (d, h) = self.w1.shape();
        if self.w2.shape() != (h, d) || self.b1.len() != h || self.b2.len() != d {
            return Err(Error::structural(
                name,
                format!(
                    "w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                    self.w1.shape(),
                    self.b1.len(),
                    self.w2.shape(),
                    self.b2.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_model() {
            return Err(Error::shape(
                "ffn_forward",
                format!("input length {} for d_model {}", x.len(), self.d_model()),
            ));
        }
        Ok(self.forward_cached(x).0)
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, FfnCache) {
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.w1.row(i), &mut pre);
            }
        }
        let act: Vec<f64> = pre.iter().map(|&u| self.activation.apply(u)).collect();
        let mut out = self.b2.clone();
        for (j, &aj) in act.iter().enumerate() {
            if aj != 0.0 {
                axpy(aj, self.w2.row(j), &mut out);
            }
        }
        (out, FfnCache { pre, act })
    }

    /// Accumulate parameter gradients into `grad` and input gradient into
    /// `dx` for upstream gradient `dy`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &FfnCache,
        dy: &[f64],
        grad: &mut Ffn,
        dx: &mut [f64],
    ) {
        let h = self.d_ff();
        let mut du = vec![0.0; h];
        for j in 0..h {
            let aj = cache.act[j];
            if aj != 0.0 {
                axpy(aj, dy, grad.w2.row_mut(j));
            }
            du[j] = dot(self.w2.row(j), dy) * self.activation.derivative(cache.pre[j]);
        }
        for (g, d) in grad.b2.iter_mut().zip(dy) {
            *g += d;
        }
        for (g, d) in grad.b1.iter_mut().zip(&du) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &du, grad.w1.row_mut(i));
            }
            dx[i] += dot(self.w1.row(i), &du);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_output_bias() {
        let mut f = Ffn::zeros(3, 5, Activation::Gelu);
        f.b2 = vec![1.0, -2.0, 0.5];
        assert_eq!(f.forward(&[0.3, -1.0, 2.0]).unwrap(), f.b2);
    }

    #[test]
    fn relu_identity_composition() {
        let f = Ffn {
            w1: Matrix::identity(3),
            b1: vec![0.0; 3],
            w2: Matrix::identity(3),
            b2: vec![0.0; 3],
            activation: Activation::Relu,
        };
        let x = [0.0, 1.5, 3.25];
        assert_eq!(f.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = Rng::new(9);
        let mut f = Ffn::random(4, 6, Activation::Gelu, &mut rng);
        f.b1.iter_mut().for_each(|b| *b = rng.normal(0.5));
        f.b2.iter_mut().for_each(|b| *b = rng.normal(0.5));
        let x: Vec<f64> = (0..4).map(|_| rng.normal(1.0)).collect();
        let y = f.forward(&x).unwrap();
        for o in 0..4 {
            let mut acc = f.b2[o];
            for j in 0..6 {
                let mut u = f.b1[j];
                for i in 0..4 {
                    u += f.w1.get(i, j) * x[i];
                }
                let g = 0.5 * u * (1.0 + libm::erf(u / 2f64.sqrt()));
                acc += f.w2.get(j, o) * g;
            }
            assert!((y[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_length() {
        let f = Ffn::zeros(3, 2, Activation::Relu);
        assert!(matches!(f.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
