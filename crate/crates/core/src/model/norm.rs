use crate::numerics::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token layer normalisation with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    /// Normalise each row of `x`.
    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (rows, d) = x.shape();
        let mut xhat = Matrix::zeros(rows, d);
        let mut y = Matrix::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (h, v) in xr.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let yr = y.row_mut(r);
            for c in 0..d {
                yr[c] = self.gain[c] * xhat.get(r, c) + self.bias[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    /// Returns the input gradient; parameter gradients go into `grad`.
    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Matrix,
        grad: &mut LayerNorm,
    ) -> Matrix {
        let (rows, d) = dy.shape();
        let n = d as f64;
        let mut dx = Matrix::zeros(rows, d);
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grad.gain[c] += dyr[c] * xh[c];
                grad.bias[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gain[c];
            }
            let sum: f64 = dxhat.iter().sum();
            let sum_x: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = inv / n * (n * dxhat[c] - sum - xh[c] * sum_x);
            }
        }
        dx
    }
}
