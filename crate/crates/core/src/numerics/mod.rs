//! Dense linear algebra, SVD, top-k selection and the seeded random source.

mod matrix;
mod rng;
mod svd;

pub use matrix::{axpy, column_norms, dot, norm2, relative_frobenius, row_norms, Matrix};
pub use rng::Rng;
pub(crate) use svd::check_lambda;
pub use svd::{retained_rank, svd, truncate_svd, SvdFactors, TruncatedSvd, MAX_SWEEPS, TOLERANCE};

use crate::error::{Error, Result};

/// Indices of the `k` largest scores, ascending by index. Ties go to the
/// lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Argument(format!(
            "top-k of {} scores with k = {k}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort, so equal scores stay in index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(z)`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 3.0, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[7.0, 7.0, 7.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(top_k_indices(&[1.0], 2), Err(Error::Argument(_))));
        assert!(top_k_indices(&[1.0, 2.0], 0).unwrap().is_empty());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = Rng::new(64);
        let scores: Vec<f64> = (0..64).map(|_| rng.normal(1.0)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = sorted[15];
        let expected: Vec<usize> = (0..64).filter(|&i| scores[i] >= threshold).collect();
        assert_eq!(top_k_indices(&scores, 16).unwrap(), expected);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    proptest! {
        #[test]
        fn top_k_sorted_unique(scores in prop::collection::vec(-5i32..5, 1..40), frac in 0.0f64..1.0) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let k = ((scores.len() as f64) * frac) as usize;
            let idx = top_k_indices(&scores, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            // nothing outside beats anything inside
            let min_in = idx.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in 0..scores.len() {
                if !idx.contains(&i) {
                    prop_assert!(scores[i] <= min_in);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-30.0f64..30.0, 1..10)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let lp = log_softmax(&z);
            for (a, b) in p.iter().zip(&lp) {
                prop_assert!((a.ln() - b).abs() < 1e-9);
            }
        }
    }
}
