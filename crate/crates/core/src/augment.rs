//! Micro data augmentation: convex combinations of adjacent snippets.
//!
//! A video of `T` snippets yields `T − 1` child snippets. Child `t` sits
//! between parents `t` and `t + 1` and is built with weight `α_t` on the
//! earlier parent. The same weights mix the parents' predictions.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Beta draws are kept inside `[ALPHA_CLAMP, 1 − ALPHA_CLAMP]`.
pub const ALPHA_CLAMP: f64 = 1e-6;

/// Mixing weights and the child sequence they produce for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub alphas: Vec<f64>,
    pub gamma: f64,
    pub child: Tensor2D,
}

impl MixPlan {
    pub fn new(features: &Tensor2D, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let alphas = sample_alphas_with(features.rows(), gamma, rng)?;
        let child = mix_rows(features, &alphas)?;
        Ok(Self {
            alphas,
            gamma,
            child,
        })
    }
}

/// `T − 1` i.i.d. `Beta(γ, γ)` weights from a fresh stream seeded by `seed`.
pub fn sample_alphas(t_len: usize, gamma: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_alphas_with(t_len, gamma, &mut rng)
}

pub fn sample_alphas_with(t_len: usize, gamma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::config("gamma", format!("must be > 0, got {gamma}")));
    }
    if t_len < 2 {
        return Err(Error::shape(
            "sample_alphas",
            format!("need at least 2 snippets, got {t_len}"),
        ));
    }
    let beta = Beta::new(gamma, gamma)
        .map_err(|e| Error::config("gamma", format!("{e}")))?;
    Ok((0..t_len - 1)
        .map(|_| beta.sample(rng).clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP))
        .collect())
}

/// `out[t] = α_t·x[t] + (1 − α_t)·x[t+1]`.
pub(crate) fn mix_rows(x: &Tensor2D, alphas: &[f64]) -> Result<Tensor2D> {
    if x.rows() < 2 || alphas.len() != x.rows() - 1 {
        return Err(Error::shape(
            "mix_adjacent",
            format!("{} weights for {} rows", alphas.len(), x.rows()),
        ));
    }
    let mut out = Tensor2D::zeros(alphas.len(), x.cols());
    for (t, &alpha) in alphas.iter().enumerate() {
        let (cur, next) = (x.row(t), x.row(t + 1));
        for (o, (&a, &b)) in out.row_mut(t).iter_mut().zip(cur.iter().zip(next)) {
            *o = alpha * a + (1.0 - alpha) * b;
        }
    }
    Ok(out)
}

/// Builds the child feature sequence `F′`.
pub fn mix_adjacent(features: &Tensor2D, alphas: &[f64]) -> Result<Tensor2D> {
    mix_rows(features, alphas)
}

/// Convex combination of adjacent snippet predictions, `P̂′`.
pub fn mix_predictions(probs: &Tensor2D, alphas: &[f64]) -> Result<Tensor2D> {
    mix_rows(probs, alphas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn beta_two_moments() {
        let draws = sample_alphas(10_001, 2.0, 7).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
        assert!((var - 0.05).abs() <= 0.01, "var {var}");
        assert!(draws.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(
            sample_alphas(50, 2.0, 3).unwrap(),
            sample_alphas(50, 2.0, 3).unwrap()
        );
        assert_ne!(
            sample_alphas(50, 2.0, 3).unwrap(),
            sample_alphas(50, 2.0, 4).unwrap()
        );
    }

    #[test]
    fn rejects_bad_gamma_and_length() {
        assert!(matches!(
            sample_alphas(5, 0.0, 1),
            Err(Error::Config { key: "gamma", .. })
        ));
        assert!(sample_alphas(5, -1.0, 1).is_err());
        assert!(sample_alphas(1, 2.0, 1).is_err());
    }

    #[test]
    fn tiny_gamma_stays_open_interval() {
        let draws = sample_alphas(2000, 0.01, 11).unwrap();
        assert!(draws
            .iter()
            .all(|&a| (ALPHA_CLAMP..=1.0 - ALPHA_CLAMP).contains(&a)));
    }

    #[test]
    fn mixing_examples() {
        let f = Tensor2D::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let child = mix_adjacent(&f, &[0.5]).unwrap();
        assert_eq!(child.data(), &[1.0, 1.0]);

        let f = Tensor2D::from_rows(&[[1.5, -2.0], [7.0, 3.0], [0.25, 9.0]]).unwrap();
        let alphas = vec![1.0 - ALPHA_CLAMP; 2];
        let child = mix_adjacent(&f, &alphas).unwrap();
        for t in 0..2 {
            for c in 0..2 {
                let parent = f.get(t, c);
                assert!((child.get(t, c) - parent).abs() <= 1e-5 * parent.abs().max(1.0));
            }
        }

        let constant = Tensor2D::from_rows(&[[0.3, 0.7]; 4]).unwrap();
        let child = mix_adjacent(&constant, &[0.1, 0.9, 0.42]).unwrap();
        assert!(child.row_iter().all(|r| (r[0] - 0.3).abs() < 1e-15 && (r[1] - 0.7).abs() < 1e-15));

        let p = Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let hat = mix_predictions(&p, &[0.25]).unwrap();
        assert_eq!(hat.data(), &[0.25, 0.75]);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let f = Tensor2D::zeros(4, 2);
        assert!(matches!(
            mix_adjacent(&f, &[0.5, 0.5]),
            Err(Error::Shape { .. })
        ));
        assert!(mix_predictions(&f, &[0.5; 4]).is_err());
    }
}
