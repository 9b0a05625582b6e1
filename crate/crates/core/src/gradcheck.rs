//! Finite-difference verification of the loss gradients.

use rand::Rng;

use crate::autodiff::{finite_diff_gradient, max_relative_error, Tape};
use crate::data::rng_for;
use crate::error::Result;
use crate::losses::{contrastive_loss, BatchMeta, LossConfig, LossKind, ViewMeta};
use crate::tensor::Tensor;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error; see [`max_relative_error`].
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// A random batch of raw (unnormalized) latents with paired views.
///
/// `M` is even and at most 8, `D` at most 16; labels come from four classes.
pub fn random_batch(seed: u64) -> Result<(Tensor, BatchMeta)> {
    let mut rng = rng_for(seed, &[]);
    let slices = rng.gen_range(2..=4usize);
    let dim = rng.gen_range(2..=16usize);
    let mut views = Vec::with_capacity(2 * slices);
    for s in 0..slices {
        let v = ViewMeta {
            y: rng.gen_range(0..4),
            d: rng.gen_range(0.0..=1.0),
            slice_id: s as u64,
            patient_id: s as u64,
        };
        views.push(v);
        views.push(v);
    }
    let x = Tensor::from_fn(&[2 * slices, dim], |_| rng.gen_range(-1.0..1.0));
    Ok((x, BatchMeta::new(views)?))
}

fn loss_of_raw(x: &Tensor, meta: &BatchMeta, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let z = tape.l2_normalize(v)?;
    let l = contrastive_loss(&tape, z, meta, cfg)?;
    tape.value(l).item()
}

/// Max relative error between the tape gradient of
/// `loss(l2_normalize(X))` and central differences.
pub fn check_batch(x: &Tensor, meta: &BatchMeta, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let z = tape.l2_normalize(v)?;
    let l = contrastive_loss(&tape, z, meta, cfg)?;
    let analytic = tape.backward(l)?.wrt(v);
    let numeric = finite_diff_gradient(|p| loss_of_raw(p, meta, cfg), x, GRADCHECK_EPS)?;
    Ok(max_relative_error(&analytic, &numeric, GRADCHECK_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckResult {
    pub kind: LossKind,
    pub batches: usize,
    pub max_error: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

/// Check every loss kind on `batches` random batches.
pub fn gradcheck_all(seed: u64, batches: usize, base: &LossConfig) -> Result<Vec<GradcheckResult>> {
    LossKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let cfg = base.with_kind(kind);
            let mut max_error = 0.0f64;
            for b in 0..batches {
                let (x, meta) = random_batch(crate::data::derive_seed(seed, &[k as u64, b as u64]))?;
                max_error = max_error.max(check_batch(&x, &meta, &cfg)?);
            }
            Ok(GradcheckResult {
                kind,
                batches,
                max_error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_kinds_pass() {
        for r in gradcheck_all(3, 5, &LossConfig::default()).unwrap() {
            assert!(r.passed(), "{:?}", r);
        }
    }

    #[test]
    fn batches_respect_size_limits() {
        for seed in 0..50 {
            let (x, meta) = random_batch(seed).unwrap();
            assert!(x.shape()[0] <= 8 && x.shape()[0] % 2 == 0 && x.shape()[1] <= 16);
            assert_eq!(meta.len(), x.shape()[0]);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (x, meta) = random_batch(1).unwrap();
        let cfg = LossConfig::default();
        let numeric = finite_diff_gradient(|p| loss_of_raw(p, &meta, &cfg), &x, GRADCHECK_EPS).unwrap();
        let skewed = numeric.map(|g| g * 1.01 + 1e-3);
        assert!(max_relative_error(&skewed, &numeric, GRADCHECK_FLOOR) > GRADCHECK_TOLERANCE);
    }
}
