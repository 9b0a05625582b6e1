//! Positiveness kernels over weak labels and normalized depth.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WspError};

/// Default depth-kernel bandwidth.
pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Dirac,
    Composite,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
    pub kind: KernelKind,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma: DEFAULT_SIGMA,
            kind: KernelKind::Composite,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)
    }

    /// Kernel value between two `(label, depth)` samples.
    pub fn weight(&self, a: (i64, f64), b: (i64, f64)) -> Result<f64> {
        match self.kind {
            KernelKind::Gaussian => gaussian_weight(a.1, b.1, self.sigma),
            KernelKind::Dirac => Ok(dirac_weight(a.0, b.0)),
            KernelKind::Composite => composite_weight(a.0, b.0, a.1, b.1, self.sigma),
            KernelKind::Constant => {
                check_sigma(self.sigma)?;
                Ok(1.0)
            }
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(WspError::Config(format!("kernel bandwidth must be > 0, got {sigma}")))
    }
}

/// Unnormalized Gaussian `exp(−(d_a − d_b)² / 2σ²)`.
///
/// No `1/(σ√2π)` factor: weights are always renormalized over the positive
/// set, where any constant cancels.
pub fn gaussian_weight(d_a: f64, d_b: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let u = d_a - d_b;
    Ok((-(u * u) / (2.0 * sigma * sigma)).exp())
}

pub fn dirac_weight(y_a: i64, y_b: i64) -> f64 {
    if y_a == y_b {
        1.0
    } else {
        0.0
    }
}

/// Label gate times depth proximity.
pub fn composite_weight(y_a: i64, y_b: i64, d_a: f64, d_b: f64, sigma: f64) -> Result<f64> {
    Ok(dirac_weight(y_a, y_b) * gaussian_weight(d_a, d_b, sigma)?)
}

/// Divide each weight by the total over the positive set.
///
/// Returns `None` when the set is empty or carries no mass; such an anchor
/// is skipped by the losses.
pub fn normalize_over_positives(weights: &[(usize, f64)]) -> Option<Vec<(usize, f64)>> {
    let total: f64 = weights.iter().map(|&(_, w)| w).sum();
    if weights.is_empty() || total <= 0.0 || !total.is_finite() {
        return None;
    }
    Some(weights.iter().map(|&(i, w)| (i, w / total)).collect())
}
