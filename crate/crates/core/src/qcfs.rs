//! Quantization clip-floor-shift activation.
//!
//! `a = λ · clip(floor(z·L/λ + φ) / L, 0, 1)`; with `φ = 0` this is the plain
//! clip-floor activation. The backward pass treats `floor` as the identity
//! (straight-through) inside the unclipped band `(−φλ/L, λ − φλ/L)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial trainable threshold for freshly inserted QCFS layers.
pub const DEFAULT_LAMBDA: f64 = 8.0;
/// Lower bound λ is projected onto after every optimizer step.
pub const LAMBDA_FLOOR: f64 = 1e-3;
pub const DEFAULT_SHIFT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcfsParams {
    /// Quantization steps `L`.
    pub levels: u32,
    /// Trainable threshold `λ`.
    pub lambda: f64,
    /// Shift `φ` inside the floor.
    pub shift: f64,
}

impl QcfsParams {
    pub fn new(levels: u32, lambda: f64, shift: f64) -> Result<Self> {
        let p = QcfsParams { levels, lambda, shift };
        p.validate()?;
        Ok(p)
    }

    pub fn with_levels(levels: u32) -> Result<Self> {
        Self::new(levels, DEFAULT_LAMBDA, DEFAULT_SHIFT)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("QCFS quantization steps L must be ≥ 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("QCFS λ must be positive, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.shift) {
            return Err(Error::Config(format!(
                "QCFS shift must lie in [0, 1), got {}",
                self.shift
            )));
        }
        Ok(())
    }

    /// The same parameters with the shift forced to zero.
    pub fn without_shift(self) -> Self {
        QcfsParams { shift: 0.0, ..self }
    }

    /// Lower and upper edges of the band where the straight-through
    /// gradient is active.
    pub fn gradient_band(&self) -> (f64, f64) {
        let step = self.lambda / self.levels as f64;
        (-self.shift * step, self.lambda - self.shift * step)
    }
}

/// Quantization level `k ∈ [0, L]` selected for pre-activation `z`.
#[inline]
pub fn level(z: f64, p: &QcfsParams) -> f64 {
    let l = p.levels as f64;
    (z * l / p.lambda + p.shift).floor().clamp(0.0, l)
}

#[inline]
pub fn qcfs_scalar(z: f64, p: &QcfsParams) -> f64 {
    p.lambda * (level(z, p) / p.levels as f64)
}

/// `(∂a/∂z, ∂a/∂λ)` at a single point.
#[inline]
pub fn qcfs_grad_scalar(z: f64, p: &QcfsParams) -> (f64, f64) {
    let (lo, hi) = p.gradient_band();
    let dz = if lo < z && z < hi { 1.0 } else { 0.0 };
    let dlambda = if z < lo {
        0.0
    } else if z >= hi {
        1.0
    } else {
        (qcfs_scalar(z, p) - z) / p.lambda
    };
    (dz, dlambda)
}

pub fn qcfs_forward(z: &Tensor, p: &QcfsParams) -> Tensor {
    z.map(|v| qcfs_scalar(v, p))
}

/// Clip-floor activation without shift.
pub fn qcf_forward_noshift(z: &Tensor, p: &QcfsParams) -> Tensor {
    qcfs_forward(z, &p.without_shift())
}

/// Straight-through backward pass. Returns the gradient with respect to
/// `z` and the upstream-weighted sum of `∂a/∂λ`.
pub fn qcfs_backward(z: &Tensor, upstream: &Tensor, p: &QcfsParams) -> Result<(Tensor, f64)> {
    if z.shape() != upstream.shape() {
        return Err(Error::dim("qcfs_backward", z.shape(), upstream.shape()));
    }
    let mut dlambda = 0.0;
    let mut dz = Vec::with_capacity(z.len());
    for (&zi, &gi) in z.data().iter().zip(upstream.data()) {
        let (gz, gl) = qcfs_grad_scalar(zi, p);
        dz.push(gz * gi);
        dlambda += gl * gi;
    }
    Ok((Tensor::new(z.shape().to_vec(), dz)?, dlambda))
}

/// `λ · clip(z/λ, 0, 1)`: the floor-free activation used for gradient checks.
#[inline]
pub fn clip_scalar(z: f64, lambda: f64) -> f64 {
    z.clamp(0.0, lambda)
}

#[inline]
pub fn clip_grad_scalar(z: f64, lambda: f64) -> (f64, f64) {
    let dz = if 0.0 < z && z < lambda { 1.0 } else { 0.0 };
    let dlambda = if z >= lambda { 1.0 } else { 0.0 };
    (dz, dlambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(levels: u32, lambda: f64, shift: f64) -> QcfsParams {
        QcfsParams::new(levels, lambda, shift).unwrap()
    }

    #[test]
    fn forward_examples() {
        let q = p(4, 1.0, 0.5);
        assert_eq!(qcfs_scalar(0.3, &q), 0.25);
        assert_eq!(qcfs_scalar(0.0, &q), 0.0);
        assert_eq!(qcfs_scalar(2.0, &q), 1.0);
        assert_eq!(qcfs_scalar(-0.2, &q), 0.0);
        assert_eq!(qcfs_scalar(0.0, &p(7, 3.2, 0.5)), 0.0);
    }

    #[test]
    fn noshift_examples() {
        let q = p(4, 1.0, 0.5);
        let z = Tensor::vector(&[0.3, 0.24, 1.0]);
        assert_eq!(qcf_forward_noshift(&z, &q).data(), &[0.25, 0.0, 1.0]);
        let q9 = p(9, 2.7, 0.0);
        assert_eq!(qcfs_scalar(2.7, &q9), 2.7);
    }

    #[test]
    fn backward_examples() {
        let q = p(4, 1.0, 0.5);
        let (dz, dl) = qcfs_grad_scalar(0.3, &q);
        assert_eq!(dz, 1.0);
        assert!((dl - (-0.05)).abs() < 1e-15);
        assert_eq!(qcfs_grad_scalar(0.95, &q), (0.0, 1.0));
        assert_eq!(qcfs_grad_scalar(-0.5, &q), (0.0, 0.0));
    }

    #[test]
    fn backward_accumulates_weighted_lambda_gradient() {
        let q = p(4, 1.0, 0.5);
        let z = Tensor::vector(&[0.3, 0.95, -0.5]);
        let up = Tensor::vector(&[2.0, 3.0, 5.0]);
        let (dz, dl) = qcfs_backward(&z, &up, &q).unwrap();
        assert_eq!(dz.data(), &[2.0, 0.0, 0.0]);
        assert!((dl - (2.0 * -0.05 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(QcfsParams::new(0, 1.0, 0.5).is_err());
        assert!(QcfsParams::new(4, 0.0, 0.5).is_err());
        assert!(QcfsParams::new(4, 1.0, 1.0).is_err());
        assert!(QcfsParams::new(4, 1.0, -0.1).is_err());
    }
}
