//! Linear stochastic-interpolant schedule, velocity targets, and the
//! velocity-to-score conversion.
//!
//! The shipped schedule is `α_t = 1 − t`, `σ_t = t` with diffusion
//! coefficient `w_t = σ_t`. The trait exists as an abstraction point; no
//! other schedule is implemented.

use crate::error::{Error, Result};
use crate::tensor::TensorValue;

/// Interpolant schedule: `x_t = α_t x_* + σ_t ε` for `t ∈ [0,1]`.
pub trait Schedule {
    fn alpha(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;
    fn alpha_dot(&self, t: f64) -> f64;
    fn sigma_dot(&self, t: f64) -> f64;

    /// Diffusion coefficient `w_t` of the reverse SDE.
    fn diffusion(&self, t: f64) -> f64 {
        self.sigma(t)
    }

    /// `x_t = α_t x_* + σ_t ε`.
    fn interpolate(&self, x_star: &TensorValue, eps: &TensorValue, t: f64) -> Result<TensorValue> {
        check_pair("interpolate", x_star, eps)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "interpolation time {t} outside [0,1]"
            )));
        }
        x_star
            .mul_scalar(self.alpha(t))?
            .add(&eps.mul_scalar(self.sigma(t))?)
    }

    /// Regression target `α̇_t x_* + σ̇_t ε`; under the linear schedule this
    /// is `ε − x_*`, independent of `t`.
    fn velocity_target(
        &self,
        x_star: &TensorValue,
        eps: &TensorValue,
        t: f64,
    ) -> Result<TensorValue> {
        check_pair("velocity_target", x_star, eps)?;
        x_star
            .mul_scalar(self.alpha_dot(t))?
            .add(&eps.mul_scalar(self.sigma_dot(t))?)
    }

    /// Score recovered from a velocity:
    /// `s = −σ_t⁻¹ (α_t v − α̇_t x) / (α_t σ̇_t − α̇_t σ_t)`.
    ///
    /// The leading minus sign is the one validated by the closed-form
    /// Gaussian check: dropping it produces an anti-diffusive reverse SDE.
    /// `t = 0` is rejected because `σ_0 = 0`.
    fn score_from_velocity(&self, x: &TensorValue, v: &TensorValue, t: f64) -> Result<TensorValue> {
        check_pair("score_from_velocity", x, v)?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "score_from_velocity needs t ∈ (0,1], got {t}"
            )));
        }
        let (a, s) = (self.alpha(t), self.sigma(t));
        let (ad, sd) = (self.alpha_dot(t), self.sigma_dot(t));
        let denom = a * sd - ad * s;
        if denom <= 0.0 {
            return Err(Error::Numeric(format!(
                "degenerate schedule at t={t}: α σ̇ − α̇ σ = {denom}"
            )));
        }
        // s(x,t) = v · (−α / (σ·denom)) + x · (α̇ / (σ·denom))
        let scale = 1.0 / (s * denom);
        v.mul_scalar(-a * scale)?.add(&x.mul_scalar(ad * scale)?)
    }
}

fn check_pair(op: &'static str, a: &TensorValue, b: &TensorValue) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolant",
            details: format!("{op}: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// The linear schedule `α_t = 1 − t`, `σ_t = t`, `w_t = σ_t`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearSchedule;

impl Schedule for LinearSchedule {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn sigma(&self, t: f64) -> f64 {
        t
    }
    fn alpha_dot(&self, _t: f64) -> f64 {
        -1.0
    }
    fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Batched interpolation on raw data with one time per sample along axis 0.
/// Used by the trainer, which draws a fresh `t` per sample.
pub fn interpolate_batch(
    sched: &impl Schedule,
    x_star: &TensorValue,
    eps: &TensorValue,
    ts: &[f64],
) -> Result<TensorValue> {
    check_pair("interpolate_batch", x_star, eps)?;
    let n = *x_star
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("batch must have a leading axis".into()))?;
    if ts.len() != n {
        return Err(Error::InvalidArgument(format!(
            "got {} times for batch of {n}",
            ts.len()
        )));
    }
    if let Some(&bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!(
            "interpolation time {bad} outside [0,1]"
        )));
    }
    let stride = x_star.numel() / n.max(1);
    let mut out = Vec::with_capacity(x_star.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let xs = &x_star.data()[i * stride..(i + 1) * stride];
        let es = &eps.data()[i * stride..(i + 1) * stride];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + s * e));
    }
    TensorValue::new(x_star.shape().to_vec(), out)
}

/// Batched velocity target with one time per sample along axis 0.
pub fn velocity_target_batch(
    sched: &impl Schedule,
    x_star: &TensorValue,
    eps: &TensorValue,
    ts: &[f64],
) -> Result<TensorValue> {
    check_pair("velocity_target_batch", x_star, eps)?;
    let n = *x_star
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("batch must have a leading axis".into()))?;
    if ts.len() != n {
        return Err(Error::InvalidArgument(format!(
            "got {} times for batch of {n}",
            ts.len()
        )));
    }
    let stride = x_star.numel() / n.max(1);
    let mut out = Vec::with_capacity(x_star.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
        let xs = &x_star.data()[i * stride..(i + 1) * stride];
        let es = &eps.data()[i * stride..(i + 1) * stride];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| ad * x + sd * e));
    }
    TensorValue::new(x_star.shape().to_vec(), out)
}

/// Closed-form quantities for 1-D standard-Gaussian data under the linear
/// schedule: `x_t ~ N(0, c(t))` with `c(t) = (1−t)² + t²`. These are the
/// independent reference for the score conversion and the samplers.
pub mod gaussian_oracle {
    /// Marginal variance `c(t) = (1−t)² + t²`.
    pub fn marginal_var(t: f64) -> f64 {
        (1.0 - t) * (1.0 - t) + t * t
    }

    /// Analytic velocity `v(x,t) = (2t − 1) x / c(t)`.
    pub fn velocity(x: f64, t: f64) -> f64 {
        (2.0 * t - 1.0) * x / marginal_var(t)
    }

    /// Analytic score `s(x,t) = −x / c(t)`.
    pub fn score(x: f64, t: f64) -> f64 {
        -x / marginal_var(t)
    }
}
