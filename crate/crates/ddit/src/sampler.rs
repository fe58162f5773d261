//! Reverse-time samplers: Euler for the probability-flow ODE and
//! Euler–Maruyama for the reverse SDE, with classifier-free guidance.
//!
//! Integration runs on a uniform grid from t=1 down to `t_min` (the score
//! conversion is singular at t=0). Chains are batched through the velocity
//! field in one forward per step, but every chain owns a private rng stream
//! derived from (seed, chain index), so results are independent of batching.
//! The last SDE step omits noise.

use crate::config::RunConfig;
use crate::container::write_container;
use crate::error::{Error, Result};
use crate::interpolant::Schedule;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::tensor::{Rng, TensorValue};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Sde,
    Ode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub mode: SampleMode,
    /// Guidance scale; 1.0 means no classifier-free guidance.
    pub cfg_scale: f64,
    /// Conditioning class; `None` samples unconditionally (null class).
    pub class_id: Option<usize>,
    pub num_samples: usize,
    pub seed: u64,
    /// Terminal clamp of the reverse-time grid.
    pub t_min: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            num_steps: 250,
            mode: SampleMode::Sde,
            cfg_scale: 1.0,
            class_id: None,
            num_samples: 512,
            seed: 0,
            t_min: 1e-3,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sample.num_steps must be ≥ 1".into()));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::Config("sample.cfg_scale must be ≥ 0".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config("sample.t_min must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// A velocity field `v(x, t)` over batched states `[n, ...]`.
pub trait VelocityField {
    fn velocity(&self, x: &TensorValue, t: f64) -> Result<TensorValue>;
    /// Shape of a single sample (without the batch axis).
    fn sample_shape(&self) -> Vec<usize>;
}

/// Closed-form velocity of 1-D standard-Gaussian data under the linear
/// schedule; the samplers' independent oracle.
pub struct GaussianOracleField;

impl VelocityField for GaussianOracleField {
    fn velocity(&self, x: &TensorValue, t: f64) -> Result<TensorValue> {
        let c = crate::interpolant::gaussian_oracle::marginal_var(t);
        x.mul_scalar((2.0 * t - 1.0) / c)
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1]
    }
}

/// Guidance combination `v_uncond + g·(v_cond − v_uncond)`; `g = 1` returns
/// the conditional velocity exactly.
pub fn cfg_velocity(v_cond: &TensorValue, v_uncond: &TensorValue, g: f64) -> Result<TensorValue> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_velocity",
            details: format!("{:?} vs {:?}", v_cond.shape(), v_uncond.shape()),
        });
    }
    if g == 1.0 {
        return Ok(v_cond.clone());
    }
    if g == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.add(&v_cond.sub(v_uncond)?.mul_scalar(g)?)
}

/// Trained model as a velocity field, with optional classifier-free
/// guidance. Holds frozen parameters: sampling never touches the graph.
pub struct ModelField {
    cfg: ModelConfig,
    params: ModelParams,
    class_id: Option<usize>,
    guidance: f64,
}

impl ModelField {
    pub fn new(
        cfg: &ModelConfig,
        params: &ModelParams,
        class_id: Option<usize>,
        guidance: f64,
    ) -> Result<ModelField> {
        if let Some(c) = class_id {
            if c >= cfg.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class id {c} out of range for {} classes",
                    cfg.num_classes
                )));
            }
        }
        Ok(ModelField {
            cfg: cfg.clone(),
            params: params.frozen(),
            class_id,
            guidance,
        })
    }

    fn eval(&self, x: &TensorValue, t: f64, class: usize) -> Result<TensorValue> {
        let n = x.shape()[0];
        let out = forward(&self.cfg, &self.params, x, &vec![t; n], &vec![class; n])?;
        Ok(out.v_pred)
    }
}

impl VelocityField for ModelField {
    fn velocity(&self, x: &TensorValue, t: f64) -> Result<TensorValue> {
        match self.class_id {
            None => self.eval(x, t, self.cfg.null_class()),
            // g = 1 bypasses the unconditional branch: one forward per step
            Some(c) if self.guidance == 1.0 => self.eval(x, t, c),
            Some(c) => {
                let v_cond = self.eval(x, t, c)?;
                let v_uncond = self.eval(x, t, self.cfg.null_class())?;
                cfg_velocity(&v_cond, &v_uncond, self.guidance)
            }
        }
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.cfg.layout.sample_shape()
    }
}

/// One reverse-time Euler step of the probability-flow ODE:
/// `x' = x − h·v(x, t)`.
pub fn ode_step(x: &TensorValue, t: f64, h: f64, field: &dyn VelocityField) -> Result<TensorValue> {
    if !(h > 0.0) || t - h < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "ode_step needs 0 < h ≤ t, got h={h}, t={t}"
        )));
    }
    let v = field.velocity(x, t)?;
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&xi, &vi)| xi - h * vi)
        .collect();
    TensorValue::new(x.shape().to_vec(), data)
}

/// One reverse-time Euler–Maruyama step:
/// `x' = x − h·(v − ½·w_t·s) + √(w_t·h)·z`, with the score recovered from
/// the velocity and `z ~ N(0, I)` drawn flat from `rng`. `with_noise: false`
/// gives the deterministic terminal step.
pub fn em_sde_step(
    x: &TensorValue,
    t: f64,
    h: f64,
    field: &dyn VelocityField,
    sched: &dyn Schedule,
    rng: &mut Rng,
    with_noise: bool,
) -> Result<TensorValue> {
    let v = field.velocity(x, t)?;
    let noise = if with_noise {
        Some(rng.fill_normal(x.numel()))
    } else {
        None
    };
    em_sde_apply(x, &v, t, h, sched, noise.as_deref())
}

/// Drift/diffusion arithmetic shared by the single-rng and per-chain paths.
fn em_sde_apply(
    x: &TensorValue,
    v: &TensorValue,
    t: f64,
    h: f64,
    sched: &dyn Schedule,
    noise: Option<&[f64]>,
) -> Result<TensorValue> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "em_sde_step needs t ∈ (0,1], got {t}"
        )));
    }
    if !(h > 0.0) || t - h < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "em_sde_step needs 0 < h ≤ t, got h={h}, t={t}"
        )));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
    let denom = a * sd - ad * s;
    if denom <= 0.0 {
        return Err(Error::Numeric(format!(
            "degenerate schedule at t={t}: α σ̇ − α̇ σ = {denom}"
        )));
    }
    // score s(x,t) = cv·v + cx·x  (the minus-sign form of the conversion)
    let scale = 1.0 / (s * denom);
    let (cv, cx) = (-a * scale, ad * scale);
    let w = sched.diffusion(t);
    let noise_scale = (w * h).sqrt();

    let mut data = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let vi = v.data()[i];
        let score = cv * vi + cx * xi;
        let drift = vi - 0.5 * w * score;
        let mut next = xi - h * drift;
        if let Some(z) = noise {
            if noise_scale > 0.0 {
                next += noise_scale * z[i];
            }
        }
        data.push(next);
    }
    TensorValue::new(x.shape().to_vec(), data)
}

/// Integrates `num_samples` chains from `x ~ N(0,I)` at t=1 down to `t_min`
/// on a uniform grid. Chains are batched into one tensor per step; chain `i`
/// draws its initial state and SDE noise from stream `(seed, i)`.
pub fn sample(
    field: &dyn VelocityField,
    sched: &dyn Schedule,
    cfg: &SampleConfig,
) -> Result<TensorValue> {
    cfg.validate()?;
    let shape = field.sample_shape();
    let stride: usize = shape.iter().product();
    let n = cfg.num_samples;
    let mut full_shape = vec![n];
    full_shape.extend(&shape);
    if n == 0 {
        return TensorValue::new(full_shape, Vec::new());
    }

    let mut chain_rngs: Vec<Rng> = (0..n)
        .map(|i| Rng::with_stream(cfg.seed, i as u64))
        .collect();
    let mut init = Vec::with_capacity(n * stride);
    for rng in &mut chain_rngs {
        init.extend(rng.fill_normal(stride));
    }
    let mut x = TensorValue::new(full_shape, init)?;

    let steps = cfg.num_steps;
    let grid = |k: usize| 1.0 - (1.0 - cfg.t_min) * k as f64 / steps as f64;
    for k in 0..steps {
        let t = grid(k);
        let h = t - grid(k + 1);
        match cfg.mode {
            SampleMode::Ode => {
                x = ode_step(&x, t, h, field)?;
            }
            SampleMode::Sde => {
                let last = k + 1 == steps;
                let v = field.velocity(&x, t)?;
                let noise = if last {
                    None
                } else {
                    let mut z = Vec::with_capacity(n * stride);
                    for rng in &mut chain_rngs {
                        z.extend(rng.fill_normal(stride));
                    }
                    Some(z)
                };
                x = em_sde_apply(&x, &v, t, h, sched, noise.as_deref())?;
            }
        }
    }
    Ok(x)
}

/// Point-mode samples as CSV with columns `x,y,class`.
pub fn write_samples_csv(path: &Path, samples: &TensorValue, class_column: usize) -> Result<()> {
    if samples.shape().len() != 2 || samples.shape().get(1) != Some(&2) {
        return Err(Error::ShapeMismatch {
            op: "write_samples_csv",
            details: format!("expected [n,2] points, got {:?}", samples.shape()),
        });
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "x,y,class")?;
    for row in samples.data().chunks(2) {
        writeln!(file, "{},{},{class_column}", row[0], row[1])?;
    }
    file.flush()?;
    Ok(())
}

/// Samples in a DDIT1 container under the tensor name `samples`.
pub fn write_samples_container(
    path: &Path,
    run_cfg: &RunConfig,
    samples: &TensorValue,
) -> Result<()> {
    write_container(
        path,
        run_cfg,
        0,
        &Rng::new(0).to_hex(),
        None,
        &[("samples".to_string(), samples)],
    )
}
