//! AdamW training loop with label dropout, loss composition, JSON-lines
//! metrics, and bitwise checkpoint persistence.
//!
//! Determinism contract: one rng stream drives batch draws, label dropout,
//! per-sample times, and noise, in that fixed per-step order. The stream
//! state round-trips through checkpoints, so a resumed run replays the
//! unbroken run's trajectory exactly.

use crate::config::RunConfig;
use crate::container::{write_container, Container};
use crate::data::{sample_batch, DataLayout};
use crate::error::{Error, Result};
use crate::interpolant::{interpolate_batch, LinearSchedule};
use crate::losses::{
    adaptive_weight, alignment_loss, diversity_loss, flow_matching_loss_batch, total_loss,
    PairSet, ProjectorParams, SyntheticEncoder,
};
use crate::model::{forward, patchify, ModelConfig, ModelParams};
use crate::tensor::{backward, Gradients, Rng, TensorValue};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub label_dropout_prob: f64,
    pub diversity: bool,
    pub alignment: bool,
    pub align_depth: usize,
    pub align_target_dim: usize,
    pub lambda_align: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 128,
            total_steps: 5000,
            label_dropout_prob: 0.1,
            diversity: true,
            alignment: false,
            align_depth: 2,
            align_target_dim: 32,
            lambda_align: 0.5,
            seed: 0,
            checkpoint_interval: 1000,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train betas must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_dropout_prob) {
            return Err(Error::Config(
                "train.label_dropout_prob must be in [0,1)".into(),
            ));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config("train intervals must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// First and second Adam moments, aligned with the trainable-tensor visit
/// order.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    pub projector: Option<ProjectorParams>,
    /// Frozen synthetic target encoder (alignment only); persisted but never
    /// optimized.
    pub encoder: Option<SyntheticEncoder>,
    pub moments: AdamMoments,
    pub step: u64,
    pub rng: Rng,
    pub pairs: Option<PairSet>,
}

// rng stream ids carved out of the run seed
const STREAM_PARAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_ENCODER: u64 = 3;
const STREAM_PROJECTOR: u64 = 4;

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<TrainState> {
        cfg.validate()?;
        let model_cfg = cfg.model_config()?;
        let seed = cfg.train.seed;
        let params = ModelParams::init(&model_cfg, &mut Rng::with_stream(seed, STREAM_PARAM_INIT));
        let (projector, encoder) = if cfg.train.alignment {
            let proj = ProjectorParams::init(
                model_cfg.hidden_dim,
                cfg.train.align_target_dim,
                &mut Rng::with_stream(seed, STREAM_PROJECTOR),
            );
            let enc = SyntheticEncoder::init(
                model_cfg.token_dim,
                cfg.train.align_target_dim,
                &mut Rng::with_stream(seed, STREAM_ENCODER),
            );
            (Some(proj), Some(enc))
        } else {
            (None, None)
        };
        let pairs = if cfg.train.diversity {
            Some(PairSet::select(
                model_cfg.num_blocks,
                cfg.diversity.layer_subset_size,
                cfg.diversity.selection_seed,
            )?)
        } else {
            None
        };
        let mut state = TrainState {
            model_cfg,
            params,
            projector,
            encoder,
            moments: AdamMoments {
                m: Vec::new(),
                v: Vec::new(),
            },
            step: 0,
            rng: Rng::with_stream(seed, STREAM_TRAIN),
            pairs,
        };
        state.moments = state.zero_moments();
        Ok(state)
    }

    fn zero_moments(&self) -> AdamMoments {
        let sizes: Vec<usize> = self
            .trainable_names_sizes()
            .into_iter()
            .map(|(_, n)| n)
            .collect();
        AdamMoments {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn trainable_names_sizes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .params
            .visit()
            .into_iter()
            .map(|(n, t)| (n, t.numel()))
            .collect();
        if let Some(p) = &self.projector {
            out.extend(p.visit().into_iter().map(|(n, t)| (n, t.numel())));
        }
        out
    }

    /// Names of the trainable tensors, in optimizer order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable_names_sizes().into_iter().map(|(n, _)| n).collect()
    }
}

/// Per-step metrics; one JSON object per line in the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_fm: f64,
    pub l_orth: f64,
    pub l_mi: f64,
    pub l_disp: f64,
    pub l_div: f64,
    pub w: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub wallclock_ms: u64,
}

/// Replaces labels with the null class with probability `p`; one uniform
/// draw per label regardless of `p`, so the stream length is fixed.
pub fn dropout_labels(y: &mut [usize], null_class: usize, p: f64, rng: &mut Rng) {
    for label in y.iter_mut() {
        if rng.next_f64() < p {
            *label = null_class;
        }
    }
}

fn named_component<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{name} ({context})"),
        },
        other => other,
    })
}

fn finite_or_halt(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            context: format!("loss component {name}"),
        })
    }
}

/// One optimization step: batch draw, forward, loss composition, backward,
/// AdamW update.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig) -> Result<StepMetrics> {
    let started = std::time::Instant::now();
    let sched = LinearSchedule;
    let n = cfg.train.batch_size;
    let model_cfg = state.model_cfg.clone();

    // fixed draw order: batch, label dropout, times, noise
    let (x_star, mut y) = sample_batch(&cfg.data, n, &mut state.rng)?;
    dropout_labels(
        &mut y,
        model_cfg.null_class(),
        cfg.train.label_dropout_prob,
        &mut state.rng,
    );
    let ts: Vec<f64> = (0..n).map(|_| state.rng.next_f64()).collect();
    let eps = TensorValue::randn(x_star.shape().to_vec(), &mut state.rng);
    let x_t = interpolate_batch(&sched, &x_star, &eps, &ts)?;

    let out = forward(&model_cfg, &state.params, &x_t, &ts, &y)?;

    let l_fm = named_component(
        "l_fm",
        flow_matching_loss_batch(&sched, &out.v_pred, &x_star, &eps, &ts),
    )?;
    let l_fm_val = finite_or_halt("l_fm", l_fm.item()?)?;

    let mut l_align_node = None;
    let mut l_align_val = 0.0;
    if cfg.train.alignment {
        let encoder = state.encoder.as_ref().expect("alignment state");
        let projector = state.projector.as_ref().expect("alignment state");
        let clean_tokens = match &model_cfg.layout {
            DataLayout::Points { dim } => x_star.reshape(vec![n, 1, *dim])?,
            DataLayout::Grid { .. } => patchify(&x_star, model_cfg.patch_size)?,
        };
        let targets = encoder.encode(&clean_tokens)?;
        let h = &out.features[cfg.train.align_depth];
        let l_align = named_component(
            "l_align",
            alignment_loss(h, &targets, projector, cfg.diversity.eps),
        )?;
        l_align_val = finite_or_halt("l_align", l_align.item()?)?;
        l_align_node = Some(l_align);
    }

    let mut div_node = None;
    let (mut l_orth, mut l_mi, mut l_disp, mut l_div, mut w) = (0.0, 0.0, 0.0, 0.0, 0.0);
    if cfg.train.diversity {
        let pairs = state.pairs.as_ref().expect("diversity state");
        let div = named_component(
            "l_div",
            diversity_loss(&out.features, &cfg.diversity, pairs),
        )?;
        l_orth = finite_or_halt("l_orth", div.orth.item()?)?;
        l_mi = finite_or_halt("l_mi", div.mi.item()?)?;
        l_disp = finite_or_halt("l_disp", div.disp.item()?)?;
        l_div = finite_or_halt("l_div", div.total.item()?)?;
        w = adaptive_weight(l_div, cfg.diversity.adaptive_lo, cfg.diversity.adaptive_hi);
        div_node = Some(div.total);
    }

    let total = total_loss(
        &l_fm,
        l_align_node.as_ref().map(|l| (l, cfg.train.lambda_align)),
        div_node.as_ref().map(|l| (l, w)),
    )?;
    let l_total = finite_or_halt("l_total", total.item()?)?;

    let grads = named_component("backward", backward(&total))?;
    adamw_step(state, &grads, &cfg.train)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        l_fm: l_fm_val,
        l_orth,
        l_mi,
        l_disp,
        l_div,
        w,
        l_align: l_align_val,
        l_total,
        wallclock_ms: started.elapsed().as_millis() as u64,
    })
}

/// Bias-corrected Adam update with decoupled weight decay. Zero decay makes
/// this plain Adam.
pub fn adamw_step(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    let t = (state.step + 1) as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let mut entries = state.params.visit_mut();
    if let Some(p) = state.projector.as_mut() {
        entries.extend(p.visit_mut());
    }
    if entries.len() != state.moments.m.len() {
        return Err(Error::Numeric(format!(
            "moment count {} does not match trainable count {}",
            state.moments.m.len(),
            entries.len()
        )));
    }

    for (idx, (name, tensor)) in entries.into_iter().enumerate() {
        let numel = tensor.numel();
        let zero;
        let g: &[f64] = match grads.get(tensor) {
            Some(g) => g,
            None => {
                zero = vec![0.0; numel];
                &zero
            }
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
        let m = &mut state.moments.m[idx];
        let v = &mut state.moments.v[idx];
        let theta = tensor.data();
        let mut updated = Vec::with_capacity(numel);
        for j in 0..numel {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            let step = m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * theta[j];
            updated.push(theta[j] - cfg.learning_rate * step);
        }
        *tensor = TensorValue::param(tensor.shape().to_vec(), updated)?;
    }
    Ok(())
}

// ── checkpoint persistence ─────────────────────────────────────────────────

/// Writes the full training state (parameters, both moment sets, step, rng)
/// into a DDIT1 container.
pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut owned: Vec<(String, TensorValue)> = Vec::new();
    for (name, t) in state.params.visit() {
        owned.push((name, t.clone()));
    }
    if let Some(p) = &state.projector {
        for (name, t) in p.visit() {
            owned.push((name, t.clone()));
        }
    }
    if let Some(e) = &state.encoder {
        for (name, t) in e.visit() {
            owned.push((name, t.clone()));
        }
    }
    let trainable = state.trainable_names();
    for (idx, name) in trainable.iter().enumerate() {
        let shape = owned[idx].1.shape().to_vec();
        owned.push((
            format!("adam_m.{name}"),
            TensorValue::new(shape.clone(), state.moments.m[idx].clone())?,
        ));
        owned.push((
            format!("adam_v.{name}"),
            TensorValue::new(shape, state.moments.v[idx].clone())?,
        ));
    }
    let refs: Vec<(String, &TensorValue)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, cfg, state.step, &state.rng.to_hex(), None, &refs)
}

/// Rebuilds a training state from a checkpoint, bit for bit.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let container = Container::read(path)?;
    let cfg = container.manifest.config.clone();
    cfg.validate()?;
    let mut state = TrainState::new(&cfg)?;

    let fill = |t: &mut TensorValue, name: &str| -> Result<()> {
        let loaded = container.tensor(name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::MalformedManifest(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded.detach_as_param();
        Ok(())
    };
    for (name, t) in state.params.visit_mut() {
        fill(t, &name)?;
    }
    if let Some(p) = state.projector.as_mut() {
        for (name, t) in p.visit_mut() {
            fill(t, &name)?;
        }
    }
    if let Some(e) = state.encoder.as_mut() {
        for (name, t) in e.visit_mut() {
            let loaded = container.tensor(&name)?;
            *t = loaded.detach(); // encoder stays frozen
        }
    }
    let names = state.trainable_names();
    for (idx, name) in names.iter().enumerate() {
        state.moments.m[idx] = container.tensor(&format!("adam_m.{name}"))?.data().to_vec();
        state.moments.v[idx] = container.tensor(&format!("adam_v.{name}"))?.data().to_vec();
    }
    state.step = container.manifest.step;
    state.rng = Rng::from_hex(&container.manifest.rng)?;
    Ok((state, cfg))
}

// ── training loop ──────────────────────────────────────────────────────────

pub fn checkpoint_path(out_dir: &Path, step: u64) -> std::path::PathBuf {
    out_dir.join(format!("ckpt_{step:07}.ddit"))
}

/// Runs training to `total_steps`, writing checkpoints at the configured
/// interval and metrics as JSON lines. Returns the final state.
pub fn run_training(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<TrainState> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(ckpt) => {
            let (state, ckpt_cfg) = load_checkpoint(ckpt)?;
            // the run is defined by the checkpoint's config
            let _ = ckpt_cfg;
            state
        }
        None => TrainState::new(cfg)?,
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(&metrics_path)?,
    );

    if resume.is_none() {
        save_checkpoint(&state, cfg, &checkpoint_path(out_dir, 0))?;
    }
    let mut last_saved = state.step;
    while state.step < cfg.train.total_steps {
        let metrics = train_step(&mut state, cfg)?;
        serde_json::to_writer(&mut metrics_file, &metrics)?;
        metrics_file.write_all(b"\n")?;
        if !quiet && metrics.step % cfg.train.log_interval == 0 {
            eprintln!(
                "step {:>7}  l_fm {:.5}  l_div {:.5}  w {:.3}  l_total {:.5}",
                metrics.step, metrics.l_fm, metrics.l_div, metrics.w, metrics.l_total
            );
        }
        if metrics.step % cfg.train.checkpoint_interval == 0 {
            save_checkpoint(&state, cfg, &checkpoint_path(out_dir, metrics.step))?;
            last_saved = metrics.step;
        }
    }
    metrics_file.flush()?;
    if last_saved != state.step {
        save_checkpoint(&state, cfg, &checkpoint_path(out_dir, state.step))?;
    }
    Ok(state)
}
