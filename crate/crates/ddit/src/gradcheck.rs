//! Finite-difference verification of every loss component through the full
//! model, on a deliberately tiny configuration.
//!
//! Parameters are re-randomized before checking (the adaLN-zero and output
//! projections are zero at init, which would make both sides of the
//! comparison vanish), and the adaptive diversity weight is frozen at its
//! base value: it is a stop-gradient schedule, so the differenced function
//! must hold it fixed too.

use crate::config::{ModelSection, RunConfig};
use crate::data::{DataLayout, DataMode, DatasetSpec};
use crate::error::{Error, Result};
use crate::interpolant::{interpolate_batch, LinearSchedule};
use crate::losses::{
    adaptive_weight, alignment_loss, disp_loss, diversity_loss, flow_matching_loss_batch, mi_loss,
    orth_loss, total_loss, PairSet, ProjectorParams,
};
use crate::model::{forward, patchify, ModelConfig, ModelParams};
use crate::tensor::{backward, Rng, TensorValue};
use crate::trainer::TrainState;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Size cap: gradchecking is quadratic-ish in model size, so oversize
/// configurations are rejected rather than silently slow.
pub const MAX_BLOCKS: usize = 4;
pub const MAX_HIDDEN: usize = 16;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

/// The built-in tiny configuration: 4 blocks, width 16, 4 tokens, batch 2,
/// with long residuals, diversity, and alignment all exercised.
pub fn default_tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelSection {
            num_blocks: 4,
            hidden_dim: 16,
            num_heads: 4,
            patch_size: 4,
            use_long_residual: true,
            mlp_ratio: 4,
        },
        ..RunConfig::default()
    };
    cfg.data = DatasetSpec {
        mode: DataMode::Grid,
        num_classes: 2,
        ..DatasetSpec::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.alignment = true;
    cfg.train.align_depth = 1;
    cfg.train.align_target_dim = 8;
    cfg.train.diversity = true;
    cfg.diversity.layer_subset_size = 4;
    cfg.validate().expect("tiny config is valid");
    cfg
}

/// Relative error with a unit floor; for gradients below 1 this is an
/// absolute criterion, far above the ~1e-10 noise of central differences.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Component {
    FlowMatching,
    Orth,
    Mi,
    Disp,
    Alignment,
    Total,
}

impl Component {
    const ALL: [Component; 6] = [
        Component::FlowMatching,
        Component::Orth,
        Component::Mi,
        Component::Disp,
        Component::Alignment,
        Component::Total,
    ];

    fn name(&self) -> &'static str {
        match self {
            Component::FlowMatching => "flow_matching",
            Component::Orth => "orth",
            Component::Mi => "mi",
            Component::Disp => "disp",
            Component::Alignment => "alignment",
            Component::Total => "total",
        }
    }

    fn uses_projector(&self) -> bool {
        matches!(self, Component::Alignment | Component::Total)
    }
}

struct EvalCtx {
    model_cfg: ModelConfig,
    x_t: TensorValue,
    ts: Vec<f64>,
    y: Vec<usize>,
    x_star: TensorValue,
    eps: TensorValue,
    targets: TensorValue,
    pairs: PairSet,
    cfg: RunConfig,
    /// Adaptive weight frozen at the base parameters.
    w_frozen: f64,
}

fn component_loss(
    component: Component,
    ctx: &EvalCtx,
    params: &ModelParams,
    projector: &ProjectorParams,
) -> Result<TensorValue> {
    let sched = LinearSchedule;
    let out = forward(&ctx.model_cfg, params, &ctx.x_t, &ctx.ts, &ctx.y)?;
    let eps_guard = ctx.cfg.diversity.eps;
    match component {
        Component::FlowMatching => {
            flow_matching_loss_batch(&sched, &out.v_pred, &ctx.x_star, &ctx.eps, &ctx.ts)
        }
        Component::Orth => orth_loss(&out.features, &ctx.pairs, eps_guard),
        Component::Mi => mi_loss(&out.features, &ctx.pairs, eps_guard),
        Component::Disp => disp_loss(&out.features, &ctx.pairs, eps_guard),
        Component::Alignment => alignment_loss(
            &out.features[ctx.cfg.train.align_depth],
            &ctx.targets,
            projector,
            eps_guard,
        ),
        Component::Total => {
            let l_fm =
                flow_matching_loss_batch(&sched, &out.v_pred, &ctx.x_star, &ctx.eps, &ctx.ts)?;
            let l_align = alignment_loss(
                &out.features[ctx.cfg.train.align_depth],
                &ctx.targets,
                projector,
                eps_guard,
            )?;
            let div = diversity_loss(&out.features, &ctx.cfg.diversity, &ctx.pairs)?;
            total_loss(
                &l_fm,
                Some((&l_align, ctx.cfg.train.lambda_align)),
                Some((&div.total, ctx.w_frozen)),
            )
        }
    }
}

fn randomize_params(params: &mut ModelParams, rng: &mut Rng) {
    for (_, t) in params.visit_mut() {
        let n = t.numel();
        *t = TensorValue::param(t.shape().to_vec(), rng.fill_uniform(n, -0.3, 0.3))
            .expect("finite init");
    }
}

fn randomize_projector(proj: &mut ProjectorParams, rng: &mut Rng) {
    for (_, t) in proj.visit_mut() {
        let n = t.numel();
        *t = TensorValue::param(t.shape().to_vec(), rng.fill_uniform(n, -0.3, 0.3))
            .expect("finite init");
    }
}

fn perturbed_params(params: &ModelParams, tensor_idx: usize, elem: usize, delta: f64) -> ModelParams {
    let mut copy = params.clone();
    let mut entries = copy.visit_mut();
    let t = &mut entries[tensor_idx].1;
    let mut data = t.data().to_vec();
    data[elem] += delta;
    **t = TensorValue::param(t.shape().to_vec(), data).expect("finite perturbation");
    drop(entries);
    copy
}

fn perturbed_projector(
    proj: &ProjectorParams,
    tensor_idx: usize,
    elem: usize,
    delta: f64,
) -> ProjectorParams {
    let mut copy = proj.clone();
    let mut entries = copy.visit_mut();
    let t = &mut entries[tensor_idx].1;
    let mut data = t.data().to_vec();
    data[elem] += delta;
    **t = TensorValue::param(t.shape().to_vec(), data).expect("finite perturbation");
    drop(entries);
    copy
}

/// Runs the finite-difference suite. For each of `draws` random
/// configurations, every trainable tensor is probed at up to
/// `entries_per_tensor` seeded positions per loss component. `corrupt`
/// deliberately biases one analytic gradient (negative control).
pub fn run_gradcheck(
    cfg: &RunConfig,
    draws: usize,
    entries_per_tensor: usize,
    corrupt: bool,
) -> Result<Vec<ComponentReport>> {
    cfg.validate()?;
    if cfg.model.num_blocks > MAX_BLOCKS || cfg.model.hidden_dim > MAX_HIDDEN {
        return Err(Error::Config(format!(
            "gradcheck config too large: need num_blocks ≤ {MAX_BLOCKS} and hidden_dim ≤ {MAX_HIDDEN}"
        )));
    }
    if !cfg.train.alignment || !cfg.train.diversity {
        return Err(Error::Config(
            "gradcheck needs alignment and diversity enabled so every component is live".into(),
        ));
    }
    let sched = LinearSchedule;
    let mut reports: Vec<ComponentReport> = Component::ALL
        .iter()
        .map(|c| ComponentReport {
            name: c.name(),
            max_rel_err: 0.0,
            entries_checked: 0,
        })
        .collect();

    for draw in 0..draws {
        let mut rng = Rng::with_stream(cfg.train.seed ^ 0x6eadc0de, draw as u64);
        let state = TrainState::new(cfg)?;
        let model_cfg = state.model_cfg.clone();
        let mut params = state.params.clone();
        let mut projector = state.projector.clone().expect("alignment enabled");
        let encoder = state.encoder.clone().expect("alignment enabled");
        randomize_params(&mut params, &mut rng);
        randomize_projector(&mut projector, &mut rng);

        let n = cfg.train.batch_size;
        let (x_star, y) = crate::data::sample_batch(&cfg.data, n, &mut rng)?;
        let ts: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.next_f64()).collect();
        let eps = TensorValue::randn(x_star.shape().to_vec(), &mut rng);
        let x_t = interpolate_batch(&sched, &x_star, &eps, &ts)?;
        let clean_tokens = match &model_cfg.layout {
            DataLayout::Points { dim } => x_star.reshape(vec![n, 1, *dim])?,
            DataLayout::Grid { .. } => patchify(&x_star, model_cfg.patch_size)?,
        };
        let targets = encoder.encode(&clean_tokens)?;
        let pairs = state.pairs.clone().expect("diversity enabled");

        let mut ctx = EvalCtx {
            model_cfg,
            x_t,
            ts,
            y,
            x_star,
            eps,
            targets,
            pairs,
            cfg: cfg.clone(),
            w_frozen: 0.0,
        };
        let base_div = diversity_loss(
            &forward(&ctx.model_cfg, &params, &ctx.x_t, &ctx.ts, &ctx.y)?.features,
            &cfg.diversity,
            &ctx.pairs,
        )?;
        ctx.w_frozen = adaptive_weight(
            base_div.total.item()?,
            cfg.diversity.adaptive_lo,
            cfg.diversity.adaptive_hi,
        );

        for (ci, component) in Component::ALL.iter().enumerate() {
            let loss = component_loss(*component, &ctx, &params, &projector)?;
            let grads = backward(&loss)?;

            let model_entries = params.visit();
            let proj_entries = projector.visit();
            let num_model = model_entries.len();
            let groups: Vec<(usize, &TensorValue)> = model_entries
                .iter()
                .map(|(_, t)| *t)
                .chain(
                    component
                        .uses_projector()
                        .then(|| proj_entries.iter().map(|(_, t)| *t))
                        .into_iter()
                        .flatten(),
                )
                .enumerate()
                .collect();

            let mut corrupt_pending = corrupt && ci == 0;
            for (tensor_idx, tensor) in groups {
                let numel = tensor.numel();
                let zeros = vec![0.0; numel];
                let analytic: &[f64] = grads.get(tensor).unwrap_or(&zeros);
                let count = entries_per_tensor.min(numel);
                let picks = if count == numel {
                    (0..numel).collect::<Vec<_>>()
                } else {
                    rng.choose_indices(numel, count)
                };
                for elem in picks {
                    let eval = |delta: f64| -> Result<f64> {
                        let (p, pr);
                        if tensor_idx < num_model {
                            p = perturbed_params(&params, tensor_idx, elem, delta);
                            pr = projector.clone();
                        } else {
                            p = params.clone();
                            pr = perturbed_projector(
                                &projector,
                                tensor_idx - num_model,
                                elem,
                                delta,
                            );
                        }
                        component_loss(*component, &ctx, &p, &pr)?.item()
                    };
                    let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                    let mut a = analytic[elem];
                    if corrupt_pending {
                        a += 0.05; // negative-control hook
                        corrupt_pending = false;
                    }
                    let e = rel_err(a, fd);
                    if e > reports[ci].max_rel_err {
                        reports[ci].max_rel_err = e;
                    }
                    reports[ci].entries_checked += 1;
                }
            }
        }
    }
    Ok(reports)
}
