//! Command implementations behind the `ddit` binary. Every command is
//! deterministic given its flags and config: identical invocations produce
//! byte-identical outputs, wallclock log fields aside.

use crate::analysis::{similarity_matrix, write_feature_dump, write_matrix_csv, KernelKind};
use crate::config::RunConfig;
use crate::data::{sample_batch, DataLayout};
use crate::error::{Error, Result};
use crate::gradcheck::{default_tiny_config, run_gradcheck, GRADCHECK_TOL};
use crate::interpolant::{interpolate_batch, LinearSchedule};
use crate::model::forward;
use crate::sampler::{
    sample, write_samples_container, write_samples_csv, ModelField, SampleMode,
};
use crate::tensor::{Rng, TensorValue};
use crate::trainer::{load_checkpoint, run_training};
use std::path::{Path, PathBuf};

/// Rng stream id for the analyze command's fresh batch.
const ANALYZE_STREAM: u64 = 0xA11;

pub fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let state = run_training(&cfg, out, resume, false)?;
    eprintln!(
        "trained to step {} ({} parameters); outputs in {}",
        state.step,
        state.params.num_params(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub mode: Option<SampleMode>,
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub class: Option<usize>,
    pub uncond: bool,
    pub num_samples: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Sampling-time knobs come from the checkpoint's config, with flags
/// overriding individually.
pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let (state, run_cfg) = load_checkpoint(&args.ckpt)?;
    let model_cfg = state.model_cfg.clone();
    let mut sample_cfg = run_cfg.sample.clone();
    if let Some(mode) = args.mode {
        sample_cfg.mode = mode;
    }
    if let Some(steps) = args.steps {
        sample_cfg.num_steps = steps;
    }
    if let Some(g) = args.cfg_scale {
        sample_cfg.cfg_scale = g;
    }
    if args.uncond {
        sample_cfg.class_id = None;
    } else if let Some(c) = args.class {
        if c >= model_cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {c} out of range for {} classes",
                model_cfg.num_classes
            )));
        }
        sample_cfg.class_id = Some(c);
    }
    if let Some(n) = args.num_samples {
        sample_cfg.num_samples = n;
    }
    if let Some(s) = args.seed {
        sample_cfg.seed = s;
    }
    sample_cfg.validate()?;

    let field = ModelField::new(
        &model_cfg,
        &state.params,
        sample_cfg.class_id,
        sample_cfg.cfg_scale,
    )?;
    let samples = sample(&field, &LinearSchedule, &sample_cfg)?;

    match model_cfg.layout {
        DataLayout::Points { .. } => {
            let class_column = sample_cfg.class_id.unwrap_or(model_cfg.null_class());
            write_samples_csv(&args.out, &samples, class_column)?;
        }
        DataLayout::Grid { .. } => {
            write_samples_container(&args.out, &run_cfg, &samples)?;
        }
    }
    eprintln!(
        "wrote {} samples ({} steps, {:?}) to {}",
        sample_cfg.num_samples,
        sample_cfg.num_steps,
        sample_cfg.mode,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub ckpt: PathBuf,
    pub t: f64,
    pub batch: usize,
    pub kernel: String,
    pub out: PathBuf,
    pub dump_features: Option<PathBuf>,
    pub max_rows: usize,
}

/// One noisy forward pass at timestep `t` on fresh data; writes the L×L CKA
/// matrix as CSV and optionally dumps the captured features.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    if !(args.t > 0.0 && args.t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "analysis timestep must be in (0,1], got {}",
            args.t
        )));
    }
    if args.batch == 0 {
        return Err(Error::InvalidArgument("batch must be ≥ 1".into()));
    }
    let kernel = KernelKind::parse(&args.kernel)?;
    let (state, run_cfg) = load_checkpoint(&args.ckpt)?;
    let model_cfg = state.model_cfg.clone();
    let params = state.params.frozen();

    let mut rng = Rng::with_stream(run_cfg.data.seed, ANALYZE_STREAM);
    let (x_star, y) = sample_batch(&run_cfg.data, args.batch, &mut rng)?;
    let eps = TensorValue::randn(x_star.shape().to_vec(), &mut rng);
    let ts = vec![args.t; args.batch];
    let x_t = interpolate_batch(&LinearSchedule, &x_star, &eps, &ts)?;
    let out = forward(&model_cfg, &params, &x_t, &ts, &y)?;

    let matrix = similarity_matrix(
        &out.features,
        &kernel,
        args.max_rows,
        run_cfg.data.seed,
        state.step,
        args.t,
    )?;
    write_matrix_csv(&args.out, &matrix)?;
    if let Some(dump) = &args.dump_features {
        write_feature_dump(dump, &run_cfg, &out.features, state.step, args.t)?;
    }
    eprintln!(
        "wrote {}×{} CKA matrix (kernel {}, t={}, step {}) to {}",
        matrix.size,
        matrix.size,
        matrix.kernel,
        args.t,
        state.step,
        args.out.display()
    );
    Ok(())
}

/// Runs the finite-difference suite; prints one line per loss component.
/// Returns whether every component stayed within tolerance.
pub fn cmd_gradcheck(config: Option<&Path>, corrupt: bool) -> Result<bool> {
    let cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => default_tiny_config(),
    };
    let reports = run_gradcheck(&cfg, 5, 4, corrupt)?;
    let mut all_ok = true;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "component {:<14} max rel err {:.3e} over {:>4} entries .. {verdict}",
            r.name, r.max_rel_err, r.entries_checked
        );
        all_ok &= r.passed();
    }
    println!(
        "gradcheck {} (tolerance {GRADCHECK_TOL:.0e})",
        if all_ok { "passed" } else { "FAILED" }
    );
    Ok(all_ok)
}
