//! Training losses: flow matching, the three-part representation-diversity
//! loss with its adaptive weight, and the optional projection-alignment loss
//! against frozen synthetic targets.
//!
//! Diversity losses operate on the per-block feature stack captured during
//! the training forward pass, restricted to a seeded subset of blocks; all
//! unordered pairs among the selected blocks are used. Pair iteration is
//! internally sorted, so loss values are independent of pair-list order.

use crate::error::{Error, Result};
use crate::interpolant::{velocity_target_batch, Schedule};
use crate::model::LinearParams;
use crate::tensor::{Rng, TensorValue};
use serde::{Deserialize, Serialize};

// ── configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    pub lambda_orth: f64,
    pub lambda_mi: f64,
    pub lambda_disp: f64,
    /// Adaptive-weight thresholds: w = 1 above `adaptive_hi`, 0 at or below
    /// `adaptive_lo`, `(l − lo)/0.5` between.
    pub adaptive_lo: f64,
    pub adaptive_hi: f64,
    /// How many blocks participate in the loss (clamped to the stack depth).
    pub layer_subset_size: usize,
    pub eps: f64,
    /// Seed for the once-per-run block selection.
    pub selection_seed: u64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            lambda_orth: 0.33,
            lambda_mi: 0.33,
            lambda_disp: 0.33,
            adaptive_lo: 0.1,
            adaptive_hi: 0.5,
            layer_subset_size: 10,
            eps: 1e-8,
            selection_seed: 0,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_orth < 0.0 || self.lambda_mi < 0.0 || self.lambda_disp < 0.0 {
            return Err(Error::Config("diversity lambdas must be ≥ 0".into()));
        }
        if !(0.0 <= self.adaptive_lo && self.adaptive_lo < self.adaptive_hi) {
            return Err(Error::Config(
                "diversity adaptive range needs 0 ≤ lo < hi".into(),
            ));
        }
        if self.layer_subset_size < 2 {
            return Err(Error::Config(
                "diversity.layer_subset_size must be ≥ 2 (at least one pair)".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("diversity.eps must be > 0".into()));
        }
        Ok(())
    }
}

// ── block-pair selection ───────────────────────────────────────────────────

/// Selected block indices and all unordered pairs among them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    /// Sorted distinct block indices.
    pub blocks: Vec<usize>,
    /// Pairs with `i < j`, sorted.
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    /// Selects `min(subset, num_blocks)` blocks uniformly without
    /// replacement (seed-stable), then takes all pairs among them.
    pub fn select(num_blocks: usize, subset: usize, seed: u64) -> Result<PairSet> {
        let k = subset.min(num_blocks);
        if k < 2 {
            return Err(Error::InvalidArgument(
                "pair selection needs at least two blocks".into(),
            ));
        }
        let mut rng = Rng::with_stream(seed, 0x9a1f);
        let blocks = rng.choose_indices(num_blocks, k);
        Ok(Self::from_blocks(blocks))
    }

    /// All `C(L,2)` pairs over the full stack.
    pub fn all(num_blocks: usize) -> Result<PairSet> {
        if num_blocks < 2 {
            return Err(Error::InvalidArgument(
                "pair selection needs at least two blocks".into(),
            ));
        }
        Ok(Self::from_blocks((0..num_blocks).collect()))
    }

    fn from_blocks(blocks: Vec<usize>) -> PairSet {
        let mut pairs = Vec::with_capacity(blocks.len() * (blocks.len() - 1) / 2);
        for a in 0..blocks.len() {
            for b in a + 1..blocks.len() {
                pairs.push((blocks[a], blocks[b]));
            }
        }
        PairSet { blocks, pairs }
    }

    /// Builds from an explicit pair list (used by tests); derives the block
    /// set and validates `i < j`.
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Result<PairSet> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("pair set must be nonempty".into()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= j) {
            return Err(Error::InvalidArgument(format!(
                "pair ({i},{j}) violates i < j"
            )));
        }
        let mut blocks: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        blocks.sort_unstable();
        blocks.dedup();
        Ok(PairSet { blocks, pairs })
    }

    fn sorted_pairs(&self) -> Vec<(usize, usize)> {
        let mut ps = self.pairs.clone();
        ps.sort_unstable();
        ps
    }

    fn check_against(&self, num_blocks: usize) -> Result<()> {
        if let Some(&b) = self.blocks.iter().find(|&&b| b >= num_blocks) {
            return Err(Error::InvalidArgument(format!(
                "pair set references block {b} of a {num_blocks}-block stack"
            )));
        }
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument("pair set must be nonempty".into()));
        }
        Ok(())
    }
}

// ── diversity components ───────────────────────────────────────────────────

/// Token-wise mean feature over the batch and token axes: `[n,t,d] → [d]`.
pub fn block_mean(f: &TensorValue) -> Result<TensorValue> {
    if f.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "block_mean",
            details: format!("expected [n,t,d], got {:?}", f.shape()),
        });
    }
    f.mean_axes(&[0, 1])
}

/// Mean pairwise cosine similarity of block-mean features; in [−1, 1].
pub fn orth_loss(features: &[TensorValue], pairs: &PairSet, eps: f64) -> Result<TensorValue> {
    pairs.check_against(features.len())?;
    let mut means: Vec<Option<TensorValue>> = vec![None; features.len()];
    for &b in &pairs.blocks {
        means[b] = Some(block_mean(&features[b])?);
    }
    let mut acc: Option<TensorValue> = None;
    for (i, j) in pairs.sorted_pairs() {
        let c = means[i]
            .as_ref()
            .unwrap()
            .cosine_similarity(means[j].as_ref().unwrap(), eps)?;
        acc = Some(match acc {
            Some(a) => a.add(&c)?,
            None => c,
        });
    }
    acc.unwrap().mul_scalar(1.0 / pairs.pairs.len() as f64)
}

/// Proxy mutual information: mean over pairs and tokens of the dot product
/// of ℓ2-normalized matched token features; in [−1, 1].
pub fn mi_loss(features: &[TensorValue], pairs: &PairSet, eps: f64) -> Result<TensorValue> {
    pairs.check_against(features.len())?;
    let mut normed: Vec<Option<TensorValue>> = vec![None; features.len()];
    for &b in &pairs.blocks {
        normed[b] = Some(features[b].l2_normalize(eps)?);
    }
    let mut acc: Option<TensorValue> = None;
    for (i, j) in pairs.sorted_pairs() {
        let a = normed[i].as_ref().unwrap();
        let b = normed[j].as_ref().unwrap();
        let per_token = a.mul(b)?.sum_axes(&[2])?; // [n, t]
        let m = per_token.mean_all()?;
        acc = Some(match acc {
            Some(s) => s.add(&m)?,
            None => m,
        });
    }
    acc.unwrap().mul_scalar(1.0 / pairs.pairs.len() as f64)
}

/// Feature dispersion: for each participating block, flatten to [(nt), d],
/// ℓ2-normalize each dimension across the nt samples, take the per-dimension
/// signed mean; average those over blocks into `a`; scale by
/// `max_k |a_k| + eps`; return the negated variance of the result (≤ 0).
pub fn disp_loss(features: &[TensorValue], pairs: &PairSet, eps: f64) -> Result<TensorValue> {
    pairs.check_against(features.len())?;
    let probe = &features[pairs.blocks[0]];
    if probe.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "disp_loss",
            details: format!("expected [n,t,d] features, got {:?}", probe.shape()),
        });
    }
    let (n, t, d) = (probe.shape()[0], probe.shape()[1], probe.shape()[2]);
    if d < 2 {
        return Err(Error::InvalidArgument(
            "disp_loss needs feature dim ≥ 2 (variance undefined)".into(),
        ));
    }
    if n * t < 2 {
        return Err(Error::InvalidArgument(
            "disp_loss needs at least two token instances".into(),
        ));
    }
    let mut acc: Option<TensorValue> = None;
    for &b in &pairs.blocks {
        let per_dim = features[b]
            .reshape(vec![n * t, d])?
            .transpose(0, 1)? // [d, nt]: one row per dimension
            .l2_normalize(eps)?
            .mean_axes(&[1])?; // signed mean per dimension
        acc = Some(match acc {
            Some(s) => s.add(&per_dim)?,
            None => per_dim,
        });
    }
    let a = acc.unwrap().mul_scalar(1.0 / pairs.blocks.len() as f64)?;
    let scale = a.abs()?.max_all()?.add_scalar(eps)?;
    let a_prime = a.div(&scale)?;
    let centered = a_prime.sub(&a_prime.mean_all()?)?;
    centered.square()?.mean_all()?.neg()
}

pub struct DiversityOutput {
    pub total: TensorValue,
    pub orth: TensorValue,
    pub mi: TensorValue,
    pub disp: TensorValue,
}

/// Weighted aggregate `λ_orth·L_orth + λ_MI·L_MI + λ_disp·L_disp`, with the
/// components returned for logging.
pub fn diversity_loss(
    features: &[TensorValue],
    cfg: &DiversityConfig,
    pairs: &PairSet,
) -> Result<DiversityOutput> {
    let orth = orth_loss(features, pairs, cfg.eps)?;
    let mi = mi_loss(features, pairs, cfg.eps)?;
    let disp = disp_loss(features, pairs, cfg.eps)?;
    let total = orth
        .mul_scalar(cfg.lambda_orth)?
        .add(&mi.mul_scalar(cfg.lambda_mi)?)?
        .add(&disp.mul_scalar(cfg.lambda_disp)?)?;
    Ok(DiversityOutput {
        total,
        orth,
        mi,
        disp,
    })
}

/// Piecewise schedule on the diversity-loss value. The 0.5 divisor is fixed;
/// only the thresholds generalize. Plain f64 in, plain f64 out: no gradient
/// flows through it.
pub fn adaptive_weight(l_div: f64, lo: f64, hi: f64) -> f64 {
    if l_div > hi {
        1.0
    } else if l_div > lo {
        (l_div - lo) / 0.5
    } else {
        0.0
    }
}

// ── flow matching ──────────────────────────────────────────────────────────

/// MSE between the v-prediction and `α̇_t x_* + σ̇_t ε` at a single time.
pub fn flow_matching_loss(
    sched: &impl Schedule,
    v_pred: &TensorValue,
    x_star: &TensorValue,
    eps: &TensorValue,
    t: f64,
) -> Result<TensorValue> {
    let target = sched.velocity_target(x_star, eps, t)?;
    mse(v_pred, &target)
}

/// Batched variant with one time per sample.
pub fn flow_matching_loss_batch(
    sched: &impl Schedule,
    v_pred: &TensorValue,
    x_star: &TensorValue,
    eps: &TensorValue,
    ts: &[f64],
) -> Result<TensorValue> {
    let target = velocity_target_batch(sched, x_star, eps, ts)?;
    mse(v_pred, &target)
}

fn mse(pred: &TensorValue, target: &TensorValue) -> Result<TensorValue> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "flow_matching_loss",
            details: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    pred.sub(target)?.square()?.mean_all()
}

// ── alignment against frozen synthetic targets ─────────────────────────────

/// Trainable three-layer SiLU projector mapping block features to the target
/// space.
#[derive(Debug, Clone)]
pub struct ProjectorParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

impl ProjectorParams {
    pub fn init(model_dim: usize, target_dim: usize, rng: &mut Rng) -> ProjectorParams {
        ProjectorParams {
            l1: LinearParams::xavier(model_dim, model_dim, rng),
            l2: LinearParams::xavier(model_dim, model_dim, rng),
            l3: LinearParams::xavier(model_dim, target_dim, rng),
        }
    }

    pub fn apply(&self, h: &TensorValue) -> Result<TensorValue> {
        self.l3
            .apply(&self.l2.apply(&self.l1.apply(h)?.silu()?)?.silu()?)
    }

    pub fn visit(&self) -> Vec<(String, &TensorValue)> {
        vec![
            ("proj.l1.w".into(), &self.l1.w),
            ("proj.l1.b".into(), &self.l1.b),
            ("proj.l2.w".into(), &self.l2.w),
            ("proj.l2.b".into(), &self.l2.b),
            ("proj.l3.w".into(), &self.l3.w),
            ("proj.l3.b".into(), &self.l3.b),
        ]
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut TensorValue)> {
        vec![
            ("proj.l1.w".into(), &mut self.l1.w),
            ("proj.l1.b".into(), &mut self.l1.b),
            ("proj.l2.w".into(), &mut self.l2.w),
            ("proj.l2.b".into(), &mut self.l2.b),
            ("proj.l3.w".into(), &mut self.l3.w),
            ("proj.l3.b".into(), &mut self.l3.b),
        ]
    }
}

/// Frozen randomly-initialized token-wise encoder standing in for an external
/// pretrained model; its two linear layers never receive gradients.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl SyntheticEncoder {
    pub fn init(token_dim: usize, target_dim: usize, rng: &mut Rng) -> SyntheticEncoder {
        let mut enc = SyntheticEncoder {
            l1: LinearParams::xavier(token_dim, target_dim, rng),
            l2: LinearParams::xavier(target_dim, target_dim, rng),
        };
        enc.l1.w = enc.l1.w.detach();
        enc.l1.b = enc.l1.b.detach();
        enc.l2.w = enc.l2.w.detach();
        enc.l2.b = enc.l2.b.detach();
        enc
    }

    /// Frozen targets `y_*` for clean data tokens `[n,t,token_dim]`.
    pub fn encode(&self, tokens: &TensorValue) -> Result<TensorValue> {
        self.l2.apply(&self.l1.apply(tokens)?.silu()?)
    }

    pub fn visit(&self) -> Vec<(String, &TensorValue)> {
        vec![
            ("enc.l1.w".into(), &self.l1.w),
            ("enc.l1.b".into(), &self.l1.b),
            ("enc.l2.w".into(), &self.l2.w),
            ("enc.l2.b".into(), &self.l2.b),
        ]
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut TensorValue)> {
        vec![
            ("enc.l1.w".into(), &mut self.l1.w),
            ("enc.l1.b".into(), &mut self.l1.b),
            ("enc.l2.w".into(), &mut self.l2.w),
            ("enc.l2.b".into(), &mut self.l2.b),
        ]
    }
}

/// Negative mean token-wise cosine between targets and projected features.
pub fn alignment_cosine_loss(
    projected: &TensorValue,
    targets: &TensorValue,
    eps: f64,
) -> Result<TensorValue> {
    if projected.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "alignment_loss",
            details: format!(
                "projected {:?} vs targets {:?} (token counts must match)",
                projected.shape(),
                targets.shape()
            ),
        });
    }
    targets
        .cosine_similarity(projected, eps)?
        .mean_all()?
        .neg()
}

/// Full alignment loss: project the block-`depth` hidden state and compare to
/// frozen targets.
pub fn alignment_loss(
    h_at_depth: &TensorValue,
    targets: &TensorValue,
    projector: &ProjectorParams,
    eps: f64,
) -> Result<TensorValue> {
    alignment_cosine_loss(&projector.apply(h_at_depth)?, targets, eps)
}

/// Total training objective: `L_fm + λ_align·L_align + w·L_div`, where `w`
/// is the already-detached adaptive weight.
pub fn total_loss(
    l_fm: &TensorValue,
    align: Option<(&TensorValue, f64)>,
    div: Option<(&TensorValue, f64)>,
) -> Result<TensorValue> {
    let mut total = l_fm.clone();
    if let Some((l_align, lambda)) = align {
        total = total.add(&l_align.mul_scalar(lambda)?)?;
    }
    if let Some((l_div, w)) = div {
        total = total.add(&l_div.mul_scalar(w)?)?;
    }
    Ok(total)
}
