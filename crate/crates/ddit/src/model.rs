//! Conditional transformer for v-prediction with adaLN-zero modulation,
//! optional long residual connections, and per-block feature capture.
//!
//! With `use_long_residual` on, block `i`'s output (for `i` in the first half
//! of the stack, 0-indexed) is injected into the input of block `L−1−i`:
//! the two streams are concatenated along channels, layer-normalized over the
//! doubled width, and projected back down by a learned linear map. Every
//! block in the second half of the stack carries exactly one such junction.

use crate::config::ModelSection;
use crate::data::{DataLayout, DatasetSpec};
use crate::error::{Error, Result};
use crate::tensor::{Rng, TensorValue};

/// LayerNorm epsilon used throughout the block stack.
pub const LN_EPS: f64 = 1e-6;

/// Continuous time in [0,1] is scaled by this before the sinusoid, so the
/// embedding resolves small time differences.
const TIME_SCALE: f64 = 1000.0;

// ── configuration ──────────────────────────────────────────────────────────

/// Resolved architecture description: the JSON `model` section plus geometry
/// derived from the data mode.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub use_long_residual: bool,
    pub patch_size: usize,
    /// Real classes; index `num_classes` is the null class used for CFG.
    pub num_classes: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub layout: DataLayout,
}

impl ModelConfig {
    pub fn resolve(section: &ModelSection, data: &DatasetSpec) -> Result<ModelConfig> {
        let layout = data.layout();
        let p = section.patch_size;
        let (token_count, token_dim) = match &layout {
            DataLayout::Points { dim } => (1, *dim),
            DataLayout::Grid {
                channels,
                height,
                width,
            } => {
                if p == 0 || height % p != 0 || width % p != 0 {
                    return Err(Error::Config(format!(
                        "patch size {p} does not divide {height}×{width}"
                    )));
                }
                ((height / p) * (width / p), channels * p * p)
            }
        };
        let cfg = ModelConfig {
            num_blocks: section.num_blocks,
            hidden_dim: section.hidden_dim,
            num_heads: section.num_heads,
            mlp_ratio: section.mlp_ratio,
            use_long_residual: section.use_long_residual,
            patch_size: p,
            num_classes: data.num_classes(),
            token_count,
            token_dim,
            layout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("model.num_blocks must be ≥ 1".into()));
        }
        if self.use_long_residual && self.num_blocks % 2 != 0 {
            return Err(Error::Config(
                "model.num_blocks must be even when use_long_residual (pairing requires it)"
                    .into(),
            ));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("model.hidden_dim must be even".into()));
        }
        if matches!(self.layout, DataLayout::Grid { .. }) && self.hidden_dim % 4 != 0 {
            return Err(Error::Config(
                "grid mode needs hidden_dim divisible by 4 (2-D sin-cos positions)".into(),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("model.mlp_ratio must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Null-class index for classifier-free guidance.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    /// Skip-source indices `0..L/2` when long residuals are on.
    pub fn num_junctions(&self) -> usize {
        if self.use_long_residual {
            self.num_blocks / 2
        } else {
            0
        }
    }

    /// Pairing map: skip source `i` feeds target block `L−1−i`.
    pub fn junction_target(&self, source: usize) -> usize {
        self.num_blocks - 1 - source
    }
}

// ── parameters ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: TensorValue, // [in, out]
    pub b: TensorValue, // [out]
}

impl LinearParams {
    pub(crate) fn zeros(inp: usize, out: usize) -> Self {
        LinearParams {
            w: TensorValue::zeros(vec![inp, out]).detach_as_param(),
            b: TensorValue::zeros(vec![out]).detach_as_param(),
        }
    }

    pub(crate) fn xavier(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        LinearParams {
            w: TensorValue::param(vec![inp, out], rng.fill_uniform(inp * out, -limit, limit))
                .expect("finite init"),
            b: TensorValue::zeros(vec![out]).detach_as_param(),
        }
    }

    pub(crate) fn fan_in_uniform(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let limit = 1.0 / (inp as f64).sqrt();
        LinearParams {
            w: TensorValue::param(vec![inp, out], rng.fill_uniform(inp * out, -limit, limit))
                .expect("finite init"),
            b: TensorValue::zeros(vec![out]).detach_as_param(),
        }
    }

    pub(crate) fn normal(inp: usize, out: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..inp * out).map(|_| std * rng.next_normal()).collect();
        LinearParams {
            w: TensorValue::param(vec![inp, out], data).expect("finite init"),
            b: TensorValue::zeros(vec![out]).detach_as_param(),
        }
    }

    /// `x [..., in] ↦ x·w + b`, flattening leading axes.
    pub fn apply(&self, x: &TensorValue) -> Result<TensorValue> {
        let inp = self.w.shape()[0];
        let out = self.w.shape()[1];
        let rows = x.numel() / inp;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out;
        x.reshape(vec![rows, inp])?
            .matmul(&self.w)?
            .add_bias(&self.b)?
            .reshape(out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub adaln: LinearParams, // D -> 6D, zero-init
    pub qkv: LinearParams,   // D -> 3D
    pub out: LinearParams,   // D -> D
    pub mlp1: LinearParams,  // D -> ratio·D
    pub mlp2: LinearParams,  // ratio·D -> D
}

/// Parameters of one long-residual junction: layer-norm affine over the
/// concatenated 2D channels and the 2D→D fusion projection.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub norm_gain: TensorValue, // [2D]
    pub norm_bias: TensorValue, // [2D]
    pub linear: LinearParams,   // 2D -> D
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub token_embed: LinearParams,
    pub time_mlp1: LinearParams,
    pub time_mlp2: LinearParams,
    pub class_table: TensorValue, // [num_classes+1, D]
    pub blocks: Vec<BlockParams>,
    /// Indexed by skip source; empty unless `use_long_residual`.
    pub fusions: Vec<FusionParams>,
    pub final_adaln: LinearParams, // D -> 2D, zero-init
    pub final_out: LinearParams,   // D -> token_dim, zero-init
}

fn push_lin<'a>(
    out: &mut Vec<(String, &'a TensorValue)>,
    name: String,
    p: &'a LinearParams,
) {
    out.push((format!("{name}.w"), &p.w));
    out.push((format!("{name}.b"), &p.b));
}

fn push_lin_mut<'a>(
    out: &mut Vec<(String, &'a mut TensorValue)>,
    name: String,
    p: &'a mut LinearParams,
) {
    out.push((format!("{name}.w"), &mut p.w));
    out.push((format!("{name}.b"), &mut p.b));
}

impl ModelParams {
    /// Fresh parameters. Attention and MLP weights are Xavier-uniform; the
    /// modulation and output projections are zero (adaLN-zero), so an
    /// untrained model predicts zero velocity; fusion projections are
    /// fan-in-scaled uniform with zero bias.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> ModelParams {
        let d = cfg.hidden_dim;
        let hidden = d * cfg.mlp_ratio;
        let token_embed = LinearParams::xavier(cfg.token_dim, d, rng);
        let time_mlp1 = LinearParams::normal(d, d, 0.02, rng);
        let time_mlp2 = LinearParams::normal(d, d, 0.02, rng);
        let class_rows = cfg.num_classes + 1;
        let table = (0..class_rows * d).map(|_| 0.02 * rng.next_normal()).collect();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                adaln: LinearParams::zeros(d, 6 * d),
                qkv: LinearParams::xavier(d, 3 * d, rng),
                out: LinearParams::xavier(d, d, rng),
                mlp1: LinearParams::xavier(d, hidden, rng),
                mlp2: LinearParams::xavier(hidden, d, rng),
            })
            .collect();
        let fusions = (0..cfg.num_junctions())
            .map(|_| FusionParams {
                norm_gain: TensorValue::ones(vec![2 * d]).detach_as_param(),
                norm_bias: TensorValue::zeros(vec![2 * d]).detach_as_param(),
                linear: LinearParams::fan_in_uniform(2 * d, d, rng),
            })
            .collect();
        ModelParams {
            token_embed,
            time_mlp1,
            time_mlp2,
            class_table: TensorValue::param(vec![class_rows, d], table).expect("finite init"),
            blocks,
            fusions,
            final_adaln: LinearParams::zeros(d, 2 * d),
            final_out: LinearParams::zeros(d, cfg.token_dim),
        }
    }

    /// Named tensors in a stable order (checkpoint and optimizer order).
    pub fn visit(&self) -> Vec<(String, &TensorValue)> {
        let mut out: Vec<(String, &TensorValue)> = Vec::new();
        push_lin(&mut out, "token_embed".into(), &self.token_embed);
        push_lin(&mut out, "time_mlp1".into(), &self.time_mlp1);
        push_lin(&mut out, "time_mlp2".into(), &self.time_mlp2);
        out.push(("class_table".into(), &self.class_table));
        for (i, b) in self.blocks.iter().enumerate() {
            push_lin(&mut out, format!("block{i}.adaln"), &b.adaln);
            push_lin(&mut out, format!("block{i}.qkv"), &b.qkv);
            push_lin(&mut out, format!("block{i}.out"), &b.out);
            push_lin(&mut out, format!("block{i}.mlp1"), &b.mlp1);
            push_lin(&mut out, format!("block{i}.mlp2"), &b.mlp2);
        }
        for (i, f) in self.fusions.iter().enumerate() {
            out.push((format!("fuse{i}.norm_gain"), &f.norm_gain));
            out.push((format!("fuse{i}.norm_bias"), &f.norm_bias));
            push_lin(&mut out, format!("fuse{i}.linear"), &f.linear);
        }
        push_lin(&mut out, "final_adaln".into(), &self.final_adaln);
        push_lin(&mut out, "final_out".into(), &self.final_out);
        out
    }

    /// Mutable counterpart of [`Self::visit`], same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut TensorValue)> {
        let mut out: Vec<(String, &mut TensorValue)> = Vec::new();
        push_lin_mut(&mut out, "token_embed".into(), &mut self.token_embed);
        push_lin_mut(&mut out, "time_mlp1".into(), &mut self.time_mlp1);
        push_lin_mut(&mut out, "time_mlp2".into(), &mut self.time_mlp2);
        out.push(("class_table".into(), &mut self.class_table));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_lin_mut(&mut out, format!("block{i}.adaln"), &mut b.adaln);
            push_lin_mut(&mut out, format!("block{i}.qkv"), &mut b.qkv);
            push_lin_mut(&mut out, format!("block{i}.out"), &mut b.out);
            push_lin_mut(&mut out, format!("block{i}.mlp1"), &mut b.mlp1);
            push_lin_mut(&mut out, format!("block{i}.mlp2"), &mut b.mlp2);
        }
        for (i, f) in self.fusions.iter_mut().enumerate() {
            out.push((format!("fuse{i}.norm_gain"), &mut f.norm_gain));
            out.push((format!("fuse{i}.norm_bias"), &mut f.norm_bias));
            push_lin_mut(&mut out, format!("fuse{i}.linear"), &mut f.linear);
        }
        push_lin_mut(&mut out, "final_adaln".into(), &mut self.final_adaln);
        push_lin_mut(&mut out, "final_out".into(), &mut self.final_out);
        out
    }

    /// Read-only copy with gradients disabled on every tensor; sampling and
    /// analysis run on this.
    pub fn frozen(&self) -> ModelParams {
        let mut copy = self.clone();
        for (_, t) in copy.visit_mut() {
            *t = t.detach();
        }
        copy
    }

    pub fn num_params(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── token/space transforms ─────────────────────────────────────────────────

/// `[n, c, h, w] → [n, (h/p)(w/p), c·p²]` with row-major patch order. Pure
/// permutation, so `unpatchify(patchify(x)) == x` exactly.
pub fn patchify(x: &TensorValue, p: usize) -> Result<TensorValue> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            details: format!("expected [n,c,h,w], got {s:?}"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} does not divide {h}×{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    // [n,c,gh,p,gw,p] -> [n,gh,gw,c,p,p] -> [n, gh·gw, c·p²]
    x.reshape(vec![n, c, gh, p, gw, p])?
        .transpose(1, 2)? // n,gh,c,p,gw,p
        .transpose(2, 4)? // n,gh,gw,p,c,p
        .transpose(3, 4)? // n,gh,gw,c,p,p
        .reshape(vec![n, gh * gw, c * p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &TensorValue,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<TensorValue> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            details: format!("expected [n,t,d], got {s:?}"),
        });
    }
    let n = s[0];
    if p == 0 || h % p != 0 || w % p != 0 || s[1] != (h / p) * (w / p) || s[2] != c * p * p {
        return Err(Error::InvalidArgument(format!(
            "token shape {s:?} does not unpatchify to [{c},{h},{w}] with p={p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    tokens
        .reshape(vec![n, gh, gw, c, p, p])?
        .transpose(3, 4)? // n,gh,gw,p,c,p
        .transpose(2, 4)? // n,gh,c,p,gw,p
        .transpose(1, 2)? // n,c,gh,p,gw,p
        .reshape(vec![n, c, h, w])
}

/// Pre-MLP sinusoidal time embedding: `dim/2` cosine components followed by
/// `dim/2` sine components of `t·1000·ω_i`, `ω_i = 10000^(−i/(dim/2))`.
/// At t=0 every cosine is 1 and every sine is 0.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * TIME_SCALE * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Fixed 2-D sin-cos position table `[t, d]` for a gh×gw grid (not learned).
fn pos_embed_2d(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let quarter = d / 4;
    let embed_1d = |pos: f64| -> Vec<f64> {
        let mut v = vec![0.0; d / 2];
        for i in 0..quarter {
            let freq = (-(10000f64.ln()) * i as f64 / quarter as f64).exp();
            v[i] = (pos * freq).sin();
            v[quarter + i] = (pos * freq).cos();
        }
        v
    };
    let mut out = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            out.extend(embed_1d(r as f64));
            out.extend(embed_1d(c as f64));
        }
    }
    out
}

/// One long-residual junction: `Linear(Norm(f_skip ⊕ f_prev))`, where ⊕ is
/// last-axis concatenation to 2D channels.
pub fn long_residual_fuse(
    f_skip: &TensorValue,
    f_prev: &TensorValue,
    params: &FusionParams,
) -> Result<TensorValue> {
    if f_skip.shape() != f_prev.shape() {
        return Err(Error::ShapeMismatch {
            op: "long_residual_fuse",
            details: format!("{:?} vs {:?}", f_skip.shape(), f_prev.shape()),
        });
    }
    let cat = f_skip.concat_last(f_prev)?;
    let normed = cat.layer_norm(&params.norm_gain, &params.norm_bias, LN_EPS)?;
    params.linear.apply(&normed)
}

// ── forward pass ───────────────────────────────────────────────────────────

pub struct ForwardOutput {
    /// v-prediction, same shape as the input batch.
    pub v_pred: TensorValue,
    /// Output of every block, each `[n, t, d]`.
    pub features: Vec<TensorValue>,
}

/// Full conditional forward pass. `t` and `y` are per-sample; class id
/// `num_classes` is the null class.
pub fn forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &TensorValue,
    t: &[f64],
    y: &[usize],
) -> Result<ForwardOutput> {
    let n = *x.shape().first().ok_or_else(|| Error::ShapeMismatch {
        op: "forward",
        details: "input batch must have a leading axis".into(),
    })?;
    if t.len() != n || y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "batch {n} with {} times and {} labels",
            t.len(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c > cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "class id {bad} out of range (null class is {})",
            cfg.num_classes
        )));
    }
    if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("time {bad} outside [0,1]")));
    }

    let d = cfg.hidden_dim;
    let tok = cfg.token_count;

    let tokens = match &cfg.layout {
        DataLayout::Points { dim } => {
            if x.shape() != [n, *dim] {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    details: format!("expected [n,{dim}], got {:?}", x.shape()),
                });
            }
            x.reshape(vec![n, 1, *dim])?
        }
        DataLayout::Grid { .. } => patchify(x, cfg.patch_size)?,
    };
    let mut h = params.token_embed.apply(&tokens)?;
    if let DataLayout::Grid { height, width, .. } = cfg.layout {
        let (gh, gw) = (height / cfg.patch_size, width / cfg.patch_size);
        let table = pos_embed_2d(gh, gw, d);
        let mut tiled = Vec::with_capacity(n * tok * d);
        for _ in 0..n {
            tiled.extend_from_slice(&table);
        }
        let pos = TensorValue::new(vec![n, tok, d], tiled)?;
        h = h.add(&pos)?;
    }

    // conditioning vector c = MLP(sinusoid(t)) + class_embed(y); sampling
    // batches share one t, so embeddings are computed per distinct time
    let mut sin_data = Vec::with_capacity(n * d);
    let mut memo: Vec<(u64, Vec<f64>)> = Vec::new();
    for &ti in t {
        let bits = ti.to_bits();
        match memo.iter().find(|(b, _)| *b == bits) {
            Some((_, emb)) => sin_data.extend_from_slice(emb),
            None => {
                let emb = sinusoidal_embedding(ti, d);
                sin_data.extend_from_slice(&emb);
                if memo.len() < 8 {
                    memo.push((bits, emb));
                }
            }
        }
    }
    let sin = TensorValue::new(vec![n, d], sin_data)?;
    let t_emb = params
        .time_mlp2
        .apply(&params.time_mlp1.apply(&sin)?.silu()?)?;
    let c_emb = params.class_table.index_select0(y)?;
    let cond_act = t_emb.add(&c_emb)?.silu()?;

    let unit_gain = TensorValue::ones(vec![d]);
    let zero_bias = TensorValue::zeros(vec![d]);

    let mut features: Vec<TensorValue> = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        let input = if cfg.use_long_residual && l >= cfg.num_blocks / 2 {
            let source = cfg.num_blocks - 1 - l;
            long_residual_fuse(&features[source], &h, &params.fusions[source])?
        } else {
            h.clone()
        };
        h = block_forward(&params.blocks[l], &input, &cond_act, cfg, &unit_gain, &zero_bias)?;
        features.push(h.clone());
    }

    // final layer: norm, adaLN shift/scale, zero-init projection
    let m = params.final_adaln.apply(&cond_act)?;
    let shift = m.slice_last(0, d)?;
    let scale = m.slice_last(d, d)?;
    let normed = h.layer_norm(&unit_gain, &zero_bias, LN_EPS)?;
    let modulated = modulate(&normed, &shift, &scale, tok)?;
    let out_tokens = params.final_out.apply(&modulated)?;

    let v_pred = match &cfg.layout {
        DataLayout::Points { dim } => out_tokens.reshape(vec![n, *dim])?,
        DataLayout::Grid {
            channels,
            height,
            width,
        } => unpatchify(&out_tokens, *channels, *height, *width, cfg.patch_size)?,
    };

    Ok(ForwardOutput { v_pred, features })
}

fn modulate(
    x: &TensorValue,
    shift: &TensorValue,
    scale: &TensorValue,
    tokens: usize,
) -> Result<TensorValue> {
    let scale1 = scale.add_scalar(1.0)?.expand_tokens(tokens)?;
    x.mul(&scale1)?.add(&shift.expand_tokens(tokens)?)
}

fn block_forward(
    p: &BlockParams,
    x: &TensorValue,
    cond_act: &TensorValue,
    cfg: &ModelConfig,
    unit_gain: &TensorValue,
    zero_bias: &TensorValue,
) -> Result<TensorValue> {
    let d = cfg.hidden_dim;
    let tok = cfg.token_count;
    let m = p.adaln.apply(cond_act)?; // [n, 6d]
    let shift_msa = m.slice_last(0, d)?;
    let scale_msa = m.slice_last(d, d)?;
    let gate_msa = m.slice_last(2 * d, d)?.expand_tokens(tok)?;
    let shift_mlp = m.slice_last(3 * d, d)?;
    let scale_mlp = m.slice_last(4 * d, d)?;
    let gate_mlp = m.slice_last(5 * d, d)?.expand_tokens(tok)?;

    let normed = x.layer_norm(unit_gain, zero_bias, LN_EPS)?;
    let attn_in = modulate(&normed, &shift_msa, &scale_msa, tok)?;
    let attn_out = attention(p, &attn_in, cfg)?;
    let x = x.add(&gate_msa.mul(&attn_out)?)?;

    let normed2 = x.layer_norm(unit_gain, zero_bias, LN_EPS)?;
    let mlp_in = modulate(&normed2, &shift_mlp, &scale_mlp, tok)?;
    let mlp_out = p.mlp2.apply(&p.mlp1.apply(&mlp_in)?.gelu_tanh()?)?;
    x.add(&gate_mlp.mul(&mlp_out)?)
}

fn attention(p: &BlockParams, x: &TensorValue, cfg: &ModelConfig) -> Result<TensorValue> {
    let (n, tok, d) = (x.shape()[0], x.shape()[1], cfg.hidden_dim);
    let heads = cfg.num_heads;
    let hd = d / heads;

    let qkv = p.qkv.apply(x)?; // [n, t, 3d]
    let to_heads = |t: &TensorValue| -> Result<TensorValue> {
        t.reshape(vec![n, tok, heads, hd])?
            .transpose(1, 2)?
            .reshape(vec![n * heads, tok, hd])
    };
    let q = to_heads(&qkv.slice_last(0, d)?)?;
    let k = to_heads(&qkv.slice_last(d, d)?)?;
    let v = to_heads(&qkv.slice_last(2 * d, d)?)?;

    let scores = q
        .bmm(&k.transpose(1, 2)?)?
        .mul_scalar(1.0 / (hd as f64).sqrt())?;
    let probs = scores.softmax_last()?;
    let ctx = probs
        .bmm(&v)?
        .reshape(vec![n, heads, tok, hd])?
        .transpose(1, 2)?
        .reshape(vec![n, tok, d])?;
    p.out.apply(&ctx)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::ModelSection;
    use crate::data::{DataMode, DatasetSpec};
    use crate::losses::flow_matching_loss_batch;
    use crate::tensor::backward;

    pub(crate) fn points_cfg(l: usize, d: usize, long: bool) -> (ModelConfig, DatasetSpec) {
        let data = DatasetSpec::default();
        let section = ModelSection {
            num_blocks: l,
            hidden_dim: d,
            num_heads: if d % 4 == 0 { 4 } else { 2 },
            patch_size: 2,
            use_long_residual: long,
            mlp_ratio: 4,
        };
        (ModelConfig::resolve(&section, &data).unwrap(), data)
    }

    #[test]
    fn patchify_shapes_and_roundtrip() {
        let mut rng = Rng::new(1);
        let x = TensorValue::randn(vec![2, 1, 8, 8], &mut rng);
        let tokens = patchify(&x, 2).unwrap();
        assert_eq!(tokens.shape(), &[2, 16, 4]);
        let back = unpatchify(&tokens, 1, 8, 8, 2).unwrap();
        assert_eq!(back.data(), x.data(), "roundtrip must be exact");
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn patchify_row_major_patch_order() {
        // 4×4 single channel, p=2: first token is the top-left 2×2 patch
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = TensorValue::new(vec![1, 1, 4, 4], data).unwrap();
        let tokens = patchify(&x, 2).unwrap();
        assert_eq!(tokens.shape(), &[1, 4, 4]);
        assert_eq!(&tokens.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tokens.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn time_embedding_t0_is_all_cos_one_sin_zero() {
        let emb = sinusoidal_embedding(0.0, 16);
        for i in 0..8 {
            assert_eq!(emb[i], 1.0, "cos component {i}");
            assert_eq!(emb[8 + i], 0.0, "sin component {i}");
        }
    }

    #[test]
    fn time_embedding_difference_matches_direct_evaluation() {
        let dim = 16;
        let e0 = sinusoidal_embedding(0.0, dim);
        let e1 = sinusoidal_embedding(1.0, dim);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // cos²+sin²=1 per frequency, so both embeddings have norm √(dim/2)
        assert!((norm(&e0) - (dim as f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!((norm(&e1) - (dim as f64 / 2.0).sqrt()).abs() < 1e-12);
        // independent evaluation: ‖e(0) − e(1)‖² = Σ_i (2 − 2cos(1000·ω_i))
        let diff: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| a - b).collect();
        let mut want = 0.0;
        for i in 0..dim / 2 {
            let freq = (-(10000f64.ln()) * i as f64 / (dim / 2) as f64).exp();
            want += 2.0 - 2.0 * (1000.0 * freq).cos();
        }
        assert!((norm(&diff) - want.sqrt()).abs() < 1e-12);
        assert_ne!(e0, e1);
    }

    #[test]
    fn time_embedding_is_deterministic() {
        assert_eq!(sinusoidal_embedding(0.37, 32), sinusoidal_embedding(0.37, 32));
    }

    #[test]
    fn junction_pairing_map_for_l12() {
        let (cfg, _) = points_cfg(12, 16, true);
        let sources: Vec<usize> = (0..cfg.num_junctions()).collect();
        let targets: Vec<usize> = sources.iter().map(|&i| cfg.junction_target(i)).collect();
        assert_eq!(sources, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(targets, vec![11, 10, 9, 8, 7, 6]);
    }

    #[test]
    fn fusion_output_shape_matches_input() {
        let (n, t, d) = (2, 4, 16);
        let mut rng = Rng::new(2);
        let fp = FusionParams {
            norm_gain: TensorValue::ones(vec![2 * d]).detach_as_param(),
            norm_bias: TensorValue::zeros(vec![2 * d]).detach_as_param(),
            linear: LinearParams::fan_in_uniform(2 * d, d, &mut rng),
        };
        let a = TensorValue::randn(vec![n, t, d], &mut rng);
        let b = TensorValue::randn(vec![n, t, d], &mut rng);
        let fused = long_residual_fuse(&a, &b, &fp).unwrap();
        assert_eq!(fused.shape(), &[n, t, d]);
    }

    #[test]
    fn fusion_gradient_reaches_skip_input() {
        let (t, d) = (3, 8);
        let mut rng = Rng::new(3);
        let fp = FusionParams {
            norm_gain: TensorValue::ones(vec![2 * d]).detach_as_param(),
            norm_bias: TensorValue::zeros(vec![2 * d]).detach_as_param(),
            linear: LinearParams::fan_in_uniform(2 * d, d, &mut rng),
        };
        let skip =
            TensorValue::param(vec![1, t, d], rng.fill_uniform(t * d, -1.0, 1.0)).unwrap();
        let prev =
            TensorValue::param(vec![1, t, d], rng.fill_uniform(t * d, -1.0, 1.0)).unwrap();
        crate::tensor::tests::assert_grads_match(
            &[skip, prev],
            |v| long_residual_fuse(&v[0], &v[1], &fp)?.square()?.sum_all(),
            1e-5,
        );
    }

    #[test]
    fn forward_points_mode_shapes() {
        let (cfg, _) = points_cfg(4, 16, false);
        let mut rng = Rng::new(4);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = TensorValue::randn(vec![4, 2], &mut rng);
        let out = forward(&cfg, &params, &x, &[0.5; 4], &[0, 1, 7, 8]).unwrap();
        assert_eq!(out.v_pred.shape(), x.shape());
        assert_eq!(out.features.len(), 4);
        for f in &out.features {
            assert_eq!(f.shape(), &[4, 1, 16]);
        }
    }

    #[test]
    fn forward_grid_mode_shapes() {
        let data = DatasetSpec {
            mode: DataMode::Grid,
            ..DatasetSpec::default()
        };
        let section = ModelSection {
            num_blocks: 2,
            hidden_dim: 16,
            num_heads: 4,
            patch_size: 4,
            use_long_residual: true,
            mlp_ratio: 2,
        };
        let cfg = ModelConfig::resolve(&section, &data).unwrap();
        assert_eq!(cfg.token_count, 4);
        assert_eq!(cfg.token_dim, 16);
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = TensorValue::randn(vec![2, 1, 8, 8], &mut rng);
        let out = forward(&cfg, &params, &x, &[0.25, 0.75], &[0, 4]).unwrap();
        assert_eq!(out.v_pred.shape(), &[2, 1, 8, 8]);
        assert_eq!(out.features.len(), 2);
        assert_eq!(out.features[0].shape(), &[2, 4, 16]);
    }

    #[test]
    fn forward_rejects_bad_class() {
        let (cfg, _) = points_cfg(2, 16, false);
        let mut rng = Rng::new(6);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = TensorValue::randn(vec![1, 2], &mut rng);
        assert!(forward(&cfg, &params, &x, &[0.5], &[9]).is_err());
        assert!(
            forward(&cfg, &params, &x, &[0.5], &[8]).is_ok(),
            "null class id is valid"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, _) = points_cfg(4, 16, true);
        let mut rng = Rng::new(7);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = TensorValue::randn(vec![3, 2], &mut rng);
        let a = forward(&cfg, &params, &x, &[0.3, 0.6, 0.9], &[0, 1, 2]).unwrap();
        let b = forward(&cfg, &params, &x, &[0.3, 0.6, 0.9], &[0, 1, 2]).unwrap();
        assert_eq!(a.v_pred.data(), b.v_pred.data());
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn long_residual_flag_controls_parameter_set() {
        let (cfg_on, _) = points_cfg(6, 16, true);
        let (cfg_off, _) = points_cfg(6, 16, false);
        let on = ModelParams::init(&cfg_on, &mut Rng::new(8));
        let off = ModelParams::init(&cfg_off, &mut Rng::new(8));
        assert_eq!(on.fusions.len(), 3);
        assert!(off.fusions.is_empty());
        let on_names: Vec<String> = on.visit().into_iter().map(|(n, _)| n).collect();
        let off_names: Vec<String> = off.visit().into_iter().map(|(n, _)| n).collect();
        assert!(on_names.iter().any(|n| n.starts_with("fuse")));
        assert!(!off_names.iter().any(|n| n.starts_with("fuse")));
        let filtered: Vec<&String> =
            on_names.iter().filter(|n| !n.starts_with("fuse")).collect();
        assert_eq!(filtered, off_names.iter().collect::<Vec<_>>());
    }

    #[test]
    fn fusion_matrices_receive_gradient_after_one_step() {
        // zero-init output projection blocks upstream gradients at step 0,
        // so take one optimizer step first, then check liveness
        let (cfg, data) = points_cfg(4, 16, true);
        let mut rng = Rng::new(9);
        let mut params = ModelParams::init(&cfg, &mut rng);
        let (x, y) = crate::data::sample_batch(&data, 8, &mut rng).unwrap();
        let run = |params: &ModelParams, rng: &mut Rng| -> crate::tensor::Gradients {
            let ts: Vec<f64> = (0..8).map(|_| rng.next_f64()).collect();
            let eps = TensorValue::randn(vec![8, 2], rng);
            let sched = crate::interpolant::LinearSchedule;
            let xt = crate::interpolant::interpolate_batch(&sched, &x, &eps, &ts).unwrap();
            let out = forward(&cfg, params, &xt, &ts, &y).unwrap();
            let loss = flow_matching_loss_batch(&sched, &out.v_pred, &x, &eps, &ts).unwrap();
            backward(&loss).unwrap()
        };
        let grads0 = run(&params, &mut rng);
        // crude SGD step stands in for the optimizer here
        for (_, t) in params.visit_mut() {
            if let Some(g) = grads0.get(t) {
                let stepped: Vec<f64> =
                    t.data().iter().zip(g).map(|(&p, &gv)| p - 0.1 * gv).collect();
                *t = TensorValue::param(t.shape().to_vec(), stepped).unwrap();
            }
        }
        let grads1 = run(&params, &mut rng);
        for (i, f) in params.fusions.iter().enumerate() {
            let g = grads1
                .get(&f.linear.w)
                .expect("fusion matrix must be in graph");
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "fusion {i} got zero gradient");
        }
    }
}
