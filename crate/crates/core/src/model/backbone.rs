//! Pre-norm transformer blocks shared across tables.
//!
//! Every block is `t + Drop(Attn(LN(t)))` followed by `t + Drop(FF(LN(t)))`
//! with `FF(h) = W2 ReGLU(W1 h + b1) + b2`. No positional encodings are used,
//! so all parameter shapes depend on `d` and the head count only.

use rand::Rng;

use super::{BackboneConfig, BackboneVariant, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, zero_bias, Float, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Attention {
    SelfAttention,
    Additive,
}

fn block_prefix(i: usize) -> String {
    format!("backbone.{i}.")
}

fn insert_linear<F: Float, R: Rng + ?Sized>(
    ps: &mut ParamSet<F>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    ps.insert(format!("{name}.weight"), kaiming_uniform(&[fan_in, fan_out], fan_in, rng)?, true)?;
    ps.insert(format!("{name}.bias"), zero_bias(&[fan_out]), false)
}

fn insert_norm<F: Float>(ps: &mut ParamSet<F>, name: &str, d: usize) -> Result<()> {
    ps.insert(format!("{name}.gain"), Tensor::ones(vec![d]), false)?;
    ps.insert(format!("{name}.bias"), zero_bias(&[d]), false)
}

fn init_block<F: Float, R: Rng + ?Sized>(
    ps: &mut ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    attention: Attention,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d;
    insert_norm(ps, &format!("{prefix}attn_norm"), d)?;
    for proj in ["q", "k", "v"] {
        insert_linear(ps, &format!("{prefix}attn.{proj}"), d, d, rng)?;
    }
    if attention == Attention::Additive {
        let dh = cfg.head_dim();
        ps.insert(format!("{prefix}attn.alpha"), kaiming_uniform(&[d], dh, rng)?, true)?;
        ps.insert(format!("{prefix}attn.beta"), kaiming_uniform(&[d], dh, rng)?, true)?;
    }
    insert_linear(ps, &format!("{prefix}attn.out"), d, d, rng)?;
    insert_norm(ps, &format!("{prefix}ff_norm"), d)?;
    insert_linear(ps, &format!("{prefix}ff.in"), d, 2 * cfg.ff_hidden(), rng)?;
    insert_linear(ps, &format!("{prefix}ff.out"), cfg.ff_hidden(), d, rng)
}

/// Adds all backbone parameters (names start with `backbone.`) to `ps`.
pub fn init_backbone<F: Float, R: Rng + ?Sized>(cfg: &BackboneConfig, ps: &mut ParamSet<F>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.n_blocks {
        let p = block_prefix(i);
        match cfg.variant {
            BackboneVariant::Ftt => init_block(ps, &p, cfg, Attention::SelfAttention, rng)?,
            BackboneVariant::Fastformer => init_block(ps, &p, cfg, Attention::Additive, rng)?,
            BackboneVariant::SaintV => {
                init_block(ps, &format!("{p}col."), cfg, Attention::SelfAttention, rng)?;
                init_block(ps, &format!("{p}row."), cfg, Attention::SelfAttention, rng)?;
            }
        }
    }
    Ok(())
}

fn linear<F: Float>(g: &mut Graph<F>, ps: &ParamSet<F>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.weight"))?;
    let b = g.param(ps, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

fn norm<F: Float>(g: &mut Graph<F>, ps: &ParamSet<F>, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(ps, &format!("{name}.gain"))?;
    let bias = g.param(ps, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn dims3<F: Float>(g: &Graph<F>, x: Var, d: usize) -> Result<[usize; 3]> {
    match *g.shape(x) {
        [b, n, dd] if dd == d => Ok([b, n, dd]),
        ref s => Err(Error::Shape(format!("expected tokens [B, n, {d}], got {s:?}"))),
    }
}

/// Scaled dot-product self-attention over axis 1 of `[B, n, d]`.
fn self_attention<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    h: Var,
) -> Result<Var> {
    let [b, n, d] = dims3(g, h, cfg.d)?;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let q = linear(g, ps, &format!("{prefix}attn.q"), h)?;
    let k = linear(g, ps, &format!("{prefix}attn.k"), h)?;
    let v = linear(g, ps, &format!("{prefix}attn.v"), h)?;
    let q = g.reshape(q, &[b, n, nh, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[b, n, nh, dh])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, &[b, n, nh, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = g.softmax(scores, 3)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    linear(g, ps, &format!("{prefix}attn.out"), ctx)
}

/// Per-head softmax over tokens of `(x * w)` summed within each head.
/// Returns the pooled `[B, 1, d]` vector `sum_i softmax_i * x_i`.
fn additive_pool<F: Float>(g: &mut Graph<F>, x: Var, w: Var, cfg: &BackboneConfig) -> Result<Var> {
    let [b, n, d] = dims3(g, x, cfg.d)?;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let xw = g.mul(x, w)?;
    let xw = g.reshape(xw, &[b, n, nh, dh])?;
    let logits = g.sum_axis(xw, 3)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(logits, 1)?;
    let weights = g.reshape(weights, &[b, n, nh, 1])?;
    let x4 = g.reshape(x, &[b, n, nh, dh])?;
    let weighted = g.mul(weights, x4)?;
    let pooled = g.sum_axis(weighted, 1)?;
    g.reshape(pooled, &[b, 1, d])
}

/// Additive attention: global query, query-key products, global key,
/// key-value products, output projection plus the query residual.
fn additive_attention<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    h: Var,
) -> Result<Var> {
    let q = linear(g, ps, &format!("{prefix}attn.q"), h)?;
    let k = linear(g, ps, &format!("{prefix}attn.k"), h)?;
    let v = linear(g, ps, &format!("{prefix}attn.v"), h)?;
    let w_alpha = g.param(ps, &format!("{prefix}attn.alpha"))?;
    let w_beta = g.param(ps, &format!("{prefix}attn.beta"))?;
    let global_q = additive_pool(g, q, w_alpha, cfg)?;
    let p = g.mul(global_q, k)?;
    let global_k = additive_pool(g, p, w_beta, cfg)?;
    let u = g.mul(global_k, v)?;
    let out = linear(g, ps, &format!("{prefix}attn.out"), u)?;
    g.add(out, q)
}

fn block<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    attention: Attention,
    t: Var,
) -> Result<Var> {
    let h = norm(g, ps, &format!("{prefix}attn_norm"), t)?;
    let a = match attention {
        Attention::SelfAttention => self_attention(g, ps, prefix, cfg, h)?,
        Attention::Additive => additive_attention(g, ps, prefix, cfg, h)?,
    };
    let a = g.dropout(a, cfg.attn_dropout)?;
    let t = g.add(t, a)?;
    let h = norm(g, ps, &format!("{prefix}ff_norm"), t)?;
    let f = linear(g, ps, &format!("{prefix}ff.in"), h)?;
    let f = g.reglu(f)?;
    let f = linear(g, ps, &format!("{prefix}ff.out"), f)?;
    let f = g.dropout(f, cfg.ff_dropout)?;
    g.add(t, f)
}

/// One multi-head self-attention block; `prefix` is e.g. `backbone.0.`.
pub fn mhsa_block<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    t: Var,
) -> Result<Var> {
    block(g, ps, prefix, cfg, Attention::SelfAttention, t)
}

/// One additive-attention block.
pub fn fastformer_block<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    t: Var,
) -> Result<Var> {
    block(g, ps, prefix, cfg, Attention::Additive, t)
}

/// Column attention, then row attention across the batch axis.
pub fn saintv_block<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    t: Var,
) -> Result<Var> {
    let t = block(g, ps, &format!("{prefix}col."), cfg, Attention::SelfAttention, t)?;
    let rows = g.permute(t, &[1, 0, 2])?;
    let rows = block(g, ps, &format!("{prefix}row."), cfg, Attention::SelfAttention, rows)?;
    g.permute(rows, &[1, 0, 2])
}

/// Runs all `n_blocks` blocks over `[B, n, d]` tokens.
pub fn backbone_forward<F: Float>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    cfg: &BackboneConfig,
    tokens: Var,
) -> Result<Var> {
    dims3(g, tokens, cfg.d)?;
    let mut t = tokens;
    for i in 0..cfg.n_blocks {
        let p = block_prefix(i);
        t = match cfg.variant {
            BackboneVariant::Ftt => mhsa_block(g, ps, &p, cfg, t)?,
            BackboneVariant::Fastformer => fastformer_block(g, ps, &p, cfg, t)?,
            BackboneVariant::SaintV => saintv_block(g, ps, &p, cfg, t)?,
        };
    }
    Ok(t)
}

/// The final (CLS) token of `[B, n, d]`, as `[B, d]`.
pub fn cls_output<F: Float>(g: &mut Graph<F>, tokens: Var) -> Result<Var> {
    let n = match *g.shape(tokens) {
        [_, n, _] if n > 0 => n,
        ref s => return Err(Error::Shape(format!("cls_output needs [B, n, d] tokens, got {s:?}"))),
    };
    g.select(tokens, 1, n - 1)
}
