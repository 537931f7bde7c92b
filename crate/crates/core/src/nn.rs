//! Attention, MLP and pre-norm transformer layers built on the tape.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Default hidden-width multiplier of the MLPs.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(&format!("{prefix}.gain"), &[width], 1.0)?,
            bias: store.constant(&format!("{prefix}.bias"), &[width], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Bias-free multi-head attention projections, all `D×D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub width: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(width, heads)?;
        let std = 1.0 / libm::sqrt(width as f64);
        let mut w = |n: &str| store.normal(&format!("{prefix}.{n}"), &[width, width], std, rng);
        Ok(Self {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
            width,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

pub(crate) fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} must divide width {width}"
        )));
    }
    Ok(())
}

/// Scaled dot-product attention of `queries [q×D]` over `keys_values [m×D]`.
///
/// Output is `q×D` whatever `m` is. Logits are scaled by `1/sqrt(D/heads)`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    p: &AttentionParams,
) -> Result<Var> {
    for v in [queries, keys_values] {
        if g.shape(v).len() != 2 || g.shape(v)[1] != p.width {
            return crate::error::dim_err("multi_head_attention", g.shape(v), &[p.width]);
        }
    }
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys_values, wk)?;
    let v = g.matmul(keys_values, wv)?;
    let d = p.head_dim();
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax_rows(logits)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    g.matmul(merged, wo)
}

/// Two-layer GELU MLP, `D → r·D → D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub width: usize,
    pub ratio: usize,
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("mlp ratio must be at least 1".into()));
        }
        let hidden = width * ratio;
        Ok(Self {
            w_in: store.normal(&format!("{prefix}.w_in"), &[width, hidden], 1.0 / libm::sqrt(width as f64), rng)?,
            b_in: store.constant(&format!("{prefix}.b_in"), &[hidden], 0.0)?,
            w_out: store.normal(&format!("{prefix}.w_out"), &[hidden, width], 1.0 / libm::sqrt(hidden as f64), rng)?,
            b_out: store.constant(&format!("{prefix}.b_out"), &[width], 0.0)?,
            width,
            ratio,
        })
    }
}

pub fn mlp_forward(g: &mut Graph, x: Var, p: &MlpParams) -> Result<Var> {
    let (w_in, b_in, w_out, b_out) = (g.param(p.w_in), g.param(p.b_in), g.param(p.w_out), g.param(p.b_out));
    let h = g.linear(x, w_in, b_in)?;
    let h = g.gelu(h);
    g.linear(h, w_out, b_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerLayerParams {
    pub norm_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub norm_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

impl TransformerLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNormParams::init(store, &format!("{prefix}.ln1"), width)?,
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), width, heads, rng)?,
            norm_mlp: LayerNormParams::init(store, &format!("{prefix}.ln2"), width)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), width, ratio, rng)?,
        })
    }
}

/// Pre-norm layer: `x + Attn(Ln(x))`, then `+ MLP(Ln(·))`.
pub fn transformer_layer(g: &mut Graph, x: Var, p: &TransformerLayerParams) -> Result<Var> {
    let n = p.norm_attn.apply(g, x)?;
    let a = multi_head_attention(g, n, n, &p.attn)?;
    let x = g.add(x, a)?;
    let n = p.norm_mlp.apply(g, x)?;
    let m = mlp_forward(g, n, &p.mlp)?;
    g.add(x, m)
}
