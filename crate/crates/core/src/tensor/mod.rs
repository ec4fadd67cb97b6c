//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

mod adam;
mod checkpoint;
pub mod conv;
mod dense;
mod graph;
mod params;
mod scalar;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dense::Tensor;
pub use graph::{Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};

use crate::error::{Error, Result};

/// Multi-head attention projection weights for `dim`-wide tokens.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Scaled dot-product attention with `heads` heads over `[tokens, dim]`
/// inputs, followed by the output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
) -> Result<Var> {
    let dim = *g.shape(q_in).last().ok_or_else(|| Error::Shape("attention on scalar".into()))?;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {dim} not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let project = |g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, Some(b))
    };
    let q = project(g, q_in, p.wq, p.bq)?;
    let k = project(g, k_in, p.wk, p.bk)?;
    let v = project(g, v_in, p.wv, p.bv)?;
    let scale = T::one() / T::from_usize(head_dim).expect("dim").sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * head_dim, head_dim)?;
        let kh = g.slice(k, 1, h * head_dim, head_dim)?;
        let vh = g.slice(v, 1, h * head_dim, head_dim)?;
        let scores = g.matmul(qh, kh, true)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh, false)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let (wo, bo) = (g.param(store, p.wo), g.param(store, p.bo));
    g.linear(joined, wo, Some(bo))
}
