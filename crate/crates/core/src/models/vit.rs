use super::{Init, LayerPlan, ModelSpec};
use crate::error::Result;
use crate::tensor::{multi_head_attention, AttentionParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Layer-norm epsilon inside the transformer blocks.
pub const LN_EPS: f64 = 1e-5;
/// Std of the positional embedding initialization.
pub const POS_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: AttentionParams,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub(super) struct VitLayout {
    embed: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
    patch: usize,
    heads: usize,
}

fn add_linear<T: Scalar>(p: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize) -> (ParamId, ParamId) {
    (
        p.add(format!("{name}.weight"), init.he(&[dout, din], din)),
        p.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
    )
}

fn add_norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        p.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
        p.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
    )
}

impl VitLayout {
    pub(super) fn build<T: Scalar>(spec: &ModelSpec, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let LayerPlan::Vit { patch, dim, depth, heads, mlp_dim } = spec.plan else {
            unreachable!("ViT layout for another plan")
        };
        let tokens = spec.image_height.div_ceil(patch) * spec.image_width.div_ceil(patch);
        let feat = spec.input_frames * patch * patch;
        let embed = add_linear(params, init, "embed", feat, dim);
        let pos = params.add("pos_embed", init.normal(&[tokens, dim], POS_INIT_STD));
        let blocks = (0..depth)
            .map(|i| {
                let name = |s: &str| format!("block{i}.{s}");
                let ln1 = add_norm(params, &name("ln1"), dim);
                let (wq, bq) = add_linear(params, init, &name("q"), dim, dim);
                let (wk, bk) = add_linear(params, init, &name("k"), dim, dim);
                let (wv, bv) = add_linear(params, init, &name("v"), dim, dim);
                let (wo, bo) = add_linear(params, init, &name("proj"), dim, dim);
                let ln2 = add_norm(params, &name("ln2"), dim);
                let fc1 = add_linear(params, init, &name("fc1"), dim, mlp_dim);
                let fc2 = add_linear(params, init, &name("fc2"), mlp_dim, dim);
                Block {
                    ln1,
                    attn: AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo },
                    ln2,
                    fc1,
                    fc2,
                }
            })
            .collect();
        let ln_f = add_norm(params, "ln_f", dim);
        let head = add_linear(params, init, "head", dim, patch * patch);
        VitLayout {
            embed,
            pos,
            blocks,
            ln_f,
            head,
            patch,
            heads,
        }
    }

    pub(super) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        spec: &ModelSpec,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(LN_EPS);
        let bind = |g: &mut Graph<T>, (a, b): (ParamId, ParamId)| (g.param(store, a), g.param(store, b));
        let norm = |g: &mut Graph<T>, x: Var, p: (ParamId, ParamId)| -> Result<Var> {
            let (gain, bias) = bind(g, p);
            g.layer_norm(x, gain, bias, eps)
        };
        let linear = |g: &mut Graph<T>, x: Var, p: (ParamId, ParamId)| -> Result<Var> {
            let (w, b) = bind(g, p);
            g.linear(x, w, Some(b))
        };
        let tokens = g.patchify(x, self.patch)?;
        let mut h = linear(g, tokens, self.embed)?;
        let pos = g.param(store, self.pos);
        h = g.add(h, pos)?;
        for b in &self.blocks {
            let n = norm(g, h, b.ln1)?;
            let a = multi_head_attention(g, store, &b.attn, n, n, n, self.heads)?;
            h = g.add(h, a)?;
            let n = norm(g, h, b.ln2)?;
            let m = linear(g, n, b.fc1)?;
            let m = g.relu(m);
            let m = linear(g, m, b.fc2)?;
            h = g.add(h, m)?;
        }
        let h = norm(g, h, self.ln_f)?;
        let pixels = linear(g, h, self.head)?;
        let img = g.unpatchify(pixels, 1, spec.image_height, spec.image_width, self.patch)?;
        Ok(g.sigmoid(img))
    }
}
