use super::{add_conv, add_tconv, Init, LayerPlan, ModelSpec, KERNEL};
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Debug, Clone)]
pub(super) struct CaeLayout {
    encoder: Vec<(ParamId, ParamId)>,
    decoder: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
    transposed_head: bool,
}

impl CaeLayout {
    pub(super) fn build<T: Scalar>(spec: &ModelSpec, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let LayerPlan::Cae { encoder, decoder, transposed_head } = &spec.plan else {
            unreachable!("CAE layout for non-CAE plan")
        };
        let mut c = spec.input_frames;
        let mut enc = Vec::new();
        for (i, &f) in encoder.iter().enumerate() {
            enc.push(add_conv(params, init, &format!("enc{i}"), c, f));
            c = f;
        }
        let mut dec = Vec::new();
        for (i, &f) in decoder.iter().enumerate() {
            dec.push(add_tconv(params, init, &format!("dec{i}"), c, f));
            c = f;
        }
        let head = if *transposed_head {
            add_tconv(params, init, "head", c, 1)
        } else {
            add_conv(params, init, "head", c, 1)
        };
        CaeLayout {
            encoder: enc,
            decoder: dec,
            head,
            transposed_head: *transposed_head,
        }
    }

    pub(super) fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pad = KERNEL / 2;
        let mut h = x;
        let mut sizes = Vec::with_capacity(self.encoder.len());
        for &(w, b) in &self.encoder {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.conv2d(h, w, Some(b), pad)?;
            h = g.relu(h);
            sizes.push((g.shape(h)[2], g.shape(h)[3]));
            h = g.maxpool2(h)?;
        }
        for (&(w, b), &(oh, ow)) in self.decoder.iter().zip(sizes.iter().rev()) {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.conv_transpose2d(h, w, Some(b), pad)?;
            h = g.relu(h);
            h = g.upsample2(h, oh, ow)?;
        }
        let (w, b) = (g.param(store, self.head.0), g.param(store, self.head.1));
        h = if self.transposed_head {
            g.conv_transpose2d(h, w, Some(b), pad)?
        } else {
            g.conv2d(h, w, Some(b), pad)?
        };
        Ok(g.sigmoid(h))
    }
}
