//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep.

use super::conv::{self, ConvGeom, Lowering};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    SqError { out: Var, target: Vec<T>, weights: Option<Vec<T>> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track_params: bool,
    lowering: Lowering,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: true,
            lowering: Lowering::Auto,
        }
    }

    /// Graph for inference: parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    /// Forces a convolution lowering (testing aid).
    pub fn with_lowering(mut self, lowering: Lowering) -> Self {
        self.lowering = lowering;
        self
    }

    pub fn set_lowering(&mut self, lowering: Lowering) {
        self.lowering = lowering;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free variable that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let track = self.track_params;
        self.push(value, Op::Param(id), track)
    }

    // ---- convolution family -------------------------------------------

    fn conv_geom(&self, x: Var, w: Var, transposed: bool, pad: usize) -> Result<(usize, ConvGeom)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv expects 4-D input/weight, got {xs:?} and {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        if cin != ws[0] && transposed || cin != ws[1] && !transposed {
            return Err(Error::Shape(format!(
                "channel mismatch: input has {cin} channels, weight is {ws:?}"
            )));
        }
        let geom = if transposed {
            if h + k < 1 + 2 * pad || wd + k < 1 + 2 * pad {
                return Err(Error::Shape("transposed conv output would be empty".into()));
            }
            ConvGeom {
                c: ws[1],
                f: ws[0],
                h: h + k - 1 - 2 * pad,
                w: wd + k - 1 - 2 * pad,
                k,
                pad,
            }
        } else {
            if h + 2 * pad < k || wd + 2 * pad < k {
                return Err(Error::Shape(format!("input {h}x{wd} too small for kernel {k}")));
            }
            ConvGeom { c: cin, f: ws[0], h, w: wd, k, pad }
        };
        Ok((n, geom))
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {channels} channels",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    fn add_channel_bias(&self, out: &mut [T], b: Option<Var>, channels: usize, plane: usize) {
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % channels];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    /// Stride-1 cross-correlation: `[N,C,H,W] x [F,C,k,k] -> [N,F,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, g) = self.conv_geom(x, w, false, pad)?;
        self.check_bias(b, g.f)?;
        let (ho, wo) = (g.out_h(), g.out_w());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(n * g.f * ho * wo);
        for i in 0..n {
            let xi = &xin[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
            out.extend(conv::forward(xi, wv, &g, self.lowering));
        }
        self.add_channel_bias(&mut out, b, g.f, ho * wo);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, g.f, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// Stride-1 transposed convolution, the adjoint of [`Graph::conv2d`]:
    /// `[N,Cin,H,W] x [Cin,Cout,k,k] -> [N,Cout,H+k-1-2p,W+k-1-2p]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, g) = self.conv_geom(x, w, true, pad)?;
        self.check_bias(b, g.c)?;
        let (hin, win) = (g.out_h(), g.out_w());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(n * g.c * g.h * g.w);
        for i in 0..n {
            let xi = &xin[i * g.f * hin * win..(i + 1) * g.f * hin * win];
            out.extend(conv::backward_data(xi, wv, &g, self.lowering));
        }
        self.add_channel_bias(&mut out, b, g.c, g.h * g.w);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, g.c, g.h, g.w], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, pad }, rg))
    }

    /// 2x2 max pooling with stride 2 (floor semantics). Ties resolve to the
    /// first element of the window in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape(format!("maxpool2 needs [N,C,H>=2,W>=2], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &xin[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(p * h * w + best);
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling to `out_h x out_w`, where each output
    /// size is twice the input size or one more; the extra row/column is zero.
    pub fn upsample2(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2 needs 4-D input, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if out_h / 2 != h || out_w / 2 != w {
            return Err(Error::Shape(format!(
                "upsample2 from {h}x{w} cannot produce {out_h}x{out_w}"
            )));
        }
        let planes = s[0] * s[1];
        let xin = self.value(x).data();
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(p * out_h + y) * out_w + xo] = xin[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[s[0], s[1], out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |a| T::one() / (T::one() + (-a).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.tanh(), Op::Tanh { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |a| a * factor, Op::Scale { x, factor })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    // ---- dense ------------------------------------------------------------

    /// `x[.., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        self.check_bias(b, ws[0])?;
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let (din, dout) = (ws[1], ws[0]);
        let mut out = vec![T::zero(); rows * dout];
        super::scalar::gemm_into(
            super::scalar::MatRef::row_major(self.value(x).data(), rows, din),
            super::scalar::MatRef::row_major(self.value(w).data(), dout, din).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                add_into(row, bias);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().expect("non-empty") = dout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D matrix product `a * b` (or `a * b^T`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2-D operands, got {sa:?}, {sb:?}")));
        }
        let bm = super::scalar::MatRef::row_major(self.value(b).data(), sb[0], sb[1]);
        let bm = if trans_b { bm.t() } else { bm };
        if sa[1] != bm.rows {
            return Err(Error::Shape(format!("matmul inner dims: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let n = bm.cols;
        let mut out = vec![T::zero(); sa[0] * n];
        super::scalar::gemm_into(
            super::scalar::MatRef::row_major(self.value(a).data(), sa[0], sa[1]),
            bm,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[sa[0], n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!("layer_norm affine params must be [{d}]")));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let dn = T::from_usize(d).expect("dim");
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let nv = (v - mean) * r;
                xhat.push(nv);
                out.push(nv * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Softmax { x }, rg))
    }

    // ---- shape manipulation -------------------------------------------------

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::Shape(format!("slice {start}+{len} on axis {axis} of {xs:?}")));
        }
        let (outer, alen, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::Shape(format!("concat {s:?} with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let alen = self.shape(p)[axis];
                let v = self.value(p).data();
                out.extend_from_slice(&v[o * alen * inner..(o + 1) * alen * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `[1, C, H, W]` to non-overlapping `patch x patch` tokens
    /// `[ceil(H/p)*ceil(W/p), C*p*p]`, zero-padding the bottom/right border.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[0] != 1 || patch == 0 {
            return Err(Error::Shape(format!("patchify needs [1,C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let (nh, nw) = (h.div_ceil(patch), w.div_ceil(patch));
        let feat = c * patch * patch;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nh * nw * feat];
        for_each_patch_pixel(c, h, w, patch, |src, dst| out[dst] = xv[src]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[nh * nw, feat], out)?, Op::Patchify { x, patch }, rg))
    }

    /// Inverse of [`Graph::patchify`], cropping back to `[1, c, h, w]`.
    pub fn unpatchify(&mut self, x: Var, c: usize, h: usize, w: usize, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (nh, nw) = (h.div_ceil(patch), w.div_ceil(patch));
        if s != [nh * nw, c * patch * patch] {
            return Err(Error::Shape(format!(
                "unpatchify of {s:?} into [1,{c},{h},{w}] with patch {patch}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        for_each_patch_pixel(c, h, w, patch, |img, tok| out[img] = xv[tok]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, c, h, w], out)?, Op::Unpatchify { x, patch }, rg))
    }

    // ---- reductions -------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// `sum_i w_i (target_i - out_i)^2 / n` with `w_i = 1` when `weights` is
    /// `None`; `n` is always the element count.
    pub fn weighted_sq_error(&mut self, out: Var, target: &[T], weights: Option<&[T]>) -> Result<Var> {
        let ov = self.value(out).data();
        if target.len() != ov.len() || weights.is_some_and(|w| w.len() != ov.len()) {
            return Err(Error::Shape(format!(
                "loss operands: output has {} values, target {}, weights {:?}",
                ov.len(),
                target.len(),
                weights.map(|w| w.len())
            )));
        }
        let n = T::from_usize(ov.len()).expect("count");
        let mut acc = T::zero();
        match weights {
            Some(ws) => {
                for ((&o, &t), &m) in ov.iter().zip(target).zip(ws) {
                    let d = t - o;
                    acc += m * (d * d);
                }
            }
            None => {
                for (&o, &t) in ov.iter().zip(target) {
                    let d = t - o;
                    acc += d * d;
                }
            }
        }
        let rg = self.rg(&[out]);
        let op = Op::SqError {
            out,
            target: target.to_vec(),
            weights: weights.map(<[T]>::to_vec),
        };
        Ok(self.push(Tensor::scalar(acc / n), op, rg))
    }

    // ---- backward -----------------------------------------------------------------

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => add_into(g, &contrib),
            None => node.grad = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar `loss`. Intermediate gradients are
    /// recomputed on every call; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                node.grad = None;
            }
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        let needs = |v: Var| self.requires_grad(v);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad } => {
                let (n, g) = self.conv_geom(*x, *w, false, *pad).expect("validated");
                let (ho, wo) = (g.out_h(), g.out_w());
                let xin = self.value(*x).data();
                let wv = self.value(*w).data();
                let (isz, osz) = (g.c * g.h * g.w, g.f * ho * wo);
                if needs(*x) {
                    let mut dx = Vec::with_capacity(n * isz);
                    for s in 0..n {
                        dx.extend(conv::backward_data(&gy[s * osz..(s + 1) * osz], wv, &g, self.lowering));
                    }
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for s in 0..n {
                        let part = conv::backward_weight(
                            &xin[s * isz..(s + 1) * isz],
                            &gy[s * osz..(s + 1) * osz],
                            &g,
                            self.lowering,
                        );
                        add_into(&mut dw, &part);
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, channel_sums(gy, g.f, ho * wo)));
                }
            }
            Op::ConvTranspose2d { x, w, b, pad } => {
                let (n, g) = self.conv_geom(*x, *w, true, *pad).expect("validated");
                let (hin, win) = (g.out_h(), g.out_w());
                let xin = self.value(*x).data();
                let wv = self.value(*w).data();
                let (isz, osz) = (g.f * hin * win, g.c * g.h * g.w);
                if needs(*x) {
                    let mut dx = Vec::with_capacity(n * isz);
                    for s in 0..n {
                        dx.extend(conv::forward(&gy[s * osz..(s + 1) * osz], wv, &g, self.lowering));
                    }
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for s in 0..n {
                        let part = conv::backward_weight(
                            &gy[s * osz..(s + 1) * osz],
                            &xin[s * isz..(s + 1) * isz],
                            &g,
                            self.lowering,
                        );
                        add_into(&mut dw, &part);
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, channel_sums(gy, g.c, g.h * g.w)));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &g) in argmax.iter().zip(gy) {
                    dx[idx] += g;
                }
                out.push((*x, dx));
            }
            Op::Upsample2 { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                let planes = s[0] * s[1];
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + yy / 2) * w + xx / 2] += gy[(p * oh + yy) * ow + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let xin = self.value(*x).data();
                let dx = xin
                    .iter()
                    .zip(gy)
                    .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let dx = y.iter().zip(gy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                out.push((*x, dx));
            }
            Op::Tanh { x } => {
                let dx = y.iter().zip(gy).map(|(&t, &g)| g * (T::one() - t * t)).collect();
                out.push((*x, dx));
            }
            Op::Scale { x, factor } => {
                out.push((*x, gy.iter().map(|&g| g * *factor).collect()));
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, gy.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, gy.iter().map(|&g| -g).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    out.push((*a, gy.iter().zip(vb).map(|(&g, &v)| g * v).collect()));
                }
                if needs(*b) {
                    out.push((*b, gy.iter().zip(va).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Linear { x, w, b } => {
                use super::scalar::{gemm_into, MatRef};
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = gy.len() / dout;
                if needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm_into(
                        MatRef::row_major(gy, rows, dout),
                        MatRef::row_major(self.value(*w).data(), dout, din),
                        &mut dx,
                        false,
                    );
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm_into(
                        MatRef::row_major(gy, rows, dout).t(),
                        MatRef::row_major(self.value(*x).data(), rows, din),
                        &mut dw,
                        false,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.chunks(dout) {
                        add_into(&mut db, row);
                    }
                    out.push((b, db));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                use super::scalar::{gemm_into, MatRef};
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.dim(1);
                let gm = MatRef::row_major(gy, m, n);
                let am = MatRef::row_major(self.value(*a).data(), m, k);
                let braw = MatRef::row_major(self.value(*b).data(), sb[0], sb[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bk_n = if *trans_b { braw.t() } else { braw };
                    gemm_into(gm, bk_n.t(), &mut da, false);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); sb[0] * sb[1]];
                    if *trans_b {
                        gemm_into(gm.t(), am, &mut db, false);
                    } else {
                        gemm_into(am.t(), gm, &mut db, false);
                    }
                    out.push((*b, db));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let dn = T::from_usize(d).expect("dim");
                if needs(*x) {
                    let mut dx = Vec::with_capacity(gy.len());
                    for ((grow, xrow), &r) in gy.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&g, &gn)| g * gn).collect();
                        let s1 = dxhat.iter().copied().sum::<T>();
                        let s2 = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                        for (&dh, &xh) in dxhat.iter().zip(xrow) {
                            dx.push(r / dn * (dn * dh - s1 - xh * s2));
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, xrow) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if needs(*bias) {
                    let mut db = vec![T::zero(); d];
                    for grow in gy.chunks(d) {
                        add_into(&mut db, grow);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().expect("non-scalar");
                let mut dx = Vec::with_capacity(gy.len());
                for (grow, yrow) in gy.chunks(d).zip(y.chunks(d)) {
                    let dot = grow.iter().zip(yrow).map(|(&g, &s)| g * s).sum::<T>();
                    dx.extend(grow.iter().zip(yrow).map(|(&g, &s)| s * (g - dot)));
                }
                out.push((*x, dx));
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, alen, inner) = split_axis(xs, *axis);
                let len = node.value.dim(*axis);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let alen = self.shape(p)[*axis];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(outer * alen * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gy[base..base + alen * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += alen;
                }
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::Patchify { x, patch } => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for_each_patch_pixel(s[1], s[2], s[3], *patch, |src, dst| dx[src] += gy[dst]);
                out.push((*x, dx));
            }
            Op::Unpatchify { x, patch } => {
                let s = node.value.shape();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for_each_patch_pixel(s[1], s[2], s[3], *patch, |img, tok| dx[tok] += gy[img]);
                out.push((*x, dx));
            }
            Op::SqError { out: o, target, weights } => {
                let ov = self.value(*o).data();
                let n = T::from_usize(ov.len()).expect("count");
                let g = gy[0];
                let two = T::one() + T::one();
                let dx = match weights {
                    Some(ws) => ov
                        .iter()
                        .zip(target)
                        .zip(ws)
                        .map(|((&a, &t), &m)| g * m * two * (a - t) / n)
                        .collect(),
                    None => ov
                        .iter()
                        .zip(target)
                        .map(|(&a, &t)| g * two * (a - t) / n)
                        .collect(),
                };
                out.push((*o, dx));
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
        }
        out
    }

    /// Parameter leaves with their accumulated gradients.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }
}

fn channel_sums<T: Scalar>(gy: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in gy.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    db
}

/// Calls `f(image_index, token_index)` for every in-bounds pixel of a
/// `[1, c, h, w]` image split into `patch x patch` tokens.
fn for_each_patch_pixel(c: usize, h: usize, w: usize, patch: usize, mut f: impl FnMut(usize, usize)) {
    let nw = w.div_ceil(patch);
    let feat = c * patch * patch;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let token = (y / patch) * nw + x / patch;
                let j = (ch * patch + y % patch) * patch + x % patch;
                f((ch * h + y) * w + x, token * feat + j);
            }
        }
    }
}
