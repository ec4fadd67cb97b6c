//! Gradient cases shared by the gradient suite and the acceptance run.
//! Each case reports its name and worst relative error.

use super::{grad_error, model_jvp_error, op_grad_error, random_tensor, rng};
use tofad::losses::{Loss, LossKind};
use tofad::models::{conv_lstm_cell, ConvLstmCellParams, Model, ModelKind, ModelSpec};
use tofad::tensor::conv::Lowering;
use tofad::tensor::{multi_head_attention, AttentionParams, ParamStore, Tensor};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub type Case = (String, f64);

fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random_tensor(&mut rng(seed), shape, -1.0, 1.0)
}

fn scaled(mut t: Tensor<f64>, factor: f64) -> Tensor<f64> {
    t.data_mut().iter_mut().for_each(|v| *v *= factor);
    t
}

/// Uniform values in [-1, 1] kept at least `gap` away from zero, for ops
/// with a kink at the origin.
fn away_from_zero(seed: u64, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand(seed, shape);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v += gap.copysign(*v);
        }
    }
    t
}

pub fn conv() -> Vec<Case> {
    let x = rand(1, &[1, 3, 6, 5]);
    let w = rand(2, &[4, 3, 3, 3]);
    let b = rand(3, &[4]);
    let mut out = Vec::new();
    for lowering in [Lowering::ExpandInput, Lowering::ExpandOutput] {
        for pad in [0, 1, 2] {
            let err = op_grad_error(&[x.clone(), w.clone(), b.clone()], |g, v| {
                g.set_lowering(lowering);
                g.conv2d(v[0], v[1], Some(v[2]), pad)
            });
            out.push((format!("conv2d {lowering:?} pad {pad}"), err));
        }
    }
    let x = rand(4, &[1, 2, 4, 5]);
    let w = rand(5, &[2, 3, 5, 5]);
    let b = rand(6, &[3]);
    for pad in [0, 2] {
        let err = op_grad_error(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), pad));
        out.push((format!("conv_transpose2d pad {pad}"), err));
    }
    out
}

pub fn resampling() -> Vec<Case> {
    // Odd sizes exercise the floor in pooling and the zero fill in upsampling.
    let x = rand(7, &[1, 2, 7, 6]);
    let y = rand(8, &[1, 2, 3, 4]);
    vec![
        ("maxpool2".into(), op_grad_error(&[x], |g, v| g.maxpool2(v[0]))),
        ("upsample2 odd".into(), op_grad_error(&[y.clone()], |g, v| g.upsample2(v[0], 7, 9))),
        ("upsample2".into(), op_grad_error(&[y], |g, v| g.upsample2(v[0], 6, 8))),
    ]
}

pub fn elementwise() -> Vec<Case> {
    let a = away_from_zero(9, &[2, 3, 4], 1e-2);
    let b = rand(10, &[2, 3, 4]);
    vec![
        ("relu".into(), op_grad_error(&[a.clone()], |g, v| Ok(g.relu(v[0])))),
        ("sigmoid".into(), op_grad_error(&[b.clone()], |g, v| Ok(g.sigmoid(v[0])))),
        ("tanh".into(), op_grad_error(&[b.clone()], |g, v| Ok(g.tanh(v[0])))),
        ("scale".into(), op_grad_error(&[b.clone()], |g, v| Ok(g.scale(v[0], -2.5)))),
        ("add".into(), op_grad_error(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub".into(), op_grad_error(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul".into(), op_grad_error(&[a.clone(), b], |g, v| g.mul(v[0], v[1]))),
        ("mul self".into(), op_grad_error(&[a], |g, v| g.mul(v[0], v[0]))),
    ]
}

pub fn dense() -> Vec<Case> {
    let x = rand(11, &[5, 6]);
    let w = rand(12, &[3, 6]);
    let b = rand(13, &[3]);
    let m = rand(14, &[6, 4]);
    let n = rand(15, &[4, 6]);
    let gain = rand(16, &[6]);
    let bias = rand(17, &[6]);
    let logits = random_tensor(&mut rng(18), &[4, 5], -3.0, 3.0);
    vec![
        ("linear".into(), op_grad_error(&[x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("linear no bias".into(), op_grad_error(&[x.clone(), w], |g, v| g.linear(v[0], v[1], None))),
        ("matmul".into(), op_grad_error(&[x.clone(), m], |g, v| g.matmul(v[0], v[1], false))),
        ("matmul transposed".into(), op_grad_error(&[x.clone(), n], |g, v| g.matmul(v[0], v[1], true))),
        (
            "layer_norm".into(),
            op_grad_error(&[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("softmax".into(), op_grad_error(&[logits], |g, v| g.softmax(v[0]))),
    ]
}

pub fn shape() -> Vec<Case> {
    let x = rand(19, &[1, 3, 5, 7]);
    let y = rand(20, &[1, 2, 5, 7]);
    let tokens = rand(21, &[4, 3 * 16]);
    vec![
        ("slice".into(), op_grad_error(&[x.clone()], |g, v| g.slice(v[0], 1, 1, 2))),
        ("slice last axis".into(), op_grad_error(&[x.clone()], |g, v| g.slice(v[0], 3, 2, 4))),
        ("concat".into(), op_grad_error(&[x.clone(), y], |g, v| g.concat(&[v[0], v[1], v[0]], 1))),
        ("reshape".into(), op_grad_error(&[x.clone()], |g, v| g.reshape(v[0], &[15, 7]))),
        ("patchify".into(), op_grad_error(&[x], |g, v| g.patchify(v[0], 4))),
        ("unpatchify".into(), op_grad_error(&[tokens], |g, v| g.unpatchify(v[0], 3, 5, 7, 4))),
    ]
}

pub fn reductions_and_losses() -> Vec<Case> {
    let out = rand(22, &[1, 1, 4, 5]);
    let target: Vec<f64> = rand(23, &[20]).into_data();
    let mask: Vec<f64> = random_tensor(&mut rng(24), &[20], 0.0, 1.0).into_data();
    let mut cases: Vec<Case> = vec![
        ("sum".into(), op_grad_error(&[out.clone()], |g, v| Ok(g.sum(v[0])))),
        (
            "weighted_sq_error".into(),
            op_grad_error(&[out.clone()], |g, v| g.weighted_sq_error(v[0], &target, Some(&mask))),
        ),
    ];
    for kind in LossKind::ALL {
        let loss = Loss::new(kind);
        let err = op_grad_error(&[out.clone()], |g, v| loss.apply(g, v[0], &target, Some(&mask)));
        cases.push((kind.label().into(), err));
    }
    cases
}

pub fn attention() -> Vec<Case> {
    let dim = 8;
    let mut store = ParamStore::new();
    let mut k = 100;
    let mut add = |store: &mut ParamStore<f64>, name: &str, shape: &[usize]| {
        k += 1;
        store.add(name, rand(k, shape))
    };
    let p = AttentionParams {
        wq: add(&mut store, "wq", &[dim, dim]),
        bq: add(&mut store, "bq", &[dim]),
        wk: add(&mut store, "wk", &[dim, dim]),
        bk: add(&mut store, "bk", &[dim]),
        wv: add(&mut store, "wv", &[dim, dim]),
        bv: add(&mut store, "bv", &[dim]),
        wo: add(&mut store, "wo", &[dim, dim]),
        bo: add(&mut store, "bo", &[dim]),
    };
    let x = rand(25, &[5, dim]);
    let kv = rand(26, &[3, dim]);
    vec![
        (
            "attention self".into(),
            grad_error(&[x.clone()], &store, |g, st, v| multi_head_attention(g, st, &p, v[0], v[0], v[0], 2)),
        ),
        (
            "attention cross".into(),
            grad_error(&[x, kv], &store, |g, st, v| multi_head_attention(g, st, &p, v[0], v[1], v[1], 2)),
        ),
    ]
}

pub fn conv_lstm_cell_case() -> Vec<Case> {
    let hidden = 8;
    let mut store = ParamStore::new();
    let p = ConvLstmCellParams {
        wx: store.add("wx", scaled(rand(30, &[4 * hidden, 1, 5, 5]), 0.2)),
        wh: store.add("wh", scaled(rand(31, &[4 * hidden, hidden, 5, 5]), 0.1)),
        b: store.add("b", rand(32, &[4 * hidden])),
        hidden,
    };
    let x = rand(33, &[1, 1, 6, 6]);
    let h = rand(34, &[1, hidden, 6, 6]);
    let c = rand(35, &[1, hidden, 6, 6]);
    vec![
        (
            "conv_lstm_cell".into(),
            grad_error(&[x.clone(), h, c], &store, |g, st, v| {
                let (h, c) = conv_lstm_cell(g, st, &p, v[0], Some((v[1], v[2])))?;
                g.concat(&[h, c], 1)
            }),
        ),
        (
            "conv_lstm_cell zero state".into(),
            grad_error(&[x], &store, |g, st, v| {
                let (h, c) = conv_lstm_cell(g, st, &p, v[0], None)?;
                g.concat(&[h, c], 1)
            }),
        ),
    ]
}

pub fn all_ops() -> Vec<Case> {
    [conv(), resampling(), elementwise(), dense(), shape(), reductions_and_losses(), attention(), conv_lstm_cell_case()]
        .concat()
}

/// Directional-derivative checks of every architecture at 32x32.
pub fn models() -> Vec<Case> {
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        let model = Model::<f64>::new(ModelSpec::new(kind, 32, 32).unwrap(), 3).unwrap();
        for seed in [1, 2, 3] {
            out.push((format!("{} seed {seed}", kind.label()), model_jvp_error(&model, seed)));
        }
    }
    out
}
