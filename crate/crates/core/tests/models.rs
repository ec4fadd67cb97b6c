mod common;

use std::collections::BTreeMap;

use common::{random_tensor, rng};
use tofad::losses::mse;
use tofad::models::{conv_lstm_cell, ConvLstmCellParams, InputMode, Model, ModelKind, ModelSpec};
use tofad::tensor::{Adam, Checkpoint, Graph, ParamStore, Tensor};

/// Narrow tilted-view and wide top-down frame sizes, both with odd
/// intermediate sizes under repeated halving.
const GEOMETRIES: [(usize, usize); 2] = [(50, 38), (38, 66)];

fn conv(c: usize, f: usize) -> usize {
    c * f * 25 + f
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn closed_form_count(kind: ModelKind, h: usize, w: usize) -> usize {
    let chain = |plan: &[usize]| plan.windows(2).map(|p| conv(p[0], p[1])).sum::<usize>();
    match kind {
        ModelKind::Rcae => chain(&[1, 32, 16, 8]) + chain(&[8, 16, 32, 64]) + conv(64, 1),
        ModelKind::Pcae => chain(&[4, 64, 32, 16, 8, 4]) + chain(&[4, 4, 8, 16, 32, 64]) + conv(64, 1),
        ModelKind::Pconvlstm => {
            let cell = |input: usize| 4 * 8 * input * 25 + 4 * 8 * 8 * 25 + 4 * 8;
            cell(1) + 5 * cell(8) + conv(8, 1)
        }
        ModelKind::Rvit | ModelKind::Pvit => {
            let frames = if kind == ModelKind::Rvit { 1 } else { 4 };
            let tokens = h.div_ceil(16) * w.div_ceil(16);
            let linear = |i: usize, o: usize| i * o + o;
            let block = 2 * 16 + 4 * linear(8, 8) + linear(8, 32) + linear(32, 8);
            linear(frames * 256, 8) + tokens * 8 + 4 * block + 16 + linear(8, 256)
        }
    }
}

#[test]
fn output_is_one_frame_for_both_geometries() {
    for kind in ModelKind::ALL {
        for (h, w) in GEOMETRIES {
            let model = Model::<f32>::new(ModelSpec::new(kind, h, w).unwrap(), 0).unwrap();
            let frames = if kind.input_mode() == InputMode::Reconstruction { 1 } else { 4 };
            assert_eq!(model.input_shape(), [1, frames, h, w]);
            let out = model.predict(Tensor::zeros(&[1, frames, h, w])).unwrap();
            assert_eq!(out.shape(), &[1, 1, h, w], "{} at {h}x{w}", kind.label());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn rcae_on_64x64() {
    let model = Model::<f32>::new(ModelSpec::new(ModelKind::Rcae, 64, 64).unwrap(), 0).unwrap();
    let out = model.predict(Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    assert_eq!(out.shape(), &[1, 1, 64, 64]);
}

#[test]
fn parameter_counts_match_layer_arithmetic() {
    for kind in ModelKind::ALL {
        for (h, w) in GEOMETRIES.into_iter().chain([(64, 64), (32, 32)]) {
            let model = Model::<f32>::new(ModelSpec::new(kind, h, w).unwrap(), 0).unwrap();
            assert_eq!(model.num_params(), closed_form_count(kind, h, w), "{} at {h}x{w}", kind.label());
        }
    }
}

#[test]
fn too_small_inputs_are_rejected() {
    assert!(ModelSpec::new(ModelKind::Rcae, 4, 64).is_err());
    assert!(ModelSpec::new(ModelKind::Rcae, 64, 4).is_err());
    assert!(ModelSpec::new(ModelKind::Rcae, 8, 8).is_ok());
    assert!(ModelSpec::new(ModelKind::Pcae, 16, 64).is_err());
    assert!(ModelSpec::new(ModelKind::Pcae, 32, 32).is_ok());
    // Patch padding makes any size valid for the transformers.
    assert!(ModelSpec::new(ModelKind::Rvit, 5, 7).is_ok());
}

fn zero_all_but(model: &mut Model<f64>, keep: &str, value: f64) {
    for p in model.params_mut().iter_mut() {
        let v = if p.name == keep { value } else { 0.0 };
        p.value.data_mut().iter_mut().for_each(|x| *x = v);
    }
}

#[test]
fn zero_weights_give_sigmoid_of_head_bias() {
    for kind in ModelKind::ALL {
        let mut model = Model::<f64>::new(ModelSpec::new(kind, 32, 48).unwrap(), 1).unwrap();
        zero_all_but(&mut model, "head.bias", 0.3);
        let input = random_tensor(&mut rng(1), &model.input_shape(), 0.0, 1.0);
        let out = model.predict(input).unwrap();
        for &v in out.data() {
            assert!((v - sigmoid(0.3)).abs() < 1e-12, "{}: {v}", kind.label());
        }
    }
}

fn cell_store(hidden: usize, forget_bias: f64, weights: bool) -> (ParamStore<f64>, ConvLstmCellParams) {
    let mut store = ParamStore::new();
    let scale = if weights { 0.3 } else { 0.0 };
    let wx = random_tensor(&mut rng(5), &[4 * hidden, 1, 5, 5], -scale, scale + f64::MIN_POSITIVE);
    let wh = random_tensor(&mut rng(6), &[4 * hidden, hidden, 5, 5], -scale, scale + f64::MIN_POSITIVE);
    let b = Tensor::from_fn(&[4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { forget_bias } else { 0.0 });
    let p = ConvLstmCellParams {
        wx: store.add("wx", wx),
        wh: store.add("wh", wh),
        b: store.add("b", b),
        hidden,
    };
    (store, p)
}

#[test]
fn conv_lstm_cell_zero_case() {
    let (store, p) = cell_store(8, 0.0, false);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
    let h0 = g.constant(Tensor::zeros(&[1, 8, 6, 6]));
    let c0 = g.constant(Tensor::zeros(&[1, 8, 6, 6]));
    let (h, c) = conv_lstm_cell(&mut g, &store, &p, x, Some((h0, c0))).unwrap();
    assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(h), &[1, 8, 6, 6]);
}

#[test]
fn saturated_forget_gate_keeps_cell_state() {
    // Input gate closed by a large negative bias so only the carry remains.
    let (mut store, p) = cell_store(8, 20.0, true);
    for i in 0..8 {
        store.get_mut(p.b).value.data_mut()[i] = -40.0;
    }
    let mut g = Graph::<f64>::inference();
    let x = g.constant(random_tensor(&mut rng(7), &[1, 1, 6, 6], 0.0, 1.0));
    let h0 = g.constant(random_tensor(&mut rng(8), &[1, 8, 6, 6], -1.0, 1.0));
    let c_prev = random_tensor(&mut rng(9), &[1, 8, 6, 6], -1.0, 1.0);
    let c0 = g.constant(c_prev.clone());
    let (_, c) = conv_lstm_cell(&mut g, &store, &p, x, Some((h0, c0))).unwrap();
    for (a, b) in g.value(c).data().iter().zip(c_prev.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn prediction_models_see_frame_order() {
    for kind in [ModelKind::Pcae, ModelKind::Pconvlstm, ModelKind::Pvit] {
        let model = Model::<f64>::new(ModelSpec::new(kind, 32, 32).unwrap(), 2).unwrap();
        let clip = random_tensor(&mut rng(10), &[1, 4, 32, 32], 0.0, 1.0);
        let mut reversed = clip.clone();
        let frame = 32 * 32;
        for f in 0..4 {
            reversed.data_mut()[f * frame..(f + 1) * frame].copy_from_slice(&clip.data()[(3 - f) * frame..(4 - f) * frame]);
        }
        let a = model.predict(clip.clone()).unwrap();
        let b = model.predict(reversed).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "{} ignores frame order", kind.label());
        // No state carries over between calls.
        assert_eq!(model.predict(clip).unwrap(), a);
    }
}

#[test]
fn vit_tokens_and_embedding_difference() {
    let r = Model::<f32>::new(ModelSpec::new(ModelKind::Rvit, 64, 64).unwrap(), 0).unwrap();
    let p = Model::<f32>::new(ModelSpec::new(ModelKind::Pvit, 64, 64).unwrap(), 0).unwrap();
    let pos = r.params().iter().find(|q| q.name == "pos_embed").unwrap();
    assert_eq!(pos.value.shape(), &[16, 8]);
    let pos_p = p.params().iter().find(|q| q.name == "pos_embed").unwrap();
    assert_eq!(pos_p.value.shape(), pos.value.shape());
    assert_eq!(p.num_params() - r.num_params(), (4 - 1) * 256 * 8);
}

#[test]
fn one_small_adam_step_lowers_the_clip_loss() {
    for kind in ModelKind::ALL {
        for seed in 0..10 {
            let mut model = Model::<f64>::new(ModelSpec::new(kind, 32, 32).unwrap(), seed).unwrap();
            let mut r = rng(100 + seed);
            let input = random_tensor(&mut r, &model.input_shape(), 0.0, 1.0);
            let target: Vec<f64> = random_tensor(&mut r, &[32 * 32], 0.0, 1.0).into_data();
            let loss_of = |m: &Model<f64>, g: &mut Graph<f64>| {
                let x = g.constant(input.clone());
                let y = m.forward(g, x).unwrap();
                mse(g, y, &target).unwrap()
            };
            let mut g = Graph::new();
            let l = loss_of(&model, &mut g);
            let before = g.value(l).item();
            g.backward(l).unwrap();
            model.params_mut().zero_grad();
            model.params_mut().absorb_grads(&g);
            Adam::new(1e-4).step(model.params_mut());
            let mut g = Graph::inference();
            let l = loss_of(&model, &mut g);
            let after = g.value(l).item();
            assert!(after < before, "{} seed {seed}: {before} -> {after}", kind.label());
        }
    }
}

#[test]
fn checkpoint_round_trip_and_spec_guard() {
    for kind in ModelKind::ALL {
        let model = Model::<f32>::new(ModelSpec::new(kind, 40, 36).unwrap(), 4).unwrap();
        let bytes = model.to_checkpoint(BTreeMap::new()).to_bytes();
        let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let back = Model::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.params(), model.params());

        let other = ModelSpec::new(kind, 36, 40).unwrap();
        assert!(Model::from_checkpoint_expecting(&ckpt, &other).is_err());
        assert!(Model::from_checkpoint_expecting(&ckpt, model.spec()).is_ok());

        let mut tampered = ckpt.clone();
        tampered.metadata.insert("model_spec".into(), other.to_toml());
        assert!(Model::<f32>::from_checkpoint(&tampered).is_err());
    }
}

#[test]
fn spec_toml_round_trip_and_hash() {
    let a = ModelSpec::new(ModelKind::Pconvlstm, 48, 64).unwrap();
    let b = ModelSpec::from_toml(&a.to_toml()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash_hex(), b.hash_hex());
    assert_ne!(a.hash_hex(), ModelSpec::new(ModelKind::Pconvlstm, 64, 48).unwrap().hash_hex());
}

#[test]
fn initialization_is_seeded() {
    let spec = ModelSpec::new(ModelKind::Rvit, 32, 32).unwrap();
    let a = Model::<f32>::new(spec.clone(), 9).unwrap();
    let b = Model::<f32>::new(spec.clone(), 9).unwrap();
    let c = Model::<f32>::new(spec, 10).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}
