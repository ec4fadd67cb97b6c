//! Finite-difference oracles shared by the gradient and acceptance suites.
#![allow(dead_code)]

pub mod grad_suite;
pub mod mask_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tofad::models::Model;
use tofad::tensor::{Graph, ParamStore, Tensor, Var};
use tofad::Result;

pub const FD_STEP: f64 = 1e-4;
/// Step along a unit parameter direction for whole-model checks. Larger
/// steps cross ReLU and max-pool switch points in the deep models.
pub const JVP_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Scalar objective `sum(out * r)` for a fixed random projection `r`, so
/// every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let weights = g.constant(random_tensor(&mut r, &shape, -1.0, 1.0));
    let prod = g.mul(out, weights)?;
    Ok(g.sum(prod))
}

/// Largest elementwise relative error between the analytic gradient of
/// `sum(build(inputs) * r)` and central differences, over every element of
/// every input.
pub fn op_grad_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_error(inputs, &ParamStore::new(), |g, _, vars| build(g, vars))
}

/// As [`op_grad_error`], additionally checking every parameter in `store`.
pub fn grad_error<F>(inputs: &[Tensor<f64>], store: &ParamStore<f64>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], st: &ParamStore<f64>| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, st, &vars).expect("forward");
        let l = project(&mut g, out, 7).expect("projection");
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, store, &vars).expect("forward");
    let l = project(&mut g, out, 7).expect("projection");
    g.backward(l).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus, store) - eval(&minus, store)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], fd));
        }
    }
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.absorb_grads(&g);
    for (k, id) in store.ids().enumerate() {
        let analytic = &with_grads.iter().nth(k).expect("param").grad;
        for j in 0..store.value(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).value.data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).value.data_mut()[j] -= FD_STEP;
            let fd = (eval(inputs, &plus) - eval(inputs, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], fd));
        }
    }
    worst
}

/// Relative error of the directional derivative of a model loss along a
/// random unit-norm parameter direction: analytic `<grad, v>` against
/// central differences of the loss.
pub fn model_jvp_error(model: &Model<f64>, seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = model.input_shape();
    let input = random_tensor(&mut r, &shape, 0.0, 1.0);
    let npx = shape[2] * shape[3];
    let target: Vec<f64> = (0..npx).map(|_| r.gen_range(0.0..1.0)).collect();
    let mask: Vec<f64> = (0..npx).map(|_| r.gen_range(0.0..1.0)).collect();
    let loss_of = |m: &Model<f64>, track: bool| -> (f64, Graph<f64>, Var) {
        let mut g = if track { Graph::new() } else { Graph::inference() };
        let x = g.constant(input.clone());
        let y = m.forward(&mut g, x).expect("forward");
        let l = g.weighted_sq_error(y, &target, Some(&mask)).expect("loss");
        (g.value(l).item(), g, l)
    };
    let mut m = model.clone();
    let (_, mut g, l) = loss_of(&m, true);
    g.backward(l).expect("backward");
    m.params_mut().zero_grad();
    m.params_mut().absorb_grads(&g);
    let mut dirs: Vec<Vec<f64>> = m
        .params()
        .iter()
        .map(|p| (0..p.value.numel()).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
    dirs.iter_mut().flatten().for_each(|d| *d /= norm);
    let analytic: f64 = m
        .params()
        .iter()
        .zip(&dirs)
        .map(|(p, d)| p.grad.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |sign: f64| {
        let mut m2 = model.clone();
        for (p, d) in m2.params_mut().iter_mut().zip(&dirs) {
            for (v, dv) in p.value.data_mut().iter_mut().zip(d) {
                *v += sign * JVP_STEP * dv;
            }
        }
        loss_of(&m2, false).0
    };
    let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * JVP_STEP);
    rel_err(analytic, fd)
}

/// Mean intersection-over-union between the unsmoothed streaming mask and
/// the rendered footprint, over post-warm-up frames where either is
/// non-empty.
pub fn footprint_iou(rendered: &tofad::synth::Rendered) -> f64 {
    use tofad::fgmask::{BackgroundModel, MaskParams};
    let (w, h) = rendered.depth.dims().expect("frames");
    let mut model = BackgroundModel::new(w, h, MaskParams::default()).expect("model");
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, frame) in rendered.depth.frames().iter().enumerate() {
        let mask = model.update(frame).expect("mask update");
        if t < tofad::synth::WARMUP_FRAMES {
            continue;
        }
        let truth = &rendered.truth[t].weights;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&b, &g) in mask.bits.iter().zip(truth) {
            let (b, g) = (b != 0, g > 0.0);
            inter += (b && g) as usize;
            union += (b || g) as usize;
        }
        if union > 0 {
            total += inter as f64 / union as f64;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}
