use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tofad::engine::auc_roc;
use tofad::fgmask::{smooth_mask, BackgroundModel, MaskParams};
use tofad::frameio::{Frame, FrameKind};
use tofad::losses::{Loss, LossKind};
use tofad::models::{Model, ModelKind, ModelSpec};
use tofad::tensor::conv::Lowering;
use tofad::tensor::{Graph, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[1, 32, 32, 32], |_| rng.gen_range(-1.0f32..1.0));
    let w = Tensor::from_fn(&[32, 32, 3, 3], |_| rng.gen_range(-0.1f32..0.1));
    let mut group = c.benchmark_group("conv2d_32x32x32_k3");
    for lowering in [Lowering::ExpandInput, Lowering::ExpandOutput] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{lowering:?}")), &lowering, |b, &l| {
            b.iter(|| {
                let mut g = Graph::<f32>::inference().with_lowering(l);
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                black_box(g.conv2d(xv, wv, None, 1).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_64x64");
    group.sample_size(10);
    for kind in ModelKind::ALL {
        let mut model: Model<f32> = Model::new(ModelSpec::new(kind, 64, 64).unwrap(), 1).unwrap();
        let input = Tensor::from_fn(&model.input_shape(), |i| (i % 17) as f32 / 17.0);
        let target = vec![0.3f32; 64 * 64];
        let mask = vec![0.5f32; 64 * 64];
        group.bench_function(kind.label(), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(input.clone());
                let y = model.forward(&mut g, x).unwrap();
                let l = Loss::new(LossKind::Wmse).apply(&mut g, y, &target, Some(&mask)).unwrap();
                g.backward(l).unwrap();
                model.params_mut().zero_grad();
                model.params_mut().absorb_grads(&g);
            })
        });
    }
    group.finish();
}

fn mask_update(c: &mut Criterion) {
    let (w, h) = (64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames: Vec<Frame> = (0..32)
        .map(|_| {
            let raw: Vec<u16> = (0..w * h).map(|_| rng.gen_range(2590..2610)).collect();
            Frame::from_raw(w, h, &raw, FrameKind::DepthRaw).unwrap()
        })
        .collect();
    let mut model = BackgroundModel::new(w, h, MaskParams::default()).unwrap();
    let mut i = 0;
    c.bench_function("mask_update_and_smooth_64x64", |b| {
        b.iter(|| {
            let raw = model.update(&frames[i % frames.len()]).unwrap();
            i += 1;
            black_box(smooth_mask(&raw))
        })
    });
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.3)).collect();
    c.bench_function("auc_roc_10k", |b| b.iter(|| black_box(auc_roc(&scores, &labels).unwrap())));
}

criterion_group!(benches, conv, train_step, mask_update, auc);
criterion_main!(benches);
