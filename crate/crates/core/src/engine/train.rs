use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frameio::{add_noise_with, Frame};
use crate::io;
use crate::losses::mask_values;
use crate::models::{InputMode, Model, ModelSpec};
use crate::tensor::{Adam, Checkpoint, Graph, Tensor};

use super::{PreparedSequence, RunConfig};

/// RNG stream ids derived from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Trained model plus the per-step training losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<f64>,
}

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Frame size shared by all sequences.
pub(crate) fn common_dims(seqs: &[PreparedSequence]) -> Result<(usize, usize)> {
    let first = seqs
        .iter()
        .find_map(|s| s.dims())
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    for s in seqs {
        if let Some(d) = s.dims() {
            if d != first {
                return Err(Error::Shape(format!(
                    "sequence {} is {}x{}, others are {}x{}",
                    s.sequence_id, d.0, d.1, first.0, first.1
                )));
            }
        }
    }
    Ok(first)
}

/// Model spec a run config implies for `width x height` frames.
pub fn spec_for(config: &RunConfig, width: usize, height: usize) -> Result<ModelSpec> {
    ModelSpec::with_clip_length(config.model, height, width, config.clip_length_frames)
}

/// First target index usable for training: every frame for reconstruction,
/// frames with a full history for prediction.
fn first_target(spec: &ModelSpec) -> usize {
    match spec.input_mode {
        InputMode::Reconstruction => 0,
        InputMode::Prediction => spec.input_frames,
    }
}

/// Stacks the model inputs for target `t` into `[1, F, H, W]`.
pub(crate) fn input_tensor(spec: &ModelSpec, frames: &[Frame], t: usize, mut noisy: impl FnMut(&Frame) -> Result<Frame>) -> Result<Tensor<f32>> {
    let range = match spec.input_mode {
        InputMode::Reconstruction => t..t + 1,
        InputMode::Prediction => t - spec.input_frames..t,
    };
    let mut data = Vec::with_capacity(range.len() * spec.image_height * spec.image_width);
    for f in &frames[range] {
        data.extend_from_slice(noisy(f)?.values());
    }
    Tensor::new(&[1, spec.input_frames, spec.image_height, spec.image_width], data)
}

/// Trains a fresh model for `config.epochs` passes over every clip of
/// `sequences` in seeded random order, batch size one.
pub fn train(config: &RunConfig, sequences: &[PreparedSequence]) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (w, h) = common_dims(sequences)?;
    let spec = spec_for(config, w, h)?;
    let mut model: Model<f32> = Model::new(spec.clone(), config.seed)?;
    let loss = config.loss_fn();
    let start = first_target(&spec);
    let mut clips: Vec<(usize, usize)> = Vec::new();
    for (si, s) in sequences.iter().enumerate() {
        clips.extend((start..s.len()).map(|t| (si, t)));
    }
    if clips.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training clips: sequences are shorter than {} frames",
            start + 1
        )));
    }
    let masks: Vec<Option<Vec<Vec<f32>>>> = sequences
        .iter()
        .map(|s| {
            s.masks
                .as_ref()
                .map(|ms| ms.iter().map(|m| mask_values(m, w, h)).collect::<Result<Vec<_>>>())
                .transpose()
        })
        .collect::<Result<_>>()?;

    let mut shuffle_rng = rng_stream(config.seed, STREAM_SHUFFLE);
    let mut noise_rng = rng_stream(config.seed, STREAM_NOISE);
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(clips.len() * config.epochs);
    let total = clips.len() * config.epochs;
    for epoch in 0..config.epochs {
        clips.shuffle(&mut shuffle_rng);
        for &(si, t) in &clips {
            let seq = &sequences[si];
            let input = input_tensor(&spec, &seq.frames, t, |f| {
                add_noise_with(f, config.noise_sigma, &mut noise_rng)
            })?;
            let mask = masks[si].as_ref().map(|m| m[t].as_slice());
            let mut g = Graph::new();
            let x = g.constant(input);
            let y = model.forward(&mut g, x)?;
            let l = loss.apply(&mut g, y, seq.frames[t].values(), mask)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::Eval(format!("training diverged at step {}", losses.len())));
            }
            g.backward(l)?;
            let params = model.params_mut();
            params.zero_grad();
            params.absorb_grads(&g);
            adam.step(params);
            losses.push(value);
            if losses.len() % 500 == 0 {
                log::info!("epoch {epoch} step {}/{total} loss {value:.6}", losses.len());
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Checkpoint metadata key holding the run config snapshot.
pub const CONFIG_KEY: &str = "run_config";

/// Saves the model with the config snapshot that produced it.
pub fn save_checkpoint(model: &Model<f32>, config: &RunConfig, path: &Path) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert(CONFIG_KEY.to_string(), config.to_toml());
    io::atomic_write(path, &model.to_checkpoint(meta).to_bytes())
}

/// Loads a model and its config snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes)?;
    let config = ckpt
        .metadata
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::Checkpoint("missing run config snapshot".into()))
        .and_then(|t| RunConfig::from_toml(t).map_err(|e| Error::Checkpoint(e.to_string())))?;
    let model = Model::from_checkpoint(&ckpt)?;
    if model.spec().kind != config.model {
        return Err(Error::Checkpoint("model kind differs from config snapshot".into()));
    }
    Ok((model, config))
}
