//! The five autoencoder architectures, built from declarative specs.

mod cae;
mod convlstm;
mod vit;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub use convlstm::{conv_lstm_cell, ConvLstmCellParams};

/// Kernel size shared by every convolution.
pub const KERNEL: usize = 5;
/// Default frames per clip for prediction models.
pub const CLIP_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rcae,
    Pcae,
    Pconvlstm,
    Rvit,
    Pvit,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Rcae,
        ModelKind::Pcae,
        ModelKind::Pconvlstm,
        ModelKind::Rvit,
        ModelKind::Pvit,
    ];

    pub fn input_mode(self) -> InputMode {
        match self {
            ModelKind::Rcae | ModelKind::Rvit => InputMode::Reconstruction,
            _ => InputMode::Prediction,
        }
    }

    /// Display name as used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Rcae => "R-CAE",
            ModelKind::Pcae => "P-CAE",
            ModelKind::Pconvlstm => "P-ConvLSTM",
            ModelKind::Rvit => "R-ViT-AE",
            ModelKind::Pvit => "P-ViT-AE",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            ModelKind::Rcae => "rcae",
            ModelKind::Pcae => "pcae",
            ModelKind::Pconvlstm => "pconvlstm",
            ModelKind::Rvit => "rvit",
            ModelKind::Pvit => "pvit",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "rcae" => Some(ModelKind::Rcae),
            "pcae" => Some(ModelKind::Pcae),
            "pconvlstm" => Some(ModelKind::Pconvlstm),
            "rvit" | "rvitae" => Some(ModelKind::Rvit),
            "pvit" | "pvitae" => Some(ModelKind::Pvit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Reconstruction,
    Prediction,
}

/// Layer-level description of an architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LayerPlan {
    /// Conv + pool encoder, transposed conv + upsample decoder.
    Cae {
        encoder: Vec<usize>,
        decoder: Vec<usize>,
        transposed_head: bool,
    },
    ConvLstm { cells: usize, hidden: usize },
    Vit {
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_mode: InputMode,
    pub image_height: usize,
    pub image_width: usize,
    /// Frames per input clip: 1 for reconstruction, the clip length for
    /// prediction.
    pub input_frames: usize,
    pub plan: LayerPlan,
}

impl ModelSpec {
    /// Standard layer plan of `kind` for `h x w` frames.
    pub fn new(kind: ModelKind, h: usize, w: usize) -> Result<ModelSpec> {
        ModelSpec::with_clip_length(kind, h, w, CLIP_LEN)
    }

    /// As [`ModelSpec::new`] with prediction clips of `clip_len` frames.
    pub fn with_clip_length(kind: ModelKind, h: usize, w: usize, clip_len: usize) -> Result<ModelSpec> {
        let plan = match kind {
            ModelKind::Rcae => LayerPlan::Cae {
                encoder: vec![32, 16, 8],
                decoder: vec![16, 32, 64],
                transposed_head: false,
            },
            ModelKind::Pcae => LayerPlan::Cae {
                encoder: vec![64, 32, 16, 8, 4],
                decoder: vec![4, 8, 16, 32, 64],
                transposed_head: true,
            },
            ModelKind::Pconvlstm => LayerPlan::ConvLstm { cells: 6, hidden: 8 },
            ModelKind::Rvit | ModelKind::Pvit => LayerPlan::Vit {
                patch: 16,
                dim: 8,
                depth: 4,
                heads: 2,
                mlp_dim: 32,
            },
        };
        let spec = ModelSpec {
            kind,
            input_mode: kind.input_mode(),
            image_height: h,
            image_width: w,
            input_frames: match kind.input_mode() {
                InputMode::Reconstruction => 1,
                InputMode::Prediction => clip_len,
            },
            plan,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if self.input_mode != self.kind.input_mode() {
            return Err(Error::InvalidArgument(format!(
                "{} requires {:?} input",
                self.kind.label(),
                self.kind.input_mode()
            )));
        }
        let frames_ok = match self.input_mode {
            InputMode::Reconstruction => self.input_frames == 1,
            InputMode::Prediction => self.input_frames >= 1,
        };
        if !frames_ok {
            return Err(Error::InvalidArgument(format!(
                "{} cannot take {} input frames",
                self.kind.label(),
                self.input_frames
            )));
        }
        match &self.plan {
            LayerPlan::Cae { encoder, decoder, .. } => {
                if encoder.len() != decoder.len() || encoder.is_empty() {
                    return Err(Error::InvalidArgument("encoder and decoder depth differ".into()));
                }
                let min = 1usize << encoder.len();
                if h < min || w < min {
                    return Err(Error::InvalidArgument(format!(
                        "{} needs frames of at least {min}x{min} for {} poolings, got {h}x{w}",
                        self.kind.label(),
                        encoder.len()
                    )));
                }
            }
            LayerPlan::ConvLstm { cells, hidden } => {
                if *cells == 0 || *hidden == 0 || h == 0 || w == 0 {
                    return Err(Error::InvalidArgument("empty ConvLSTM plan or frame".into()));
                }
            }
            LayerPlan::Vit { patch, dim, heads, depth, mlp_dim } => {
                if *patch == 0 || *dim == 0 || *heads == 0 || dim % heads != 0 || *depth == 0 || *mlp_dim == 0 {
                    return Err(Error::InvalidArgument(format!("invalid ViT plan {:?}", self.plan)));
                }
                if h == 0 || w == 0 {
                    return Err(Error::InvalidArgument("empty frame".into()));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form stored with checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Digest of the canonical form, guarding checkpoint/architecture pairs.
    pub fn hash_hex(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Cae(cae::CaeLayout),
    ConvLstm(convlstm::ConvLstmLayout),
    Vit(vit::VitLayout),
}

/// Instantiated architecture: spec plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    layout: Layout,
}

/// Parameter initializer drawing in f64 so every precision sees the same
/// starting point.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform fan-in scaling, bound `sqrt(6 / fan_in)`.
    pub(crate) fn he<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)))
    }

    pub(crate) fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)))
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the model described by `spec` with seeded initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Model<T>> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let layout = match &spec.plan {
            LayerPlan::Cae { .. } => Layout::Cae(cae::CaeLayout::build(&spec, &mut params, &mut init)),
            LayerPlan::ConvLstm { .. } => {
                Layout::ConvLstm(convlstm::ConvLstmLayout::build(&spec, &mut params, &mut init))
            }
            LayerPlan::Vit { .. } => Layout::Vit(vit::VitLayout::build(&spec, &mut params, &mut init)),
        };
        Ok(Model { spec, params, layout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Shape of the input tensor: `[1, frames, H, W]`.
    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.spec.input_frames, self.spec.image_height, self.spec.image_width]
    }

    /// Records the forward pass on `g`; `x` is `[1, frames, H, W]`, the
    /// result is `[1, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x) != self.input_shape() {
            return Err(Error::Shape(format!(
                "{} expects input {:?}, got {:?}",
                self.spec.kind.label(),
                self.input_shape(),
                g.shape(x)
            )));
        }
        match &self.layout {
            Layout::Cae(l) => l.forward(g, &self.params, x),
            Layout::ConvLstm(l) => l.forward(g, &self.params, x),
            Layout::Vit(l) => l.forward(g, &self.params, x, &self.spec),
        }
    }

    /// Inference on a single input tensor.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(input);
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Checkpoint carrying the spec and its hash alongside `extra` metadata.
    pub fn to_checkpoint(&self, mut extra: BTreeMap<String, String>) -> Checkpoint<T> {
        extra.insert("model_spec".into(), self.spec.to_toml());
        extra.insert("model_spec_hash".into(), self.spec.hash_hex());
        Checkpoint::from_params(&self.params, extra)
    }

    /// Rebuilds a model from a checkpoint, refusing mismatched architectures.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Model<T>> {
        let text = ckpt
            .metadata
            .get("model_spec")
            .ok_or_else(|| Error::Checkpoint("missing model_spec".into()))?;
        let spec = ModelSpec::from_toml(text)?;
        let stored = ckpt.metadata.get("model_spec_hash").map(String::as_str).unwrap_or_default();
        if stored != spec.hash_hex() {
            return Err(Error::Checkpoint(format!(
                "model spec hash mismatch: stored {stored}, computed {}",
                spec.hash_hex()
            )));
        }
        let mut model = Model::new(spec, 0)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }

    /// Like [`Model::from_checkpoint`] but also requires `expected`.
    pub fn from_checkpoint_expecting(ckpt: &Checkpoint<T>, expected: &ModelSpec) -> Result<Model<T>> {
        let model = Model::from_checkpoint(ckpt)?;
        if model.spec.hash_hex() != expected.hash_hex() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} {}x{}, expected {} {}x{}",
                model.spec.kind.label(),
                model.spec.image_height,
                model.spec.image_width,
                expected.kind.label(),
                expected.image_height,
                expected.image_width
            )));
        }
        Ok(model)
    }
}

/// Adds a conv weight `[f, c, k, k]` and zero bias `[f]`.
pub(crate) fn add_conv<T: Scalar>(
    params: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    c: usize,
    f: usize,
) -> (ParamId, ParamId) {
    let w = params.add(format!("{name}.weight"), init.he(&[f, c, KERNEL, KERNEL], c * KERNEL * KERNEL));
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[f]));
    (w, b)
}

/// Adds a transposed-conv weight `[c, f, k, k]` and zero bias `[f]`.
pub(crate) fn add_tconv<T: Scalar>(
    params: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    c: usize,
    f: usize,
) -> (ParamId, ParamId) {
    let w = params.add(format!("{name}.weight"), init.he(&[c, f, KERNEL, KERNEL], c * KERNEL * KERNEL));
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[f]));
    (w, b)
}

pub fn build_rcae<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelSpec::new(ModelKind::Rcae, h, w)?, seed)
}

pub fn build_pcae<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelSpec::new(ModelKind::Pcae, h, w)?, seed)
}

pub fn build_pconvlstm<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelSpec::new(ModelKind::Pconvlstm, h, w)?, seed)
}

pub fn build_rvit<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelSpec::new(ModelKind::Rvit, h, w)?, seed)
}

pub fn build_pvit<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelSpec::new(ModelKind::Pvit, h, w)?, seed)
}
