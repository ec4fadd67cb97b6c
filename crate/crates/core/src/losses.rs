//! Training objectives, which double as per-frame anomaly scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgmask::SoftMask;
use crate::models::Model;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Foreground weight of the weighted MSE.
pub const WMSE_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Fmse,
    Wmse,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Fmse, LossKind::Wmse];

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mse => "MSE",
            LossKind::Fmse => "F-MSE",
            LossKind::Wmse => "W-MSE",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Fmse => "fmse",
            LossKind::Wmse => "wmse",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mse" => Some(LossKind::Mse),
            "fmse" => Some(LossKind::Fmse),
            "wmse" => Some(LossKind::Wmse),
            _ => None,
        }
    }

    pub fn needs_mask(self) -> bool {
        self != LossKind::Mse
    }
}

/// A loss kind with its foreground factor (used only by W-MSE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub weight_factor: f64,
}

impl Loss {
    pub fn new(kind: LossKind) -> Self {
        Loss {
            kind,
            weight_factor: WMSE_FACTOR,
        }
    }

    /// Records the loss of `output` against `target` on `g`. `mask` is
    /// required for the foreground-aware kinds.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, output: Var, target: &[T], mask: Option<&[T]>) -> Result<Var> {
        let need = || {
            mask.ok_or_else(|| Error::InvalidArgument(format!("{} needs a foreground mask", self.kind.label())))
        };
        match self.kind {
            LossKind::Mse => mse(g, output, target),
            LossKind::Fmse => f_mse(g, output, target, need()?),
            LossKind::Wmse => w_mse_with(g, output, target, need()?, self.weight_factor),
        }
    }
}

/// `(1/n) sum (y_i - yhat_i)^2`.
pub fn mse<T: Scalar>(g: &mut Graph<T>, output: Var, target: &[T]) -> Result<Var> {
    g.weighted_sq_error(output, target, None)
}

/// `(1/n) sum m_i (y_i - yhat_i)^2` with `n` the full pixel count.
pub fn f_mse<T: Scalar>(g: &mut Graph<T>, output: Var, target: &[T], mask: &[T]) -> Result<Var> {
    g.weighted_sq_error(output, target, Some(mask))
}

/// `mse + 8 * f_mse`.
pub fn w_mse<T: Scalar>(g: &mut Graph<T>, output: Var, target: &[T], mask: &[T]) -> Result<Var> {
    w_mse_with(g, output, target, mask, WMSE_FACTOR)
}

pub fn w_mse_with<T: Scalar>(g: &mut Graph<T>, output: Var, target: &[T], mask: &[T], factor: f64) -> Result<Var> {
    let plain = mse(g, output, target)?;
    let fg = f_mse(g, output, target, mask)?;
    let fg = g.scale(fg, T::from_f64_lossy(factor));
    g.add(plain, fg)
}

/// Mask weights at precision `T`, checked against the frame size.
pub fn mask_values<T: Scalar>(mask: &SoftMask, width: usize, height: usize) -> Result<Vec<T>> {
    if mask.width != width || mask.height != height {
        return Err(Error::Shape(format!(
            "mask is {}x{}, frame is {width}x{height}",
            mask.width, mask.height
        )));
    }
    Ok(mask.weights.iter().map(|&w| T::from_f64_lossy(w as f64)).collect())
}

/// Loss of the model output against `target` without recording gradients.
pub fn frame_score<T: Scalar>(
    model: &Model<T>,
    input: Tensor<T>,
    target: &[T],
    loss: &Loss,
    mask: Option<&[T]>,
) -> Result<f64> {
    let mut g = Graph::inference();
    let x = g.constant(input);
    let y = model.forward(&mut g, x)?;
    let l = loss.apply(&mut g, y, target, mask)?;
    Ok(g.value(l).item().as_f64())
}
