use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{frame_score, mask_values};
use crate::models::{InputMode, Model};

use super::train::input_tensor;
use super::{PreparedSequence, RunConfig};

/// Per-frame anomaly scores; `indices` are strictly increasing frame
/// indices aligned with `scores`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub sequence_id: String,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores frames `L..N` of `seq` with the run's loss and the causal mask of
/// each target frame. Frames before `L` are skipped for every model so all
/// networks are evaluated on the same frames.
pub fn score_sequence(model: &Model<f32>, seq: &PreparedSequence, config: &RunConfig) -> Result<ScoreSeries> {
    let spec = model.spec();
    let l = config.clip_length_frames;
    if spec.kind != config.model {
        return Err(Error::InvalidArgument(format!(
            "model is {}, config names {}",
            spec.kind.label(),
            config.model.label()
        )));
    }
    if spec.input_mode == InputMode::Prediction && spec.input_frames != l {
        return Err(Error::InvalidArgument(format!(
            "model takes {}-frame clips, config has clip_length_frames = {l}",
            spec.input_frames
        )));
    }
    let (w, h) = seq.dims().unwrap_or((spec.image_width, spec.image_height));
    if (w, h) != (spec.image_width, spec.image_height) {
        return Err(Error::Shape(format!(
            "sequence {} is {w}x{h}, model expects {}x{}",
            seq.sequence_id, spec.image_width, spec.image_height
        )));
    }
    let loss = config.loss_fn();
    if loss.kind.needs_mask() && seq.masks.is_none() {
        return Err(Error::InvalidArgument(format!(
            "sequence {} has no masks for {}",
            seq.sequence_id,
            loss.kind.label()
        )));
    }
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    for t in l..seq.len() {
        let input = input_tensor(spec, &seq.frames, t, |f| Ok(f.clone()))?;
        let mask = match &seq.masks {
            Some(ms) if loss.kind.needs_mask() => Some(mask_values::<f32>(&ms[t], w, h)?),
            _ => None,
        };
        let s = frame_score(model, input, seq.frames[t].values(), &loss, mask.as_deref())?;
        indices.push(t);
        scores.push(s);
    }
    Ok(ScoreSeries {
        sequence_id: seq.sequence_id.clone(),
        indices,
        scores,
    })
}

/// Trailing moving average over the up-to-`window` most recent scores.
pub fn smooth_scores(series: &ScoreSeries, window: usize) -> Result<ScoreSeries> {
    if window < 1 {
        return Err(Error::InvalidArgument("smoothing window must be >= 1".into()));
    }
    let s = &series.scores;
    let smoothed = (0..s.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            s[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    Ok(ScoreSeries {
        sequence_id: series.sequence_id.clone(),
        indices: series.indices.clone(),
        scores: smoothed,
    })
}
