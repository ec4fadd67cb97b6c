use std::path::Path;

use crate::error::{Error, Result};
use crate::fgmask::{mask_sequence, MaskCache, SoftMask};
use crate::frameio::{load_sequence, normalize_depth, normalize_ir, Frame, FrameSequence, Modality};

use super::RunConfig;

/// A sequence ready for the networks: normalized frames plus, when the
/// loss needs them, the foreground masks computed from raw depth.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub sequence_id: String,
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<SoftMask>>,
}

impl PreparedSequence {
    /// Normalizes `raw` (depth or IR per the config) and derives masks from
    /// `depth`, which must be the depth recording of the same sequence.
    pub fn from_raw(raw: &FrameSequence, depth: &FrameSequence, config: &RunConfig) -> Result<Self> {
        Self::build(raw, depth, config, None)
    }

    fn build(raw: &FrameSequence, depth: &FrameSequence, config: &RunConfig, cache: Option<&MaskCache>) -> Result<Self> {
        let frames = raw
            .frames()
            .iter()
            .map(|f| match config.modality {
                Modality::Depth => normalize_depth(f, config.max_depth_m),
                Modality::Ir => normalize_ir(f, config.ir_mapping),
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = if config.loss.needs_mask() {
            if depth.len() != raw.len() || depth.dims() != raw.dims() {
                return Err(Error::InvalidArgument(format!(
                    "sequence {}: depth and input recordings differ in length or size",
                    raw.sequence_id
                )));
            }
            Some(match cache {
                Some(c) => c.get_or_compute(depth, &config.mask)?,
                None => mask_sequence(depth, &config.mask)?,
            })
        } else {
            None
        };
        Ok(PreparedSequence {
            sequence_id: raw.sequence_id.clone(),
            frames,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width(), f.height()))
    }
}

/// Loads one sequence directory (`<dir>/depth`, optionally `<dir>/ir`).
pub fn load_prepared(dir: &Path, config: &RunConfig) -> Result<PreparedSequence> {
    let cache = config.data.mask_cache_dir.as_ref().map(MaskCache::new);
    let depth = load_sequence(&dir.join(Modality::Depth.dir_name()), Modality::Depth)?;
    match config.modality {
        Modality::Depth => PreparedSequence::build(&depth, &depth, config, cache.as_ref()),
        Modality::Ir => {
            let ir = load_sequence(&dir.join(Modality::Ir.dir_name()), Modality::Ir)?;
            PreparedSequence::build(&ir, &depth, config, cache.as_ref())
        }
    }
}

/// Sequence directories under a dataset root, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.join(Modality::Depth.dir_name()).is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Sequence {
            path: root.to_path_buf(),
            msg: "no sequence directories (expected <seq>/depth/)".into(),
        });
    }
    Ok(dirs)
}

/// Loads every sequence of a dataset root.
pub fn load_dataset(root: &Path, config: &RunConfig) -> Result<Vec<PreparedSequence>> {
    sequence_dirs(root)?.iter().map(|d| load_prepared(d, config)).collect()
}
