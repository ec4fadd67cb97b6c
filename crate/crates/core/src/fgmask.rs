//! Per-pixel background model over raw depth and the smoothed soft
//! foreground masks derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frameio::{Frame, FrameKind, FrameSequence};
use crate::io::{self, GraySamples};

/// Background subtraction parameters. Depths are in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Noise-scale factor applied to the sensor noise model.
    pub k: f64,
    /// Axial noise coefficient: sigma [m] = k_kinect * z[m]^2.
    pub k_kinect: f64,
    /// Allowed cumulative background drift per history window, mm.
    pub delta_p_max_mm: f64,
    /// Background adaptation rate.
    pub alpha: f64,
    /// Frames a stable new depth must persist before it becomes background.
    pub t_w_frames: u32,
    /// History window length in frames.
    pub n_h_frames: u32,
    /// Lower bound on the foreground threshold, mm.
    pub noise_floor_mm: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            k: 1.25,
            k_kinect: 5e-4,
            delta_p_max_mm: 100.0,
            alpha: 0.4,
            t_w_frames: 300,
            n_h_frames: 90,
            noise_floor_mm: 10.0,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("K must be positive");
        }
        if !(self.k_kinect > 0.0 && self.k_kinect.is_finite()) {
            return bad("K_kinect must be positive");
        }
        if !(self.delta_p_max_mm > 0.0) {
            return bad("delta_P_max must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha out of range (0, 1]");
        }
        if self.t_w_frames < 1 {
            return bad("T_W must be at least 1 frame");
        }
        if self.n_h_frames < 1 {
            return bad("N_H must be at least 1 frame");
        }
        if !(self.noise_floor_mm >= 0.0 && self.noise_floor_mm.is_finite()) {
            return bad("noise floor must be >= 0");
        }
        Ok(())
    }

    /// Noise standard deviation at depth `z_mm`, in mm.
    pub fn sigma_mm(&self, z_mm: f64) -> f64 {
        self.k_kinect * z_mm * z_mm / 1000.0
    }

    /// Foreground decision threshold at depth `z_mm`, in mm.
    pub fn threshold_mm(&self, z_mm: f64) -> f64 {
        (self.k * self.sigma_mm(z_mm)).max(self.noise_floor_mm)
    }

    /// Short stable digest of the parameter values, used to key mask caches.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.k, self.k_kinect, self.delta_p_max_mm, self.alpha, self.noise_floor_mm] {
            h.update(v.to_le_bytes());
        }
        h.update(self.t_w_frames.to_le_bytes());
        h.update(self.n_h_frames.to_le_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelLabel {
    Background,
    Foreground,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelState {
    pub label: PixelLabel,
    /// `None` until the first valid observation, and again after a full
    /// history window of invalid observations.
    pub bg_depth: Option<f64>,
    pub stable_counter: u32,
    pub candidate_depth: f64,
    /// Consecutive invalid observations.
    pub invalid_run: u32,
    /// Absolute background change accumulated in the current window.
    pub drift_mm: f64,
}

impl PixelState {
    fn empty() -> Self {
        PixelState {
            label: PixelLabel::Background,
            bg_depth: None,
            stable_counter: 0,
            candidate_depth: 0.0,
            invalid_run: 0,
            drift_mm: 0.0,
        }
    }

    /// Advances this pixel by one observation and returns its raw mask bit.
    /// `window_start` is true on frames that open a new history window.
    pub fn step(&mut self, z: Option<f64>, p: &MaskParams, window_start: bool) -> u8 {
        if window_start {
            self.drift_mm = 0.0;
        }
        let Some(z) = z else {
            self.label = PixelLabel::Invalid;
            self.invalid_run = self.invalid_run.saturating_add(1);
            if self.invalid_run >= p.n_h_frames {
                self.bg_depth = None;
                self.stable_counter = 0;
            }
            return 0;
        };
        self.invalid_run = 0;
        let Some(bg) = self.bg_depth else {
            self.bg_depth = Some(z);
            self.label = PixelLabel::Background;
            self.stable_counter = 0;
            return 0;
        };
        let tau = p.threshold_mm(z);
        if (z - bg).abs() <= tau {
            let next = (1.0 - p.alpha) * bg + p.alpha * z;
            let change = (next - bg).abs();
            if self.drift_mm + change <= p.delta_p_max_mm {
                self.bg_depth = Some(next);
                self.drift_mm += change;
            }
            self.label = PixelLabel::Background;
            self.stable_counter = 0;
            return 0;
        }
        if self.label == PixelLabel::Foreground && (z - self.candidate_depth).abs() <= tau {
            self.stable_counter += 1;
        } else {
            self.stable_counter = 0;
        }
        self.candidate_depth = z;
        if self.stable_counter >= p.t_w_frames {
            self.bg_depth = Some(z);
            self.label = PixelLabel::Background;
            self.stable_counter = 0;
            return 0;
        }
        self.label = PixelLabel::Foreground;
        1
    }
}

/// Raw per-pixel foreground decision, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// Streaming background model for one depth sequence.
#[derive(Debug, Clone)]
pub struct BackgroundModel {
    width: usize,
    height: usize,
    params: MaskParams,
    pixels: Vec<PixelState>,
    frames_seen: u64,
}

impl BackgroundModel {
    pub fn new(width: usize, height: usize, params: MaskParams) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask model needs positive dimensions, got {width}x{height}"
            )));
        }
        params.validate()?;
        Ok(BackgroundModel {
            width,
            height,
            params,
            pixels: vec![PixelState::empty(); width * height],
            frames_seen: 0,
        })
    }

    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn pixel(&self, x: usize, y: usize) -> &PixelState {
        &self.pixels[y * self.width + x]
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn update(&mut self, frame: &Frame) -> Result<BinaryMask> {
        if frame.kind() != FrameKind::DepthRaw {
            return Err(Error::InvalidArgument(format!(
                "depth modality required, got {:?} frame",
                frame.kind()
            )));
        }
        if frame.width() != self.width || frame.height() != self.height {
            return Err(Error::Shape(format!(
                "frame is {}x{}, mask model is {}x{}",
                frame.width(),
                frame.height(),
                self.width,
                self.height
            )));
        }
        let window_start = self.frames_seen % self.params.n_h_frames as u64 == 0;
        let p = self.params;
        let bits = self
            .pixels
            .iter_mut()
            .zip(frame.values().iter().zip(frame.validity()))
            .map(|(px, (&z, &ok))| px.step(ok.then_some(z as f64), &p, window_start))
            .collect();
        self.frames_seen += 1;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }
}

/// Per-pixel foreground weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f32>,
}

impl SoftMask {
    /// 8-bit grayscale PNG with weight * 255.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let px: Vec<u8> = self.weights.iter().map(|&w| (w * 255.0).round() as u8).collect();
        io::encode_gray_png(self.width, self.height, GraySamples::Eight(&px))
    }
}

/// Side length of the smoothing kernel.
pub const KERNEL_SIZE: usize = 5;
/// Standard deviation of the smoothing kernel in pixels.
pub const KERNEL_SIGMA: f64 = 1.0;

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_taps() -> [f64; KERNEL_SIZE] {
    let r = (KERNEL_SIZE / 2) as f64;
    let mut taps = [0.0; KERNEL_SIZE];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Symmetric reflection (`d c b a | a b c d`), folded until in range.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// 5x5 Gaussian blur of a raw mask with reflected borders.
pub fn smooth_mask(raw: &BinaryMask) -> SoftMask {
    let (w, h) = (raw.width, raw.height);
    let taps = gaussian_taps();
    let r = (KERNEL_SIZE / 2) as isize;
    let mut rows = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &c) in taps.iter().enumerate() {
                let xx = reflect(x as isize + t as isize - r, w);
                acc += c * raw.bits[y * w + xx] as f64;
            }
            rows[y * w + x] = acc;
        }
    }
    let mut weights = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &c) in taps.iter().enumerate() {
                let yy = reflect(y as isize + t as isize - r, h);
                acc += c * rows[yy * w + x];
            }
            weights[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    SoftMask {
        width: w,
        height: h,
        weights,
    }
}

/// Runs the background model over a raw depth sequence, one soft mask per
/// frame.
pub fn mask_sequence(seq: &FrameSequence, params: &MaskParams) -> Result<Vec<SoftMask>> {
    params.validate()?;
    let Some((w, h)) = seq.dims() else {
        return Ok(Vec::new());
    };
    if seq.kind() != Some(FrameKind::DepthRaw) {
        return Err(Error::InvalidArgument(format!(
            "depth modality required for masks of {}",
            seq.sequence_id
        )));
    }
    let mut model = BackgroundModel::new(w, h, *params)?;
    seq.frames()
        .iter()
        .map(|f| model.update(f).map(|m| smooth_mask(&m)))
        .collect()
}

/// Writes `NNNNNN.png` mask images into `dir`.
pub fn export_masks(masks: &[SoftMask], dir: &Path) -> Result<()> {
    for (i, m) in masks.iter().enumerate() {
        io::atomic_write(&dir.join(format!("{i:06}.png")), &m.to_png()?)?;
    }
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"TOFADMSK";

/// On-disk mask cache keyed by sequence id and parameter digest.
#[derive(Debug, Clone)]
pub struct MaskCache {
    dir: PathBuf,
}

impl MaskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MaskCache { dir: dir.into() }
    }

    pub fn path_for(&self, sequence_id: &str, params: &MaskParams) -> PathBuf {
        self.dir.join(format!("{sequence_id}-{}.masks", params.hash_hex()))
    }

    /// Cached masks when present and well-formed, otherwise computes and
    /// stores them.
    pub fn get_or_compute(&self, seq: &FrameSequence, params: &MaskParams) -> Result<Vec<SoftMask>> {
        let path = self.path_for(&seq.sequence_id, params);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Some(masks) = decode_masks(&bytes) {
                if masks.len() == seq.len() && masks.first().map(|m| (m.width, m.height)) == seq.dims() {
                    return Ok(masks);
                }
            }
            log::warn!("ignoring stale mask cache {}", path.display());
        }
        let masks = mask_sequence(seq, params)?;
        io::atomic_write(&path, &encode_masks(&masks))?;
        Ok(masks)
    }
}

fn encode_masks(masks: &[SoftMask]) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    let (w, h) = masks.first().map_or((0, 0), |m| (m.width, m.height));
    for v in [masks.len(), w, h] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for m in masks {
        for &v in &m.weights {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_masks(bytes: &[u8]) -> Option<Vec<SoftMask>> {
    let rest = bytes.strip_prefix(CACHE_MAGIC.as_slice())?;
    let word = |i: usize| -> Option<usize> {
        Some(u64::from_le_bytes(rest.get(i * 8..i * 8 + 8)?.try_into().ok()?) as usize)
    };
    let (n, w, h) = (word(0)?, word(1)?, word(2)?);
    let body = &rest[24..];
    if body.len() != n.checked_mul(w)?.checked_mul(h)?.checked_mul(4)? {
        return None;
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Some(
        floats
            .chunks(w * h)
            .take(n)
            .map(|c| SoftMask {
                width: w,
                height: h,
                weights: c.to_vec(),
            })
            .collect(),
    )
}
