//! Depth/IR frame sequences: loading, normalization, input noise, clips,
//! and anomaly annotations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, GraySamples};

/// Largest raw sample value of a 16-bit sensor image.
pub const RAW_MAX: f64 = 65535.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    /// Raw depth in millimeters.
    DepthRaw,
    /// Raw IR amplitude counts.
    IrRaw,
    /// Unitless network input.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Ir,
}

impl Modality {
    pub fn raw_kind(self) -> FrameKind {
        match self {
            Modality::Depth => FrameKind::DepthRaw,
            Modality::Ir => FrameKind::IrRaw,
        }
    }

    /// Subdirectory holding this modality inside a sequence directory.
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }
}

/// One single-channel image with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
    kind: FrameKind,
}

impl Frame {
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>, kind: FrameKind) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} values, got {} values / {} flags",
                width * height,
                values.len(),
                valid.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            values,
            valid,
            kind,
        })
    }

    /// Raw sensor frame; a sample of 0 marks an invalid measurement.
    pub fn from_raw(width: usize, height: usize, raw: &[u16], kind: FrameKind) -> Result<Self> {
        let values = raw.iter().map(|&v| v as f32).collect();
        let valid = raw.iter().map(|&v| v > 0).collect();
        Frame::new(width, height, values, valid, kind)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Raw samples rounded back to 16 bit.
    pub fn to_raw_u16(&self) -> Vec<u16> {
        self.values
            .iter()
            .map(|&v| v.round().clamp(0.0, RAW_MAX as f32) as u16)
            .collect()
    }
}

/// Frames of one recording in acquisition order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub sequence_id: String,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(sequence_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let sequence_id = sequence_id.into();
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate() {
                if f.width != first.width || f.height != first.height || f.kind != first.kind {
                    return Err(Error::Shape(format!(
                        "sequence {sequence_id}: frame {i} is {}x{} {:?}, frame 0 is {}x{} {:?}",
                        f.width, f.height, f.kind, first.width, first.height, first.kind
                    )));
                }
            }
        }
        Ok(FrameSequence { sequence_id, frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn kind(&self) -> Option<FrameKind> {
        self.frames.first().map(Frame::kind)
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }

    /// Applies a per-frame map, keeping the id.
    pub fn map(&self, f: impl Fn(&Frame) -> Result<Frame>) -> Result<FrameSequence> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        FrameSequence::new(self.sequence_id.clone(), frames)
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> FrameSequence {
        FrameSequence {
            sequence_id: self.sequence_id.clone(),
            frames: self.frames[..n.min(self.frames.len())].to_vec(),
        }
    }
}

fn frame_index(path: &Path) -> Result<u64> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Sequence {
            path: path.to_path_buf(),
            msg: "frame file name is not a decimal index".into(),
        });
    }
    stem.parse().map_err(|_| Error::Sequence {
        path: path.to_path_buf(),
        msg: "frame index out of range".into(),
    })
}

/// Loads `NNNNNN.png` frames (16-bit grayscale) from `dir` in index order.
/// Indices must be consecutive from 0; a raw value of 0 is invalid.
pub fn load_sequence(dir: &Path, modality: Modality) -> Result<FrameSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            files.push((frame_index(&path)?, path));
        }
    }
    files.sort();
    for (pos, pair) in files.windows(2).enumerate() {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Sequence {
                path: pair[1].1.clone(),
                msg: format!("duplicate frame index {}", pair[1].0),
            });
        }
        let _ = pos;
    }
    for (expected, (idx, path)) in files.iter().enumerate() {
        if *idx != expected as u64 {
            return Err(Error::Sequence {
                path: path.clone(),
                msg: format!("gap at index {expected}"),
            });
        }
    }
    let sequence_id = sequence_id_for(dir, modality);
    let mut frames = Vec::with_capacity(files.len());
    let mut dims = None;
    for (_, path) in &files {
        let (w, h, raw) = io::decode_gray16_png(path)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Sequence {
                    path: path.clone(),
                    msg: format!("frame is {w}x{h}, expected {}x{}", d.0, d.1),
                })
            }
            _ => {}
        }
        frames.push(Frame::from_raw(w, h, &raw, modality.raw_kind())?);
    }
    FrameSequence::new(sequence_id, frames)
}

/// The sequence id is the directory name, or its parent's name when the
/// directory is the `depth`/`ir` subdirectory of a sequence.
fn sequence_id_for(dir: &Path, modality: Modality) -> String {
    let name = |p: &Path| p.file_name().and_then(|n| n.to_str()).map(str::to_owned);
    match name(dir) {
        Some(n) if n == modality.dir_name() => dir.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => dir.display().to_string(),
    }
}

/// Writes a raw sequence as zero-padded 16-bit PNG files.
pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        let bytes = io::encode_gray_png(f.width, f.height, GraySamples::Sixteen(&f.to_raw_u16()))?;
        io::atomic_write(&dir.join(format!("{i:06}.png")), &bytes)?;
    }
    Ok(())
}

fn require_kind(frame: &Frame, kind: FrameKind) -> Result<()> {
    if frame.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {kind:?} frame, got {:?}",
            frame.kind
        )));
    }
    Ok(())
}

/// Linear depth map onto `[0, 1]` with 0 m as the minimum and `max_depth_m`
/// as the maximum. Invalid pixels become 0.
pub fn normalize_depth(frame: &Frame, max_depth_m: f64) -> Result<Frame> {
    require_kind(frame, FrameKind::DepthRaw)?;
    if !(max_depth_m > 0.0 && max_depth_m.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "max depth must be positive, got {max_depth_m}"
        )));
    }
    let values = frame
        .values
        .iter()
        .zip(&frame.valid)
        .map(|(&v, &ok)| {
            if ok {
                (v as f64 / 1000.0 / max_depth_m).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    Frame::new(frame.width, frame.height, values, frame.valid.clone(), FrameKind::Normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    E,
    Two,
    Ten,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::E => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }
}

/// Dynamic-range compression applied to IR amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IrMapping {
    /// `log(1 + x) / (2^16 - 1)`.
    Verbatim { base: LogBase },
    /// `ln(1 + x) / ln(2^16)`, which spans `[0, 1]`.
    UnitRange,
}

impl Default for IrMapping {
    fn default() -> Self {
        IrMapping::Verbatim { base: LogBase::E }
    }
}

impl IrMapping {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            IrMapping::Verbatim { base } => base.log(1.0 + x) / RAW_MAX,
            IrMapping::UnitRange => (1.0 + x).ln() / (RAW_MAX + 1.0).ln(),
        }
    }
}

/// Logarithmic IR mapping. Invalid pixels become 0.
pub fn normalize_ir(frame: &Frame, mapping: IrMapping) -> Result<Frame> {
    require_kind(frame, FrameKind::IrRaw)?;
    let values = frame
        .values
        .iter()
        .zip(&frame.valid)
        .map(|(&v, &ok)| if ok { mapping.apply(v as f64) as f32 } else { 0.0 })
        .collect();
    Frame::new(frame.width, frame.height, values, frame.valid.clone(), FrameKind::Normalized)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel and clamps to `[0, 1]`.
pub fn add_noise(frame: &Frame, sigma: f64, seed: u64) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(frame, sigma, &mut rng)
}

/// [`add_noise`] drawing from a caller-provided generator.
pub fn add_noise_with<R: rand::Rng>(frame: &Frame, sigma: f64, rng: &mut R) -> Result<Frame> {
    require_kind(frame, FrameKind::Normalized)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let values = frame
        .values
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Frame::new(frame.width, frame.height, values, frame.valid.clone(), FrameKind::Normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Reconstruction,
    Prediction,
}

/// Network input frames plus the frame the output is compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip<'a> {
    pub inputs: &'a [Frame],
    pub target: &'a Frame,
    pub target_index: usize,
}

/// Reconstruction: one clip per frame with the frame as its own target.
/// Prediction: the `len` frames preceding each target `len..N`.
pub fn make_clips(seq: &FrameSequence, mode: ClipMode, len: usize) -> Result<Vec<Clip<'_>>> {
    let frames = seq.frames();
    match mode {
        ClipMode::Reconstruction => {
            if frames.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "sequence {} too short: empty",
                    seq.sequence_id
                )));
            }
            Ok(frames
                .iter()
                .enumerate()
                .map(|(i, f)| Clip {
                    inputs: std::slice::from_ref(f),
                    target: f,
                    target_index: i,
                })
                .collect())
        }
        ClipMode::Prediction => {
            if len == 0 || frames.len() < len + 1 {
                return Err(Error::InvalidArgument(format!(
                    "sequence {} too short: {} frames for clips of {len}",
                    seq.sequence_id,
                    frames.len()
                )));
            }
            Ok((len..frames.len())
                .map(|t| Clip {
                    inputs: &frames[t - len..t],
                    target: &frames[t],
                    target_index: t,
                })
                .collect())
        }
    }
}

/// Anomaly categories used for per-category evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    AggressiveBehavior,
    MedicalIssue,
    LeftBehindObject,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::AggressiveBehavior,
        Category::MedicalIssue,
        Category::LeftBehindObject,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::AggressiveBehavior => "aggressive_behavior",
            Category::MedicalIssue => "medical_issue",
            Category::LeftBehindObject => "left_behind_object",
            Category::Other => "other",
        }
    }

    /// Parses a category name, ignoring case and punctuation.
    pub fn parse(token: &str) -> Option<Category> {
        let key: String = token
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "aggressive" | "aggressivebehavior" | "aggression" => Some(Category::AggressiveBehavior),
            "medical" | "medicalissue" | "potentialmedicalissue" => Some(Category::MedicalIssue),
            "leftbehind" | "leftbehindobject" | "leftbehindobjects" => Some(Category::LeftBehindObject),
            "other" => Some(Category::Other),
            _ => None,
        }
    }
}

/// User-supplied token -> category lookup (`token = category` lines).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMap {
    entries: BTreeMap<String, Category>,
}

impl CategoryMap {
    pub fn parse(text: &str) -> Result<CategoryMap> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Annotation(format!("category map line {}: expected key = value", n + 1)))?;
            let v = v.trim().trim_matches('"');
            let cat = Category::parse(v).ok_or_else(|| {
                Error::Annotation(format!("category map line {}: unknown category {v:?}", n + 1))
            })?;
            entries.insert(k.trim().trim_matches('"').to_string(), cat);
        }
        Ok(CategoryMap { entries })
    }

    pub fn load(path: &Path) -> Result<CategoryMap> {
        CategoryMap::parse(&io::read_to_string(path)?)
    }

    pub fn insert(&mut self, token: impl Into<String>, category: Category) {
        self.entries.insert(token.into(), category);
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", v.name()))
            .collect()
    }

    /// Map entries first, then the built-in category names.
    pub fn resolve(&self, token: &str) -> Option<Category> {
        self.entries.get(token).copied().or_else(|| Category::parse(token))
    }
}

/// One annotated anomalous interval (inclusive frame indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sequence_id: String,
    pub first_anomalous: usize,
    pub last_anomalous: usize,
    pub anomaly_type: String,
    pub category: Category,
}

/// Parsed annotation file. Rows whose first/last columns are `-` declare a
/// sequence without anomalies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationTable {
    pub anomalies: Vec<Annotation>,
    pub normal_sequences: Vec<String>,
    pub warnings: Vec<String>,
}

impl AnnotationTable {
    pub fn parse(text: &str, categories: &CategoryMap) -> Result<AnnotationTable> {
        let mut table = AnnotationTable::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let row = n + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let delim = if line.contains(',') { ',' } else { '\t' };
            let cols: Vec<&str> = line.split(delim).map(str::trim).collect();
            if row == 1 && cols.first() == Some(&"sequence_id") {
                continue;
            }
            if cols.len() != 5 {
                return Err(Error::Annotation(format!(
                    "row {row} ({line:?}): expected 5 columns, found {}",
                    cols.len()
                )));
            }
            let sequence_id = cols[0].to_string();
            if sequence_id.is_empty() {
                return Err(Error::Annotation(format!("row {row}: empty sequence id")));
            }
            if cols[1] == "-" && cols[2] == "-" {
                table.normal_sequences.push(sequence_id);
                continue;
            }
            let parse_idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Annotation(format!("row {row} ({line:?}): bad frame index {s:?}")))
            };
            let (first, last) = (parse_idx(cols[1])?, parse_idx(cols[2])?);
            if first > last {
                return Err(Error::Annotation(format!(
                    "row {row} ({line:?}): first frame {first} after last frame {last}"
                )));
            }
            let anomaly_type = cols[3].to_string();
            let category = match categories.resolve(cols[4]).or_else(|| categories.resolve(&anomaly_type)) {
                Some(c) => c,
                None => {
                    let msg = format!(
                        "row {row}: unknown category {:?} for {sequence_id}, using other",
                        cols[4]
                    );
                    log::warn!("{msg}");
                    table.warnings.push(msg);
                    Category::Other
                }
            };
            table.anomalies.push(Annotation {
                sequence_id,
                first_anomalous: first,
                last_anomalous: last,
                anomaly_type,
                category,
            });
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("sequence_id,first,last,anomaly_type,category\n");
        for a in &self.anomalies {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.sequence_id,
                a.first_anomalous,
                a.last_anomalous,
                a.anomaly_type,
                a.category.name()
            ));
        }
        for id in &self.normal_sequences {
            out.push_str(&format!("{id},-,-,none,none\n"));
        }
        out
    }

    /// True when the table mentions `sequence_id` at all.
    pub fn covers(&self, sequence_id: &str) -> bool {
        self.normal_sequences.iter().any(|s| s == sequence_id)
            || self.anomalies.iter().any(|a| a.sequence_id == sequence_id)
    }

    pub fn for_sequence<'a>(&'a self, sequence_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.anomalies.iter().filter(move |a| a.sequence_id == sequence_id)
    }

    /// Per-frame labels for a sequence of `len` frames, optionally limited
    /// to one category.
    pub fn labels(&self, sequence_id: &str, len: usize, category: Option<Category>) -> Result<LabelSeries> {
        let mut labels = vec![false; len];
        for a in self.for_sequence(sequence_id) {
            if category.is_some_and(|c| c != a.category) {
                continue;
            }
            if a.last_anomalous >= len {
                return Err(Error::Annotation(format!(
                    "{sequence_id}: anomaly ends at frame {} but the sequence has {len} frames",
                    a.last_anomalous
                )));
            }
            labels[a.first_anomalous..=a.last_anomalous].iter_mut().for_each(|l| *l = true);
        }
        Ok(LabelSeries {
            sequence_id: sequence_id.to_string(),
            labels,
        })
    }
}

/// Reads an annotation file, resolving categories through `categories`.
pub fn load_annotations(path: &Path, categories: &CategoryMap) -> Result<AnnotationTable> {
    AnnotationTable::parse(&io::read_to_string(path)?, categories)
}

impl Annotation {
    pub fn to_labels(&self, len: usize) -> Result<LabelSeries> {
        let table = AnnotationTable {
            anomalies: vec![self.clone()],
            ..Default::default()
        };
        table.labels(&self.sequence_id, len, None)
    }
}

/// Binary ground truth per frame index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub sequence_id: String,
    pub labels: Vec<bool>,
}

impl LabelSeries {
    pub fn anomalous_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}
