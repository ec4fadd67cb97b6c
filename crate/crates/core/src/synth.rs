//! Deterministic synthetic depth scenes with known foreground, anomalies
//! and labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgmask::SoftMask;
use crate::frameio::{
    write_sequence, Annotation, AnnotationTable, Category, CategoryMap, Frame, FrameKind, FrameSequence, LabelSeries,
};
use crate::io::{self, GraySamples};

/// Frames of empty scene at the start of every rendered sequence.
pub const WARMUP_FRAMES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disk { radius_px: f64 },
    Rect { width_px: f64, height_px: f64 },
}

impl Shape {
    /// Half extent along x and y.
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { radius_px } => (radius_px, radius_px),
            Shape::Rect { width_px, height_px } => (width_px / 2.0, height_px / 2.0),
        }
    }

    fn covers(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disk { radius_px } => dx * dx + dy * dy <= radius_px * radius_px,
            Shape::Rect { width_px, height_px } => dx.abs() <= width_px / 2.0 && dy.abs() <= height_px / 2.0,
        }
    }
}

/// Object moving back and forth along a polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub shape: Shape,
    pub depth_mm: f64,
    /// Waypoints `(x, y)` in pixels.
    pub path: Vec<(f64, f64)>,
    pub speed_px_per_frame: f64,
    /// First frame the actor is visible (never before the warm-up ends).
    pub enter_frame: usize,
}

impl Actor {
    fn path_length(&self) -> f64 {
        self.path.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Position after travelling `s` pixels, reflecting at the path ends.
    fn position_at(&self, s: f64) -> (f64, f64) {
        let total = self.path_length();
        if self.path.len() < 2 || total <= 0.0 {
            return self.path[0];
        }
        let mut s = s.rem_euclid(2.0 * total);
        if s > total {
            s = 2.0 * total - s;
        }
        for w in self.path.windows(2) {
            let d = dist(w[0], w[1]);
            if s <= d {
                let f = if d > 0.0 { s / d } else { 0.0 };
                return (w[0].0 + f * (w[1].0 - w[0].0), w[0].1 + f * (w[1].1 - w[0].1));
            }
            s -= d;
        }
        *self.path.last().expect("non-empty path")
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Static box placed into the scene at a fixed frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroppedObject {
    pub width_px: f64,
    pub height_px: f64,
    /// Height above the background surface, mm.
    pub height_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyDirective {
    None,
    /// Every actor moves `factor` times faster from the onset on.
    SpeedChange { onset: usize, factor: f64 },
    /// An additional actor enters at the onset.
    ExtraActor { onset: usize, actor: Actor },
    /// Actor `actor` stops at the onset and leaves `object` behind; the
    /// object stays for the rest of the sequence.
    ActorStops { onset: usize, actor: usize, object: DroppedObject },
}

impl AnomalyDirective {
    pub fn onset(&self) -> Option<usize> {
        match *self {
            AnomalyDirective::None => None,
            AnomalyDirective::SpeedChange { onset, .. }
            | AnomalyDirective::ExtraActor { onset, .. }
            | AnomalyDirective::ActorStops { onset, .. } => Some(onset),
        }
    }

    pub fn type_token(&self) -> &'static str {
        match self {
            AnomalyDirective::None => "none",
            AnomalyDirective::SpeedChange { .. } => "speed_change",
            AnomalyDirective::ExtraActor { .. } => "extra_actor",
            AnomalyDirective::ActorStops { .. } => "left_object",
        }
    }

    pub fn category(&self) -> Option<Category> {
        match self {
            AnomalyDirective::None => None,
            AnomalyDirective::SpeedChange { .. } => Some(Category::AggressiveBehavior),
            AnomalyDirective::ExtraActor { .. } => Some(Category::Other),
            AnomalyDirective::ActorStops { .. } => Some(Category::LeftBehindObject),
        }
    }
}

/// Vertical depth ramp, as seen by a tilted camera over a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top_mm: f64,
    pub bottom_mm: f64,
}

impl Background {
    fn depth(&self, y: usize, height: usize) -> f64 {
        let f = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
        self.top_mm + f * (self.bottom_mm - self.top_mm)
    }

    fn min_mm(&self) -> f64 {
        self.top_mm.min(self.bottom_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sequence_id: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: Background,
    pub actors: Vec<Actor>,
    pub anomaly: AnomalyDirective,
    /// Probability that an actor edge pixel reads as invalid in a frame.
    pub flying_pixel_prob: f64,
    /// Depth noise std at 2 m; grows with the square of depth.
    pub noise_std_mm_at_2m: f64,
    pub seed: u64,
}

/// One rendered sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub depth: FrameSequence,
    /// Exact foreground footprint per frame (weights 0 or 1).
    pub truth: Vec<SoftMask>,
    pub labels: LabelSeries,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scene {}: {m}", self.sequence_id)));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("empty scene".into());
        }
        if !(0.0..=1.0).contains(&self.flying_pixel_prob) || !(self.noise_std_mm_at_2m >= 0.0) {
            return bad("invalid noise parameters".into());
        }
        if let Some(onset) = self.anomaly.onset() {
            if onset >= self.frames {
                return bad(format!("onset {onset} not before frame count {}", self.frames));
            }
        }
        let mut actors: Vec<&Actor> = self.actors.iter().collect();
        if let AnomalyDirective::ExtraActor { actor, .. } = &self.anomaly {
            actors.push(actor);
        }
        if let AnomalyDirective::ActorStops { actor, .. } = self.anomaly {
            if actor >= self.actors.len() {
                return bad(format!("anomaly refers to missing actor {actor}"));
            }
        }
        if let AnomalyDirective::SpeedChange { factor, .. } = self.anomaly {
            if !(factor > 0.0) {
                return bad("speed factor must be positive".into());
            }
        }
        for (i, a) in actors.iter().enumerate() {
            if a.path.is_empty() {
                return bad(format!("actor {i} has an empty path"));
            }
            if !(a.depth_mm > 0.0 && a.depth_mm < self.background.min_mm()) {
                return bad(format!("actor {i} depth {} mm is not in front of the background", a.depth_mm));
            }
            let (hx, hy) = a.shape.half_extent();
            for &(x, y) in &a.path {
                if x - hx < 0.0 || y - hy < 0.0 || x + hx > (self.width - 1) as f64 || y + hy > (self.height - 1) as f64 {
                    return bad(format!("actor {i} leaves the image at waypoint ({x}, {y})"));
                }
            }
        }
        Ok(())
    }

    /// Arc length travelled by an actor by frame `t`.
    fn travelled(&self, a: &Actor, t: usize) -> f64 {
        let enter = a.enter_frame.max(WARMUP_FRAMES);
        let moving = |from: usize, to: usize| to.saturating_sub(from) as f64 * a.speed_px_per_frame;
        match self.anomaly {
            AnomalyDirective::SpeedChange { onset, factor } if t > onset => {
                moving(enter, onset.min(t)) + factor * moving(onset.max(enter), t)
            }
            _ => moving(enter, t),
        }
    }

    pub fn render(&self) -> Result<Rendered> {
        self.validate()?;
        let (w, h) = (self.width, self.height);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let onset = self.anomaly.onset();
        let mut stop_at: Option<(f64, f64)> = None;
        let mut frames = Vec::with_capacity(self.frames);
        let mut truth = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            // nearest surface per pixel; `None` is background
            let mut fg: Vec<Option<f64>> = vec![None; w * h];
            let mut draw = |shape: &Shape, depth: f64, (cx, cy): (f64, f64)| {
                let (hx, hy) = shape.half_extent();
                let y0 = (cy - hy).floor().max(0.0) as usize;
                let y1 = ((cy + hy).ceil() as usize).min(h - 1);
                let x0 = (cx - hx).floor().max(0.0) as usize;
                let x1 = ((cx + hx).ceil() as usize).min(w - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if shape.covers(x as f64 - cx, y as f64 - cy) {
                            let p = &mut fg[y * w + x];
                            *p = Some(p.map_or(depth, |d: f64| d.min(depth)));
                        }
                    }
                }
            };
            if t >= WARMUP_FRAMES {
                for (i, a) in self.actors.iter().enumerate() {
                    if t < a.enter_frame {
                        continue;
                    }
                    let mut pos = a.position_at(self.travelled(a, t));
                    if let AnomalyDirective::ActorStops { onset, actor, .. } = self.anomaly {
                        if actor == i && t >= onset {
                            pos = *stop_at.get_or_insert(pos);
                        }
                    }
                    draw(&a.shape, a.depth_mm, pos);
                }
                match &self.anomaly {
                    AnomalyDirective::ExtraActor { onset, actor } if t >= *onset && t >= actor.enter_frame => {
                        let s = (t - onset.max(&actor.enter_frame)) as f64 * actor.speed_px_per_frame;
                        draw(&actor.shape, actor.depth_mm, actor.position_at(s));
                    }
                    AnomalyDirective::ActorStops { onset, actor, object } if t >= *onset => {
                        if let Some((cx, cy)) = stop_at {
                            let shape = Shape::Rect {
                                width_px: object.width_px,
                                height_px: object.height_px,
                            };
                            let (hx, _) = self.actors[*actor].shape.half_extent();
                            let ox = if cx + hx + object.width_px < (w - 1) as f64 {
                                cx + hx + object.width_px / 2.0 + 1.0
                            } else {
                                cx - hx - object.width_px / 2.0 - 1.0
                            };
                            let floor = self.background.depth(cy.round().clamp(0.0, (h - 1) as f64) as usize, h);
                            draw(&shape, floor - object.height_mm, (ox, cy));
                        }
                    }
                    _ => {}
                }
            }
            let mut raw = vec![0u16; w * h];
            let mut mask = vec![0f32; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let z = fg[i].unwrap_or_else(|| self.background.depth(y, h));
                    mask[i] = if fg[i].is_some() { 1.0 } else { 0.0 };
                    let std = self.noise_std_mm_at_2m * (z / 2000.0).powi(2);
                    let noisy = z + std * unit.sample(&mut rng);
                    let edge = fg[i].is_some() && {
                        let nb = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                        nb.iter().any(|&(nx, ny)| nx < w && ny < h && fg[ny * w + nx] != fg[i])
                    };
                    let flying = edge && rng.gen::<f64>() < self.flying_pixel_prob;
                    raw[i] = if flying { 0 } else { noisy.round().clamp(1.0, 65535.0) as u16 };
                }
            }
            frames.push(Frame::from_raw(w, h, &raw, FrameKind::DepthRaw)?);
            truth.push(SoftMask {
                width: w,
                height: h,
                weights: mask,
            });
        }
        let labels = LabelSeries {
            sequence_id: self.sequence_id.clone(),
            labels: (0..self.frames).map(|t| onset.is_some_and(|o| t >= o)).collect(),
        };
        Ok(Rendered {
            depth: FrameSequence::new(self.sequence_id.clone(), frames)?,
            truth,
            labels,
        })
    }
}

/// Parameters of a whole synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub train_sequences: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std_mm_at_2m: f64,
    #[serde(default = "default_flying")]
    pub flying_pixel_prob: f64,
}

fn default_noise() -> f64 {
    0.8
}

fn default_flying() -> f64 {
    0.3
}

impl CorpusSpec {
    /// 20 normal training sequences, 10 normal and 10 anomalous test
    /// sequences of 150 frames at 64x64.
    pub fn benchmark(seed: u64) -> Self {
        CorpusSpec {
            width: 64,
            height: 64,
            frames: 150,
            train_sequences: 20,
            test_normal: 10,
            test_anomalous: 10,
            seed,
            noise_std_mm_at_2m: default_noise(),
            flying_pixel_prob: default_flying(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("corpus spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus spec serializes")
    }

    fn background(&self) -> Background {
        Background {
            top_mm: 3000.0,
            bottom_mm: 2600.0,
        }
    }

    fn random_path(&self, rng: &mut ChaCha8Rng, shape: &Shape) -> Vec<(f64, f64)> {
        let (hx, hy) = shape.half_extent();
        let n = rng.gen_range(3..=4);
        (0..n)
            .map(|_| {
                (
                    rng.gen_range(hx + 1.0..=(self.width - 2) as f64 - hx),
                    rng.gen_range(hy + 1.0..=(self.height - 2) as f64 - hy),
                )
            })
            .collect()
    }

    fn random_actor(&self, rng: &mut ChaCha8Rng, enter: usize) -> Actor {
        let shape = Shape::Disk {
            radius_px: rng.gen_range(4.0..6.5),
        };
        Actor {
            path: self.random_path(rng, &shape),
            shape,
            depth_mm: rng.gen_range(1200.0..1700.0),
            speed_px_per_frame: rng.gen_range(0.6..1.4),
            enter_frame: enter,
        }
    }

    fn scene(&self, id: String, rng: &mut ChaCha8Rng, anomaly_kind: Option<usize>) -> SceneSpec {
        let n_actors = rng.gen_range(1..=2);
        let actors: Vec<Actor> = (0..n_actors)
            .map(|i| {
                let enter = WARMUP_FRAMES + i * rng.gen_range(0..20);
                self.random_actor(rng, enter)
            })
            .collect();
        let onset_lo = (self.frames * 2 / 5).max(WARMUP_FRAMES + 20).min(self.frames - 1);
        let onset_hi = (self.frames * 2 / 3).max(onset_lo);
        let anomaly = match anomaly_kind {
            None => AnomalyDirective::None,
            Some(k) => {
                let onset = rng.gen_range(onset_lo..=onset_hi);
                match k % 3 {
                    0 => {
                        let shape = Shape::Rect {
                            width_px: rng.gen_range(8.0..12.0),
                            height_px: rng.gen_range(12.0..16.0),
                        };
                        AnomalyDirective::ExtraActor {
                            onset,
                            actor: Actor {
                                path: self.random_path(rng, &shape),
                                shape,
                                depth_mm: rng.gen_range(900.0..1100.0),
                                speed_px_per_frame: rng.gen_range(0.8..1.6),
                                enter_frame: onset,
                            },
                        }
                    }
                    1 => AnomalyDirective::ActorStops {
                        onset,
                        actor: 0,
                        object: DroppedObject {
                            width_px: rng.gen_range(7.0..10.0),
                            height_px: rng.gen_range(5.0..8.0),
                            height_mm: rng.gen_range(400.0..600.0),
                        },
                    },
                    _ => AnomalyDirective::SpeedChange {
                        onset,
                        factor: rng.gen_range(3.0..4.0),
                    },
                }
            }
        };
        SceneSpec {
            sequence_id: id,
            width: self.width,
            height: self.height,
            frames: self.frames,
            background: self.background(),
            actors,
            anomaly,
            flying_pixel_prob: self.flying_pixel_prob,
            noise_std_mm_at_2m: self.noise_std_mm_at_2m,
            seed: rng.gen(),
        }
    }

    /// Scene specs of the training and test splits.
    pub fn scenes(&self) -> (Vec<SceneSpec>, Vec<SceneSpec>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = (0..self.train_sequences)
            .map(|i| self.scene(format!("train_{i:03}"), &mut rng, None))
            .collect();
        let mut test = Vec::new();
        for i in 0..self.test_normal + self.test_anomalous {
            let kind = (i >= self.test_normal).then(|| i - self.test_normal);
            test.push(self.scene(format!("test_{i:03}"), &mut rng, kind));
        }
        (train, test)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub scene: SceneSpec,
    pub rendered: Rendered,
}

/// Rendered dataset with its annotation file contents.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<SynthSequence>,
    pub test: Vec<SynthSequence>,
    pub annotations: AnnotationTable,
    pub category_map: CategoryMap,
}

pub fn category_map() -> CategoryMap {
    let mut map = CategoryMap::default();
    map.insert("speed_change", Category::AggressiveBehavior);
    map.insert("extra_actor", Category::Other);
    map.insert("left_object", Category::LeftBehindObject);
    map
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    use rayon::prelude::*;
    let (train, test) = spec.scenes();
    let render = |scenes: Vec<SceneSpec>| -> Result<Vec<SynthSequence>> {
        scenes
            .into_par_iter()
            .map(|scene| scene.render().map(|rendered| SynthSequence { scene, rendered }))
            .collect()
    };
    let (train, test) = (render(train)?, render(test)?);
    let mut annotations = AnnotationTable::default();
    for s in &test {
        match (s.scene.anomaly.onset(), s.scene.anomaly.category()) {
            (Some(onset), Some(category)) => annotations.anomalies.push(Annotation {
                sequence_id: s.scene.sequence_id.clone(),
                first_anomalous: onset,
                last_anomalous: s.scene.frames - 1,
                anomaly_type: s.scene.anomaly.type_token().to_string(),
                category,
            }),
            _ => annotations.normal_sequences.push(s.scene.sequence_id.clone()),
        }
    }
    Ok(Corpus {
        train,
        test,
        annotations,
        category_map: category_map(),
    })
}

/// Writes `train/` and `test/` sequence directories (`depth/` frames and
/// 8-bit `truth/` masks), `annotations.csv`, `category_map.txt` and the
/// corpus spec.
pub fn write_corpus(corpus: &Corpus, spec: &CorpusSpec, dir: &Path) -> Result<()> {
    for (split, seqs) in [("train", &corpus.train), ("test", &corpus.test)] {
        for s in seqs.iter() {
            let seq_dir = dir.join(split).join(&s.scene.sequence_id);
            write_sequence(&s.rendered.depth, &seq_dir.join("depth"))?;
            for (i, m) in s.rendered.truth.iter().enumerate() {
                let px: Vec<u8> = m.weights.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
                let png = io::encode_gray_png(m.width, m.height, GraySamples::Eight(&px))?;
                io::atomic_write(&seq_dir.join("truth").join(format!("{i:06}.png")), &png)?;
            }
        }
    }
    let mut lines = String::from("sequence_id,first,last,anomaly_type,category\n");
    for a in &corpus.annotations.anomalies {
        lines.push_str(&format!(
            "{},{},{},{},{}\n",
            a.sequence_id, a.first_anomalous, a.last_anomalous, a.anomaly_type, a.anomaly_type
        ));
    }
    for id in &corpus.annotations.normal_sequences {
        lines.push_str(&format!("{id},-,-,none,none\n"));
    }
    io::atomic_write(&dir.join("annotations.csv"), lines.as_bytes())?;
    io::atomic_write(&dir.join("category_map.txt"), corpus.category_map.to_text().as_bytes())?;
    io::atomic_write(&dir.join("corpus.toml"), spec.to_toml().as_bytes())
}
