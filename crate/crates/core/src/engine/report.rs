use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::{AnnotationTable, Category, Modality};
use crate::io::{self, GraySamples};
use crate::losses::LossKind;
use crate::models::{Model, ModelKind};

use super::metrics::auc_roc;
use super::score::{score_sequence, smooth_scores, ScoreSeries};
use super::{PreparedSequence, RunConfig};

/// AUC of raw and of moving-average smoothed scores, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucPair {
    pub raw_percent: f64,
    pub smoothed_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: ModelKind,
    pub loss: LossKind,
    pub modality: Modality,
    pub seed: u64,
    pub clip_length_frames: usize,
    pub smoothing_window_frames: usize,
    pub model_spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: Category,
    pub sequences: usize,
    pub positive_frames: usize,
    pub negative_frames: usize,
    /// Absent when the category's sequences hold no scored frames of one
    /// class.
    pub auc: Option<AucPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub sequence_id: String,
    pub frames_scored: usize,
    pub anomalous_frames: usize,
    pub trace_file: String,
}

/// Scores of one sequence with their labels, aligned by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    pub sequence_id: String,
    pub indices: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub labels: Vec<bool>,
}

impl SequenceTrace {
    /// Delimited text: `frame_index,raw_score,smoothed_score,label`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,raw_score,smoothed_score,label\n");
        for i in 0..self.indices.len() {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{}",
                self.indices[i],
                self.raw[i],
                self.smoothed[i],
                u8::from(self.labels[i])
            );
        }
        out
    }

    /// Grayscale plot of the smoothed score with anomalous frames shaded.
    pub fn curve_png(&self) -> Result<Vec<u8>> {
        let n = self.indices.len().max(1);
        let (w, h) = (n.max(64), 128usize);
        let mut px = vec![255u8; w * h];
        let lo = self.smoothed.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let col = |i: usize| i * w / n;
        let row = |v: f64| {
            let y = ((v - lo) / span * (h - 9) as f64).round() as usize + 4;
            h - 1 - y.min(h - 1)
        };
        for (i, &l) in self.labels.iter().enumerate() {
            if l {
                for x in col(i)..col(i + 1).max(col(i) + 1).min(w) {
                    (0..h).for_each(|y| px[y * w + x] = 200);
                }
            }
        }
        for i in 0..self.smoothed.len() {
            let y0 = row(self.smoothed[i]);
            let y1 = row(self.smoothed[(i + 1).min(self.smoothed.len() - 1)]);
            let (a, b) = (y0.min(y1), y0.max(y1));
            for x in col(i)..col(i + 1).max(col(i) + 1).min(w) {
                (a..=b).for_each(|y| px[y * w + x] = 0);
            }
        }
        io::encode_gray_png(w, h, GraySamples::Eight(&px))
    }
}

/// Frame-level evaluation of one trained model on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames_scored: usize,
    pub anomalous_frames: usize,
    /// How category AUCs pick their negative frames.
    pub category_negatives: String,
    pub run: RunInfo,
    pub overall: AucPair,
    pub categories: Vec<CategoryResult>,
    pub sequences: Vec<SequenceSummary>,
    #[serde(skip)]
    pub traces: Vec<SequenceTrace>,
}

const CATEGORY_NEGATIVES: &str = "unannotated frames of the category's own sequences";

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<EvalReport> {
        toml::from_str(text).map_err(|e| Error::Eval(format!("report: {e}")))
    }

    /// Writes `report.toml`, one trace CSV per sequence and, optionally,
    /// score-curve images.
    pub fn write(&self, dir: &Path, curves: bool) -> Result<()> {
        for (t, s) in self.traces.iter().zip(&self.sequences) {
            io::atomic_write(&dir.join(&s.trace_file), t.to_csv().as_bytes())?;
            if curves {
                let png = dir.join(Path::new(&s.trace_file).with_extension("png"));
                io::atomic_write(&png, &t.curve_png()?)?;
            }
        }
        io::atomic_write(&dir.join("report.toml"), self.to_toml().as_bytes())
    }
}

fn pair(raw: &[f64], smoothed: &[f64], labels: &[bool]) -> Result<AucPair> {
    Ok(AucPair {
        raw_percent: auc_roc(raw, labels)?,
        smoothed_percent: auc_roc(smoothed, labels)?,
    })
}

/// Scores every test sequence and computes overall and per-category AUC.
pub fn evaluate(
    model: &Model<f32>,
    test: &[PreparedSequence],
    annotations: &AnnotationTable,
    config: &RunConfig,
) -> Result<EvalReport> {
    config.validate()?;
    for s in test {
        if !annotations.covers(&s.sequence_id) {
            return Err(Error::Annotation(format!(
                "missing annotations for scored sequence {}",
                s.sequence_id
            )));
        }
    }
    let series: Vec<ScoreSeries> = test
        .par_iter()
        .map(|s| score_sequence(model, s, config))
        .collect::<Result<_>>()?;
    evaluate_scores(&series, test, annotations, config, model.spec().hash_hex())
}

/// Evaluation from precomputed raw scores.
pub fn evaluate_scores(
    series: &[ScoreSeries],
    test: &[PreparedSequence],
    annotations: &AnnotationTable,
    config: &RunConfig,
    model_spec_hash: String,
) -> Result<EvalReport> {
    let mut traces = Vec::with_capacity(series.len());
    // per scored frame: categories of the spans covering it
    let mut frame_cats: Vec<Vec<Vec<Category>>> = Vec::with_capacity(series.len());
    for (s, seq) in series.iter().zip(test) {
        let smoothed = smooth_scores(s, config.smoothing_window_frames)?;
        let all = annotations.labels(&s.sequence_id, seq.len(), None)?;
        let mut cats = vec![Vec::new(); s.len()];
        for a in annotations.for_sequence(&s.sequence_id) {
            for (k, &t) in s.indices.iter().enumerate() {
                if (a.first_anomalous..=a.last_anomalous).contains(&t) && !cats[k].contains(&a.category) {
                    cats[k].push(a.category);
                }
            }
        }
        frame_cats.push(cats);
        traces.push(SequenceTrace {
            sequence_id: s.sequence_id.clone(),
            indices: s.indices.clone(),
            raw: s.scores.clone(),
            smoothed: smoothed.scores,
            labels: s.indices.iter().map(|&t| all.labels[t]).collect(),
        });
    }
    let pool = |keep: &dyn Fn(usize, usize) -> Option<bool>| {
        let (mut raw, mut sm, mut lab) = (Vec::new(), Vec::new(), Vec::new());
        for (si, t) in traces.iter().enumerate() {
            for k in 0..t.indices.len() {
                if let Some(l) = keep(si, k) {
                    raw.push(t.raw[k]);
                    sm.push(t.smoothed[k]);
                    lab.push(l);
                }
            }
        }
        (raw, sm, lab)
    };
    let (raw, sm, lab) = pool(&|si, k| Some(traces[si].labels[k]));
    let overall = pair(&raw, &sm, &lab)?;
    let anomalous = lab.iter().filter(|&&l| l).count();

    let mut categories = Vec::new();
    for cat in Category::ALL {
        let members: Vec<bool> = frame_cats.iter().map(|fc| fc.iter().any(|c| c.contains(&cat))).collect();
        let n_seq = members.iter().filter(|&&m| m).count();
        let has_annotation = test
            .iter()
            .any(|s| annotations.for_sequence(&s.sequence_id).any(|a| a.category == cat));
        if n_seq == 0 && !has_annotation {
            continue;
        }
        let (raw, sm, lab) = pool(&|si, k| {
            if !members[si] {
                return None;
            }
            let c = &frame_cats[si][k];
            if c.is_empty() {
                Some(false)
            } else if c.contains(&cat) {
                Some(true)
            } else {
                None
            }
        });
        let positives = lab.iter().filter(|&&l| l).count();
        let negatives = lab.len() - positives;
        let auc = if positives > 0 && negatives > 0 {
            Some(pair(&raw, &sm, &lab)?)
        } else {
            None
        };
        categories.push(CategoryResult {
            category: cat,
            sequences: n_seq,
            positive_frames: positives,
            negative_frames: negatives,
            auc,
        });
    }

    let sequences = traces
        .iter()
        .map(|t| SequenceSummary {
            sequence_id: t.sequence_id.clone(),
            frames_scored: t.indices.len(),
            anomalous_frames: t.labels.iter().filter(|&&l| l).count(),
            trace_file: format!("traces/{}.csv", t.sequence_id),
        })
        .collect();
    Ok(EvalReport {
        frames_scored: lab.len(),
        anomalous_frames: anomalous,
        category_negatives: CATEGORY_NEGATIVES.to_string(),
        run: RunInfo {
            model: config.model,
            loss: config.loss,
            modality: config.modality,
            seed: config.seed,
            clip_length_frames: config.clip_length_frames,
            smoothing_window_frames: config.smoothing_window_frames,
            model_spec_hash,
        },
        overall,
        categories,
        sequences,
        traces,
    })
}

/// Networks x losses comparison over many reports. Cells hold the median
/// over runs (e.g. seeds).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportGrid {
    pub cells: BTreeMap<(ModelKind, LossKind), Vec<AucPair>>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl ReportGrid {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Self {
        let mut cells: BTreeMap<_, Vec<AucPair>> = BTreeMap::new();
        for r in reports {
            cells.entry((r.run.model, r.run.loss)).or_default().push(r.overall);
        }
        ReportGrid { cells }
    }

    pub fn median(&self, model: ModelKind, loss: LossKind) -> Option<AucPair> {
        let runs = self.cells.get(&(model, loss))?;
        Some(AucPair {
            raw_percent: median(&mut runs.iter().map(|p| p.raw_percent).collect::<Vec<_>>())?,
            smoothed_percent: median(&mut runs.iter().map(|p| p.smoothed_percent).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Table with one row per network and one column per loss; each cell is
    /// `smoothed (raw) [runs]`, median AUC in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::from("| Network |");
        for l in LossKind::ALL {
            let _ = write!(out, " {} |", l.label());
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(LossKind::ALL.len()));
        out.push('\n');
        for m in ModelKind::ALL {
            if !LossKind::ALL.iter().any(|&l| self.cells.contains_key(&(m, l))) {
                continue;
            }
            let _ = write!(out, "| {} |", m.label());
            for l in LossKind::ALL {
                match self.median(m, l) {
                    Some(p) => {
                        let n = self.cells[&(m, l)].len();
                        let _ = write!(out, " {:.1} ({:.1}) [{n}] |", p.smoothed_percent, p.raw_percent);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}
