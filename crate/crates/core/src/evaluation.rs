//! Pixel F-measures and multi-face fusion.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{is_inner, BACKGROUND, CLASS_NAMES, NUM_CLASSES};
use crate::model::{ComponentSet, HybridNet};
use crate::raster::{argmax, Image, LabelMap};
use crate::sampler::BBox;
use crate::training::{focus_sample, gt_boxes_from_labels, TrainSample};

/// Pooled pixel counts for one binary class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `None` when the class never occurs in prediction or ground truth.
    pub fn f_measure(&self) -> Option<f64> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let (p, r) = (self.precision(), self.recall());
        Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    }

    fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts accumulated over a dataset, per class and for the union of the
/// inner labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassScores {
    pub classes: [Counts; NUM_CLASSES],
    pub overall: Counts,
    pub correct: u64,
    pub pixels: u64,
}

impl ClassScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn class_f(&self, class: u8) -> Option<f64> {
        self.classes.get(class as usize).and_then(Counts::f_measure)
    }

    /// F of the binarized inner-component union.
    pub fn overall_f(&self) -> Option<f64> {
        self.overall.f_measure()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.pixels)
    }

    pub fn merge(&mut self, other: &ClassScores) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        self.overall.merge(&other.overall);
        self.correct += other.correct;
        self.pixels += other.pixels;
    }

    /// CSV with one row per class, then `overall` and `accuracy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# micro-averaged: pixel counts pooled over all images before computing P/R/F")?;
        writeln!(out, "class,precision,recall,f_measure,tp,fp,fn")?;
        let fmt = |c: &Counts| match c.f_measure() {
            Some(f) => format!("{:.6},{:.6},{:.6}", c.precision(), c.recall(), f),
            None => "—,—,—".to_string(),
        };
        for (name, c) in CLASS_NAMES.iter().zip(&self.classes) {
            writeln!(out, "{name},{},{},{},{}", fmt(c), c.tp, c.fp, c.fn_)?;
        }
        let o = &self.overall;
        writeln!(out, "overall,{},{},{},{}", fmt(o), o.tp, o.fp, o.fn_)?;
        writeln!(out, "accuracy,,,{:.6},{},{},", self.accuracy(), self.correct, self.pixels - self.correct)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Adds the counts of one prediction to `accum`.
pub fn f_measure(pred: &LabelMap, gt: &LabelMap, mut accum: ClassScores) -> Result<ClassScores> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        for l in [p, t] {
            if l as usize >= NUM_CLASSES {
                return Err(Error::ClassOutOfRange {
                    class: l as usize,
                    classes: NUM_CLASSES,
                });
            }
        }
        accum.pixels += 1;
        if p == t {
            accum.correct += 1;
            accum.classes[p as usize].tp += 1;
        } else {
            accum.classes[p as usize].fp += 1;
            accum.classes[t as usize].fn_ += 1;
        }
        match (is_inner(p), is_inner(t)) {
            (true, true) => accum.overall.tp += 1,
            (true, false) => accum.overall.fp += 1,
            (false, true) => accum.overall.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(accum)
}

/// Per-pixel instance assignment across faces parsed independently.
///
/// A face competes for a pixel only if its own argmax there is a
/// foreground channel; among those, the face with the largest foreground
/// score wins and contributes its argmax label. Pixels no face claims are
/// background with no instance.
pub fn fuse_multiface(per_face: &[Image]) -> Result<(LabelMap, Vec<Option<usize>>)> {
    let first = per_face
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no score maps to fuse".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if c != NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!("score maps need {NUM_CLASSES} channels, got {c}")));
    }
    if let Some(bad) = per_face.iter().find(|s| !s.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "score map {}x{}x{} vs {h}x{w}x{c}",
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let mut instances = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(f32, usize, u8)> = None;
            for (f, s) in per_face.iter().enumerate() {
                let px = s.pixel(i, j);
                let label = argmax(px) as u8;
                if label == BACKGROUND {
                    continue;
                }
                let fg = px
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != BACKGROUND as usize)
                    .map(|(_, &v)| v)
                    .fold(f32::NEG_INFINITY, f32::max);
                if best.map_or(true, |(b, _, _)| fg > b) {
                    best = Some((fg, f, label));
                }
            }
            if let Some((_, f, label)) = best {
                labels.set(i, j, label);
                instances[i * w + j] = Some(f);
            }
        }
    }
    Ok((labels, instances))
}

/// Box and parsing quality of a model on held-out samples, measured in
/// the model's own view.
#[derive(Debug, Clone, Default)]
pub struct ViewEvaluation {
    /// Mean IoU of predicted and ground-truth boxes over present components.
    pub mean_box_iou: f64,
    pub scores: ClassScores,
    /// Recall of the hair class in the view.
    pub hair_recall: f64,
}

/// Runs the network on every sample and pools IoU and F-measure counts.
pub fn evaluate_in_view(net: &HybridNet<f32>, data: &[TrainSample]) -> Result<ViewEvaluation> {
    let comps: &ComponentSet = &net.config().components;
    let mut ious = Vec::new();
    let mut scores = ClassScores::new();
    for s in data {
        let f = focus_sample(s, net.config().mode, net.config().warped_size)?;
        let out = net.infer_view(&f.view)?;
        for (pred, gt) in out.boxes.iter().zip(gt_boxes_from_labels(&f.labels, comps)) {
            if let Some(gt) = gt {
                ious.push(pred.iou(&gt));
            }
        }
        scores = f_measure(&out.global.argmax_labels(), &f.labels, scores)?;
    }
    let hair = scores.classes[crate::labels::HAIR as usize];
    Ok(ViewEvaluation {
        mean_box_iou: mean(&ious),
        hair_recall: hair.recall(),
        scores,
    })
}

/// Parses every sample back on its source grid and pools counts there.
pub fn evaluate_in_source(net: &HybridNet<f32>, data: &[TrainSample]) -> Result<ClassScores> {
    data.iter().try_fold(ClassScores::new(), |acc, s| {
        let p = net.parse_face(&s.image, &s.landmarks, None)?;
        f_measure(&p.labels, &s.labels, acc)
    })
}

/// Mean IoU between paired boxes.
pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> f64 {
    let v: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| a.iou(b)).collect();
    mean(&v)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
