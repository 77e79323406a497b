//! Pixel accuracy, per-class Dice and IoU, and the classes-seen report.
//!
//! Pixels whose target is the ignore label are left out of every count.
//! Dice and IoU are only defined for a class that occurs in the target.

use std::fmt::Write as _;

use ndarray::{ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::ClassScheme;
use crate::datapipe::{make_batches, BatchOptions, DataError, SampleSource, SkipEntry};
use crate::network::{NetworkError, UNet};
use crate::rasterizer::DamageMask;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: {pred:?} vs {target:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn check_shapes(pred: &DamageMask, target: &DamageMask) -> Result<(), EvalError> {
    let (p, t) = ((pred.width(), pred.height()), (target.width(), target.height()));
    if p != t {
        return Err(EvalError::ShapeMismatch { pred: p, target: t });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassCounts {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl ClassCounts {
    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.intersection
    }

    pub fn dice(&self) -> Option<f64> {
        (self.gt > 0).then(|| (2.0 * self.intersection as f64 + DICE_EPS) / ((self.pred + self.gt) as f64 + DICE_EPS))
    }

    pub fn iou(&self) -> Option<f64> {
        (self.gt > 0).then(|| (self.intersection as f64 + DICE_EPS) / (self.union() as f64 + DICE_EPS))
    }
}

pub fn class_counts(pred: &DamageMask, target: &DamageMask, class: u8, ignore_label: u8) -> Result<ClassCounts, EvalError> {
    check_shapes(pred, target)?;
    let mut c = ClassCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        if t == ignore_label {
            continue;
        }
        let (hp, ht) = (p == class, t == class);
        c.pred += u64::from(hp);
        c.gt += u64::from(ht);
        c.intersection += u64::from(hp && ht);
    }
    Ok(c)
}

/// `(correct, valid)` over non-ignored target pixels.
fn accuracy_counts(pred: &DamageMask, target: &DamageMask, ignore_label: u8) -> (u64, u64) {
    pred.data()
        .iter()
        .zip(target.data())
        .filter(|(_, &t)| t != ignore_label)
        .fold((0, 0), |(ok, n), (&p, &t)| (ok + u64::from(p == t), n + 1))
}

/// `None` when every target pixel is ignored.
pub fn pixel_accuracy(pred: &DamageMask, target: &DamageMask, ignore_label: u8) -> Result<Option<f64>, EvalError> {
    check_shapes(pred, target)?;
    let (ok, n) = accuracy_counts(pred, target, ignore_label);
    Ok((n > 0).then(|| ok as f64 / n as f64))
}

pub fn dice_for_class(pred: &DamageMask, target: &DamageMask, class: u8, ignore_label: u8) -> Result<Option<f64>, EvalError> {
    Ok(class_counts(pred, target, class, ignore_label)?.dice())
}

pub fn iou_for_class(pred: &DamageMask, target: &DamageMask, class: u8, ignore_label: u8) -> Result<Option<f64>, EvalError> {
    Ok(class_counts(pred, target, class, ignore_label)?.iou())
}

/// Per-pixel argmax over the class axis of `(C, H, W)` scores. Ties go to
/// the lowest class index.
pub fn argmax_mask(logits: ArrayView3<'_, f32>) -> DamageMask {
    let (c, h, w) = logits.dim();
    assert!((1..=255).contains(&c), "class count must fit a mask value");
    let mut best = logits.index_axis(Axis(0), 0).to_owned();
    let mut idx = vec![0u8; h * w];
    for k in 1..c {
        for ((b, i), &v) in best.iter_mut().zip(idx.iter_mut()).zip(logits.index_axis(Axis(0), k).iter()) {
            if v > *b {
                *b = v;
                *i = k as u8;
            }
        }
    }
    DamageMask::from_vec(w, h, idx).expect("length matches")
}

/// Scores for one image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene_id: String,
    /// Indexed by class.
    pub counts: Vec<ClassCounts>,
    pub correct: u64,
    pub valid: u64,
}

pub fn score_image(scene_id: &str, pred: &DamageMask, target: &DamageMask, scheme: ClassScheme) -> Result<ImageScore, EvalError> {
    check_shapes(pred, target)?;
    let ignore = scheme.ignore_label();
    let counts = (0..scheme.num_classes())
        .map(|c| class_counts(pred, target, c as u8, ignore))
        .collect::<Result<_, _>>()?;
    let (correct, valid) = accuracy_counts(pred, target, ignore);
    Ok(ImageScore {
        scene_id: scene_id.to_string(),
        counts,
        correct,
        valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: u8,
    pub name: String,
    pub dice: f64,
    pub iou: f64,
    /// Images whose target contains the class.
    pub images: usize,
    /// Pixel counts summed over all images.
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scheme: ClassScheme,
    /// Micro-averaged over every valid pixel; `None` if there were none.
    pub pixel_accuracy: Option<f64>,
    /// Only classes present in at least one target.
    pub classes: Vec<ClassRow>,
    pub mean_dice: Option<f64>,
    pub mean_iou: Option<f64>,
    pub images_evaluated: usize,
    pub skipped: Vec<SkipEntry>,
}

impl EvaluationReport {
    pub fn row(&self, class: u8) -> Option<&ClassRow> {
        self.classes.iter().find(|r| r.class == class)
    }

    pub fn dice(&self, class: u8) -> Option<f64> {
        self.row(class).map(|r| r.dice)
    }

    /// Aligned text table: one row per seen class plus a Mean row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let width = self.classes.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "CLASS", "IoU", "Dice");
        for r in &self.classes {
            let _ = writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}", r.name, r.iou, r.dice);
        }
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "Mean", fmt(self.mean_iou), fmt(self.mean_dice));
        let _ = writeln!(out, "pixel accuracy {} over {} images", fmt(self.pixel_accuracy), self.images_evaluated);
        out
    }
}

/// Reduces per-image scores. Images are sorted by scene id first so the
/// report does not depend on visiting order.
pub fn aggregate(mut scores: Vec<ImageScore>, scheme: ClassScheme, skipped: Vec<SkipEntry>) -> EvaluationReport {
    scores.sort();
    let names = scheme.class_names();
    let mut classes = Vec::new();
    for c in 0..scheme.num_classes() {
        let mut total = ClassCounts::default();
        let (mut dice_sum, mut iou_sum, mut images) = (0.0, 0.0, 0usize);
        for s in &scores {
            let k = s.counts[c];
            total.intersection += k.intersection;
            total.pred += k.pred;
            total.gt += k.gt;
            if let (Some(d), Some(i)) = (k.dice(), k.iou()) {
                dice_sum += d;
                iou_sum += i;
                images += 1;
            }
        }
        if images > 0 {
            classes.push(ClassRow {
                class: c as u8,
                name: names[c].to_string(),
                dice: dice_sum / images as f64,
                iou: iou_sum / images as f64,
                images,
                counts: total,
            });
        }
    }
    let mean = |f: fn(&ClassRow) -> f64| (!classes.is_empty()).then(|| classes.iter().map(f).sum::<f64>() / classes.len() as f64);
    let (correct, valid) = scores.iter().fold((0, 0), |(a, b), s| (a + s.correct, b + s.valid));
    EvaluationReport {
        scheme,
        pixel_accuracy: (valid > 0).then(|| correct as f64 / valid as f64),
        mean_dice: mean(|r| r.dice),
        mean_iou: mean(|r| r.iou),
        classes,
        images_evaluated: scores.len(),
        skipped,
    }
}

/// Predicted masks for a batch of `(B, C, H, W)` logits.
pub fn predict_masks(model: &UNet, inputs: &ndarray::Array4<f32>) -> Result<Vec<DamageMask>, NetworkError> {
    let logits = model.forward(inputs)?;
    Ok(logits.outer_iter().map(argmax_mask).collect())
}

/// Runs the frozen model over `source` and scores every loadable image.
/// Fails with `NoValidSamples` when nothing could be scored.
pub fn validate<S: SampleSource + ?Sized>(
    model: &UNet,
    source: &S,
    scheme: ClassScheme,
    batch_size: usize,
) -> Result<EvaluationReport, EvalError> {
    let mut batches = make_batches(source, BatchOptions::sequential(batch_size));
    let mut scores = Vec::with_capacity(source.len());
    for batch in batches.by_ref() {
        let preds = predict_masks(model, &batch.inputs)?;
        for ((pred, target), id) in preds.iter().zip(batch.targets.outer_iter()).zip(&batch.scene_ids) {
            let (h, w) = target.dim();
            let target = DamageMask::from_vec(w, h, target.iter().copied().collect()).expect("length matches");
            scores.push(score_image(id, pred, &target, scheme)?);
        }
    }
    let skipped = batches.skipped().to_vec();
    if scores.is_empty() {
        return Err(DataError::NoValidSamples { skipped: skipped.len() }.into());
    }
    Ok(aggregate(scores, scheme, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, v: &[u8]) -> DamageMask {
        DamageMask::from_vec(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let t = mask(4, 4, &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(pixel_accuracy(&t, &t, 255).unwrap(), Some(1.0));
        let mut p = t.clone();
        for i in [0, 5, 10, 15] {
            p.data_mut()[i] = 9;
        }
        assert_eq!(pixel_accuracy(&p, &t, 255).unwrap(), Some(0.75));
        let ignored = DamageMask::new(4, 4, 255);
        assert_eq!(pixel_accuracy(&p, &ignored, 255).unwrap(), None);
        assert!(matches!(
            pixel_accuracy(&DamageMask::new(2, 8, 0), &t, 255),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dice_examples() {
        let full = DamageMask::new(3, 3, 2);
        assert_eq!(dice_for_class(&full, &full, 2, 255).unwrap(), Some(1.0));
        // |pred|=4, |gt|=2, overlap 2
        let p = mask(3, 2, &[1, 1, 1, 1, 0, 0]);
        let t = mask(3, 2, &[1, 1, 0, 0, 0, 0]);
        let d = dice_for_class(&p, &t, 1, 255).unwrap().unwrap();
        assert!((d - (4.0 + DICE_EPS) / (6.0 + DICE_EPS)).abs() < 1e-15);
        assert!((d - 2.0 / 3.0).abs() < 1e-6);
        let p = mask(3, 2, &[1, 1, 1, 0, 0, 0]);
        let t = mask(3, 2, &[0, 0, 0, 1, 1, 1]);
        let d = dice_for_class(&p, &t, 1, 255).unwrap().unwrap();
        assert!((d - DICE_EPS / (6.0 + DICE_EPS)).abs() < 1e-18);
        assert_eq!(dice_for_class(&p, &t, 3, 255).unwrap(), None);
    }

    #[test]
    fn iou_examples() {
        let full = DamageMask::new(2, 2, 1);
        assert_eq!(iou_for_class(&full, &full, 1, 255).unwrap(), Some(1.0));
        // overlap 2, union 4
        let p = mask(4, 1, &[1, 1, 1, 0]);
        let t = mask(4, 1, &[0, 1, 1, 1]);
        let i = iou_for_class(&p, &t, 1, 255).unwrap().unwrap();
        assert!((i - 0.5).abs() < 1e-6);
        assert_eq!(iou_for_class(&p, &t, 2, 255).unwrap(), None);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let p = mask(3, 1, &[1, 1, 1]);
        let t = mask(3, 1, &[1, 255, 0]);
        let c = class_counts(&p, &t, 1, 255).unwrap();
        assert_eq!(c, ClassCounts { intersection: 1, pred: 2, gt: 1 });
        assert_eq!(pixel_accuracy(&p, &t, 255).unwrap(), Some(0.5));
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let mut l = Array3::<f32>::zeros((3, 1, 3));
        l[[1, 0, 1]] = 2.0;
        l[[2, 0, 2]] = 1.0;
        l[[1, 0, 2]] = 1.0;
        assert_eq!(argmax_mask(l.view()).data(), &[0, 1, 1]);
    }

    fn score(id: &str, p: &[u8], t: &[u8]) -> ImageScore {
        score_image(id, &mask(p.len(), 1, p), &mask(t.len(), 1, t), ClassScheme::Bg5).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate(vec![score("a", &[0, 1, 1, 0], &[0, 1, 1, 0])], ClassScheme::Bg5, vec![]);
        assert_eq!(one.classes.iter().map(|r| (r.class, r.dice)).collect::<Vec<_>>(), [(0, 1.0), (1, 1.0)]);
        assert_eq!(one.mean_dice, Some(1.0));

        // Per-image class-1 Dice of 0.6 and 0.8 averages to 0.7.
        let a = score("a", &[1, 1, 1, 1, 1, 1, 1, 0, 0, 0], &[1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        let b = score("b", &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        let (da, db) = (a.counts[1].dice().unwrap(), b.counts[1].dice().unwrap());
        assert!((da - 0.6).abs() < 1e-6 && (db - 0.8).abs() < 1e-6);
        let r = aggregate(vec![a, b], ClassScheme::Bg5, vec![]);
        assert!((r.dice(1).unwrap() - 0.7).abs() < 1e-6);
        assert_eq!(r.row(1).unwrap().images, 2);
    }

    #[test]
    fn unseen_classes_have_no_row() {
        let r = aggregate(
            vec![score("a", &[0, 1, 3, 3], &[0, 1, 1, 0]), score("b", &[2, 2], &[2, 0])],
            ClassScheme::Bg5,
            vec![],
        );
        assert_eq!(r.classes.iter().map(|r| r.class).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(r.row(3).is_none());
        let mean = r.classes.iter().map(|r| r.dice).sum::<f64>() / 3.0;
        assert_eq!(r.mean_dice, Some(mean));
        let table = r.to_table();
        assert!(table.starts_with("CLASS"));
        assert!(table.contains("Mean") && !table.contains("major"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn report_ignores_image_order(
            seeds in proptest::collection::vec((proptest::collection::vec(0u8..5, 16), proptest::collection::vec(0u8..5, 16)), 1..6),
            rot in 0usize..6,
        ) {
            let scores: Vec<ImageScore> = seeds
                .iter()
                .enumerate()
                .map(|(i, (p, t))| score(&format!("s{i}"), p, t))
                .collect();
            let mut rotated = scores.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            rotated.reverse();
            prop_assert_eq!(aggregate(scores, ClassScheme::Bg5, vec![]), aggregate(rotated, ClassScheme::Bg5, vec![]));
        }

        #[test]
        fn argmax_ignores_per_pixel_shifts(
            vals in proptest::collection::vec(-4i8..4, 4 * 6),
            shifts in proptest::collection::vec(-100.0f32..100.0, 6),
        ) {
            // Integer-valued logits keep ties exact after shifting.
            let base = Array3::from_shape_vec((4, 2, 3), vals.iter().map(|&v| f32::from(v)).collect()).unwrap();
            let mut shifted = base.clone();
            for ((_, y, x), v) in shifted.indexed_iter_mut() {
                *v += shifts[y * 3 + x].round();
            }
            prop_assert_eq!(argmax_mask(base.view()), argmax_mask(shifted.view()));
        }
    }
}
