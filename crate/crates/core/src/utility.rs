//! Utility of the specialized model: splits, accuracy, IoU, mAP50 and the
//! train-then-score loop against a [`TrainingBackend`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelRef, Prediction, TrainConfig, TrainingBackend, TrainingExample, TrainingTarget};
use crate::error::{Error, Result};
use crate::orchestrator::{Label, SyntheticDataset};
use crate::sanitizer::TaskKind;
use crate::seed::derive_seed;

/// Axis-aligned box in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Normalised (cx, cy, w, h) relative to an image of `width` x `height`.
    pub fn to_normalized_center(&self, width: u32, height: u32) -> [f64; 4] {
        let (iw, ih) = (width as f64, height as f64);
        [
            (self.x + self.w / 2.0) / iw,
            (self.y + self.h / 2.0) / ih,
            self.w / iw,
            self.h / ih,
        ]
    }

    pub fn from_normalized_center(v: [f64; 4], width: u32, height: u32) -> Result<Self> {
        let (iw, ih) = (width as f64, height as f64);
        let (w, h) = (v[2] * iw, v[3] * ih);
        BBox::new(v[0] * iw - w / 2.0, v[1] * ih - h / 2.0, w, h)
    }
}

impl From<crate::imaging::PixelRect> for BBox {
    fn from(r: crate::imaging::PixelRect) -> Self {
        BBox {
            x: r.x as f64,
            y: r.y as f64,
            w: r.w as f64,
            h: r.h as f64,
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (libm::fmin(a.x + a.w, b.x + b.w) - libm::fmax(a.x, b.x)).max(0.0);
    let iy = (libm::fmin(a.y + a.h, b.y + b.h) - libm::fmax(a.y, b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
}

/// Ground-truth (or label) box with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: u32,
    pub bbox: BBox,
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApOptions {
    pub iou_threshold: f64,
    pub interpolation: ApInterpolation,
}

impl Default for ApOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: ApInterpolation::AllPoints,
        }
    }
}

/// Mean average precision at IoU 0.5 with all-points interpolation.
pub fn map50(detections: &[Vec<Detection>], ground_truth: &[Vec<LabeledBox>]) -> Result<f64> {
    mean_average_precision(detections, ground_truth, &ApOptions::default())
}

/// Per-class average precision, keyed by class id. Only classes present in the
/// ground truth are reported.
pub fn average_precision_per_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<LabeledBox>],
    options: &ApOptions,
) -> Result<BTreeMap<u32, f64>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "detections for {} images, ground truth for {}",
            detections.len(),
            ground_truth.len()
        )));
    }
    for d in detections.iter().flatten() {
        d.bbox.validate()?;
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::invalid(format!("confidence {} outside [0, 1]", d.confidence)));
        }
    }
    let mut positives: BTreeMap<u32, usize> = BTreeMap::new();
    for g in ground_truth.iter().flatten() {
        g.bbox.validate()?;
        *positives.entry(g.class_id).or_default() += 1;
    }
    if positives.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes".into()));
    }

    let mut out = BTreeMap::new();
    for (&class, &npos) in &positives {
        // (confidence, image) in input order; the stable sort keeps ties in that order.
        let mut ranked: Vec<(f64, usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().map(move |d| (d.confidence, img, d)))
            .filter(|(_, _, d)| d.class_id == class)
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("confidences are finite"));

        let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| alloc::vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for (k, (_, img, det)) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in ground_truth[*img].iter().enumerate() {
                if g.class_id != class || matched[*img][gi] {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best {
                if v >= options.iou_threshold {
                    matched[*img][gi] = true;
                    tp += 1;
                }
            }
            precision.push(tp as f64 / (k + 1) as f64);
            recall.push(tp as f64 / npos as f64);
        }
        out.insert(class, interpolate_ap(&precision, &recall, options.interpolation));
    }
    Ok(out)
}

fn interpolate_ap(precision: &[f64], recall: &[f64], mode: ApInterpolation) -> f64 {
    match mode {
        ApInterpolation::AllPoints => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(precision.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApInterpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    precision
                        .iter()
                        .zip(recall)
                        .filter(|(_, &r)| r >= t)
                        .map(|(&p, _)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<LabeledBox>],
    options: &ApOptions,
) -> Result<f64> {
    let per_class = average_precision_per_class(detections, ground_truth, options)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Stratified split: per class, a seeded shuffle then the first
/// `floor(train_fraction * n)` samples go to training.
pub fn split_dataset(
    ds: &SyntheticDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must be in (0, 1)"));
    }
    let groups = ds.group_indices()?;
    let mut train = ds.empty_like();
    let mut validation = ds.empty_like();
    for (class, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::UnsplittableClass(ds.classes[class as usize].clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64]));
        idx.shuffle(&mut rng);
        // Guard against 0.8 * n landing a hair under an integer.
        let n_train = libm::floor(train_fraction * idx.len() as f64 + 1e-9) as usize;
        for (k, i) in idx.into_iter().enumerate() {
            let s = ds.samples[i].clone();
            if k < n_train {
                train.samples.push(s);
            } else {
                validation.samples.push(s);
            }
        }
    }
    Ok((train, validation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    #[serde(rename = "map50")]
    Map50,
}

impl MetricKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => MetricKind::Accuracy,
            TaskKind::Detection => MetricKind::Map50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub train_fraction: f64,
    /// `test` or `validation`, whichever set the reported value was measured on.
    pub evaluated_on: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub metric: MetricKind,
    pub value: f64,
    pub split: SplitSummary,
    /// 0 means the untrained initial model was selected.
    pub best_epoch: u32,
    pub validation_scores: Vec<f64>,
    pub config: TrainConfig,
    pub model: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl UtilityConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            train: TrainConfig::for_task(task),
        }
    }
}

pub fn training_examples(ds: &SyntheticDataset) -> Result<Vec<TrainingExample>> {
    ds.samples
        .iter()
        .map(|s| {
            let target = match &s.label {
                Label::Class(c) => TrainingTarget::Class(ds.class_id(c)?),
                Label::Boxes(b) => TrainingTarget::Boxes(b.clone()),
            };
            Ok(TrainingExample {
                image: s.image.clone(),
                target,
            })
        })
        .collect()
}

/// Scores `predictions` against the labels of `ds`.
pub fn score_predictions(ds: &SyntheticDataset, predictions: &[Prediction]) -> Result<f64> {
    if predictions.len() != ds.samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            ds.samples.len()
        )));
    }
    match ds.task {
        TaskKind::Classification => {
            let labels = ds
                .samples
                .iter()
                .map(|s| match &s.label {
                    Label::Class(c) => ds.class_id(c),
                    Label::Boxes(_) => Err(Error::invalid("box label in classification set")),
                })
                .collect::<Result<Vec<_>>>()?;
            let preds = predictions
                .iter()
                .map(|p| match p {
                    Prediction::Class { class_id, .. } => Ok(*class_id),
                    Prediction::Detections(_) => Err(Error::invalid("detections for a classification set")),
                })
                .collect::<Result<Vec<_>>>()?;
            accuracy(&preds, &labels)
        }
        TaskKind::Detection => {
            let gt = ds
                .samples
                .iter()
                .map(|s| match &s.label {
                    Label::Boxes(b) => Ok(b.clone()),
                    Label::Class(_) => Err(Error::invalid("class label in detection set")),
                })
                .collect::<Result<Vec<_>>>()?;
            let dets = predictions
                .iter()
                .map(|p| match p {
                    Prediction::Detections(d) => Ok(d.clone()),
                    Prediction::Class { .. } => Err(Error::invalid("class prediction for a detection set")),
                })
                .collect::<Result<Vec<_>>>()?;
            map50(&dets, &gt)
        }
    }
}

/// Trains through `backend`, keeps the epoch with the best validation score
/// (earliest on ties, the initial model when there are no epochs) and scores it
/// locally on `test`, or on `validation` when no test set is given.
pub fn run_utility(
    train: &SyntheticDataset,
    validation: &SyntheticDataset,
    test: Option<&SyntheticDataset>,
    backend: &dyn TrainingBackend,
    config: &UtilityConfig,
) -> Result<UtilityReport> {
    for other in [Some(validation), test].into_iter().flatten() {
        if other.task != train.task || other.classes != train.classes {
            return Err(Error::IncompatibleDatasets(
                "train, validation and test sets must share task and classes".into(),
            ));
        }
    }
    let train_ex = training_examples(train)?;
    let val_ex = training_examples(validation)?;
    let outcome = backend
        .train(train.task, &train.classes, &train_ex, &val_ex, &config.train)
        .map_err(|e| Error::TrainingFailed(format!("{e}")))?;

    let mut best: Option<&crate::backend::EpochResult> = None;
    for ep in &outcome.epochs {
        if best.is_none_or(|b| ep.validation_score > b.validation_score) {
            best = Some(ep);
        }
    }
    let (best_epoch, model) = match best {
        Some(ep) => (ep.epoch, ep.model.clone()),
        None => (0, outcome.initial.clone()),
    };

    let (eval_set, evaluated_on) = match test {
        Some(t) => (t, "test"),
        None => (validation, "validation"),
    };
    let images: Vec<_> = eval_set.samples.iter().map(|s| s.image.clone()).collect();
    let predictions = backend
        .predict(&model, &images)
        .map_err(|e| Error::TrainingFailed(format!("{e}")))?;
    let value = score_predictions(eval_set, &predictions)?;

    Ok(UtilityReport {
        metric: MetricKind::for_task(train.task),
        value,
        split: SplitSummary {
            train: train.samples.len(),
            validation: validation.samples.len(),
            test: test.map_or(0, |t| t.samples.len()),
            train_fraction: config.train_fraction,
            evaluated_on: evaluated_on.into(),
        },
        best_epoch,
        validation_scores: outcome.epochs.iter().map(|e| e.validation_score).collect(),
        config: config.train.clone(),
        model,
    })
}

/// Splits `ds` per `config` and runs [`run_utility`].
pub fn evaluate_dataset(
    ds: &SyntheticDataset,
    test: Option<&SyntheticDataset>,
    backend: &dyn TrainingBackend,
    config: &UtilityConfig,
) -> Result<UtilityReport> {
    let (train, validation) = split_dataset(ds, config.train_fraction, config.seed)?;
    run_utility(&train, &validation, test, backend, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 3]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert_eq!(iou(&a, &b(10.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, f64::NAN).is_err());
    }

    fn det(bbox: BBox, confidence: f64) -> Detection {
        Detection {
            bbox,
            class_id: 0,
            confidence,
        }
    }

    fn gt(bbox: BBox) -> LabeledBox {
        LabeledBox { class_id: 0, bbox }
    }

    #[test]
    fn map_worked_example() {
        let g1 = b(0.0, 0.0, 10.0, 10.0);
        let g2 = b(50.0, 50.0, 10.0, 10.0);
        let miss = b(100.0, 100.0, 10.0, 10.0);
        let dets = vec![vec![det(g1, 0.9), det(miss, 0.8), det(g2, 0.7)]];
        let v = map50(&dets, &[vec![gt(g1), gt(g2)]]).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_trivial_cases() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(map50(&[vec![det(g, 1.0)]], &[vec![gt(g)]]).unwrap(), 1.0);
        assert_eq!(map50(&[vec![]], &[vec![gt(g)]]).unwrap(), 0.0);
        assert_eq!(map50(&[vec![det(g, 1.0)]], &[vec![]]).unwrap_err().code(), "undefined_metric");
        assert!(map50(&[vec![det(g, 1.5)]], &[vec![gt(g)]]).is_err());
    }

    #[test]
    fn eleven_point_worked_example() {
        let g1 = b(0.0, 0.0, 10.0, 10.0);
        let g2 = b(50.0, 50.0, 10.0, 10.0);
        let miss = b(100.0, 100.0, 10.0, 10.0);
        let dets = vec![vec![det(g1, 0.9), det(miss, 0.8), det(g2, 0.7)]];
        let opts = ApOptions {
            interpolation: ApInterpolation::ElevenPoint,
            ..Default::default()
        };
        let v = mean_average_precision(&dets, &[vec![gt(g1), gt(g2)]], &opts).unwrap();
        // recall thresholds 0..0.5 see precision 1, 0.6..1 see 2/3
        assert!((v - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_center_round_trip() {
        let bx = b(10.0, 20.0, 30.0, 40.0);
        let n = bx.to_normalized_center(100, 200);
        assert_eq!(n, [0.25, 0.2, 0.3, 0.2]);
        let back = BBox::from_normalized_center(n, 100, 200).unwrap();
        assert!((back.x - 10.0).abs() < 1e-9 && (back.h - 40.0).abs() < 1e-9);
    }
}
