use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BitMask, RasterImage};
use crate::sanitizer::{SegmentRole, TaskKind};
use crate::seed::derive_seed;
use crate::utility::LabeledBox;

use super::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(String),
    Boxes(Vec<LabeledBox>),
}

/// How a sample was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    pub preference: String,
    pub strategies: BTreeMap<SegmentRole, Strategy>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub name: String,
    pub image: RasterImage,
    /// Pixels of the pasted target, when known.
    pub target_mask: Option<BitMask>,
    pub label: Label,
    pub provenance: Option<Provenance>,
}

/// Labelled samples. Class ids in box labels index `classes`; for detection
/// requests without label classes, `classes` holds the target descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn new(task: TaskKind, classes: Vec<String>) -> Self {
        Self {
            task,
            classes,
            samples: Vec::new(),
        }
    }

    pub fn empty_like(&self) -> Self {
        Self::new(self.task, self.classes.clone())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Result<u32> {
        self.classes
            .iter()
            .position(|c| c == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::invalid(format!("unknown class {name:?}")))
    }

    /// Stratum of a sample: its class, or the class of its first box
    /// (0 for images without boxes).
    pub fn stratum(&self, sample: &SyntheticSample) -> Result<u32> {
        match &sample.label {
            Label::Class(c) => self.class_id(c),
            Label::Boxes(b) => Ok(b.first().map_or(0, |b| b.class_id)),
        }
    }

    /// Sample indices grouped by stratum, in dataset order.
    pub fn group_indices(&self) -> Result<BTreeMap<u32, Vec<usize>>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry(self.stratum(s)?).or_default().push(i);
        }
        Ok(out)
    }

    /// Sample count per class name.
    pub fn class_counts(&self) -> Result<BTreeMap<String, usize>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.group_indices()? {
            let name = self
                .classes
                .get(k as usize)
                .cloned()
                .unwrap_or_else(|| format!("#{k}"));
            out.insert(name, v.len());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("dataset has no classes"));
        }
        for s in &self.samples {
            let (w, h) = (s.image.width() as f64, s.image.height() as f64);
            match (&s.label, self.task) {
                (Label::Class(c), TaskKind::Classification) => {
                    self.class_id(c)?;
                }
                (Label::Boxes(boxes), TaskKind::Detection) => {
                    for b in boxes {
                        b.bbox.validate()?;
                        if b.class_id as usize >= self.classes.len() {
                            return Err(Error::invalid(format!("{}: class id {} out of range", s.name, b.class_id)));
                        }
                        if b.bbox.x < 0.0 || b.bbox.y < 0.0 || b.bbox.x + b.bbox.w > w || b.bbox.y + b.bbox.h > h {
                            return Err(Error::invalid(format!("{}: box outside the image", s.name)));
                        }
                    }
                }
                _ => return Err(Error::invalid(format!("{}: label does not match the task", s.name))),
            }
            if let Some(m) = &s.target_mask {
                s.image.ensure_same_dims(m.width(), m.height(), "target mask")?;
            }
        }
        Ok(())
    }
}

/// Per-class 50/50 mixture: for each class with `m = min(|a_c|, |b_c|)`,
/// `ceil(m/2)` samples come from `a` and `floor(m/2)` from `b`. Names are
/// prefixed `a_` / `b_` and the result is shuffled deterministically.
pub fn mix_datasets(a: &SyntheticDataset, b: &SyntheticDataset, seed: u64) -> Result<SyntheticDataset> {
    if a.task != b.task || a.classes != b.classes {
        return Err(Error::IncompatibleDatasets(
            "datasets differ in task or class list".into(),
        ));
    }
    let ga = a.group_indices()?;
    let gb = b.group_indices()?;
    if ga.keys().ne(gb.keys()) {
        return Err(Error::IncompatibleDatasets(
            "datasets cover different classes".into(),
        ));
    }
    let mut out = a.empty_like();
    for (class, ia) in ga {
        let ib = &gb[&class];
        let m = ia.len().min(ib.len());
        let take_a = m.div_ceil(2);
        for (side, (ds, idx, n, prefix)) in [(&a, ia.clone(), take_a, "a_"), (&b, ib.clone(), m - take_a, "b_")]
            .into_iter()
            .enumerate()
        {
            let mut idx = idx;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64, side as u64]));
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(n) {
                let mut s = ds.samples[i].clone();
                s.name = format!("{prefix}{}", s.name);
                out.samples.push(s);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    out.samples.shuffle(&mut rng);
    Ok(out)
}
