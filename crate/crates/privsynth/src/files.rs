//! On-disk formats: request and segmentation manifests, reference canvases,
//! embeddings, privacy and utility reports, predictions and datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use privsynth_core::backend::Prediction;
use privsynth_core::imaging::{BitMask, RasterImage};
use privsynth_core::metrics::{EmbeddingInputs, EmbeddingVector, PrivacyReport, ReferenceSet, SimPairing};
use privsynth_core::orchestrator::{Label, Provenance, SyntheticDataset, SyntheticSample};
use privsynth_core::sanitizer::{ManifestEntry, RoleMask, SanitizedBundle, SegmentRole, TaskKind, UserRequest};
use privsynth_core::utility::{BBox, LabeledBox};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pngio;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = format!("{}:{}", path.display(), e.path());
        crate::wire::json_error(field, e.into_inner())
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory serialization");
    out.push(b'\n');
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_pretty(value))
}

pub fn read_request(path: &Path) -> Result<UserRequest> {
    let r: UserRequest = read_json(path)?;
    r.validate().map_err(|e| Error::schema(path.display().to_string(), e))?;
    Ok(r)
}

// ---- segmentation manifest ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationManifest {
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub image: String,
    pub masks: Vec<ManifestMask>,
}

/// `mask` is a single-channel PNG path relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMask {
    pub role: SegmentRole,
    pub mask: String,
    pub confidence: f64,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads the reference images listed in `manifest` from `images_dir`, in manifest order.
pub fn load_references(images_dir: &Path, manifest: &Path) -> Result<(Vec<RasterImage>, Vec<ManifestEntry>)> {
    let doc: SegmentationManifest = read_json(manifest)?;
    let dir = base_dir(manifest);
    let mut images = Vec::with_capacity(doc.images.len());
    let mut entries = Vec::with_capacity(doc.images.len());
    for (i, item) in doc.images.into_iter().enumerate() {
        images.push(pngio::read(&images_dir.join(&item.image))?);
        let masks = item
            .masks
            .iter()
            .enumerate()
            .map(|(j, m)| {
                if !(0.0..=1.0).contains(&m.confidence) {
                    return Err(Error::schema(format!("images[{i}].masks[{j}].confidence"), "outside [0, 1]"));
                }
                Ok(RoleMask {
                    role: m.role,
                    mask: pngio::read_mask(&dir.join(&m.mask))?,
                    confidence: m.confidence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            image: item.image,
            masks,
        });
    }
    Ok((images, entries))
}

/// Writes mask PNGs under `<manifest dir>/masks/` and the manifest itself.
pub fn write_manifest(manifest: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let dir = base_dir(manifest);
    let mut doc = SegmentationManifest { images: Vec::new() };
    for e in entries {
        let stem = file_stem(&e.image);
        let mut masks = Vec::new();
        for m in &e.masks {
            let rel = format!("masks/{stem}.{}.png", m.role);
            write_bytes(&dir.join(&rel), &pngio::encode_mask(&m.mask))?;
            masks.push(ManifestMask {
                role: m.role,
                mask: rel,
                confidence: m.confidence,
            });
        }
        doc.images.push(ManifestImage {
            image: e.image.clone(),
            masks,
        });
    }
    write_json(manifest, &doc)
}

fn file_stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

// ---- raw role canvases kept on the device for privacy measurement ----

pub fn ref_canvas_path(dir: &Path, image: &str, role: SegmentRole) -> PathBuf {
    dir.join(format!("{}.{role}.png", file_stem(image)))
}

pub fn write_refs(dir: &Path, names: &[String], refs: &ReferenceSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (name, canvases) in names.iter().zip(&refs.images) {
        for (role, img) in canvases {
            pngio::write(&ref_canvas_path(dir, name, *role), img)?;
        }
    }
    Ok(())
}

/// Reads `<stem>.<role>.png` for every entry and role of `bundle`.
pub fn read_refs(dir: &Path, bundle: &SanitizedBundle) -> Result<ReferenceSet> {
    let roles = bundle.request.roles();
    let images = bundle
        .entries
        .iter()
        .map(|e| {
            roles
                .iter()
                .map(|r| Ok((*r, pngio::read(&ref_canvas_path(dir, &e.name, *r))?)))
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceSet { images })
}

// ---- embeddings ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub provider_id: String,
    pub dimension: usize,
    pub values: Vec<f64>,
}

impl From<&EmbeddingVector> for EmbeddingRecord {
    fn from(e: &EmbeddingVector) -> Self {
        Self {
            provider_id: e.provider_id.clone(),
            dimension: e.values.len(),
            values: e.values.clone(),
        }
    }
}

impl EmbeddingRecord {
    fn into_vector(self, field: &str) -> Result<EmbeddingVector> {
        if self.dimension != self.values.len() {
            return Err(Error::schema(
                field,
                format!("dimension {} but {} values", self.dimension, self.values.len()),
            ));
        }
        Ok(EmbeddingVector::new(self.provider_id, self.values))
    }
}

/// Image embeddings keyed by role then image file name, plus per-role prompt
/// embeddings and the empty-prompt baseline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsFile {
    #[serde(default)]
    pub private: BTreeMap<SegmentRole, BTreeMap<String, EmbeddingRecord>>,
    #[serde(default)]
    pub synthetic: BTreeMap<SegmentRole, BTreeMap<String, EmbeddingRecord>>,
    #[serde(default)]
    pub prompts: BTreeMap<SegmentRole, EmbeddingRecord>,
    #[serde(default)]
    pub baseline: Option<EmbeddingRecord>,
    #[serde(default)]
    pub pairing: SimPairing,
}

impl EmbeddingsFile {
    pub fn into_inputs(self) -> Result<EmbeddingInputs> {
        let group = |name: &str, m: BTreeMap<SegmentRole, BTreeMap<String, EmbeddingRecord>>| {
            m.into_iter()
                .map(|(role, by_image)| {
                    let v = by_image
                        .into_iter()
                        .map(|(img, rec)| rec.into_vector(&format!("{name}.{role}.{img}")))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((role, v))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        Ok(EmbeddingInputs {
            private: group("private", self.private)?,
            synthetic: group("synthetic", self.synthetic)?,
            prompts: self
                .prompts
                .into_iter()
                .map(|(role, rec)| Ok((role, rec.into_vector(&format!("prompts.{role}"))?)))
                .collect::<Result<_>>()?,
            baseline: self.baseline.map(|r| r.into_vector("baseline")).transpose()?,
            pairing: self.pairing,
        })
    }
}

// ---- privacy report ----

/// Flat per-(preference, role) record, the unit of both report encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub preference: String,
    pub role: String,
    pub mi: f64,
    pub sim: Option<f64>,
    pub prompt_sim: Option<f64>,
    pub prompt_baseline: Option<f64>,
}

pub fn privacy_records(report: &PrivacyReport) -> Vec<PrivacyRecord> {
    let targets = report
        .roles
        .iter()
        .filter(|r| matches!(r.role, SegmentRole::Target(_)))
        .count();
    report
        .roles
        .iter()
        .map(|r| PrivacyRecord {
            preference: report.preference.clone(),
            role: r.role.label(targets),
            mi: r.mi,
            sim: r.sim,
            prompt_sim: r.prompt_sim,
            prompt_baseline: r.prompt_baseline,
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Quotes a CSV field when needed. Preferences contain commas.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn privacy_csv(records: &[PrivacyRecord]) -> String {
    let mut out = String::from("preference,role,mi,sim,prompt_sim,prompt_baseline\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.preference),
            r.role,
            r.mi,
            opt(r.sim),
            opt(r.prompt_sim),
            opt(r.prompt_baseline)
        ));
    }
    out
}

/// Writes `path` (JSON records) and the same records as CSV next to it.
pub fn write_privacy_report(path: &Path, reports: &[PrivacyReport]) -> Result<()> {
    let records: Vec<_> = reports.iter().flat_map(privacy_records).collect();
    write_json(path, &serde_json::json!({ "records": records }))?;
    write_bytes(&path.with_extension("csv"), privacy_csv(&records).as_bytes())
}

// ---- predictions ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

pub fn write_predictions(path: &Path, ds: &SyntheticDataset, preds: &[Prediction]) -> Result<()> {
    let records: Vec<_> = ds
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRecord {
            image: s.name.clone(),
            prediction: p.clone(),
        })
        .collect();
    write_json(path, &serde_json::json!({ "predictions": records }))
}

// ---- dataset directory ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub samples: Vec<DatasetRecord>,
}

/// One sample: `image` (and `mask`, `labels`) are paths relative to the dataset
/// directory. Classification samples carry `label`; detection samples point
/// to a sidecar with one `class_id cx cy w h` line per object, normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn boxes_sidecar(boxes: &[LabeledBox], width: u32, height: u32) -> String {
    boxes
        .iter()
        .map(|b| {
            let [cx, cy, w, h] = b.bbox.to_normalized_center(width, height);
            format!("{} {cx} {cy} {w} {h}\n", b.class_id)
        })
        .collect()
}

/// Parses a sidecar. Coordinates are snapped to 1e-6 px and clamped to the
/// image so float round-off cannot push a box outside it.
pub fn parse_sidecar(text: &str, width: u32, height: u32, field: &str) -> Result<Vec<LabeledBox>> {
    let snap = |v: f64| (v * 1e6).round() / 1e6;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |m: &str| Error::schema(format!("{field}:{}", n + 1), m);
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(bad("expected `class_id cx cy w h`"));
            }
            let class_id: u32 = parts[0].parse().map_err(|_| bad("bad class id"))?;
            let mut v = [0f64; 4];
            for (slot, p) in v.iter_mut().zip(&parts[1..]) {
                *slot = p.parse().map_err(|_| bad("bad coordinate"))?;
            }
            let b = BBox::from_normalized_center(v, width, height).map_err(|e| bad(&e.to_string()))?;
            let x = snap(b.x).clamp(0.0, width as f64);
            let y = snap(b.y).clamp(0.0, height as f64);
            let bbox = BBox::new(x, y, snap(b.w).min(width as f64 - x), snap(b.h).min(height as f64 - y))
                .map_err(|e| bad(&e.to_string()))?;
            Ok(LabeledBox { class_id, bbox })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    for sub in ["images", "masks", "labels"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let image = format!("images/{}.png", s.name);
        pngio::write(&dir.join(&image), &s.image)?;
        let mask = match &s.target_mask {
            Some(m) => {
                let rel = format!("masks/{}.png", s.name);
                pngio::write_mask(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        let (label, labels) = match &s.label {
            Label::Class(c) => (Some(c.clone()), None),
            Label::Boxes(b) => {
                let rel = format!("labels/{}.txt", s.name);
                write_bytes(&dir.join(&rel), boxes_sidecar(b, s.image.width(), s.image.height()).as_bytes())?;
                (None, Some(rel))
            }
        };
        records.push(DatasetRecord {
            name: s.name.clone(),
            image,
            mask,
            label,
            labels,
            provenance: s.provenance.clone(),
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &DatasetManifest {
            task: ds.task,
            classes: ds.classes.clone(),
            samples: records,
        },
    )
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let mut ds = SyntheticDataset::new(manifest.task, manifest.classes);
    for (i, r) in manifest.samples.into_iter().enumerate() {
        let image = pngio::read(&dir.join(&r.image))?;
        let target_mask: Option<BitMask> = r.mask.as_ref().map(|m| pngio::read_mask(&dir.join(m))).transpose()?;
        let label = match (ds.task, r.label, r.labels) {
            (TaskKind::Classification, Some(c), None) => Label::Class(c),
            (TaskKind::Detection, None, Some(path)) => {
                let p = dir.join(&path);
                let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
                Label::Boxes(parse_sidecar(&text, image.width(), image.height(), &path)?)
            }
            _ => {
                return Err(Error::schema(
                    format!("samples[{i}]"),
                    "classification samples need `label`, detection samples need `labels`",
                ))
            }
        };
        ds.samples.push(SyntheticSample {
            name: r.name,
            image,
            target_mask,
            label,
            provenance: r.provenance,
        });
    }
    ds.validate().map_err(|e| Error::schema(dir.display().to_string(), e))?;
    Ok(ds)
}
