//! End-to-end runs: sanitize, synthesize, train and measure, for one or many
//! privacy preferences.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use privsynth_core::backend::{EmbeddingBackend, FineTuneConfig, GenerationBackend, TrainConfig};
use privsynth_core::imaging::{apply_mask, NoiseParams, RasterImage};
use privsynth_core::metrics::{privacy_report, EmbeddingInputs, EmbeddingVector, PrivacyReport, ReferenceSet, SimPairing};
use privsynth_core::orchestrator::{
    assemble_sample, build_prompts, dataset_classes, dataset_size, plan_fine_tune, prepare_models,
    AssemblyOptions, PlanOptions, PreparedModels, SyntheticDataset, SyntheticSample,
};
use privsynth_core::sanitizer::{
    build_bundle, split_segments, ManifestEntry, PrivacyPreference, SanitizedBundle, SanitizerOptions, SegmentRole,
    TaskKind, UserRequest,
};
use privsynth_core::utility::{evaluate_dataset, UtilityConfig, UtilityReport};
use serde::Serialize;

use crate::backend::ModelBackend;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::files::{csv_field, EmbeddingRecord, EmbeddingsFile};

const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub sanitizer: SanitizerOptions,
    pub plan: PlanOptions,
    pub fine_tune: FineTuneConfig,
    pub assembly: AssemblyOptions,
    pub train_fraction: f64,
    /// Overrides the task's default epoch count.
    pub epochs: Option<u32>,
    pub seed: u64,
    /// Parallel sample builders; each has at most one backend call in flight.
    pub workers: usize,
    pub pairing: SimPairing,
}

impl ExperimentOptions {
    pub fn from_config(c: &Config) -> Self {
        Self {
            sanitizer: SanitizerOptions {
                seed: c.seed,
                ..SanitizerOptions::default()
            },
            plan: PlanOptions {
                synthetic_per_feature: c.synthetic_per_feature,
            },
            fine_tune: FineTuneConfig::default(),
            assembly: AssemblyOptions {
                width: c.width,
                height: c.height,
                count_per_class: c.count_per_class,
                seed: c.seed,
                ..AssemblyOptions::default()
            },
            train_fraction: c.train_fraction,
            epochs: None,
            seed: c.seed,
            workers: c.max_inflight,
            pairing: SimPairing::AllPairs,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sanitizer.seed = seed;
        self.assembly.seed = seed;
        self
    }

    pub fn utility_config(&self, task: TaskKind) -> UtilityConfig {
        let mut train = TrainConfig::for_task(task);
        if let Some(e) = self.epochs {
            train.epochs = e;
        }
        UtilityConfig {
            train_fraction: self.train_fraction,
            seed: self.seed,
            train,
        }
    }
}

/// Builds every sample with `workers` threads. The result, and the error
/// reported on failure (lowest failing index), do not depend on scheduling.
pub fn assemble_parallel(
    request: &UserRequest,
    models: &PreparedModels,
    backend: &(dyn GenerationBackend + Sync),
    options: &AssemblyOptions,
    workers: usize,
) -> Result<SyntheticDataset> {
    let prompts = build_prompts(request)?;
    let n = dataset_size(&prompts, options);
    let slots: Vec<Mutex<Option<privsynth_core::Result<SyntheticSample>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed_at = AtomicUsize::new(usize::MAX);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                // Samples past a known failure cannot change the outcome.
                if i >= n || i > failed_at.load(Ordering::Relaxed) {
                    break;
                }
                let r = assemble_sample(request, &prompts, models, backend, options, i);
                if r.is_err() {
                    failed_at.fetch_min(i, Ordering::Relaxed);
                }
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut ds = SyntheticDataset::new(request.task_kind, dataset_classes(request));
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => ds.samples.push(r?),
            None => break,
        }
    }
    Ok(ds)
}

/// Plans, prepares models and assembles the dataset for a received bundle.
pub fn synthesize(
    bundle: &SanitizedBundle,
    backend: &dyn ModelBackend,
    opts: &ExperimentOptions,
) -> Result<(PreparedModels, SyntheticDataset)> {
    let models = prepare_stage(bundle, backend, opts)?;
    let ds = assemble_parallel(&bundle.request, &models, backend, &opts.assembly, opts.workers)?;
    Ok((models, ds))
}

pub fn prepare_stage(bundle: &SanitizedBundle, backend: &dyn ModelBackend, opts: &ExperimentOptions) -> Result<PreparedModels> {
    let plan = plan_fine_tune(bundle, &opts.plan)?;
    Ok(prepare_models(&plan, backend, &opts.fine_tune, opts.seed)?)
}

/// Raw role canvases of the references; these never leave the device.
pub fn reference_set(request: &UserRequest, images: &[RasterImage], manifest: &[ManifestEntry]) -> Result<ReferenceSet> {
    let per_image = images
        .iter()
        .zip(manifest)
        .enumerate()
        .map(|(i, (img, entry))| split_segments(img, entry, request).map_err(|e| e.at_image(i)))
        .collect::<privsynth_core::Result<Vec<_>>>()?;
    Ok(ReferenceSet::from_segments(per_image))
}

fn embed_chunked(backend: &dyn EmbeddingBackend, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        out.extend(backend.embed_images(chunk)?);
    }
    Ok(out)
}

/// The synthetic pixels attributable to `role`: the pasted target for target
/// roles, everything else for the background.
fn synthetic_role_images(ds: &SyntheticDataset, request: &UserRequest, role: SegmentRole) -> Result<Vec<RasterImage>> {
    Ok(synthetic_role_samples(ds, request, role)?.into_iter().map(|(_, img)| img).collect())
}

fn synthetic_role_samples<'a>(
    ds: &'a SyntheticDataset,
    request: &UserRequest,
    role: SegmentRole,
) -> Result<Vec<(&'a str, RasterImage)>> {
    let prompts = build_prompts(request)?;
    let mut out = Vec::new();
    for s in &ds.samples {
        let Some(mask) = &s.target_mask else { continue };
        let sample_role = s
            .provenance
            .as_ref()
            .and_then(|p| prompts.targets.iter().find(|t| t.text == p.prompt))
            .map(|t| t.role);
        match role {
            SegmentRole::Background => out.push((s.name.as_str(), apply_mask(&s.image, &mask.complement())?)),
            r if sample_role.is_none() || sample_role == Some(r) => out.push((s.name.as_str(), apply_mask(&s.image, mask)?)),
            _ => {}
        }
    }
    Ok(out)
}

/// Embeds private role canvases, synthetic role pixels, role descriptions and the empty prompt.
pub fn embedding_inputs(
    request: &UserRequest,
    refs: &ReferenceSet,
    ds: &SyntheticDataset,
    backend: &dyn EmbeddingBackend,
    pairing: SimPairing,
) -> Result<EmbeddingInputs> {
    let mut inputs = EmbeddingInputs {
        pairing,
        ..EmbeddingInputs::default()
    };
    let roles = request.roles();
    let mut texts: Vec<String> = roles
        .iter()
        .map(|r| request.description(*r).unwrap_or_default().to_string())
        .collect();
    texts.push(String::new());
    let mut text_embs = backend.embed_texts(&texts)?;
    if text_embs.len() != texts.len() {
        return Err(Error::Backend(privsynth_core::backend::BackendError::new(
            "protocol_error",
            "text embedding count mismatch",
            false,
        )));
    }
    inputs.baseline = text_embs.pop();
    for (role, emb) in roles.iter().zip(text_embs) {
        inputs.prompts.insert(*role, emb);
        let private: Vec<_> = refs.images.iter().filter_map(|m| m.get(role).cloned()).collect();
        inputs.private.insert(*role, embed_chunked(backend, &private)?);
        let synthetic = synthetic_role_images(ds, request, *role)?;
        if !synthetic.is_empty() {
            inputs.synthetic.insert(*role, embed_chunked(backend, &synthetic)?);
        }
    }
    Ok(inputs)
}

/// [`embedding_inputs`] as an embeddings file: private vectors keyed by
/// reference image name, synthetic vectors by sample name.
pub fn embeddings_file(
    request: &UserRequest,
    names: &[String],
    refs: &ReferenceSet,
    ds: &SyntheticDataset,
    backend: &dyn EmbeddingBackend,
    pairing: SimPairing,
) -> Result<EmbeddingsFile> {
    let inputs = embedding_inputs(request, refs, ds, backend, pairing)?;
    let mut file = EmbeddingsFile {
        pairing,
        baseline: inputs.baseline.as_ref().map(EmbeddingRecord::from),
        ..EmbeddingsFile::default()
    };
    for (role, v) in &inputs.prompts {
        file.prompts.insert(*role, v.into());
    }
    for (role, v) in &inputs.private {
        let m = names.iter().cloned().zip(v.iter().map(EmbeddingRecord::from)).collect();
        file.private.insert(*role, m);
    }
    for (role, v) in &inputs.synthetic {
        let samples = synthetic_role_samples(ds, request, *role)?;
        let m = samples.iter().map(|(n, _)| n.to_string()).zip(v.iter().map(EmbeddingRecord::from)).collect();
        file.synthetic.insert(*role, m);
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub preference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub privacy: PrivacyReport,
    pub utility: UtilityReport,
}

/// Everything for one preference: sanitize, measure MI on the bundle,
/// synthesize, measure SIM on the synthetic set, train and evaluate.
#[allow(clippy::too_many_arguments)]
pub fn run_preference(
    request: &UserRequest,
    images: &[RasterImage],
    manifest: &[ManifestEntry],
    preference: &PrivacyPreference,
    backend: &dyn ModelBackend,
    test: Option<&SyntheticDataset>,
    opts: &ExperimentOptions,
) -> Result<ExperimentRow> {
    let bundle = build_bundle(request, images, manifest, preference, &opts.sanitizer, Some(backend))?;
    let refs = reference_set(request, images, manifest)?;
    let (_, ds) = synthesize(&bundle, backend, opts)?;
    let embeddings = embedding_inputs(request, &refs, &ds, backend, opts.pairing)?;
    let privacy = privacy_report(&refs, &bundle, &embeddings)?;
    let utility = evaluate_dataset(&ds, test, backend, &opts.utility_config(request.task_kind))?;
    Ok(ExperimentRow {
        preference: preference.to_string(),
        sigma: None,
        privacy,
        utility,
    })
}

/// `base` with Gaussian noise of `sigma` on every target role.
pub fn with_target_noise(base: &PrivacyPreference, sigma: f64) -> Result<PrivacyPreference> {
    let noise = NoiseParams::new(sigma, 0)?;
    let mut out = PrivacyPreference::new();
    for (role, level) in base.iter() {
        let level = match role {
            SegmentRole::Target(_) => level.with_noise(noise),
            SegmentRole::Background => *level,
        };
        out = out.with(role, level);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Column names for `rows`: `preference`, then `mi_<role>` and `sim_<role>` per
/// role, then `utility` (and a leading `sigma` for noise sweeps).
pub fn table_columns(rows: &[ExperimentRow]) -> Vec<String> {
    let mut cols = Vec::new();
    if rows.iter().any(|r| r.sigma.is_some()) {
        cols.push("sigma".to_string());
    }
    cols.push("preference".into());
    let labels = role_labels(rows);
    cols.extend(labels.iter().map(|l| format!("mi_{l}")));
    cols.extend(labels.iter().map(|l| format!("sim_{l}")));
    cols.push("utility".into());
    cols
}

fn role_labels(rows: &[ExperimentRow]) -> Vec<String> {
    let Some(first) = rows.first() else { return Vec::new() };
    let targets = first
        .privacy
        .roles
        .iter()
        .filter(|r| matches!(r.role, SegmentRole::Target(_)))
        .count();
    first.privacy.roles.iter().map(|r| r.role.label(targets)).collect()
}

pub fn table_csv(rows: &[ExperimentRow]) -> String {
    let cols = table_columns(rows);
    let mut out = cols.join(",");
    out.push('\n');
    let with_sigma = cols[0] == "sigma";
    for r in rows {
        let mut fields = Vec::new();
        if with_sigma {
            fields.push(r.sigma.map(|s| s.to_string()).unwrap_or_default());
        }
        fields.push(csv_field(&r.preference));
        fields.extend(r.privacy.roles.iter().map(|l| format!("{:.6}", l.mi)));
        fields.extend(r.privacy.roles.iter().map(|l| fmt_opt(l.sim)));
        fields.push(format!("{:.6}", r.utility.value));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Plot data: the table as column-keyed records plus the full reports.
pub fn plot_data(rows: &[ExperimentRow]) -> serde_json::Value {
    let labels = role_labels(rows);
    let records: Vec<_> = rows
        .iter()
        .map(|r| {
            let mut m = serde_json::Map::new();
            if let Some(s) = r.sigma {
                m.insert("sigma".into(), s.into());
            }
            m.insert("preference".into(), r.preference.clone().into());
            for (l, role) in labels.iter().zip(&r.privacy.roles) {
                m.insert(format!("mi_{l}"), role.mi.into());
                m.insert(format!("sim_{l}"), role.sim.into());
                m.insert(format!("prompt_sim_{l}"), role.prompt_sim.into());
                m.insert(format!("prompt_baseline_{l}"), role.prompt_baseline.into());
            }
            m.insert("utility".into(), r.utility.value.into());
            m.insert("metric".into(), serde_json::to_value(r.utility.metric).unwrap());
            serde_json::Value::Object(m)
        })
        .collect();
    serde_json::json!({ "columns": table_columns(rows), "records": records, "rows": rows })
}
