//! Server side: fine-tune planning, prompts, placement and dataset assembly.

mod dataset;
mod placement;
mod prompts;

pub use dataset::{mix_datasets, Label, Provenance, SyntheticDataset, SyntheticSample};
pub use placement::{sample_placement, Placement, PlacementOptions};
pub use prompts::{build_prompts, PromptSet, TargetPrompt, DEFAULT_TEMPLATE};

pub use crate::backend::GenerationBackend;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, FineTuneConfig, ModelRef};
use crate::error::{Error, GenerationStep, Result};
use crate::imaging::{composite, RasterImage};
use crate::sanitizer::{FeatureKind, Payload, SanitizedBundle, SegmentRole, TaskKind, UserRequest};
use crate::seed::derive_seed;
use crate::utility::{BBox, LabeledBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PretrainedOnly,
    FeatureConditionedThenFinetune,
    FinetuneOnRaw,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PretrainedOnly => "pretrained_only",
            Strategy::FeatureConditionedThenFinetune => "feature_conditioned_then_finetune",
            Strategy::FinetuneOnRaw => "finetune_on_raw",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolePlan {
    pub role: SegmentRole,
    pub text: String,
    pub strategy: Strategy,
    /// Feature kind of the payloads on the feature-conditioned path.
    pub feature: Option<FeatureKind>,
    /// Payload images across the bundle, in image order.
    pub references: Vec<RasterImage>,
    /// Synthetic references to request per feature image before fine-tuning.
    pub synthetic_per_feature: usize,
}

impl RolePlan {
    pub fn synthetic_count(&self) -> usize {
        match self.strategy {
            Strategy::FeatureConditionedThenFinetune => self.references.len() * self.synthetic_per_feature,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTunePlan {
    pub preference: String,
    pub roles: BTreeMap<SegmentRole, RolePlan>,
}

impl FineTunePlan {
    pub fn strategy(&self, role: SegmentRole) -> Option<Strategy> {
        self.roles.get(&role).map(|r| r.strategy)
    }

    pub fn strategies(&self) -> BTreeMap<SegmentRole, Strategy> {
        self.roles.iter().map(|(k, v)| (*k, v.strategy)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub synthetic_per_feature: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            synthetic_per_feature: 8,
        }
    }
}

/// Chooses a strategy per role from which payload kind its segments carry.
/// Pixel values never matter.
pub fn plan_fine_tune(bundle: &SanitizedBundle, options: &PlanOptions) -> Result<FineTunePlan> {
    bundle.validate()?;
    let mut roles = BTreeMap::new();
    for role in bundle.request.roles() {
        let mut kind: Option<&'static str> = None;
        let mut feature = None;
        let mut references = Vec::new();
        for entry in &bundle.entries {
            let seg = entry
                .segments
                .iter()
                .find(|s| s.role == role)
                .ok_or_else(|| Error::InconsistentBundle(format!("{}: no segment for {role}", entry.name)))?;
            let k = seg.payload.kind();
            if kind.is_some_and(|prev| prev != k) {
                return Err(Error::InconsistentBundle(format!(
                    "role {role} mixes {} and {k} payloads",
                    kind.unwrap_or_default()
                )));
            }
            kind = Some(k);
            if let Payload::Feature(_) = seg.payload {
                if let crate::sanitizer::Scheme::L1(f) = seg.scheme_used.scheme {
                    if feature.is_some_and(|prev| prev != f) {
                        return Err(Error::InconsistentBundle(format!("role {role} mixes feature kinds")));
                    }
                    feature = Some(f);
                }
            }
            if let Some(img) = seg.payload.image() {
                references.push(img.clone());
            }
        }
        let strategy = match kind {
            Some("feature") => Strategy::FeatureConditionedThenFinetune,
            Some("raw") => Strategy::FinetuneOnRaw,
            _ => Strategy::PretrainedOnly,
        };
        roles.insert(
            role,
            RolePlan {
                role,
                text: bundle.request.description(role).unwrap_or_default().to_string(),
                strategy,
                feature,
                references,
                synthetic_per_feature: options.synthetic_per_feature,
            },
        );
    }
    Ok(FineTunePlan {
        preference: bundle.preference.to_string(),
        roles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleModel {
    pub strategy: Strategy,
    pub model: ModelRef,
}

/// Models resolved from a plan, ready for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedModels {
    pub preference: String,
    pub roles: BTreeMap<SegmentRole, RoleModel>,
}

impl PreparedModels {
    /// Everything pretrained; what a text-only bundle resolves to.
    pub fn pretrained(request: &UserRequest, preference: impl Into<String>) -> Self {
        Self {
            preference: preference.into(),
            roles: request
                .roles()
                .into_iter()
                .map(|r| {
                    (
                        r,
                        RoleModel {
                            strategy: Strategy::PretrainedOnly,
                            model: ModelRef::pretrained(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn model(&self, role: SegmentRole) -> Result<&ModelRef> {
        self.roles
            .get(&role)
            .map(|r| &r.model)
            .ok_or_else(|| Error::invalid(format!("no model prepared for {role}")))
    }

    pub fn strategies(&self) -> BTreeMap<SegmentRole, Strategy> {
        self.roles.iter().map(|(k, v)| (*k, v.strategy)).collect()
    }
}

fn gen_err(prompt: &str, step: GenerationStep) -> impl FnOnce(BackendError) -> Error + '_ {
    move |e| Error::GenerationFailed {
        prompt: prompt.into(),
        step,
        cause: e.to_string(),
    }
}

/// Runs the fine-tuning side of the plan: conditional reference generation
/// for feature payloads, then fine-tuning; direct fine-tuning for raw payloads.
pub fn prepare_models(
    plan: &FineTunePlan,
    backend: &dyn GenerationBackend,
    config: &FineTuneConfig,
    seed: u64,
) -> Result<PreparedModels> {
    let mut roles = BTreeMap::new();
    for (role, rp) in &plan.roles {
        let role_seed = derive_seed(seed, &[role_index(*role)]);
        let model = match rp.strategy {
            Strategy::PretrainedOnly => ModelRef::pretrained(),
            Strategy::FinetuneOnRaw => backend
                .fine_tune(*role, &rp.references, config)
                .map_err(gen_err(&rp.text, GenerationStep::FineTune))?,
            Strategy::FeatureConditionedThenFinetune => {
                let refs = backend
                    .condition_generate(&rp.references, &rp.text, role_seed, rp.synthetic_count())
                    .map_err(gen_err(&rp.text, GenerationStep::ConditionGenerate))?;
                if refs.len() != rp.synthetic_count() {
                    return Err(Error::GenerationFailed {
                        prompt: rp.text.clone(),
                        step: GenerationStep::ConditionGenerate,
                        cause: format!("asked for {} references, got {}", rp.synthetic_count(), refs.len()),
                    });
                }
                backend
                    .fine_tune(*role, &refs, config)
                    .map_err(gen_err(&rp.text, GenerationStep::FineTune))?
            }
        };
        roles.insert(
            *role,
            RoleModel {
                strategy: rp.strategy,
                model,
            },
        );
    }
    Ok(PreparedModels {
        preference: plan.preference.clone(),
        roles,
    })
}

fn role_index(role: SegmentRole) -> u64 {
    match role {
        SegmentRole::Target(i) => i as u64,
        SegmentRole::Background => u64::MAX,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    pub width: u32,
    pub height: u32,
    /// Samples per target prompt. With label classes this is the per-class
    /// count; for class-free detection it is the count per target.
    pub count_per_class: usize,
    pub seed: u64,
    pub placement: PlacementOptions,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            count_per_class: 400,
            seed: 0,
            placement: PlacementOptions::default(),
        }
    }
}

/// Class list of datasets built for `request`.
pub fn dataset_classes(request: &UserRequest) -> Vec<String> {
    if request.label_classes.is_empty() {
        request.target_objects.clone()
    } else {
        request.label_classes.clone()
    }
}

/// Total samples `assemble_dataset` will produce.
pub fn dataset_size(prompts: &PromptSet, options: &AssemblyOptions) -> usize {
    prompts.targets.len() * options.count_per_class
}

/// Builds sample `index` (prompt-major). Independent of every other sample,
/// so callers may run samples in any order or in parallel.
pub fn assemble_sample(
    request: &UserRequest,
    prompts: &PromptSet,
    models: &PreparedModels,
    backend: &dyn GenerationBackend,
    options: &AssemblyOptions,
    index: usize,
) -> Result<SyntheticSample> {
    if options.count_per_class == 0 || index >= dataset_size(prompts, options) {
        return Err(Error::invalid(format!("sample index {index} out of range")));
    }
    let (pi, k) = (index / options.count_per_class, index % options.count_per_class);
    let prompt = &prompts.targets[pi];
    let seed = derive_seed(options.seed, &[pi as u64, k as u64]);
    let (w, h) = (options.width, options.height);

    let target = backend
        .generate(models.model(prompt.role)?, &prompt.text, derive_seed(seed, &[0]), w, h)
        .map_err(gen_err(&prompt.text, GenerationStep::GenerateTarget))?;
    target
        .image
        .ensure_same_dims(target.alpha.width(), target.alpha.height(), "generated alpha")
        .map_err(|e| gen_failed(&prompt.text, GenerationStep::GenerateTarget, e))?;

    let placement = sample_placement(w, h, &target.alpha, derive_seed(seed, &[1]), &options.placement)?;
    let placed = placement.place_image(&target.image, &target.alpha)?;

    let background = backend
        .inpaint(
            models.model(SegmentRole::Background)?,
            &placed,
            &placement.background_mask,
            &prompts.background,
            derive_seed(seed, &[2]),
        )
        .map_err(gen_err(&prompt.text, GenerationStep::Inpaint))?;
    background
        .ensure_same_dims(w, h, "inpainted canvas")
        .map_err(|e| gen_failed(&prompt.text, GenerationStep::Inpaint, e))?;
    let image = composite(&placed, &placement.target_mask, &background)?;

    let label = match (request.task_kind, prompt.class_index) {
        (TaskKind::Classification, Some(ci)) => Label::Class(request.label_classes[ci as usize].clone()),
        (TaskKind::Classification, None) => return Err(Error::invalid("classification prompt without a class")),
        (TaskKind::Detection, ci) => Label::Boxes(alloc::vec![LabeledBox {
            class_id: ci.unwrap_or(role_index(prompt.role) as u32),
            bbox: BBox::from(placement.bbox),
        }]),
    };
    Ok(SyntheticSample {
        name: format!("{index:06}"),
        image,
        target_mask: Some(placement.target_mask),
        label,
        provenance: Some(Provenance {
            prompt: prompt.text.clone(),
            preference: models.preference.clone(),
            strategies: models.strategies(),
            seed,
        }),
    })
}

fn gen_failed(prompt: &str, step: GenerationStep, e: Error) -> Error {
    Error::GenerationFailed {
        prompt: prompt.into(),
        step,
        cause: e.to_string(),
    }
}

/// Generate, place, inpaint and label every sample, sequentially.
pub fn assemble_dataset(
    request: &UserRequest,
    models: &PreparedModels,
    backend: &dyn GenerationBackend,
    options: &AssemblyOptions,
) -> Result<SyntheticDataset> {
    let prompts = build_prompts(request)?;
    let mut ds = SyntheticDataset::new(request.task_kind, dataset_classes(request));
    for i in 0..dataset_size(&prompts, options) {
        ds.samples
            .push(assemble_sample(request, &prompts, models, backend, options, i)?);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockBackend;
    use crate::sanitizer::Payload;
    use crate::testutil::{husky_bundle, husky_request};
    use alloc::vec;

    const L: [&str; 3] = ["L0", "L1", "L2"];

    fn expected(level: &str) -> Strategy {
        match level {
            "L0" => Strategy::PretrainedOnly,
            "L1" => Strategy::FeatureConditionedThenFinetune,
            _ => Strategy::FinetuneOnRaw,
        }
    }

    #[test]
    fn plan_matrix() {
        for t in L {
            for b in L {
                let bundle = husky_bundle(&format!("t={t},b={b}"), 2, 24);
                let plan = plan_fine_tune(&bundle, &PlanOptions::default()).unwrap();
                assert_eq!(plan.strategy(SegmentRole::Target(0)), Some(expected(t)), "{t},{b}");
                assert_eq!(plan.strategy(SegmentRole::Background), Some(expected(b)), "{t},{b}");
                let target = &plan.roles[&SegmentRole::Target(0)];
                assert_eq!(target.references.is_empty(), t == "L0");
                assert_eq!(target.synthetic_count(), if t == "L1" { 16 } else { 0 });
            }
        }
    }

    #[test]
    fn plan_rejects_mixed_payloads() {
        let mut bundle = husky_bundle("t=L2,b=L0", 2, 16);
        bundle.entries[1].segments[0].payload = Payload::None;
        // The bundle itself is now inconsistent with its preference.
        assert!(plan_fine_tune(&bundle, &PlanOptions::default()).is_err());
    }

    #[test]
    fn prepare_runs_each_path() {
        let m = MockBackend::default();
        for (pref, t_pre) in [("t=L0,b=L0", true), ("t=L1,b=L0", false), ("t=L2,b=L2", false)] {
            let plan = plan_fine_tune(&husky_bundle(pref, 2, 24), &PlanOptions::default()).unwrap();
            let models = prepare_models(&plan, &m, &FineTuneConfig::default(), 1).unwrap();
            assert_eq!(models.model(SegmentRole::Target(0)).unwrap().is_pretrained(), t_pre, "{pref}");
            assert_eq!(models.preference, pref);
        }
    }

    fn small(count: usize) -> AssemblyOptions {
        AssemblyOptions {
            width: 32,
            height: 32,
            count_per_class: count,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn classification_assembly_is_balanced_and_labelled() {
        let req = husky_request();
        let models = PreparedModels::pretrained(&req, "t=L0,b=L0");
        let ds = assemble_dataset(&req, &models, &MockBackend::default(), &small(5)).unwrap();
        assert_eq!(ds.len(), 20);
        ds.validate().unwrap();
        for (class, n) in ds.class_counts().unwrap() {
            assert_eq!(n, 5, "{class}");
        }
        for s in &ds.samples {
            let Label::Class(c) = &s.label else { panic!() };
            assert!(s.provenance.as_ref().unwrap().prompt.ends_with(c.as_str()));
        }
        let again = assemble_dataset(&req, &models, &MockBackend::default(), &small(5)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn detection_labels_are_tight_alpha_boxes() {
        let mut req = husky_request();
        req.task_kind = TaskKind::Detection;
        req.label_classes.clear();
        req.target_objects = vec!["pill bottle".into()];
        let models = PreparedModels::pretrained(&req, "t=L0,b=L0");
        let ds = assemble_dataset(&req, &models, &MockBackend::default(), &small(12)).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.classes, ["pill bottle"]);
        for s in &ds.samples {
            let Label::Boxes(b) = &s.label else { panic!() };
            let tight = s.target_mask.as_ref().unwrap().bounding_rect().unwrap();
            assert_eq!(b, &vec![LabeledBox { class_id: 0, bbox: BBox::from(tight) }]);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let req = husky_request();
        let models = PreparedModels::pretrained(&req, "t=L0,b=L0");
        let prompts = build_prompts(&req).unwrap();
        let opts = small(3);
        let m = MockBackend::default();
        let ds = assemble_dataset(&req, &models, &m, &opts).unwrap();
        for i in (0..12).rev() {
            assert_eq!(assemble_sample(&req, &prompts, &models, &m, &opts, i).unwrap(), ds.samples[i]);
        }
        assert!(assemble_sample(&req, &prompts, &models, &m, &opts, 12).is_err());
    }

    struct Failing;

    impl GenerationBackend for Failing {
        fn fine_tune(&self, _: SegmentRole, _: &[RasterImage], _: &FineTuneConfig) -> crate::backend::BackendResult<ModelRef> {
            Err(BackendError::unavailable("down"))
        }
        fn generate(&self, m: &ModelRef, p: &str, s: u64, w: u32, h: u32) -> crate::backend::BackendResult<crate::backend::GeneratedTarget> {
            MockBackend::default().generate(m, p, s, w, h)
        }
        fn condition_generate(&self, _: &[RasterImage], _: &str, _: u64, _: usize) -> crate::backend::BackendResult<Vec<RasterImage>> {
            Ok(Vec::new())
        }
        fn inpaint(&self, _: &ModelRef, _: &RasterImage, _: &crate::imaging::BitMask, _: &str, _: u64) -> crate::backend::BackendResult<RasterImage> {
            Err(BackendError::unavailable("down"))
        }
    }

    #[test]
    fn backend_failures_name_prompt_and_step() {
        let req = husky_request();
        let models = PreparedModels::pretrained(&req, "t=L0,b=L0");
        let err = assemble_dataset(&req, &models, &Failing, &small(1)).unwrap_err();
        match err {
            Error::GenerationFailed { prompt, step, .. } => {
                assert_eq!(prompt, "a dog is eating");
                assert_eq!(step, GenerationStep::Inpaint);
            }
            other => panic!("{other:?}"),
        }
        let plan = plan_fine_tune(&husky_bundle("t=L2,b=L0", 1, 16), &PlanOptions::default()).unwrap();
        let err = prepare_models(&plan, &Failing, &FineTuneConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::GenerationFailed { step: GenerationStep::FineTune, .. }));
        let plan = plan_fine_tune(&husky_bundle("t=L1,b=L0", 1, 16), &PlanOptions::default()).unwrap();
        let err = prepare_models(&plan, &Failing, &FineTuneConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::GenerationFailed { step: GenerationStep::ConditionGenerate, .. }));
    }

    #[test]
    fn mixing_counts() {
        let req = husky_request();
        let m = MockBackend::default();
        let a = assemble_dataset(&req, &PreparedModels::pretrained(&req, "a"), &m, &small(6)).unwrap();
        let mut b = a.clone();
        b.samples.truncate(20); // 6,6,6,2 per class
        let mixed = mix_datasets(&a, &b, 3).unwrap();
        let counts = mixed.class_counts().unwrap();
        assert_eq!(counts["eating"], 6);
        assert_eq!(counts["playing"], 2);
        let from_a = mixed.samples.iter().filter(|s| s.name.starts_with("a_")).count();
        assert_eq!(from_a, 3 * 3 + 1);
        assert_eq!(mixed, mix_datasets(&a, &b, 3).unwrap());

        let mut other = a.clone();
        other.classes[0] = "running".into();
        assert_eq!(mix_datasets(&a, &other, 0).unwrap_err().code(), "incompatible_datasets");
    }
}
