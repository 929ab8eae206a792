use alloc::string::String;

use crate::sanitizer::SegmentRole;

/// Errors produced by the pipeline stages.
///
/// Every variant has a stable machine-readable [`Error::code`] so that the
/// CLI and the HTTP layer can report failures without string matching.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incomplete segmentation: no mask for role {role}")]
    IncompleteSegmentation { role: SegmentRole },

    #[error("inconsistent segmentation: {0}")]
    InconsistentSegmentation(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("unsupported feature kind: {0}")]
    UnsupportedFeature(String),

    #[error("image {index}: {source}")]
    AtImage {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("degenerate reference: image {index} has zero entropy for role {role}")]
    DegenerateReference { index: usize, role: SegmentRole },

    #[error("incompatible embeddings: {0}")]
    IncompatibleEmbeddings(String),

    #[error("inconsistent bundle: {0}")]
    InconsistentBundle(String),

    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("generation failed at step {step} for prompt {prompt:?}: {cause}")]
    GenerationFailed {
        prompt: String,
        step: GenerationStep,
        cause: String,
    },

    #[error("incompatible datasets: {0}")]
    IncompatibleDatasets(String),

    #[error("class {0:?} has fewer than 2 samples")]
    UnsplittableClass(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error("parse error: {0}")]
    Parse(String),
}

/// Step of the three-stage synthesis loop that a backend failure occurred in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationStep {
    FineTune,
    ConditionGenerate,
    GenerateTarget,
    Placement,
    Inpaint,
}

impl core::fmt::Display for GenerationStep {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            GenerationStep::FineTune => "fine_tune",
            GenerationStep::ConditionGenerate => "condition_generate",
            GenerationStep::GenerateTarget => "generate",
            GenerationStep::Placement => "placement",
            GenerationStep::Inpaint => "inpaint",
        })
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the index of the reference image it came from.
    pub fn at_image(self, index: usize) -> Self {
        Error::AtImage {
            index,
            source: alloc::boxed::Box::new(self),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::IncompleteSegmentation { .. } => "incomplete_segmentation",
            Error::InconsistentSegmentation(_) => "inconsistent_segmentation",
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::UnsupportedFeature(_) => "unsupported_feature",
            Error::AtImage { source, .. } => source.code(),
            Error::DegenerateReference { .. } => "degenerate_reference",
            Error::IncompatibleEmbeddings(_) => "incompatible_embeddings",
            Error::InconsistentBundle(_) => "inconsistent_bundle",
            Error::PlacementInfeasible(_) => "placement_infeasible",
            Error::GenerationFailed { .. } => "generation_failed",
            Error::IncompatibleDatasets(_) => "incompatible_datasets",
            Error::UnsplittableClass(_) => "unsplittable_class",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::TrainingFailed(_) => "training_failed",
            Error::Parse(_) => "parse_error",
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
