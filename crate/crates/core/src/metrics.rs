//! Privacy leakage metrics.
//!
//! Pixel leakage is the mutual information between a raw role canvas and the
//! rendered sanitized canvas of the same image, normalized by the raw canvas'
//! entropy and averaged over the reference set. Histograms are 256-bin over
//! BT.601 luma and logarithms are base 2.
//!
//! Semantic leakage is the mean cosine similarity between embeddings of private
//! and synthetic images. Embeddings are opaque vectors produced elsewhere.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{to_grayscale, RasterImage};
use crate::sanitizer::{render_bundle_canvas, SanitizedBundle, Segment, SegmentRole};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if libm::fabs(self.sum) >= libm::fabs(x) {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// 256-bin intensity histogram of a grayscale canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; 256],
    total: u64,
}

impl Histogram256 {
    pub fn of(img: &RasterImage) -> Self {
        let gray = to_grayscale(img);
        let mut counts = [0u64; 256];
        for &v in gray.as_bytes() {
            counts[v as usize] += 1;
        }
        Self {
            counts,
            total: gray.pixel_count() as u64,
        }
    }

    pub fn counts(&self) -> &[u64; 256] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn entropy_bits(&self) -> f64 {
        let n = self.total as f64;
        let s: CompensatedSum = self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * libm::log2(p)
            })
            .collect();
        s.value().max(0.0)
    }
}

/// Shannon entropy of the luma histogram, in bits.
pub fn entropy_bits(img: &RasterImage) -> f64 {
    Histogram256::of(img).entropy_bits()
}

/// Pixelwise mutual information of two co-registered images, in bits.
pub fn image_mi_bits(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::invalid(format!(
            "image_mi_bits: dimension mismatch {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let ga = to_grayscale(a);
    let gb = to_grayscale(b);
    let mut joint = vec![0u64; 256 * 256];
    let mut ca = [0u64; 256];
    let mut cb = [0u64; 256];
    for (&u, &v) in ga.as_bytes().iter().zip(gb.as_bytes()) {
        joint[u as usize * 256 + v as usize] += 1;
        ca[u as usize] += 1;
        cb[v as usize] += 1;
    }
    let n = ga.pixel_count() as f64;
    let mut s = CompensatedSum::default();
    for (idx, &c) in joint.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (u, v) = (idx / 256, idx % 256);
        let c = c as f64;
        s.add(c / n * libm::log2(c * n / (ca[u] as f64 * cb[v] as f64)));
    }
    Ok(s.value().max(0.0))
}

/// Raw role canvases of the reference images, one map per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceSet {
    pub images: Vec<BTreeMap<SegmentRole, RasterImage>>,
}

impl ReferenceSet {
    pub fn from_segments(per_image: impl IntoIterator<Item = Vec<Segment>>) -> Self {
        Self {
            images: per_image
                .into_iter()
                .map(|segs| segs.into_iter().map(|s| (s.role, s.canvas)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-image normalized MI terms for `role`.
pub fn normalized_mi_terms(
    refs: &ReferenceSet,
    bundle: &SanitizedBundle,
    role: SegmentRole,
) -> Result<Vec<f64>> {
    if refs.is_empty() {
        return Err(Error::invalid("reference set is empty"));
    }
    if refs.len() != bundle.entries.len() {
        return Err(Error::invalid(format!(
            "{} reference images but {} bundle entries",
            refs.len(),
            bundle.entries.len()
        )));
    }
    refs.images
        .iter()
        .zip(&bundle.entries)
        .enumerate()
        .map(|(index, (raw, entry))| {
            let x = raw
                .get(&role)
                .ok_or_else(|| Error::invalid(format!("no raw canvas for role {role}")).at_image(index))?;
            let h = entropy_bits(x);
            if h <= 0.0 {
                return Err(Error::DegenerateReference { index, role });
            }
            let rendered = render_bundle_canvas(entry).map_err(|e| e.at_image(index))?;
            let mi = image_mi_bits(x, &rendered).map_err(|e| e.at_image(index))?;
            Ok((mi / h).clamp(0.0, 1.0))
        })
        .collect()
}

/// Average fraction of a role's raw-canvas information recoverable from the
/// sanitized rendering, in [0, 1].
pub fn normalized_mi(refs: &ReferenceSet, bundle: &SanitizedBundle, role: SegmentRole) -> Result<f64> {
    let terms = normalized_mi_terms(refs, bundle, role)?;
    let n = terms.len() as f64;
    let s: CompensatedSum = terms.into_iter().collect();
    Ok((s.value() / n).clamp(0.0, 1.0))
}

/// An opaque semantic embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub provider_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(provider_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            provider_id: provider_id.into(),
            values,
        }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    fn norm(&self) -> f64 {
        let s: CompensatedSum = self.values.iter().map(|v| v * v).collect();
        libm::sqrt(s.value())
    }
}

/// Cosine similarity of two embeddings from the same provider.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_compatible(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector is undefined"));
    }
    let dot: CompensatedSum = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
    Ok((dot.value() / (na * nb)).clamp(-1.0, 1.0))
}

fn check_compatible(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.provider_id != b.provider_id {
        return Err(Error::IncompatibleEmbeddings(format!(
            "providers {:?} and {:?}",
            a.provider_id, b.provider_id
        )));
    }
    if a.dimension() != b.dimension() || a.dimension() == 0 {
        return Err(Error::IncompatibleEmbeddings(format!(
            "dimensions {} and {}",
            a.dimension(),
            b.dimension()
        )));
    }
    Ok(())
}

/// How private and synthetic embeddings are paired for [`sim`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPairing {
    /// Every private embedding against every synthetic one.
    #[default]
    AllPairs,
    /// `p[i]` against `q[i]`; requires equal lengths.
    Matched,
}

/// Mean cosine similarity between private embeddings `p` and synthetic embeddings `q`.
pub fn sim(p: &[EmbeddingVector], q: &[EmbeddingVector], pairing: SimPairing) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("sim needs non-empty embedding sets"));
    }
    let first = &p[0];
    for e in p.iter().chain(q) {
        check_compatible(first, e)?;
    }
    let mut s = CompensatedSum::default();
    let count = match pairing {
        SimPairing::AllPairs => {
            for a in p {
                for b in q {
                    s.add(cosine(a, b)?);
                }
            }
            p.len() * q.len()
        }
        SimPairing::Matched => {
            if p.len() != q.len() {
                return Err(Error::invalid("matched sim needs equally sized sets"));
            }
            for (a, b) in p.iter().zip(q) {
                s.add(cosine(a, b)?);
            }
            p.len()
        }
    };
    Ok((s.value() / count as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSim {
    pub value: f64,
    pub baseline: f64,
}

/// Similarity of a text prompt to the private images, next to the empty-prompt baseline.
pub fn prompt_sim(
    prompt: &EmbeddingVector,
    private_images: &[EmbeddingVector],
    baseline: &EmbeddingVector,
) -> Result<PromptSim> {
    Ok(PromptSim {
        value: sim(core::slice::from_ref(prompt), private_images, SimPairing::AllPairs)?,
        baseline: sim(core::slice::from_ref(baseline), private_images, SimPairing::AllPairs)?,
    })
}

/// Embeddings needed for the semantic half of a [`PrivacyReport`]. Roles with no
/// private or synthetic embeddings are reported without a SIM value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingInputs {
    pub private: BTreeMap<SegmentRole, Vec<EmbeddingVector>>,
    pub synthetic: BTreeMap<SegmentRole, Vec<EmbeddingVector>>,
    pub prompts: BTreeMap<SegmentRole, EmbeddingVector>,
    pub baseline: Option<EmbeddingVector>,
    pub pairing: SimPairing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleLeakage {
    pub role: SegmentRole,
    pub mi: f64,
    pub sim: Option<f64>,
    pub prompt_sim: Option<f64>,
    pub prompt_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub preference: String,
    pub roles: Vec<RoleLeakage>,
}

impl PrivacyReport {
    pub fn role(&self, role: SegmentRole) -> Option<&RoleLeakage> {
        self.roles.iter().find(|r| r.role == role)
    }
}

/// One MI figure per role plus SIM and prompt leakage where embeddings are supplied.
pub fn privacy_report(
    refs: &ReferenceSet,
    bundle: &SanitizedBundle,
    embeddings: &EmbeddingInputs,
) -> Result<PrivacyReport> {
    let mut roles = Vec::new();
    for role in bundle.request.roles() {
        let mi = normalized_mi(refs, bundle, role)?;
        let private = embeddings.private.get(&role).filter(|v| !v.is_empty());
        let synthetic = embeddings.synthetic.get(&role).filter(|v| !v.is_empty());
        let sim_value = match (private, synthetic) {
            (Some(p), Some(q)) => Some(sim(p, q, embeddings.pairing)?),
            _ => None,
        };
        let prompt = match (embeddings.prompts.get(&role), &embeddings.baseline, private) {
            (Some(prompt), Some(baseline), Some(p)) => Some(prompt_sim(prompt, p, baseline)?),
            _ => None,
        };
        roles.push(RoleLeakage {
            role,
            mi,
            sim: sim_value,
            prompt_sim: prompt.map(|p| p.value),
            prompt_baseline: prompt.map(|p| p.baseline),
        });
    }
    Ok(PrivacyReport {
        preference: format!("{}", bundle.preference),
        roles,
    })
}
