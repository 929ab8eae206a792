//! The sanitized bundle as a JSON document: the only body a device sends.
//!
//! Serialization is canonical (fixed field order, compact, deterministic PNG
//! payloads), so `to_json(from_json(doc)) == doc` for any document this module wrote.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use privsynth_core::imaging::RasterImage;
use privsynth_core::sanitizer::{
    BundleEntry, Payload, PrivacyPreference, SanitizationLevel, SanitizedBundle, SanitizedSegment,
    SegmentRole, UserRequest,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pngio;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDoc {
    version: u32,
    request: UserRequest,
    preference: PrivacyPreference,
    seed: u64,
    entries: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    name: String,
    width: u32,
    height: u32,
    segments: Vec<SegmentDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    role: SegmentRole,
    text: String,
    scheme: SanitizationLevel,
    payload: Option<PayloadDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayloadDoc {
    kind: PayloadKind,
    png: String,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum PayloadKind {
    Feature,
    Raw,
}

pub fn encode_image(img: &RasterImage) -> String {
    B64.encode(pngio::encode(img))
}

/// Decodes a base64 PNG; `field` names the JSON location for error reports.
pub fn decode_image(b64: &str, field: &str) -> Result<RasterImage> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| Error::schema(field, format!("invalid base64: {e}")))?;
    pngio::decode(&bytes).map_err(|e| Error::schema(field, e))
}

pub fn to_json(bundle: &SanitizedBundle) -> Vec<u8> {
    let doc = BundleDoc {
        version: BUNDLE_VERSION,
        request: bundle.request.clone(),
        preference: bundle.preference.clone(),
        seed: bundle.seed,
        entries: bundle
            .entries
            .iter()
            .map(|e| EntryDoc {
                name: e.name.clone(),
                width: e.width,
                height: e.height,
                segments: e
                    .segments
                    .iter()
                    .map(|s| SegmentDoc {
                        role: s.role,
                        text: s.text.clone(),
                        scheme: s.scheme_used,
                        payload: match &s.payload {
                            Payload::None => None,
                            Payload::Feature(img) => Some(PayloadDoc {
                                kind: PayloadKind::Feature,
                                png: encode_image(img),
                            }),
                            Payload::Raw(img) => Some(PayloadDoc {
                                kind: PayloadKind::Raw,
                                png: encode_image(img),
                            }),
                        },
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_vec(&doc).expect("bundle documents always serialize")
}

/// Parses and validates a bundle document. Failures carry the JSON path of the
/// offending field, e.g. `entries[1].segments[0].payload`.
/// Malformed JSON is a parse error; well-formed JSON of the wrong shape is a
/// schema error at `field`.
pub(crate) fn json_error(field: String, e: serde_json::Error) -> Error {
    if e.is_syntax() || e.is_eof() {
        Error::Json(e.to_string())
    } else {
        Error::schema(field, e)
    }
}

pub fn from_json(bytes: &[u8]) -> Result<SanitizedBundle> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: BundleDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        json_error(if path == "." { "$".into() } else { path }, e.into_inner())
    })?;
    if doc.version != BUNDLE_VERSION {
        return Err(Error::schema("version", format!("unsupported version {}", doc.version)));
    }
    let mut entries = Vec::with_capacity(doc.entries.len());
    for (i, e) in doc.entries.into_iter().enumerate() {
        let mut segments = Vec::with_capacity(e.segments.len());
        for (j, s) in e.segments.into_iter().enumerate() {
            let field = format!("entries[{i}].segments[{j}].payload");
            let payload = match s.payload {
                None => Payload::None,
                Some(p) => {
                    let img = decode_image(&p.png, &field)?;
                    match p.kind {
                        PayloadKind::Feature => Payload::Feature(img),
                        PayloadKind::Raw => Payload::Raw(img),
                    }
                }
            };
            segments.push(SanitizedSegment {
                role: s.role,
                text: s.text,
                scheme_used: s.scheme,
                payload,
            });
        }
        entries.push(BundleEntry {
            name: e.name,
            width: e.width,
            height: e.height,
            segments,
        });
    }
    let bundle = SanitizedBundle {
        request: doc.request,
        preference: doc.preference,
        seed: doc.seed,
        entries,
    };
    bundle.validate().map_err(|e| match e {
        privsynth_core::Error::AtImage { index, source } => Error::schema(format!("entries[{index}]"), source),
        other => Error::schema("$", other),
    })?;
    Ok(bundle)
}
