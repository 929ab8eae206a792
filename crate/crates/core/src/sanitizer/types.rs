use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::NoiseParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Detection,
}

/// What the user wants trained, in plain text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRequest {
    pub target_objects: Vec<String>,
    pub background: String,
    pub training_objective: String,
    #[serde(default)]
    pub label_classes: Vec<String>,
    pub task_kind: TaskKind,
    /// Overrides the `a {target} is {class}` prompt template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
}

impl UserRequest {
    pub fn validate(&self) -> Result<()> {
        if self.target_objects.is_empty() {
            return Err(Error::invalid("request needs at least one target object"));
        }
        if self.target_objects.len() > u16::MAX as usize {
            return Err(Error::invalid("too many target objects"));
        }
        if self.target_objects.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("target descriptions must be non-empty"));
        }
        if self.background.trim().is_empty() {
            return Err(Error::invalid("background description must be non-empty"));
        }
        if self.task_kind == TaskKind::Classification && self.label_classes.len() < 2 {
            return Err(Error::invalid("classification needs at least two label classes"));
        }
        let mut seen = self.label_classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.label_classes.len() {
            return Err(Error::invalid("label classes must be distinct"));
        }
        Ok(())
    }

    /// All roles of this request, targets first.
    pub fn roles(&self) -> Vec<SegmentRole> {
        (0..self.target_objects.len() as u16)
            .map(SegmentRole::Target)
            .chain(core::iter::once(SegmentRole::Background))
            .collect()
    }

    pub fn has_role(&self, role: SegmentRole) -> bool {
        match role {
            SegmentRole::Target(i) => (i as usize) < self.target_objects.len(),
            SegmentRole::Background => true,
        }
    }

    /// The text description the sanitizer sends for `role`.
    pub fn description(&self, role: SegmentRole) -> Option<&str> {
        match role {
            SegmentRole::Target(i) => self.target_objects.get(i as usize).map(String::as_str),
            SegmentRole::Background => Some(&self.background),
        }
    }
}

/// A segment category. Targets are numbered from zero and order before the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentRole {
    Target(u16),
    Background,
}

impl SegmentRole {
    /// Short label for tables: `t` when there is a single target, `t1`, `t2`, ... otherwise.
    pub fn label(self, target_count: usize) -> String {
        match self {
            SegmentRole::Target(0) if target_count == 1 => "t".to_string(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for SegmentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentRole::Target(i) => write!(f, "t{}", *i as u32 + 1),
            SegmentRole::Background => f.write_str("b"),
        }
    }
}

impl FromStr for SegmentRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "b" => Ok(SegmentRole::Background),
            "t" => Ok(SegmentRole::Target(0)),
            other => {
                let n: u16 = other
                    .strip_prefix('t')
                    .and_then(|d| d.parse().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::Parse(format!("unknown segment role {other:?}")))?;
                Ok(SegmentRole::Target(n - 1))
            }
        }
    }
}

impl Serialize for SegmentRole {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Image feature shared under the middle scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Canny,
    Pose,
    LayoutBox,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Canny => "canny",
            FeatureKind::Pose => "pose",
            FeatureKind::LayoutBox => "layout_box",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canny" => Ok(FeatureKind::Canny),
            "pose" => Ok(FeatureKind::Pose),
            "layout_box" | "layout" | "box" => Ok(FeatureKind::LayoutBox),
            other => Err(Error::UnsupportedFeature(other.to_string())),
        }
    }
}

/// Sanitization scheme: text only, text plus a derived feature image, or text plus raw pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    L0,
    L1(FeatureKind),
    L2,
}

impl Scheme {
    pub fn rank(self) -> u8 {
        match self {
            Scheme::L0 => 0,
            Scheme::L1(_) => 1,
            Scheme::L2 => 2,
        }
    }
}

/// A scheme plus an optional Gaussian-noise modifier applied to the segment canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SanitizationLevel {
    pub scheme: Scheme,
    pub noise: Option<NoiseParams>,
}

impl SanitizationLevel {
    pub const L0: Self = Self::plain(Scheme::L0);
    pub const L2: Self = Self::plain(Scheme::L2);

    pub const fn plain(scheme: Scheme) -> Self {
        Self {
            scheme,
            noise: None,
        }
    }

    pub const fn l1(kind: FeatureKind) -> Self {
        Self::plain(Scheme::L1(kind))
    }

    pub fn with_noise(mut self, noise: NoiseParams) -> Self {
        self.noise = Some(noise);
        self
    }
}

/// Spelled `L0`, `L1` (canny), `L1:pose`, `L2`, with an optional `@sigma` noise suffix,
/// e.g. `L2@10`.
impl fmt::Display for SanitizationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme {
            Scheme::L0 => f.write_str("L0")?,
            Scheme::L1(FeatureKind::Canny) => f.write_str("L1")?,
            Scheme::L1(k) => write!(f, "L1:{}", k.as_str())?,
            Scheme::L2 => f.write_str("L2")?,
        }
        if let Some(n) = self.noise {
            write!(f, "@{}", n.sigma)?;
        }
        Ok(())
    }
}

impl FromStr for SanitizationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, noise) = match s.split_once('@') {
            Some((b, sigma)) => {
                let sigma: f64 = sigma
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad noise sigma in {s:?}")))?;
                (b, Some(NoiseParams::new(sigma, 0)?))
            }
            None => (s, None),
        };
        let (level, feature) = match body.split_once(':') {
            Some((l, f)) => (l, Some(f)),
            None => (body, None),
        };
        let scheme = match (level.to_ascii_uppercase().as_str(), feature) {
            ("L0", None) => Scheme::L0,
            ("L2", None) => Scheme::L2,
            ("L1", None) => Scheme::L1(FeatureKind::Canny),
            ("L1", Some(f)) => Scheme::L1(f.parse()?),
            _ => return Err(Error::Parse(format!("unknown sanitization level {s:?}"))),
        };
        Ok(SanitizationLevel { scheme, noise })
    }
}

#[derive(Serialize, Deserialize)]
struct LevelRepr {
    level: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<FeatureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<NoiseParams>,
}

impl Serialize for SanitizationLevel {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        let (level, feature) = match self.scheme {
            Scheme::L0 => ("L0", None),
            Scheme::L1(k) => ("L1", Some(k)),
            Scheme::L2 => ("L2", None),
        };
        LevelRepr {
            level: level.to_string(),
            feature,
            noise: self.noise,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SanitizationLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = LevelRepr::deserialize(d)?;
        let scheme = match (r.level.as_str(), r.feature) {
            ("L0", None) => Scheme::L0,
            ("L2", None) => Scheme::L2,
            ("L1", Some(k)) => Scheme::L1(k),
            ("L1", None) => return Err(D::Error::custom("L1 requires a feature kind")),
            ("L0" | "L2", Some(_)) => {
                return Err(D::Error::custom("feature kind is only valid with L1"))
            }
            (other, _) => return Err(D::Error::custom(format!("unknown level {other:?}"))),
        };
        if let Some(n) = r.noise {
            NoiseParams::new(n.sigma, n.seed).map_err(D::Error::custom)?;
        }
        Ok(SanitizationLevel {
            scheme,
            noise: r.noise,
        })
    }
}

/// Per-role sanitization levels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrivacyPreference {
    levels: BTreeMap<SegmentRole, SanitizationLevel>,
}

impl PrivacyPreference {
    pub fn new() -> Self {
        Self::default()
    }

    /// Two-role preference for single-target requests.
    pub fn pair(target: SanitizationLevel, background: SanitizationLevel) -> Self {
        Self::new()
            .with(SegmentRole::Target(0), target)
            .with(SegmentRole::Background, background)
    }

    pub fn with(mut self, role: SegmentRole, level: SanitizationLevel) -> Self {
        self.levels.insert(role, level);
        self
    }

    pub fn get(&self, role: SegmentRole) -> Option<&SanitizationLevel> {
        self.levels.get(&role)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SegmentRole, &SanitizationLevel)> {
        self.levels.iter().map(|(r, l)| (*r, l))
    }

    pub fn roles(&self) -> impl Iterator<Item = SegmentRole> + '_ {
        self.levels.keys().copied()
    }

    /// Checks that there is exactly one level per role of `request`.
    pub fn validate_for(&self, request: &UserRequest) -> Result<()> {
        for role in request.roles() {
            if !self.levels.contains_key(&role) {
                return Err(Error::invalid(format!("preference has no level for role {role}")));
            }
        }
        if let Some(extra) = self.levels.keys().find(|r| !request.has_role(**r)) {
            return Err(Error::invalid(format!("preference names unknown role {extra}")));
        }
        Ok(())
    }

    fn target_count(&self) -> usize {
        self.levels
            .keys()
            .filter(|r| matches!(r, SegmentRole::Target(_)))
            .count()
    }
}

/// `t=L2,b=L0` or `t1=L0,t2=L1,b=L2`.
impl fmt::Display for PrivacyPreference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.target_count();
        for (i, (role, level)) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}={}", role.label(n), level)?;
        }
        Ok(())
    }
}

impl FromStr for PrivacyPreference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut pref = PrivacyPreference::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (role, level) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected role=level, got {part:?}")))?;
            let role: SegmentRole = role.parse()?;
            if pref.levels.insert(role, level.parse()?).is_some() {
                return Err(Error::Parse(format!("role {role} given twice")));
            }
        }
        if pref.levels.is_empty() {
            return Err(Error::Parse("empty preference".to_string()));
        }
        Ok(pref)
    }
}
