//! Panel data model: essays, their versions (original plus rewrites), feature
//! vectors and the dataset container every stage consumes.

mod io;
mod subset;
mod validate;

pub use io::{emit_panel, ingest_panel, read_manifest, read_version_features, write_manifest, IngestSummary};
pub use subset::PanelFilter;
pub use validate::{validate_panel, CheckResult, KindAcceptance, ValidationReport};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary group membership of an essay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GroupLabel {
    High,
    Low,
}

impl GroupLabel {
    pub const BOTH: [GroupLabel; 2] = [GroupLabel::High, GroupLabel::Low];

    pub fn other(self) -> GroupLabel {
        match self {
            GroupLabel::High => GroupLabel::Low,
            GroupLabel::Low => GroupLabel::High,
        }
    }

    /// 0 for HIGH, 1 for LOW; used to index per-group arrays.
    pub fn index(self) -> usize {
        match self {
            GroupLabel::High => 0,
            GroupLabel::Low => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::High => "HIGH",
            GroupLabel::Low => "LOW",
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HIGH" | "H" => Ok(GroupLabel::High),
            "LOW" | "L" => Ok(GroupLabel::Low),
            _ => Err(Error::UnknownGroup(s.to_string())),
        }
    }
}

/// Which text a version record holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RewriteKind {
    Original,
    /// SAT-conditioned rewrite at target level 1..=6.
    Sat(u8),
    Neutral,
}

impl RewriteKind {
    pub const SAT_LEVELS: [RewriteKind; 6] = [
        RewriteKind::Sat(1),
        RewriteKind::Sat(2),
        RewriteKind::Sat(3),
        RewriteKind::Sat(4),
        RewriteKind::Sat(5),
        RewriteKind::Sat(6),
    ];

    pub fn sat(level: u8) -> Result<RewriteKind> {
        if (1..=6).contains(&level) {
            Ok(RewriteKind::Sat(level))
        } else {
            Err(Error::InvalidRecord(format!("SAT level {level} outside 1..6")))
        }
    }

    pub fn is_original(self) -> bool {
        self == RewriteKind::Original
    }

    pub fn sat_level(self) -> Option<u8> {
        match self {
            RewriteKind::Sat(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for RewriteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteKind::Original => f.write_str("ORIGINAL"),
            RewriteKind::Sat(k) => write!(f, "SAT_{k}"),
            RewriteKind::Neutral => f.write_str("NEUTRAL"),
        }
    }
}

impl FromStr for RewriteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        match t.as_str() {
            "ORIGINAL" => Ok(RewriteKind::Original),
            "NEUTRAL" => Ok(RewriteKind::Neutral),
            _ => match t.strip_prefix("SAT_").and_then(|k| k.parse::<u8>().ok()) {
                Some(k) => RewriteKind::sat(k),
                None => Err(Error::InvalidRecord(format!("unknown rewrite kind {s:?}"))),
            },
        }
    }
}

impl Serialize for RewriteKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RewriteKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Observable features of one text version.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub embedding: Vec<f64>,
    pub style: Vec<f64>,
    /// Values for the manifest's extra columns, in manifest order.
    pub extras: Vec<f64>,
}

impl FeatureVector {
    pub fn is_finite(&self) -> bool {
        self.embedding
            .iter()
            .chain(&self.style)
            .chain(&self.extras)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub group: GroupLabel,
    pub human_score: Option<f64>,
    pub prompt_name: String,
    /// Additional categorical covariates (grade, gender, ...).
    pub covariates: BTreeMap<String, String>,
    pub text: Option<String>,
}

impl EssayRecord {
    /// Categorical value by name; `prompt_name` and `group` are addressable too.
    pub fn covariate(&self, name: &str) -> Option<&str> {
        match name {
            "prompt_name" => Some(&self.prompt_name),
            "group" => Some(self.group.as_str()),
            _ => self.covariates.get(name).map(String::as_str),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub essay_id: String,
    pub version_k: u32,
    pub kind: RewriteKind,
    pub features: FeatureVector,
    pub accepted: bool,
}

/// Column names for the feature layout plus declared prompt list and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub embedding_dim: usize,
    pub style_columns: Vec<String>,
    #[serde(default)]
    pub extra_columns: Vec<String>,
    /// Declared prompt names; empty accepts any.
    #[serde(default)]
    pub prompts: Vec<String>,
    /// Optional categorical covariate columns of the essays file.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl FeatureManifest {
    pub fn feature_dim(&self) -> usize {
        self.embedding_dim + self.style_columns.len() + self.extra_columns.len()
    }

    /// Column names in the canonical order embedding, style, extras.
    pub fn feature_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = (0..self.embedding_dim).map(|i| format!("emb_{i}")).collect();
        cols.extend(self.style_columns.iter().cloned());
        cols.extend(self.extra_columns.iter().cloned());
        cols
    }

    /// Same layout, ignoring prompts and provenance.
    pub fn same_layout(&self, other: &FeatureManifest) -> bool {
        self.embedding_dim == other.embedding_dim
            && self.style_columns == other.style_columns
            && self.extra_columns == other.extra_columns
    }
}

/// Key identifying one version in the panel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionKey {
    pub essay_id: String,
    pub version_k: u32,
    pub kind: RewriteKind,
}

impl VersionKey {
    pub fn new(essay_id: impl Into<String>, version_k: u32, kind: RewriteKind) -> Self {
        VersionKey {
            essay_id: essay_id.into(),
            version_k,
            kind,
        }
    }

    pub fn of(v: &VersionRecord) -> Self {
        VersionKey::new(v.essay_id.clone(), v.version_k, v.kind)
    }
}

impl fmt::Display for VersionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.essay_id, self.version_k, self.kind)
    }
}

/// Essays × versions panel. Immutable once constructed; every transformation
/// builds a new dataset.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    essays: Vec<EssayRecord>,
    versions: Vec<VersionRecord>,
    manifest: FeatureManifest,
    seed_registry: BTreeMap<String, u64>,
    essay_index: HashMap<String, usize>,
    by_essay: Vec<Vec<usize>>,
}

impl PanelDataset {
    /// Build a dataset, rejecting hard violations (duplicates, out-of-range
    /// scores, undeclared prompts, bad feature arity, non-finite features).
    /// Soft properties are reported by [`validate_panel`].
    pub fn new(
        essays: Vec<EssayRecord>,
        versions: Vec<VersionRecord>,
        manifest: FeatureManifest,
    ) -> Result<Self> {
        let mut essay_index = HashMap::with_capacity(essays.len());
        for (i, e) in essays.iter().enumerate() {
            if essay_index.insert(e.essay_id.clone(), i).is_some() {
                return Err(Error::DuplicateEssay(e.essay_id.clone()));
            }
            if let Some(s) = e.human_score {
                if !(1.0..=6.0).contains(&s) || !s.is_finite() {
                    return Err(Error::ScoreOutOfRange {
                        essay_id: e.essay_id.clone(),
                        score: s,
                    });
                }
            }
            if !manifest.prompts.is_empty() && !manifest.prompts.contains(&e.prompt_name) {
                return Err(Error::InvalidRecord(format!(
                    "essay {} has undeclared prompt {:?}",
                    e.essay_id, e.prompt_name
                )));
            }
        }
        let mut by_essay = vec![Vec::new(); essays.len()];
        let mut seen = HashSet::with_capacity(versions.len());
        let (de, ds, dx) = (
            manifest.embedding_dim,
            manifest.style_columns.len(),
            manifest.extra_columns.len(),
        );
        for (j, v) in versions.iter().enumerate() {
            let Some(&i) = essay_index.get(&v.essay_id) else {
                return Err(Error::InvalidRecord(format!(
                    "version for unknown essay {}",
                    v.essay_id
                )));
            };
            if (v.version_k == 0) != v.kind.is_original() {
                return Err(Error::InvalidRecord(format!(
                    "essay {}: version_k {} with kind {}",
                    v.essay_id, v.version_k, v.kind
                )));
            }
            if !seen.insert((v.essay_id.as_str(), v.version_k, v.kind)) {
                return Err(Error::DuplicateVersion {
                    essay_id: v.essay_id.clone(),
                    version_k: v.version_k,
                    kind: v.kind.to_string(),
                });
            }
            let f = &v.features;
            for (expected, got) in [(de, f.embedding.len()), (ds, f.style.len()), (dx, f.extras.len())] {
                if expected != got {
                    return Err(Error::DimensionMismatch { expected, got });
                }
            }
            if !f.is_finite() {
                return Err(Error::InvalidRecord(format!(
                    "non-finite feature in {}",
                    VersionKey::of(v)
                )));
            }
            by_essay[i].push(j);
        }
        Ok(PanelDataset {
            essays,
            versions,
            manifest,
            seed_registry: BTreeMap::new(),
            essay_index,
            by_essay,
        })
    }

    pub fn essays(&self) -> &[EssayRecord] {
        &self.essays
    }

    pub fn versions(&self) -> &[VersionRecord] {
        &self.versions
    }

    pub fn manifest(&self) -> &FeatureManifest {
        &self.manifest
    }

    pub fn seed_registry(&self) -> &BTreeMap<String, u64> {
        &self.seed_registry
    }

    /// Return a copy with `stage → seed` recorded.
    pub fn with_seed(mut self, stage: &str, seed: u64) -> Self {
        self.seed_registry.insert(stage.to_string(), seed);
        self
    }

    pub fn essay(&self, id: &str) -> Option<&EssayRecord> {
        self.essay_index.get(id).map(|&i| &self.essays[i])
    }

    pub fn essay_position(&self, id: &str) -> Option<usize> {
        self.essay_index.get(id).copied()
    }

    /// All versions of the essay at position `i`, accepted or not.
    pub fn versions_of(&self, i: usize) -> impl Iterator<Item = &VersionRecord> {
        self.by_essay[i].iter().map(move |&j| &self.versions[j])
    }

    pub fn original_of(&self, i: usize) -> Option<&VersionRecord> {
        self.versions_of(i).find(|v| v.kind.is_original())
    }

    pub fn accepted_versions(&self) -> impl Iterator<Item = &VersionRecord> {
        self.versions.iter().filter(|v| v.accepted)
    }

    /// Largest version index present.
    pub fn k(&self) -> u32 {
        self.versions.iter().map(|v| v.version_k).max().unwrap_or(0)
    }

    pub fn group_count(&self, g: GroupLabel) -> usize {
        self.essays.iter().filter(|e| e.group == g).count()
    }

    pub fn has_kind(&self, pred: impl Fn(RewriteKind) -> bool) -> bool {
        self.versions.iter().any(|v| v.accepted && pred(v.kind))
    }

    /// Essays whose original survives but which hold no accepted rewrite.
    pub fn essays_without_panel(&self) -> Vec<&str> {
        (0..self.essays.len())
            .filter(|&i| !self.versions_of(i).any(|v| v.accepted && !v.kind.is_original()))
            .map(|i| self.essays[i].essay_id.as_str())
            .collect()
    }

    /// Swap HIGH and LOW labels on every essay.
    pub fn swap_groups(&self) -> PanelDataset {
        let essays = self
            .essays
            .iter()
            .map(|e| EssayRecord {
                group: e.group.other(),
                ..e.clone()
            })
            .collect();
        let mut out = PanelDataset::new(essays, self.versions.clone(), self.manifest.clone())
            .expect("relabeling preserves validity");
        out.seed_registry = self.seed_registry.clone();
        out
    }

    pub(crate) fn from_parts_unchecked(
        essays: Vec<EssayRecord>,
        versions: Vec<VersionRecord>,
        manifest: FeatureManifest,
        seed_registry: BTreeMap<String, u64>,
    ) -> PanelDataset {
        let essay_index: HashMap<String, usize> = essays
            .iter()
            .enumerate()
            .map(|(i, e)| (e.essay_id.clone(), i))
            .collect();
        let mut by_essay = vec![Vec::new(); essays.len()];
        for (j, v) in versions.iter().enumerate() {
            by_essay[essay_index[&v.essay_id]].push(j);
        }
        PanelDataset {
            essays,
            versions,
            manifest,
            seed_registry,
            essay_index,
            by_essay,
        }
    }

    pub fn into_parts(self) -> (Vec<EssayRecord>, Vec<VersionRecord>, FeatureManifest) {
        (self.essays, self.versions, self.manifest)
    }
}

impl PartialEq for PanelDataset {
    fn eq(&self, other: &Self) -> bool {
        self.essays == other.essays
            && self.versions == other.versions
            && self.manifest == other.manifest
            && self.seed_registry == other.seed_registry
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn manifest(de: usize, ds: usize) -> FeatureManifest {
        FeatureManifest {
            embedding_dim: de,
            style_columns: (0..ds).map(|i| format!("sty_{i}")).collect(),
            extra_columns: vec![],
            prompts: vec![],
            covariates: vec!["grade".into()],
            provenance: BTreeMap::new(),
        }
    }

    pub fn essay(id: &str, g: GroupLabel, score: f64) -> EssayRecord {
        EssayRecord {
            essay_id: id.into(),
            group: g,
            human_score: Some(score),
            prompt_name: "p1".into(),
            covariates: [("grade".to_string(), "6".to_string())].into(),
            text: None,
        }
    }

    pub fn version(id: &str, k: u32, kind: RewriteKind, x: f64) -> VersionRecord {
        VersionRecord {
            essay_id: id.into(),
            version_k: k,
            kind,
            features: FeatureVector {
                embedding: vec![x],
                style: vec![x * 0.5],
                extras: vec![],
            },
            accepted: true,
        }
    }

    /// Two essays, each with an original and two SAT rewrites.
    pub fn tiny() -> PanelDataset {
        let essays = vec![
            essay("a", GroupLabel::High, 4.0),
            essay("b", GroupLabel::Low, 3.0),
        ];
        let mut versions = Vec::new();
        for id in ["a", "b"] {
            versions.push(version(id, 0, RewriteKind::Original, 1.0));
            versions.push(version(id, 1, RewriteKind::Sat(1), 2.0));
            versions.push(version(id, 2, RewriteKind::Sat(2), 3.0));
        }
        PanelDataset::new(essays, versions, manifest(1, 1)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn kind_round_trips_through_text() {
        for k in [RewriteKind::Original, RewriteKind::Sat(3), RewriteKind::Neutral] {
            assert_eq!(k.to_string().parse::<RewriteKind>().unwrap(), k);
        }
        assert!("SAT_7".parse::<RewriteKind>().is_err());
        assert_eq!(RewriteKind::Sat(6).to_string(), "SAT_6");
    }

    #[test]
    fn group_parse() {
        assert_eq!("high".parse::<GroupLabel>().unwrap(), GroupLabel::High);
        assert!(matches!("mid".parse::<GroupLabel>(), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn minimal_panel_has_k2_and_six_rows() {
        let ds = tiny();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.versions().len(), 6);
    }

    #[test]
    fn score_seven_rejected() {
        let e = vec![essay("a", GroupLabel::High, 7.0)];
        let err = PanelDataset::new(e, vec![], manifest(1, 1)).unwrap_err();
        assert!(err.to_string().contains("score out of range [1,6]"));
    }

    #[test]
    fn duplicate_version_rejected() {
        let e = vec![essay("a", GroupLabel::High, 3.0)];
        let v = vec![
            version("a", 0, RewriteKind::Original, 1.0),
            version("a", 0, RewriteKind::Original, 1.0),
        ];
        assert!(matches!(
            PanelDataset::new(e, v, manifest(1, 1)),
            Err(Error::DuplicateVersion { .. })
        ));
    }

    #[test]
    fn version_zero_iff_original() {
        let e = vec![essay("a", GroupLabel::High, 3.0)];
        let v = vec![version("a", 0, RewriteKind::Sat(1), 1.0)];
        assert!(PanelDataset::new(e, v, manifest(1, 1)).is_err());
    }

    #[test]
    fn wrong_arity_rejected() {
        let e = vec![essay("a", GroupLabel::High, 3.0)];
        let mut v = version("a", 0, RewriteKind::Original, 1.0);
        v.features.embedding.push(0.0);
        assert!(matches!(
            PanelDataset::new(e, vec![v], manifest(1, 1)),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }
}
