use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{GroupLabel, PanelDataset, VersionKey};
use crate::error::{Error, Result};

/// Which model produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelTag {
    /// Model trained without fold `f`.
    Fold(usize),
    /// Model trained on every essay of its group.
    Full,
    /// Supplied from outside the pipeline (oracle or imported scores).
    External,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelTag::Fold(k) => write!(f, "fold:{k}"),
            ModelTag::Full => f.write_str("full"),
            ModelTag::External => f.write_str("external"),
        }
    }
}

impl FromStr for ModelTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelTag::Full),
            "external" => Ok(ModelTag::External),
            _ => s
                .strip_prefix("fold:")
                .and_then(|k| k.parse().ok())
                .map(ModelTag::Fold)
                .ok_or_else(|| Error::InvalidRecord(format!("bad model tag {s:?}"))),
        }
    }
}

impl Serialize for ModelTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub model: ModelTag,
}

/// Predictions of one scorer group's models over panel versions, with the
/// training essays of every model that contributed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSlice {
    pub entries: BTreeMap<VersionKey, Prediction>,
    pub provenance: BTreeMap<ModelTag, Vec<String>>,
}

impl PredictionSlice {
    /// Slice of externally supplied scores.
    pub fn external(entries: impl IntoIterator<Item = (VersionKey, f64)>) -> Self {
        PredictionSlice {
            entries: entries
                .into_iter()
                .map(|(k, score)| {
                    (
                        k,
                        Prediction {
                            score,
                            model: ModelTag::External,
                        },
                    )
                })
                .collect(),
            provenance: [(ModelTag::External, Vec::new())].into(),
        }
    }

    pub fn get(&self, key: &VersionKey) -> Option<f64> {
        self.entries.get(key).map(|p| p.score)
    }
}

/// Predicted scores of every accepted version under both scorer groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPanel {
    slices: [PredictionSlice; 2],
}

#[derive(Serialize, Deserialize)]
struct ProvenanceFile {
    high: BTreeMap<ModelTag, Vec<String>>,
    low: BTreeMap<ModelTag, Vec<String>>,
}

impl PredictionPanel {
    pub fn new(high: PredictionSlice, low: PredictionSlice) -> Self {
        PredictionPanel { slices: [high, low] }
    }

    pub fn slice(&self, scorer: GroupLabel) -> &PredictionSlice {
        &self.slices[scorer.index()]
    }

    pub fn get(&self, scorer: GroupLabel, key: &VersionKey) -> Option<f64> {
        self.slices[scorer.index()].get(key)
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Add `c` to every prediction of one scorer.
    pub fn shifted(&self, scorer: GroupLabel, c: f64) -> PredictionPanel {
        let mut out = self.clone();
        for p in out.slices[scorer.index()].entries.values_mut() {
            p.score += c;
        }
        out
    }

    /// Exchange the HIGH and LOW scorer slices.
    pub fn swap_scorers(&self) -> PredictionPanel {
        PredictionPanel {
            slices: [self.slices[1].clone(), self.slices[0].clone()],
        }
    }

    /// Check that no prediction came from a model trained on its own essay.
    pub fn audit_no_leakage(&self) -> Result<()> {
        for (g, slice) in GroupLabel::BOTH.iter().zip(&self.slices) {
            let sets: BTreeMap<ModelTag, HashSet<&str>> = slice
                .provenance
                .iter()
                .map(|(t, ids)| (*t, ids.iter().map(String::as_str).collect()))
                .collect();
            for (key, p) in &slice.entries {
                let Some(train) = sets.get(&p.model) else {
                    return Err(Error::Leakage(format!(
                        "{g} prediction for {key} names unknown model {}",
                        p.model
                    )));
                };
                if train.contains(key.essay_id.as_str()) {
                    return Err(Error::Leakage(format!(
                        "{g} model {} trained on essay scored at {key}",
                        p.model
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every accepted version must carry a prediction under both scorers.
    pub fn check_complete(&self, ds: &PanelDataset) -> Result<()> {
        for v in ds.accepted_versions() {
            let key = VersionKey::of(v);
            for g in GroupLabel::BOTH {
                if self.get(g, &key).is_none() {
                    return Err(Error::MissingPrediction(format!("{key} under scorer {g}")));
                }
            }
        }
        Ok(())
    }

    /// Write scores as CSV and fold provenance as JSON.
    pub fn write(&self, csv_path: &Path, provenance_path: &Path) -> Result<()> {
        let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["essay_id", "version_k", "rewrite_kind", "scorer", "score", "model"])?;
        for (g, slice) in GroupLabel::BOTH.iter().zip(&self.slices) {
            for (k, p) in &slice.entries {
                w.write_record([
                    k.essay_id.clone(),
                    k.version_k.to_string(),
                    k.kind.to_string(),
                    g.to_string(),
                    format!("{}", p.score),
                    p.model.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let prov = ProvenanceFile {
            high: self.slices[0].provenance.clone(),
            low: self.slices[1].provenance.clone(),
        };
        let mut s = serde_json::to_string(&prov)?;
        s.push('\n');
        std::fs::write(provenance_path, s).map_err(|e| Error::io(provenance_path, e))
    }

    pub fn read(csv_path: &Path, provenance_path: &Path) -> Result<PredictionPanel> {
        let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != ["essay_id", "version_k", "rewrite_kind", "scorer", "score", "model"] {
            return Err(Error::Schema(format!("prediction header {header:?}")));
        }
        let mut slices = [PredictionSlice::default(), PredictionSlice::default()];
        for rec in r.records() {
            let rec = rec?;
            let key = VersionKey::new(
                &rec[0],
                rec[1]
                    .parse()
                    .map_err(|_| Error::InvalidRecord(format!("bad version_k {:?}", &rec[1])))?,
                rec[2].parse()?,
            );
            let g: GroupLabel = rec[3].parse()?;
            let score: f64 = rec[4]
                .parse()
                .map_err(|_| Error::InvalidRecord(format!("bad score {:?}", &rec[4])))?;
            let model: ModelTag = rec[5].parse()?;
            slices[g.index()].entries.insert(key, Prediction { score, model });
        }
        let text = std::fs::read_to_string(provenance_path).map_err(|e| Error::io(provenance_path, e))?;
        let prov: ProvenanceFile = serde_json::from_str(&text)?;
        slices[0].provenance = prov.high;
        slices[1].provenance = prov.low;
        let [high, low] = slices;
        Ok(PredictionPanel::new(high, low))
    }
}
