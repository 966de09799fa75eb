use serde::{Deserialize, Serialize};

use crate::data::{GroupLabel, PanelDataset, RewriteKind, VersionKey};
use crate::error::{Error, Result};
use crate::scorer::PredictionPanel;

/// Which rewrite kinds serve as panel levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindSelection {
    #[default]
    Sat,
    Neutral,
    All,
}

impl KindSelection {
    pub fn admits(self, kind: RewriteKind) -> bool {
        match self {
            KindSelection::Sat => kind.sat_level().is_some(),
            KindSelection::Neutral => kind == RewriteKind::Neutral,
            KindSelection::All => !kind.is_original(),
        }
    }
}

/// One accepted rewrite with its scores under (HIGH, LOW) scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVersion {
    pub level: usize,
    pub scores: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEssay {
    pub essay_id: String,
    /// Position of the essay in the source dataset.
    pub position: usize,
    pub group: GroupLabel,
    pub original: [f64; 2],
    pub rewrites: Vec<ScoredVersion>,
}

impl ScoredEssay {
    pub fn original_under(&self, scorer: GroupLabel) -> f64 {
        self.original[scorer.index()]
    }

    /// Mean of accepted rewrite scores under `scorer`.
    pub fn rewrite_average(&self, scorer: GroupLabel) -> f64 {
        let g = scorer.index();
        self.rewrites.iter().map(|v| v.scores[g]).sum::<f64>() / self.rewrites.len() as f64
    }
}

/// Compact estimation sample: essays holding an original and at least one
/// accepted rewrite of the selected kinds, with both scorers' predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPanel {
    pub essays: Vec<ScoredEssay>,
    /// Level identities `(kind, version_k)` indexed by `ScoredVersion::level`.
    pub levels: Vec<(RewriteKind, u32)>,
    /// Essays dropped for lack of accepted rewrites.
    pub excluded: Vec<String>,
}

impl ScoredPanel {
    pub fn build(ds: &PanelDataset, preds: &PredictionPanel, kinds: KindSelection) -> Result<ScoredPanel> {
        let mut levels: Vec<(RewriteKind, u32)> = ds
            .versions()
            .iter()
            .filter(|v| v.accepted && kinds.admits(v.kind))
            .map(|v| (v.kind, v.version_k))
            .collect();
        levels.sort_unstable();
        levels.dedup();
        let level_of = |k: RewriteKind, vk: u32| levels.binary_search(&(k, vk)).expect("level collected");

        let lookup = |key: &VersionKey| -> Result<[f64; 2]> {
            let mut out = [0.0; 2];
            for g in GroupLabel::BOTH {
                out[g.index()] = preds
                    .get(g, key)
                    .ok_or_else(|| Error::MissingPrediction(format!("{key} under scorer {g}")))?;
            }
            Ok(out)
        };

        let mut essays = Vec::new();
        let mut excluded = Vec::new();
        for (i, e) in ds.essays().iter().enumerate() {
            let Some(orig) = ds.original_of(i).filter(|v| v.accepted) else {
                excluded.push(e.essay_id.clone());
                continue;
            };
            let mut rewrites = Vec::new();
            for v in ds.versions_of(i).filter(|v| v.accepted && kinds.admits(v.kind)) {
                rewrites.push(ScoredVersion {
                    level: level_of(v.kind, v.version_k),
                    scores: lookup(&VersionKey::of(v))?,
                });
            }
            if rewrites.is_empty() {
                excluded.push(e.essay_id.clone());
                continue;
            }
            essays.push(ScoredEssay {
                essay_id: e.essay_id.clone(),
                position: i,
                group: e.group,
                original: lookup(&VersionKey::of(orig))?,
                rewrites,
            });
        }
        if !excluded.is_empty() {
            log::info!("{} essays without accepted rewrites excluded from estimation", excluded.len());
        }
        Ok(ScoredPanel { essays, levels, excluded })
    }

    pub fn all_members(&self) -> Vec<usize> {
        (0..self.essays.len()).collect()
    }

    /// Members of one group among `members`.
    pub fn count(&self, members: &[usize], g: GroupLabel) -> usize {
        members.iter().filter(|&&m| self.essays[m].group == g).count()
    }
}
