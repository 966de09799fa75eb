use serde::{Deserialize, Serialize};

use super::{EssayRecord, GroupLabel, PanelDataset, RewriteKind, VersionRecord};
use crate::error::{Error, Result};

/// Predicate over essays (covariates) and versions (rewrite kind).
///
/// Essay-level filters drop whole essays with all their versions. Kind
/// filters never drop originals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "filter", rename_all = "snake_case")]
pub enum PanelFilter {
    Covariate { name: String, values: Vec<String> },
    Group { group: GroupLabel },
    /// Keep originals plus the listed rewrite kinds.
    Kinds { kinds: Vec<RewriteKind> },
    /// Keep originals plus every rewrite kind except the listed ones.
    ExcludeKinds { kinds: Vec<RewriteKind> },
    /// Keep essays whose rounded human score lies in `[min_score, max_score]`
    /// and only SAT rewrites within `max_distance` of that score.
    AdjacentLevels {
        min_score: u8,
        max_score: u8,
        max_distance: u8,
    },
    All { filters: Vec<PanelFilter> },
}

impl PanelFilter {
    pub fn covariate(name: &str, value: &str) -> Self {
        PanelFilter::Covariate {
            name: name.into(),
            values: vec![value.into()],
        }
    }

    /// Score 2-5 originals with SAT levels within one of the human score.
    pub fn adjacent() -> Self {
        PanelFilter::AdjacentLevels {
            min_score: 2,
            max_score: 5,
            max_distance: 1,
        }
    }

    fn check(&self, ds: &PanelDataset) -> Result<()> {
        match self {
            PanelFilter::Covariate { name, .. } => {
                let declared = name == "prompt_name"
                    || name == "group"
                    || ds.manifest().covariates.iter().any(|c| c == name);
                if declared {
                    Ok(())
                } else {
                    Err(Error::UnknownCovariate(name.clone()))
                }
            }
            PanelFilter::All { filters } => filters.iter().try_for_each(|f| f.check(ds)),
            _ => Ok(()),
        }
    }

    fn keep_essay(&self, e: &EssayRecord) -> bool {
        match self {
            PanelFilter::Covariate { name, values } => e
                .covariate(name)
                .is_some_and(|v| values.iter().any(|w| w == v)),
            PanelFilter::Group { group } => e.group == *group,
            PanelFilter::AdjacentLevels {
                min_score,
                max_score,
                ..
            } => rounded_score(e).is_some_and(|s| (*min_score..=*max_score).contains(&s)),
            PanelFilter::All { filters } => filters.iter().all(|f| f.keep_essay(e)),
            PanelFilter::Kinds { .. } | PanelFilter::ExcludeKinds { .. } => true,
        }
    }

    fn keep_version(&self, e: &EssayRecord, v: &VersionRecord) -> bool {
        if v.kind.is_original() {
            return true;
        }
        match self {
            PanelFilter::Kinds { kinds } => kinds.contains(&v.kind),
            PanelFilter::ExcludeKinds { kinds } => !kinds.contains(&v.kind),
            PanelFilter::AdjacentLevels { max_distance, .. } => {
                match (v.kind.sat_level(), rounded_score(e)) {
                    (Some(k), Some(s)) => k.abs_diff(s) <= *max_distance,
                    _ => false,
                }
            }
            PanelFilter::All { filters } => filters.iter().all(|f| f.keep_version(e, v)),
            _ => true,
        }
    }
}

fn rounded_score(e: &EssayRecord) -> Option<u8> {
    e.human_score.map(|s| s.round().clamp(1.0, 6.0) as u8)
}

impl PanelDataset {
    /// Sub-panel satisfying `filter`. Fails with "empty subset" when no essay
    /// survives. Essays left without accepted rewrites stay in the panel and
    /// show up in [`PanelDataset::essays_without_panel`].
    pub fn subset(&self, filter: &PanelFilter) -> Result<PanelDataset> {
        filter.check(self)?;
        let mut essays = Vec::new();
        let mut versions = Vec::new();
        for (i, e) in self.essays().iter().enumerate() {
            if !filter.keep_essay(e) {
                continue;
            }
            essays.push(e.clone());
            versions.extend(
                self.versions_of(i)
                    .filter(|v| filter.keep_version(e, v))
                    .cloned(),
            );
        }
        if essays.is_empty() {
            return Err(Error::EmptySubset);
        }
        let out = PanelDataset::from_parts_unchecked(
            essays,
            versions,
            self.manifest().clone(),
            self.seed_registry().clone(),
        );
        let flagged = out.essays_without_panel().len();
        if flagged > 0 {
            log::info!("subset: {flagged} essays with zero surviving rewrites");
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    fn graded() -> PanelDataset {
        let mut essays = Vec::new();
        let mut versions = Vec::new();
        for (i, (g, grade, score)) in [
            (GroupLabel::High, "6", 3.0),
            (GroupLabel::Low, "6", 1.0),
            (GroupLabel::High, "11", 5.6),
            (GroupLabel::Low, "11", 2.2),
        ]
        .into_iter()
        .enumerate()
        {
            let id = format!("e{i}");
            let mut e = essay(&id, g, score);
            e.covariates.insert("grade".into(), grade.into());
            essays.push(e);
            versions.push(version(&id, 0, RewriteKind::Original, 0.0));
            for k in 1..=6u8 {
                versions.push(version(&id, u32::from(k), RewriteKind::Sat(k), 0.0));
            }
        }
        PanelDataset::new(essays, versions, manifest(1, 1)).unwrap()
    }

    #[test]
    fn covariate_filter() {
        let sub = graded().subset(&PanelFilter::covariate("grade", "6")).unwrap();
        assert_eq!(sub.essays().len(), 2);
        assert_eq!(sub.versions().len(), 14);
    }

    #[test]
    fn kinds_filter_keeps_originals() {
        let f = PanelFilter::Kinds {
            kinds: vec![
                RewriteKind::Sat(1),
                RewriteKind::Sat(2),
                RewriteKind::Sat(5),
                RewriteKind::Sat(6),
            ],
        };
        let sub = graded().subset(&f).unwrap();
        assert_eq!(sub.versions().len(), 4 * 5);
        assert!(sub.versions().iter().all(|v| v.kind.sat_level() != Some(3)));
    }

    #[test]
    fn no_match_is_empty_subset() {
        let err = graded()
            .subset(&PanelFilter::covariate("grade", "99"))
            .unwrap_err();
        assert_eq!(err.to_string(), "empty subset");
    }

    #[test]
    fn undeclared_covariate_rejected() {
        assert!(matches!(
            graded().subset(&PanelFilter::covariate("shoe_size", "9")),
            Err(Error::UnknownCovariate(_))
        ));
    }

    #[test]
    fn adjacent_levels_for_score_three() {
        let sub = graded().subset(&PanelFilter::adjacent()).unwrap();
        // score 1 and rounded 5.6 -> 6 are dropped
        let ids: Vec<&str> = sub.essays().iter().map(|e| e.essay_id.as_str()).collect();
        assert_eq!(ids, ["e0", "e3"]);
        let kinds: Vec<RewriteKind> = sub
            .versions()
            .iter()
            .filter(|v| v.essay_id == "e0")
            .map(|v| v.kind)
            .collect();
        assert_eq!(
            kinds,
            [
                RewriteKind::Original,
                RewriteKind::Sat(2),
                RewriteKind::Sat(3),
                RewriteKind::Sat(4)
            ]
        );
    }

    #[test]
    fn subset_is_idempotent() {
        let ds = graded();
        for f in [
            PanelFilter::covariate("grade", "11"),
            PanelFilter::adjacent(),
            PanelFilter::ExcludeKinds {
                kinds: vec![RewriteKind::Sat(1)],
            },
        ] {
            let once = ds.subset(&f).unwrap();
            assert_eq!(once.subset(&f).unwrap(), once);
            assert_eq!(once.manifest(), ds.manifest());
        }
    }
}
