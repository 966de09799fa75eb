//! Identification diagnostics for the rewrite panel and the scorers.

mod auc;
mod did;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use auc::{auc, separation_auc, SeparationResult};
pub use did::{did_matrix, DidCell, DidMatrix, DidOptions};
pub(crate) use did::LevelScores;

use crate::data::{GroupLabel, PanelDataset, RewriteKind, VersionKey};
use crate::decomposition::ComponentEstimates;
use crate::error::{Error, Result};
use crate::scorer::{original_design, out_of_fold, r2, shuffled_folds, FeatureEncoder, FeatureSubset, PredictionPanel, TrainConfig};
use crate::seeds::derive_seed;

/// Which scorer's predictions a diagnostic reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerChoice {
    /// One scorer for every essay.
    Reference(GroupLabel),
    /// Each essay under its own group's scorer.
    Own,
}

impl Default for ScorerChoice {
    fn default() -> Self {
        ScorerChoice::Reference(GroupLabel::High)
    }
}

impl ScorerChoice {
    pub fn resolve(self, essay_group: GroupLabel) -> GroupLabel {
        match self {
            ScorerChoice::Reference(g) => g,
            ScorerChoice::Own => essay_group,
        }
    }
}

/// Two-sided normal critical value at `level`.
pub fn z_crit(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteMean {
    pub kind: RewriteKind,
    pub group: GroupLabel,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Group means of predicted scores per version kind, original included.
/// Each essay contributes the average of its accepted versions of a kind, so
/// intervals are essay-level.
pub fn rewrite_means(
    ds: &PanelDataset,
    preds: &PredictionPanel,
    scorer: ScorerChoice,
    ci_level: f64,
) -> Result<Vec<RewriteMean>> {
    let z = z_crit(ci_level);
    // (kind, group) -> per-essay averages
    let mut cells: BTreeMap<(RewriteKind, GroupLabel), Vec<f64>> = BTreeMap::new();
    for (i, e) in ds.essays().iter().enumerate() {
        let s = scorer.resolve(e.group);
        let mut per_kind: BTreeMap<RewriteKind, (f64, usize)> = BTreeMap::new();
        for v in ds.versions_of(i).filter(|v| v.accepted) {
            let key = VersionKey::of(v);
            let p = preds
                .get(s, &key)
                .ok_or_else(|| Error::MissingPrediction(format!("{key} under scorer {s}")))?;
            let c = per_kind.entry(v.kind).or_insert((0.0, 0));
            c.0 += p;
            c.1 += 1;
        }
        for (kind, (sum, n)) in per_kind {
            cells.entry((kind, e.group)).or_default().push(sum / n as f64);
        }
    }
    Ok(cells
        .into_iter()
        .map(|((kind, group), xs)| {
            let mean = crate::stats::mean(&xs).expect("nonempty cell");
            let se = crate::stats::sample_sd(&xs).map_or(0.0, |sd| sd / (xs.len() as f64).sqrt());
            RewriteMean {
                kind,
                group,
                n: xs.len(),
                mean,
                se,
                ci_low: mean - z * se,
                ci_high: mean + z * se,
            }
        })
        .collect())
}

/// Slack allowed when the joint R² falls short of the larger single-subset R².
pub const REDUNDANCY_EPS: f64 = 0.05;

/// Share of the content model's explained variance that style features also
/// explain: `(r2_style + r2_content - r2_both) / r2_content`.
pub fn redundancy_r2(r2_style: f64, r2_content: f64, r2_both: f64) -> Result<f64> {
    for (name, v) in [("r2_style", r2_style), ("r2_content", r2_content), ("r2_both", r2_both)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if r2_both < r2_style.max(r2_content) - REDUNDANCY_EPS {
        return Err(Error::Validation(format!(
            "joint R² {r2_both} below single-subset R² {}",
            r2_style.max(r2_content)
        )));
    }
    if r2_content == 0.0 {
        return Err(Error::Validation("r2_content is zero".into()));
    }
    Ok((r2_style + r2_content - r2_both) / r2_content)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetR2 {
    pub group: GroupLabel,
    pub n: usize,
    /// Embedding features only.
    pub content: f64,
    pub style: f64,
    pub both: f64,
    /// `None` when the inputs fail the redundancy preconditions.
    pub redundancy: Option<f64>,
}

/// Out-of-fold R² of one group's scorer on three feature subsets, all using
/// the same fold assignment.
pub fn feature_subset_r2(
    ds: &PanelDataset,
    group: GroupLabel,
    cfg: &TrainConfig,
    n_folds: usize,
    seed: u64,
) -> Result<SubsetR2> {
    let positions: Vec<usize> = (0..ds.essays().len()).filter(|&i| ds.essays()[i].group == group).collect();
    let fit = |subset: FeatureSubset, folds: Option<&[usize]>| -> Result<(f64, Vec<usize>, usize)> {
        let enc = FeatureEncoder::from_dataset(ds, subset);
        let (x, y, _) = original_design(ds, &positions, &enc)?;
        if y.len() < n_folds.max(2) {
            return Err(Error::EmptyData(format!("{} scored {group} originals for {n_folds} folds", y.len())));
        }
        let folds = folds.map_or_else(|| shuffled_folds(y.len(), n_folds, derive_seed(seed, &format!("r2-{group}"))), <[usize]>::to_vec);
        let oof = out_of_fold(&x, &y, &folds, n_folds, cfg)?;
        Ok((r2(&oof, &y)?, folds, y.len()))
    };
    let (content, folds, n) = fit(FeatureSubset::embedding_only(), None)?;
    let (style, _, _) = fit(FeatureSubset::style_only(), Some(&folds))?;
    let (both, _, _) = fit(FeatureSubset::embedding_and_style(), Some(&folds))?;
    let redundancy = redundancy_r2(style.clamp(0.0, 1.0), content.clamp(0.0, 1.0), both.clamp(0.0, 1.0)).ok();
    Ok(SubsetR2 {
        group,
        n,
        content,
        style,
        both,
        redundancy,
    })
}

/// Pearson correlation of `alpha` with the style residual within `group`.
pub fn component_correlation(est: &ComponentEstimates, ds: &PanelDataset, group: GroupLabel) -> Result<f64> {
    let (a, r): (Vec<f64>, Vec<f64>) = est
        .alpha
        .iter()
        .filter(|(id, _)| ds.essay(id).is_some_and(|e| e.group == group))
        .map(|(id, a)| (*a, est.style_residual[id]))
        .unzip();
    if a.len() < 3 {
        return Err(Error::EmptyData(format!("{} {group} essays; at least 3 are required", a.len())));
    }
    crate::stats::pearson(&a, &r).ok_or(Error::ZeroVariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_world, SyntheticConfig};

    #[test]
    fn redundancy_examples() {
        assert!((redundancy_r2(0.5, 0.3, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(redundancy_r2(0.2, 0.3, 0.5).unwrap(), 0.0);
        assert!((redundancy_r2(0.71, 0.64, 0.73).unwrap() - 0.96875).abs() < 1e-12);
        assert!(redundancy_r2(0.3, 0.0, 0.3).is_err());
        assert!(redundancy_r2(0.9, 0.5, 0.6).is_err());
        assert!(redundancy_r2(1.2, 0.5, 0.6).is_err());
    }

    #[test]
    fn redundancy_is_asymmetric() {
        let a = redundancy_r2(0.4, 0.6, 0.7).unwrap();
        let b = redundancy_r2(0.6, 0.4, 0.7).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
        assert!((b - 0.75).abs() < 1e-12);
        assert_eq!(redundancy_r2(0.5, 0.5, 0.7).unwrap(), redundancy_r2(0.5, 0.5, 0.7).unwrap());
    }

    #[test]
    fn z_values() {
        assert!((z_crit(0.95) - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn rewrite_means_follow_the_ladder() {
        let w = generate_world(&SyntheticConfig {
            n_high: 300,
            n_low: 300,
            ..Default::default()
        })
        .unwrap();
        let rows = rewrite_means(&w.panel, &w.oracle, ScorerChoice::default(), 0.95).unwrap();
        for g in GroupLabel::BOTH {
            let sat: Vec<f64> = rows
                .iter()
                .filter(|r| r.group == g && r.kind.sat_level().is_some())
                .map(|r| r.mean)
                .collect();
            assert_eq!(sat.len(), 6);
            assert!(sat.windows(2).all(|p| p[0] < p[1]), "{g}: {sat:?}");
        }
        // additive world: group gap roughly constant across SAT kinds
        let gaps: Vec<(f64, f64)> = (1..=6u8)
            .map(|k| {
                let get = |g| rows.iter().find(|r| r.group == g && r.kind == RewriteKind::Sat(k)).unwrap();
                let (h, l) = (get(GroupLabel::High), get(GroupLabel::Low));
                (h.mean - l.mean, (h.se * h.se + l.se * l.se).sqrt())
            })
            .collect();
        let hi = gaps.iter().map(|g| g.0).fold(f64::MIN, f64::max);
        let lo = gaps.iter().map(|g| g.0).fold(f64::MAX, f64::min);
        assert!(hi - lo < 2.0 * gaps[0].1, "spread {}", hi - lo);
    }

    #[test]
    fn perfect_linear_correlation() {
        let mut est = ComponentEstimates {
            scorer_group: GroupLabel::High,
            alpha: BTreeMap::new(),
            gamma: BTreeMap::new(),
            style_residual: BTreeMap::new(),
            rewrite_avg: BTreeMap::new(),
            deviation: BTreeMap::new(),
        };
        let w = generate_world(&SyntheticConfig {
            n_high: 10,
            n_low: 10,
            ..Default::default()
        })
        .unwrap();
        for (i, e) in w.panel.essays().iter().enumerate() {
            est.alpha.insert(e.essay_id.clone(), i as f64 * 0.7);
            est.style_residual.insert(e.essay_id.clone(), i as f64 * 0.35);
        }
        assert!((component_correlation(&est, &w.panel, GroupLabel::High).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_components_near_zero() {
        let w = generate_world(&SyntheticConfig {
            n_high: 500,
            n_low: 10,
            content_style_corr: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut est = ComponentEstimates {
            scorer_group: GroupLabel::High,
            alpha: w.truth.theta.clone(),
            gamma: BTreeMap::new(),
            style_residual: w.truth.rho0.clone(),
            rewrite_avg: BTreeMap::new(),
            deviation: BTreeMap::new(),
        };
        est.alpha.retain(|id, _| id.starts_with('H'));
        let r = component_correlation(&est, &w.panel, GroupLabel::High).unwrap();
        assert!(r.abs() < 3.0 / (500f64).sqrt(), "{r}");
    }
}
