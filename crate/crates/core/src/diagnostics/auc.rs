use serde::{Deserialize, Serialize};

use crate::data::{GroupLabel, PanelDataset};
use crate::error::{Error, Result};
use crate::scorer::{out_of_fold, CrossFitPlan, FeatureEncoder, FeatureMatrix, FeatureSubset, TrainConfig};

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed from average ranks.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            expected: positive.len(),
            got: scores.len(),
        });
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::EmptyData("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub auc: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Out-of-fold ranking of originals by a squared-loss ensemble fit to the
/// HIGH indicator, summarized by AUC.
pub fn separation_auc(
    ds: &PanelDataset,
    subset: FeatureSubset,
    plan: &CrossFitPlan,
    cfg: &TrainConfig,
) -> Result<SeparationResult> {
    let encoder = FeatureEncoder::from_dataset(ds, subset);
    let mut data = Vec::new();
    let mut label = Vec::new();
    let mut folds = Vec::new();
    for (i, e) in ds.essays().iter().enumerate() {
        let Some(orig) = ds.original_of(i).filter(|v| v.accepted) else { continue };
        let f = plan
            .fold_of(&e.essay_id)
            .ok_or_else(|| Error::Config(format!("essay {} missing from cross-fit plan", e.essay_id)))?;
        encoder.encode_into(e, &orig.features, &mut data);
        label.push(e.group == GroupLabel::High);
        folds.push(f);
    }
    let n_high = label.iter().filter(|l| **l).count();
    let n_low = label.len() - n_high;
    if n_high == 0 {
        return Err(Error::EmptyGroup("HIGH".into()));
    }
    if n_low == 0 {
        return Err(Error::EmptyGroup("LOW".into()));
    }
    for f in 0..plan.n_folds {
        let train = || (0..label.len()).filter(|&i| folds[i] != f);
        let pos = train().filter(|&i| label[i]).count();
        if pos == 0 || pos == train().count() {
            return Err(Error::SingleClassFold(f));
        }
    }
    let x = FeatureMatrix::new(data, label.len(), encoder.width())?;
    let y: Vec<f64> = label.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let scores = out_of_fold(&x, &y, &folds, plan.n_folds, cfg)?;
    Ok(SeparationResult {
        auc: auc(&scores, &label)?,
        n_high,
        n_low,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], positive: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn matches_pairwise_count(
            v in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64).collect();
            let pos: Vec<bool> = v.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            prop_assert!((auc(&scores, &pos).unwrap() - brute(&scores, &pos)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariant(
            v in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s).collect();
            let pos: Vec<bool> = v.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&scores, &pos).unwrap(), auc(&t, &pos).unwrap());
        }
    }
}
