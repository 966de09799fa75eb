use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gbt::{self, FeatureMatrix, TrainConfig};
use super::predictions::{ModelTag, Prediction, PredictionSlice};
use super::{train_scorer, FeatureEncoder, FeatureSubset, ScorerModel};
use crate::data::{GroupLabel, PanelDataset, VersionKey};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream_rng};

/// Essay-level fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl CrossFitPlan {
    /// Shuffle each group's essays and deal them round-robin into folds, so
    /// both groups are spread evenly.
    pub fn new(ds: &PanelDataset, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::Config(format!("n_folds must be at least 2, got {n_folds}")));
        }
        let mut assignment = BTreeMap::new();
        for g in GroupLabel::BOTH {
            let mut ids: Vec<&str> = ds
                .essays()
                .iter()
                .filter(|e| e.group == g)
                .map(|e| e.essay_id.as_str())
                .collect();
            ids.sort_unstable();
            ids.shuffle(&mut stream_rng(seed, &format!("crossfit-{g}")));
            for (i, id) in ids.into_iter().enumerate() {
                assignment.insert(id.to_string(), i % n_folds);
            }
        }
        Ok(CrossFitPlan {
            n_folds,
            seed,
            assignment,
        })
    }

    pub fn from_assignment(n_folds: usize, seed: u64, assignment: BTreeMap<String, usize>) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::Config(format!("n_folds must be at least 2, got {n_folds}")));
        }
        if let Some((id, f)) = assignment.iter().find(|(_, &f)| f >= n_folds) {
            return Err(Error::Config(format!("essay {id} assigned to fold {f} of {n_folds}")));
        }
        Ok(CrossFitPlan {
            n_folds,
            seed,
            assignment,
        })
    }

    pub fn fold_of(&self, essay_id: &str) -> Option<usize> {
        self.assignment.get(essay_id).copied()
    }
}

/// Fold models, the all-data model and the predictions they produced.
#[derive(Debug, Clone)]
pub struct CrossFitOutput {
    pub predictions: PredictionSlice,
    pub fold_models: Vec<ScorerModel>,
    pub full_model: ScorerModel,
}

/// Cross-fitted predictions of `group`'s scorer over every accepted version.
///
/// Versions of `group` essays are scored by the fold model that held out the
/// parent essay; versions of the other group by the model trained on all of
/// `group`'s essays.
pub fn cross_fit_predict(
    ds: &PanelDataset,
    group: GroupLabel,
    cfg: &TrainConfig,
    plan: &CrossFitPlan,
) -> Result<CrossFitOutput> {
    cross_fit_predict_with(ds, group, cfg, plan, FeatureSubset::default())
}

pub fn cross_fit_predict_with(
    ds: &PanelDataset,
    group: GroupLabel,
    cfg: &TrainConfig,
    plan: &CrossFitPlan,
    subset: FeatureSubset,
) -> Result<CrossFitOutput> {
    let encoder = FeatureEncoder::from_dataset(ds, subset);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); plan.n_folds];
    for (i, e) in ds.essays().iter().enumerate() {
        if e.group != group {
            continue;
        }
        let f = plan
            .fold_of(&e.essay_id)
            .ok_or_else(|| Error::Config(format!("essay {} missing from cross-fit plan", e.essay_id)))?;
        fold_members[f].push(i);
    }
    for (fold, m) in fold_members.iter().enumerate() {
        if m.len() < 2 {
            return Err(Error::SmallFold { fold, count: m.len() });
        }
    }
    let all: Vec<usize> = fold_members.iter().flatten().copied().collect();

    let jobs: Vec<ModelTag> = (0..plan.n_folds).map(ModelTag::Fold).chain([ModelTag::Full]).collect();
    let models: Vec<ScorerModel> = jobs
        .par_iter()
        .map(|&tag| {
            let train: Vec<usize> = match tag {
                ModelTag::Fold(f) => all
                    .iter()
                    .copied()
                    .filter(|&i| plan.fold_of(&ds.essays()[i].essay_id) != Some(f))
                    .collect(),
                _ => all.clone(),
            };
            let c = TrainConfig {
                seed: derive_seed(cfg.seed, &format!("{group}-{tag}")),
                ..cfg.clone()
            };
            train_scorer(ds, group, &train, &encoder, &c, tag)
        })
        .collect::<Result<_>>()?;
    let (fold_models, full) = models.split_at(plan.n_folds);
    let full_model = full[0].clone();

    let mut entries = BTreeMap::new();
    let mut row = Vec::with_capacity(encoder.width());
    for (i, e) in ds.essays().iter().enumerate() {
        let (model, tag) = if e.group == group {
            let f = plan.fold_of(&e.essay_id).expect("checked above");
            (&fold_models[f], ModelTag::Fold(f))
        } else {
            (&full_model, ModelTag::Full)
        };
        for v in ds.versions_of(i).filter(|v| v.accepted) {
            row.clear();
            encoder.encode_into(e, &v.features, &mut row);
            let score = model.ensemble.predict_row(&row)?;
            entries.insert(VersionKey::of(v), Prediction { score, model: tag });
        }
    }
    let provenance = fold_models
        .iter()
        .chain([&full_model])
        .map(|m| (m.tag, m.trained_on.clone()))
        .collect();
    Ok(CrossFitOutput {
        predictions: PredictionSlice { entries, provenance },
        fold_models: fold_models.to_vec(),
        full_model,
    })
}

/// Out-of-fold predictions for rows of a plain design matrix.
pub fn out_of_fold(x: &FeatureMatrix, y: &[f64], folds: &[usize], n_folds: usize, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if folds.len() != x.n_rows() || y.len() != x.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            got: folds.len().min(y.len()),
        });
    }
    let per_fold: Vec<(Vec<usize>, Vec<f64>)> = (0..n_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..x.n_rows()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..x.n_rows()).filter(|&i| folds[i] == f).collect();
            if test.is_empty() {
                return Ok((test, Vec::new()));
            }
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let c = TrainConfig {
                seed: derive_seed(cfg.seed, &format!("oof-{f}")),
                ..cfg.clone()
            };
            let m = gbt::train(&x.select_rows(&train), &ty, &c)?;
            let p = m.predict(&x.select_rows(&test))?;
            Ok((test, p))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; x.n_rows()];
    for (idx, p) in per_fold {
        for (i, v) in idx.into_iter().zip(p) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Shuffled K-fold labels for `n` rows.
pub fn shuffled_folds(n: usize, n_folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "kfold"));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % n_folds;
    }
    folds
}
