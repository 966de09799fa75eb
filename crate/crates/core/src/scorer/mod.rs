//! Group-specific boosted-tree scoring functions, cross-fitted prediction and
//! fit diagnostics.

mod crossfit;
mod features;
pub mod gbt;
mod metrics;
mod predictions;
mod search;

pub use crossfit::{cross_fit_predict, cross_fit_predict_with, out_of_fold, shuffled_folds, CrossFitOutput, CrossFitPlan};
pub use features::{layout_hash, FeatureEncoder, FeatureSubset};
pub use gbt::{Ensemble, FeatureMatrix, Loss, TrainConfig};
pub use metrics::{calibration_bins, r2, rmse, CalibrationBin, ScorerMetrics};
pub use predictions::{ModelTag, Prediction, PredictionPanel, PredictionSlice};
pub use search::{random_search, ParamRange, SearchOutcome, SearchSpace, Trial};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EssayRecord, FeatureVector, GroupLabel, PanelDataset};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained scoring function for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub format_version: u32,
    pub group: GroupLabel,
    pub tag: ModelTag,
    pub config: TrainConfig,
    pub encoder: FeatureEncoder,
    pub manifest_hash: String,
    /// Essay ids whose originals formed the training set, sorted.
    pub trained_on: Vec<String>,
    pub ensemble: Ensemble,
}

impl ScorerModel {
    pub fn predict(&self, essay: &EssayRecord, features: &FeatureVector) -> Result<f64> {
        self.ensemble.predict_row(&self.encoder.encode(essay, features))
    }

    /// Refuse datasets whose feature layout differs from the training layout.
    pub fn check_dataset(&self, ds: &PanelDataset) -> Result<()> {
        if self.encoder.matches(ds.manifest()) {
            Ok(())
        } else {
            Err(Error::ManifestMismatch {
                model: self.manifest_hash.clone(),
                dataset: layout_hash(ds.manifest()),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ScorerModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ScorerModel = serde_json::from_str(&text)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!("model format version {}", m.format_version)));
        }
        if m.manifest_hash != m.encoder.manifest_hash() {
            return Err(Error::Schema("model manifest hash does not match its encoder".into()));
        }
        Ok(m)
    }
}

/// Design rows and human-score targets for the accepted originals of the
/// essays at `positions` that carry a human score.
pub fn original_design(
    ds: &PanelDataset,
    positions: &[usize],
    encoder: &FeatureEncoder,
) -> Result<(FeatureMatrix, Vec<f64>, Vec<String>)> {
    let mut data = Vec::with_capacity(positions.len() * encoder.width());
    let mut y = Vec::with_capacity(positions.len());
    let mut ids = Vec::with_capacity(positions.len());
    for &i in positions {
        let e = &ds.essays()[i];
        let (Some(score), Some(orig)) = (e.human_score, ds.original_of(i)) else {
            continue;
        };
        if !orig.accepted {
            continue;
        }
        encoder.encode_into(e, &orig.features, &mut data);
        y.push(score);
        ids.push(e.essay_id.clone());
    }
    let n = y.len();
    Ok((FeatureMatrix::new(data, n, encoder.width())?, y, ids))
}

/// Train one scorer on the originals of the essays at `positions`.
pub fn train_scorer(
    ds: &PanelDataset,
    group: GroupLabel,
    positions: &[usize],
    encoder: &FeatureEncoder,
    cfg: &TrainConfig,
    tag: ModelTag,
) -> Result<ScorerModel> {
    let (x, y, mut ids) = original_design(ds, positions, encoder)?;
    if y.is_empty() {
        return Err(Error::EmptyData(format!("no scored {group} originals to train on")));
    }
    let ensemble = gbt::train(&x, &y, cfg)?;
    ids.sort_unstable();
    Ok(ScorerModel {
        format_version: MODEL_FORMAT_VERSION,
        group,
        tag,
        config: cfg.clone(),
        encoder: encoder.clone(),
        manifest_hash: encoder.manifest_hash(),
        trained_on: ids,
        ensemble,
    })
}

/// Out-of-fold fit of `group`'s scorer on its own group's originals.
pub fn scorer_metrics(ds: &PanelDataset, preds: &PredictionPanel, group: GroupLabel, n_bins: usize) -> Result<ScorerMetrics> {
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (i, e) in ds.essays().iter().enumerate() {
        if e.group != group {
            continue;
        }
        let (Some(score), Some(orig)) = (e.human_score, ds.original_of(i)) else {
            continue;
        };
        let key = crate::data::VersionKey::of(orig);
        let pred = preds
            .get(group, &key)
            .ok_or_else(|| Error::MissingPrediction(key.to_string()))?;
        p.push(pred);
        t.push(score);
    }
    Ok(ScorerMetrics {
        group,
        n: p.len(),
        r2_out_of_fold: r2(&p, &t)?,
        rmse_out_of_fold: rmse(&p, &t)?,
        calibration: calibration_bins(&p, &t, n_bins)?,
    })
}
