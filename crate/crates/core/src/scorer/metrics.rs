use serde::{Deserialize, Serialize};

use crate::data::GroupLabel;
use crate::error::{Error, Result};

fn check_pair(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: p.len(),
        });
    }
    if t.len() < 2 {
        return Err(Error::EmptyData("at least two observations are required".into()));
    }
    Ok(())
}

/// Coefficient of determination `1 - SSE/SST`.
pub fn r2(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(predictions, targets)?;
    let m = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|t| (t - m).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub mean_prediction: f64,
    pub mean_target: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Equal-width bins over the prediction range. Empty bins are omitted.
pub fn calibration_bins(predictions: &[f64], targets: &[f64], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    check_pair(predictions, targets)?;
    if n_bins < 2 {
        return Err(Error::Config("n_bins must be at least 2".into()));
    }
    let lo = predictions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = predictions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &p) in predictions.iter().enumerate() {
        let b = if width > 0.0 {
            (((p - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        members[b].push(i);
    }
    let mut out = Vec::new();
    for (b, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let ts: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let mt = ts.iter().sum::<f64>() / n;
        let mp = idx.iter().map(|&i| predictions[i]).sum::<f64>() / n;
        let sd = crate::stats::sample_sd(&ts).unwrap_or(0.0);
        let half = 1.96 * sd / n.sqrt();
        let lower = lo + width * b as f64;
        out.push(CalibrationBin {
            center: lower + width / 2.0,
            lower,
            upper: lower + width,
            n: idx.len(),
            mean_prediction: mp,
            mean_target: mt,
            ci_low: mt - half,
            ci_high: mt + half,
        });
    }
    Ok(out)
}

/// Per-group fit summary written to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerMetrics {
    pub group: GroupLabel,
    pub n: usize,
    pub r2_out_of_fold: f64,
    pub rmse_out_of_fold: f64,
    pub calibration: Vec<CalibrationBin>,
}
