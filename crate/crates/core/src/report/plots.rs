//! Plot-data files: histogram bins and scatter samples of per-essay
//! components.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{GroupLabel, PanelDataset};
use crate::decomposition::ComponentEstimates;
use crate::error::{Error, Result};
use crate::scorer::ScorerMetrics;
use crate::seeds::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub component: String,
    pub group: GroupLabel,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Share of the group's essays in the bin.
    pub density: f64,
}

/// Counts of `values` in `n_bins` equal-width bins over `[lo, hi]`; the
/// last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<Vec<usize>> {
    if n_bins == 0 || !(hi > lo) {
        return Err(Error::Config(format!("bad histogram range [{lo}, {hi}] with {n_bins} bins")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0; n_bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

fn by_group<'a>(
    map: &'a std::collections::BTreeMap<String, f64>,
    ds: &'a PanelDataset,
    g: GroupLabel,
) -> impl Iterator<Item = f64> + 'a {
    map.iter()
        .filter(move |(id, _)| ds.essay(id).is_some_and(|e| e.group == g))
        .map(|(_, v)| *v)
}

/// Histograms of the content index and style residual per group, on a
/// shared range per component so the groups overlay.
pub fn component_histograms(est: &ComponentEstimates, ds: &PanelDataset, n_bins: usize) -> Result<Vec<HistogramBin>> {
    let mut out = Vec::new();
    for (name, map) in [("content", &est.alpha), ("style", &est.style_residual)] {
        let lo = map.values().copied().fold(f64::INFINITY, f64::min);
        let hi = map.values().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Err(Error::EmptyData(format!("no {name} estimates")));
        }
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let width = (hi - lo) / n_bins as f64;
        for g in GroupLabel::BOTH {
            let vals: Vec<f64> = by_group(map, ds, g).collect();
            let counts = histogram(&vals, lo, hi, n_bins)?;
            for (b, count) in counts.into_iter().enumerate() {
                out.push(HistogramBin {
                    component: name.into(),
                    group: g,
                    lower: lo + b as f64 * width,
                    upper: lo + (b + 1) as f64 * width,
                    count,
                    density: if vals.is_empty() { 0.0 } else { count as f64 / vals.len() as f64 },
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub essay_id: String,
    pub group: GroupLabel,
    pub content: f64,
    pub style: f64,
}

/// Content index against style residual for up to `max_points` essays per
/// group, sampled without replacement from a seeded stream.
pub fn scatter_sample(est: &ComponentEstimates, ds: &PanelDataset, max_points: usize, seed: u64) -> Vec<ScatterPoint> {
    let mut out = Vec::new();
    for g in GroupLabel::BOTH {
        let ids: Vec<&String> = est
            .alpha
            .keys()
            .filter(|id| est.style_residual.contains_key(*id) && ds.essay(id).is_some_and(|e| e.group == g))
            .collect();
        let mut pick: Vec<usize> = if ids.len() <= max_points {
            (0..ids.len()).collect()
        } else {
            let mut rng = stream_rng(seed, &format!("scatter-{g}"));
            sample(&mut rng, ids.len(), max_points).into_vec()
        };
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|i| ScatterPoint {
            essay_id: ids[i].clone(),
            group: g,
            content: est.alpha[ids[i]],
            style: est.style_residual[ids[i]],
        }));
    }
    out
}

fn write_rows<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    super::finish(w)
}

/// Columns: component, group, lower, upper, count, density.
pub fn histogram_csv(bins: &[HistogramBin]) -> Result<String> {
    write_rows(bins)
}

/// Columns: essay_id, group, content, style.
pub fn scatter_csv(points: &[ScatterPoint]) -> Result<String> {
    write_rows(points)
}

/// Calibration bins of each scorer on its own group, with a leading group
/// column.
pub fn calibration_csv(metrics: &[ScorerMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "center", "lower", "upper", "n", "mean_prediction", "mean_target", "ci_low", "ci_high"])?;
    for m in metrics {
        for b in &m.calibration {
            w.write_record([
                m.group.to_string(),
                b.center.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.n.to_string(),
                b.mean_prediction.to_string(),
                b.mean_target.to_string(),
                b.ci_low.to_string(),
                b.ci_high.to_string(),
            ])?;
        }
    }
    super::finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        let c = histogram(&[0.0, 0.5, 1.0, 1.5, 2.0, 3.0], 0.0, 2.0, 2).unwrap();
        assert_eq!(c, vec![2, 3]);
        assert!(histogram(&[1.0], 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn plot_csv_headers() {
        let bins = [HistogramBin {
            component: "content".into(),
            group: GroupLabel::High,
            lower: 0.0,
            upper: 0.5,
            count: 3,
            density: 0.25,
        }];
        assert_eq!(
            histogram_csv(&bins).unwrap(),
            "component,group,lower,upper,count,density\ncontent,HIGH,0.0,0.5,3,0.25\n"
        );
        let pts = [ScatterPoint {
            essay_id: "e1".into(),
            group: GroupLabel::Low,
            content: 1.5,
            style: -0.25,
        }];
        assert_eq!(scatter_csv(&pts).unwrap(), "essay_id,group,content,style\ne1,LOW,1.5,-0.25\n");
    }
}
