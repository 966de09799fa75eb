//! Essay-level bootstrap over decomposition components, shares, DiD cells
//! and component correlations.
//!
//! FAST mode keeps the point-estimate predictions and resamples essays
//! downstream. FULL mode rebuilds the dataset from each draw (copies get
//! fresh ids and inherit their source essay's fold) and retrains both
//! scorers before recomputing every statistic.

pub mod resample;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GroupLabel, PanelDataset, PanelFilter, VersionRecord};
use crate::decomposition::{self, fe_fit, DecomposeOptions, RobustnessSpec, ScoredPanel};
use crate::diagnostics::{LevelScores, ScorerChoice};
use crate::error::{Error, Result};
use crate::scorer::{cross_fit_predict_with, CrossFitPlan, FeatureSubset, PredictionPanel, TrainConfig};
use crate::seeds::{derive_seed, stream_rng};
use resample::{draw_members, percentile_ci};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    #[default]
    Fast,
    Full,
}

impl fmt::Display for BootstrapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BootstrapMode::Fast => "FAST",
            BootstrapMode::Full => "FULL",
        })
    }
}

impl FromStr for BootstrapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fast" => Ok(BootstrapMode::Fast),
            "full" => Ok(BootstrapMode::Full),
            _ => Err(Error::Config(format!("unknown bootstrap mode: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub b: usize,
    pub seed: u64,
    pub mode: BootstrapMode,
    pub ci_level: f64,
    /// Resample within each group so group sizes are fixed.
    pub stratified: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 500,
            seed: 0,
            mode: BootstrapMode::Fast,
            ci_level: 0.95,
            stratified: true,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::Config(format!("bootstrap B must be at least 2, got {}", self.b)));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level must lie in (0, 1), got {}", self.ci_level)));
        }
        Ok(())
    }
}

/// Scorer settings FULL mode retrains with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetup {
    /// Indexed by group, HIGH first.
    pub configs: [TrainConfig; 2],
    pub plan: CrossFitPlan,
    #[serde(default)]
    pub subset: FeatureSubset,
}

/// Column labels of a decomposition row, in table order.
pub const DECOMPOSITION_COLUMNS: [&str; 7] = [
    "Total Gap",
    "Content",
    "Style",
    "Other",
    "Share Content",
    "Share Style",
    "Share Other",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case", deny_unknown_fields)]
pub enum StatisticSpec {
    /// All seven decomposition cells, named `{label}/{column}`.
    Decomposition {
        label: String,
        #[serde(default)]
        filter: Option<PanelFilter>,
        #[serde(default)]
        options: DecomposeOptions,
    },
    /// `delta_H - delta_L` for rows above the diagonal, `|delta_H|` below.
    DidCell {
        row: u8,
        col: u8,
        #[serde(default)]
        scorer: ScorerChoice,
    },
    /// Within-group correlation of FE content and style residual.
    ComponentCorrelation {
        group: GroupLabel,
        #[serde(default = "high")]
        scorer: GroupLabel,
    },
}

fn high() -> GroupLabel {
    GroupLabel::High
}

impl StatisticSpec {
    pub fn names(&self) -> Vec<String> {
        match self {
            StatisticSpec::Decomposition { label, .. } => {
                DECOMPOSITION_COLUMNS.iter().map(|c| format!("{label}/{c}")).collect()
            }
            StatisticSpec::DidCell { row, col, .. } => vec![format!("DiD/{row}-{col}")],
            StatisticSpec::ComponentCorrelation { group, scorer } => vec![format!("Correlation/{group}/{scorer}")],
        }
    }

    pub fn from_robustness(spec: &RobustnessSpec) -> Self {
        StatisticSpec::Decomposition {
            label: spec.label.clone(),
            filter: spec.filter.clone(),
            options: spec.options,
        }
    }

    /// One target per subgroup row of [`decomposition::subgroup_table`].
    pub fn subgroups(ds: &PanelDataset, group_by: &[String], options: &DecomposeOptions) -> Result<Vec<Self>> {
        let mut out = vec![StatisticSpec::Decomposition {
            label: "All".into(),
            filter: None,
            options: *options,
        }];
        for cov in group_by {
            for v in decomposition::covariate_levels(ds, cov)? {
                out.push(StatisticSpec::Decomposition {
                    label: decomposition::subgroup_label(cov, &v),
                    filter: Some(PanelFilter::covariate(cov, &v)),
                    options: *options,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub name: String,
    /// `None` when undefined on the full sample.
    pub estimate: Option<f64>,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicates: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub config: BootstrapConfig,
    pub note: String,
    pub stats: Vec<StatSummary>,
}

impl BootstrapSummary {
    pub fn get(&self, name: &str) -> Option<&StatSummary> {
        self.stats.iter().find(|s| s.name == name)
    }

    pub fn se_map(&self) -> BTreeMap<String, f64> {
        self.stats.iter().map(|s| (s.name.clone(), s.se)).collect()
    }
}

/// A statistic bound to a dataset, evaluated on multisets of its positions.
enum Prepared {
    Decomp {
        panel: Option<ScoredPanel>,
        /// Dataset position to panel member.
        map: Vec<Option<usize>>,
        options: DecomposeOptions,
        label: String,
    },
    Did {
        data: LevelScores,
        map: Vec<Option<usize>>,
        pair: Option<usize>,
        upper: bool,
    },
    Corr {
        panel: Option<ScoredPanel>,
        map: Vec<Option<usize>>,
        group: GroupLabel,
        scorer: GroupLabel,
    },
}

fn panel_map(ds: &PanelDataset, panel: &ScoredPanel) -> Vec<Option<usize>> {
    let mut map = vec![None; ds.essays().len()];
    for (m, e) in panel.essays.iter().enumerate() {
        if let Some(p) = ds.essay_position(&e.essay_id) {
            map[p] = Some(m);
        }
    }
    map
}

fn prepare(ds: &PanelDataset, preds: &PredictionPanel, spec: &StatisticSpec) -> Result<Prepared> {
    Ok(match spec {
        StatisticSpec::Decomposition { label, filter, options } => {
            let panel = match filter {
                None => Some(decomposition::scored_panel(ds, preds, options)?),
                Some(f) => match ds.subset(f) {
                    Ok(sub) => Some(decomposition::scored_panel(&sub, preds, options)?),
                    // a replicate may draw no essay of a subgroup
                    Err(Error::EmptySubset) => None,
                    Err(e) => return Err(e),
                },
            };
            let map = panel.as_ref().map_or_else(|| vec![None; ds.essays().len()], |p| panel_map(ds, p));
            Prepared::Decomp {
                panel,
                map,
                options: *options,
                label: label.clone(),
            }
        }
        StatisticSpec::DidCell { row, col, scorer } => {
            let data = LevelScores::build(ds, preds, *scorer)?;
            let mut map = vec![None; ds.essays().len()];
            for (j, &p) in data.positions.iter().enumerate() {
                map[p] = Some(j);
            }
            let (a, b) = (row.min(col), row.max(col));
            let ia = data.levels.iter().position(|l| l == a);
            let ib = data.levels.iter().position(|l| l == b);
            let pair = match (ia, ib) {
                (Some(ia), Some(ib)) if ia != ib => data.pairs().iter().position(|&p| p == (ia, ib)),
                _ => None,
            };
            Prepared::Did {
                data,
                map,
                pair,
                upper: row < col,
            }
        }
        StatisticSpec::ComponentCorrelation { group, scorer } => {
            let panel = decomposition::scored_panel(ds, preds, &DecomposeOptions::default())?;
            let map = panel_map(ds, &panel);
            Prepared::Corr {
                panel: Some(panel),
                map,
                group: *group,
                scorer: *scorer,
            }
        }
    })
}

fn remap(map: &[Option<usize>], positions: &[usize]) -> Vec<usize> {
    positions.iter().filter_map(|&p| map[p]).collect()
}

impl Prepared {
    fn width(&self) -> usize {
        match self {
            Prepared::Decomp { .. } => DECOMPOSITION_COLUMNS.len(),
            _ => 1,
        }
    }

    fn eval(&self, positions: &[usize]) -> Vec<Option<f64>> {
        match self {
            Prepared::Decomp {
                panel,
                map,
                options,
                label,
            } => {
                let Some(panel) = panel else { return vec![None; 7] };
                match decomposition::decompose_scored(panel, &remap(map, positions), options, label) {
                    Ok(r) => {
                        let s = r.shares;
                        vec![
                            Some(r.total_gap),
                            Some(r.content),
                            Some(r.style),
                            Some(r.tilt),
                            s.map(|s| s.content),
                            s.map(|s| s.style),
                            s.map(|s| s.tilt),
                        ]
                    }
                    Err(_) => vec![None; 7],
                }
            }
            Prepared::Did { data, map, pair, upper } => {
                let Some(p) = pair else { return vec![None] };
                let (d, _) = data.deltas(&remap(map, positions))[*p];
                vec![match d {
                    [Some(h), Some(l)] if *upper => Some(h - l),
                    [Some(h), _] if !*upper => Some(h.abs()),
                    _ => None,
                }]
            }
            Prepared::Corr {
                panel,
                map,
                group,
                scorer,
            } => {
                let Some(panel) = panel else { return vec![None] };
                let members = remap(map, positions);
                let Ok(f) = fe_fit(panel, &members, *scorer) else { return vec![None] };
                let (a, r): (Vec<f64>, Vec<f64>) = members
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| panel.essays[m].group == *group)
                    .map(|(j, _)| (f.alpha[j], f.style_residual[j]))
                    .unzip();
                vec![if a.len() >= 3 { crate::stats::pearson(&a, &r) } else { None }]
            }
        }
    }
}

fn evaluate_all(prepared: &[Prepared], positions: &[usize]) -> Vec<Option<f64>> {
    prepared.iter().flat_map(|p| p.eval(positions)).collect()
}

/// Dataset holding one copy of each drawn essay (with all its versions).
/// Copies are renamed `{id}#{j}` and take the source essay's fold.
pub fn resample_dataset(ds: &PanelDataset, positions: &[usize], plan: &CrossFitPlan) -> Result<(PanelDataset, CrossFitPlan)> {
    let mut essays = Vec::with_capacity(positions.len());
    let mut versions: Vec<VersionRecord> = Vec::new();
    let mut assignment = BTreeMap::new();
    for (j, &p) in positions.iter().enumerate() {
        let src = &ds.essays()[p];
        let id = format!("{}#{j}", src.essay_id);
        let fold = plan
            .fold_of(&src.essay_id)
            .ok_or_else(|| Error::Config(format!("essay {} missing from cross-fit plan", src.essay_id)))?;
        assignment.insert(id.clone(), fold);
        let mut e = src.clone();
        e.essay_id = id.clone();
        essays.push(e);
        versions.extend(ds.versions_of(p).map(|v| VersionRecord {
            essay_id: id.clone(),
            ..v.clone()
        }));
    }
    let out = PanelDataset::from_parts_unchecked(essays, versions, ds.manifest().clone(), ds.seed_registry().clone());
    Ok((out, CrossFitPlan::from_assignment(plan.n_folds, plan.seed, assignment)?))
}

/// Cross-fitted predictions for both groups' scorers.
pub fn fit_both(ds: &PanelDataset, setup: &TrainingSetup) -> Result<PredictionPanel> {
    let h = cross_fit_predict_with(ds, GroupLabel::High, &setup.configs[0], &setup.plan, setup.subset)?;
    let l = cross_fit_predict_with(ds, GroupLabel::Low, &setup.configs[1], &setup.plan, setup.subset)?;
    Ok(PredictionPanel::new(h.predictions, l.predictions))
}

fn summarize(name: String, estimate: Option<f64>, mut values: Vec<f64>, b: usize, level: f64) -> StatSummary {
    let dropped = b - values.len();
    values.sort_by(f64::total_cmp);
    let (se, ci_low, ci_high) = match values.len() {
        0 => (f64::NAN, f64::NAN, f64::NAN),
        1 => (0.0, values[0], values[0]),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            let (lo, hi) = percentile_ci(&values, level);
            ((ss / (n - 1) as f64).sqrt(), lo, hi)
        }
    };
    StatSummary {
        name,
        estimate,
        se,
        ci_low,
        ci_high,
        replicates: values.len(),
        dropped,
    }
}

/// Bootstrap every statistic in `targets`. Point estimates use `preds`;
/// FULL mode also needs `training`.
pub fn bootstrap(
    ds: &PanelDataset,
    preds: &PredictionPanel,
    training: Option<&TrainingSetup>,
    targets: &[StatisticSpec],
    cfg: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    cfg.validate()?;
    if cfg.mode == BootstrapMode::Full && training.is_none() {
        return Err(Error::Config("FULL bootstrap requires scorer training settings".into()));
    }
    let names: Vec<String> = targets.iter().flat_map(StatisticSpec::names).collect();
    let prepared: Vec<Prepared> = targets.iter().map(|t| prepare(ds, preds, t)).collect::<Result<_>>()?;
    debug_assert_eq!(prepared.iter().map(Prepared::width).sum::<usize>(), names.len());
    let all: Vec<usize> = (0..ds.essays().len()).collect();
    let point = evaluate_all(&prepared, &all);
    let groups: Vec<GroupLabel> = ds.essays().iter().map(|e| e.group).collect();

    let draw = |r: usize| {
        let mut rng = stream_rng(cfg.seed, &format!("bootstrap-{r}"));
        draw_members(&groups, cfg.stratified, &mut rng)
    };
    let reps: Vec<Vec<Option<f64>>> = match cfg.mode {
        BootstrapMode::Fast => (0..cfg.b).into_par_iter().map(|r| evaluate_all(&prepared, &draw(r))).collect(),
        BootstrapMode::Full => {
            let setup = training.expect("checked above");
            (0..cfg.b)
                .into_par_iter()
                .map(|r| -> Result<Vec<Option<f64>>> {
                    let (ds_b, plan_b) = resample_dataset(ds, &draw(r), &setup.plan)?;
                    let setup_b = TrainingSetup {
                        configs: setup.configs.clone().map(|c| TrainConfig {
                            seed: derive_seed(c.seed, &format!("replicate-{r}")),
                            ..c
                        }),
                        plan: plan_b,
                        subset: setup.subset,
                    };
                    let width = names.len();
                    let Ok(preds_b) = fit_both(&ds_b, &setup_b) else {
                        log::warn!("replicate {r}: scorer training failed");
                        return Ok(vec![None; width]);
                    };
                    let mut out = Vec::with_capacity(width);
                    for t in targets {
                        match prepare(&ds_b, &preds_b, t) {
                            Ok(p) => out.extend(p.eval(&(0..ds_b.essays().len()).collect::<Vec<_>>())),
                            Err(_) => out.extend(std::iter::repeat_n(None, t.names().len())),
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?
        }
    };

    let stats = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = reps.iter().filter_map(|r| r[j]).filter(|v| v.is_finite()).collect();
            summarize(name, point[j], values, cfg.b, cfg.ci_level)
        })
        .collect();
    let note = match cfg.mode {
        BootstrapMode::Fast => "FAST: scorers fixed at the point estimate; essays resampled downstream",
        BootstrapMode::Full => "FULL: both scorers retrained on every replicate",
    };
    let strat = if cfg.stratified { "; stratified by group" } else { "" };
    Ok(BootstrapSummary {
        config: *cfg,
        note: format!("{note}{strat}"),
        stats,
    })
}
