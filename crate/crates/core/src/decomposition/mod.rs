//! Three-way gap decomposition over the rewrite panel.
//!
//! The observed gap between group means of original-essay scores, each group
//! scored by its own scorer, splits into
//!
//! * content: gap in the content index under the reference scorer,
//! * style: gap in the original's deviation from that index,
//! * tilt: mean difference between the two scorers on the other group's
//!   originals.
//!
//! With reference HIGH the tilt is taken over LOW originals; the mirrored
//! decomposition (reference LOW) takes it over HIGH originals.

mod fe;
mod panel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use fe::{fit as fe_fit, FeFit};
pub use panel::{KindSelection, ScoredEssay, ScoredPanel, ScoredVersion};

use crate::data::{GroupLabel, PanelDataset, PanelFilter, RewriteKind};
use crate::error::{Error, Result};
use crate::scorer::PredictionPanel;

/// Tolerance on the additivity identity for the fixed-effects variant.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Shares are reported only when the absolute total exceeds this.
pub const SHARE_MIN_TOTAL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorVariant {
    #[default]
    FixedEffects,
    RewriteAverage,
    NeutralBaseline,
}

impl EstimatorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorVariant::FixedEffects => "FIXED_EFFECTS",
            EstimatorVariant::RewriteAverage => "REWRITE_AVERAGE",
            EstimatorVariant::NeutralBaseline => "NEUTRAL_BASELINE",
        }
    }
}

impl fmt::Display for EstimatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fe" | "fixed_effects" => Ok(EstimatorVariant::FixedEffects),
            "ra" | "rewrite_average" => Ok(EstimatorVariant::RewriteAverage),
            "neutral" | "neutral_baseline" => Ok(EstimatorVariant::NeutralBaseline),
            _ => Err(Error::Config(format!("unknown estimator variant: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeOptions {
    pub variant: EstimatorVariant,
    pub reference: GroupLabel,
    /// Panel levels for the FE and rewrite-average variants. The neutral
    /// baseline always uses neutral rewrites.
    pub kinds: KindSelection,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions {
            variant: EstimatorVariant::FixedEffects,
            reference: GroupLabel::High,
            kinds: KindSelection::Sat,
        }
    }
}

impl DecomposeOptions {
    pub fn with_variant(variant: EstimatorVariant) -> Self {
        DecomposeOptions {
            variant,
            ..Default::default()
        }
    }

    pub fn effective_kinds(&self) -> KindSelection {
        match self.variant {
            EstimatorVariant::NeutralBaseline => KindSelection::Neutral,
            _ => self.kinds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub content: f64,
    pub style: f64,
    pub tilt: f64,
}

impl Shares {
    pub fn of(total: f64, content: f64, style: f64, tilt: f64) -> Option<Shares> {
        (total.abs() > SHARE_MIN_TOTAL).then(|| Shares {
            content: content / total,
            style: style / total,
            tilt: tilt / total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub subgroup: String,
    pub variant: EstimatorVariant,
    pub reference: GroupLabel,
    pub total_gap: f64,
    pub content: f64,
    pub style: f64,
    pub tilt: f64,
    /// `None` when the total is zero.
    pub shares: Option<Shares>,
    /// Style gap computed directly from the per-essay deviations.
    pub style_direct: f64,
    /// `style - style_direct`.
    pub identity_slack: f64,
    /// FE content minus rewrite-average content on the same sample.
    pub content_fe_minus_ra: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub n_excluded: usize,
}

impl DecompositionResult {
    /// `content + style + tilt - total`.
    pub fn residual(&self) -> f64 {
        self.content + self.style + self.tilt - self.total_gap
    }
}

/// Per-essay component estimates under one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEstimates {
    pub scorer_group: GroupLabel,
    pub alpha: BTreeMap<String, f64>,
    /// Rewrite shift per level label.
    pub gamma: BTreeMap<String, f64>,
    pub style_residual: BTreeMap<String, f64>,
    pub rewrite_avg: BTreeMap<String, f64>,
    /// `s_i0 - rewrite_avg_i`.
    pub deviation: BTreeMap<String, f64>,
}

/// Labels for panel levels: the kind name, suffixed with `@k` when a kind has
/// several levels (neutral replicates).
pub fn level_labels(panel: &ScoredPanel) -> Vec<String> {
    panel
        .levels
        .iter()
        .map(|(kind, vk)| {
            let dup = panel.levels.iter().filter(|(k, _)| k == kind).count() > 1;
            if dup && kind.sat_level().is_none() {
                format!("{kind}@{vk}")
            } else {
                kind.to_string()
            }
        })
        .collect()
}

pub fn fit_fixed_effects(panel: &ScoredPanel, scorer: GroupLabel) -> Result<ComponentEstimates> {
    let members = panel.all_members();
    let f = fe::fit(panel, &members, scorer)?;
    let labels = level_labels(panel);
    let g = scorer.index();
    let mut out = ComponentEstimates {
        scorer_group: scorer,
        alpha: BTreeMap::new(),
        gamma: labels
            .iter()
            .zip(&f.gamma)
            .filter_map(|(l, v)| v.map(|v| (l.clone(), v)))
            .collect(),
        style_residual: BTreeMap::new(),
        rewrite_avg: BTreeMap::new(),
        deviation: BTreeMap::new(),
    };
    for (j, &m) in members.iter().enumerate() {
        let e = &panel.essays[m];
        let id = e.essay_id.clone();
        out.alpha.insert(id.clone(), f.alpha[j]);
        out.style_residual.insert(id.clone(), f.style_residual[j]);
        out.rewrite_avg.insert(id.clone(), f.rewrite_avg[j]);
        out.deviation.insert(id, e.original[g] - f.rewrite_avg[j]);
    }
    Ok(out)
}

fn group_gap(panel: &ScoredPanel, members: &[usize], values: &[f64]) -> f64 {
    let mut sum = [0.0; 2];
    let mut n = [0usize; 2];
    for (&m, v) in members.iter().zip(values) {
        let g = panel.essays[m].group.index();
        sum[g] += v;
        n[g] += 1;
    }
    sum[0] / n[0] as f64 - sum[1] / n[1] as f64
}

fn check_groups(panel: &ScoredPanel, members: &[usize]) -> Result<(usize, usize)> {
    let nh = panel.count(members, GroupLabel::High);
    let nl = panel.count(members, GroupLabel::Low);
    for (g, n) in [(GroupLabel::High, nh), (GroupLabel::Low, nl)] {
        if n == 0 {
            return Err(Error::EmptyGroup(g.as_str().into()));
        }
    }
    Ok((nh, nl))
}

/// Decomposition over a multiset of panel members. Members may repeat, which
/// is how bootstrap replicates reuse a fixed panel.
pub fn decompose_scored(
    panel: &ScoredPanel,
    members: &[usize],
    opts: &DecomposeOptions,
    subgroup: &str,
) -> Result<DecompositionResult> {
    let (n_high, n_low) = check_groups(panel, members)?;
    let r = opts.reference;
    let ri = r.index();
    let other = r.other();

    let own: Vec<f64> = members
        .iter()
        .map(|&m| {
            let e = &panel.essays[m];
            e.original[e.group.index()]
        })
        .collect();
    let total = group_gap(panel, members, &own);

    // tilt over the non-reference group's originals
    let (mut tilt_sum, mut tilt_n) = (0.0, 0usize);
    for &m in members {
        let e = &panel.essays[m];
        if e.group == other {
            tilt_sum += e.original[ri] - e.original[other.index()];
            tilt_n += 1;
        }
    }
    let tilt = tilt_sum / tilt_n as f64;
    // reference LOW: mean over HIGH of (s^H - s^L)
    let tilt = if r == GroupLabel::High { tilt } else { -tilt };

    let rewrite_avg: Vec<f64> = members.iter().map(|&m| panel.essays[m].rewrite_average(r)).collect();
    let content_ra = group_gap(panel, members, &rewrite_avg);

    let (content, style_direct, content_fe_minus_ra) = match opts.variant {
        EstimatorVariant::FixedEffects => {
            let f = fe::fit(panel, members, r)?;
            let c = group_gap(panel, members, &f.alpha);
            (c, group_gap(panel, members, &f.style_residual), c - content_ra)
        }
        EstimatorVariant::RewriteAverage | EstimatorVariant::NeutralBaseline => {
            let d: Vec<f64> = members
                .iter()
                .zip(&rewrite_avg)
                .map(|(&m, s)| panel.essays[m].original[ri] - s)
                .collect();
            let c_fe = match opts.variant {
                EstimatorVariant::RewriteAverage => {
                    let f = fe::fit(panel, members, r)?;
                    group_gap(panel, members, &f.alpha)
                }
                _ => content_ra,
            };
            (content_ra, group_gap(panel, members, &d), c_fe - content_ra)
        }
    };
    let style = total - content - tilt;
    let slack = style - style_direct;
    if opts.variant == EstimatorVariant::FixedEffects && slack.abs() > IDENTITY_TOL {
        return Err(Error::IdentityViolation(slack));
    }
    Ok(DecompositionResult {
        subgroup: subgroup.to_string(),
        variant: opts.variant,
        reference: r,
        total_gap: total,
        content,
        style,
        tilt,
        shares: Shares::of(total, content, style, tilt),
        style_direct,
        identity_slack: slack,
        content_fe_minus_ra,
        n_high,
        n_low,
        n_excluded: panel.excluded.len(),
    })
}

pub fn scored_panel(ds: &PanelDataset, preds: &PredictionPanel, opts: &DecomposeOptions) -> Result<ScoredPanel> {
    let kinds = opts.effective_kinds();
    if kinds == KindSelection::Neutral && !ds.has_kind(|k| k == RewriteKind::Neutral) {
        return Err(Error::NeutralAbsent);
    }
    ScoredPanel::build(ds, preds, kinds)
}

pub fn decompose(ds: &PanelDataset, preds: &PredictionPanel, opts: &DecomposeOptions) -> Result<DecompositionResult> {
    let panel = scored_panel(ds, preds, opts)?;
    decompose_scored(&panel, &panel.all_members(), opts, "All")
}

/// Group means under each scorer of originals and neutral rewrites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralDecomposition {
    /// Indexed `[group][scorer]`, HIGH first.
    pub mu_orig: [[f64; 2]; 2],
    pub mu_neutral: [[f64; 2]; 2],
    pub total_gap: f64,
    pub content: f64,
    pub style: f64,
    pub tilt: f64,
    pub shares: Option<Shares>,
    /// Per group, `mu_orig - mu_neutral` under the HIGH scorer.
    pub style_premium: [f64; 2],
    pub n_high: usize,
    pub n_low: usize,
}

impl NeutralDecomposition {
    /// Components from the five means that enter them.
    pub fn from_means(mu_orig: [[f64; 2]; 2], mu_neutral: [[f64; 2]; 2], n_high: usize, n_low: usize) -> Self {
        let (h, l) = (GroupLabel::High.index(), GroupLabel::Low.index());
        let content = mu_neutral[h][h] - mu_neutral[l][h];
        let style = (mu_orig[h][h] - mu_neutral[h][h]) - (mu_orig[l][h] - mu_neutral[l][h]);
        let tilt = mu_orig[l][h] - mu_orig[l][l];
        let total = mu_orig[h][h] - mu_orig[l][l];
        NeutralDecomposition {
            mu_orig,
            mu_neutral,
            total_gap: total,
            content,
            style,
            tilt,
            shares: Shares::of(total, content, style, tilt),
            style_premium: [mu_orig[h][h] - mu_neutral[h][h], mu_orig[l][h] - mu_neutral[l][h]],
            n_high,
            n_low,
        }
    }
}

/// Neutral-baseline decomposition with the HIGH scorer as reference. Only
/// essays holding an accepted neutral rewrite enter; replicates are averaged.
pub fn neutral_decompose(ds: &PanelDataset, preds: &PredictionPanel) -> Result<NeutralDecomposition> {
    let opts = DecomposeOptions::with_variant(EstimatorVariant::NeutralBaseline);
    let panel = scored_panel(ds, preds, &opts)?;
    if panel.essays.is_empty() {
        return Err(Error::NeutralAbsent);
    }
    let members = panel.all_members();
    let (nh, nl) = check_groups(&panel, &members)?;
    let mut mu_orig = [[0.0; 2]; 2];
    let mut mu_neutral = [[0.0; 2]; 2];
    for e in &panel.essays {
        let g = e.group.index();
        let n = if e.group == GroupLabel::High { nh } else { nl } as f64;
        for s in GroupLabel::BOTH {
            mu_orig[g][s.index()] += e.original[s.index()] / n;
            mu_neutral[g][s.index()] += e.rewrite_average(s) / n;
        }
    }
    Ok(NeutralDecomposition::from_means(mu_orig, mu_neutral, nh, nl))
}

/// One row of a robustness or subgroup table. `result` is `Err` with the
/// reason when the row could not be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub result: std::result::Result<DecompositionResult, String>,
}

/// A robustness specification: sample filter plus estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSpec {
    pub label: String,
    pub filter: Option<PanelFilter>,
    pub options: DecomposeOptions,
}

pub fn robustness_specs(base: &DecomposeOptions) -> Vec<RobustnessSpec> {
    let sat = |levels: &[u8]| levels.iter().map(|&k| RewriteKind::Sat(k)).collect::<Vec<_>>();
    let spec = |label: &str, filter: Option<PanelFilter>, options: DecomposeOptions| RobustnessSpec {
        label: label.into(),
        filter,
        options,
    };
    vec![
        spec("SAT (baseline)", None, *base),
        spec("Score 2-5, |Δ|≤1", Some(PanelFilter::adjacent()), *base),
        spec(
            "Rewrites {1,2,5,6} only",
            Some(PanelFilter::Kinds { kinds: sat(&[1, 2, 5, 6]) }),
            *base,
        ),
        spec(
            "Drop k=1 rewrites",
            Some(PanelFilter::ExcludeKinds { kinds: sat(&[1]) }),
            *base,
        ),
        spec(
            "Baseline GPT",
            None,
            DecomposeOptions {
                variant: EstimatorVariant::NeutralBaseline,
                ..*base
            },
        ),
    ]
}

/// Sample for one robustness spec, with an error when the required levels
/// are missing.
pub fn robustness_panel(ds: &PanelDataset, preds: &PredictionPanel, spec: &RobustnessSpec) -> Result<ScoredPanel> {
    let sub;
    let ds = match &spec.filter {
        Some(f) => {
            sub = ds.subset(f)?;
            &sub
        }
        None => ds,
    };
    let panel = scored_panel(ds, preds, &spec.options)?;
    if let Some(PanelFilter::Kinds { kinds }) = &spec.filter {
        let missing: Vec<String> = kinds
            .iter()
            .filter(|k| !panel.levels.iter().any(|(l, _)| l == *k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("rewrite levels absent: {}", missing.join(", "))));
        }
    }
    if panel.levels.is_empty() {
        return Err(Error::Validation("no rewrite levels in sample".into()));
    }
    Ok(panel)
}

pub fn robustness_suite(ds: &PanelDataset, preds: &PredictionPanel, base: &DecomposeOptions) -> Vec<TableRow> {
    use rayon::prelude::*;
    robustness_specs(base)
        .par_iter()
        .map(|spec| {
            let result = robustness_panel(ds, preds, spec)
                .and_then(|p| decompose_scored(&p, &p.all_members(), &spec.options, &spec.label))
                .map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("robustness row {:?} absent: {e}", spec.label);
            }
            TableRow {
                label: spec.label.clone(),
                result,
            }
        })
        .collect()
}

/// Row label for a covariate level.
pub fn subgroup_label(covariate: &str, value: &str) -> String {
    match covariate {
        "prompt_name" | "prompt" => value.to_string(),
        _ => {
            let mut name: Vec<char> = covariate.replace('_', " ").chars().collect();
            if let Some(c) = name.first_mut() {
                *c = c.to_ascii_uppercase();
            }
            format!("{} {value}", name.into_iter().collect::<String>())
        }
    }
}

/// Distinct covariate values, numeric order when all parse.
pub fn covariate_levels(ds: &PanelDataset, covariate: &str) -> Result<Vec<String>> {
    let declared = covariate == "prompt_name" || ds.manifest().covariates.iter().any(|c| c == covariate);
    if !declared {
        return Err(Error::UnknownCovariate(covariate.into()));
    }
    let mut values: Vec<String> = ds
        .essays()
        .iter()
        .filter_map(|e| e.covariate(covariate).map(str::to_string))
        .collect();
    values.sort();
    values.dedup();
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        values = pairs.into_iter().map(|p| p.1).collect();
    }
    Ok(values)
}

/// Members of `panel` whose essay carries `value` for `covariate`.
pub fn subgroup_members(ds: &PanelDataset, panel: &ScoredPanel, covariate: &str, value: &str) -> Vec<usize> {
    panel
        .essays
        .iter()
        .enumerate()
        .filter(|(_, e)| ds.essays()[e.position].covariate(covariate) == Some(value))
        .map(|(m, _)| m)
        .collect()
}

/// An "All" row followed by one row per level of each covariate.
pub fn subgroup_table(
    ds: &PanelDataset,
    preds: &PredictionPanel,
    group_by: &[String],
    opts: &DecomposeOptions,
) -> Result<Vec<TableRow>> {
    use rayon::prelude::*;
    let panel = scored_panel(ds, preds, opts)?;
    let mut jobs: Vec<(String, Vec<usize>)> = vec![("All".into(), panel.all_members())];
    for cov in group_by {
        for v in covariate_levels(ds, cov)? {
            jobs.push((subgroup_label(cov, &v), subgroup_members(ds, &panel, cov, &v)));
        }
    }
    Ok(jobs
        .par_iter()
        .map(|(label, members)| TableRow {
            label: label.clone(),
            result: decompose_scored(&panel, members, opts, label).map_err(|e| e.to_string()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures;
    use crate::data::{VersionKey, VersionRecord};
    use crate::scorer::PredictionSlice;

    /// Panel where each essay's scores are given as (orig, rewrites) per scorer.
    fn scored(rows: &[(GroupLabel, [f64; 2], Vec<[f64; 2]>)]) -> ScoredPanel {
        let k = rows.iter().map(|r| r.2.len()).max().unwrap();
        ScoredPanel {
            essays: rows
                .iter()
                .enumerate()
                .map(|(i, (g, o, rw))| ScoredEssay {
                    essay_id: format!("e{i}"),
                    position: i,
                    group: *g,
                    original: *o,
                    rewrites: rw
                        .iter()
                        .enumerate()
                        .map(|(l, s)| ScoredVersion { level: l, scores: *s })
                        .collect(),
                })
                .collect(),
            levels: (1..=k as u32).map(|j| (RewriteKind::Sat(j as u8), j)).collect(),
            excluded: vec![],
        }
    }

    use GroupLabel::{High as H, Low as L};

    fn hand_panel() -> ScoredPanel {
        // H: orig 4.0, rewrite avg 3.5. L under S^H: orig 3.0, avg 2.9; under S^L orig 2.8.
        scored(&[
            (H, [4.2, 0.0], vec![[3.4, 0.0], [3.8, 0.0]]),
            (H, [3.8, 0.0], vec![[3.2, 0.0], [3.6, 0.0]]),
            (L, [3.1, 2.7], vec![[2.9, 1.0], [3.0, 1.0]]),
            (L, [2.9, 2.9], vec![[2.8, 1.0], [2.9, 1.0]]),
        ])
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn rewrite_average_hand_example() {
        let p = hand_panel();
        let r = decompose_scored(&p, &p.all_members(), &DecomposeOptions::with_variant(EstimatorVariant::RewriteAverage), "All")
            .unwrap();
        assert!(close(r.total_gap, 1.2), "{}", r.total_gap);
        assert!(close(r.content, 0.6));
        assert!(close(r.style, 0.4));
        assert!(close(r.tilt, 0.2));
        assert!(r.identity_slack.abs() < 1e-12);
        let s = r.shares.unwrap();
        assert!((s.content + s.style + s.tilt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_effects_identity_and_bias_direction() {
        let p = hand_panel();
        let r = decompose_scored(&p, &p.all_members(), &DecomposeOptions::default(), "All").unwrap();
        assert!(r.residual().abs() < 1e-12);
        assert!(r.identity_slack.abs() < IDENTITY_TOL);
        // alpha weights the original by 1/3, so FE content = RA content + style/3 on a balanced panel
        assert!((r.content_fe_minus_ra - 0.4 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_give_zero() {
        let row = |g| (g, [3.0, 3.0], vec![[2.5, 2.5], [3.5, 3.5]]);
        let p = scored(&[row(H), row(L), row(H), row(L)]);
        for v in [EstimatorVariant::FixedEffects, EstimatorVariant::RewriteAverage] {
            let r = decompose_scored(&p, &p.all_members(), &DecomposeOptions::with_variant(v), "All").unwrap();
            assert!(r.total_gap.abs() < 1e-12 && r.content.abs() < 1e-12 && r.style.abs() < 1e-12);
            assert!(r.shares.is_none());
        }
    }

    #[test]
    fn degenerate_panel_has_no_style() {
        let p = scored(&[
            (H, [4.0, 3.9], vec![[4.0, 3.9], [4.0, 3.9]]),
            (H, [3.0, 2.8], vec![[3.0, 2.8]]),
            (L, [2.5, 2.5], vec![[2.5, 2.5], [2.5, 2.5]]),
        ]);
        let r = decompose_scored(&p, &p.all_members(), &DecomposeOptions::default(), "All").unwrap();
        assert!(r.style.abs() < 1e-12);
        assert!(close(r.content, 3.5 - 2.5));
    }

    #[test]
    fn mirror_reference_keeps_identity() {
        let p = hand_panel();
        let opts = DecomposeOptions {
            reference: L,
            ..Default::default()
        };
        let r = decompose_scored(&p, &p.all_members(), &opts, "All").unwrap();
        assert!(close(r.total_gap, 1.2));
        assert!(r.residual().abs() < 1e-12);
        // tilt on HIGH originals: scorer L gives 0 there
        assert!(close(r.tilt, 4.0));
    }

    #[test]
    fn missing_side_is_an_empty_group() {
        let p = hand_panel();
        let err = decompose_scored(&p, &[0, 1], &DecomposeOptions::default(), "x").unwrap_err();
        assert_eq!(err.to_string(), "empty group: no LOW essays");
    }

    #[test]
    fn repeated_members_weight_essays() {
        let p = hand_panel();
        let opts = DecomposeOptions::with_variant(EstimatorVariant::RewriteAverage);
        let r = decompose_scored(&p, &[0, 0, 1, 2, 3], &opts, "b").unwrap();
        let h = (2.0 * 4.2 + 3.8) / 3.0;
        assert!(close(r.total_gap, h - 2.8));
        assert_eq!(r.n_high, 3);
    }

    #[test]
    fn neutral_means_example() {
        let h = GroupLabel::High.index();
        let l = GroupLabel::Low.index();
        let mut mo = [[0.0; 2]; 2];
        let mut mn = [[0.0; 2]; 2];
        mo[h][h] = 4.0;
        mn[h][h] = 3.6;
        mo[l][h] = 3.0;
        mn[l][h] = 2.9;
        mo[l][l] = 2.8;
        let n = NeutralDecomposition::from_means(mo, mn, 1, 1);
        assert!(close(n.content, 0.7));
        assert!(close(n.style, 0.3));
        assert!(close(n.tilt, 0.2));
        assert!(close(n.total_gap, 1.2));
        assert!(close(n.style_premium[h], 0.4));
    }

    fn oracle_preds(ds: &PanelDataset, f: impl Fn(&VersionRecord, GroupLabel) -> f64) -> PredictionPanel {
        let slice = |g| {
            PredictionSlice::external(ds.versions().iter().filter(|v| v.accepted).map(|v| (VersionKey::of(v), f(v, g))))
        };
        PredictionPanel::new(slice(H), slice(L))
    }

    #[test]
    fn neutral_absent_error() {
        let ds = fixtures::tiny();
        let preds = oracle_preds(&ds, |v, _| v.features.embedding[0]);
        let err = decompose(&ds, &preds, &DecomposeOptions::with_variant(EstimatorVariant::NeutralBaseline)).unwrap_err();
        assert_eq!(err.to_string(), "neutral rewrites absent");
        assert!(neutral_decompose(&ds, &preds).is_err());
    }

    #[test]
    fn neutral_identical_to_originals() {
        use crate::synthetic::{generate_world, SyntheticConfig};
        let cfg = SyntheticConfig {
            n_high: 30,
            n_low: 30,
            neutral_replicates: 2,
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        // every version of an essay gets its original's oracle score
        let orig = |v: &VersionRecord, g: GroupLabel| {
            w.oracle.get(g, &VersionKey::new(v.essay_id.clone(), 0, RewriteKind::Original)).unwrap()
        };
        let preds = oracle_preds(&w.panel, orig);
        let n = neutral_decompose(&w.panel, &preds).unwrap();
        assert!(n.style.abs() < 1e-12);
        assert!((n.content - (n.mu_orig[0][0] - n.mu_orig[1][0])).abs() < 1e-12);
        let r = decompose(&w.panel, &preds, &DecomposeOptions::with_variant(EstimatorVariant::NeutralBaseline)).unwrap();
        assert!((r.content - n.content).abs() < 1e-12);
        assert!((r.tilt - n.tilt).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance() {
        use crate::synthetic::{generate_world, SyntheticConfig};
        let w = generate_world(&SyntheticConfig {
            n_high: 40,
            n_low: 40,
            ..Default::default()
        })
        .unwrap();
        let base = decompose(&w.panel, &w.oracle, &DecomposeOptions::default()).unwrap();
        let sh = decompose(&w.panel, &w.oracle.shifted(H, 0.7), &DecomposeOptions::default()).unwrap();
        assert!((sh.content - base.content).abs() < 1e-9);
        assert!((sh.style - base.style).abs() < 1e-9);
        assert!((sh.total_gap - base.total_gap - 0.7).abs() < 1e-9);
        assert!((sh.tilt - base.tilt - 0.7).abs() < 1e-9);
        let sl = decompose(&w.panel, &w.oracle.shifted(L, -0.3), &DecomposeOptions::default()).unwrap();
        assert!((sl.content - base.content).abs() < 1e-9);
        assert!((sl.total_gap - base.total_gap - 0.3).abs() < 1e-9);
    }

    #[test]
    fn relabeling_negates_total() {
        use crate::synthetic::{generate_world, SyntheticConfig};
        let w = generate_world(&SyntheticConfig {
            n_high: 25,
            n_low: 35,
            ..Default::default()
        })
        .unwrap();
        let a = decompose(&w.panel, &w.oracle, &DecomposeOptions::default()).unwrap();
        let b = decompose(&w.panel.swap_groups(), &w.oracle.swap_scorers(), &DecomposeOptions::default()).unwrap();
        assert!((a.total_gap + b.total_gap).abs() < 1e-12);
    }

    #[test]
    fn robustness_rows_and_subgroups() {
        use crate::synthetic::{generate_world, SyntheticConfig};
        let w = generate_world(&SyntheticConfig {
            n_high: 60,
            n_low: 60,
            neutral_replicates: 1,
            discretize: true,
            ..Default::default()
        })
        .unwrap();
        let rows = robustness_suite(&w.panel, &w.oracle, &DecomposeOptions::default());
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            ["SAT (baseline)", "Score 2-5, |Δ|≤1", "Rewrites {1,2,5,6} only", "Drop k=1 rewrites", "Baseline GPT"]
        );
        for r in &rows {
            let d = r.result.as_ref().unwrap();
            assert!(d.residual().abs() < 1e-9, "{}", r.label);
        }
        let sub = subgroup_table(&w.panel, &w.oracle, &["grade".into(), "prompt_name".into()], &DecomposeOptions::default())
            .unwrap();
        assert_eq!(sub[0].label, "All");
        assert_eq!(sub[1].label, "Grade 6");
        assert_eq!(sub[4].label, "Grade 11");
        assert_eq!(sub[5].label, "Car-free cities");
        assert_eq!(sub.len(), 9);
    }

    #[test]
    fn rows_absent_without_levels() {
        let ds = fixtures::tiny();
        let preds = oracle_preds(&ds, |v, g| v.features.embedding[0] + g.index() as f64 * 0.1);
        let rows = robustness_suite(&ds, &preds, &DecomposeOptions::default());
        assert!(rows[0].result.is_ok());
        assert!(rows[2].result.is_err());
        assert!(rows[4].result.is_err());
    }

    #[test]
    fn component_estimates_keyed_by_essay() {
        let p = hand_panel();
        let est = fit_fixed_effects(&p, H).unwrap();
        assert_eq!(est.alpha.len(), 4);
        assert_eq!(est.gamma.keys().cloned().collect::<Vec<_>>(), ["SAT_1", "SAT_2"]);
        for (id, a) in &est.alpha {
            assert!((a + est.style_residual[id] - p.essays.iter().find(|e| &e.essay_id == id).unwrap().original[0]).abs() < 1e-12);
        }
    }
}
