//! Difference-in-differences check of additive rewrite shifts.
//!
//! For rewrite levels k and k', `delta_G(k, k')` is the within-group mean of
//! `s_k - s_k'` over essays holding both versions. Below the diagonal the grid
//! shows `|delta_H(k, k')|`; above it `delta_H(k, k') - delta_L(k, k')`, which
//! is zero when rewrite shifts do not depend on the group.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ScorerChoice;
use crate::data::{GroupLabel, PanelDataset, RewriteKind, VersionKey};
use crate::error::{Error, Result};
use crate::inference::resample::{draw_members, percentile_ci};
use crate::scorer::PredictionPanel;
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidOptions {
    pub scorer: ScorerChoice,
    pub b: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub stratified: bool,
}

impl Default for DidOptions {
    fn default() -> Self {
        DidOptions {
            scorer: ScorerChoice::default(),
            b: 500,
            seed: 0,
            ci_level: 0.95,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidCell {
    pub row: u8,
    pub col: u8,
    /// `|delta_H|` below the diagonal, `delta_H - delta_L` above.
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Upper-triangle cell whose interval excludes zero.
    pub flagged: bool,
    pub delta_high: f64,
    pub delta_low: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidMatrix {
    pub levels: Vec<u8>,
    pub cells: Vec<DidCell>,
    pub b: usize,
    pub ci_level: f64,
}

impl DidMatrix {
    pub fn cell(&self, row: u8, col: u8) -> Option<&DidCell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    pub fn upper(&self) -> impl Iterator<Item = &DidCell> {
        self.cells.iter().filter(|c| c.row < c.col)
    }

    pub fn lower(&self) -> impl Iterator<Item = &DidCell> {
        self.cells.iter().filter(|c| c.row > c.col)
    }

    /// `delta_G(row, col)` with the exact antisymmetry `delta(k', k) = -delta(k, k')`.
    pub fn delta(&self, g: GroupLabel, row: u8, col: u8) -> Option<f64> {
        let c = self.cell(row, col)?;
        Some(match g {
            GroupLabel::High => c.delta_high,
            GroupLabel::Low => c.delta_low,
        })
    }
}

/// Per-essay scores at each SAT level, `None` where the version is missing.
pub(crate) struct LevelScores {
    pub levels: Vec<u8>,
    /// Dataset position of each row.
    pub positions: Vec<usize>,
    pub groups: Vec<GroupLabel>,
    pub scores: Vec<Vec<Option<f64>>>,
}

impl LevelScores {
    pub fn build(ds: &PanelDataset, preds: &PredictionPanel, scorer: ScorerChoice) -> Result<LevelScores> {
        let mut levels: Vec<u8> = ds
            .versions()
            .iter()
            .filter(|v| v.accepted)
            .filter_map(|v| v.kind.sat_level())
            .collect();
        levels.sort_unstable();
        levels.dedup();
        let mut positions = Vec::new();
        let mut groups = Vec::new();
        let mut scores = Vec::new();
        for (i, e) in ds.essays().iter().enumerate() {
            let s = scorer.resolve(e.group);
            let mut row = vec![None; levels.len()];
            for v in ds.versions_of(i).filter(|v| v.accepted) {
                let Some(k) = v.kind.sat_level() else { continue };
                let key = VersionKey::of(v);
                let p = preds
                    .get(s, &key)
                    .ok_or_else(|| Error::MissingPrediction(format!("{key} under scorer {s}")))?;
                row[levels.binary_search(&k).expect("level collected")] = Some(p);
            }
            if row.iter().any(Option::is_some) {
                positions.push(i);
                groups.push(e.group);
                scores.push(row);
            }
        }
        Ok(LevelScores {
            levels,
            positions,
            groups,
            scores,
        })
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let l = self.levels.len();
        (0..l).flat_map(|a| (a + 1..l).map(move |b| (a, b))).collect()
    }

    /// Per pair `(a < b)`: `[delta_H, delta_L]` and counts over `members`.
    pub fn deltas(&self, members: &[usize]) -> Vec<([Option<f64>; 2], [usize; 2])> {
        let pairs = self.pairs();
        let mut sum = vec![[0.0; 2]; pairs.len()];
        let mut n = vec![[0usize; 2]; pairs.len()];
        for &m in members {
            let g = self.groups[m].index();
            let row = &self.scores[m];
            for (p, &(a, b)) in pairs.iter().enumerate() {
                if let (Some(x), Some(y)) = (row[a], row[b]) {
                    sum[p][g] += x - y;
                    n[p][g] += 1;
                }
            }
        }
        sum.iter()
            .zip(&n)
            .map(|(s, c)| {
                let d = |g: usize| (c[g] > 0).then(|| s[g] / c[g] as f64);
                ([d(0), d(1)], *c)
            })
            .collect()
    }
}

pub fn did_matrix(ds: &PanelDataset, preds: &PredictionPanel, opts: &DidOptions) -> Result<DidMatrix> {
    if opts.b < 2 {
        return Err(Error::Config(format!("bootstrap B must be at least 2, got {}", opts.b)));
    }
    let data = LevelScores::build(ds, preds, opts.scorer)?;
    for g in GroupLabel::BOTH {
        let mut held: Vec<bool> = vec![false; data.levels.len()];
        for (row, _) in data.scores.iter().zip(&data.groups).filter(|(_, &gg)| gg == g) {
            for (h, s) in held.iter_mut().zip(row) {
                *h |= s.is_some();
            }
        }
        if held.iter().filter(|h| **h).count() < 2 {
            return Err(Error::Validation(format!("fewer than two rewrite levels in group {g}")));
        }
    }
    let pairs = data.pairs();
    let all: Vec<usize> = (0..data.groups.len()).collect();
    let point = data.deltas(&all);
    for (&(a, b), (d, _)) in pairs.iter().zip(&point) {
        for g in GroupLabel::BOTH {
            if d[g.index()].is_none() {
                let name = format!("{}/{}", RewriteKind::Sat(data.levels[a]), RewriteKind::Sat(data.levels[b]));
                return Err(Error::NoOverlap(name, g.to_string()));
            }
        }
    }

    let reps: Vec<Vec<([Option<f64>; 2], [usize; 2])>> = (0..opts.b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(opts.seed, &format!("did-{r}"));
            data.deltas(&draw_members(&data.groups, opts.stratified, &mut rng))
        })
        .collect();

    let mut cells = Vec::with_capacity(2 * pairs.len());
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let (d, n) = point[p];
        let (dh, dl) = (d[0].unwrap(), d[1].unwrap());
        let mut upper: Vec<f64> = Vec::with_capacity(opts.b);
        let mut lower: Vec<f64> = Vec::with_capacity(opts.b);
        for rep in &reps {
            if let [Some(h), Some(l)] = rep[p].0 {
                upper.push(h - l);
                lower.push(h.abs());
            }
        }
        upper.sort_by(f64::total_cmp);
        lower.sort_by(f64::total_cmp);
        let make = |row: usize, col: usize, est: f64, reps: &[f64], sign: f64, is_upper: bool| {
            let (lo, hi) = if reps.is_empty() { (f64::NAN, f64::NAN) } else { percentile_ci(reps, opts.ci_level) };
            DidCell {
                row: data.levels[row],
                col: data.levels[col],
                estimate: est,
                ci_low: lo,
                ci_high: hi,
                flagged: is_upper && (lo > 0.0 || hi < 0.0),
                delta_high: sign * dh,
                delta_low: sign * dl,
                n_high: n[0],
                n_low: n[1],
                replicates: reps.len(),
            }
        };
        cells.push(make(a, b, dh - dl, &upper, 1.0, true));
        cells.push(make(b, a, dh.abs(), &lower, -1.0, false));
    }
    cells.sort_by_key(|c| (c.row, c.col));
    Ok(DidMatrix {
        levels: data.levels,
        cells,
        b: opts.b,
        ci_level: opts.ci_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures;
    use crate::data::{EssayRecord, VersionRecord};
    use crate::scorer::PredictionSlice;
    use rand::Rng;

    /// Dataset plus predictions `score(essay, group, k)` for SAT levels 1..=k.
    fn world(n: usize, k: u8, score: impl Fn(usize, GroupLabel, u8, &mut rand_chacha::ChaCha8Rng) -> f64) -> (PanelDataset, PredictionPanel) {
        let mut rng = stream_rng(5, "did-world");
        let mut essays: Vec<EssayRecord> = Vec::new();
        let mut versions: Vec<VersionRecord> = Vec::new();
        let mut entries = Vec::new();
        for i in 0..2 * n {
            let g = if i < n { GroupLabel::High } else { GroupLabel::Low };
            let id = format!("e{i:04}");
            essays.push(fixtures::essay(&id, g, 3.0));
            for kk in 0..=k {
                let kind = if kk == 0 { RewriteKind::Original } else { RewriteKind::Sat(kk) };
                versions.push(fixtures::version(&id, kk as u32, kind, 0.0));
                entries.push((VersionKey::new(id.clone(), kk as u32, kind), score(i, g, kk, &mut rng)));
            }
        }
        let ds = PanelDataset::new(essays, versions, fixtures::manifest(1, 1)).unwrap();
        let slice = PredictionSlice::external(entries);
        (ds, PredictionPanel::new(slice.clone(), slice))
    }

    #[test]
    fn additive_scores_give_zero_did() {
        let (ds, preds) = world(20, 4, |i, _, k, _| (i % 7) as f64 * 0.3 + 0.25 * k as f64);
        let m = did_matrix(&ds, &preds, &DidOptions { b: 50, ..Default::default() }).unwrap();
        assert_eq!(m.cells.len(), 12);
        for c in m.upper() {
            assert!(c.estimate.abs() < 1e-12);
            assert!(!c.flagged);
        }
        let c = m.cell(3, 1).unwrap();
        assert!((c.estimate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn planted_interaction_shifts_k1_cells() {
        let noise = |rng: &mut rand_chacha::ChaCha8Rng| rng.random::<f64>() - 0.5;
        let base = |i: usize, k: u8, rng: &mut rand_chacha::ChaCha8Rng| (i % 5) as f64 + 0.2 * k as f64 + 0.1 * noise(rng);
        let (ds, p0) = world(40, 3, |i, _, k, rng| base(i, k, rng));
        let (_, p1) = world(40, 3, |i, g, k, rng| {
            base(i, k, rng) + if g == GroupLabel::Low && k == 1 { 0.3 } else { 0.0 }
        });
        let opts = DidOptions { b: 100, ..Default::default() };
        let a = did_matrix(&ds, &p0, &opts).unwrap();
        let b = did_matrix(&ds, &p1, &opts).unwrap();
        // same RNG stream in both worlds, so every non-k=1 cell is unchanged
        for (ca, cb) in a.upper().zip(b.upper()) {
            let shift = cb.estimate - ca.estimate;
            let want = if ca.row == 1 { -0.3 } else { 0.0 };
            assert!((shift - want).abs() < 1e-9, "({},{}) {shift}", ca.row, ca.col);
            if ca.row == 1 {
                assert!(cb.flagged);
            }
        }
    }

    #[test]
    fn antisymmetry_and_bits() {
        let (ds, preds) = world(15, 3, |i, g, k, rng| i as f64 * 0.01 + k as f64 * 0.1 + g.index() as f64 + rng.random::<f64>());
        let opts = DidOptions { b: 30, seed: 9, ..Default::default() };
        let m = did_matrix(&ds, &preds, &opts).unwrap();
        for c in m.upper() {
            let mirror = m.cell(c.col, c.row).unwrap();
            assert_eq!(c.delta_high, -mirror.delta_high);
            assert_eq!(c.delta_low, -mirror.delta_low);
        }
        assert_eq!(m, did_matrix(&ds, &preds, &opts).unwrap());
    }

    #[test]
    fn single_level_rejected() {
        let (ds, preds) = world(5, 1, |_, _, k, _| k as f64);
        assert!(matches!(did_matrix(&ds, &preds, &DidOptions::default()), Err(Error::Validation(_))));
    }
}
