//! Essay fixed effects with shared rewrite-level shifts.
//!
//! Model: `s_ik = alpha_i + gamma_k + e_ik` with the original as the omitted
//! level. Sweeping out the essay means leaves an L×L system in the rewrite
//! shifts,
//!
//! `sum_i (D_i - e_i e_i' / n_i) gamma = sum_i (y_i - e_i ybar_i)`,
//!
//! where `e_i` flags the levels essay `i` holds and `n_i` counts its versions.
//! The system is solved by Cholesky; `alpha_i = ybar_i - sum(gamma_S) / n_i`.

use nalgebra::{DMatrix, DVector};

use super::panel::ScoredPanel;
use crate::data::GroupLabel;
use crate::error::{Error, Result};

/// Fixed-effect fit over a multiset of panel members.
#[derive(Debug, Clone, PartialEq)]
pub struct FeFit {
    /// Per member, in input order.
    pub alpha: Vec<f64>,
    /// Per panel level; `None` when no member holds the level.
    pub gamma: Vec<Option<f64>>,
    /// `s_i0 - alpha_i`.
    pub style_residual: Vec<f64>,
    pub rewrite_avg: Vec<f64>,
}

pub fn fit(panel: &ScoredPanel, members: &[usize], scorer: GroupLabel) -> Result<FeFit> {
    let g = scorer.index();
    let n_levels = panel.levels.len();
    let mut present = vec![false; n_levels];
    for &m in members {
        for v in &panel.essays[m].rewrites {
            present[v.level] = true;
        }
    }
    let mut compact = vec![usize::MAX; n_levels];
    let mut l = 0;
    for (k, &p) in present.iter().enumerate() {
        if p {
            compact[k] = l;
            l += 1;
        }
    }

    let mut a = DMatrix::<f64>::zeros(l, l);
    let mut b = DVector::<f64>::zeros(l);
    let mut idx: Vec<usize> = Vec::new();
    for &m in members {
        let e = &panel.essays[m];
        let n = (e.rewrites.len() + 1) as f64;
        let ybar = (e.original[g] + e.rewrites.iter().map(|v| v.scores[g]).sum::<f64>()) / n;
        idx.clear();
        idx.extend(e.rewrites.iter().map(|v| compact[v.level]));
        for (p, v) in idx.iter().zip(&e.rewrites) {
            a[(*p, *p)] += 1.0;
            b[*p] += v.scores[g] - ybar;
            for q in &idx {
                a[(*p, *q)] -= 1.0 / n;
            }
        }
    }
    let gamma_c = if l == 0 {
        DVector::zeros(0)
    } else {
        match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                return Err(Error::RankDeficient(format!(
                    "{l} rewrite levels over {} essays",
                    members.len()
                )))
            }
        }
    };
    let gamma: Vec<Option<f64>> = (0..n_levels)
        .map(|k| present[k].then(|| gamma_c[compact[k]]))
        .collect();

    let mut alpha = Vec::with_capacity(members.len());
    let mut style_residual = Vec::with_capacity(members.len());
    let mut rewrite_avg = Vec::with_capacity(members.len());
    for &m in members {
        let e = &panel.essays[m];
        let n = (e.rewrites.len() + 1) as f64;
        let rs: f64 = e.rewrites.iter().map(|v| v.scores[g]).sum();
        let ybar = (e.original[g] + rs) / n;
        let gsum: f64 = e.rewrites.iter().map(|v| gamma_c[compact[v.level]]).sum();
        let a_i = ybar - gsum / n;
        alpha.push(a_i);
        style_residual.push(e.original[g] - a_i);
        rewrite_avg.push(rs / e.rewrites.len() as f64);
    }
    Ok(FeFit {
        alpha,
        gamma,
        style_residual,
        rewrite_avg,
    })
}
