use rand::Rng;

use crate::data::GroupLabel;

/// One bootstrap draw of member indices. Stratified draws keep each group's
/// size; unstratified draws resample the pooled list and may empty a group.
pub fn draw_members(groups: &[GroupLabel], stratified: bool, rng: &mut impl Rng) -> Vec<usize> {
    let n = groups.len();
    if !stratified {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let mut out = Vec::with_capacity(n);
    for g in GroupLabel::BOTH {
        let stratum: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
        for _ in 0..stratum.len() {
            out.push(stratum[rng.random_range(0..stratum.len())]);
        }
    }
    out
}

/// Two-sided percentile interval at `level` from sorted replicates.
pub fn percentile_ci(sorted: &[f64], level: f64) -> (f64, f64) {
    let a = (1.0 - level) / 2.0;
    (
        crate::stats::quantile_sorted(sorted, a),
        crate::stats::quantile_sorted(sorted, 1.0 - a),
    )
}
