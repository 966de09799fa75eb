use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{GroupLabel, PanelDataset, RewriteKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindAcceptance {
    pub kind: RewriteKind,
    pub total: usize,
    pub accepted: usize,
    pub rate: f64,
}

/// Outcome of [`validate_panel`]. Never an error: failures are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub acceptance: Vec<KindAcceptance>,
    pub n_high: usize,
    pub n_low: usize,
    pub k: u32,
    pub versions: usize,
    pub no_panel: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn acceptance_rate(&self, kind: RewriteKind) -> Option<f64> {
        self.acceptance.iter().find(|a| a.kind == kind).map(|a| a.rate)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "essays: HIGH {}  LOW {}", self.n_high, self.n_low)?;
        writeln!(f, "versions: {}  K = {}", self.versions, self.k)?;
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "[{mark}] {}: {}", c.name, c.detail)?;
        }
        writeln!(f, "acceptance by kind:")?;
        for a in &self.acceptance {
            writeln!(f, "  {:<9} {:.4}  ({}/{})", a.kind.to_string(), a.rate, a.accepted, a.total)?;
        }
        if !self.no_panel.is_empty() {
            writeln!(f, "no panel: {} essays", self.no_panel.len())?;
        }
        Ok(())
    }
}

/// Check the soft panel invariants and summarize acceptance.
pub fn validate_panel(ds: &PanelDataset) -> ValidationReport {
    let mut checks = Vec::new();

    let missing: Vec<&str> = (0..ds.essays().len())
        .filter(|&i| ds.original_of(i).is_none())
        .map(|i| ds.essays()[i].essay_id.as_str())
        .collect();
    checks.push(CheckResult {
        name: "original present".into(),
        passed: missing.is_empty(),
        detail: if missing.is_empty() {
            "every essay has version_k = 0".into()
        } else {
            format!("essay without original: {}", preview(&missing))
        },
    });

    let rejected_originals: Vec<&str> = ds
        .versions()
        .iter()
        .filter(|v| v.kind.is_original() && !v.accepted)
        .map(|v| v.essay_id.as_str())
        .collect();
    checks.push(CheckResult {
        name: "originals accepted".into(),
        passed: rejected_originals.is_empty(),
        detail: if rejected_originals.is_empty() {
            "no original flagged as rejected".into()
        } else {
            format!("rejected original: {}", preview(&rejected_originals))
        },
    });

    let n_high = ds.group_count(GroupLabel::High);
    let n_low = ds.group_count(GroupLabel::Low);
    checks.push(CheckResult {
        name: "group balance".into(),
        passed: n_high > 0 && n_low > 0,
        detail: format!("HIGH {n_high}, LOW {n_low}"),
    });

    let k = ds.k();
    let max_sat = ds
        .versions()
        .iter()
        .filter_map(|v| v.kind.sat_level().map(|l| (l, v.version_k)))
        .collect::<Vec<_>>();
    let sat_consistent = max_sat.iter().all(|&(l, vk)| u32::from(l) == vk);
    checks.push(CheckResult {
        name: "K consistency".into(),
        passed: sat_consistent,
        detail: if sat_consistent {
            format!("K = {k}")
        } else {
            "SAT level differs from version_k".into()
        },
    });

    let mut counts: BTreeMap<RewriteKind, (usize, usize)> = BTreeMap::new();
    for v in ds.versions() {
        if v.kind.is_original() {
            continue;
        }
        let c = counts.entry(v.kind).or_default();
        c.0 += 1;
        if v.accepted {
            c.1 += 1;
        }
    }
    let acceptance = counts
        .into_iter()
        .map(|(kind, (total, accepted))| KindAcceptance {
            kind,
            total,
            accepted,
            rate: accepted as f64 / total as f64,
        })
        .collect();

    ValidationReport {
        checks,
        acceptance,
        n_high,
        n_low,
        k,
        versions: ds.versions().len(),
        no_panel: ds
            .essays_without_panel()
            .into_iter()
            .map(String::from)
            .collect(),
    }
}

fn preview(ids: &[&str]) -> String {
    let head: Vec<&str> = ids.iter().take(5).copied().collect();
    if ids.len() > 5 {
        format!("{} (+{} more)", head.join(", "), ids.len() - 5)
    } else {
        head.join(", ")
    }
}
