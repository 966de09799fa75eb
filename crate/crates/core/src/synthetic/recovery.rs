use serde::{Deserialize, Serialize};

use super::SyntheticTruth;
use crate::decomposition::DecompositionResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    pub truth: f64,
    pub estimate: f64,
    pub abs_error: f64,
    /// `abs_error / |truth|`; infinite when the truth is zero and the error is not.
    pub rel_error: f64,
    pub pass: bool,
}

impl ComponentError {
    fn new(truth: f64, estimate: f64, tolerance: f64) -> Self {
        let abs_error = (estimate - truth).abs();
        let rel_error = if truth != 0.0 {
            abs_error / truth.abs()
        } else if abs_error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        ComponentError {
            truth,
            estimate,
            abs_error,
            rel_error,
            pass: abs_error <= tolerance,
        }
    }
}

/// Per-component errors of a decomposition against the generator's truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub tolerance: f64,
    pub total: ComponentError,
    pub content: ComponentError,
    pub style: ComponentError,
    pub tilt: ComponentError,
}

impl RecoveryReport {
    pub fn passed(&self) -> bool {
        self.total.pass && self.content.pass && self.style.pass && self.tilt.pass
    }
}

/// Compare estimated components with the planted ones (absolute tolerance in score points).
pub fn evaluate_recovery(truth: &SyntheticTruth, result: &DecompositionResult, tolerance: f64) -> RecoveryReport {
    RecoveryReport {
        tolerance,
        total: ComponentError::new(truth.observed_gap, result.total_gap, tolerance),
        content: ComponentError::new(truth.content_gap, result.content, tolerance),
        style: ComponentError::new(truth.style_gap, result.style, tolerance),
        tilt: ComponentError::new(truth.tilt, result.tilt, tolerance),
    }
}
