//! Cluster-aligned prior regularisation: whitened prototype distances, the
//! assignment-weighted loss on matched positives, and the epoch schedules
//! that scale the loss (`rho`) and stage its routing gradient (`kappa`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::{PriorBank, Prototype};
use crate::error::{PrioError, Result};
use crate::size_space::SizeTriple;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapSchedule {
    pub e_hold: f64,
    pub e_end: f64,
    pub rho_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Staging {
    pub e_detach_end: f64,
    pub e_blend_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapConfig {
    pub lambda_cap: f64,
    /// Per-class weights; classes without an entry use 1.0.
    pub w_cap: BTreeMap<String, f64>,
    pub schedule: CapSchedule,
    pub staging: Staging,
}

impl CapConfig {
    pub const DEFAULT_TOTAL_EPOCHS: f64 = 250.0;

    /// Default breakpoints scaled to a training length.
    pub fn for_total_epochs(total: f64) -> Self {
        CapConfig {
            lambda_cap: 0.05,
            w_cap: BTreeMap::new(),
            schedule: CapSchedule {
                e_hold: 0.5 * total,
                e_end: total,
                rho_end: 0.1,
            },
            staging: Staging {
                e_detach_end: 0.3 * total,
                e_blend_end: 0.6 * total,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(PrioError::validation("cap config", r));
        let s = &self.schedule;
        if !(self.lambda_cap >= 0.0 && self.lambda_cap.is_finite()) {
            return bad(format!("lambda_cap must be >= 0, got {}", self.lambda_cap));
        }
        if !(0.0 <= s.e_hold && s.e_hold <= s.e_end && s.e_end.is_finite()) {
            return bad(format!("need 0 <= e_hold <= e_end, got {} / {}", s.e_hold, s.e_end));
        }
        if !(0.0..=1.0).contains(&s.rho_end) {
            return bad(format!("rho_end must lie in [0, 1], got {}", s.rho_end));
        }
        let t = &self.staging;
        if !(t.e_detach_end <= t.e_blend_end && t.e_blend_end.is_finite()) {
            return bad(format!(
                "need e_detach_end <= e_blend_end, got {} / {}",
                t.e_detach_end, t.e_blend_end
            ));
        }
        if let Some((c, w)) = self.w_cap.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return bad(format!("w_cap.{c} must be >= 0, got {w}"));
        }
        Ok(())
    }

    pub fn weights(&self, classes: &[String]) -> Vec<f64> {
        classes
            .iter()
            .map(|c| self.w_cap.get(c).copied().unwrap_or(1.0))
            .collect()
    }
}

impl Default for CapConfig {
    fn default() -> Self {
        Self::for_total_epochs(Self::DEFAULT_TOTAL_EPOCHS)
    }
}

/// Squared Mahalanobis distance in the prototype's eigenbasis.
pub fn whitened_distance(x: [f64; 3], proto: &Prototype) -> f64 {
    let d = [0, 1, 2].map(|i| x[i] - proto.mu_log[i]);
    proto
        .v_log
        .iter()
        .zip(proto.eta)
        .map(|(col, eta)| {
            let y = col[0] * d[0] + col[1] * d[1] + col[2] * d[2];
            y * y / eta
        })
        .sum()
}

/// A prediction already matched to a ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPrediction {
    /// `ln` of the predicted size.
    pub x: [f64; 3],
    pub a: Vec<f64>,
    pub gt_class: usize,
    pub gt_size: SizeTriple,
}

/// Mean over matched predictions of `w_y * sum_k a_k md2_k`; zero for an empty batch.
pub fn cap_loss(matched: &[MatchedPrediction], bank: &PriorBank, w_cap: &[f64]) -> Result<f64> {
    if matched.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for m in matched {
        let w = *w_cap
            .get(m.gt_class)
            .filter(|_| m.gt_class < bank.num_classes())
            .ok_or(PrioError::UnknownClass(m.gt_class))?;
        if m.a.len() != bank.len() {
            return Err(PrioError::Dimension {
                what: "assignment weights",
                expected: bank.len(),
                got: m.a.len(),
            });
        }
        let inner: f64 = m
            .a
            .iter()
            .zip(bank.prototypes())
            .filter(|(a, _)| **a != 0.0)
            .map(|(a, p)| a * whitened_distance(m.x, p))
            .sum();
        total += w * inner;
    }
    Ok(total / matched.len() as f64)
}

fn ramp(e: f64, start: f64, end: f64) -> f64 {
    if e <= start {
        0.0
    } else if e >= end {
        1.0
    } else {
        (e - start) / (end - start)
    }
}

/// CAP weight: 1 through `e_hold`, linear down to `rho_end` at `e_end`, flat after.
pub fn cap_schedule(e: f64, s: &CapSchedule) -> f64 {
    let t = ramp(e, s.e_hold, s.e_end);
    (1.0 - t) + t * s.rho_end
}

/// Fraction of the CAP-through-routing gradient let through at epoch `e`.
pub fn staging_coefficient(e: f64, s: &Staging) -> f64 {
    ramp(e, s.e_detach_end, s.e_blend_end)
}

pub fn total_loss(l_det: f64, l_cap: f64, e: f64, cfg: &CapConfig) -> f64 {
    l_det + cfg.lambda_cap * cap_schedule(e, &cfg.schedule) * l_cap
}
