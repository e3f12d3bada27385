//! Synthetic size-ambiguity benchmark.
//!
//! Each instance carries a noisy log-size observation (the query), a visual
//! feature tied to its size mode, a class-probability vector and a mask level
//! that scales the observation noise. A linear head is trained on the query
//! with or without the prior pathway, and the results are scored with the
//! metrics module, stratified by mask level.

mod data;
mod suite;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};

pub use data::{bank_inputs, generate_dataset, split_fraction, ToyDataset, ToyInstance};
pub use suite::{
    median, prepare_seed, run_mode, run_suite, ClassRouting, MaskMetrics, ModeSummary, RunRecord, SeedData, SuiteSummary, ToySetup,
};
pub use train::{evaluate_run, train_head, Mode, RunEval, TrainOutcome};

/// One log-normal size mode, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMode {
    pub mean: [f64; 3],
    /// Standard deviation of each log-size component.
    pub log_spread: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyClass {
    pub name: String,
    pub weight: f64,
    pub modes: Vec<ToyMode>,
}

fn mode(mean: [f64; 3], weight: f64) -> ToyMode {
    ToyMode {
        mean,
        log_spread: 0.1,
        weight,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub classes: Vec<ToyClass>,
    pub feature_dim: usize,
    pub query_dim: usize,
    /// Observation noise at mask 0, in log-size units; scaled by `1 + 4 * mask`.
    pub evidence_noise: f64,
    /// Standard deviation of the per-dimension noise on visual features.
    pub feature_noise: f64,
    /// Length of the mode-specific part of a visual feature relative to the class part.
    pub mode_feature_scale: f64,
    pub mask_levels: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub train_fraction: f64,
    /// Probability mass spread uniformly over all classes in `p`.
    pub class_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_routing: f64,
    pub routing_width: usize,
    /// Rescale the CAP schedule and staging breakpoints to `epochs`.
    pub schedule_from_epochs: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: vec![
                ToyClass {
                    name: "Car".into(),
                    weight: 0.5,
                    modes: vec![mode([1.53, 1.63, 3.88], 0.65), mode([2.05, 1.90, 5.10], 0.35)],
                },
                ToyClass {
                    name: "Pedestrian".into(),
                    weight: 0.25,
                    modes: vec![mode([1.76, 0.66, 0.84], 0.7), mode([1.25, 0.50, 0.60], 0.3)],
                },
                ToyClass {
                    name: "Cyclist".into(),
                    weight: 0.25,
                    modes: vec![mode([1.74, 0.60, 1.76], 0.6), mode([1.42, 0.54, 1.42], 0.4)],
                },
            ],
            feature_dim: 16,
            query_dim: 8,
            evidence_noise: 0.08,
            feature_noise: 0.15,
            mode_feature_scale: 1.0,
            mask_levels: vec![0.0, 0.4, 0.8],
            train_size: 1200,
            val_size: 600,
            train_fraction: 1.0,
            class_smoothing: 0.0,
            epochs: 80,
            batch_size: 32,
            lr_head: 0.005,
            lr_routing: 0.5,
            routing_width: crate::routing::ROUTING_WIDTH,
            schedule_from_epochs: true,
        }
    }
}

impl ToyConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(PrioError::validation(format!("toy.{field}"), reason));
        if self.classes.is_empty() {
            return bad("classes", "at least one class is required".into());
        }
        for c in &self.classes {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return bad("classes", format!("{}: weight must be > 0", c.name));
            }
            if c.modes.is_empty() {
                return bad("classes", format!("{}: at least one mode is required", c.name));
            }
            for m in &c.modes {
                if !(m.log_spread > 0.0 && m.log_spread.is_finite()) {
                    return bad("classes", format!("{}: log_spread must be > 0", c.name));
                }
                if !(m.weight > 0.0 && m.weight.is_finite()) {
                    return bad("classes", format!("{}: mode weight must be > 0", c.name));
                }
                if m.mean.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad("classes", format!("{}: mode means must be positive", c.name));
                }
            }
        }
        let mut names = self.class_names();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return bad("classes", "class names must be unique".into());
        }
        if self.feature_dim == 0 || self.query_dim < 3 {
            return bad("query_dim", "feature_dim must be > 0 and query_dim >= 3".into());
        }
        if self.mask_levels.is_empty() || self.mask_levels.len() > 3 {
            return bad("mask_levels", "between one and three levels are supported".into());
        }
        if self.mask_levels.windows(2).any(|w| !(w[0] < w[1]))
            || self.mask_levels.iter().any(|m| !(0.0..=1.0).contains(m))
        {
            return bad("mask_levels", "must be strictly ascending within [0, 1]".into());
        }
        for (f, v) in [
            ("evidence_noise", self.evidence_noise),
            ("feature_noise", self.feature_noise),
            ("mode_feature_scale", self.mode_feature_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(f, format!("must be >= 0, got {v}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction", format!("must be in (0, 1], got {}", self.train_fraction));
        }
        if !(0.0..1.0).contains(&self.class_smoothing) {
            return bad("class_smoothing", "must be in [0, 1)".into());
        }
        if self.train_size == 0 || self.val_size == 0 {
            return bad("train_size", "split sizes must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.routing_width == 0 {
            return bad("epochs", "epochs, batch_size and routing_width must be positive".into());
        }
        for (f, v) in [("lr_head", self.lr_head), ("lr_routing", self.lr_routing)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(f, format!("must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}
