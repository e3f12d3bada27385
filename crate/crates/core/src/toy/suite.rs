use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{bank_inputs, generate_dataset, split_fraction};
use super::train::{evaluate_run, train_head, Mode, RunEval, TrainOutcome};
use super::ToyConfig;
use crate::bank::{build_bank_detailed, BankConfig, PriorBank};
use crate::cap::CapConfig;
use crate::conditioning::ConditioningConfig;
use crate::error::{PrioError, Result};
use crate::kitti_io::FilterThresholds;
use crate::metrics::{RoutingClassStats, SizeMetrics, DEFAULT_TAU};

/// Everything a toy experiment needs besides the seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySetup {
    pub toy: ToyConfig,
    pub bank: BankConfig,
    pub filter: FilterThresholds,
    pub conditioning: ConditioningConfig,
    pub cap: CapConfig,
    pub tau: f64,
}

impl ToySetup {
    /// Bank classes and filter thresholds follow the toy class names.
    pub fn new(toy: ToyConfig) -> Self {
        let names = toy.class_names();
        let bank = BankConfig {
            classes: names.clone(),
            ..BankConfig::default()
        };
        ToySetup {
            filter: FilterThresholds::for_classes(&names),
            bank,
            toy,
            conditioning: ConditioningConfig::default(),
            cap: CapConfig::default(),
            tau: DEFAULT_TAU,
        }
    }

    /// Doubles `lambda0` and `lambda_cap`.
    pub fn strong_prior(mut self) -> Self {
        self.conditioning.lambda0 *= 2.0;
        self.cap.lambda_cap *= 2.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        if self.bank.classes != self.toy.class_names() {
            return Err(PrioError::validation(
                "bank.classes",
                "must list the toy classes in the same order",
            ));
        }
        self.conditioning.validate()?;
        self.cap.validate()
    }
}

/// One seed's data, bank and split, shared by every mode.
pub struct SeedData {
    pub train: Vec<super::ToyInstance>,
    pub val: Vec<super::ToyInstance>,
    pub bank: PriorBank,
}

/// Generates the data for `seed` and builds the bank from the training split only.
pub fn prepare_seed(setup: &ToySetup, seed: u64) -> Result<SeedData> {
    let data = generate_dataset(&setup.toy, seed)?;
    let train = split_fraction(&data.train, setup.toy.train_fraction);
    let (labels, features) = bank_inputs(&train, &setup.toy)?;
    let mut bank_cfg = setup.bank.clone();
    bank_cfg.seed = crate::rng::derive_seed(seed, &[20]);
    let build = build_bank_detailed(&labels, &features, &setup.filter, &bank_cfg)?;
    let val_keys: BTreeSet<u64> = data.val.iter().map(|v| v.key).collect();
    if build.members.iter().flatten().any(|k| val_keys.contains(k)) {
        return Err(PrioError::validation("toy bank", "a validation instance reached bank construction"));
    }
    Ok(SeedData {
        train,
        val: data.val,
        bank: build.bank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub mask: f64,
    pub size_mae: f64,
    pub rel_mae: f64,
    pub outlier_ratio: f64,
}

impl MaskMetrics {
    fn from(mask: f64, m: &SizeMetrics) -> Self {
        MaskMetrics {
            mask,
            size_mae: m.size_mae,
            rel_mae: m.rel_mae,
            outlier_ratio: m.outlier_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRouting {
    pub class: String,
    pub top1_share: f64,
    pub active_used: f64,
    pub active_total: usize,
}

/// Results of one (seed, mode) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: Mode,
    pub size_mae: f64,
    pub rel_mae: f64,
    pub outlier_ratio: f64,
    pub final_loss: f64,
    pub per_mask: Vec<MaskMetrics>,
    pub routing: Option<Vec<ClassRouting>>,
}

impl RunRecord {
    pub fn from_eval(seed: u64, outcome: &TrainOutcome, eval: &RunEval) -> Self {
        let u = &eval.report.unified;
        RunRecord {
            seed,
            mode: outcome.mode,
            size_mae: u.size_mae,
            rel_mae: u.rel_mae,
            outlier_ratio: u.outlier_ratio,
            final_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
            per_mask: eval.per_mask.iter().map(|(m, s)| MaskMetrics::from(*m, s)).collect(),
            routing: eval.report.routing.as_ref().map(|rows| rows.iter().map(class_routing).collect()),
        }
    }
}

fn class_routing(r: &RoutingClassStats) -> ClassRouting {
    ClassRouting {
        class: r.class.clone(),
        top1_share: r.top1_share,
        active_used: r.active_used as f64,
        active_total: r.active_total,
    }
}

/// Median of a non-empty list; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        v[n / 2 - 1] + (v[n / 2] - v[n / 2 - 1]) / 2.0
    }
}

/// Per-metric medians over seeds for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub size_mae: f64,
    pub rel_mae: f64,
    pub outlier_ratio: f64,
    pub per_mask: Vec<MaskMetrics>,
    pub routing: Option<Vec<ClassRouting>>,
}

impl ModeSummary {
    pub fn mask(&self, mask: f64) -> Option<&MaskMetrics> {
        self.per_mask.iter().find(|m| m.mask == mask)
    }

    fn from_runs(mode: Mode, runs: &[&RunRecord]) -> Self {
        let med = |f: &dyn Fn(&RunRecord) -> f64| median(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let masks: Vec<f64> = runs[0].per_mask.iter().map(|m| m.mask).collect();
        let per_mask = masks
            .iter()
            .map(|&mask| {
                let at = |r: &RunRecord| r.per_mask.iter().find(|m| m.mask == mask).cloned();
                let rows: Vec<MaskMetrics> = runs.iter().filter_map(|r| at(r)).collect();
                let m = |f: fn(&MaskMetrics) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
                MaskMetrics {
                    mask,
                    size_mae: m(|x| x.size_mae),
                    rel_mae: m(|x| x.rel_mae),
                    outlier_ratio: m(|x| x.outlier_ratio),
                }
            })
            .collect();
        let routing = runs[0].routing.as_ref().map(|first| {
            first
                .iter()
                .map(|c| {
                    let rows: Vec<&ClassRouting> = runs
                        .iter()
                        .filter_map(|r| r.routing.as_ref()?.iter().find(|x| x.class == c.class))
                        .collect();
                    ClassRouting {
                        class: c.class.clone(),
                        top1_share: median(&rows.iter().map(|x| x.top1_share).collect::<Vec<_>>()),
                        active_used: median(&rows.iter().map(|x| x.active_used).collect::<Vec<_>>()),
                        active_total: c.active_total,
                    }
                })
                .collect()
        });
        ModeSummary {
            mode,
            size_mae: med(&|r| r.size_mae),
            rel_mae: med(&|r| r.rel_mae),
            outlier_ratio: med(&|r| r.outlier_ratio),
            per_mask,
            routing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub modes: Vec<ModeSummary>,
    pub runs: Vec<RunRecord>,
}

impl SuiteSummary {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serialises");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "toy suite: {} seed(s), train fraction {}",
            self.seeds.len(),
            self.train_fraction
        );
        let _ = writeln!(out, "\nmedians over seeds");
        let _ = writeln!(out, "{:<11} {:>7} {:>10} {:>10} {:>10}", "mode", "mask", "size_mae", "rel_mae", "outlier");
        for m in &self.modes {
            let _ = writeln!(
                out,
                "{:<11} {:>7} {:>10.4} {:>10.4} {:>10.4}",
                m.mode.as_str(),
                "all",
                m.size_mae,
                m.rel_mae,
                m.outlier_ratio
            );
            for k in &m.per_mask {
                let _ = writeln!(
                    out,
                    "{:<11} {:>7.2} {:>10.4} {:>10.4} {:>10.4}",
                    "", k.mask, k.size_mae, k.rel_mae, k.outlier_ratio
                );
            }
        }
        let routed: Vec<&ModeSummary> = self.modes.iter().filter(|m| m.routing.is_some()).collect();
        if !routed.is_empty() {
            let _ = writeln!(out, "\nrouting (medians)");
            let _ = writeln!(out, "{:<11} {:<12} {:>10} {:>12}", "mode", "class", "top1", "active");
            for m in routed {
                for c in m.routing.as_deref().unwrap_or_default() {
                    let _ = writeln!(
                        out,
                        "{:<11} {:<12} {:>10.4} {:>7}/{:<4}",
                        m.mode.as_str(),
                        c.class,
                        c.top1_share,
                        c.active_used,
                        c.active_total
                    );
                }
            }
        }
        let _ = writeln!(out, "\nper-seed unified size MAE");
        for r in &self.runs {
            let _ = writeln!(out, "seed {:<6} {:<11} {:>10.4}", r.seed, r.mode.as_str(), r.size_mae);
        }
        out
    }
}

/// Trains and evaluates one mode on prepared data.
pub fn run_mode(setup: &ToySetup, data: &SeedData, mode: Mode, seed: u64) -> Result<(TrainOutcome, RunEval)> {
    let outcome = train_head(&data.train, &data.bank, mode, &setup.toy, &setup.conditioning, &setup.cap, seed)?;
    let eval = evaluate_run(&data.val, &outcome, &data.bank, &setup.toy, &setup.conditioning, setup.tau)?;
    Ok((outcome, eval))
}

/// Every mode over every seed, then per-mode medians. Runs execute in
/// parallel and are collected in (seed, mode) order.
pub fn run_suite(setup: &ToySetup, seeds: &[u64]) -> Result<SuiteSummary> {
    setup.validate()?;
    if seeds.is_empty() {
        return Err(PrioError::validation("seeds", "at least one seed is required"));
    }
    let prepared: Vec<SeedData> = seeds
        .par_iter()
        .map(|&s| prepare_seed(setup, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, Mode)> = (0..seeds.len())
        .flat_map(|i| Mode::ALL.into_iter().map(move |m| (i, m)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(i, mode)| {
            let (outcome, eval) = run_mode(setup, &prepared[i], mode, seeds[i])?;
            Ok(RunRecord::from_eval(seeds[i], &outcome, &eval))
        })
        .collect::<Result<_>>()?;
    let modes = Mode::ALL
        .into_iter()
        .map(|mode| {
            let of_mode: Vec<&RunRecord> = runs.iter().filter(|r| r.mode == mode).collect();
            ModeSummary::from_runs(mode, &of_mode)
        })
        .collect();
    Ok(SuiteSummary {
        seeds: seeds.to_vec(),
        train_fraction: setup.toy.train_fraction,
        modes,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_rules() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        let v = [0.3, 0.1, 0.7, 0.2, 0.9];
        assert!(v.contains(&median(&v)));
    }

    #[test]
    fn strong_prior_doubles() {
        let s = ToySetup::new(ToyConfig::default());
        let t = s.clone().strong_prior();
        assert_eq!(t.conditioning.lambda0, 2.0 * s.conditioning.lambda0);
        assert_eq!(t.cap.lambda_cap, 2.0 * s.cap.lambda_cap);
    }
}
