//! Randomised full-path gradient verification.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{compute_prototype_stats, BuildMeta, PriorBank, Prototype};
use crate::cap::{CapConfig, CapSchedule};
use crate::conditioning::ConditioningConfig;
use crate::error::{PrioError, Result};
use crate::rng;
use crate::routing::{Query, RoutingParams, ROUTING_WIDTH};
use crate::size_space::{Epsilon, SizeTriple};
use crate::sizepath::{
    backward_sizepath, check_sizepath, forward_sizepath, GradientReport, HeadParams, PathConfig, SizePathInput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub query_dim: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub max_classes: usize,
    pub max_prototypes_per_class: usize,
    pub step: f64,
    pub tolerance: f64,
    pub kappas: Vec<f64>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            query_dim: 4,
            feature_dim: 4,
            width: ROUTING_WIDTH,
            max_classes: 3,
            max_prototypes_per_class: 3,
            step: 1e-5,
            tolerance: 1e-4,
            kappas: vec![0.0, 0.5, 1.0],
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(PrioError::validation(format!("gradcheck.{f}"), r.to_string()));
        if self.trials == 0 {
            return bad("trials", "must be positive");
        }
        if self.query_dim == 0 || self.feature_dim == 0 || self.width == 0 {
            return bad("query_dim", "dimensions must be positive");
        }
        if self.max_classes == 0 || self.max_prototypes_per_class == 0 {
            return bad("max_classes", "bank shape must be non-empty");
        }
        if !(self.step > 0.0) {
            return bad("step", "must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        if self.kappas.is_empty() || self.kappas.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return bad("kappas", "must be a non-empty list in [0, 1]");
        }
        Ok(())
    }
}

/// One randomly drawn problem: bank, parameters, instance and path settings.
#[derive(Debug, Clone)]
pub struct Trial {
    pub bank: PriorBank,
    pub routing: RoutingParams,
    pub head: HeadParams,
    pub input: SizePathInput,
    pub path: PathConfig,
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.gen_range(lo..hi)
}

fn random_bank(r: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<PriorBank> {
    let classes = r.gen_range(1..=cfg.max_classes);
    let eps = Epsilon::default();
    let floor = 1e-4;
    let mut protos: Vec<Prototype> = Vec::new();
    for c in 0..classes {
        let n = r.gen_range(1..=cfg.max_prototypes_per_class);
        for _ in 0..n {
            let centre = [uniform(r, 0.8, 2.0), uniform(r, 0.6, 2.0), uniform(r, 0.8, 5.0)];
            let members = r.gen_range(2..8);
            let mut sizes = Vec::with_capacity(members);
            let mut feats = Vec::with_capacity(members);
            for _ in 0..members {
                sizes.push(SizeTriple::from_array(centre.map(|m| m * (1.0 + uniform(r, -0.15, 0.15))))?);
                feats.push((0..cfg.feature_dim).map(|_| uniform(r, -1.0, 1.0)).collect::<Vec<f64>>());
            }
            let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
            protos.push(compute_prototype_stats(&sizes, &refs, c, eps, floor)?);
        }
    }
    let names = (0..classes).map(|c| format!("C{c}")).collect();
    PriorBank::new(names, protos, cfg.feature_dim, eps, floor, BuildMeta::default())
}

fn random_gate(r: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..classes)
            .map(|_| if r.gen_bool(0.25) { 0.0 } else { uniform(r, 0.05, 1.0) })
            .collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            return p.iter().map(|v| v / total).collect();
        }
    }
}

/// Draws trial `index` of the stream rooted at `cfg.seed`.
pub fn random_trial(cfg: &GradcheckConfig, index: u64, lambda0: f64, lambda_cap: f64) -> Result<Trial> {
    let mut r = rng::stream(cfg.seed, &[index]);
    let bank = random_bank(&mut r, cfg)?;
    let routing = RoutingParams::init(cfg.query_dim, cfg.feature_dim, cfg.width, rng::derive_seed(cfg.seed, &[index, 1]));
    let mut head = HeadParams::init(cfg.query_dim, rng::derive_seed(cfg.seed, &[index, 2]));
    head.bias = [uniform(&mut r, -0.3, 0.3), uniform(&mut r, -0.3, 0.3), uniform(&mut r, -0.3, 0.3)];
    let q: Vec<f64> = (0..cfg.query_dim).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let p = random_gate(&mut r, bank.num_classes());
    let gt_class = r.gen_range(0..bank.num_classes());
    let target = SizeTriple::new(uniform(&mut r, 0.8, 2.0), uniform(&mut r, 0.6, 2.0), uniform(&mut r, 0.8, 5.0))?;

    let mut cond = ConditioningConfig {
        lambda0,
        sigma_s: uniform(&mut r, 0.1, 1.0),
        ..ConditioningConfig::default()
    };
    for (c, name) in bank.classes().iter().enumerate() {
        cond.beta_cls.insert(name.clone(), 0.5 + 0.25 * c as f64);
    }
    let mut cap = CapConfig::for_total_epochs(100.0);
    cap.lambda_cap = lambda_cap;
    cap.schedule = CapSchedule {
        e_hold: 50.0,
        e_end: 100.0,
        rho_end: 0.1,
    };
    let epoch = uniform(&mut r, 0.0, 120.0);
    let path = PathConfig::resolve(&cond, &cap, &bank, epoch)?;
    Ok(Trial {
        bank,
        routing,
        head,
        input: SizePathInput {
            query: Query { q, p },
            target,
            gt_class,
        },
        path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub trials: usize,
    pub kappas: Vec<f64>,
    pub report: GradientReport,
    /// Largest spread of the forward loss across staging coefficients.
    pub max_forward_spread: f64,
    /// Largest `W_q`/`W_k` gradient entry with the injection path off at `kappa = 0`.
    pub max_detached_routing_grad: f64,
}

impl GradcheckSummary {
    pub const FORWARD_SPREAD_LIMIT: f64 = 1e-12;
    pub const DETACHED_GRAD_LIMIT: f64 = 1e-12;

    pub fn passed(&self) -> bool {
        self.report.passed()
            && self.max_forward_spread <= Self::FORWARD_SPREAD_LIMIT
            && self.max_detached_routing_grad <= Self::DETACHED_GRAD_LIMIT
    }
}

fn run_trial(cfg: &GradcheckConfig, index: u64) -> Result<(GradientReport, f64, f64)> {
    let t = random_trial(cfg, index, 0.5, 0.5)?;
    let mut report: Option<GradientReport> = None;
    let mut losses = Vec::new();
    for &kappa in &cfg.kappas {
        let r = check_sizepath(&t.input, &t.routing, &t.bank, &t.head, &t.path, kappa, cfg.step, cfg.tolerance)?;
        match report.as_mut() {
            Some(acc) => acc.merge(&r),
            None => report = Some(r),
        }
        losses.push(forward_sizepath(&t.input, &t.routing, &t.bank, &t.head, &t.path)?.0);
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // Injection off, CAP on, staging closed: routing must receive nothing.
    let mut detached = t.clone();
    detached.path.lambda0 = 0.0;
    let (_, st) = forward_sizepath(&detached.input, &detached.routing, &detached.bank, &detached.head, &detached.path)?;
    let g = backward_sizepath(&st, 0.0, &detached.bank);
    let routing_max = g.w_q.iter().chain(g.w_k.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((report.expect("at least one kappa"), hi - lo, routing_max))
}

/// Runs `cfg.trials` random problems. Trials run in parallel; results are
/// reduced in trial order.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    cfg.validate()?;
    let results: Vec<Result<(GradientReport, f64, f64)>> =
        (0..cfg.trials as u64).into_par_iter().map(|i| run_trial(cfg, i)).collect();
    let mut report: Option<GradientReport> = None;
    let mut spread = 0.0f64;
    let mut detached = 0.0f64;
    for r in results {
        let (rep, s, d) = r?;
        match report.as_mut() {
            Some(acc) => acc.merge(&rep),
            None => report = Some(rep),
        }
        spread = spread.max(s);
        detached = detached.max(d);
    }
    Ok(GradcheckSummary {
        trials: cfg.trials,
        kappas: cfg.kappas.clone(),
        report: report.expect("trials > 0"),
        max_forward_spread: spread,
        max_detached_routing_grad: detached,
    })
}

/// Aligned text rendering.
pub fn render_summary(s: &GradcheckSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "gradcheck: {} trials, kappa in {:?}, h = {:e}, tolerance = {:e}\n",
        s.trials, s.kappas, s.report.step, s.report.tolerance
    ));
    out.push_str(&format!(
        "{:<12} {:>10} {:>8} {:>8} {:>14} {:>6}\n",
        "block", "checked", "skipped", "refined", "max_rel_err", "ok"
    ));
    for b in &s.report.blocks {
        out.push_str(&format!(
            "{:<12} {:>10} {:>8} {:>8} {:>14.3e} {:>6}\n",
            b.name,
            b.checked,
            b.skipped,
            b.refined,
            b.max_rel_error,
            if b.max_rel_error <= s.report.tolerance { "pass" } else { "FAIL" }
        ));
    }
    out.push_str(&format!(
        "forward loss spread across kappa: {:.3e} (limit {:e})\n",
        s.max_forward_spread,
        GradcheckSummary::FORWARD_SPREAD_LIMIT
    ));
    out.push_str(&format!(
        "routing gradient with injection off at kappa 0: {:.3e} (limit {:e})\n",
        s.max_detached_routing_grad,
        GradcheckSummary::DETACHED_GRAD_LIMIT
    ));
    out.push_str(if s.passed() { "result: pass\n" } else { "result: FAIL\n" });
    out
}
