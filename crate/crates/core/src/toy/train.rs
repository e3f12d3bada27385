use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ToyConfig, ToyInstance};
use crate::bank::PriorBank;
use crate::cap::{staging_coefficient, CapConfig};
use crate::conditioning::{condition_size, prior_strength, ConditioningConfig};
use crate::error::{PrioError, Result};
use crate::metrics::{routing_diagnostics, MatchedPair, MetricsReport, OcclusionBin, SizeMetrics};
use crate::rng;
use crate::routing::{project_keys, route_with_keys, Projection, Query, RoutingParams};
use crate::size_space::{from_log, LogSize};
use crate::sizepath::{backward_partial, forward_with_keys, HeadParams, PartialGrads, PathConfig, SizePathInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Inject,
    InjectCap,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Inject, Mode::InjectCap];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Inject => "inject",
            Mode::InjectCap => "inject_cap",
        }
    }

    /// Conditioning and CAP settings with the mode's switches applied.
    pub fn configure(self, cond: &ConditioningConfig, cap: &CapConfig) -> Result<(ConditioningConfig, CapConfig)> {
        let mut cond = cond.clone();
        let mut cap = cap.clone();
        match self {
            Mode::Baseline => {
                cond.lambda0 = 0.0;
                cap.lambda_cap = 0.0;
            }
            Mode::Inject => cap.lambda_cap = 0.0,
            Mode::InjectCap => {
                if !(cap.lambda_cap > 0.0) {
                    return Err(PrioError::validation("cap.lambda_cap", "inject_cap needs lambda_cap > 0"));
                }
            }
        }
        if self != Mode::Baseline && !(cond.lambda0 > 0.0) {
            return Err(PrioError::validation("conditioning.lambda0", format!("{self} needs lambda0 > 0")));
        }
        Ok((cond, cap))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PrioError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PrioError::validation("mode", format!("{s:?} is not one of baseline, inject, inject_cap")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub mode: Mode,
    pub head: HeadParams,
    /// Absent in baseline mode, where no routing runs.
    pub routing: Option<RoutingParams>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

fn schedule_for(toy: &ToyConfig, cap: &CapConfig) -> CapConfig {
    if toy.schedule_from_epochs {
        let mut scaled = CapConfig::for_total_epochs(toy.epochs as f64);
        scaled.lambda_cap = cap.lambda_cap;
        scaled.w_cap = cap.w_cap.clone();
        scaled
    } else {
        cap.clone()
    }
}

fn head_step(head: &mut HeadParams, g_w: &nalgebra::DMatrix<f64>, g_b: &[f64; 3], lr: f64) {
    head.weight -= g_w * lr;
    for j in 0..3 {
        head.bias[j] -= lr * g_b[j];
    }
}

fn diverged(e: PrioError, epoch: usize) -> PrioError {
    match e {
        PrioError::NonFiniteLoss(_) | PrioError::Overflow { .. } => PrioError::Divergence(epoch),
        other => other,
    }
}

/// Minibatch gradient descent on the log-space regression loss, plus the
/// prior pathway in the injecting modes. The visiting order of every epoch
/// is drawn from `seed`.
pub fn train_head(
    train: &[ToyInstance],
    bank: &PriorBank,
    mode: Mode,
    toy: &ToyConfig,
    cond: &ConditioningConfig,
    cap: &CapConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    toy.validate()?;
    if train.is_empty() {
        return Err(PrioError::validation("training set", "is empty"));
    }
    let (cond, cap) = mode.configure(cond, cap)?;
    let cap = schedule_for(toy, &cap);
    let mut head = HeadParams::init(toy.query_dim, rng::derive_seed(seed, &[10]));
    let mut routing = (mode != Mode::Baseline).then(|| {
        RoutingParams::init(toy.query_dim, bank.feature_dim(), toy.routing_width, rng::derive_seed(seed, &[11]))
    });
    let inputs: Vec<SizePathInput> = train
        .iter()
        .map(|t| SizePathInput {
            query: Query {
                q: t.query.clone(),
                p: t.p.clone(),
            },
            target: t.gt_size,
            gt_class: t.class_id,
        })
        .collect();
    if let (Some(r), Some(first)) = (&routing, inputs.first()) {
        // Full dimension and gate checks once; the loop uses the unchecked path.
        crate::sizepath::forward_sizepath(first, r, bank, &head, &PathConfig::resolve(&cond, &cap, bank, 0.0)?)?;
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(toy.epochs);
    let mut shuffle = rng::stream(seed, &[12]);
    for epoch in 0..toy.epochs {
        order.shuffle(&mut shuffle);
        let e = epoch as f64;
        let mut epoch_loss = 0.0;
        for batch in order.chunks(toy.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            match routing.as_mut() {
                None => {
                    let mut g_w = nalgebra::DMatrix::zeros(3, toy.query_dim);
                    let mut g_b = [0.0; 3];
                    for &i in batch {
                        let q = &inputs[i].query.q;
                        let r = head.residual(q);
                        let t = inputs[i].target.as_array();
                        for j in 0..3 {
                            let d = r[j] - t[j].ln();
                            epoch_loss += d * d;
                            let g = 2.0 * d * scale;
                            g_b[j] += g;
                            for (k, qk) in q.iter().enumerate() {
                                g_w[(j, k)] += g * qk;
                            }
                        }
                    }
                    head_step(&mut head, &g_w, &g_b, toy.lr_head);
                }
                Some(rp) => {
                    let path = PathConfig::resolve(&cond, &cap, bank, e)?;
                    let kappa = staging_coefficient(e, &cap.staging);
                    let keys: Arc<[Projection]> = project_keys(rp, bank)?.into();
                    let mut acc = PartialGrads::zeros(toy.query_dim, toy.routing_width, bank.len());
                    for &i in batch {
                        let st = forward_with_keys(&inputs[i], rp, keys.clone(), bank, &head, &path, None)
                            .map_err(|e| diverged(e, epoch))?;
                        epoch_loss += st.loss;
                        acc.accumulate(&backward_partial(&st, kappa), scale);
                    }
                    let g = acc.finish(&keys, bank, bank.feature_dim());
                    head_step(&mut head, &g.head_weight, &g.head_bias, toy.lr_head);
                    rp.w_q -= &g.w_q * toy.lr_routing;
                    rp.w_k -= &g.w_k * toy.lr_routing;
                }
            }
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() {
            return Err(PrioError::Divergence(epoch));
        }
        history.push(mean);
    }
    Ok(TrainOutcome {
        mode,
        head,
        routing,
        loss_history: history,
    })
}

/// Validation results of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub report: MetricsReport,
    /// Metrics per mask level, in `mask_levels` order.
    pub per_mask: Vec<(f64, SizeMetrics)>,
    pub pairs: Vec<MatchedPair>,
    /// `(class id, routing weights)` per validation instance; empty for the baseline.
    pub routing_rows: Vec<(usize, Vec<f64>)>,
}

fn occlusion_for(level: usize) -> OcclusionBin {
    OcclusionBin::ALL[level.min(2)]
}

/// Scores a trained model on validation instances.
pub fn evaluate_run(
    val: &[ToyInstance],
    outcome: &TrainOutcome,
    bank: &PriorBank,
    toy: &ToyConfig,
    cond: &ConditioningConfig,
    tau: f64,
) -> Result<RunEval> {
    let (cond, _) = outcome.mode.configure(cond, &CapConfig::default())?;
    let eps = cond.epsilon();
    let betas = cond.betas(bank.classes());
    let keys = match &outcome.routing {
        Some(r) => Some(project_keys(r, bank)?),
        None => None,
    };
    let mut pairs = Vec::with_capacity(val.len());
    let mut rows = Vec::new();
    for v in val {
        let r = outcome.head.residual(&v.query);
        let (pred, sigma) = match (&outcome.routing, &keys) {
            (Some(rp), Some(keys)) => {
                let q = Query {
                    q: v.query.clone(),
                    p: v.p.clone(),
                };
                let routed = route_with_keys(&q, rp, keys, bank)?;
                let s = prior_strength(&v.p, routed.sigma_hat, &betas, cond.lambda0, cond.sigma_s);
                rows.push((v.class_id, routed.a.clone()));
                (condition_size(r, routed.mu_hat, s.lambda, eps)?, Some(routed.sigma_hat))
            }
            _ => (from_log(&LogSize::new(r)?, eps)?, None),
        };
        pairs.push(MatchedPair {
            class: toy.classes[v.class_id].name.clone(),
            pred,
            gt: v.gt_size,
            sigma_hat: sigma,
            occlusion: Some(occlusion_for(v.mask_level)),
        });
    }
    let mut report = MetricsReport::from_pairs(&pairs, tau)?;
    if !rows.is_empty() {
        report.routing = Some(routing_diagnostics(&rows, bank)?);
    }
    let per_mask = toy
        .mask_levels
        .iter()
        .enumerate()
        .filter_map(|(level, &m)| {
            let sub: Vec<MatchedPair> = pairs
                .iter()
                .zip(val)
                .filter(|(_, v)| v.mask_level == level)
                .map(|(p, _)| p.clone())
                .collect();
            (!sub.is_empty()).then(|| SizeMetrics::compute(&sub, tau).map(|s| (m, s)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunEval {
        report,
        per_mask,
        pairs,
        routing_rows: rows,
    })
}
