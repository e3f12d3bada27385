//! Forward and analytic backward pass of the composed size path
//! (projection -> gating -> mixture -> conditioning -> CAP + log-space
//! regression surrogate), and a central finite-difference verifier.
//!
//! The class probabilities gating the routing are constants: no gradient
//! flows into them. The CAP term's dependence on the routing weights is
//! staged by `kappa`; its forward value never is.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::PriorBank;
use crate::cap::{cap_schedule, whitened_distance, CapConfig};
use crate::conditioning::ConditioningConfig;
use crate::error::{PrioError, Result};
use crate::rng;
use crate::routing::{
    check_gate, class_gated_weights, project_keys, project_normalize, routing_logits, Projection,
    Query, RoutingParams, EPS_VAR,
};
use crate::size_space::{Epsilon, SizeTriple};

pub mod precise;

pub use precise::{precise_quotient, staged_loss, Dd, PreciseContext, Real};

/// Linear residual head `r = W q + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: DMatrix<f64>,
    pub bias: [f64; 3],
}

impl HeadParams {
    pub fn zeros(query_dim: usize) -> Self {
        HeadParams {
            weight: DMatrix::zeros(3, query_dim),
            bias: [0.0; 3],
        }
    }

    pub fn init(query_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[2]);
        let bound = 1.0 / (query_dim as f64).sqrt();
        HeadParams {
            weight: DMatrix::from_fn(3, query_dim, |_, _| r.gen_range(-bound..bound)),
            bias: [0.0; 3],
        }
    }

    pub fn residual(&self, q: &[f64]) -> [f64; 3] {
        let mut r = self.bias;
        for (j, rj) in r.iter_mut().enumerate() {
            for (d, qd) in q.iter().enumerate() {
                *rj += self.weight[(j, d)] * qd;
            }
        }
        r
    }
}

/// Conditioning and CAP settings resolved against a bank's class order and an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PathConfig {
    pub lambda0: f64,
    pub betas: Vec<f64>,
    pub sigma_s: f64,
    pub eps: Epsilon,
    pub lambda_cap: f64,
    pub w_cap: Vec<f64>,
    pub rho: f64,
}

impl PathConfig {
    pub fn resolve(cond: &ConditioningConfig, cap: &CapConfig, bank: &PriorBank, epoch: f64) -> Result<Self> {
        cond.validate()?;
        cap.validate()?;
        Ok(PathConfig {
            lambda0: cond.lambda0,
            betas: cond.betas(bank.classes()),
            sigma_s: cond.sigma_s,
            eps: cond.epsilon(),
            lambda_cap: cap.lambda_cap,
            w_cap: cap.weights(bank.classes()),
            rho: cap_schedule(epoch, &cap.schedule),
        })
    }
}

/// One supervised instance with a known correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct SizePathInput {
    pub query: Query,
    pub target: SizeTriple,
    pub gt_class: usize,
}

/// Every intermediate of one forward evaluation.
#[derive(Debug, Clone)]
pub struct SizePathState {
    pub q: Vec<f64>,
    pub q_unit: DVector<f64>,
    pub q_norm: f64,
    pub q_degenerate: bool,
    pub keys: Arc<[Projection]>,
    pub alpha: f64,
    pub logits: Vec<f64>,
    /// Within-slice softmax values.
    pub softmax: Vec<f64>,
    pub a: Vec<f64>,
    pub gate: Vec<f64>,
    pub gate_total: f64,
    pub slices: Vec<Range<usize>>,
    pub mu_hat: [f64; 3],
    pub m2: [f64; 3],
    pub var: [f64; 3],
    pub sigma_hat: [f64; 3],
    pub c: f64,
    pub g: [f64; 3],
    pub lambda: [f64; 3],
    pub log_mu: [f64; 3],
    pub r: [f64; 3],
    pub x: [f64; 3],
    pub s_hat: [f64; 3],
    pub log_target: [f64; 3],
    pub md2: Vec<f64>,
    /// `Sigma_k^{-1} (x - mu_k)` for each prototype.
    pub whitened_grad: Vec<[f64; 3]>,
    pub cap_weights: Vec<f64>,
    pub cap_scale: f64,
    pub l_det: f64,
    pub l_cap: f64,
    pub loss: f64,
    // Bank moments needed by the backward pass.
    proto_mu: Vec<[f64; 3]>,
    proto_m2: Vec<[f64; 3]>,
    pub lambda0: f64,
    pub sigma_s: f64,
    pub eps: f64,
}

/// Gradients of the path loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SizePathGrads {
    pub head_weight: DMatrix<f64>,
    pub head_bias: [f64; 3],
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
}

impl SizePathGrads {
    pub fn zeros(query_dim: usize, feature_dim: usize, width: usize) -> Self {
        SizePathGrads {
            head_weight: DMatrix::zeros(3, query_dim),
            head_bias: [0.0; 3],
            w_q: DMatrix::zeros(width, query_dim),
            w_k: DMatrix::zeros(width, feature_dim),
        }
    }
}

/// Backward output before the key gradients are pushed through `W_k`, so a
/// batch can accumulate them and pay for that product once.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGrads {
    pub head_weight: DMatrix<f64>,
    pub head_bias: [f64; 3],
    pub w_q: DMatrix<f64>,
    /// Gradient with respect to each normalised key.
    pub key_units: Vec<DVector<f64>>,
}

impl PartialGrads {
    pub fn zeros(query_dim: usize, width: usize, num_keys: usize) -> Self {
        PartialGrads {
            head_weight: DMatrix::zeros(3, query_dim),
            head_bias: [0.0; 3],
            w_q: DMatrix::zeros(width, query_dim),
            key_units: vec![DVector::zeros(width); num_keys],
        }
    }

    pub fn accumulate(&mut self, other: &PartialGrads, scale: f64) {
        self.head_weight += &other.head_weight * scale;
        for j in 0..3 {
            self.head_bias[j] += other.head_bias[j] * scale;
        }
        self.w_q += &other.w_q * scale;
        for (a, b) in self.key_units.iter_mut().zip(&other.key_units) {
            a.axpy(scale, b, 1.0);
        }
    }

    /// Pushes the key gradients back through normalisation and `W_k`.
    pub fn finish(self, keys: &[Projection], bank: &PriorBank, feature_dim: usize) -> SizePathGrads {
        let width = self.w_q.nrows();
        let mut w_k = DMatrix::zeros(width, feature_dim);
        for ((key, g_unit), proto) in keys.iter().zip(&self.key_units).zip(bank.prototypes()) {
            if key.degenerate {
                continue;
            }
            let g_raw = normalize_backward(&key.unit, key.norm, g_unit);
            let v = DVector::from_column_slice(&proto.visual_centroid);
            w_k.ger(1.0, &g_raw, &v, 1.0);
        }
        SizePathGrads {
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            w_q: self.w_q,
            w_k,
        }
    }
}

fn normalize_backward(unit: &DVector<f64>, norm: f64, g: &DVector<f64>) -> DVector<f64> {
    let along = unit.dot(g);
    (g - unit * along) / norm
}

fn check_dims(input: &SizePathInput, routing: &RoutingParams, head: &HeadParams, bank: &PriorBank) -> Result<()> {
    let d = input.query.q.len();
    for (what, expected, got) in [
        ("query embedding", routing.query_dim(), d),
        ("head input", head.weight.ncols(), d),
        ("key projection input", bank.feature_dim(), routing.feature_dim()),
    ] {
        if expected != got {
            return Err(PrioError::Dimension { what, expected, got });
        }
    }
    if input.gt_class >= bank.num_classes() {
        return Err(PrioError::UnknownClass(input.gt_class));
    }
    check_gate(&input.query.p, bank.num_classes())?;
    Ok(())
}

/// Staged CAP weights: `kappa * a + (1 - kappa) * detached`. Only used by the
/// finite-difference verifier, which holds `detached` at its base value.
#[derive(Debug, Clone, Copy)]
pub struct StagedWeights<'a> {
    pub detached: &'a [f64],
    pub kappa: f64,
}

pub fn forward_sizepath(
    input: &SizePathInput,
    routing: &RoutingParams,
    bank: &PriorBank,
    head: &HeadParams,
    cfg: &PathConfig,
) -> Result<(f64, SizePathState)> {
    check_dims(input, routing, head, bank)?;
    let keys: Arc<[Projection]> = project_keys(routing, bank)?.into();
    let state = forward_with_keys(input, routing, keys, bank, head, cfg, None)?;
    Ok((state.loss, state))
}

/// Forward pass against precomputed keys. Dimensions are assumed checked.
pub fn forward_with_keys(
    input: &SizePathInput,
    routing: &RoutingParams,
    keys: Arc<[Projection]>,
    bank: &PriorBank,
    head: &HeadParams,
    cfg: &PathConfig,
    staged: Option<StagedWeights<'_>>,
) -> Result<SizePathState> {
    let q = &input.query.q;
    let p = &input.query.p;
    let qp = project_normalize(q, &routing.w_q)?;
    let logits = routing_logits(&qp.unit, &keys, routing.alpha);
    let a = class_gated_weights(&logits, p, bank.slices())?;
    let gate_total: f64 = p.iter().sum();
    let slices = bank.slices().to_vec();
    let mut softmax = vec![0.0; a.len()];
    for (c, s) in slices.iter().enumerate() {
        if p[c] > 0.0 {
            for k in s.clone() {
                softmax[k] = a[k] * gate_total / p[c];
            }
        }
    }

    let protos = bank.prototypes();
    let proto_mu: Vec<[f64; 3]> = protos.iter().map(|p| p.mu_lin).collect();
    let proto_m2: Vec<[f64; 3]> = protos
        .iter()
        .map(|p| [0, 1, 2].map(|j| p.sigma_lin[j] * p.sigma_lin[j] + p.mu_lin[j] * p.mu_lin[j]))
        .collect();
    let mut mu_hat = [0.0; 3];
    let mut m2 = [0.0; 3];
    for k in 0..a.len() {
        for j in 0..3 {
            mu_hat[j] += a[k] * proto_mu[k][j];
            m2[j] += a[k] * proto_m2[k][j];
        }
    }
    let var = [0, 1, 2].map(|j| m2[j] - mu_hat[j] * mu_hat[j]);
    let sigma_hat = var.map(|v| v.max(EPS_VAR).sqrt());

    let c: f64 = p.iter().zip(&cfg.betas).map(|(p, b)| p * b).sum();
    let g = sigma_hat.map(|s| 1.0 / (1.0 + s / cfg.sigma_s));
    let lambda = g.map(|g| cfg.lambda0 * c * g);
    let eps = cfg.eps.value();
    let log_mu = mu_hat.map(|m| (m + eps).ln());
    let r = head.residual(q);
    let x = [0, 1, 2].map(|j| r[j] + lambda[j] * log_mu[j]);
    let s_hat = x.map(f64::exp);
    let log_target = input.target.as_array().map(f64::ln);
    let l_det: f64 = (0..3).map(|j| (x[j] - log_target[j]).powi(2)).sum();

    let cap_weights: Vec<f64> = match staged {
        Some(s) => a
            .iter()
            .zip(s.detached)
            .map(|(a, d)| s.kappa * a + (1.0 - s.kappa) * d)
            .collect(),
        None => a.clone(),
    };
    let mut md2 = vec![0.0; a.len()];
    let mut whitened_grad = vec![[0.0; 3]; a.len()];
    let mut l_cap = 0.0;
    for (k, proto) in protos.iter().enumerate() {
        md2[k] = whitened_distance(x, proto);
        let d = [0, 1, 2].map(|i| x[i] - proto.mu_log[i]);
        let mut sg = [0.0; 3];
        for (col, eta) in proto.v_log.iter().zip(proto.eta) {
            let y = (col[0] * d[0] + col[1] * d[1] + col[2] * d[2]) / eta;
            for i in 0..3 {
                sg[i] += col[i] * y;
            }
        }
        whitened_grad[k] = sg;
        if cap_weights[k] != 0.0 {
            l_cap += cap_weights[k] * md2[k];
        }
    }
    let cap_scale = cfg.lambda_cap * cfg.rho * cfg.w_cap[input.gt_class];
    let loss = l_det + cap_scale * l_cap;
    if !loss.is_finite() {
        return Err(PrioError::NonFiniteLoss(loss));
    }

    Ok(SizePathState {
        q: q.clone(),
        q_unit: qp.unit,
        q_norm: qp.norm,
        q_degenerate: qp.degenerate,
        keys,
        alpha: routing.alpha,
        logits,
        softmax,
        a,
        gate: p.clone(),
        gate_total,
        slices,
        mu_hat,
        m2,
        var,
        sigma_hat,
        c,
        g,
        lambda,
        log_mu,
        r,
        x,
        s_hat,
        log_target,
        md2,
        whitened_grad,
        cap_weights,
        cap_scale,
        l_det,
        l_cap,
        loss,
        proto_mu,
        proto_m2,
        lambda0: cfg.lambda0,
        sigma_s: cfg.sigma_s,
        eps,
    })
}

/// Analytic gradients, with key gradients left in normalised-key space.
pub fn backward_partial(state: &SizePathState, kappa: f64) -> PartialGrads {
    let n = state.a.len();
    let width = state.q_unit.len();
    let dim = state.q.len();

    let mut gx = [0.0; 3];
    for j in 0..3 {
        gx[j] = 2.0 * (state.x[j] - state.log_target[j]);
    }
    for k in 0..n {
        if state.cap_weights[k] != 0.0 {
            let w = state.cap_scale * state.cap_weights[k] * 2.0;
            for j in 0..3 {
                gx[j] += w * state.whitened_grad[k][j];
            }
        }
    }

    let mut head_weight = DMatrix::zeros(3, dim);
    for j in 0..3 {
        for d in 0..dim {
            head_weight[(j, d)] = gx[j] * state.q[d];
        }
    }
    let head_bias = gx;

    // Injection path: x <- lambda(sigma_hat(var(mu_hat, m2))) and mu_hat.
    let mut g_mu = [0.0; 3];
    let mut g_m2 = [0.0; 3];
    for j in 0..3 {
        let g_lambda = gx[j] * state.log_mu[j];
        g_mu[j] = gx[j] * state.lambda[j] / (state.mu_hat[j] + state.eps);
        let g_sigma = g_lambda * state.lambda0 * state.c * (-state.g[j] * state.g[j] / state.sigma_s);
        if state.var[j] > EPS_VAR {
            let g_var = g_sigma / (2.0 * state.sigma_hat[j]);
            g_m2[j] = g_var;
            g_mu[j] -= 2.0 * state.mu_hat[j] * g_var;
        }
    }
    let mut g_a = vec![0.0; n];
    for k in 0..n {
        let inj: f64 = (0..3)
            .map(|j| g_mu[j] * state.proto_mu[k][j] + g_m2[j] * state.proto_m2[k][j])
            .sum();
        g_a[k] = inj + kappa * state.cap_scale * state.md2[k];
    }

    // a_k = softmax_k * p_c / P within active slices.
    let mut g_logit = vec![0.0; n];
    for (c, s) in state.slices.iter().enumerate() {
        let pc = state.gate[c];
        if pc == 0.0 {
            continue;
        }
        let mean: f64 = s.clone().map(|k| state.softmax[k] * g_a[k]).sum();
        for k in s.clone() {
            g_logit[k] = pc / state.gate_total * state.softmax[k] * (g_a[k] - mean);
        }
    }

    let alpha_logit: Vec<f64> = g_logit.iter().map(|g| g * state.alpha).collect();
    let mut g_qunit = DVector::zeros(width);
    let mut key_units = Vec::with_capacity(n);
    for (k, key) in state.keys.iter().enumerate() {
        g_qunit.axpy(alpha_logit[k], &key.unit, 1.0);
        key_units.push(&state.q_unit * alpha_logit[k]);
    }
    let mut w_q = DMatrix::zeros(width, dim);
    if !state.q_degenerate {
        let g_raw = normalize_backward(&state.q_unit, state.q_norm, &g_qunit);
        let qv = DVector::from_column_slice(&state.q);
        w_q.ger(1.0, &g_raw, &qv, 1.0);
    }
    PartialGrads {
        head_weight,
        head_bias,
        w_q,
        key_units,
    }
}

pub fn backward_sizepath(state: &SizePathState, kappa: f64, bank: &PriorBank) -> SizePathGrads {
    backward_partial(state, kappa).finish(&state.keys, bank, bank.feature_dim())
}

/// Per-block outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    /// Coordinates re-evaluated in extended precision.
    #[serde(default)]
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Analytic and numeric values at `worst_index`.
    pub worst_pair: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub tolerance: f64,
    pub step: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    /// Folds another report into this one, block by block (matched by name).
    pub fn merge(&mut self, other: &GradientReport) {
        for ob in &other.blocks {
            match self.blocks.iter_mut().find(|b| b.name == ob.name) {
                Some(b) => {
                    b.checked += ob.checked;
                    b.skipped += ob.skipped;
                    b.refined += ob.refined;
                    if ob.max_rel_error > b.max_rel_error {
                        b.max_rel_error = ob.max_rel_error;
                        b.worst_index = ob.worst_index;
                        b.worst_pair = ob.worst_pair;
                    }
                }
                None => self.blocks.push(ob.clone()),
            }
        }
    }
}

/// Relative error with a floor on the denominator so that two tiny values agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// Central differences of `f` around `theta`, compared scalar by scalar with
/// `analytic`. `f` receives the perturbed vector and the perturbed index and
/// returns `None` when that coordinate must be skipped.
pub fn finite_diff_check<F>(
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    blocks: &[(&str, Range<usize>)],
    tolerance: f64,
    f: F,
) -> GradientReport
where
    F: FnMut(&[f64], usize) -> Option<f64>,
{
    finite_diff_check_refined(theta, analytic, h, blocks, tolerance, f, |_| None)
}

/// Share of the tolerance above which a quotient is recomputed by `refine`.
pub const REFINE_FRACTION: f64 = 0.1;

/// As [`finite_diff_check`], but a coordinate whose double-precision quotient
/// is off by more than `REFINE_FRACTION * tolerance` is handed to `refine`,
/// which may return a more accurate quotient for the same step.
pub fn finite_diff_check_refined<F, R>(
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    blocks: &[(&str, Range<usize>)],
    tolerance: f64,
    mut f: F,
    mut refine: R,
) -> GradientReport
where
    F: FnMut(&[f64], usize) -> Option<f64>,
    R: FnMut(usize) -> Option<f64>,
{
    assert_eq!(theta.len(), analytic.len(), "parameter and gradient length differ");
    let mut work = theta.to_vec();
    let mut reports = Vec::with_capacity(blocks.len());
    for (name, range) in blocks {
        let mut rep = BlockReport {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            refined: 0,
            max_rel_error: 0.0,
            worst_index: None,
            worst_pair: None,
        };
        for i in range.clone() {
            work[i] = theta[i] + h;
            let plus = f(&work, i);
            work[i] = theta[i] - h;
            let minus = f(&work, i);
            work[i] = theta[i];
            let (Some(lp), Some(lm)) = (plus, minus) else {
                rep.skipped += 1;
                continue;
            };
            let mut numeric = (lp - lm) / (2.0 * h);
            let mut err = relative_error(analytic[i], numeric);
            if err > tolerance * REFINE_FRACTION {
                if let Some(better) = refine(i) {
                    rep.refined += 1;
                    numeric = better;
                    err = relative_error(analytic[i], numeric);
                }
            }
            rep.checked += 1;
            if rep.worst_index.is_none() || err > rep.max_rel_error {
                rep.max_rel_error = err;
                rep.worst_index = Some(i - range.start);
                rep.worst_pair = Some((analytic[i], numeric));
            }
        }
        reports.push(rep);
    }
    GradientReport {
        tolerance,
        step: h,
        blocks: reports,
    }
}

/// Flattened parameter layout used by the verifier: head weight (column-major),
/// head bias, `W_q` (column-major), `W_k` (column-major).
pub fn flatten_params(head: &HeadParams, routing: &RoutingParams) -> (Vec<f64>, Vec<(&'static str, Range<usize>)>) {
    let mut v = Vec::new();
    let mut blocks = Vec::new();
    let mut push = |name: &'static str, data: &[f64], v: &mut Vec<f64>| {
        let start = v.len();
        v.extend_from_slice(data);
        blocks.push((name, start..v.len()));
    };
    push("head_weight", head.weight.as_slice(), &mut v);
    push("head_bias", &head.bias, &mut v);
    push("w_q", routing.w_q.as_slice(), &mut v);
    push("w_k", routing.w_k.as_slice(), &mut v);
    (v, blocks)
}

pub fn flatten_grads(g: &SizePathGrads) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(g.head_weight.as_slice());
    v.extend_from_slice(&g.head_bias);
    v.extend_from_slice(g.w_q.as_slice());
    v.extend_from_slice(g.w_k.as_slice());
    v
}

fn unflatten(theta: &[f64], head: &HeadParams, routing: &RoutingParams) -> (HeadParams, RoutingParams) {
    let mut off = 0;
    let mut take = |n: usize| {
        let s = &theta[off..off + n];
        off += n;
        s
    };
    let hw = head.weight.shape();
    let weight = DMatrix::from_column_slice(hw.0, hw.1, take(hw.0 * hw.1));
    let b = take(3);
    let bias = [b[0], b[1], b[2]];
    let qs = routing.w_q.shape();
    let w_q = DMatrix::from_column_slice(qs.0, qs.1, take(qs.0 * qs.1));
    let ks = routing.w_k.shape();
    let w_k = DMatrix::from_column_slice(ks.0, ks.1, take(ks.0 * ks.1));
    (
        HeadParams { weight, bias },
        RoutingParams {
            w_q,
            w_k,
            alpha: routing.alpha,
        },
    )
}

/// Distance from the variance clamp below which a coordinate is not checked:
/// the loss has a kink there and central differences straddle it.
pub const CLAMP_MARGIN: f64 = 1e-7;

fn near_clamp(state: &SizePathState) -> bool {
    state.var.iter().any(|v| (v - EPS_VAR).abs() < CLAMP_MARGIN)
}

/// Compares the analytic gradient of one instance's loss with central
/// differences of the staged objective, in which the routing weights seen by
/// the CAP term through the detached branch are held at their base values.
pub fn check_sizepath(
    input: &SizePathInput,
    routing: &RoutingParams,
    bank: &PriorBank,
    head: &HeadParams,
    cfg: &PathConfig,
    kappa: f64,
    h: f64,
    tolerance: f64,
) -> Result<GradientReport> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(PrioError::validation("kappa", format!("{kappa} is outside [0, 1]")));
    }
    let (_, base) = forward_sizepath(input, routing, bank, head, cfg)?;
    let analytic = flatten_grads(&backward_sizepath(&base, kappa, bank));
    let (theta, blocks) = flatten_params(head, routing);
    let detached = base.a.clone();
    let staged = StagedWeights {
        detached: &detached,
        kappa,
    };
    let w_k_range = blocks[3].1.clone();
    let base_keys = base.keys.clone();
    let width = routing.w_k.nrows();

    let precise = PreciseContext::<Dd>::new(input, head, routing, bank, cfg, staged);
    let refine = |i: usize| Some(precise.quotient(i, h));
    let report = finite_diff_check_refined(&theta, &analytic, h, &blocks, tolerance, |t, i| {
        let (hp, rp) = unflatten(t, head, routing);
        let keys: Arc<[Projection]> = if w_k_range.contains(&i) {
            let local = i - w_k_range.start;
            let (row, col) = (local % width, local / width);
            let delta = t[i] - theta[i];
            perturb_keys(&base_keys, bank, row, col, delta).into()
        } else {
            base_keys.clone()
        };
        let st = forward_with_keys(input, &rp, keys, bank, &hp, cfg, Some(staged)).ok()?;
        if near_clamp(&st) {
            return None;
        }
        Some(st.loss)
    }, refine);
    if near_clamp(&base) {
        // The base point itself sits on the kink; report it as fully skipped.
        let mut r = report;
        for b in &mut r.blocks {
            b.skipped += b.checked;
            b.checked = 0;
            b.max_rel_error = 0.0;
        }
        return Ok(r);
    }
    Ok(report)
}

/// Key projections after adding `delta` to `W_k[row, col]`, without redoing
/// the full product.
fn perturb_keys(base: &[Projection], bank: &PriorBank, row: usize, col: usize, delta: f64) -> Vec<Projection> {
    base.iter()
        .zip(bank.prototypes())
        .map(|(key, proto)| {
            let mut raw = key.raw.clone();
            raw[row] += delta * proto.visual_centroid[col];
            let norm = raw.norm();
            let degenerate = norm < crate::routing::DEGENERATE_NORM;
            let unit = if degenerate {
                DVector::zeros(raw.len())
            } else {
                &raw / norm
            };
            Projection {
                raw,
                unit,
                norm,
                degenerate,
            }
        })
        .collect()
}
