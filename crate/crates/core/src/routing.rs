//! Query routing: projected cosine logits, class-gated per-slice softmax and
//! the moment-matched mixture prior.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::PriorBank;
use crate::error::{PrioError, Result};
use crate::rng;

/// Width of the shared routing embedding.
pub const ROUTING_WIDTH: usize = 256;
/// Fixed logit temperature, `1 / sqrt(ROUTING_WIDTH)`.
pub const ALPHA: f64 = 0.0625;
/// Variance clamp applied before the square root of the mixture deviation.
pub const EPS_VAR: f64 = 1e-12;
/// Projections shorter than this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub alpha: f64,
}

impl RoutingParams {
    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(query_dim: usize, feature_dim: usize, width: usize, seed: u64) -> Self {
        let draw = |rows: usize, cols: usize, stream: u64| {
            let mut r = rng::stream(seed, &[stream]);
            let bound = 1.0 / (cols as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-bound..bound))
        };
        RoutingParams {
            w_q: draw(width, query_dim, 0),
            w_k: draw(width, feature_dim, 1),
            alpha: ALPHA,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_k.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PrioError::validation("routing params", format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.w_q.nrows() != self.w_k.nrows() {
            return Err(PrioError::Dimension {
                what: "projection width",
                expected: self.w_q.nrows(),
                got: self.w_k.nrows(),
            });
        }
        if self.w_q.iter().chain(self.w_k.iter()).any(|v| !v.is_finite()) {
            return Err(PrioError::validation("routing params", "non-finite matrix entry"));
        }
        Ok(())
    }
}

/// A projected, normalised vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub raw: DVector<f64>,
    pub unit: DVector<f64>,
    pub norm: f64,
    pub degenerate: bool,
}

/// `Wv / |Wv|`, or the zero vector when `|Wv| < 1e-12`.
pub fn project_normalize(v: &[f64], w: &DMatrix<f64>) -> Result<Projection> {
    if v.len() != w.ncols() {
        return Err(PrioError::Dimension {
            what: "projection input",
            expected: w.ncols(),
            got: v.len(),
        });
    }
    let raw = w * DVector::from_column_slice(v);
    let norm = raw.norm();
    let degenerate = norm < DEGENERATE_NORM;
    let unit = if degenerate {
        DVector::zeros(raw.len())
    } else {
        &raw / norm
    };
    Ok(Projection {
        raw,
        unit,
        norm,
        degenerate,
    })
}

/// Projected prototype centroids, shared by every query routed against a bank.
pub fn project_keys(params: &RoutingParams, bank: &PriorBank) -> Result<Vec<Projection>> {
    bank.prototypes()
        .iter()
        .map(|p| project_normalize(&p.visual_centroid, &params.w_k))
        .collect()
}

pub fn check_gate(p: &[f64], num_classes: usize) -> Result<f64> {
    if p.len() != num_classes {
        return Err(PrioError::Dimension {
            what: "class probabilities",
            expected: num_classes,
            got: p.len(),
        });
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(PrioError::validation("class probabilities", format!("{p:?} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(PrioError::ZeroGate);
    }
    Ok(total)
}

/// Softmax within each slice, scaled by that class's probability, then
/// renormalised over all prototypes. Slices with `p_c = 0` get exact zeros.
pub fn class_gated_weights(logits: &[f64], p: &[f64], slices: &[Range<usize>]) -> Result<Vec<f64>> {
    check_gate(p, slices.len())?;
    let mut a = vec![0.0; logits.len()];
    for (c, s) in slices.iter().enumerate() {
        if p[c] == 0.0 || s.is_empty() {
            continue;
        }
        let max = logits[s.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in s.clone() {
            a[k] = (logits[k] - max).exp();
            z += a[k];
        }
        for k in s.clone() {
            a[k] = a[k] / z * p[c];
        }
    }
    let total: f64 = a.iter().sum();
    if total <= 0.0 {
        return Err(PrioError::ZeroGate);
    }
    a.iter_mut().for_each(|x| *x /= total);
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedPrior {
    pub a: Vec<f64>,
    pub mu_hat: [f64; 3],
    pub sigma_hat: [f64; 3],
    pub m2: [f64; 3],
}

impl RoutedPrior {
    /// `m2 - mu_hat^2` before clamping.
    pub fn raw_variance(&self) -> [f64; 3] {
        [0, 1, 2].map(|j| self.m2[j] - self.mu_hat[j] * self.mu_hat[j])
    }
}

pub fn mixture_prior(a: &[f64], bank: &PriorBank) -> Result<RoutedPrior> {
    if a.len() != bank.len() {
        return Err(PrioError::Dimension {
            what: "assignment weights",
            expected: bank.len(),
            got: a.len(),
        });
    }
    if a.iter().any(|&x| !(x >= 0.0)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PrioError::validation("assignment weights", "must be a probability vector"));
    }
    let mut mu_hat = [0.0; 3];
    let mut m2 = [0.0; 3];
    for (w, proto) in a.iter().zip(bank.prototypes()) {
        for j in 0..3 {
            let mu = proto.mu_lin[j];
            let sd = proto.sigma_lin[j];
            mu_hat[j] += w * mu;
            m2[j] += w * (sd * sd + mu * mu);
        }
    }
    let sigma_hat = [0, 1, 2].map(|j| (m2[j] - mu_hat[j] * mu_hat[j]).max(EPS_VAR).sqrt());
    Ok(RoutedPrior {
        a: a.to_vec(),
        mu_hat,
        sigma_hat,
        m2,
    })
}

/// Cosine logits of one query against precomputed keys.
pub fn routing_logits(q_unit: &DVector<f64>, keys: &[Projection], alpha: f64) -> Vec<f64> {
    keys.iter().map(|k| alpha * q_unit.dot(&k.unit)).collect()
}

pub fn route_with_keys(
    query: &Query,
    params: &RoutingParams,
    keys: &[Projection],
    bank: &PriorBank,
) -> Result<RoutedPrior> {
    let qp = project_normalize(&query.q, &params.w_q)?;
    let logits = routing_logits(&qp.unit, keys, params.alpha);
    let a = class_gated_weights(&logits, &query.p, bank.slices())?;
    mixture_prior(&a, bank)
}

pub fn route(query: &Query, params: &RoutingParams, bank: &PriorBank) -> Result<RoutedPrior> {
    params.validate()?;
    if params.feature_dim() != bank.feature_dim() {
        return Err(PrioError::Dimension {
            what: "key projection input",
            expected: bank.feature_dim(),
            got: params.feature_dim(),
        });
    }
    if query.q.iter().any(|v| !v.is_finite()) {
        return Err(PrioError::validation("query", "non-finite embedding entry"));
    }
    let keys = project_keys(params, bank)?;
    route_with_keys(query, params, &keys, bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BuildMeta, Prototype};
    use crate::size_space::Epsilon;

    pub(crate) fn proto(class_id: usize, mu: [f64; 3], sigma: [f64; 3], centroid: Vec<f64>) -> Prototype {
        Prototype {
            class_id,
            visual_centroid: centroid,
            mu_lin: mu,
            sigma_lin: sigma,
            mu_log: mu.map(f64::ln),
            v_log: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            eta: [0.01; 3],
            count: 10,
        }
    }

    fn bank(protos: Vec<Prototype>, classes: usize) -> PriorBank {
        let dim = protos[0].visual_centroid.len();
        PriorBank::new(
            (0..classes).map(|c| format!("c{c}")).collect(),
            protos,
            dim,
            Epsilon::default(),
            1e-4,
            BuildMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn alpha_is_inverse_sqrt_width() {
        assert_eq!(ALPHA, 1.0 / (ROUTING_WIDTH as f64).sqrt());
    }

    #[test]
    fn projection_examples() {
        let w = DMatrix::<f64>::identity(4, 4);
        let p = project_normalize(&[3.0, 4.0, 0.0, 0.0], &w).unwrap();
        assert_eq!(p.unit.as_slice(), &[0.6, 0.8, 0.0, 0.0]);
        let z = project_normalize(&[0.0; 4], &w).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.unit.as_slice(), &[0.0; 4]);
        assert!(project_normalize(&[1.0; 3], &w).is_err());

        let params = RoutingParams::init(5, 3, 16, 3);
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let v: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
            let p = project_normalize(&v, &params.w_q).unwrap();
            assert!((p.unit.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_examples() {
        let a = class_gated_weights(&[0.3, 0.3, 0.3, 9.0], &[1.0, 0.0], &[0..3, 3..4]).unwrap();
        for k in 0..3 {
            assert!((a[k] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a[3], 0.0);

        let a = class_gated_weights(&[5.0, -2.0], &[0.5, 0.5], &[0..1, 1..2]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);

        // Scalar oracle: softmax(1, 2) * 0.7 and 1 * 0.3, then renormalise by 1.0.
        let a = class_gated_weights(&[1.0, 2.0, 0.5], &[0.7, 0.3], &[0..2, 2..3]).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let expected = [0.7 * e1 / (e1 + e2), 0.7 * e2 / (e1 + e2), 0.3];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        }

        assert!(matches!(
            class_gated_weights(&[1.0, 2.0], &[0.0, 0.0], &[0..1, 1..2]),
            Err(PrioError::ZeroGate)
        ));
    }

    #[test]
    fn mixture_examples() {
        let b = bank(
            vec![
                proto(0, [1.0; 3], [0.0; 3], vec![1.0, 0.0]),
                proto(0, [3.0; 3], [0.0; 3], vec![0.0, 1.0]),
            ],
            1,
        );
        let r = mixture_prior(&[0.5, 0.5], &b).unwrap();
        assert_eq!(r.mu_hat, [2.0; 3]);
        assert_eq!(r.m2, [5.0; 3]);
        assert_eq!(r.sigma_hat, [1.0; 3]);

        let r = mixture_prior(&[0.0, 1.0], &b).unwrap();
        assert_eq!(r.mu_hat, [3.0; 3]);
        assert_eq!(r.sigma_hat, [EPS_VAR.sqrt(); 3]);
        assert!(mixture_prior(&[0.7, 0.7], &b).is_err());
    }

    #[test]
    fn single_prototype_bank_ignores_query() {
        let b = bank(vec![proto(0, [1.5, 1.6, 3.9], [0.1, 0.1, 0.2], vec![0.3, 0.2, 0.1])], 1);
        let params = RoutingParams::init(4, 3, 32, 9);
        for q in [[1.0, 0.0, 0.0, 0.0], [-3.0, 2.0, 0.5, 1.0]] {
            let r = route(&Query { q: q.to_vec(), p: vec![1.0] }, &params, &b).unwrap();
            assert_eq!(r.a, vec![1.0]);
            assert_eq!(r.mu_hat, [1.5, 1.6, 3.9]);
            assert!((r.sigma_hat[2] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn full_route_matches_scalar_reimplementation() {
        let b = bank(
            vec![
                proto(0, [1.5, 1.6, 3.9], [0.1, 0.1, 0.3], vec![1.0, 0.0, 0.2]),
                proto(0, [1.7, 1.8, 4.6], [0.1, 0.1, 0.2], vec![0.0, 1.0, 0.1]),
                proto(1, [1.7, 0.6, 0.8], [0.1, 0.05, 0.1], vec![0.5, 0.5, 0.0]),
                proto(2, [1.7, 0.6, 1.8], [0.1, 0.05, 0.1], vec![-0.2, 0.1, 1.0]),
                proto(2, [1.5, 0.5, 1.6], [0.1, 0.05, 0.1], vec![0.3, -0.4, 0.6]),
            ],
            3,
        );
        let params = RoutingParams::init(4, 3, 8, 21);
        let q = vec![0.4, -1.2, 0.7, 2.0];
        let p = vec![0.6, 0.1, 0.3];
        let got = route(&Query { q: q.clone(), p: p.clone() }, &params, &b).unwrap();

        // Straight-line scalar evaluation with plain loops.
        let proj = |w: &DMatrix<f64>, v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out[i] += w[(i, j)] * v[j];
                }
            }
            let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.iter().map(|x| x / n).collect()
        };
        let qn = proj(&params.w_q, &q);
        let logits: Vec<f64> = b
            .prototypes()
            .iter()
            .map(|pr| {
                let k = proj(&params.w_k, &pr.visual_centroid);
                ALPHA * qn.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect();
        let mut at = [0.0; 5];
        for (c, s) in [(0usize, 0..2), (1, 2..3), (2, 3..5)] {
            let z: f64 = s.clone().map(|k| logits[k].exp()).sum();
            for k in s {
                at[k] = logits[k].exp() / z * p[c];
            }
        }
        let tot: f64 = at.iter().sum();
        let a: Vec<f64> = at.iter().map(|x| x / tot).collect();
        for (x, y) in got.a.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        for j in 0..3 {
            let mu: f64 = (0..5).map(|k| a[k] * b.prototypes()[k].mu_lin[j]).sum();
            let m2: f64 = (0..5)
                .map(|k| {
                    let pr = &b.prototypes()[k];
                    a[k] * (pr.sigma_lin[j].powi(2) + pr.mu_lin[j].powi(2))
                })
                .sum();
            assert!((got.mu_hat[j] - mu).abs() < 1e-12);
            assert!((got.sigma_hat[j] - (m2 - mu * mu).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn route_rejects_bad_inputs() {
        let b = bank(vec![proto(0, [1.5, 1.6, 3.9], [0.1; 3], vec![0.3, 0.2])], 1);
        let params = RoutingParams::init(2, 2, 8, 1);
        assert!(route(&Query { q: vec![1.0, 1.0], p: vec![0.0] }, &params, &b).is_err());
        assert!(route(&Query { q: vec![1.0, f64::NAN], p: vec![1.0] }, &params, &b).is_err());
        assert!(route(&Query { q: vec![1.0], p: vec![1.0] }, &params, &b).is_err());
        assert!(route(&Query { q: vec![1.0, 1.0], p: vec![1.0, 0.0] }, &params, &b).is_err());
    }
}
