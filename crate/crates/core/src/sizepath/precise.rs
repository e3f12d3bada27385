//! Scalar evaluation of the staged path loss, generic over the arithmetic.
//!
//! Central differences of an O(1) loss in double precision carry about
//! 1e-11 of absolute noise at h = 1e-5, which swamps routing gradients of
//! order 1e-8. Evaluating the same objective in double-double arithmetic
//! removes that floor without changing the step.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{HeadParams, PathConfig, SizePathInput, StagedWeights};
use crate::bank::PriorBank;
use crate::routing::{RoutingParams, DEGENERATE_NORM, EPS_VAR};

pub trait Real:
    Copy
    + PartialOrd
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`, giving about 106
/// significant bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    fn scale(self, f: f64) -> Dd {
        // Exact for powers of two.
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<std::cmp::Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(std::cmp::Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        quick_two_sum(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::from(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::from(q2);
        let q3 = r.hi / y.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

impl Real for Dd {
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::from(0.0);
        }
        // exp(x) = 2^k exp(r), r = (x - k ln2) / 1024; Taylor series for
        // expm1(r), then ten doublings of expm1.
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from(k)).scale(1.0 / 1024.0);
        let mut term = r;
        let mut sum = r;
        for i in 2..=10 {
            term = term * r / Dd::from(i as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * (sum + Dd::from(2.0));
        }
        (sum + Dd::from(1.0)).scale(2f64.powi(k as i32))
    }

    fn ln(self) -> Self {
        // One Newton step from the double-precision logarithm.
        let y = Dd::from(self.hi.ln());
        y + (self * (-y).exp() - Dd::from(1.0))
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::from(0.0);
        }
        let s = self.hi.sqrt();
        let (p, e) = two_prod(s, s);
        let r = self - Dd { hi: p, lo: e };
        quick_two_sum(s, r.hi / (2.0 * s))
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Which parameter is displaced from its stored value, in the flattened layout
/// of [`super::flatten_params`].
#[derive(Debug, Clone, Copy)]
pub struct Displacement<T> {
    pub index: usize,
    pub delta: T,
}

fn unit<T: Real>(raw: &[T]) -> Vec<T> {
    let norm = raw.iter().fold(T::from(0.0), |s, v| s + *v * *v).sqrt();
    if norm.to_f64() < DEGENERATE_NORM {
        return vec![T::from(0.0); raw.len()];
    }
    let inv = T::from(1.0) / norm;
    raw.iter().map(|v| *v * inv).collect()
}

/// Undisplaced projections of one instance, so that a displaced evaluation
/// only has to touch the row its parameter feeds.
pub struct PreciseContext<'a, T> {
    input: &'a SizePathInput,
    head: &'a HeadParams,
    routing: &'a RoutingParams,
    bank: &'a PriorBank,
    cfg: &'a PathConfig,
    staged: StagedWeights<'a>,
    q: Vec<T>,
    u: Vec<T>,
    z: Vec<Vec<T>>,
    q_unit: Vec<T>,
    key_units: Vec<Vec<T>>,
}

impl<'a, T: Real> PreciseContext<'a, T> {
    pub fn new(
        input: &'a SizePathInput,
        head: &'a HeadParams,
        routing: &'a RoutingParams,
        bank: &'a PriorBank,
        cfg: &'a PathConfig,
        staged: StagedWeights<'a>,
    ) -> Self {
        let zero = T::from(0.0);
        let q: Vec<T> = input.query.q.iter().map(|v| T::from(*v)).collect();
        let width = routing.w_q.nrows();
        let u: Vec<T> = (0..width)
            .map(|i| q.iter().enumerate().fold(zero, |acc, (d, qd)| acc + T::from(routing.w_q[(i, d)]) * *qd))
            .collect();
        let z = bank
            .prototypes()
            .iter()
            .map(|p| {
                (0..width)
                    .map(|i| {
                        p.visual_centroid
                            .iter()
                            .enumerate()
                            .fold(zero, |acc, (f, v)| acc + T::from(routing.w_k[(i, f)]) * T::from(*v))
                    })
                    .collect()
            })
            .collect::<Vec<Vec<T>>>();
        let q_unit = unit(&u);
        let key_units = z.iter().map(|z| unit(z)).collect();
        PreciseContext {
            input,
            head,
            routing,
            bank,
            cfg,
            staged,
            q,
            u,
            z,
            q_unit,
            key_units,
        }
    }

    /// Staged loss with at most one parameter displaced.
    pub fn loss(&self, shift: Option<Displacement<T>>) -> T {
        let zero = T::from(0.0);
        let dim = self.q.len();
        let width = self.u.len();
        let o_hb = 3 * dim;
        let o_wq = o_hb + 3;
        let o_wk = o_wq + width * dim;
        let delta_at = |idx: usize| -> T {
            match shift {
                Some(s) if s.index == idx => s.delta,
                _ => zero,
            }
        };

        let mut r = [zero; 3];
        for (j, rj) in r.iter_mut().enumerate() {
            let mut acc = T::from(self.head.bias[j]) + delta_at(o_hb + j);
            for d in 0..dim {
                acc = acc + (T::from(self.head.weight[(j, d)]) + delta_at(d * 3 + j)) * self.q[d];
            }
            *rj = acc;
        }

        let protos = self.bank.prototypes();
        let shifted_q;
        let qu = match shift {
            Some(s) if (o_wq..o_wk).contains(&s.index) => {
                let local = s.index - o_wq;
                let (row, d) = (local % width, local / width);
                let mut u = self.u.clone();
                u[row] = u[row] + s.delta * self.q[d];
                shifted_q = unit(&u);
                &shifted_q
            }
            _ => &self.q_unit,
        };
        let shifted_keys;
        let keys: &[Vec<T>] = match shift {
            Some(s) if s.index >= o_wk => {
                let local = s.index - o_wk;
                let (row, f) = (local % width, local / width);
                shifted_keys = self
                    .z
                    .iter()
                    .zip(protos)
                    .map(|(z, p)| {
                        let mut z = z.clone();
                        z[row] = z[row] + s.delta * T::from(p.visual_centroid[f]);
                        unit(&z)
                    })
                    .collect::<Vec<_>>();
                &shifted_keys
            }
            _ => &self.key_units,
        };
        let alpha = T::from(self.routing.alpha);
        let logits: Vec<T> = keys
            .iter()
            .map(|k| alpha * qu.iter().zip(k.iter()).fold(zero, |s, (a, b)| s + *a * *b))
            .collect();

        // Class-gated weights.
        let p = &self.input.query.p;
        let total: f64 = p.iter().sum();
        let mut a = vec![zero; protos.len()];
        for (c, s) in self.bank.slices().iter().enumerate() {
            if p[c] == 0.0 {
                continue;
            }
            let mut m = logits[s.start];
            for k in s.clone() {
                if logits[k] > m {
                    m = logits[k];
                }
            }
            let e: Vec<T> = s.clone().map(|k| (logits[k] - m).exp()).collect();
            let z = e.iter().fold(zero, |acc, v| acc + *v);
            let scale = T::from(p[c]) / T::from(total);
            for (k, ek) in s.clone().zip(e) {
                a[k] = ek / z * scale;
            }
        }

        // Mixture, conditioning, regression.
        let cfg = self.cfg;
        let c: f64 = p.iter().zip(&cfg.betas).map(|(a, b)| a * b).sum();
        let strength = T::from(cfg.lambda0) * T::from(c);
        let mut x = [zero; 3];
        let mut l_det = zero;
        for j in 0..3 {
            let mut mu = zero;
            let mut m2 = zero;
            for (k, pr) in protos.iter().enumerate() {
                let m = T::from(pr.mu_lin[j]);
                let s = T::from(pr.sigma_lin[j]);
                mu = mu + a[k] * m;
                m2 = m2 + a[k] * (s * s + m * m);
            }
            let mut var = m2 - mu * mu;
            if var < T::from(EPS_VAR) {
                var = T::from(EPS_VAR);
            }
            let sigma = var.sqrt();
            let lambda = strength / (T::from(1.0) + sigma / T::from(cfg.sigma_s));
            x[j] = r[j] + lambda * (mu + T::from(cfg.eps.value())).ln();
            let diff = x[j] - T::from(self.input.target.as_array()[j]).ln();
            l_det = l_det + diff * diff;
        }

        // Whitened distances under staged weights.
        let kappa = T::from(self.staged.kappa);
        let mut l_cap = zero;
        for (k, pr) in protos.iter().enumerate() {
            let w = kappa * a[k] + (T::from(1.0) - kappa) * T::from(self.staged.detached[k]);
            let mut md2 = zero;
            for (col, eta) in pr.v_log.iter().zip(pr.eta) {
                let mut y = zero;
                for i in 0..3 {
                    y = y + T::from(col[i]) * (x[i] - T::from(pr.mu_log[i]));
                }
                md2 = md2 + y * y / T::from(eta);
            }
            l_cap = l_cap + w * md2;
        }
        let scale = T::from(cfg.lambda_cap) * T::from(cfg.rho) * T::from(cfg.w_cap[self.input.gt_class]);
        l_det + scale * l_cap
    }

    /// Central difference quotient at `index` for step `h`, in `T`.
    pub fn quotient(&self, index: usize, h: f64) -> f64 {
        let plus = self.loss(Some(Displacement { index, delta: T::from(h) }));
        let minus = self.loss(Some(Displacement { index, delta: T::from(-h) }));
        ((plus - minus) / T::from(2.0 * h)).to_f64()
    }
}

/// Staged loss with one parameter displaced by `shift.delta`, evaluated in `T`.
pub fn staged_loss<T: Real>(
    input: &SizePathInput,
    head: &HeadParams,
    routing: &RoutingParams,
    bank: &PriorBank,
    cfg: &PathConfig,
    staged: StagedWeights<'_>,
    shift: Option<Displacement<T>>,
) -> T {
    PreciseContext::new(input, head, routing, bank, cfg, staged).loss(shift)
}

/// Central difference quotient of the staged loss at coordinate `index`,
/// computed in double-double from the exact displacement `h`.
pub fn precise_quotient(
    input: &SizePathInput,
    head: &HeadParams,
    routing: &RoutingParams,
    bank: &PriorBank,
    cfg: &PathConfig,
    staged: StagedWeights<'_>,
    index: usize,
    h: f64,
) -> f64 {
    PreciseContext::<Dd>::new(input, head, routing, bank, cfg, staged).quotient(index, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_exp_and_ln_match_known_constants() {
        // e = 2.718281828459045 + 1.4456468917292502e-16
        let e = Dd::from(1.0).exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-31);
        for v in [0.37, 1.3, 5.0, -3.2, 1e-6] {
            let x = Dd::from(v);
            let back = x.exp().ln() - x;
            assert!(back.to_f64().abs() < 1e-30, "{v}: {back:?}");
        }
        let l2 = Dd::from(2.0).ln();
        assert_eq!(l2.hi, LN2.hi);
        assert!((l2.lo - LN2.lo).abs() < 1e-32);
    }

    #[test]
    fn dd_arithmetic_is_double_double_accurate() {
        let third = Dd::from(1.0) / Dd::from(3.0);
        assert!((third * Dd::from(3.0) - Dd::from(1.0)).to_f64().abs() < 1e-31);
        let a = Dd { hi: 1.2345678901234567, lo: 3.3e-17 };
        let b = Dd { hi: 0.7777777777777777, lo: -1.1e-17 };
        assert!(((a / b) * b - a).to_f64().abs() < 1e-31);
        let s = a.sqrt();
        assert!((s * s - a).to_f64().abs() < 1e-31);
        // 0.1 + 0.2 carries the representation errors of both literals exactly.
        let sum = Dd::from(0.1) + Dd::from(0.2);
        assert_eq!(sum.hi, 0.30000000000000004);
        assert_eq!(sum.lo, -2.7755575615628914e-17);
    }
}
