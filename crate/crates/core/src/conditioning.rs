//! Uncertainty-attenuated log-space fusion of the routed prior into the size
//! prediction: `s = exp(r + lambda * ln(mu_hat + eps))` with
//! `lambda = lambda0 * c * g`, `c = sum_c p_c beta_c`, `g = 1 / (1 + sigma_hat / sigma_s)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};
use crate::size_space::{Epsilon, SizeTriple, COMPONENTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub lambda0: f64,
    /// Per-class scaling; classes without an entry use 1.0.
    pub beta_cls: BTreeMap<String, f64>,
    pub sigma_s: f64,
    pub eps: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            lambda0: 0.5,
            beta_cls: BTreeMap::new(),
            sigma_s: 0.5,
            eps: Epsilon::DEFAULT,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(PrioError::validation("conditioning config", r));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 must be >= 0, got {}", self.lambda0));
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return bad(format!("sigma_s must be > 0, got {}", self.sigma_s));
        }
        if let Some((c, b)) = self.beta_cls.iter().find(|(_, b)| !(**b >= 0.0 && b.is_finite())) {
            return bad(format!("beta_cls.{c} must be >= 0, got {b}"));
        }
        Epsilon::new(self.eps)?;
        Ok(())
    }

    /// Class scalings in the given class order.
    pub fn betas(&self, classes: &[String]) -> Vec<f64> {
        classes
            .iter()
            .map(|c| self.beta_cls.get(c).copied().unwrap_or(1.0))
            .collect()
    }

    pub fn epsilon(&self) -> Epsilon {
        Epsilon::new(self.eps).expect("validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorStrength {
    pub c: f64,
    pub g: [f64; 3],
    pub lambda: [f64; 3],
}

pub fn prior_strength(p: &[f64], sigma_hat: [f64; 3], betas: &[f64], lambda0: f64, sigma_s: f64) -> PriorStrength {
    let c: f64 = p.iter().zip(betas).map(|(p, b)| p * b).sum();
    let g = sigma_hat.map(|s| 1.0 / (1.0 + s / sigma_s));
    let lambda = g.map(|g| lambda0 * c * g);
    PriorStrength { c, g, lambda }
}

pub fn condition_size(r: [f64; 3], mu_hat: [f64; 3], lambda: [f64; 3], eps: Epsilon) -> Result<SizeTriple> {
    let mut out = [0.0; 3];
    for j in 0..3 {
        if !(mu_hat[j] > 0.0) {
            return Err(PrioError::validation(
                "prior mean",
                format!("component {} must be positive, got {}", COMPONENTS[j], mu_hat[j]),
            ));
        }
        let arg = r[j] + lambda[j] * (mu_hat[j] + eps.value()).ln();
        let v = arg.exp();
        if !v.is_finite() || v == 0.0 {
            return Err(PrioError::Overflow {
                component: COMPONENTS[j],
                value: arg,
            });
        }
        out[j] = v;
    }
    SizeTriple::from_array(out)
}
