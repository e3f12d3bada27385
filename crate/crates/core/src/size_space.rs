//! Metric object sizes and their log-space image.
//!
//! Every downstream stage (bank statistics, conditioning, prototype distances)
//! works on `(h, w, l)` triples in meters or on their componentwise logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};

/// Component names in storage order.
pub const COMPONENTS: [&str; 3] = ["h", "w", "l"];

/// Smallest size `from_log` will return, in meters.
pub const POSITIVITY_FLOOR: f64 = 1e-9;

/// Object dimensions `(h, w, l)` in meters. Always finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SizeTriple([f64; 3]);

impl SizeTriple {
    pub fn new(h: f64, w: f64, l: f64) -> Result<Self> {
        Self::from_array([h, w, l])
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        for (value, name) in v.iter().zip(COMPONENTS) {
            if !value.is_finite() {
                return Err(PrioError::validation(
                    "size",
                    format!("component {name} is not finite ({value})"),
                ));
            }
            if *value <= 0.0 {
                return Err(PrioError::validation(
                    "size",
                    format!("component {name} must be positive, got {value}"),
                ));
            }
        }
        Ok(SizeTriple(v))
    }

    pub fn h(&self) -> f64 {
        self.0[0]
    }

    pub fn w(&self) -> f64 {
        self.0[1]
    }

    pub fn l(&self) -> f64 {
        self.0[2]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for SizeTriple {
    type Error = PrioError;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        SizeTriple::from_array(v)
    }
}

impl From<SizeTriple> for [f64; 3] {
    fn from(s: SizeTriple) -> Self {
        s.0
    }
}

/// Componentwise natural log of a size, in log-meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LogSize([f64; 3]);

impl LogSize {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(PrioError::validation(
                "log size",
                format!("component {} is not finite ({})", COMPONENTS[i], v[i]),
            ));
        }
        Ok(LogSize(v))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for LogSize {
    type Error = PrioError;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        LogSize::new(v)
    }
}

impl From<LogSize> for [f64; 3] {
    fn from(s: LogSize) -> Self {
        s.0
    }
}

/// Offset added before taking logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub const DEFAULT: f64 = 1e-6;

    pub fn new(eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(PrioError::validation(
                "eps",
                format!("must be finite and non-negative, got {eps}"),
            ));
        }
        Ok(Epsilon(eps))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon(Self::DEFAULT)
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = PrioError;

    fn try_from(v: f64) -> Result<Self> {
        Epsilon::new(v)
    }
}

impl From<Epsilon> for f64 {
    fn from(e: Epsilon) -> Self {
        e.0
    }
}

pub fn to_log(d: &SizeTriple, eps: Epsilon) -> LogSize {
    LogSize(d.0.map(|v| (v + eps.0).ln()))
}

/// Validating variant of [`to_log`] for raw arrays.
pub fn to_log_checked(d: [f64; 3], eps: Epsilon) -> Result<LogSize> {
    Ok(to_log(&SizeTriple::from_array(d)?, eps))
}

/// Inverse of [`to_log`]. Results below [`POSITIVITY_FLOOR`] are clamped to it.
pub fn from_log(x: &LogSize, eps: Epsilon) -> Result<SizeTriple> {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let e = x.0[i].exp();
        if !e.is_finite() {
            return Err(PrioError::Overflow {
                component: COMPONENTS[i],
                value: x.0[i],
            });
        }
        out[i] = (e - eps.0).max(POSITIVITY_FLOOR);
    }
    Ok(SizeTriple(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_eps() -> Epsilon {
        Epsilon::new(0.0).unwrap()
    }

    #[test]
    fn unit_size_maps_to_origin() {
        let x = to_log(&SizeTriple::new(1.0, 1.0, 1.0).unwrap(), zero_eps());
        assert_eq!(x.as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn e_minus_eps_maps_to_one() {
        let eps = Epsilon::default();
        let e = std::f64::consts::E - eps.value();
        let x = to_log(&SizeTriple::new(e, e, e).unwrap(), eps);
        for v in x.as_array() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kitti_car_size_matches_reference_logs() {
        // Reference values from an independent 50-digit evaluation of ln(d + 1e-6).
        let x = to_log(&SizeTriple::new(1.52, 1.63, 3.88).unwrap(), Epsilon::default());
        let expected = [
            0.41871099275270546_f64,
            0.4885806283154152,
            1.3558354113671076,
        ];
        for (a, b) in x.as_array().iter().zip(expected) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn from_log_examples() {
        let s = from_log(&LogSize::new([0.0; 3]).unwrap(), zero_eps()).unwrap();
        assert_eq!(s.as_array(), [1.0, 1.0, 1.0]);
        let s = from_log(
            &LogSize::new([2f64.ln(), 3f64.ln(), 4f64.ln()]).unwrap(),
            zero_eps(),
        )
        .unwrap();
        for (a, b) in s.as_array().iter().zip([2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn from_log_clamps_and_rejects_overflow() {
        let eps = Epsilon::new(1e-3).unwrap();
        let s = from_log(&LogSize::new([-20.0, 0.0, 0.0]).unwrap(), eps).unwrap();
        assert_eq!(s.h(), POSITIVITY_FLOOR);
        assert!(matches!(
            from_log(&LogSize::new([0.0, 800.0, 0.0]).unwrap(), eps),
            Err(PrioError::Overflow { component: "w", .. })
        ));
    }

    #[test]
    fn invalid_sizes_rejected() {
        for bad in [
            [0.0, 1.0, 1.0],
            [1.0, -2.0, 1.0],
            [1.0, 1.0, f64::NAN],
            [f64::INFINITY, 1.0, 1.0],
        ] {
            assert!(SizeTriple::from_array(bad).is_err());
            assert!(to_log_checked(bad, Epsilon::default()).is_err());
        }
        assert!(Epsilon::new(-1.0).is_err());
        assert!(LogSize::new([0.0, f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_recovers_size(h in 0.1f64..30.0, w in 0.1f64..30.0, l in 0.1f64..30.0) {
            let eps = Epsilon::default();
            let d = SizeTriple::new(h, w, l).unwrap();
            let back = from_log(&to_log(&d, eps), eps).unwrap();
            for (a, b) in back.as_array().iter().zip(d.as_array()) {
                prop_assert!(((a - b) / b).abs() <= 1e-12);
            }
        }

        #[test]
        fn to_log_strictly_increasing(a in 0.1f64..30.0, delta in 1e-6f64..5.0) {
            let eps = Epsilon::default();
            let lo = to_log(&SizeTriple::new(a, a, a).unwrap(), eps).as_array();
            let hi = to_log(&SizeTriple::new(a + delta, a + delta, a + delta).unwrap(), eps).as_array();
            for i in 0..3 {
                prop_assert!(hi[i] > lo[i]);
            }
        }
    }
}
