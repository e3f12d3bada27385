//! JSON persistence of trained head and routing parameters.
//!
//! Matrices are stored as arrays of rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};
use crate::routing::RoutingParams;
use crate::sizepath::HeadParams;

pub const PARAMS_VERSION: &str = "prio-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    weight: Vec<Vec<f64>>,
    bias: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoutingDoc {
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    version: String,
    head: Option<HeadDoc>,
    routing: Option<RoutingDoc>,
}

/// A head, a routing block, or both.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub head: Option<HeadParams>,
    pub routing: Option<RoutingParams>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(PrioError::validation(what, "matrix is empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != m) {
        return Err(PrioError::validation(what, format!("row {i} has {} entries, expected {m}", rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PrioError::validation(what, "non-finite entry"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let doc = ParamsDoc {
            version: PARAMS_VERSION.to_string(),
            head: self.head.as_ref().map(|h| HeadDoc {
                weight: rows(&h.weight),
                bias: h.bias,
            }),
            routing: self.routing.as_ref().map(|r| RoutingDoc {
                w_q: rows(&r.w_q),
                w_k: rows(&r.w_k),
                alpha: r.alpha,
            }),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("params serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc =
            serde_json::from_str(text).map_err(|e| PrioError::validation("params file", e.to_string()))?;
        if doc.version != PARAMS_VERSION {
            return Err(PrioError::validation(
                "params file",
                format!("version {:?}, expected {PARAMS_VERSION:?}", doc.version),
            ));
        }
        let head = match doc.head {
            Some(h) => {
                let weight = from_rows("head.weight", &h.weight)?;
                if weight.nrows() != 3 {
                    return Err(PrioError::validation("head.weight", "must have 3 rows"));
                }
                Some(HeadParams { weight, bias: h.bias })
            }
            None => None,
        };
        let routing = match doc.routing {
            Some(r) => {
                let p = RoutingParams {
                    w_q: from_rows("routing.w_q", &r.w_q)?,
                    w_k: from_rows("routing.w_k", &r.w_k)?,
                    alpha: r.alpha,
                };
                if p.w_q.nrows() != p.w_k.nrows() {
                    return Err(PrioError::validation("routing", "w_q and w_k widths differ"));
                }
                p.validate()?;
                Some(p)
            }
            None => None,
        };
        Ok(ModelParams { head, routing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let p = ModelParams {
            head: Some(HeadParams::init(5, 3)),
            routing: Some(RoutingParams::init(5, 7, 16, 9)),
        };
        assert_eq!(ModelParams::from_json(&p.to_json()).unwrap(), p);
        let empty = ModelParams::default();
        assert_eq!(ModelParams::from_json(&empty.to_json()).unwrap(), empty);
    }

    #[test]
    fn rejects_ragged_and_unknown() {
        let bad = r#"{"version":"prio-params/1","head":{"weight":[[1,2],[3],[4,5]],"bias":[0,0,0]},"routing":null}"#;
        assert!(ModelParams::from_json(bad).unwrap_err().to_string().contains("row 1"));
        let extra = r#"{"version":"prio-params/1","head":null,"routing":null,"x":1}"#;
        assert!(ModelParams::from_json(extra).is_err());
    }
}
