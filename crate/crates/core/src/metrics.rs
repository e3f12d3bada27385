//! Size-quality metrics over matched predictions and routing diagnostics.
//!
//! Matched-pair files are tab separated, one pair per line:
//!
//! ```text
//! class  pred_h pred_w pred_l  gt_h gt_w gt_l  [sigma_h sigma_w sigma_l]  [occlusion]
//! ```
//!
//! `occlusion` is one of `fully`, `partly`, `largely`. Blank lines and lines
//! starting with `#` are ignored, and a first line whose first field is
//! `class` is read as a header.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bank::PriorBank;
use crate::error::{PrioError, Result};
use crate::size_space::SizeTriple;

pub const DEFAULT_TAU: f64 = 0.2;

/// Mean of three values, written so that equal inputs return that value exactly.
pub fn mean3(a: f64, b: f64, c: f64) -> f64 {
    a + ((b - a) + (c - a)) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionBin {
    Fully,
    Partly,
    Largely,
}

impl OcclusionBin {
    pub const ALL: [OcclusionBin; 3] = [OcclusionBin::Fully, OcclusionBin::Partly, OcclusionBin::Largely];

    pub fn as_str(self) -> &'static str {
        match self {
            OcclusionBin::Fully => "fully",
            OcclusionBin::Partly => "partly",
            OcclusionBin::Largely => "largely",
        }
    }
}

impl FromStr for OcclusionBin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fully" => Ok(OcclusionBin::Fully),
            "partly" => Ok(OcclusionBin::Partly),
            "largely" => Ok(OcclusionBin::Largely),
            other => Err(format!("unknown occlusion bin {other:?} (expected fully, partly or largely)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub class: String,
    pub pred: SizeTriple,
    pub gt: SizeTriple,
    pub sigma_hat: Option<[f64; 3]>,
    pub occlusion: Option<OcclusionBin>,
}

impl MatchedPair {
    pub fn abs_error(&self) -> f64 {
        let (p, g) = (self.pred.as_array(), self.gt.as_array());
        let e = [0, 1, 2].map(|j| (p[j] - g[j]).abs());
        mean3(e[0], e[1], e[2])
    }

    pub fn rel_error(&self) -> f64 {
        let (p, g) = (self.pred.as_array(), self.gt.as_array());
        let e = [0, 1, 2].map(|j| (p[j] - g[j]).abs() / g[j]);
        mean3(e[0], e[1], e[2])
    }

    pub fn mean_sigma(&self) -> Option<f64> {
        self.sigma_hat.map(|s| mean3(s[0], s[1], s[2]))
    }
}

fn non_empty(pairs: &[MatchedPair], what: &str) -> Result<()> {
    if pairs.is_empty() {
        Err(PrioError::validation(what, "no matched pairs"))
    } else {
        Ok(())
    }
}

pub fn size_mae(pairs: &[MatchedPair]) -> Result<f64> {
    non_empty(pairs, "size MAE")?;
    Ok(pairs.iter().map(MatchedPair::abs_error).sum::<f64>() / pairs.len() as f64)
}

pub fn rel_mae(pairs: &[MatchedPair]) -> Result<f64> {
    non_empty(pairs, "relative MAE")?;
    Ok(pairs.iter().map(MatchedPair::rel_error).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of pairs whose mean relative error is strictly above `tau`.
pub fn outlier_ratio(pairs: &[MatchedPair], tau: f64) -> Result<f64> {
    non_empty(pairs, "outlier ratio")?;
    if !(tau >= 0.0) {
        return Err(PrioError::validation("tau", format!("must be >= 0, got {tau}")));
    }
    let n = pairs.iter().filter(|p| p.rel_error() > tau).count();
    Ok(n as f64 / pairs.len() as f64)
}

/// Mean of the three moderate-difficulty AP values.
pub fn unimod(car: f64, pedestrian: f64, cyclist: f64) -> f64 {
    mean3(car, pedestrian, cyclist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeMetrics {
    pub count: usize,
    pub size_mae: f64,
    pub rel_mae: f64,
    pub outlier_ratio: f64,
}

impl SizeMetrics {
    pub fn compute(pairs: &[MatchedPair], tau: f64) -> Result<Self> {
        Ok(SizeMetrics {
            count: pairs.len(),
            size_mae: size_mae(pairs)?,
            rel_mae: rel_mae(pairs)?,
            outlier_ratio: outlier_ratio(pairs, tau)?,
        })
    }

    fn maybe(pairs: &[MatchedPair], tau: f64) -> Result<Option<Self>> {
        if pairs.is_empty() {
            Ok(None)
        } else {
            Self::compute(pairs, tau).map(Some)
        }
    }
}

/// Indices of `pairs` in each uncertainty tercile, lowest first.
///
/// Pairs are stably sorted by mean predicted sigma. The first bin takes
/// `ceil(n/3)` pairs and the second runs to `ceil(2n/3)`.
pub fn tercile_membership(pairs: &[MatchedPair]) -> Result<[Vec<usize>; 3]> {
    let mut keyed = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let s = p
            .mean_sigma()
            .ok_or_else(|| PrioError::validation("sigma bins", format!("pair {i} has no sigma")))?;
        keyed.push((s, i));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = keyed.len();
    let c1 = n.div_ceil(3);
    let c2 = (2 * n).div_ceil(3);
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    Ok([order[..c1].to_vec(), order[c1..c2].to_vec(), order[c2..].to_vec()])
}

pub fn sigma_tercile_bins(pairs: &[MatchedPair], tau: f64) -> Result<[Option<SizeMetrics>; 3]> {
    non_empty(pairs, "sigma bins")?;
    let members = tercile_membership(pairs)?;
    let bin = |idx: &Vec<usize>| -> Result<Option<SizeMetrics>> {
        let sub: Vec<MatchedPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        SizeMetrics::maybe(&sub, tau)
    };
    Ok([bin(&members[0])?, bin(&members[1])?, bin(&members[2])?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingClassStats {
    pub class: String,
    pub matched: usize,
    pub top1_share: f64,
    pub active_used: usize,
    pub active_total: usize,
}

/// Concentration of routing weights per ground-truth class.
///
/// `rows` holds `(class id, weight row)` per matched prediction. Ties in the
/// argmax go to the lowest prototype index. Classes with no matched rows
/// report a zero share.
pub fn routing_diagnostics(rows: &[(usize, Vec<f64>)], bank: &PriorBank) -> Result<Vec<RoutingClassStats>> {
    let n = bank.len();
    let mut share = vec![0.0; bank.num_classes()];
    let mut matched = vec![0usize; bank.num_classes()];
    let mut used = vec![false; n];
    for (class, row) in rows {
        if *class >= bank.num_classes() {
            return Err(PrioError::UnknownClass(*class));
        }
        if row.len() != n {
            return Err(PrioError::Dimension {
                what: "routing weight row",
                expected: n,
                got: row.len(),
            });
        }
        let mut best = 0;
        for k in 1..n {
            if row[k] > row[best] {
                best = k;
            }
        }
        share[*class] += row[best];
        matched[*class] += 1;
        if bank.slice(*class).contains(&best) {
            used[best] = true;
        }
    }
    Ok(bank
        .classes()
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let slice = bank.slice(c);
            RoutingClassStats {
                class: name.clone(),
                matched: matched[c],
                top1_share: if matched[c] == 0 { 0.0 } else { share[c] / matched[c] as f64 },
                active_used: slice.clone().filter(|k| used[*k]).count(),
                active_total: slice.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub metrics: SizeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub stratum: String,
    pub metrics: SizeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub unified: SizeMetrics,
    /// Classes in order of first appearance.
    pub per_class: Vec<ClassMetrics>,
    pub unimod: Option<f64>,
    pub sigma_bins: Option<[Option<SizeMetrics>; 3]>,
    pub strata: Vec<StratumMetrics>,
    pub routing: Option<Vec<RoutingClassStats>>,
}

impl MetricsReport {
    /// Size metrics, per class and per occlusion bin, plus sigma terciles
    /// when every pair carries a sigma.
    pub fn from_pairs(pairs: &[MatchedPair], tau: f64) -> Result<Self> {
        let unified = SizeMetrics::compute(pairs, tau)?;
        let mut names: Vec<&str> = Vec::new();
        for p in pairs {
            if !names.contains(&p.class.as_str()) {
                names.push(&p.class);
            }
        }
        let per_class = names
            .iter()
            .map(|n| {
                let sub: Vec<MatchedPair> = pairs.iter().filter(|p| p.class == *n).cloned().collect();
                Ok(ClassMetrics {
                    class: n.to_string(),
                    metrics: SizeMetrics::compute(&sub, tau)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sigma_bins = if pairs.iter().all(|p| p.sigma_hat.is_some()) {
            Some(sigma_tercile_bins(pairs, tau)?)
        } else {
            None
        };
        let mut strata = Vec::new();
        for bin in OcclusionBin::ALL {
            let sub: Vec<MatchedPair> = pairs.iter().filter(|p| p.occlusion == Some(bin)).cloned().collect();
            if let Some(m) = SizeMetrics::maybe(&sub, tau)? {
                strata.push(StratumMetrics {
                    stratum: bin.as_str().to_string(),
                    metrics: m,
                });
            }
        }
        Ok(MetricsReport {
            tau,
            unified,
            per_class,
            unimod: None,
            sigma_bins,
            strata,
            routing: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, label: &str, m: &SizeMetrics| {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                label, m.count, m.size_mae, m.rel_mae, m.outlier_ratio
            );
        };
        let header = |out: &mut String, first: &str| {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10} {:>10} {:>10}",
                first,
                "n",
                "size_mae",
                "rel_mae",
                format!("out@{}", self.tau)
            );
        };
        header(&mut out, "class");
        for c in &self.per_class {
            row(&mut out, &c.class, &c.metrics);
        }
        row(&mut out, "unified", &self.unified);
        if let Some(u) = self.unimod {
            let _ = writeln!(out, "unimod {u:.4}");
        }
        if !self.strata.is_empty() {
            out.push('\n');
            header(&mut out, "occlusion");
            for s in &self.strata {
                row(&mut out, &s.stratum, &s.metrics);
            }
        }
        if let Some(bins) = &self.sigma_bins {
            out.push('\n');
            header(&mut out, "sigma_bin");
            for (name, b) in ["low", "mid", "high"].iter().zip(bins) {
                match b {
                    Some(m) => row(&mut out, name, m),
                    None => {
                        let _ = writeln!(out, "{name:<12} {:>6}", 0);
                    }
                }
            }
        }
        if let Some(routing) = &self.routing {
            out.push('\n');
            let _ = writeln!(out, "{:<12} {:>6} {:>10} {:>8}", "routing", "n", "top1", "active");
            for r in routing {
                let _ = writeln!(
                    out,
                    "{:<12} {:>6} {:>10.4} {:>8}",
                    r.class,
                    r.matched,
                    r.top1_share,
                    format!("{}/{}", r.active_used, r.active_total)
                );
            }
        }
        out
    }
}

fn parse_err(file: &str, line: usize, column: usize, reason: impl Into<String>) -> PrioError {
    PrioError::Parse {
        file: file.to_string(),
        line,
        column,
        reason: reason.into(),
    }
}

/// Reads a matched-pair file. `file` only labels error messages.
pub fn read_pairs(text: &str, file: &str) -> Result<Vec<MatchedPair>> {
    let mut pairs = Vec::new();
    let mut seen_content = false;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if !seen_content && fields[0] == "class" {
            seen_content = true;
            continue;
        }
        seen_content = true;
        let (has_sigma, has_occ) = match fields.len() {
            7 => (false, false),
            8 => (false, true),
            10 => (true, false),
            11 => (true, true),
            n => {
                return Err(parse_err(
                    file,
                    line_no,
                    1,
                    format!("expected 7, 8, 10 or 11 tab-separated fields, found {n}"),
                ))
            }
        };
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(file, line_no, i + 1, format!("{:?}: {e}", fields[i])))
        };
        let triple = |i: usize| -> Result<SizeTriple> {
            let v = [num(i)?, num(i + 1)?, num(i + 2)?];
            SizeTriple::from_array(v).map_err(|e| parse_err(file, line_no, i + 1, e.to_string()))
        };
        let class = fields[0].trim();
        if class.is_empty() {
            return Err(parse_err(file, line_no, 1, "empty class name"));
        }
        let pred = triple(1)?;
        let gt = triple(4)?;
        let sigma_hat = if has_sigma {
            let s = [num(7)?, num(8)?, num(9)?];
            if let Some(j) = s.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(parse_err(file, line_no, 8 + j, "sigma must be finite and >= 0"));
            }
            Some(s)
        } else {
            None
        };
        let occlusion = if has_occ {
            let col = fields.len() - 1;
            Some(fields[col].trim().parse().map_err(|e: String| parse_err(file, line_no, col + 1, e))?)
        } else {
            None
        };
        pairs.push(MatchedPair {
            class: class.to_string(),
            pred,
            gt,
            sigma_hat,
            occlusion,
        });
    }
    Ok(pairs)
}

/// Writes pairs with a header. Optional columns are emitted only when every
/// pair has them, so the output reads back to the same values.
pub fn write_pairs(pairs: &[MatchedPair]) -> String {
    let sigma = !pairs.is_empty() && pairs.iter().all(|p| p.sigma_hat.is_some());
    let occ = !pairs.is_empty() && pairs.iter().all(|p| p.occlusion.is_some());
    let mut out = String::from("class\tpred_h\tpred_w\tpred_l\tgt_h\tgt_w\tgt_l");
    if sigma {
        out.push_str("\tsigma_h\tsigma_w\tsigma_l");
    }
    if occ {
        out.push_str("\tocclusion");
    }
    out.push('\n');
    for p in pairs {
        let (a, b) = (p.pred.as_array(), p.gt.as_array());
        let _ = write!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", p.class, a[0], a[1], a[2], b[0], b[1], b[2]);
        if sigma {
            let s = p.sigma_hat.expect("checked");
            let _ = write!(out, "\t{}\t{}\t{}", s[0], s[1], s[2]);
        }
        if occ {
            let _ = write!(out, "\t{}", p.occlusion.expect("checked").as_str());
        }
        out.push('\n');
    }
    out
}
