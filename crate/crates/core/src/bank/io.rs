//! Canonical text form of a bank: JSON with sorted keys and shortest
//! round-trip float rendering.

use serde::{Deserialize, Serialize};

use super::{BuildMeta, PriorBank, Prototype};
use crate::error::{PrioError, Result};
use crate::size_space::Epsilon;

pub const BANK_VERSION: &str = "prio-bank/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceDoc {
    class: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankDoc {
    version: String,
    classes: Vec<String>,
    slices: Vec<SliceDoc>,
    prototypes: Vec<Prototype>,
    feature_dim: usize,
    eps: f64,
    eigenvalue_floor: f64,
    build_meta: BuildMeta,
}

pub fn bank_to_json(bank: &PriorBank) -> String {
    let doc = BankDoc {
        version: BANK_VERSION.to_string(),
        classes: bank.classes.clone(),
        slices: bank
            .classes
            .iter()
            .zip(&bank.slices)
            .map(|(c, s)| SliceDoc {
                class: c.clone(),
                start: s.start,
                end: s.end,
            })
            .collect(),
        prototypes: bank.prototypes.clone(),
        feature_dim: bank.feature_dim,
        eps: bank.eps.value(),
        eigenvalue_floor: bank.eigenvalue_floor,
        build_meta: bank.meta.clone(),
    };
    // Routing through `Value` sorts every object's keys.
    let value = serde_json::to_value(&doc).expect("bank fields are finite");
    let mut text = serde_json::to_string_pretty(&value).expect("serialisable");
    text.push('\n');
    text
}

pub fn bank_from_json(text: &str) -> Result<PriorBank> {
    let doc: BankDoc =
        serde_json::from_str(text).map_err(|e| PrioError::BankFormat(e.to_string()))?;
    if doc.version != BANK_VERSION {
        return Err(PrioError::BankFormat(format!(
            "version {:?}, expected {BANK_VERSION:?}",
            doc.version
        )));
    }
    let eps = Epsilon::new(doc.eps).map_err(|e| PrioError::BankFormat(e.to_string()))?;
    let bank = PriorBank::new(
        doc.classes,
        doc.prototypes,
        doc.feature_dim,
        eps,
        doc.eigenvalue_floor,
        doc.build_meta,
    )?;
    let declared: Vec<_> = doc.slices.iter().map(|s| s.start..s.end).collect();
    if declared != bank.slices {
        return Err(PrioError::BankFormat(format!(
            "declared slices {declared:?} disagree with prototype classes {:?}",
            bank.slices
        )));
    }
    for (s, c) in doc.slices.iter().zip(&bank.classes) {
        if &s.class != c {
            return Err(PrioError::BankFormat(format!("slice class {:?} != {c:?}", s.class)));
        }
    }
    Ok(bank)
}
