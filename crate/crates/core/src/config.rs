//! The shared TOML run configuration.
//!
//! Every section is optional and falls back to its defaults. Unknown keys
//! anywhere in the document are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::BankConfig;
use crate::cap::CapConfig;
use crate::conditioning::ConditioningConfig;
use crate::error::{PrioError, Result};
use crate::gradcheck::GradcheckConfig;
use crate::kitti_io::FilterThresholds;
use crate::toy::{ToyConfig, ToySetup};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "PRIO_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed. When set, it replaces `bank.seed` and `gradcheck.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Strictness threshold for the outlier ratio.
    pub tau: f64,
    pub bank: BankConfig,
    /// Per-class filter cutoffs; an empty table means defaults for every bank class.
    pub filter: FilterThresholds,
    pub conditioning: ConditioningConfig,
    pub cap: CapConfig,
    pub toy: ToyConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("out"),
            tau: crate::metrics::DEFAULT_TAU,
            bank: BankConfig::default(),
            filter: FilterThresholds(Default::default()),
            conditioning: ConditioningConfig::default(),
            cap: CapConfig::default(),
            toy: ToyConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Sets `path` (dotted) inside a TOML table. The value is read as a TOML
/// literal; anything that does not parse is taken as a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PrioError::Config(format!("override {assignment:?} is not of the form key.path=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PrioError::Config(format!("override key {path:?} has an empty segment")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PrioError::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| PrioError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| PrioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from defaults when no file is given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| PrioError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        self.conditioning.validate()?;
        self.cap.validate()?;
        self.toy.validate()?;
        self.gradcheck.validate()?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(PrioError::validation("tau", format!("must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Seed precedence: command-line flag, then `PRIO_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>> {
        let from_env = match env {
            Some(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| PrioError::validation(SEED_ENV, format!("{v:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        let seed = flag.or(from_env).or(self.seed);
        if let Some(s) = seed {
            self.seed = Some(s);
            self.bank.seed = s;
            self.gradcheck.seed = s;
        }
        Ok(seed)
    }

    /// Filter thresholds, filled with defaults for bank classes the file leaves out.
    pub fn thresholds(&self) -> FilterThresholds {
        let mut t = FilterThresholds::for_classes(&self.bank.classes);
        for (k, v) in &self.filter.0 {
            t.0.insert(k.clone(), *v);
        }
        t
    }

    /// Toy experiment settings. Bank classes always follow the toy classes.
    pub fn toy_setup(&self) -> ToySetup {
        let mut s = ToySetup::new(self.toy.clone());
        let classes = s.bank.classes.clone();
        s.bank = self.bank.clone();
        s.bank.classes = classes.clone();
        // Classes without cluster counts get two of each.
        for c in &classes {
            s.bank.geometry_k.entry(c.clone()).or_insert(2);
            s.bank.appearance_k.entry(c.clone()).or_insert(2);
        }
        s.filter = FilterThresholds::for_classes(&classes);
        for (k, v) in &self.filter.0 {
            if classes.contains(k) {
                s.filter.0.insert(k.clone(), *v);
            }
        }
        s.conditioning = self.conditioning.clone();
        s.cap = self.cap.clone();
        s.tau = self.tau;
        s
    }
}
