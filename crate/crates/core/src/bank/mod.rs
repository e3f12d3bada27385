//! Offline construction of the class-aware prior bank.
//!
//! Per class: filter, cluster log sizes into geometry groups, sub-cluster each
//! group by appearance, compute prototype statistics, then fold under-supported
//! prototypes into their most similar retained neighbour.

mod io;
pub mod kmeans;
pub mod merge;
pub mod stats;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PrioError, Result};
use crate::kitti_io::{filter_instances, FeatureTable, FilterThresholds, LabelInstance};
use crate::rng;
use crate::size_space::{to_log, Epsilon};

pub use io::{bank_from_json, bank_to_json, BANK_VERSION};
pub use kmeans::{cluster_appearance, cluster_geometry, kmeans, Clustering, KMeansConfig};
pub use merge::{merge_small_clusters, stats_from_members, Member};
pub use stats::{compute_prototype_stats, Prototype};

pub const DEFAULT_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub classes: Vec<String>,
    pub geometry_k: BTreeMap<String, usize>,
    pub appearance_k: BTreeMap<String, usize>,
    pub min_support: usize,
    pub eigenvalue_floor: f64,
    pub eps: f64,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

impl Default for BankConfig {
    fn default() -> Self {
        let map = |v: [usize; 3]| {
            DEFAULT_CLASSES
                .iter()
                .zip(v)
                .map(|(c, k)| (c.to_string(), k))
                .collect()
        };
        BankConfig {
            classes: DEFAULT_CLASSES.iter().map(|c| c.to_string()).collect(),
            geometry_k: map([5, 4, 4]),
            appearance_k: map([3, 4, 4]),
            min_support: 10,
            eigenvalue_floor: 1e-4,
            eps: Epsilon::DEFAULT,
            seed: 0,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(PrioError::validation("bank config", r));
        if self.classes.is_empty() {
            return bad("no classes declared".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return bad(format!("class {c:?} declared twice"));
            }
            for (name, map) in [("geometry_k", &self.geometry_k), ("appearance_k", &self.appearance_k)] {
                match map.get(c) {
                    Some(&k) if k >= 1 => {}
                    Some(_) => return bad(format!("{name}.{c} must be at least 1")),
                    None => return bad(format!("{name} has no entry for class {c:?}")),
                }
            }
        }
        if self.min_support == 0 {
            return bad("min_support must be at least 1".into());
        }
        if !(self.eigenvalue_floor > 0.0 && self.eigenvalue_floor.is_finite()) {
            return bad(format!("eigenvalue_floor must be positive, got {}", self.eigenvalue_floor));
        }
        Epsilon::new(self.eps)?;
        if self.kmeans.restarts == 0 || self.kmeans.max_iters == 0 {
            return bad("kmeans.restarts and kmeans.max_iters must be at least 1".into());
        }
        Ok(())
    }

    pub fn epsilon(&self) -> Epsilon {
        Epsilon::new(self.eps).expect("validated")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceCounts {
    pub labelled: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildMeta {
    pub seed: u64,
    pub config_hash: String,
    pub source_counts: BTreeMap<String, SourceCounts>,
}

/// Frozen collection of prototypes partitioned into contiguous class slices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBank {
    classes: Vec<String>,
    slices: Vec<Range<usize>>,
    prototypes: Vec<Prototype>,
    feature_dim: usize,
    eps: Epsilon,
    eigenvalue_floor: f64,
    meta: BuildMeta,
}

impl PriorBank {
    /// Assembles a bank from prototypes already grouped by class in class order.
    pub fn new(
        classes: Vec<String>,
        prototypes: Vec<Prototype>,
        feature_dim: usize,
        eps: Epsilon,
        eigenvalue_floor: f64,
        meta: BuildMeta,
    ) -> Result<Self> {
        let mut slices = Vec::with_capacity(classes.len());
        let mut start = 0;
        for c in 0..classes.len() {
            let end = start
                + prototypes[start..]
                    .iter()
                    .take_while(|p| p.class_id == c)
                    .count();
            slices.push(start..end);
            start = end;
        }
        let bank = PriorBank {
            classes,
            slices,
            prototypes,
            feature_dim,
            eps,
            eigenvalue_floor,
            meta,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(PrioError::BankFormat(r));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        let covered: usize = self.slices.iter().map(|s| s.len()).sum();
        if covered != self.prototypes.len() {
            return bad(format!(
                "prototypes not grouped by class order: slices cover {covered} of {}",
                self.prototypes.len()
            ));
        }
        for (c, s) in self.slices.iter().enumerate() {
            if s.is_empty() {
                return bad(format!("class {:?} has no prototypes", self.classes[c]));
            }
            for p in &self.prototypes[s.clone()] {
                if p.class_id != c {
                    return bad(format!("prototype with class {} in slice {c}", p.class_id));
                }
            }
        }
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.visual_centroid.len() != self.feature_dim {
                return bad(format!("prototype {i}: centroid length {} != {}", p.visual_centroid.len(), self.feature_dim));
            }
            p.check_invariants(self.eigenvalue_floor)
                .map_err(|e| PrioError::BankFormat(format!("prototype {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn slices(&self) -> &[Range<usize>] {
        &self.slices
    }

    pub fn slice(&self, class_id: usize) -> Range<usize> {
        self.slices[class_id].clone()
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn eps(&self) -> Epsilon {
        self.eps
    }

    pub fn eigenvalue_floor(&self) -> f64 {
        self.eigenvalue_floor
    }

    pub fn meta(&self) -> &BuildMeta {
        &self.meta
    }
}

/// A built bank plus the instance keys behind every prototype.
#[derive(Debug, Clone)]
pub struct BankBuild {
    pub bank: PriorBank,
    pub members: Vec<Vec<u64>>,
    /// Prototype count per class before merging.
    pub pre_merge: Vec<usize>,
}

fn config_hash(cfg: &BankConfig, thresholds: &FilterThresholds) -> String {
    let doc = serde_json::json!({ "bank": cfg, "filter": thresholds });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_bank(
    labels: &[LabelInstance],
    features: &FeatureTable,
    thresholds: &FilterThresholds,
    cfg: &BankConfig,
) -> Result<PriorBank> {
    build_bank_detailed(labels, features, thresholds, cfg).map(|b| b.bank)
}

pub fn build_bank_detailed(
    labels: &[LabelInstance],
    features: &FeatureTable,
    thresholds: &FilterThresholds,
    cfg: &BankConfig,
) -> Result<BankBuild> {
    cfg.validate()?;
    for c in &cfg.classes {
        if thresholds.get(c).is_none() {
            return Err(PrioError::validation(
                "filter thresholds",
                format!("no thresholds for class {c:?}"),
            ));
        }
    }
    let eps = cfg.epsilon();
    let kept = filter_instances(labels, thresholds).kept;

    let mut source_counts = BTreeMap::new();
    let mut prototypes = Vec::new();
    let mut members_out = Vec::new();
    let mut pre_merge = Vec::new();

    for (class_id, class) in cfg.classes.iter().enumerate() {
        let labelled = labels.iter().filter(|l| &l.class_name == class).count();
        let mut members = Vec::new();
        for inst in kept.iter().filter(|l| &l.class_name == class) {
            let row = features
                .get(inst.instance_key)
                .ok_or(PrioError::MissingFeature(inst.instance_key))?;
            let raw: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            members.push(Member {
                key: inst.instance_key,
                size: inst.size,
                feature: kmeans::unit_normalize(&raw),
            });
        }
        if members.is_empty() {
            return Err(PrioError::EmptyClass(class.clone()));
        }
        source_counts.insert(
            class.clone(),
            SourceCounts {
                labelled,
                kept: members.len(),
            },
        );

        let logs: Vec<[f64; 3]> = members.iter().map(|m| to_log(&m.size, eps).as_array()).collect();
        let geo_seed = rng::derive_seed(cfg.seed, &[class_id as u64, 0]);
        let geometry = cluster_geometry(&logs, cfg.geometry_k[class], &cfg.kmeans, geo_seed)?;

        let mut protos = Vec::new();
        let mut groups = Vec::new();
        for (g, idx) in geometry.groups().into_iter().enumerate() {
            let feats: Vec<Vec<f64>> = idx.iter().map(|&i| members[i].feature.clone()).collect();
            let app_seed = rng::derive_seed(cfg.seed, &[class_id as u64, 1, g as u64]);
            let appearance =
                cluster_appearance(&feats, cfg.appearance_k[class], &cfg.kmeans, app_seed)?;
            for sub in appearance.groups() {
                let group: Vec<Member> = sub.iter().map(|&j| members[idx[j]].clone()).collect();
                protos.push(stats_from_members(&group, class_id, eps, cfg.eigenvalue_floor)?);
                groups.push(group);
            }
        }
        pre_merge.push(protos.len());
        let (protos, groups) =
            merge_small_clusters(protos, groups, cfg.min_support, eps, cfg.eigenvalue_floor)?;
        prototypes.extend(protos);
        members_out.extend(groups.into_iter().map(|g| g.into_iter().map(|m| m.key).collect()));
    }

    let meta = BuildMeta {
        seed: cfg.seed,
        config_hash: config_hash(cfg, thresholds),
        source_counts,
    };
    let bank = PriorBank::new(
        cfg.classes.clone(),
        prototypes,
        features.dim(),
        eps,
        cfg.eigenvalue_floor,
        meta,
    )?;
    Ok(BankBuild {
        bank,
        members: members_out,
        pre_merge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::size_space::SizeTriple;

    fn label(class: &str, key: u64, s: [f64; 3]) -> LabelInstance {
        LabelInstance {
            class_name: class.into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox2d: [0.0, 0.0, 50.0, 60.0],
            size: SizeTriple::from_array(s).unwrap(),
            location: [0.0, 1.5, 20.0],
            rotation_y: 0.0,
            score: None,
            instance_key: key,
        }
    }

    #[test]
    fn one_instance_per_class_gives_one_prototype_each() {
        let labels = vec![
            label("Car", 1, [1.5, 1.6, 3.9]),
            label("Pedestrian", 2, [1.7, 0.6, 0.8]),
            label("Cyclist", 3, [1.7, 0.6, 1.8]),
        ];
        let mut ft = FeatureTable::new(2).unwrap();
        for (k, f) in [(1, [1.0, 0.0]), (2, [0.0, 1.0]), (3, [1.0, 1.0])] {
            ft.insert(k, f.to_vec()).unwrap();
        }
        let cfg = BankConfig::default();
        let t = FilterThresholds::for_classes(&cfg.classes);
        let bank = build_bank(&labels, &ft, &t, &cfg).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.slices(), &[0..1, 1..2, 2..3]);
        assert_eq!(bank.prototypes()[1].mu_lin, [1.7, 0.6, 0.8]);
    }

    #[test]
    fn missing_class_and_feature_are_errors() {
        let labels = vec![label("Car", 1, [1.5, 1.6, 3.9])];
        let mut ft = FeatureTable::new(1).unwrap();
        ft.insert(1, vec![1.0]).unwrap();
        let cfg = BankConfig::default();
        let t = FilterThresholds::for_classes(&cfg.classes);
        match build_bank(&labels, &ft, &t, &cfg) {
            Err(PrioError::EmptyClass(c)) => assert_eq!(c, "Pedestrian"),
            other => panic!("{other:?}"),
        }
        let cfg = BankConfig {
            classes: vec!["Car".into()],
            ..BankConfig::default()
        };
        let empty = FeatureTable::new(1).unwrap();
        assert!(matches!(
            build_bank(&labels, &empty, &t, &cfg),
            Err(PrioError::MissingFeature(1))
        ));
    }

    #[test]
    fn default_cluster_caps_cover_reference_totals() {
        let cfg = BankConfig::default();
        for (class, total) in [("Car", 10), ("Pedestrian", 13), ("Cyclist", 12)] {
            assert!(cfg.geometry_k[class] * cfg.appearance_k[class] >= total);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = BankConfig::default();
        cfg.geometry_k.insert("Car".into(), 0);
        assert!(cfg.validate().is_err());
        let mut cfg = BankConfig::default();
        cfg.appearance_k.remove("Cyclist");
        assert!(cfg.validate().is_err());
        let cfg = BankConfig {
            min_support: 0,
            ..BankConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
