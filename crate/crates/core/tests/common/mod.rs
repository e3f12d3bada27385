#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use prio_core::bank::{compute_prototype_stats, BuildMeta, PriorBank, Prototype};
use prio_core::size_space::{Epsilon, SizeTriple};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn meta() -> BuildMeta {
    BuildMeta {
        seed: 0,
        config_hash: String::new(),
        source_counts: BTreeMap::new(),
    }
}

/// A prototype from 2..=8 jittered members around a random mean size.
pub fn random_prototype(r: &mut ChaCha8Rng, class_id: usize, dim: usize) -> Prototype {
    let base = [r.gen_range(0.4..2.5), r.gen_range(0.4..2.5), r.gen_range(0.5..6.0)];
    let n = r.gen_range(2..=8);
    let sizes: Vec<SizeTriple> = (0..n)
        .map(|_| SizeTriple::from_array(base.map(|b: f64| b * r.gen_range(0.8..1.25))).unwrap())
        .collect();
    let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    compute_prototype_stats(&sizes, &refs, class_id, Epsilon::default(), 1e-4).unwrap()
}

/// Up to `max_classes` classes and `max_protos` prototypes in total, each class non-empty.
pub fn random_bank(r: &mut ChaCha8Rng, max_classes: usize, max_protos: usize, dim: usize) -> PriorBank {
    let classes = r.gen_range(1..=max_classes);
    let total = r.gen_range(classes..=max_protos.max(classes));
    let mut per_class = vec![1usize; classes];
    for _ in classes..total {
        per_class[r.gen_range(0..classes)] += 1;
    }
    let mut protos = Vec::new();
    for (c, &k) in per_class.iter().enumerate() {
        for _ in 0..k {
            protos.push(random_prototype(r, c, dim));
        }
    }
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    PriorBank::new(names, protos, dim, Epsilon::default(), 1e-4, meta()).unwrap()
}

/// Class probabilities with random exact zeros, never all zero.
pub fn random_gate(r: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..classes)
            .map(|_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.01..1.0) })
            .collect();
        if p.iter().any(|&v| v > 0.0) {
            return p;
        }
    }
}
