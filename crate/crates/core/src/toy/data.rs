use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ToyConfig;
use crate::error::Result;
use crate::kitti_io::{FeatureTable, LabelInstance};
use crate::rng;
use crate::size_space::SizeTriple;

/// Keys of validation instances start here so they never collide with training keys.
pub const VAL_KEY_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    pub key: u64,
    pub class_id: usize,
    pub mode_id: usize,
    pub gt_size: SizeTriple,
    /// Index into `mask_levels`.
    pub mask_level: usize,
    pub mask: f64,
    /// Noisy log-size observation before embedding.
    pub evidence: [f64; 3],
    pub query: Vec<f64>,
    pub feature: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<ToyInstance>,
    pub val: Vec<ToyInstance>,
    /// `query = embedding * evidence`.
    pub embedding: DMatrix<f64>,
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_direction(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Generator<'a> {
    cfg: &'a ToyConfig,
    class_pick: WeightedIndex<f64>,
    mode_pick: Vec<WeightedIndex<f64>>,
    class_dir: Vec<Vec<f64>>,
    mode_dir: Vec<Vec<Vec<f64>>>,
    embedding: DMatrix<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a ToyConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[0]);
        let class_pick = WeightedIndex::new(cfg.classes.iter().map(|c| c.weight)).expect("validated weights");
        let mode_pick = cfg
            .classes
            .iter()
            .map(|c| WeightedIndex::new(c.modes.iter().map(|m| m.weight)).expect("validated weights"))
            .collect();
        let class_dir = cfg.classes.iter().map(|_| random_direction(&mut r, cfg.feature_dim)).collect();
        let mode_dir = cfg
            .classes
            .iter()
            .map(|c| c.modes.iter().map(|_| random_direction(&mut r, cfg.feature_dim)).collect())
            .collect();
        // Orthonormal columns keep the evidence recoverable from the query.
        let raw = DMatrix::from_fn(cfg.query_dim, 3, |_, _| normal(&mut r));
        let embedding = raw.qr().q();
        Ok(Generator {
            cfg,
            class_pick,
            mode_pick,
            class_dir,
            mode_dir,
            embedding,
        })
    }

    fn instance(&self, r: &mut ChaCha8Rng, key: u64) -> Result<ToyInstance> {
        let cfg = self.cfg;
        let class_id = self.class_pick.sample(r);
        let class = &cfg.classes[class_id];
        let mode_id = self.mode_pick[class_id].sample(r);
        let m = &class.modes[mode_id];
        let log_size = m.mean.map(|v| v.ln() + m.log_spread * normal(r));
        let gt_size = SizeTriple::from_array(log_size.map(f64::exp))?;
        let mask_level = r.gen_range(0..cfg.mask_levels.len());
        let mask = cfg.mask_levels[mask_level];
        let noise = cfg.evidence_noise * (1.0 + 4.0 * mask);
        let evidence = log_size.map(|v| v + noise * normal(r));
        let query: Vec<f64> = (0..cfg.query_dim)
            .map(|i| (0..3).map(|j| self.embedding[(i, j)] * evidence[j]).sum())
            .collect();
        let feature: Vec<f64> = (0..cfg.feature_dim)
            .map(|i| {
                self.class_dir[class_id][i]
                    + cfg.mode_feature_scale * self.mode_dir[class_id][mode_id][i]
                    + cfg.feature_noise * normal(r)
            })
            .collect();
        let n = cfg.classes.len() as f64;
        let p = (0..cfg.classes.len())
            .map(|c| {
                let base = cfg.class_smoothing / n;
                if c == class_id {
                    1.0 - cfg.class_smoothing + base
                } else {
                    base
                }
            })
            .collect();
        Ok(ToyInstance {
            key,
            class_id,
            mode_id,
            gt_size,
            mask_level,
            mask,
            evidence,
            query,
            feature,
            p,
        })
    }
}

/// Draws the training and validation splits. Both use the full configured
/// sizes; `train_fraction` is applied afterwards by [`split_fraction`] so
/// that the validation set does not depend on it.
pub fn generate_dataset(cfg: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    cfg.validate()?;
    let g = Generator::new(cfg, seed)?;
    let mut rt = rng::stream(seed, &[1]);
    let train = (0..cfg.train_size as u64)
        .map(|i| g.instance(&mut rt, i))
        .collect::<Result<Vec<_>>>()?;
    let mut rv = rng::stream(seed, &[2]);
    let val = (0..cfg.val_size as u64)
        .map(|i| g.instance(&mut rv, VAL_KEY_OFFSET + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset {
        train,
        val,
        embedding: g.embedding,
    })
}

/// The first `ceil(fraction * n)` training instances.
pub fn split_fraction(train: &[ToyInstance], fraction: f64) -> Vec<ToyInstance> {
    let n = ((train.len() as f64) * fraction).ceil() as usize;
    train[..n.clamp(1, train.len())].to_vec()
}

/// Label records and feature rows for building a bank from toy instances.
///
/// Mask levels become KITTI occlusion codes by rank, so the default filter
/// drops the most masked level.
pub fn bank_inputs(instances: &[ToyInstance], cfg: &ToyConfig) -> Result<(Vec<LabelInstance>, FeatureTable)> {
    let mut labels = Vec::with_capacity(instances.len());
    let mut table = FeatureTable::new(cfg.feature_dim)?;
    for inst in instances {
        labels.push(LabelInstance {
            class_name: cfg.classes[inst.class_id].name.clone(),
            truncation: 0.0,
            occlusion: inst.mask_level as u8,
            alpha: 0.0,
            bbox2d: [0.0, 0.0, 100.0, 100.0],
            size: inst.gt_size,
            location: [0.0, 0.0, 20.0],
            rotation_y: 0.0,
            score: None,
            instance_key: inst.key,
        });
        table.insert(inst.key, inst.feature.iter().map(|&v| v as f32).collect())?;
    }
    Ok((labels, table))
}
