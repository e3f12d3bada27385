use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};
use crate::size_space::{to_log, Epsilon, SizeTriple};

/// One size mode of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prototype {
    pub class_id: usize,
    pub visual_centroid: Vec<f64>,
    /// Linear mean size in meters.
    pub mu_lin: [f64; 3],
    /// Per-component population standard deviation in meters.
    pub sigma_lin: [f64; 3],
    pub mu_log: [f64; 3],
    /// Eigenvectors of the log-size covariance, stored as columns.
    pub v_log: [[f64; 3]; 3],
    /// Eigenvalues matching `v_log`, descending, floored.
    pub eta: [f64; 3],
    pub count: usize,
}

impl Prototype {
    pub fn v_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&self.v_log.map(Vector3::from))
    }

    /// `V diag(eta) V^T`.
    pub fn log_covariance(&self) -> Matrix3<f64> {
        let v = self.v_matrix();
        v * Matrix3::from_diagonal(&Vector3::from(self.eta)) * v.transpose()
    }

    pub fn check_invariants(&self, floor: f64) -> Result<()> {
        let bad = |r: String| Err(PrioError::validation("prototype", r));
        let v = self.v_matrix();
        let orth = (v.transpose() * v - Matrix3::identity()).abs().max();
        if orth > 1e-8 {
            return bad(format!("eigenvector basis not orthonormal (deviation {orth:e})"));
        }
        if self.eta.iter().any(|&e| !(e >= floor && e > 0.0 && e.is_finite())) {
            return bad(format!("eigenvalues {:?} below floor {floor}", self.eta));
        }
        if self.sigma_lin.iter().any(|&s| !(s >= 0.0)) {
            return bad(format!("negative deviation {:?}", self.sigma_lin));
        }
        if self.mu_lin.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return bad(format!("non-positive mean size {:?}", self.mu_lin));
        }
        if self.count == 0 {
            return bad("empty prototype".into());
        }
        Ok(())
    }
}

/// Symmetric eigendecomposition with eigenvalues descending and each column's
/// largest-magnitude entry made positive.
pub fn canonical_eigen(cov: &Matrix3<f64>, floor: f64) -> ([[f64; 3]; 3], [f64; 3]) {
    let (vals, vecs) = if cov.iter().all(|&x| x == 0.0) {
        (Vector3::zeros(), Matrix3::identity())
    } else {
        let eig = SymmetricEigen::new(*cov);
        (eig.eigenvalues, eig.eigenvectors)
    };
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut cols = [[0.0; 3]; 3];
    let mut eta = [0.0; 3];
    for (slot, &j) in order.iter().enumerate() {
        let mut col = [vecs[(0, j)], vecs[(1, j)], vecs[(2, j)]];
        let mut lead = 0;
        for i in 1..3 {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col = col.map(|x| -x);
        }
        cols[slot] = col;
        eta[slot] = vals[j].max(floor);
    }
    (cols, eta)
}

/// Population (1/N) covariance of 3-vectors about their mean.
pub fn population_covariance(points: &[[f64; 3]]) -> ([f64; 3], Matrix3<f64>) {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for i in 0..3 {
            mean[i] += p[i];
        }
    }
    mean = mean.map(|m| m / n);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    (mean, cov / n)
}

pub fn compute_prototype_stats(
    sizes: &[SizeTriple],
    features: &[&[f64]],
    class_id: usize,
    eps: Epsilon,
    floor: f64,
) -> Result<Prototype> {
    if sizes.is_empty() {
        return Err(PrioError::validation("prototype members", "empty member set"));
    }
    if features.len() != sizes.len() {
        return Err(PrioError::Dimension {
            what: "prototype member features",
            expected: sizes.len(),
            got: features.len(),
        });
    }
    let dim = features[0].len();
    let n = sizes.len() as f64;

    let lin: Vec<[f64; 3]> = sizes.iter().map(SizeTriple::as_array).collect();
    let (mu_lin, lin_cov) = population_covariance(&lin);
    let sigma_lin = [0, 1, 2].map(|i| lin_cov[(i, i)].max(0.0).sqrt());

    let logs: Vec<[f64; 3]> = sizes.iter().map(|s| to_log(s, eps).as_array()).collect();
    let (mu_log, log_cov) = population_covariance(&logs);
    let (v_log, eta) = canonical_eigen(&log_cov, floor);

    let mut centroid = vec![0.0; dim];
    for f in features {
        if f.len() != dim {
            return Err(PrioError::Dimension {
                what: "member feature",
                expected: dim,
                got: f.len(),
            });
        }
        for (c, v) in centroid.iter_mut().zip(f.iter()) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);

    Ok(Prototype {
        class_id,
        visual_centroid: centroid,
        mu_lin,
        sigma_lin,
        mu_log,
        v_log,
        eta,
        count: sizes.len(),
    })
}
