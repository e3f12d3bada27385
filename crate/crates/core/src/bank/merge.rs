use crate::error::Result;
use crate::size_space::{Epsilon, SizeTriple};

use super::stats::{compute_prototype_stats, Prototype};

/// One bank-building instance: its key, size and (unit-normalised) feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub key: u64,
    pub size: SizeTriple,
    pub feature: Vec<f64>,
}

pub fn stats_from_members(
    members: &[Member],
    class_id: usize,
    eps: Epsilon,
    floor: f64,
) -> Result<Prototype> {
    let sizes: Vec<SizeTriple> = members.iter().map(|m| m.size).collect();
    let feats: Vec<&[f64]> = members.iter().map(|m| m.feature.as_slice()).collect();
    compute_prototype_stats(&sizes, &feats, class_id, eps, floor)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Folds under-supported prototypes of one class into their most similar
/// retained prototype, recomputing the recipient from the pooled members.
///
/// `members[i]` holds the instances behind `protos[i]`. If no prototype reaches
/// `min_support`, everything pools into a single prototype.
pub fn merge_small_clusters(
    mut protos: Vec<Prototype>,
    mut members: Vec<Vec<Member>>,
    min_support: usize,
    eps: Epsilon,
    floor: f64,
) -> Result<(Vec<Prototype>, Vec<Vec<Member>>)> {
    assert_eq!(protos.len(), members.len(), "one member list per prototype");
    loop {
        let small = protos
            .iter()
            .enumerate()
            .filter(|(_, p)| p.count < min_support)
            .min_by_key(|(i, p)| (p.count, *i))
            .map(|(i, _)| i);
        let Some(small) = small else {
            return Ok((protos, members));
        };
        let recipient = protos
            .iter()
            .enumerate()
            .filter(|(_, p)| p.count >= min_support)
            .map(|(i, p)| (i, cosine(&protos[small].visual_centroid, &p.visual_centroid)))
            .fold(None::<(usize, f64)>, |best, (i, s)| match best {
                Some((_, bs)) if s <= bs => best,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i);
        let Some(recipient) = recipient else {
            let class_id = protos[0].class_id;
            let pooled: Vec<Member> = members.into_iter().flatten().collect();
            let proto = stats_from_members(&pooled, class_id, eps, floor)?;
            return Ok((vec![proto], vec![pooled]));
        };
        let moved = std::mem::take(&mut members[small]);
        members[recipient].extend(moved);
        protos[recipient] =
            stats_from_members(&members[recipient], protos[recipient].class_id, eps, floor)?;
        protos.remove(small);
        members.remove(small);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(key: u64, s: [f64; 3], f: &[f64]) -> Member {
        Member {
            key,
            size: SizeTriple::from_array(s).unwrap(),
            feature: f.to_vec(),
        }
    }

    fn build(groups: Vec<Vec<Member>>) -> (Vec<Prototype>, Vec<Vec<Member>>) {
        let protos = groups
            .iter()
            .map(|g| stats_from_members(g, 0, Epsilon::default(), 1e-4).unwrap())
            .collect();
        (protos, groups)
    }

    #[test]
    fn all_supported_is_identity() {
        let (p, m) = build(vec![
            vec![member(1, [1.0, 1.0, 1.0], &[1.0, 0.0]), member(2, [1.1, 1.0, 1.0], &[1.0, 0.0])],
            vec![member(3, [2.0, 2.0, 2.0], &[0.0, 1.0]), member(4, [2.1, 2.0, 2.0], &[0.0, 1.0])],
        ]);
        let (p2, m2) =
            merge_small_clusters(p.clone(), m.clone(), 2, Epsilon::default(), 1e-4).unwrap();
        assert_eq!(p2, p);
        assert_eq!(m2, m);
    }

    #[test]
    fn small_group_folds_into_pooled_stats() {
        let big = vec![
            member(1, [1.5, 1.6, 3.9], &[1.0, 0.1]),
            member(2, [1.4, 1.7, 4.1], &[0.9, 0.0]),
            member(3, [1.6, 1.5, 3.7], &[1.0, -0.1]),
        ];
        let small = vec![member(4, [1.9, 1.9, 4.8], &[0.8, 0.3])];
        let (p, m) = build(vec![big.clone(), small.clone()]);
        let (p2, m2) = merge_small_clusters(p, m, 2, Epsilon::default(), 1e-4).unwrap();
        assert_eq!(p2.len(), 1);
        let union: Vec<Member> = big.into_iter().chain(small).collect();
        let oracle = stats_from_members(&union, 0, Epsilon::default(), 1e-4).unwrap();
        for i in 0..3 {
            assert!((p2[0].mu_lin[i] - oracle.mu_lin[i]).abs() <= 1e-12);
            assert!((p2[0].sigma_lin[i] - oracle.sigma_lin[i]).abs() <= 1e-12);
            assert!((p2[0].mu_log[i] - oracle.mu_log[i]).abs() <= 1e-12);
            assert!((p2[0].eta[i] - oracle.eta[i]).abs() <= 1e-12);
        }
        assert_eq!(p2[0].count, 4);
        assert_eq!(m2[0].len(), 4);
    }

    #[test]
    fn recipient_is_most_similar_retained() {
        let (p, m) = build(vec![
            vec![member(1, [1.0, 1.0, 1.0], &[1.0, 0.0]); 3],
            vec![member(2, [2.0, 2.0, 2.0], &[0.0, 1.0]); 3],
            vec![member(3, [1.5, 1.5, 1.5], &[0.1, 1.0])],
        ]);
        let (p2, m2) = merge_small_clusters(p, m, 2, Epsilon::default(), 1e-4).unwrap();
        assert_eq!(p2.len(), 2);
        assert_eq!(p2[0].count, 3);
        assert_eq!(p2[1].count, 4);
        assert!(m2[1].iter().any(|x| x.key == 3));
    }

    #[test]
    fn everything_small_pools_into_one() {
        let (p, m) = build(vec![
            vec![member(1, [1.0, 1.0, 1.0], &[1.0])],
            vec![member(2, [2.0, 2.0, 2.0], &[1.0])],
            vec![member(3, [3.0, 3.0, 3.0], &[1.0])],
        ]);
        let (p2, m2) = merge_small_clusters(p, m, 5, Epsilon::default(), 1e-4).unwrap();
        assert_eq!(p2.len(), 1);
        assert_eq!(p2[0].count, 3);
        assert_eq!(m2[0].len(), 3);
    }
}
