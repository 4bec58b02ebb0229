//! Triplet-based metric learning over a batch of embeddings: anchor/positive
//! pairing, semi-hard negative mining, and the margin hinge loss with its
//! analytic gradient.
//!
//! Distances are squared Euclidean on ℓ2-normalized embeddings, which is
//! monotone in cosine similarity and therefore consistent with the
//! assignment geometry.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// A batch of embeddings with instance labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B × D`, one ℓ2-normalized embedding per row.
    pub embeddings: Matrix,
    /// Instance identifier per row.
    pub labels: Vec<u64>,
}

impl Batch {
    pub fn new(embeddings: Matrix, labels: Vec<u64>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::shape("batch", "one label per embedding row"));
        }
        Ok(Batch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One (anchor, positive, negative) index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// The output of mining: triplets plus how many anchors had to be skipped
/// for lack of a positive or a negative.
#[derive(Debug, Clone, Default)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub skipped_anchors: usize,
}

/// Deterministic anchor/positive pairing: within each label group the
/// sample indices are shuffled by the seed and paired off consecutively.
///
/// Every selected label must occur at least twice; odd leftovers within a
/// group are dropped.
pub fn build_pairs(labels: &[u64], seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    for (l, idxs) in &groups {
        if idxs.len() < 2 {
            return Err(Error::input(
                "build_pairs",
                format!("label {l} has fewer than 2 samples"),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for idxs in groups.values() {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks_exact(2) {
            pairs.push((chunk[0], chunk[1]));
        }
    }
    Ok(pairs)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Full `B × B` squared-distance matrix, computed in a fixed order.
fn distance_matrix(batch: &Batch) -> Matrix {
    let b = batch.len();
    let mut dist = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            dist.set(i, j, sq_dist(batch.embeddings.row(i), batch.embeddings.row(j)));
        }
    }
    dist
}

/// Semi-hard negative mining.
///
/// For every ordered same-label pair `(a, p)` with `a ≠ p`, selects the
/// negative `n` minimizing `‖a−n‖²` subject to `‖a−n‖² > ‖a−p‖²`. When no
/// such negative exists, falls back to the negative with the largest
/// `‖a−n‖²` (the easiest one). Ties break to the lowest index. Anchors
/// whose label has no second sample, or batches with no negatives at all,
/// contribute to `skipped_anchors`.
pub fn mine_semi_hard(batch: &Batch, _margin: f64) -> TripletSet {
    let b = batch.len();
    let dist = distance_matrix(batch);
    let mut out = TripletSet::default();
    for a in 0..b {
        let mut has_positive = false;
        for p in 0..b {
            if p == a || batch.labels[p] != batch.labels[a] {
                continue;
            }
            has_positive = true;
            let d_ap = dist.get(a, p);
            let mut semi_hard: Option<(usize, f64)> = None;
            let mut easiest: Option<(usize, f64)> = None;
            for n in 0..b {
                if batch.labels[n] == batch.labels[a] {
                    continue;
                }
                let d_an = dist.get(a, n);
                if d_an > d_ap {
                    let better = match semi_hard {
                        None => true,
                        Some((_, best)) => d_an < best,
                    };
                    if better {
                        semi_hard = Some((n, d_an));
                    }
                }
                let farther = match easiest {
                    None => true,
                    Some((_, best)) => d_an > best,
                };
                if farther {
                    easiest = Some((n, d_an));
                }
            }
            match semi_hard.or(easiest) {
                Some((n, _)) => out.triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: n,
                }),
                None => out.skipped_anchors += 1,
            }
        }
        if !has_positive {
            out.skipped_anchors += 1;
        }
    }
    out
}

/// Mean margin hinge over the triplets,
/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)`, with its analytic gradient with
/// respect to the embeddings. The subgradient at the hinge kink is zero.
///
/// An empty triplet set yields loss 0 and a zero gradient.
pub fn triplet_loss(batch: &Batch, triplets: &TripletSet, margin: f64) -> Result<(f64, Matrix)> {
    if !(margin > 0.0) {
        return Err(Error::input("triplet_loss", "margin must be positive"));
    }
    let mut grad = Matrix::zeros(batch.len().max(1), batch.embeddings.cols().max(1));
    if triplets.triplets.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / triplets.triplets.len() as f64;
    let mut loss = 0.0;
    for t in &triplets.triplets {
        let a = batch.embeddings.row(t.anchor).to_vec();
        let p = batch.embeddings.row(t.positive).to_vec();
        let n = batch.embeddings.row(t.negative).to_vec();
        let activation = sq_dist(&a, &p) - sq_dist(&a, &n) + margin;
        if activation > 0.0 {
            loss += activation * inv;
            let dim = a.len();
            let ga = grad.row_mut(t.anchor);
            for k in 0..dim {
                ga[k] += 2.0 * (n[k] - p[k]) * inv;
            }
            let gp = grad.row_mut(t.positive);
            for k in 0..dim {
                gp[k] += 2.0 * (p[k] - a[k]) * inv;
            }
            let gn = grad.row_mut(t.negative);
            for k in 0..dim {
                gn[k] += 2.0 * (a[k] - n[k]) * inv;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch_from_rows(rows: &[Vec<f64>], labels: &[u64]) -> Batch {
        Batch::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn loss_zero_when_hinge_inactive() {
        // a = p, ‖a−n‖² = 1, margin 0.1: activation = 0 − 1 + 0.1 < 0
        let b = batch_from_rows(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            &[1, 1, 2],
        );
        let ts = TripletSet {
            triplets: vec![Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            }],
            skipped_anchors: 0,
        };
        let (loss, grad) = triplet_loss(&b, &ts, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn degenerate_collapse_gives_margin() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], &[1, 1, 2]);
        let ts = TripletSet {
            triplets: vec![Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            }],
            skipped_anchors: 0,
        };
        let (loss, _) = triplet_loss(&b, &ts, 0.1).unwrap();
        assert!((loss - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_distances() {
        // ‖a−p‖² = 2, ‖a−n‖² = 4, margin 0.1 -> max(0, 2−4+0.1) = 0
        let b = batch_from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            &[1, 1, 2],
        );
        let ts = TripletSet {
            triplets: vec![Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            }],
            skipped_anchors: 0,
        };
        let (loss, _) = triplet_loss(&b, &ts, 0.1).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn empty_triplet_set_returns_zeros() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 2]);
        let (loss, grad) = triplet_loss(&b, &TripletSet::default(), 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences_away_from_kinks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (bsz, dim, margin) = (8usize, 5usize, 0.1f64);
        'outer: for trial in 0..10 {
            let mut rows = Vec::new();
            for _ in 0..bsz {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                crate::linalg::l2_normalize_in_place(&mut v, 1e-12);
                rows.push(v);
            }
            let labels: Vec<u64> = (0..bsz as u64 / 2).flat_map(|l| [l, l]).collect();
            let batch = batch_from_rows(&rows, &labels);
            let ts = mine_semi_hard(&batch, margin);
            // skip trials that sit near a hinge kink
            for t in &ts.triplets {
                let act = sq_dist(&rows[t.anchor], &rows[t.positive])
                    - sq_dist(&rows[t.anchor], &rows[t.negative])
                    + margin;
                if act.abs() < 1e-3 {
                    continue 'outer;
                }
            }
            let (_, grad) = triplet_loss(&batch, &ts, margin).unwrap();
            let h = 1e-6;
            for i in 0..bsz {
                for k in 0..dim {
                    let mut eval = |delta: f64| {
                        let mut rows2 = rows.clone();
                        rows2[i][k] += delta;
                        let b2 = batch_from_rows(&rows2, &labels);
                        triplet_loss(&b2, &ts, margin).unwrap().0
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let analytic = grad.get(i, k);
                    let err = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(err < 1e-6, "trial {trial} entry ({i},{k}): {err}");
                }
            }
        }
    }

    #[test]
    fn semi_hard_prefers_in_band_negative() {
        // positive at distance²=2; negatives at 2.5 (in band) and 4 (outside)
        let b = batch_from_rows(
            &[
                vec![0.0, 0.0],
                vec![2.0f64.sqrt(), 0.0],
                vec![2.5f64.sqrt(), 0.0],
                vec![2.0, 0.0],
            ],
            &[1, 1, 2, 3],
        );
        let ts = mine_semi_hard(&b, 1.0);
        let t = ts
            .triplets
            .iter()
            .find(|t| t.anchor == 0 && t.positive == 1)
            .unwrap();
        assert_eq!(t.negative, 2);
    }

    #[test]
    fn all_near_negatives_fall_back_to_easiest() {
        // both negatives closer than the positive; easiest (farthest) wins
        let b = batch_from_rows(
            &[
                vec![0.0, 0.0],
                vec![3.0, 0.0],
                vec![1.0, 0.0],
                vec![2.0, 0.0],
            ],
            &[1, 1, 2, 3],
        );
        let ts = mine_semi_hard(&b, 0.1);
        let t = ts
            .triplets
            .iter()
            .find(|t| t.anchor == 0 && t.positive == 1)
            .unwrap();
        assert_eq!(t.negative, 3);
    }

    #[test]
    fn mining_matches_exhaustive_scan_on_crafted_batch() {
        let rows = vec![
            vec![0.00, 0.10],
            vec![0.05, 0.00],
            vec![0.90, 0.10],
            vec![1.00, 0.00],
            vec![0.50, 0.60],
            vec![0.45, 0.55],
        ];
        let labels = vec![1, 1, 2, 2, 3, 3];
        let b = batch_from_rows(&rows, &labels);
        let ts = mine_semi_hard(&b, 0.1);
        // ordered same-label pairs: 6 anchors
        assert_eq!(ts.triplets.len(), 6);
        for t in &ts.triplets {
            let d_ap = sq_dist(&rows[t.anchor], &rows[t.positive]);
            let d_sel = sq_dist(&rows[t.anchor], &rows[t.negative]);
            // exhaustive scan for the expected pick
            let mut want: Option<(usize, f64)> = None;
            let mut fallback: Option<(usize, f64)> = None;
            for n in 0..rows.len() {
                if labels[n] == labels[t.anchor] {
                    continue;
                }
                let d = sq_dist(&rows[t.anchor], &rows[n]);
                if d > d_ap && want.map_or(true, |(_, b)| d < b) {
                    want = Some((n, d));
                }
                if fallback.map_or(true, |(_, b)| d > b) {
                    fallback = Some((n, d));
                }
            }
            let (n_want, d_want) = want.or(fallback).unwrap();
            assert_eq!(t.negative, n_want);
            assert_eq!(d_sel, d_want);
        }
    }

    #[test]
    fn mining_is_invariant_to_orthogonal_rotation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (bsz, dim) = (10usize, 6usize);
        let mut rows = Vec::new();
        for _ in 0..bsz {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            crate::linalg::l2_normalize_in_place(&mut v, 1e-12);
            rows.push(v);
        }
        let labels: Vec<u64> = (0..bsz as u64 / 2).flat_map(|l| [l, l]).collect();
        let before = mine_semi_hard(&batch_from_rows(&rows, &labels), 0.1);

        // rotate by a product of random Givens rotations
        let mut rotated = rows.clone();
        for _ in 0..20 {
            let i = rng.random_range(0..dim);
            let mut j = rng.random_range(0..dim);
            if i == j {
                j = (j + 1) % dim;
            }
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            for row in rotated.iter_mut() {
                let (a, b) = (row[i], row[j]);
                row[i] = c * a - s * b;
                row[j] = s * a + c * b;
            }
        }
        let after = mine_semi_hard(&batch_from_rows(&rotated, &labels), 0.1);
        assert_eq!(before.triplets, after.triplets);
    }

    #[test]
    fn pairs_cover_simple_labels() {
        let pairs = build_pairs(&[1, 1, 2, 2], 5).unwrap();
        assert_eq!(pairs.len(), 2);
        let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn four_same_label_samples_give_two_disjoint_pairs() {
        let pairs = build_pairs(&[1, 1, 1, 1], 9).unwrap();
        assert_eq!(pairs.len(), 2);
        let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pair_partition_is_valid_across_seeds() {
        let labels: Vec<u64> = (0..64u64).flat_map(|l| [l, l]).collect();
        let p1 = build_pairs(&labels, 1).unwrap();
        let p2 = build_pairs(&labels, 2).unwrap();
        assert_ne!(p1, p2); // different permutations
        for pairs in [&p1, &p2] {
            assert_eq!(pairs.len(), 64);
            let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..128).collect::<Vec<_>>());
            for &(a, b) in *pairs {
                assert_eq!(labels[a], labels[b]);
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn build_pairs_rejects_singleton_labels() {
        assert!(build_pairs(&[1, 1, 2], 0).is_err());
    }

    #[test]
    fn loss_nonnegative_and_zero_iff_separated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| {
                    let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    crate::linalg::l2_normalize_in_place(&mut v, 1e-12);
                    v
                })
                .collect();
            let labels = vec![1, 1, 2, 2, 3, 3];
            let batch = batch_from_rows(&rows, &labels);
            let ts = mine_semi_hard(&batch, 0.1);
            let (loss, _) = triplet_loss(&batch, &ts, 0.1).unwrap();
            assert!(loss >= 0.0);
            let all_satisfied = ts.triplets.iter().all(|t| {
                sq_dist(&rows[t.anchor], &rows[t.positive]) + 0.1
                    <= sq_dist(&rows[t.anchor], &rows[t.negative])
            });
            assert_eq!(loss == 0.0, all_satisfied);
        }
    }
}
