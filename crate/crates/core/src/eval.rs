//! Retrieval evaluation: exact nearest-neighbor Recall@K.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Recall@K scores for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// K → mean recall over queries, monotone non-decreasing in K.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// True when a requested K exceeded the gallery and was clamped.
    pub clamped: bool,
}

/// Exact Recall@K by brute-force scan of squared Euclidean distances.
///
/// A query scores 1 at cut-off K if any of its K nearest gallery items
/// shares its instance label. Ties break by gallery index. With
/// `exclude_self`, gallery item `i` is skipped for query `i` (use when the
/// query set is the gallery). Ks larger than the usable gallery are
/// clamped and flagged.
pub fn recall_at_k(
    queries: &Matrix,
    query_labels: &[u64],
    gallery: &Matrix,
    gallery_labels: &[u64],
    ks: &[usize],
    exclude_self: bool,
) -> Result<EvalResult> {
    if gallery.rows() == 0 {
        return Err(Error::input("recall_at_k", "empty gallery"));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::shape("recall_at_k", "embedding dims differ"));
    }
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::shape("recall_at_k", "labels must match embeddings"));
    }
    if ks.is_empty() {
        return Err(Error::input("recall_at_k", "no K values requested"));
    }
    let usable = if exclude_self {
        gallery.rows().saturating_sub(1)
    } else {
        gallery.rows()
    };
    if usable == 0 {
        return Err(Error::input("recall_at_k", "gallery has no usable items"));
    }
    let mut clamped = false;
    let ks_eff: Vec<usize> = ks
        .iter()
        .map(|&k| {
            if k > usable {
                clamped = true;
                usable
            } else {
                k
            }
        })
        .collect();
    let max_k = *ks_eff.iter().max().expect("nonempty ks");

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(gallery.rows());
    for q in 0..queries.rows() {
        order.clear();
        let qrow = queries.row(q);
        for g in 0..gallery.rows() {
            if exclude_self && g == q {
                continue;
            }
            let grow = gallery.row(g);
            let mut dist = 0.0;
            for k in 0..qrow.len() {
                let dd = qrow[k] - grow[k];
                dist += dd * dd;
            }
            order.push((dist, g));
        }
        // deterministic: ties broken by gallery index
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &order[..max_k.min(order.len())];
        for (&k_req, &k_eff) in ks.iter().zip(&ks_eff) {
            let hit = top[..k_eff]
                .iter()
                .any(|&(_, g)| gallery_labels[g] == query_labels[q]);
            if hit {
                *hits.get_mut(&k_req).expect("key present") += 1;
            }
        }
    }
    let n_queries = queries.rows();
    let recall_at = hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / n_queries as f64))
        .collect();
    Ok(EvalResult {
        recall_at,
        n_queries,
        clamped,
    })
}
