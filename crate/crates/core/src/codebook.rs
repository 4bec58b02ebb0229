//! Codebook maintenance and the assignment function `h(x) ∈ R^N`.
//!
//! A codebook is a set of `N` unit-norm codewords in the reduced feature
//! space. Soft assignment is a temperature-scaled softmax over cosine
//! similarities; hard assignment is a one-hot at the most similar codeword.
//! Soft mode is differentiable and used in training; hard mode is
//! forward-only and serves the oracle paths.

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, softmax_in_place, Matrix, Vector, DEFAULT_EPS};
use crate::pooling::FeatureSet;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Default softmax temperature. Cosines live in `[-1, 1]`, so an unscaled
/// softmax over them is nearly uniform; scores are divided by this value.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Default number of Lloyd refinement passes in [`init_codebook`].
pub const DEFAULT_LLOYD_ITERS: usize = 10;

/// How features are assigned to codewords.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignMode {
    /// Softmax over `cos(x, c_j) / temperature`.
    Soft { temperature: f64 },
    /// One-hot at the argmax cosine similarity; ties break to the lowest index.
    Hard,
}

/// A set of `N` unit-norm codewords of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    words: Matrix, // N x d, one codeword per row
    mode: AssignMode,
}

impl Codebook {
    /// Wraps `words` (one codeword per row), normalizing each row.
    pub fn new(words: Matrix, mode: AssignMode) -> Result<Self> {
        if let AssignMode::Soft { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(Error::input("codebook", "temperature must be positive"));
            }
        }
        let mut cb = Codebook { words, mode };
        cb.renormalize();
        Ok(cb)
    }

    pub fn n_words(&self) -> usize {
        self.words.rows()
    }

    pub fn dim(&self) -> usize {
        self.words.cols()
    }

    pub fn mode(&self) -> AssignMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: AssignMode) {
        self.mode = mode;
    }

    pub fn word(&self, j: usize) -> &[f64] {
        self.words.row(j)
    }

    pub fn words(&self) -> &Matrix {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut Matrix {
        &mut self.words
    }

    /// Rescales every codeword back to unit norm. Called after each
    /// optimizer step so the cosine geometry stays fixed.
    pub fn renormalize(&mut self) {
        let n = self.words.rows();
        for j in 0..n {
            linalg::l2_normalize_in_place(self.words.row_mut(j), DEFAULT_EPS);
        }
    }

    /// Dispatches to [`soft_assign`] or [`hard_assign`] according to the mode.
    pub fn assign(&self, x: &Vector) -> Result<Assignment> {
        match self.mode {
            AssignMode::Soft { .. } => soft_assign(x, self),
            AssignMode::Hard => hard_assign(x, self),
        }
    }
}

/// The weights of one feature over the codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub weights: Vector,
}

fn check_dim(op: &'static str, x: &Vector, cb: &Codebook) -> Result<()> {
    if x.dim() != cb.dim() {
        return Err(Error::shape(
            op,
            format!("feature dim {} vs codebook dim {}", x.dim(), cb.dim()),
        ));
    }
    Ok(())
}

/// Cosine similarities of `x` against every codeword, with eps-guarded norms.
/// Also returns the guarded norm of `x` (used by the gradient path).
pub(crate) fn cosine_scores(x: &Vector, cb: &Codebook) -> (Vec<f64>, f64) {
    let nx = norm2(x.as_slice()).max(DEFAULT_EPS);
    let mut cos = vec![0.0; cb.n_words()];
    for j in 0..cb.n_words() {
        let w = cb.word(j);
        let nc = norm2(w).max(DEFAULT_EPS);
        let denom = nx * nc;
        linalg::ops_count::add(1);
        cos[j] = dot(x.as_slice(), w) / denom;
    }
    (cos, nx)
}

/// Soft assignment: `softmax(cos(x, c_j) / τ)`.
pub fn soft_assign(x: &Vector, cb: &Codebook) -> Result<Assignment> {
    check_dim("soft_assign", x, cb)?;
    let AssignMode::Soft { temperature } = cb.mode() else {
        return Err(Error::Unsupported {
            op: "soft_assign",
            detail: "codebook is in hard-assignment mode".into(),
        });
    };
    let (mut scores, _) = cosine_scores(x, cb);
    linalg::ops_count::add(scores.len() as u64);
    for s in scores.iter_mut() {
        *s /= temperature;
    }
    softmax_in_place(&mut scores);
    Ok(Assignment {
        weights: Vector::new(scores),
    })
}

/// Hard assignment: one-hot at the argmax cosine similarity, ties broken
/// by the lowest index.
pub fn hard_assign(x: &Vector, cb: &Codebook) -> Result<Assignment> {
    check_dim("hard_assign", x, cb)?;
    let (scores, _) = cosine_scores(x, cb);
    let mut best = 0;
    for j in 1..scores.len() {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    let mut weights = Vector::zeros(cb.n_words());
    weights[best] = 1.0;
    Ok(Assignment { weights })
}

/// Builds a codebook from pooled feature columns: k-means++ seeding on the
/// ℓ2-normalized columns, a fixed number of Lloyd passes, and a final
/// re-normalization of each centroid. Deterministic given the seed.
pub fn init_codebook(
    features: &[FeatureSet],
    n_words: usize,
    mode: AssignMode,
    lloyd_iters: usize,
    seed: u64,
) -> Result<Codebook> {
    if n_words == 0 {
        return Err(Error::input("init_codebook", "n_words must be positive"));
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    for fs in features {
        for m in 0..fs.count() {
            let mut col = fs.columns().col(m);
            linalg::l2_normalize_in_place(&mut col, DEFAULT_EPS);
            points.push(col);
        }
    }
    if points.len() < n_words {
        return Err(Error::input(
            "init_codebook",
            format!("{} feature columns for {} codewords", points.len(), n_words),
        ));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, the rest weighted by the
    // squared distance to the nearest centroid chosen so far.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_words);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2 = vec![0.0f64; points.len()];
    while centroids.len() < n_words {
        let mut sum = 0.0;
        for (p, slot) in points.iter().zip(d2.iter_mut()) {
            let mut best = f64::MAX;
            for c in &centroids {
                let d = sq_dist(p, c);
                if d < best {
                    best = d;
                }
            }
            *slot = best;
            sum += best;
        }
        if sum <= 0.0 {
            // all remaining points coincide with a centroid; fall back to
            // uniform choice so we still return n_words rows
            centroids.push(points[rng.random_range(0..points.len())].clone());
            continue;
        }
        let idx = WeightedIndex::new(&d2)
            .map_err(|e| Error::input("init_codebook", e.to_string()))?
            .sample(&mut rng);
        centroids.push(points[idx].clone());
    }

    // Lloyd refinement on the unit sphere: mean then re-normalize.
    let mut owner = vec![0usize; points.len()];
    for _ in 0..lloyd_iters {
        for (p, o) in points.iter().zip(owner.iter_mut()) {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (c_idx, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = c_idx;
                }
            }
            *o = best;
        }
        let mut sums = vec![vec![0.0f64; dim]; n_words];
        let mut counts = vec![0usize; n_words];
        for (p, &o) in points.iter().zip(owner.iter()) {
            for (s, &v) in sums[o].iter_mut().zip(p.iter()) {
                *s += v;
            }
            counts[o] += 1;
        }
        for (c_idx, c) in centroids.iter_mut().enumerate() {
            if counts[c_idx] == 0 {
                continue; // empty cluster keeps its previous codeword
            }
            let inv = 1.0 / counts[c_idx] as f64;
            for (slot, &s) in c.iter_mut().zip(sums[c_idx].iter()) {
                *slot = s * inv;
            }
            linalg::l2_normalize_in_place(c, DEFAULT_EPS);
        }
    }

    let mut words = Matrix::zeros(n_words, dim);
    for (j, c) in centroids.iter().enumerate() {
        words.row_mut(j).copy_from_slice(c);
    }
    Codebook::new(words, mode)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}
