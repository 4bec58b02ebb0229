//! Second-order pooling kernels, from the materialized oracle paths to the
//! factorized forms used for training.
//!
//! All kernels pool a set of local feature columns by summation. The ladder,
//! in increasing order of structure:
//!
//! - [`bp_full`] — raw bilinear pooling `y = Σ_m x_m ⊗ x_m = vec(X Xᵀ)`,
//!   a `d²` vector.
//! - [`project_so`] — a linear projection of `y` to `D` dimensions,
//!   `z_i = ⟨w_i, y⟩` with `w_i ∈ R^{d²}`.
//! - [`rank1_pool`] — enforces `w_i = u_i ⊗ v_i`, giving
//!   `z_i = Σ_m ⟨u_i, x_m⟩⟨v_i, x_m⟩` without ever materializing `d²`.
//! - [`codebook_bp_naive`] — bilinear pooling of `h(x) ⊗ x` where `h` is a
//!   codebook assignment; the materialized oracle path, guarded because its
//!   weight has `N²d²` rows.
//! - [`jcf_pool`] — the factorized codebook form
//!   `z_i(x) = (h(x)ᵀ U_iᵀ x)(h(x)ᵀ V_iᵀ x)` with one `d×N` projector pair
//!   per output dimension.
//! - [`jcf_shared_pool`] — `R` shared projector pairs recombined across the
//!   `N` codewords by `A, B ∈ R^{N×R}`:
//!   `z_i(x) = (h(x)ᵀ A Ũ_iᵀ x)(h(x)ᵀ B Ṽ_iᵀ x)`.
//!
//! Every efficient kernel is checked against its materialized oracle in the
//! verification suite; equivalences hold to ~1e-12 relative error.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, kron, l2_normalize_in_place, Matrix, Vector, DEFAULT_EPS};

/// Hard cap on `N²d²` for the materialized codebook path.
pub const NAIVE_CAPACITY: usize = 1_000_000;

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// A set of `M` local `d`-dimensional feature columns for one sample,
/// stored as a `d×M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    columns: Matrix,
}

impl FeatureSet {
    pub fn new(columns: Matrix) -> Result<Self> {
        if !columns.is_finite() {
            return Err(Error::NonFinite {
                tensor: "feature_set".into(),
            });
        }
        Ok(FeatureSet { columns })
    }

    /// Builds a feature set from individual columns.
    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::input("feature_set", "no feature columns"));
        }
        let d = cols[0].len();
        let mut m = Matrix::zeros(d, cols.len());
        for (j, c) in cols.iter().enumerate() {
            if c.len() != d {
                return Err(Error::shape("feature_set", "ragged columns"));
            }
            m.set_col(j, c);
        }
        FeatureSet::new(m)
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.columns.rows()
    }

    /// Number of locations `M`.
    pub fn count(&self) -> usize {
        self.columns.cols()
    }

    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut Matrix {
        &mut self.columns
    }

    /// Concatenates the locations of `self` and `other`.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if self.dim() != other.dim() {
            return Err(Error::shape("feature_set", "dim mismatch in concat"));
        }
        let mut m = Matrix::zeros(self.dim(), self.count() + other.count());
        for j in 0..self.count() {
            m.set_col(j, &self.columns.col(j));
        }
        for j in 0..other.count() {
            m.set_col(self.count() + j, &other.columns.col(j));
        }
        FeatureSet::new(m)
    }
}

/// Unconstrained projection from the `d²` bilinear space down to `D`
/// dimensions; one column of `w` per output dimension.
#[derive(Debug, Clone)]
pub struct FullProjection {
    /// `d² × D`.
    pub w: Matrix,
}

impl FullProjection {
    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Rank-one factorization of a full projection: row `i` of `u` and `v`
/// are the factors of output dimension `i`.
#[derive(Debug, Clone)]
pub struct Rank1Params {
    /// `D × d`.
    pub u: Matrix,
    /// `D × d`.
    pub v: Matrix,
}

/// A bank of projector vectors: for each of `out_dim` output dimensions,
/// `n_proj` projectors of length `dim`, each stored contiguously.
///
/// Logically a `D × d × P` tensor; `proj(i, p)` is the `d`-vector for output
/// dimension `i`, projector `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    out_dim: usize,
    n_proj: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ProjectorSet {
    pub fn zeros(out_dim: usize, dim: usize, n_proj: usize) -> Self {
        assert!(out_dim > 0 && dim > 0 && n_proj > 0);
        ProjectorSet {
            out_dim,
            n_proj,
            dim,
            data: vec![0.0; out_dim * n_proj * dim],
        }
    }

    pub fn from_vec(out_dim: usize, dim: usize, n_proj: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != out_dim * n_proj * dim {
            return Err(Error::shape(
                "projector_set",
                format!(
                    "expected {} entries for {}x{}x{}, got {}",
                    out_dim * n_proj * dim,
                    out_dim,
                    dim,
                    n_proj,
                    data.len()
                ),
            ));
        }
        Ok(ProjectorSet {
            out_dim,
            n_proj,
            dim,
            data,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn n_proj(&self) -> usize {
        self.n_proj
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn proj(&self, i: usize, p: usize) -> &[f64] {
        let base = (i * self.n_proj + p) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn proj_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let base = (i * self.n_proj + p) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The `d × P` projector matrix for output dimension `i`, materialized.
    pub fn matrix(&self, i: usize) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.n_proj);
        for p in 0..self.n_proj {
            let col = self.proj(i, p);
            for k in 0..self.dim {
                m.set(k, p, col[k]);
            }
        }
        m
    }
}

/// Per-codeword projection parameters: `U_i, V_i ∈ R^{d×N}` for each output
/// dimension, with projector `j` tied to codeword `j`.
#[derive(Debug, Clone)]
pub struct JcfParams {
    pub u_set: ProjectorSet,
    pub v_set: ProjectorSet,
}

/// Shared-projector parameters: `R` base projector pairs per output
/// dimension plus the recombination matrices `A, B ∈ R^{N×R}` that generate
/// each codeword's effective projection.
#[derive(Debug, Clone)]
pub struct JcfSharedParams {
    pub u_shared: ProjectorSet,
    pub v_shared: ProjectorSet,
    /// `N × R`.
    pub a: Matrix,
    /// `N × R`.
    pub b: Matrix,
}

impl JcfSharedParams {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn n_words(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.u_shared.out_dim()
    }

    /// Materializes the per-codeword parameters `U_i = Ũ_i Aᵀ`,
    /// `V_i = Ṽ_i Bᵀ`. Oracle path for the shared form.
    pub fn materialize(&self) -> Result<JcfParams> {
        let d = self.u_shared.dim();
        let n = self.n_words();
        let dd = self.out_dim();
        let mut u_set = ProjectorSet::zeros(dd, d, n);
        let mut v_set = ProjectorSet::zeros(dd, d, n);
        for i in 0..dd {
            let ui = linalg::matmul(&self.u_shared.matrix(i), &self.a.transpose())?;
            let vi = linalg::matmul(&self.v_shared.matrix(i), &self.b.transpose())?;
            for j in 0..n {
                u_set.proj_mut(i, j).copy_from_slice(&ui.col(j));
                v_set.proj_mut(i, j).copy_from_slice(&vi.col(j));
            }
        }
        Ok(JcfParams { u_set, v_set })
    }
}

/// A pooled `D`-dimensional output embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub values: Vector,
}

impl Representation {
    pub fn dim(&self) -> usize {
        self.values.dim()
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

fn require_nonempty(op: &'static str, xs: &FeatureSet) -> Result<()> {
    if xs.count() == 0 {
        return Err(Error::input(op, "empty feature set"));
    }
    Ok(())
}

/// Full bilinear pooling: `Σ_m x_m ⊗ x_m`, a `d²` vector equal to
/// `vec(X Xᵀ)`.
pub fn bp_full(xs: &FeatureSet) -> Result<Vector> {
    require_nonempty("bp_full", xs)?;
    let d = xs.dim();
    let mut acc = vec![0.0; d * d];
    let mut x = vec![0.0; d];
    linalg::ops_count::add((xs.count() * d * d) as u64);
    for m in 0..xs.count() {
        xs.columns().col_into(m, &mut x);
        for i in 0..d {
            let xi = x[i];
            let row = &mut acc[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += xi * x[j];
            }
        }
    }
    Ok(Vector::new(acc))
}

/// Projected second-order pooling: `z_i = ⟨w_i, Σ_m x_m ⊗ x_m⟩`.
pub fn project_so(xs: &FeatureSet, proj: &FullProjection) -> Result<Representation> {
    let d = xs.dim();
    if proj.w.rows() != d * d {
        return Err(Error::shape(
            "project_so",
            format!("projection has {} rows, features need {}", proj.w.rows(), d * d),
        ));
    }
    let y = bp_full(xs)?;
    let mut z = vec![0.0; proj.out_dim()];
    proj.w.matvec_t_acc(y.as_slice(), &mut z);
    Ok(Representation {
        values: Vector::new(z),
    })
}

/// Rank-one factorized pooling: `z_i = Σ_m ⟨u_i, x_m⟩⟨v_i, x_m⟩`.
/// Never materializes a `d²` buffer.
pub fn rank1_pool(xs: &FeatureSet, params: &Rank1Params) -> Result<Representation> {
    require_nonempty("rank1_pool", xs)?;
    let d = xs.dim();
    if params.u.cols() != d || params.v.cols() != d || params.u.rows() != params.v.rows() {
        return Err(Error::shape(
            "rank1_pool",
            format!(
                "u {}x{}, v {}x{}, features dim {}",
                params.u.rows(),
                params.u.cols(),
                params.v.rows(),
                params.v.cols(),
                d
            ),
        ));
    }
    let out_dim = params.u.rows();
    let mut z = vec![0.0; out_dim];
    let mut x = vec![0.0; d];
    for m in 0..xs.count() {
        xs.columns().col_into(m, &mut x);
        linalg::ops_count::add(out_dim as u64);
        for i in 0..out_dim {
            z[i] += dot(params.u.row(i), &x) * dot(params.v.row(i), &x);
        }
    }
    Ok(Representation {
        values: Vector::new(z),
    })
}

/// Materialized codebook bilinear pooling, the oracle for the factorized
/// codebook kernels: per location, builds `g = h(x) ⊗ x` and accumulates
/// `g ⊗ g`, then projects with `w ∈ R^{N²d² × D}`.
///
/// Refuses configurations with `N²d²` above [`NAIVE_CAPACITY`].
pub fn codebook_bp_naive(xs: &FeatureSet, cb: &Codebook, w: &Matrix) -> Result<Representation> {
    require_nonempty("codebook_bp_naive", xs)?;
    let d = xs.dim();
    let n = cb.n_words();
    if cb.dim() != d {
        return Err(Error::shape(
            "codebook_bp_naive",
            format!("codebook dim {} vs feature dim {}", cb.dim(), d),
        ));
    }
    let nd = n * d;
    let sq = nd * nd;
    if sq > NAIVE_CAPACITY {
        return Err(Error::Capacity {
            op: "codebook_bp_naive",
            detail: format!("N²d² = {sq} exceeds guard {NAIVE_CAPACITY}"),
        });
    }
    if w.rows() != sq {
        return Err(Error::shape(
            "codebook_bp_naive",
            format!("w has {} rows, need N²d² = {}", w.rows(), sq),
        ));
    }
    let mut pooled = Matrix::zeros(nd, nd);
    let mut x = vec![0.0; d];
    for m in 0..xs.count() {
        xs.columns().col_into(m, &mut x);
        let xv = Vector::new(x.clone());
        let h = cb.assign(&xv)?;
        let g = kron(&h.weights, &xv);
        pooled.outer_acc(1.0, g.as_slice(), g.as_slice());
    }
    let mut z = vec![0.0; w.cols()];
    w.matvec_t_acc(pooled.data(), &mut z);
    Ok(Representation {
        values: Vector::new(z),
    })
}

/// Factorized codebook pooling with one projector pair per codeword:
/// `z_i = Σ_m (h(x_m)ᵀ U_iᵀ x_m)(h(x_m)ᵀ V_iᵀ x_m)`.
///
/// Cost is `O(M·D·(dN + N))` with no `d²` or `N²d²` intermediates.
pub fn jcf_pool(xs: &FeatureSet, cb: &Codebook, params: &JcfParams) -> Result<Representation> {
    jcf_pool_dual(xs, cb, cb, params)
}

/// [`jcf_pool`] with distinct codebooks for the two bilinear factors.
pub fn jcf_pool_dual(
    xs: &FeatureSet,
    cb_p: &Codebook,
    cb_q: &Codebook,
    params: &JcfParams,
) -> Result<Representation> {
    require_nonempty("jcf_pool", xs)?;
    let d = xs.dim();
    let n = params.u_set.n_proj();
    check_jcf_shapes("jcf_pool", d, n, n, cb_p, cb_q, &params.u_set, &params.v_set)?;
    let out_dim = params.u_set.out_dim();

    let mut z = vec![0.0; out_dim];
    let mut x = vec![0.0; d];
    let mut wu = vec![0.0; n];
    let mut wv = vec![0.0; n];
    for m in 0..xs.count() {
        xs.columns().col_into(m, &mut x);
        let xv = Vector::new(x.clone());
        let hp = cb_p.assign(&xv)?.weights;
        let hq = if std::ptr::eq(cb_p, cb_q) {
            hp.clone()
        } else {
            cb_q.assign(&xv)?.weights
        };
        linalg::ops_count::add(out_dim as u64);
        for i in 0..out_dim {
            for j in 0..n {
                wu[j] = dot(params.u_set.proj(i, j), &x);
                wv[j] = dot(params.v_set.proj(i, j), &x);
            }
            z[i] += dot(hp.as_slice(), &wu) * dot(hq.as_slice(), &wv);
        }
    }
    Ok(Representation {
        values: Vector::new(z),
    })
}

/// Shared-projector codebook pooling:
/// `z_i = Σ_m (s_mᵀ Ũ_iᵀ x_m)(t_mᵀ Ṽ_iᵀ x_m)` with `s_m = Aᵀ h(x_m)`,
/// `t_m = Bᵀ h(x_m)` in `R^R`.
///
/// Per-output work scales with `R` instead of `N`; no `N`-sized per-output
/// intermediates are formed.
pub fn jcf_shared_pool(
    xs: &FeatureSet,
    cb: &Codebook,
    params: &JcfSharedParams,
) -> Result<Representation> {
    jcf_shared_pool_dual(xs, cb, cb, params)
}

/// [`jcf_shared_pool`] with distinct codebooks for the two bilinear factors.
pub fn jcf_shared_pool_dual(
    xs: &FeatureSet,
    cb_p: &Codebook,
    cb_q: &Codebook,
    params: &JcfSharedParams,
) -> Result<Representation> {
    require_nonempty("jcf_shared_pool", xs)?;
    let d = xs.dim();
    let n = params.n_words();
    let r = params.rank();
    check_jcf_shapes(
        "jcf_shared_pool",
        d,
        n,
        r,
        cb_p,
        cb_q,
        &params.u_shared,
        &params.v_shared,
    )?;
    if params.b.rows() != n || params.b.cols() != r {
        return Err(Error::shape("jcf_shared_pool", "A and B shapes differ"));
    }
    let out_dim = params.out_dim();

    let mut z = vec![0.0; out_dim];
    let mut x = vec![0.0; d];
    let mut s = vec![0.0; r];
    let mut t = vec![0.0; r];
    let mut pu = vec![0.0; r];
    let mut pv = vec![0.0; r];
    for m in 0..xs.count() {
        xs.columns().col_into(m, &mut x);
        let xv = Vector::new(x.clone());
        let hp = cb_p.assign(&xv)?.weights;
        let hq = if std::ptr::eq(cb_p, cb_q) {
            hp.clone()
        } else {
            cb_q.assign(&xv)?.weights
        };
        s.fill(0.0);
        t.fill(0.0);
        params.a.matvec_t_acc(hp.as_slice(), &mut s);
        params.b.matvec_t_acc(hq.as_slice(), &mut t);
        linalg::ops_count::add(out_dim as u64);
        for i in 0..out_dim {
            for p in 0..r {
                pu[p] = dot(params.u_shared.proj(i, p), &x);
                pv[p] = dot(params.v_shared.proj(i, p), &x);
            }
            z[i] += dot(&s, &pu) * dot(&t, &pv);
        }
    }
    Ok(Representation {
        values: Vector::new(z),
    })
}

#[allow(clippy::too_many_arguments)]
fn check_jcf_shapes(
    op: &'static str,
    d: usize,
    n: usize,
    _r: usize,
    cb_p: &Codebook,
    cb_q: &Codebook,
    u: &ProjectorSet,
    v: &ProjectorSet,
) -> Result<()> {
    if cb_p.dim() != d || cb_q.dim() != d {
        return Err(Error::shape(
            op,
            format!("codebook dim {} vs feature dim {}", cb_p.dim(), d),
        ));
    }
    if cb_p.n_words() != n || cb_q.n_words() != n {
        return Err(Error::shape(
            op,
            format!("codebook has {} words, params expect {}", cb_p.n_words(), n),
        ));
    }
    if u.dim() != d || v.dim() != d || u.out_dim() != v.out_dim() || u.n_proj() != v.n_proj() {
        return Err(Error::shape(op, "projector sets inconsistent with features"));
    }
    Ok(())
}

/// Applies the reduction map to every raw feature column and ℓ2-normalizes
/// the result: `x = normalize(reductionᵀ y)`.
pub fn reduce_features(raw: &FeatureSet, reduction: &Matrix) -> Result<FeatureSet> {
    require_nonempty("reduce_features", raw)?;
    if reduction.rows() != raw.dim() {
        return Err(Error::shape(
            "reduce_features",
            format!(
                "reduction is {}x{}, raw features have dim {}",
                reduction.rows(),
                reduction.cols(),
                raw.dim()
            ),
        ));
    }
    let d = reduction.cols();
    let mut out = Matrix::zeros(d, raw.count());
    let mut y = vec![0.0; raw.dim()];
    let mut x = vec![0.0; d];
    for m in 0..raw.count() {
        raw.columns().col_into(m, &mut y);
        x.fill(0.0);
        reduction.matvec_t_acc(&y, &mut x);
        l2_normalize_in_place(&mut x, DEFAULT_EPS);
        out.set_col(m, &x);
    }
    FeatureSet::new(out)
}
