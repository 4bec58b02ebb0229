//! The composed embedding chain: reduce → assign → pool → normalize.
//!
//! A [`PoolModel`] bundles everything trainable for one pooling method. The
//! factorized methods are all expressed through the shared-projector form:
//!
//! - `Factorized` is the shared form with `N = R = 1` and frozen
//!   recombination (the assignment of a single codeword is always 1).
//! - `Jcf { n }` is the shared form with `R = N`, `A = B = I` frozen.
//! - `JcfShared { n, r }` trains everything, including `A` and `B`.
//!
//! This keeps one forward and one backward implementation for the whole
//! method ladder, which is the implementation the gradient checks certify.

use crate::codebook::{init_codebook, AssignMode, Codebook, DEFAULT_LLOYD_ITERS};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_in_place, Matrix, Vector, DEFAULT_EPS};
use crate::pooling::{
    jcf_shared_pool_dual, reduce_features, FeatureSet, JcfSharedParams, ProjectorSet,
};
use crate::rng::SeedSplitter;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Pooling method selector for the trainable chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// First-order mean pooling of reduced features.
    Baseline,
    /// Rank-one factorized second-order pooling, no codebook.
    Factorized,
    /// Codebook pooling with one projector pair per codeword.
    Jcf { n: usize },
    /// Codebook pooling with `r` shared projector pairs recombined over
    /// `n` codewords.
    JcfShared { n: usize, r: usize },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline => "baseline".into(),
            Method::Factorized => "factorized".into(),
            Method::Jcf { n } => format!("jcf-{n}"),
            Method::JcfShared { n, r } => format!("jcf-{n}-{r}"),
        }
    }

    /// Number of codewords the chain will carry (1 for methods without a
    /// real codebook).
    pub fn n_words(&self) -> usize {
        match self {
            Method::Baseline => 0,
            Method::Factorized => 1,
            Method::Jcf { n } => *n,
            Method::JcfShared { n, .. } => *n,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Method::Baseline => 0,
            Method::Factorized => 1,
            Method::Jcf { n } => *n,
            Method::JcfShared { r, .. } => *r,
        }
    }
}

/// Which tensors the optimizer must leave untouched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub codebook: bool,
    pub reduction: bool,
    pub recombination: bool,
}

/// Everything needed to build a fresh [`PoolModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub method: Method,
    /// Raw feature dimension entering the reduction map.
    pub d_in: usize,
    /// Reduced feature dimension (ignored for `Baseline`, which reduces
    /// straight to `out_dim`).
    pub d: usize,
    /// Embedding dimension `D`.
    pub out_dim: usize,
    pub temperature: f64,
    pub hard_assign: bool,
    pub normalize_output: bool,
    /// Learn a second codebook for the second bilinear factor.
    pub dual_codebook: bool,
    pub lloyd_iters: usize,
    pub freeze: FreezeFlags,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.out_dim == 0 {
            return Err(Error::input("model", "dimensions must be positive"));
        }
        match self.method {
            Method::Baseline => {}
            Method::Factorized | Method::Jcf { .. } | Method::JcfShared { .. } => {
                if self.d == 0 {
                    return Err(Error::input("model", "reduced dim must be positive"));
                }
            }
        }
        if let Method::Jcf { n } = self.method {
            if n == 0 {
                return Err(Error::input("model", "codebook size must be positive"));
            }
        }
        if let Method::JcfShared { n, r } = self.method {
            if n == 0 || r == 0 {
                return Err(Error::input("model", "codebook size and rank must be positive"));
            }
            if r > n {
                return Err(Error::input(
                    "model",
                    format!("rank {r} exceeds codebook size {n}"),
                ));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::input("model", "temperature must be positive"));
        }
        Ok(())
    }

    fn assign_mode(&self) -> AssignMode {
        if self.hard_assign {
            AssignMode::Hard
        } else {
            AssignMode::Soft {
                temperature: self.temperature,
            }
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            method: Method::JcfShared { n: 8, r: 8 },
            d_in: 128,
            d: 64,
            out_dim: 64,
            temperature: crate::codebook::DEFAULT_TEMPERATURE,
            hard_assign: false,
            normalize_output: true,
            dual_codebook: false,
            lloyd_iters: DEFAULT_LLOYD_ITERS,
            freeze: FreezeFlags::default(),
        }
    }
}

/// A trainable pooling model.
#[derive(Debug, Clone)]
pub struct PoolModel {
    pub spec: ModelSpec,
    /// `d_in × d` (or `d_in × out_dim` for `Baseline`).
    pub reduction: Matrix,
    pub codebook: Option<Codebook>,
    /// Second codebook for the second bilinear factor (dual mode only).
    pub codebook_q: Option<Codebook>,
    pub shared: Option<JcfSharedParams>,
}

impl PoolModel {
    /// Initializes a model from the named RNG streams of `splitter`.
    ///
    /// When `init_features` are given (raw, un-reduced), the codebook is
    /// seeded by k-means on their reduced columns; otherwise codewords are
    /// random unit vectors. Methods that share dimensions draw their
    /// projector tensors from the same stream, so e.g. `jcf-8` and
    /// `jcf-8-8` start from identical effective parameters.
    pub fn init(
        spec: &ModelSpec,
        splitter: &SeedSplitter,
        init_features: Option<&[FeatureSet]>,
    ) -> Result<PoolModel> {
        spec.validate()?;
        let reduced_dim = match spec.method {
            Method::Baseline => spec.out_dim,
            _ => spec.d,
        };
        let mut rng = splitter.stream("init.reduction");
        let scale = 1.0 / (spec.d_in as f64).sqrt();
        let reduction = gaussian_matrix(spec.d_in, reduced_dim, scale, &mut rng);

        if spec.method == Method::Baseline {
            return Ok(PoolModel {
                spec: spec.clone(),
                reduction,
                codebook: None,
                codebook_q: None,
                shared: None,
            });
        }

        let n = spec.method.n_words();
        let r = spec.method.rank();
        let d = spec.d;

        let codebook = Self::init_one_codebook(spec, &reduction, init_features, splitter, "init.codebook", n)?;
        let codebook_q = if spec.dual_codebook {
            Some(Self::init_one_codebook(
                spec,
                &reduction,
                init_features,
                splitter,
                "init.codebook_q",
                n,
            )?)
        } else {
            None
        };

        let mut rng = splitter.stream("init.projectors");
        let pscale = 1.0 / (d as f64).sqrt();
        let u_shared = gaussian_projectors(spec.out_dim, d, r, pscale, &mut rng);
        let v_shared = gaussian_projectors(spec.out_dim, d, r, pscale, &mut rng);

        // Recombination starts as the cyclic selector A[j, j mod R] = 1,
        // which is the identity when R = N.
        let mut a = Matrix::zeros(n, r);
        for j in 0..n {
            a.set(j, j % r, 1.0);
        }
        let b = a.clone();

        Ok(PoolModel {
            spec: spec.clone(),
            reduction,
            codebook: Some(codebook),
            codebook_q,
            shared: Some(JcfSharedParams {
                u_shared,
                v_shared,
                a,
                b,
            }),
        })
    }

    fn init_one_codebook(
        spec: &ModelSpec,
        reduction: &Matrix,
        init_features: Option<&[FeatureSet]>,
        splitter: &SeedSplitter,
        stream: &str,
        n: usize,
    ) -> Result<Codebook> {
        let mode = spec.assign_mode();
        let mut rng = splitter.stream(stream);
        if let Some(raws) = init_features {
            let reduced: Vec<FeatureSet> = raws
                .iter()
                .map(|fs| reduce_features(fs, reduction))
                .collect::<Result<_>>()?;
            let total: usize = reduced.iter().map(|f| f.count()).sum();
            if total >= n {
                let seed: u64 = rng.random();
                return init_codebook(&reduced, n, mode, spec.lloyd_iters, seed);
            }
        }
        let words = gaussian_matrix(n, spec.d, 1.0, &mut rng);
        Codebook::new(words, mode)
    }

    /// Reduced feature dimension the pooling stage sees.
    pub fn reduced_dim(&self) -> usize {
        self.reduction.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// Embeds one raw feature set: reduce, pool, optionally ℓ2-normalize.
    pub fn embed(&self, raw: &FeatureSet) -> Result<Vector> {
        let reduced = reduce_features(raw, &self.reduction)?;
        let mut z = self.pool_reduced(&reduced)?;
        if self.spec.normalize_output {
            l2_normalize_in_place(z.as_mut_slice(), DEFAULT_EPS);
        }
        Ok(z)
    }

    /// Pools already-reduced features without output normalization.
    pub fn pool_reduced(&self, reduced: &FeatureSet) -> Result<Vector> {
        match self.spec.method {
            Method::Baseline => {
                let d = reduced.dim();
                let mut z = vec![0.0; d];
                let mut col = vec![0.0; d];
                for m in 0..reduced.count() {
                    reduced.columns().col_into(m, &mut col);
                    for (acc, v) in z.iter_mut().zip(col.iter()) {
                        *acc += v;
                    }
                }
                let inv = 1.0 / reduced.count() as f64;
                crate::linalg::scale(&mut z, inv);
                Ok(Vector::new(z))
            }
            _ => {
                let cb = self.codebook.as_ref().expect("pooled method has codebook");
                let cb_q = self.codebook_q.as_ref().unwrap_or(cb);
                let params = self.shared.as_ref().expect("pooled method has params");
                let rep = jcf_shared_pool_dual(reduced, cb, cb_q, params)?;
                Ok(rep.values)
            }
        }
    }

    /// Verifies that every parameter tensor is finite, naming the offender.
    pub fn check_finite(&self) -> Result<()> {
        if !self.reduction.is_finite() {
            return Err(Error::NonFinite {
                tensor: "reduction".into(),
            });
        }
        if let Some(cb) = &self.codebook {
            if !cb.words().is_finite() {
                return Err(Error::NonFinite {
                    tensor: "codebook".into(),
                });
            }
        }
        if let Some(cb) = &self.codebook_q {
            if !cb.words().is_finite() {
                return Err(Error::NonFinite {
                    tensor: "codebook_q".into(),
                });
            }
        }
        if let Some(p) = &self.shared {
            for (name, ok) in [
                ("u_shared", p.u_shared.data().iter().all(|v| v.is_finite())),
                ("v_shared", p.v_shared.data().iter().all(|v| v.is_finite())),
                ("a", p.a.is_finite()),
                ("b", p.b.is_finite()),
            ] {
                if !ok {
                    return Err(Error::NonFinite {
                        tensor: name.into(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("positive dims")
}

fn gaussian_projectors(
    out_dim: usize,
    dim: usize,
    n_proj: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> ProjectorSet {
    let data: Vec<f64> = (0..out_dim * dim * n_proj)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        })
        .collect();
    ProjectorSet::from_vec(out_dim, dim, n_proj, data).expect("positive dims")
}
