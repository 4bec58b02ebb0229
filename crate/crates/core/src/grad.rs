//! Hand-derived reverse-mode gradients for the pooling chain, plus a
//! finite-difference verification harness and the SGD update rule.
//!
//! The differentiated chain, per location `m`:
//!
//! ```text
//! x_m  (reduced, ℓ2-normalized feature)
//! cos_j = ⟨x_m, c_j⟩ / (max(‖x_m‖,ε) · max(‖c_j‖,ε))
//! h_m   = softmax(cos / τ)
//! s_m = Aᵀ h_m,  t_m = Bᵀ h_m                   (R-dimensional)
//! z_i  += (s_mᵀ Ũ_iᵀ x_m) · (t_mᵀ Ṽ_iᵀ x_m)
//! z     = z / max(‖z‖, ε)                        (optional)
//! ```
//!
//! The backward pass applies the product rule across the two bilinear
//! factors, the softmax Jacobian, and the normalization Jacobians of both
//! the cosine and the output. Gradients flow into the shared projectors,
//! the recombination matrices, the codebook, the input features, and (in
//! the full chain) the reduction map. Hard assignment has no defined
//! gradient and is rejected.
//!
//! There is no autodiff tape here: the chain is five fixed operations and
//! the derivation is checked against central finite differences by
//! [`finite_diff_check`].

use crate::codebook::{AssignMode, Codebook};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, Matrix, Vector, DEFAULT_EPS};
use crate::model::{Method, ModelSpec, PoolModel};
use crate::pooling::{reduce_features, FeatureSet, JcfSharedParams, ProjectorSet};
use crate::rng::SeedSplitter;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Gradients of a scalar loss with respect to everything trainable in the
/// pooled chain.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_u_shared: ProjectorSet,
    pub d_v_shared: ProjectorSet,
    /// `N × R`.
    pub d_a: Matrix,
    /// `N × R`.
    pub d_b: Matrix,
    /// `N × d`.
    pub d_codebook: Matrix,
    /// Present only in dual-codebook mode.
    pub d_codebook_q: Option<Matrix>,
    /// `d × M`: gradient w.r.t. the pooled (reduced) feature columns.
    pub d_features: Matrix,
    /// `d_in × d`: present when the chain includes the reduction stage.
    pub d_reduction: Option<Matrix>,
}

impl GradientBundle {
    fn zeros(params: &JcfSharedParams, d: usize, m: usize, dual: bool) -> Self {
        let n = params.n_words();
        let r = params.rank();
        let out = params.out_dim();
        GradientBundle {
            d_u_shared: ProjectorSet::zeros(out, d, r),
            d_v_shared: ProjectorSet::zeros(out, d, r),
            d_a: Matrix::zeros(n, r),
            d_b: Matrix::zeros(n, r),
            d_codebook: Matrix::zeros(n, d),
            d_codebook_q: dual.then(|| Matrix::zeros(n, d)),
            d_features: Matrix::zeros(d, m),
            d_reduction: None,
        }
    }

    /// Sums the parameter gradients of `other` into `self`. Per-sample
    /// feature gradients are not accumulated (they belong to one input).
    pub fn accumulate_params(&mut self, other: &GradientBundle) {
        acc(self.d_u_shared.data_mut(), other.d_u_shared.data());
        acc(self.d_v_shared.data_mut(), other.d_v_shared.data());
        acc(self.d_a.data_mut(), other.d_a.data());
        acc(self.d_b.data_mut(), other.d_b.data());
        acc(self.d_codebook.data_mut(), other.d_codebook.data());
        if let (Some(a), Some(b)) = (self.d_codebook_q.as_mut(), other.d_codebook_q.as_ref()) {
            acc(a.data_mut(), b.data());
        }
        match (self.d_reduction.as_mut(), other.d_reduction.as_ref()) {
            (Some(a), Some(b)) => acc(a.data_mut(), b.data()),
            (None, Some(b)) => self.d_reduction = Some(b.clone()),
            _ => {}
        }
    }

    /// Returns the name of the first non-finite tensor, if any.
    pub fn check_finite(&self) -> Result<()> {
        let tensors: [(&str, &[f64]); 6] = [
            ("d_u_shared", self.d_u_shared.data()),
            ("d_v_shared", self.d_v_shared.data()),
            ("d_a", self.d_a.data()),
            ("d_b", self.d_b.data()),
            ("d_codebook", self.d_codebook.data()),
            ("d_features", self.d_features.data()),
        ];
        for (name, data) in tensors {
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.into(),
                });
            }
        }
        if let Some(m) = &self.d_codebook_q {
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "d_codebook_q".into(),
                });
            }
        }
        if let Some(m) = &self.d_reduction {
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "d_reduction".into(),
                });
            }
        }
        Ok(())
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients for a whole [`PoolModel`], covering both method families.
#[derive(Debug, Clone)]
pub enum ModelGrads {
    Baseline { d_reduction: Matrix },
    Pooled(Box<GradientBundle>),
}

impl ModelGrads {
    pub fn accumulate(&mut self, other: &ModelGrads) -> Result<()> {
        match (self, other) {
            (ModelGrads::Baseline { d_reduction: a }, ModelGrads::Baseline { d_reduction: b }) => {
                acc(a.data_mut(), b.data());
                Ok(())
            }
            (ModelGrads::Pooled(a), ModelGrads::Pooled(b)) => {
                a.accumulate_params(b);
                Ok(())
            }
            _ => Err(Error::input("grads", "mixed gradient kinds")),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self {
            ModelGrads::Baseline { d_reduction } => {
                if !d_reduction.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: "d_reduction".into(),
                    });
                }
                Ok(())
            }
            ModelGrads::Pooled(b) => b.check_finite(),
        }
    }
}

// ---------------------------------------------------------------------------
// backward through the pooled chain
// ---------------------------------------------------------------------------

/// Gradient of `⟨upstream, z⟩` where `z = jcf_shared_pool(xs, cb, params)`,
/// optionally followed by output ℓ2-normalization.
///
/// Requires soft assignment; hard mode has no defined gradient.
pub fn jcf_shared_backward(
    xs: &FeatureSet,
    cb: &Codebook,
    params: &JcfSharedParams,
    upstream: &Vector,
    normalize_output: bool,
) -> Result<GradientBundle> {
    let (_, bundle) = pooled_forward_backward(xs, cb, None, params, upstream, normalize_output)?;
    Ok(bundle)
}

/// Full forward + backward for the pooled stage; returns the (possibly
/// normalized) embedding along with the gradients. `cb_q` selects
/// dual-codebook mode.
pub fn pooled_forward_backward(
    xs: &FeatureSet,
    cb: &Codebook,
    cb_q: Option<&Codebook>,
    params: &JcfSharedParams,
    upstream: &Vector,
    normalize_output: bool,
) -> Result<(Vector, GradientBundle)> {
    let AssignMode::Soft { temperature: tau } = cb.mode() else {
        return Err(Error::Unsupported {
            op: "jcf_shared_backward",
            detail: "hard assignment has no defined gradient".into(),
        });
    };
    if let Some(q) = cb_q {
        if !matches!(q.mode(), AssignMode::Soft { .. }) {
            return Err(Error::Unsupported {
                op: "jcf_shared_backward",
                detail: "hard assignment has no defined gradient".into(),
            });
        }
    }
    let d = xs.dim();
    let n = params.n_words();
    let r = params.rank();
    let out_dim = params.out_dim();
    if cb.dim() != d || params.u_shared.dim() != d {
        return Err(Error::shape("jcf_shared_backward", "feature dim mismatch"));
    }
    if upstream.dim() != out_dim {
        return Err(Error::shape(
            "jcf_shared_backward",
            format!("upstream dim {} vs out dim {}", upstream.dim(), out_dim),
        ));
    }
    let m_count = xs.count();
    let dual = cb_q.is_some();

    // ---- forward, caching per-location intermediates -----------------
    let mut hs_p: Vec<Vec<f64>> = Vec::with_capacity(m_count);
    let mut hs_q: Vec<Vec<f64>> = Vec::with_capacity(if dual { m_count } else { 0 });
    let mut ss: Vec<Vec<f64>> = Vec::with_capacity(m_count);
    let mut ts: Vec<Vec<f64>> = Vec::with_capacity(m_count);
    let mut zas = Matrix::zeros(m_count, out_dim);
    let mut zbs = Matrix::zeros(m_count, out_dim);
    let mut z_raw = vec![0.0; out_dim];
    let mut x = vec![0.0; d];
    for m in 0..m_count {
        xs.columns().col_into(m, &mut x);
        let xv = Vector::new(x.clone());
        let hp = cb.assign(&xv)?.weights.into_vec();
        let hq_owned;
        let hq: &[f64] = match cb_q {
            Some(q) => {
                hq_owned = q.assign(&xv)?.weights.into_vec();
                &hq_owned
            }
            None => &hp,
        };
        let mut s = vec![0.0; r];
        let mut t = vec![0.0; r];
        params.a.matvec_t_acc(&hp, &mut s);
        params.b.matvec_t_acc(hq, &mut t);
        for i in 0..out_dim {
            let mut za = 0.0;
            let mut zb = 0.0;
            for p in 0..r {
                za += s[p] * dot(params.u_shared.proj(i, p), &x);
                zb += t[p] * dot(params.v_shared.proj(i, p), &x);
            }
            zas.set(m, i, za);
            zbs.set(m, i, zb);
            z_raw[i] += za * zb;
        }
        if dual {
            hs_q.push(hq.to_vec());
        }
        hs_p.push(hp);
        ss.push(s);
        ts.push(t);
    }

    // ---- upstream through the output normalization --------------------
    let (z_out, g_raw) = if normalize_output {
        let nz = norm2(&z_raw);
        if nz >= DEFAULT_EPS {
            let zhat: Vec<f64> = z_raw.iter().map(|v| v / nz).collect();
            let zg = dot(&zhat, upstream.as_slice());
            let g: Vec<f64> = upstream
                .as_slice()
                .iter()
                .zip(&zhat)
                .map(|(u, zh)| (u - zg * zh) / nz)
                .collect();
            (zhat, g)
        } else {
            let zhat: Vec<f64> = z_raw.iter().map(|v| v / DEFAULT_EPS).collect();
            let g: Vec<f64> = upstream.as_slice().iter().map(|u| u / DEFAULT_EPS).collect();
            (zhat, g)
        }
    } else {
        (z_raw.clone(), upstream.as_slice().to_vec())
    };

    // ---- backward ------------------------------------------------------
    let mut bundle = GradientBundle::zeros(params, d, m_count, dual);
    let mut ds = vec![0.0; r];
    let mut dt = vec![0.0; r];
    let mut dhp = vec![0.0; n];
    let mut dhq = vec![0.0; n];
    let mut dx = vec![0.0; d];
    for m in 0..m_count {
        xs.columns().col_into(m, &mut x);
        let hp = &hs_p[m];
        let hq: &[f64] = if dual { &hs_q[m] } else { hp };
        let s = &ss[m];
        let t = &ts[m];
        ds.fill(0.0);
        dt.fill(0.0);
        dx.fill(0.0);
        for i in 0..out_dim {
            let g = g_raw[i];
            // product rule across the two bilinear factors
            let da = g * zbs.get(m, i);
            let db = g * zas.get(m, i);
            for p in 0..r {
                let pu = dot(params.u_shared.proj(i, p), &x);
                let pv = dot(params.v_shared.proj(i, p), &x);
                axpy(bundle.d_u_shared.proj_mut(i, p), da * s[p], &x);
                axpy(bundle.d_v_shared.proj_mut(i, p), db * t[p], &x);
                ds[p] += da * pu;
                dt[p] += db * pv;
                axpy(&mut dx, da * s[p], params.u_shared.proj(i, p));
                axpy(&mut dx, db * t[p], params.v_shared.proj(i, p));
            }
        }
        // s = Aᵀ h, t = Bᵀ h
        bundle.d_a.outer_acc(1.0, hp, &ds);
        bundle.d_b.outer_acc(1.0, hq, &dt);
        dhp.fill(0.0);
        dhq.fill(0.0);
        params.a.matvec_acc(1.0, &ds, &mut dhp);
        params.b.matvec_acc(1.0, &dt, &mut dhq);

        // assignment backward; in single-codebook mode both factors route
        // through the same softmax (its Jacobian is linear in the upstream,
        // so two calls accumulate correctly)
        assign_backward(&x, cb, tau, hp, &dhp, &mut dx, &mut bundle.d_codebook);
        match cb_q {
            Some(q) => {
                let AssignMode::Soft { temperature: tau_q } = q.mode() else {
                    unreachable!("checked above");
                };
                let d_cq = bundle.d_codebook_q.as_mut().expect("dual bundle");
                assign_backward(&x, q, tau_q, hq, &dhq, &mut dx, d_cq);
            }
            None => {
                assign_backward(&x, cb, tau, hp, &dhq, &mut dx, &mut bundle.d_codebook);
            }
        }
        bundle.d_features.set_col(m, &dx);
    }

    Ok((Vector::new(z_out), bundle))
}

/// Backward of `h = softmax(cos(x, c_j)/τ)` given `dL/dh`, accumulating into
/// `dx` and the codeword gradients. Includes the normalization Jacobian of
/// the cosine for both arguments.
fn assign_backward(
    x: &[f64],
    cb: &Codebook,
    tau: f64,
    h: &[f64],
    dh: &[f64],
    dx: &mut [f64],
    d_words: &mut Matrix,
) {
    let nx_raw = norm2(x);
    let nx = nx_raw.max(DEFAULT_EPS);
    let dot_hd = dot(dh, h);
    for j in 0..cb.n_words() {
        let dscore = h[j] * (dh[j] - dot_hd);
        if dscore == 0.0 {
            continue;
        }
        let dcos = dscore / tau;
        let c = cb.word(j);
        let nc_raw = norm2(c);
        let nc = nc_raw.max(DEFAULT_EPS);
        let denom = nx * nc;
        let cos = dot(x, c) / denom;
        axpy(dx, dcos / denom, c);
        if nx_raw > DEFAULT_EPS {
            axpy(dx, -dcos * cos / (nx * nx), x);
        }
        let row = d_words.row_mut(j);
        axpy(row, dcos / denom, x);
        if nc_raw > DEFAULT_EPS {
            axpy(row, -dcos * cos / (nc * nc), c);
        }
    }
}

/// Backward of `x = t / max(‖t‖, ε)`: maps `dL/dx` to `dL/dt` given the
/// normalized value `xhat` and the pre-normalization norm.
fn normalize_backward(dx: &[f64], xhat: &[f64], pre_norm: f64, dt: &mut [f64]) {
    if pre_norm >= DEFAULT_EPS {
        let proj = dot(xhat, dx);
        for i in 0..dx.len() {
            dt[i] = (dx[i] - proj * xhat[i]) / pre_norm;
        }
    } else {
        for i in 0..dx.len() {
            dt[i] = dx[i] / DEFAULT_EPS;
        }
    }
}

// ---------------------------------------------------------------------------
// full chain: raw features -> reduction -> pooling -> embedding
// ---------------------------------------------------------------------------

/// Forward + backward through the complete chain of `model`, starting from
/// raw features. Returns the embedding and gradients for every trainable
/// tensor, including the reduction map.
pub fn chain_backward(
    model: &PoolModel,
    raw: &FeatureSet,
    upstream: &Vector,
) -> Result<(Vector, ModelGrads)> {
    let d_in = raw.dim();
    let m_count = raw.count();
    let rd = model.reduced_dim();
    if model.reduction.rows() != d_in {
        return Err(Error::shape("chain_backward", "raw feature dim mismatch"));
    }

    // reduction forward, keeping pre-normalization norms
    let mut reduced = Matrix::zeros(rd, m_count);
    let mut pre_norms = vec![0.0; m_count];
    let mut y = vec![0.0; d_in];
    let mut t = vec![0.0; rd];
    for m in 0..m_count {
        raw.columns().col_into(m, &mut y);
        t.fill(0.0);
        model.reduction.matvec_t_acc(&y, &mut t);
        let norm = norm2(&t);
        pre_norms[m] = norm;
        let inv = 1.0 / norm.max(DEFAULT_EPS);
        for v in t.iter_mut() {
            *v *= inv;
        }
        reduced.set_col(m, &t);
    }
    let reduced_fs = FeatureSet::new(reduced)?;

    match model.spec.method {
        Method::Baseline => {
            if upstream.dim() != rd {
                return Err(Error::shape("chain_backward", "upstream dim mismatch"));
            }
            // mean pool + optional normalization
            let mut z_raw = vec![0.0; rd];
            let mut col = vec![0.0; rd];
            for m in 0..m_count {
                reduced_fs.columns().col_into(m, &mut col);
                acc(&mut z_raw, &col);
            }
            let inv_m = 1.0 / m_count as f64;
            for v in z_raw.iter_mut() {
                *v *= inv_m;
            }
            let (z_out, g_raw) = if model.spec.normalize_output {
                let nz = norm2(&z_raw);
                if nz >= DEFAULT_EPS {
                    let zhat: Vec<f64> = z_raw.iter().map(|v| v / nz).collect();
                    let zg = dot(&zhat, upstream.as_slice());
                    let g: Vec<f64> = upstream
                        .as_slice()
                        .iter()
                        .zip(&zhat)
                        .map(|(u, zh)| (u - zg * zh) / nz)
                        .collect();
                    (zhat, g)
                } else {
                    let zhat: Vec<f64> = z_raw.iter().map(|v| v / DEFAULT_EPS).collect();
                    let g: Vec<f64> =
                        upstream.as_slice().iter().map(|u| u / DEFAULT_EPS).collect();
                    (zhat, g)
                }
            } else {
                (z_raw, upstream.as_slice().to_vec())
            };
            // each column receives g/M, then flows through its normalization
            let mut d_reduction = Matrix::zeros(d_in, rd);
            let mut dx = vec![0.0; rd];
            let mut dt = vec![0.0; rd];
            let mut xhat = vec![0.0; rd];
            for m in 0..m_count {
                for (slot, g) in dx.iter_mut().zip(&g_raw) {
                    *slot = g * inv_m;
                }
                reduced_fs.columns().col_into(m, &mut xhat);
                normalize_backward(&dx, &xhat, pre_norms[m], &mut dt);
                raw.columns().col_into(m, &mut y);
                d_reduction.outer_acc(1.0, &y, &dt);
            }
            Ok((Vector::new(z_out), ModelGrads::Baseline { d_reduction }))
        }
        _ => {
            let cb = model.codebook.as_ref().expect("pooled model has codebook");
            let params = model.shared.as_ref().expect("pooled model has params");
            let (z, mut bundle) = pooled_forward_backward(
                &reduced_fs,
                cb,
                model.codebook_q.as_ref(),
                params,
                upstream,
                model.spec.normalize_output,
            )?;
            let mut d_reduction = Matrix::zeros(d_in, rd);
            let mut dx = vec![0.0; rd];
            let mut dt = vec![0.0; rd];
            let mut xhat = vec![0.0; rd];
            for m in 0..m_count {
                bundle.d_features.col_into(m, &mut dx);
                reduced_fs.columns().col_into(m, &mut xhat);
                normalize_backward(&dx, &xhat, pre_norms[m], &mut dt);
                raw.columns().col_into(m, &mut y);
                d_reduction.outer_acc(1.0, &y, &dt);
            }
            bundle.d_reduction = Some(d_reduction);
            Ok((z, ModelGrads::Pooled(Box::new(bundle))))
        }
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// One plain SGD step: `p ← p − lr·g` for every trainable tensor, honoring
/// the model's freeze flags. Codebook rows are re-normalized afterwards.
///
/// Fails without touching the model if any gradient tensor is non-finite.
pub fn sgd_step(model: &mut PoolModel, grads: &ModelGrads, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::input("sgd_step", "learning rate must be non-negative"));
    }
    grads.check_finite()?;
    match (model.spec.method, grads) {
        (Method::Baseline, ModelGrads::Baseline { d_reduction }) => {
            if !model.spec.freeze.reduction {
                step(model.reduction.data_mut(), d_reduction.data(), lr)?;
            }
            Ok(())
        }
        (_, ModelGrads::Pooled(bundle)) if model.spec.method != Method::Baseline => {
            {
                let params = model.shared.as_mut().expect("pooled model has params");
                step(params.u_shared.data_mut(), bundle.d_u_shared.data(), lr)?;
                step(params.v_shared.data_mut(), bundle.d_v_shared.data(), lr)?;
                if !model.spec.freeze.recombination {
                    step(params.a.data_mut(), bundle.d_a.data(), lr)?;
                    step(params.b.data_mut(), bundle.d_b.data(), lr)?;
                }
            }
            if !model.spec.freeze.codebook {
                let cb = model.codebook.as_mut().expect("pooled model has codebook");
                step(cb.words_mut().data_mut(), bundle.d_codebook.data(), lr)?;
                cb.renormalize();
                if let (Some(cbq), Some(d)) =
                    (model.codebook_q.as_mut(), bundle.d_codebook_q.as_ref())
                {
                    step(cbq.words_mut().data_mut(), d.data(), lr)?;
                    cbq.renormalize();
                }
            } else if let Some(cb) = model.codebook.as_mut() {
                cb.renormalize();
            }
            if !model.spec.freeze.reduction {
                if let Some(d) = &bundle.d_reduction {
                    step(model.reduction.data_mut(), d.data(), lr)?;
                }
            }
            Ok(())
        }
        _ => Err(Error::input("sgd_step", "gradient kind does not match model")),
    }
}

fn step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", "parameter/gradient length mismatch"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

/// Instance description for [`finite_diff_check`]. Small by construction:
/// the check runs two forward passes per scalar parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdConfig {
    pub d_in: usize,
    pub d: usize,
    pub n_words: usize,
    pub rank: usize,
    pub out_dim: usize,
    pub locations: usize,
    pub temperature: f64,
    pub normalize_output: bool,
    pub dual_codebook: bool,
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub threshold: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            d_in: 6,
            d: 4,
            n_words: 3,
            rank: 2,
            out_dim: 2,
            locations: 3,
            temperature: 0.1,
            normalize_output: true,
            dual_codebook: false,
            step: 1e-5,
            threshold: 1e-5,
        }
    }
}

/// Outcome of one finite-difference sweep: the worst relative error seen
/// per tensor, `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdCheckReport {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub per_tensor: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

const FD_TENSORS: &[&str] = &["u_shared", "v_shared", "a", "b", "codebook", "reduction"];

fn tensor_len(model: &PoolModel, tensor: &str) -> usize {
    match tensor {
        "reduction" => model.reduction.data().len(),
        "u_shared" => model.shared.as_ref().unwrap().u_shared.data().len(),
        "v_shared" => model.shared.as_ref().unwrap().v_shared.data().len(),
        "a" => model.shared.as_ref().unwrap().a.data().len(),
        "b" => model.shared.as_ref().unwrap().b.data().len(),
        "codebook" => model.codebook.as_ref().unwrap().words().data().len(),
        "codebook_q" => model.codebook_q.as_ref().unwrap().words().data().len(),
        _ => unreachable!("unknown tensor {tensor}"),
    }
}

fn perturb(model: &mut PoolModel, tensor: &str, idx: usize, delta: f64) {
    let slice: &mut [f64] = match tensor {
        "reduction" => model.reduction.data_mut(),
        "u_shared" => model.shared.as_mut().unwrap().u_shared.data_mut(),
        "v_shared" => model.shared.as_mut().unwrap().v_shared.data_mut(),
        "a" => model.shared.as_mut().unwrap().a.data_mut(),
        "b" => model.shared.as_mut().unwrap().b.data_mut(),
        "codebook" => model.codebook.as_mut().unwrap().words_mut().data_mut(),
        "codebook_q" => model.codebook_q.as_mut().unwrap().words_mut().data_mut(),
        _ => unreachable!("unknown tensor {tensor}"),
    };
    slice[idx] += delta;
}

fn analytic_tensor<'a>(grads: &'a GradientBundle, tensor: &str) -> &'a [f64] {
    match tensor {
        "u_shared" => grads.d_u_shared.data(),
        "v_shared" => grads.d_v_shared.data(),
        "a" => grads.d_a.data(),
        "b" => grads.d_b.data(),
        "codebook" => grads.d_codebook.data(),
        "codebook_q" => grads.d_codebook_q.as_ref().unwrap().data(),
        "reduction" => grads.d_reduction.as_ref().unwrap().data(),
        _ => unreachable!("unknown tensor {tensor}"),
    }
}

/// Central-difference check of the full chain against [`chain_backward`]
/// plus a feature-gradient check against [`jcf_shared_backward`].
///
/// Builds a random instance from `seed`, computes the analytic gradients of
/// `loss = ⟨upstream, embed(raw)⟩`, then perturbs every scalar parameter by
/// `±step` and compares. Deterministic given `(config, seed)`.
pub fn finite_diff_check(config: &FdConfig, seed: u64) -> Result<FdCheckReport> {
    let spec = ModelSpec {
        method: Method::JcfShared {
            n: config.n_words,
            r: config.rank,
        },
        d_in: config.d_in,
        d: config.d,
        out_dim: config.out_dim,
        temperature: config.temperature,
        hard_assign: false,
        normalize_output: config.normalize_output,
        dual_codebook: config.dual_codebook,
        ..ModelSpec::default()
    };
    let splitter = SeedSplitter::new(seed);
    let model = PoolModel::init(&spec, &splitter, None)?;

    let mut rng = splitter.stream("fdcheck");
    let raw_data: Vec<f64> = (0..config.d_in * config.locations)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let raw = FeatureSet::new(Matrix::from_vec(config.d_in, config.locations, raw_data)?)?;
    let upstream = Vector::new(
        (0..config.out_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );

    let (_, grads) = chain_backward(&model, &raw, &upstream)?;
    let ModelGrads::Pooled(bundle) = grads else {
        unreachable!("shared method yields pooled grads");
    };

    let loss = |m: &PoolModel| -> f64 {
        let z = m.embed(&raw).expect("fd forward");
        dot(z.as_slice(), upstream.as_slice())
    };

    let mut per_tensor = BTreeMap::new();
    let mut tensors: Vec<&str> = FD_TENSORS.to_vec();
    if config.dual_codebook {
        tensors.push("codebook_q");
    }
    for tensor in tensors {
        let len = tensor_len(&model, tensor);
        let analytic = analytic_tensor(&bundle, tensor);
        let mut worst = 0.0f64;
        for idx in 0..len {
            let mut plus = model.clone();
            perturb(&mut plus, tensor, idx, config.step);
            let mut minus = model.clone();
            perturb(&mut minus, tensor, idx, -config.step);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * config.step);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
        per_tensor.insert(tensor.to_string(), worst);
    }

    // feature gradients: checked at the pooling stage, where the features
    // are the leaves
    {
        let reduced = reduce_features(&raw, &model.reduction)?;
        let cb = model.codebook.as_ref().unwrap();
        let params = model.shared.as_ref().unwrap();
        let (_, pb) = pooled_forward_backward(
            &reduced,
            cb,
            model.codebook_q.as_ref(),
            params,
            &upstream,
            config.normalize_output,
        )?;
        let mut worst = 0.0f64;
        for m in 0..reduced.count() {
            for k in 0..reduced.dim() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut cols = reduced.columns().clone();
                    cols.set(k, m, cols.get(k, m) + delta);
                    let fs = FeatureSet::new(cols)?;
                    let rep = crate::pooling::jcf_shared_pool_dual(
                        &fs,
                        cb,
                        model.codebook_q.as_ref().unwrap_or(cb),
                        params,
                    )?;
                    let mut z = rep.values.into_vec();
                    if config.normalize_output {
                        crate::linalg::l2_normalize_in_place(&mut z, DEFAULT_EPS);
                    }
                    Ok(dot(&z, upstream.as_slice()))
                };
                let numeric = (eval(config.step)? - eval(-config.step)?) / (2.0 * config.step);
                worst = worst.max(rel_err(pb.d_features.get(k, m), numeric));
            }
        }
        per_tensor.insert("features".to_string(), worst);
    }

    let max_rel_err = per_tensor.values().cloned().fold(0.0, f64::max);
    Ok(FdCheckReport {
        seed,
        step: config.step,
        threshold: config.threshold,
        pass: max_rel_err < config.threshold,
        max_rel_err,
        per_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_instance(
        seed: u64,
        m: usize,
    ) -> (FeatureSet, Codebook, JcfSharedParams, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n, r, out) = (4, 3, 2, 2);
        let xs = FeatureSet::new(
            Matrix::from_vec(d, m, (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let cb = Codebook::new(
            Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
            AssignMode::Soft { temperature: 0.1 },
        )
        .unwrap();
        let params = JcfSharedParams {
            u_shared: ProjectorSet::from_vec(
                out,
                d,
                r,
                (0..out * d * r).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            v_shared: ProjectorSet::from_vec(
                out,
                d,
                r,
                (0..out * d * r).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            a: Matrix::from_vec(n, r, (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
            b: Matrix::from_vec(n, r, (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        };
        let upstream = Vector::new((0..out).map(|_| rng.random_range(-1.0..1.0)).collect());
        (xs, cb, params, upstream)
    }

    #[test]
    fn zero_features_give_zero_projector_grads() {
        let (_, cb, params, upstream) = small_instance(1, 3);
        let xs = FeatureSet::new(Matrix::zeros(4, 3)).unwrap();
        let b = jcf_shared_backward(&xs, &cb, &params, &upstream, false).unwrap();
        assert!(b.d_u_shared.data().iter().all(|&v| v == 0.0));
        assert!(b.d_v_shared.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_exactly_zero_grads() {
        let (xs, cb, params, _) = small_instance(2, 3);
        let upstream = Vector::zeros(2);
        let b = jcf_shared_backward(&xs, &cb, &params, &upstream, true).unwrap();
        for data in [
            b.d_u_shared.data(),
            b.d_v_shared.data(),
            b.d_a.data(),
            b.d_b.data(),
            b.d_codebook.data(),
            b.d_features.data(),
        ] {
            assert!(data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hard_mode_is_rejected() {
        let (xs, _, params, upstream) = small_instance(3, 3);
        let cb = Codebook::new(Matrix::identity(4), AssignMode::Hard).unwrap();
        let cb = {
            // shrink to 3 words to match params
            let mut words = Matrix::zeros(3, 4);
            for j in 0..3 {
                words.row_mut(j).copy_from_slice(cb.word(j));
            }
            Codebook::new(words, AssignMode::Hard).unwrap()
        };
        let err = jcf_shared_backward(&xs, &cb, &params, &upstream, false).unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }

    #[test]
    fn gradients_are_additive_over_locations() {
        let (x1, cb, params, upstream) = small_instance(4, 3);
        let (x2, _, _, _) = small_instance(5, 4);
        let cat = x1.concat(&x2).unwrap();
        let whole = jcf_shared_backward(&cat, &cb, &params, &upstream, false).unwrap();
        let mut parts = jcf_shared_backward(&x1, &cb, &params, &upstream, false).unwrap();
        let p2 = jcf_shared_backward(&x2, &cb, &params, &upstream, false).unwrap();
        parts.accumulate_params(&p2);
        for (a, b) in [
            (whole.d_u_shared.data(), parts.d_u_shared.data()),
            (whole.d_v_shared.data(), parts.d_v_shared.data()),
            (whole.d_a.data(), parts.d_a.data()),
            (whole.d_b.data(), parts.d_b.data()),
            (whole.d_codebook.data(), parts.d_codebook.data()),
        ] {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|y| y.powi(2)).sum::<f64>().sqrt().max(1e-30);
            assert!(num / den < 1e-10, "relative gap {}", num / den);
        }
    }

    #[test]
    fn fd_check_passes_on_default_instance() {
        let report = finite_diff_check(&FdConfig::default(), 12345).unwrap();
        assert!(report.pass, "report: {report:?}");
    }

    #[test]
    fn fd_check_passes_with_dual_codebook() {
        let cfg = FdConfig {
            dual_codebook: true,
            ..FdConfig::default()
        };
        let report = finite_diff_check(&cfg, 777).unwrap();
        assert!(report.pass, "report: {report:?}");
        assert!(report.per_tensor.contains_key("codebook_q"));
    }

    #[test]
    fn fd_check_is_deterministic() {
        let a = finite_diff_check(&FdConfig::default(), 9).unwrap();
        let b = finite_diff_check(&FdConfig::default(), 9).unwrap();
        assert_eq!(a.per_tensor, b.per_tensor);
        assert_eq!(a.max_rel_err, b.max_rel_err);
    }

    #[test]
    fn linear_subpath_is_fd_exact() {
        // With normalization off, the loss is linear in the u-projectors,
        // so central differences are exact up to roundoff.
        let (xs, cb, params, upstream) = small_instance(6, 3);
        let bundle = jcf_shared_backward(&xs, &cb, &params, &upstream, false).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..params.u_shared.data().len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.u_shared.data_mut()[idx] += delta;
                let rep = crate::pooling::jcf_shared_pool(&xs, &cb, &p).unwrap();
                dot(rep.values.as_slice(), upstream.as_slice())
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(bundle.d_u_shared.data()[idx], numeric));
        }
        assert!(worst < 1e-7, "worst {worst}");
    }

    #[test]
    fn sgd_applies_definition() {
        // scalar case: p = 1, g = 0.5, lr = 0.1 -> 0.95
        let mut p = [1.0];
        step(&mut p, &[0.5], 0.1).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_and_zero_grads_leave_params() {
        let spec = ModelSpec {
            method: Method::JcfShared { n: 3, r: 2 },
            d_in: 6,
            d: 4,
            out_dim: 2,
            ..ModelSpec::default()
        };
        let splitter = SeedSplitter::new(3);
        let mut model = PoolModel::init(&spec, &splitter, None).unwrap();
        let before = model.shared.as_ref().unwrap().u_shared.data().to_vec();
        let cb_before = model.codebook.as_ref().unwrap().words().data().to_vec();

        let params = model.shared.as_ref().unwrap();
        let zeros = ModelGrads::Pooled(Box::new(GradientBundle::zeros(params, 4, 1, false)));
        sgd_step(&mut model, &zeros, 0.1).unwrap();
        assert_eq!(model.shared.as_ref().unwrap().u_shared.data(), &before[..]);
        // codebook rows were already unit, so renormalization is a no-op
        let cb_after = model.codebook.as_ref().unwrap().words().data().to_vec();
        for (a, b) in cb_before.iter().zip(&cb_after) {
            assert!((a - b).abs() < 1e-12);
        }

        // lr = 0 with nonzero grads also leaves parameters alone
        let mut g = GradientBundle::zeros(model.shared.as_ref().unwrap(), 4, 1, false);
        g.d_u_shared.data_mut().fill(1.0);
        sgd_step(&mut model, &ModelGrads::Pooled(Box::new(g)), 0.0).unwrap();
        assert_eq!(model.shared.as_ref().unwrap().u_shared.data(), &before[..]);
    }

    #[test]
    fn sgd_rejects_non_finite_grads_with_tensor_name() {
        let spec = ModelSpec {
            method: Method::JcfShared { n: 3, r: 2 },
            d_in: 6,
            d: 4,
            out_dim: 2,
            ..ModelSpec::default()
        };
        let mut model = PoolModel::init(&spec, &SeedSplitter::new(4), None).unwrap();
        let mut g = GradientBundle::zeros(model.shared.as_ref().unwrap(), 4, 1, false);
        g.d_a.data_mut()[0] = f64::NAN;
        let err = sgd_step(&mut model, &ModelGrads::Pooled(Box::new(g)), 0.1).unwrap_err();
        match err {
            Error::NonFinite { tensor } => assert_eq!(tensor, "d_a"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
