//! Self-verification suites: oracle equivalences, gradient checks, and
//! cost-model accounting. These back the CLI `check` subcommand and the
//! acceptance tests.
//!
//! The reference computations here are deliberately naive (triple loops,
//! explicit Kronecker sums, materialized projections) and never call the
//! efficient code paths they are checking.

use crate::codebook::{AssignMode, Codebook};
use crate::cost::{self, CostMethod, PoolingConfig};
use crate::error::Result;
use crate::grad::{finite_diff_check, FdConfig};
use crate::linalg::{self, kron, ops_count, Matrix, Vector};
use crate::pooling::{
    bp_full, codebook_bp_naive, jcf_pool, jcf_shared_pool, project_so, rank1_pool,
    reduce_features, FeatureSet, FullProjection, JcfParams, JcfSharedParams, ProjectorSet,
    Rank1Params,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Outcome of one verification suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str, threshold: f64) -> Self {
        SuiteReport {
            name: name.into(),
            cases: 0,
            max_rel_err: 0.0,
            threshold,
            pass: true,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, err: f64, context: &str) {
        self.cases += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
        }
        if !(err < self.threshold) {
            self.pass = false;
            if self.failures.len() < 8 {
                self.failures.push(format!("{context}: rel err {err:.3e}"));
            }
        }
    }

    fn fail(&mut self, context: String) {
        self.cases += 1;
        self.pass = false;
        if self.failures.len() < 8 {
            self.failures.push(context);
        }
    }
}

/// Combined report across suites.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

/// Runs the requested suites (`None` means all) and aggregates.
pub fn run_suites(seed: u64, filter: Option<&str>) -> Result<VerifyReport> {
    let mut suites = Vec::new();
    let want = |name: &str| filter.map_or(true, |f| f == name);
    if want("linalg") {
        suites.push(linalg_suite(seed));
    }
    if want("oracles") {
        suites.push(oracle_suite(seed, 100));
    }
    if want("grad") {
        suites.push(grad_suite(seed, 20)?);
    }
    if want("cost") {
        suites.push(cost_suite(seed));
    }
    if suites.is_empty() {
        return Err(crate::error::Error::input(
            "check",
            format!("unknown suite filter; expected one of linalg, oracles, grad, cost"),
        ));
    }
    let pass = suites.iter().all(|s| s.pass);
    Ok(VerifyReport {
        schema: "jcf-verify/1".into(),
        seed,
        suites,
        pass,
    })
}

fn rel_vec_err(got: &[f64], want: &[f64]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..got.len() {
        num += (got[i] - want[i]).powi(2);
        den += want[i].powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-30)
}

fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive dims")
}

fn rand_features(d: usize, m: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
    FeatureSet::new(rand_matrix(d, m, rng)).expect("finite")
}

fn rand_projectors(dd: usize, d: usize, p: usize, rng: &mut ChaCha8Rng) -> ProjectorSet {
    ProjectorSet::from_vec(
        dd,
        d,
        p,
        (0..dd * d * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive dims")
}

// ---------------------------------------------------------------------------
// linalg suite
// ---------------------------------------------------------------------------

/// Matmul against an independent triple loop (bit-exact), the Kronecker
/// product against its defining double loop, and softmax simplex behavior.
pub fn linalg_suite(seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("linalg", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11a1);
    for case in 0..50 {
        let (m, k, n) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let a = rand_matrix(m, k, &mut rng);
        let b = rand_matrix(k, n, &mut rng);
        let got = linalg::matmul(&a, &b).expect("shapes agree");
        let mut exact = true;
        for i in 0..m {
            for j in 0..n {
                let mut accum = 0.0;
                for kk in 0..k {
                    accum += a.get(i, kk) * b.get(kk, j);
                }
                if got.get(i, j).to_bits() != accum.to_bits() {
                    exact = false;
                }
            }
        }
        if exact {
            report.record(0.0, "matmul");
        } else {
            report.fail(format!("matmul case {case}: not bit-identical to triple loop"));
        }

        let av = Vector::new((0..m).map(|_| rng.random_range(-1.0..1.0)).collect());
        let bv = Vector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let kr = kron(&av, &bv);
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                worst = worst.max((kr[i * n + j] - av[i] * bv[j]).abs());
            }
        }
        report.record(worst, "kron");

        let s = linalg::softmax(&Vector::new(
            (0..k).map(|_| rng.random_range(-30.0..30.0)).collect(),
        ));
        let sum: f64 = s.as_slice().iter().sum();
        report.record((sum - 1.0).abs(), "softmax simplex");
    }
    report
}

// ---------------------------------------------------------------------------
// oracle suite
// ---------------------------------------------------------------------------

/// Builds the materialized `N²d² × D` projection equivalent to factorized
/// per-codeword parameters: `w_i = p_i ⊗ q_i` with
/// `p_i = Σ_j e^(j) ⊗ u_{i,j}`, `q_i = Σ_j e^(j) ⊗ v_{i,j}`.
pub fn materialize_codebook_projection(params: &JcfParams) -> Matrix {
    let d = params.u_set.dim();
    let n = params.u_set.n_proj();
    let dd = params.u_set.out_dim();
    let nd = n * d;
    let mut w = Matrix::zeros(nd * nd, dd);
    for i in 0..dd {
        let mut p = vec![0.0; nd];
        let mut q = vec![0.0; nd];
        for j in 0..n {
            p[j * d..(j + 1) * d].copy_from_slice(params.u_set.proj(i, j));
            q[j * d..(j + 1) * d].copy_from_slice(params.v_set.proj(i, j));
        }
        let kr = kron(&Vector::new(p), &Vector::new(q));
        w.set_col(i, kr.as_slice());
    }
    w
}

/// The four kernel-versus-oracle equivalences on random small instances
/// (`d ≤ 6`, `N ≤ 4`, `R ≤ N`, `D ≤ 4`, `M ≤ 8`), threshold `1e-10`:
///
/// 1. `bp_full` vs `vec(X Xᵀ)`;
/// 2. `rank1_pool` vs `project_so` with `w_i = u_i ⊗ v_i`;
/// 3. `jcf_pool` vs `codebook_bp_naive` with the materialized projection;
/// 4. `jcf_shared_pool` vs `jcf_pool` with `U_i = Ũ_i Aᵀ`.
pub fn oracle_suite(seed: u64, instances: usize) -> SuiteReport {
    let mut report = SuiteReport::new("oracles", 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x08ac1e);
    for case in 0..instances {
        let d = rng.random_range(2..=6);
        let n = rng.random_range(1..=4);
        let r = rng.random_range(1..=n);
        let dd = rng.random_range(1..=4);
        let m = rng.random_range(1..=8);
        let xs = rand_features(d, m, &mut rng);
        let cb = Codebook::new(
            rand_matrix(n, d, &mut rng),
            AssignMode::Soft {
                temperature: rng.random_range(0.05..0.5),
            },
        )
        .expect("soft codebook");

        // 1. bilinear pooling vs the Gram matrix route
        let y = bp_full(&xs).expect("bp_full");
        let gram = linalg::matmul(xs.columns(), &xs.columns().transpose()).expect("gram");
        report.record(
            rel_vec_err(y.as_slice(), gram.data()),
            &format!("bp_full case {case}"),
        );

        // 2. rank-one factorization vs materialized Kronecker projection
        let u = rand_matrix(dd, d, &mut rng);
        let v = rand_matrix(dd, d, &mut rng);
        let mut w = Matrix::zeros(d * d, dd);
        for i in 0..dd {
            let k = kron(
                &Vector::new(u.row(i).to_vec()),
                &Vector::new(v.row(i).to_vec()),
            );
            w.set_col(i, k.as_slice());
        }
        let fast = rank1_pool(&xs, &Rank1Params { u, v }).expect("rank1");
        let slow = project_so(&xs, &FullProjection { w }).expect("project");
        report.record(
            rel_vec_err(fast.values.as_slice(), slow.values.as_slice()),
            &format!("rank1 case {case}"),
        );

        // 3. factorized codebook pooling vs the materialized naive path
        let params = JcfParams {
            u_set: rand_projectors(dd, d, n, &mut rng),
            v_set: rand_projectors(dd, d, n, &mut rng),
        };
        let fast = jcf_pool(&xs, &cb, &params).expect("jcf");
        let w = materialize_codebook_projection(&params);
        let slow = codebook_bp_naive(&xs, &cb, &w).expect("naive");
        report.record(
            rel_vec_err(fast.values.as_slice(), slow.values.as_slice()),
            &format!("jcf case {case}"),
        );

        // 4. shared projectors vs materialized per-codeword projections
        let shared = JcfSharedParams {
            u_shared: rand_projectors(dd, d, r, &mut rng),
            v_shared: rand_projectors(dd, d, r, &mut rng),
            a: rand_matrix(n, r, &mut rng),
            b: rand_matrix(n, r, &mut rng),
        };
        let fast = jcf_shared_pool(&xs, &cb, &shared).expect("jcf shared");
        let slow = jcf_pool(&xs, &cb, &shared.materialize().expect("materialize"))
            .expect("jcf materialized");
        report.record(
            rel_vec_err(fast.values.as_slice(), slow.values.as_slice()),
            &format!("jcf-shared case {case}"),
        );
    }
    report
}

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

/// Finite-difference checks of the full chain over `n_seeds` random
/// instances (threshold `1e-5`).
pub fn grad_suite(seed: u64, n_seeds: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("grad", 1e-5);
    let cfg = FdConfig::default();
    for s in 0..n_seeds {
        let r = finite_diff_check(&cfg, seed.wrapping_add(s))?;
        report.record(r.max_rel_err, &format!("fd seed {}", seed.wrapping_add(s)));
    }
    // one dual-codebook instance keeps that path honest
    let dual = FdConfig {
        dual_codebook: true,
        ..FdConfig::default()
    };
    let r = finite_diff_check(&dual, seed.wrapping_add(n_seeds))?;
    report.record(r.max_rel_err, "fd dual-codebook");
    Ok(report)
}

// ---------------------------------------------------------------------------
// cost suite
// ---------------------------------------------------------------------------

/// Reference parameter table, the `2N²` sharing overhead, the exact `R/N`
/// projector-stage ratio, and agreement between the closed-form multiply
/// counts and the instrumented kernels.
pub fn cost_suite(seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("cost", 1e-12);
    for (cfg, printed) in cost::table1_configs() {
        match cost::param_count(&cfg) {
            Ok(count) if cost::matches_printed(count, printed) => report.record(0.0, "table"),
            Ok(count) => report.fail(format!(
                "{} N={} R={}: count {} does not print as {}",
                cfg.method.name(),
                cfg.n,
                cfg.r,
                count,
                printed
            )),
            Err(e) => report.fail(format!("param_count failed: {e}")),
        }
    }

    for n in [4usize, 16, 32] {
        let shared = cost::param_count(&PoolingConfig {
            method: CostMethod::JcfShared,
            d_in: 2048,
            d: 256,
            out_dim: 512,
            n,
            r: n,
        })
        .expect("valid");
        let plain = cost::param_count(&PoolingConfig {
            method: CostMethod::Jcf,
            d_in: 2048,
            d: 256,
            out_dim: 512,
            n,
            r: 0,
        })
        .expect("valid");
        if shared - plain == 2 * (n as u64) * (n as u64) {
            report.record(0.0, "sharing overhead");
        } else {
            report.fail(format!("sharing overhead at N={n}: {}", shared - plain));
        }
    }

    // instrumented kernels vs the closed-form counts, exactly
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc057);
    let (d, n, r, dd, m, d_in) = (5usize, 3usize, 2usize, 4usize, 6usize, 7usize);
    let xs = rand_features(d, m, &mut rng);
    let cb = Codebook::new(
        rand_matrix(n, d, &mut rng),
        AssignMode::Soft { temperature: 0.1 },
    )
    .expect("soft codebook");
    let mk = |method, n, r| PoolingConfig {
        method,
        d_in,
        d,
        out_dim: dd,
        n,
        r,
    };

    {
        let params = Rank1Params {
            u: rand_matrix(dd, d, &mut rng),
            v: rand_matrix(dd, d, &mut rng),
        };
        ops_count::reset();
        rank1_pool(&xs, &params).expect("rank1");
        check_counter(&mut report, "factorized", mk(CostMethod::Factorized, 0, 0), m);
    }
    {
        let params = JcfParams {
            u_set: rand_projectors(dd, d, n, &mut rng),
            v_set: rand_projectors(dd, d, n, &mut rng),
        };
        ops_count::reset();
        jcf_pool(&xs, &cb, &params).expect("jcf");
        check_counter(&mut report, "jcf", mk(CostMethod::Jcf, n, 0), m);
    }
    {
        let params = JcfSharedParams {
            u_shared: rand_projectors(dd, d, r, &mut rng),
            v_shared: rand_projectors(dd, d, r, &mut rng),
            a: rand_matrix(n, r, &mut rng),
            b: rand_matrix(n, r, &mut rng),
        };
        ops_count::reset();
        jcf_shared_pool(&xs, &cb, &params).expect("jcf shared");
        check_counter(&mut report, "jcf-shared", mk(CostMethod::JcfShared, n, r), m);
    }
    {
        let w = rand_matrix(d * d, dd, &mut rng);
        ops_count::reset();
        project_so(&xs, &FullProjection { w }).expect("project");
        check_counter(&mut report, "bp", mk(CostMethod::Bp, 0, 0), m);
    }
    {
        let w = rand_matrix(n * n * d * d, dd, &mut rng);
        ops_count::reset();
        codebook_bp_naive(&xs, &cb, &w).expect("naive");
        check_counter(&mut report, "bp-codebook", mk(CostMethod::BpCodebook, n, 0), m);
    }
    {
        let raw = rand_features(d_in, m, &mut rng);
        let red = rand_matrix(d_in, d, &mut rng);
        ops_count::reset();
        reduce_features(&raw, &red).expect("reduce");
        let got = ops_count::total();
        let want = (m as u64) * cost::reduce_flops(d_in as u64, d as u64);
        if got == want {
            report.record(0.0, "reduce counter");
        } else {
            report.fail(format!("reduce counter: got {got}, model {want}"));
        }
    }

    // R/N ratio of the projector stage, in exact integers
    for (n, r) in [(16usize, 4usize), (32, 8), (8, 2)] {
        let shared = cost::projector_stage_flops(&mk(CostMethod::JcfShared, n, r)).expect("valid");
        let plain = cost::projector_stage_flops(&mk(CostMethod::Jcf, n, 0)).expect("valid");
        if shared * n as u64 == plain * r as u64 {
            report.record(0.0, "projector ratio");
        } else {
            report.fail(format!("projector ratio at N={n} R={r}"));
        }
    }
    report
}

fn check_counter(report: &mut SuiteReport, name: &str, cfg: PoolingConfig, m: usize) {
    let got = ops_count::total();
    match cost::flops_estimate(&cfg) {
        Ok(rep) => {
            let want = (m as u64) * rep.flops_per_location + rep.flops_per_set;
            if got == want {
                report.record(0.0, name);
            } else {
                report.fail(format!("{name} counter: kernels used {got}, model says {want}"));
            }
        }
        Err(e) => report.fail(format!("{name}: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_suites(42, None).unwrap();
        for s in &report.suites {
            assert!(s.pass, "suite {} failed: {:?}", s.name, s.failures);
        }
        assert!(report.pass);
    }

    #[test]
    fn filtering_selects_one_suite() {
        let report = run_suites(7, Some("oracles")).unwrap();
        assert_eq!(report.suites.len(), 1);
        assert_eq!(report.suites[0].name, "oracles");
        assert_eq!(report.suites[0].cases, 400); // 4 equivalences x 100 instances
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(run_suites(7, Some("nonsense")).is_err());
    }
}
