//! The general AMP recursion with automatic Onsager coefficients.
//!
//! Per iteration t (h⁰ = 0, m⁻¹ = 0, q⁰ given):
//!
//! ```text
//! q^t = f_t(h^t, x0)            (t >= 1; q^0 is the initial condition)
//! λ_t = ⟨f'_t(h^t, x0)⟩ / ρ     (λ_0 := 0 — it multiplies m^{-1} = 0)
//! b^t = A q^t − λ_t m^{t−1}
//! ξ_t = ⟨g'_t(b^t, w)⟩
//! m^t = g_t(b^t, w)
//! h^{t+1} = A* m^t − ξ_t q^t
//! ```
//!
//! The update order is fixed: λ_t needs h^t before b^t exists. Iterates
//! with any |entry| above the divergence cap abort with the failing
//! iteration attached.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::denoisers::{deriv_vec, eval_vec, soft_threshold, Denoiser, DenoiserSpec, Schedule};
use crate::ensembles::Matrix;
use crate::error::{Error, Result};
use crate::stats;

/// Observation model y = A x0 + w, carried as (A, x0, w); the recursion
/// consumes x0 and w directly.
#[derive(Debug, Clone)]
pub struct AmpProblem {
    pub a: Matrix,
    pub x0: Vec<f64>,
    pub w: Vec<f64>,
}

impl AmpProblem {
    pub fn new(a: Matrix, x0: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if x0.len() != a.cols() || w.len() != a.rows() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: A is {}x{}, x0 len {}, w len {}",
                a.rows(),
                a.cols(),
                x0.len(),
                w.len()
            )));
        }
        if a.rho() > 1.0 {
            return Err(Error::InvalidInput(format!(
                "aspect ratio rho = {} must be in (0, 1]",
                a.rho()
            )));
        }
        if x0.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite signal or noise".into()));
        }
        Ok(AmpProblem { a, x0, w })
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn big_n(&self) -> usize {
        self.a.cols()
    }

    pub fn rho(&self) -> f64 {
        self.a.rho()
    }

    /// y = A x0 + w.
    pub fn observation(&self) -> Result<Vec<f64>> {
        let mut y = self.a.matvec(&self.x0)?;
        for (yi, wi) in y.iter_mut().zip(&self.w) {
            *yi += wi;
        }
        Ok(y)
    }
}

/// Mutable recursion state between steps.
#[derive(Debug, Clone)]
pub struct AmpState {
    pub t: usize,
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub m: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub lambda_t: f64,
    pub xi_t: f64,
    /// ⟨q⁰,q⁰⟩/ρ, recorded at init.
    pub sigma0_sq_emp: f64,
}

/// Initialize at t = 0 with h⁰ = 0_N, m⁻¹ = 0_n and the given q⁰.
pub fn init(problem: &AmpProblem, q0: Vec<f64>) -> Result<AmpState> {
    if q0.len() != problem.big_n() {
        return Err(Error::InvalidInput(format!(
            "q0 length {} != N = {}",
            q0.len(),
            problem.big_n()
        )));
    }
    let sigma0_sq_emp = stats::inner(&q0, &q0)? / problem.rho();
    Ok(AmpState {
        t: 0,
        h: vec![0.0; problem.big_n()],
        q: q0,
        b: Vec::new(),
        m: Vec::new(),
        m_prev: vec![0.0; problem.n()],
        lambda_t: 0.0,
        xi_t: 0.0,
        sigma0_sq_emp,
    })
}

/// λ_t = ⟨f'_t(h^t, x0)⟩ / ρ.
pub fn onsager_lambda(
    f: &dyn Denoiser,
    t: usize,
    h: &[f64],
    x0: &[f64],
    rho: f64,
) -> Result<f64> {
    let d = deriv_vec(f, t, h, x0)?;
    Ok(stats::emp_mean(&d)? / rho)
}

/// ξ_t = ⟨g'_t(b^t, w)⟩.
pub fn onsager_xi(g: &dyn Denoiser, t: usize, b: &[f64], w: &[f64]) -> Result<f64> {
    let d = deriv_vec(g, t, b, w)?;
    stats::emp_mean(&d)
}

/// Run controls.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Keep full per-iteration vectors on the returned trajectory.
    pub retain_vectors: bool,
    /// Force λ_t = ξ_t = 0 (for the Onsager-necessity experiment).
    pub zero_onsager: bool,
    /// Abort when any iterate entry exceeds this magnitude.
    pub divergence_cap: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            retain_vectors: false,
            zero_onsager: false,
            divergence_cap: 1e12,
        }
    }
}

fn check_bounded(v: &[f64], cap: f64, what: &str, t: usize) -> Result<()> {
    for &x in v {
        if !x.is_finite() || x.abs() > cap {
            return Err(Error::numerical_at(format!("{what} diverged: entry {x}"), t));
        }
    }
    Ok(())
}

/// Advance the state by one iteration.
pub fn step(
    state: &mut AmpState,
    problem: &AmpProblem,
    f: &dyn Denoiser,
    g: &dyn Denoiser,
    opts: &RunOptions,
) -> Result<()> {
    let t = state.t;
    let rho = problem.rho();
    let fail = |e: Error| match e {
        Error::NumericalFailure { context, .. } => Error::numerical_at(context, t),
        other => other,
    };

    if t > 0 {
        state.q = eval_vec(f, t, &state.h, &problem.x0).map_err(fail)?;
    }
    check_bounded(&state.q, opts.divergence_cap, "q", t)?;

    state.lambda_t = if t == 0 || opts.zero_onsager {
        0.0
    } else {
        onsager_lambda(f, t, &state.h, &problem.x0, rho).map_err(fail)?
    };

    let mut b = problem.a.matvec(&state.q)?;
    if state.lambda_t != 0.0 {
        for (bi, mp) in b.iter_mut().zip(&state.m_prev) {
            *bi -= state.lambda_t * mp;
        }
    }
    check_bounded(&b, opts.divergence_cap, "b", t)?;
    state.b = b;

    state.xi_t = if opts.zero_onsager {
        0.0
    } else {
        onsager_xi(g, t, &state.b, &problem.w).map_err(fail)?
    };

    state.m = eval_vec(g, t, &state.b, &problem.w).map_err(fail)?;
    check_bounded(&state.m, opts.divergence_cap, "m", t)?;

    let mut h = problem.a.matvec_t(&state.m)?;
    if state.xi_t != 0.0 {
        for (hi, qi) in h.iter_mut().zip(&state.q) {
            *hi -= state.xi_t * qi;
        }
    }
    check_bounded(&h, opts.divergence_cap, "h", t)?;
    state.h = h;

    state.m_prev = state.m.clone();
    state.t = t + 1;
    Ok(())
}

/// Scalar summaries of iteration t. `hh` is ⟨h^{t+1}, h^{t+1}⟩ — the h
/// produced by step t — matching the pairing of Theorem-1c checks.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterRecord {
    pub t: usize,
    pub qq: f64,
    pub bb: f64,
    pub hh: f64,
    pub mm: f64,
    pub lambda: f64,
    pub xi: f64,
}

/// Full per-iteration vectors; `h[t]` holds h^{t+1}.
#[derive(Debug, Clone)]
pub struct RetainedVectors {
    pub q: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

/// Cross-time Gram tables: `q[t1][t2]` = ⟨q^{t1}, q^{t2}⟩ and likewise for
/// b and m; `h[t1][t2]` = ⟨h^{t1+1}, h^{t2+1}⟩.
#[derive(Debug, Clone, Serialize)]
pub struct GramTables {
    pub q: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AmpTrajectory {
    pub records: Vec<IterRecord>,
    pub gram: GramTables,
    pub sigma0_sq_emp: f64,
    pub rho: f64,
    pub vectors: Option<RetainedVectors>,
}

fn gram_of(vecs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = vecs.len();
    let mut g = vec![vec![0.0; t]; t];
    for t1 in 0..t {
        for t2 in t1..t {
            let v = stats::inner(&vecs[t1], &vecs[t2]).unwrap_or(f64::NAN);
            g[t1][t2] = v;
            g[t2][t1] = v;
        }
    }
    g
}

/// Run T iterations and collect summaries, Gram tables, and (optionally)
/// the full iterate vectors. Deterministic given its inputs.
pub fn run(
    problem: &AmpProblem,
    q0: Vec<f64>,
    f: &dyn Denoiser,
    g: &dyn Denoiser,
    iterations: usize,
    opts: &RunOptions,
) -> Result<AmpTrajectory> {
    if iterations == 0 {
        return Err(Error::InvalidInput("iterations must be >= 1".into()));
    }
    let mut state = init(problem, q0)?;
    let mut retained = RetainedVectors {
        q: Vec::with_capacity(iterations),
        b: Vec::with_capacity(iterations),
        m: Vec::with_capacity(iterations),
        h: Vec::with_capacity(iterations),
    };
    let mut records = Vec::with_capacity(iterations);
    for t in 0..iterations {
        step(&mut state, problem, f, g, opts)?;
        records.push(IterRecord {
            t,
            qq: stats::inner(&state.q, &state.q)?,
            bb: stats::inner(&state.b, &state.b)?,
            hh: stats::inner(&state.h, &state.h)?,
            mm: stats::inner(&state.m, &state.m)?,
            lambda: state.lambda_t,
            xi: state.xi_t,
        });
        retained.q.push(state.q.clone());
        retained.b.push(state.b.clone());
        retained.m.push(state.m.clone());
        retained.h.push(state.h.clone());
    }
    let gram = GramTables {
        q: gram_of(&retained.q),
        b: gram_of(&retained.b),
        m: gram_of(&retained.m),
        h: gram_of(&retained.h),
    };
    Ok(AmpTrajectory {
        records,
        gram,
        sigma0_sq_emp: state.sigma0_sq_emp,
        rho: problem.rho(),
        vectors: opts.retain_vectors.then_some(retained),
    })
}

impl AmpTrajectory {
    /// Reconstruction MSE sequence of the CS adapter: ⟨q^t, q^t⟩ per t.
    pub fn mse(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.qq).collect()
    }

    /// CSV export with the v1 schema header.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# amp-evolve schema v1")?;
        writeln!(w, "t,qq,bb,hh,mm,lambda,xi")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.t, r.qq, r.bb, r.hh, r.mm, r.lambda, r.xi
            )?;
        }
        Ok(())
    }

    pub fn gram_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": "amp-evolve gram v1",
            "rho": self.rho,
            "sigma0_sq_emp": self.sigma0_sq_emp,
            "gram": &self.gram,
        })
    }
}

// ---------------------------------------------------------------------------
// compressed-sensing adapter

/// How the CS soft-threshold schedule is chosen.
#[derive(Debug, Clone)]
pub enum ThresholdPolicy {
    /// θ_t supplied up front (e.g. κ·τ_t from the SE recursion).
    Schedule(Vec<f64>),
    /// θ_t = κ·√⟨m^t, m^t⟩ from the run itself.
    EmpiricalCoupled { kappa: f64 },
}

/// The standard CS instantiation: f_t(h, x0) = η_{θ_{t−1}}(x0 − h) − x0,
/// g_t(b, w) = b − w.
pub struct CsAdapter {
    pub f: Arc<dyn Denoiser>,
    pub g: Arc<dyn Denoiser>,
}

/// Build the CS denoiser pair from an explicit θ schedule.
pub fn cs_adapter(thetas: Vec<f64>, theta_init: Option<f64>) -> Result<CsAdapter> {
    let f = DenoiserSpec::CsSoftThresholdF {
        schedule: Schedule::Explicit { values: thetas },
        theta_init,
    }
    .build()?;
    let g = DenoiserSpec::Residual.build()?;
    Ok(CsAdapter { f, g })
}

/// q⁰ = η_{θ_init}(x0 − 0) − x0; θ_init = None means ∞ (cold start −x0).
pub fn cs_q0(x0: &[f64], theta_init: Option<f64>) -> Vec<f64> {
    match theta_init {
        None => x0.iter().map(|&x| -x).collect(),
        Some(th) if th.is_infinite() => x0.iter().map(|&x| -x).collect(),
        Some(th) => x0.iter().map(|&x| soft_threshold(x, th) - x).collect(),
    }
}

/// Run the CS adapter under the given threshold policy. Returns the
/// trajectory and the realized θ sequence (θ_0 … θ_{T−1}).
pub fn run_cs(
    problem: &AmpProblem,
    policy: &ThresholdPolicy,
    theta_init: Option<f64>,
    iterations: usize,
    opts: &RunOptions,
) -> Result<(AmpTrajectory, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::InvalidInput("iterations must be >= 1".into()));
    }
    if let ThresholdPolicy::Schedule(thetas) = policy {
        if thetas.len() < iterations {
            return Err(Error::InvalidInput(format!(
                "schedule length {} < T = {iterations}",
                thetas.len()
            )));
        }
        let adapter = cs_adapter(thetas.clone(), theta_init)?;
        let q0 = cs_q0(&problem.x0, theta_init);
        let traj = run(
            problem,
            q0,
            adapter.f.as_ref(),
            adapter.g.as_ref(),
            iterations,
            opts,
        )?;
        return Ok((traj, thetas[..iterations].to_vec()));
    }
    let ThresholdPolicy::EmpiricalCoupled { kappa } = policy else {
        unreachable!()
    };

    let g = DenoiserSpec::Residual.build()?;
    let mut thetas: Vec<f64> = Vec::with_capacity(iterations);
    let mut state = init(problem, cs_q0(&problem.x0, theta_init))?;
    let mut records = Vec::with_capacity(iterations);
    let mut retained = RetainedVectors {
        q: Vec::new(),
        b: Vec::new(),
        m: Vec::new(),
        h: Vec::new(),
    };
    for t in 0..iterations {
        let f = DenoiserSpec::CsSoftThresholdF {
            schedule: Schedule::Explicit {
                values: if thetas.is_empty() { vec![f64::INFINITY] } else { thetas.clone() },
            },
            theta_init,
        }
        .build()?;
        step(&mut state, problem, f.as_ref(), g.as_ref(), opts)?;
        let mm = stats::inner(&state.m, &state.m)?;
        thetas.push(kappa * mm.sqrt());
        records.push(IterRecord {
            t,
            qq: stats::inner(&state.q, &state.q)?,
            bb: stats::inner(&state.b, &state.b)?,
            hh: stats::inner(&state.h, &state.h)?,
            mm,
            lambda: state.lambda_t,
            xi: state.xi_t,
        });
        retained.q.push(state.q.clone());
        retained.b.push(state.b.clone());
        retained.m.push(state.m.clone());
        retained.h.push(state.h.clone());
    }
    let gram = GramTables {
        q: gram_of(&retained.q),
        b: gram_of(&retained.b),
        m: gram_of(&retained.m),
        h: gram_of(&retained.h),
    };
    Ok((
        AmpTrajectory {
            records,
            gram,
            sigma0_sq_emp: state.sigma0_sq_emp,
            rho: problem.rho(),
            vectors: opts.retain_vectors.then_some(retained),
        },
        thetas,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ScalarDistribution::*;
    use crate::ensembles::{generate, EnsembleSpec, EntryRule};

    fn identity_matrix2() -> Matrix {
        Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn gaussian_problem(n: usize, big_n: usize, seed: u64) -> AmpProblem {
        let spec = EnsembleSpec {
            rule: EntryRule::Homogeneous {
                dist: Gaussian { mean: 0.0, var: 1.0 },
            },
            alpha: 2.0,
        };
        let a = generate(&spec, n, big_n, seed).unwrap();
        let x0 = BernoulliGaussian { eps: 0.1, var: 1.0 }
            .sample(big_n, seed ^ 0x51)
            .unwrap();
        let w = Gaussian { mean: 0.0, var: 1e-4 }
            .sample(n, seed ^ 0x52)
            .unwrap();
        AmpProblem::new(a, x0, w).unwrap()
    }

    #[test]
    fn init_records_empirical_sigma0() {
        let p = gaussian_problem(10, 20, 1);
        let s = init(&p, vec![0.0; 20]).unwrap();
        assert_eq!(s.sigma0_sq_emp, 0.0);
        let q0: Vec<f64> = p.x0.iter().map(|x| -x).collect();
        let s2 = init(&p, q0).unwrap();
        let expect = stats::inner(&p.x0, &p.x0).unwrap() / p.rho();
        assert!((s2.sigma0_sq_emp - expect).abs() < 1e-15);
        assert!(init(&p, vec![0.0; 5]).is_err());
    }

    // [DERIVED] CLT bound: sigma0 from an iid q0 within 5% of E[X0^2]/rho.
    #[test]
    fn init_sigma0_concentrates() {
        let big_n = 10_000;
        let n = 5_000;
        let spec = EnsembleSpec {
            rule: EntryRule::Homogeneous { dist: Rademacher },
            alpha: 2.0,
        };
        let a = generate(&spec, n, big_n, 3).unwrap();
        let x0 = BernoulliGaussian { eps: 0.1, var: 1.0 }.sample(big_n, 8).unwrap();
        let w = vec![0.0; n];
        let p = AmpProblem::new(a, x0, w).unwrap();
        let q0 = BernoulliGaussian { eps: 0.1, var: 1.0 }.sample(big_n, 9).unwrap();
        let s = init(&p, q0).unwrap();
        let target = 0.1 / 0.5;
        assert!(
            (s.sigma0_sq_emp - target).abs() / target < 0.05,
            "{}",
            s.sigma0_sq_emp
        );
    }

    #[test]
    fn onsager_terms_closed_forms() {
        let p = gaussian_problem(10, 20, 2);
        let lin = DenoiserSpec::Linear { a: 3.0 }.build().unwrap();
        let h = vec![0.3; 20];
        let lam = onsager_lambda(lin.as_ref(), 1, &h, &p.x0, p.rho()).unwrap();
        assert!((lam - 3.0 / 0.5).abs() < 1e-12);
        let cs = DenoiserSpec::ConstantSignal.build().unwrap();
        assert_eq!(
            onsager_lambda(cs.as_ref(), 1, &h, &p.x0, p.rho()).unwrap(),
            0.0
        );
        let res = DenoiserSpec::Residual.build().unwrap();
        let b = vec![0.1; 10];
        assert_eq!(onsager_xi(res.as_ref(), 0, &b, &p.w).unwrap(), 1.0);
        let lin_b = DenoiserSpec::Linear { a: -0.7 }.build().unwrap();
        assert!((onsager_xi(lin_b.as_ref(), 0, &b, &p.w).unwrap() + 0.7).abs() < 1e-12);
    }

    // [DERIVED] finite differences of the vector map cross-check lambda for
    // the CS composite; it also equals -(support fraction)/rho.
    #[test]
    fn onsager_lambda_cs_finite_difference() {
        let p = gaussian_problem(50, 100, 5);
        let f = DenoiserSpec::CsSoftThresholdF {
            schedule: Schedule::Fixed { value: 0.4 },
            theta_init: None,
        }
        .build()
        .unwrap();
        let h = Gaussian { mean: 0.0, var: 0.25 }.sample(100, 6).unwrap();
        let t = 2;
        let lam = onsager_lambda(f.as_ref(), t, &h, &p.x0, p.rho()).unwrap();
        // support fraction of the threshold
        let frac = h
            .iter()
            .zip(&p.x0)
            .filter(|(&hi, &xi)| (xi - hi).abs() > 0.4)
            .count() as f64
            / 100.0;
        assert!((lam + frac / p.rho()).abs() < 1e-12);
        // vector-map finite difference
        let d = 1e-6;
        let up: Vec<f64> = h.iter().map(|x| x + d).collect();
        let dn: Vec<f64> = h.iter().map(|x| x - d).collect();
        let fu = eval_vec(f.as_ref(), t, &up, &p.x0).unwrap();
        let fd_ = eval_vec(f.as_ref(), t, &dn, &p.x0).unwrap();
        let fd_lam = fu
            .iter()
            .zip(&fd_)
            .map(|(a, b)| (a - b) / (2.0 * d))
            .sum::<f64>()
            / 100.0
            / p.rho();
        assert!((lam - fd_lam).abs() < 1e-6, "{lam} vs {fd_lam}");
    }

    // [DERIVED] finite-difference oracle for a smooth denoiser's xi.
    #[test]
    fn onsager_xi_tanh_finite_difference() {
        struct Tanh;
        impl Denoiser for Tanh {
            fn name(&self) -> &str {
                "tanh"
            }
            fn eval(&self, _t: usize, u: f64, _s: f64) -> f64 {
                u.tanh()
            }
            fn deriv(&self, _t: usize, u: f64, _s: f64) -> f64 {
                1.0 - u.tanh() * u.tanh()
            }
            fn bound(&self) -> crate::denoisers::ControlledBound {
                crate::denoisers::ControlledBound { c1: 1.0, c2: 1.0, lambda: 1.0 }
            }
        }
        let b = Gaussian { mean: 0.0, var: 1.0 }.sample(200, 12).unwrap();
        let w = vec![0.0; 200];
        let xi = onsager_xi(&Tanh, 0, &b, &w).unwrap();
        let d = 1e-6;
        let fd: f64 = b
            .iter()
            .map(|&x| ((x + d).tanh() - (x - d).tanh()) / (2.0 * d))
            .sum::<f64>()
            / 200.0;
        assert!((xi - fd).abs() < 1e-5);
    }

    #[test]
    fn step_zero_propagation() {
        let p = gaussian_problem(10, 20, 7);
        let f = DenoiserSpec::ConstantSignal.build().unwrap();
        let g = DenoiserSpec::Residual.build().unwrap();
        let mut s = init(&p, vec![0.0; 20]).unwrap();
        step(&mut s, &p, f.as_ref(), g.as_ref(), &RunOptions::default()).unwrap();
        assert!(s.b.iter().all(|&x| x == 0.0));
        let expect_m: Vec<f64> = p.w.iter().map(|w| -w).collect();
        assert_eq!(s.m, expect_m);
        let expect_h = p.a.matvec_t(&expect_m).unwrap();
        assert_eq!(s.h, expect_h);
    }

    // [DERIVED] hand linear-algebra oracle on a 2x2 identity-pattern
    // instance with f = constant_signal, g = residual, q0 = x0:
    // b0 = x0, xi0 = 1, m0 = x0 - w, h1 = (x0 - w) - x0 = -w.
    #[test]
    fn step_hand_instance() {
        let a = identity_matrix2();
        let x0 = vec![1.0, 2.0];
        let w = vec![0.5, -1.0];
        let p = AmpProblem::new(a, x0.clone(), w.clone()).unwrap();
        let f = DenoiserSpec::ConstantSignal.build().unwrap();
        let g = DenoiserSpec::Residual.build().unwrap();
        let mut s = init(&p, x0.clone()).unwrap();
        step(&mut s, &p, f.as_ref(), g.as_ref(), &RunOptions::default()).unwrap();
        assert_eq!(s.b, vec![1.0, 2.0]);
        assert_eq!(s.xi_t, 1.0);
        assert_eq!(s.m, vec![0.5, 3.0]);
        assert_eq!(s.h, vec![-0.5, 1.0]);
        // with constant-signal f, <q,q> stays constant across iterations
        let traj = run(&p, x0, f.as_ref(), g.as_ref(), 4, &RunOptions::default()).unwrap();
        let q0q0 = traj.records[0].qq;
        for r in &traj.records {
            assert!((r.qq - q0q0).abs() < 1e-14);
        }
    }

    // [DERIVED] reference algebra: y - A x_hat^t = -(b^t - w) - lambda_t m^{t-1}.
    #[test]
    fn cs_adapter_residual_identity() {
        let p = gaussian_problem(10, 20, 21);
        let y = p.observation().unwrap();
        let policy = ThresholdPolicy::EmpiricalCoupled { kappa: 1.1402 };
        let opts = RunOptions {
            retain_vectors: true,
            ..Default::default()
        };
        let (traj, thetas) = run_cs(&p, &policy, None, 4, &opts).unwrap();
        let vecs = traj.vectors.as_ref().unwrap();
        for t in 0..4 {
            let xhat: Vec<f64> = vecs.q[t].iter().zip(&p.x0).map(|(q, x)| q + x).collect();
            let ax = p.a.matvec(&xhat).unwrap();
            let lambda = traj.records[t].lambda;
            for i in 0..p.n() {
                let lhs = y[i] - ax[i];
                let m_prev = if t == 0 { 0.0 } else { vecs.m[t - 1][i] };
                let rhs = -(vecs.b[t][i] - p.w[i]) - lambda * m_prev;
                assert!(
                    (lhs - rhs).abs() < 1e-12,
                    "t={t} i={i}: {lhs} vs {rhs}"
                );
            }
        }
        assert_eq!(thetas.len(), 4);
    }

    #[test]
    fn cs_q0_cold_start_and_zero_signal() {
        let x0 = vec![1.0, -0.5, 3.0];
        assert_eq!(cs_q0(&x0, None), vec![-1.0, 0.5, -3.0]);
        // finite theta_init
        assert_eq!(cs_q0(&[2.0], Some(1.0)), vec![1.0 - 2.0]);
        // x0 = 0 keeps the whole trajectory at zero MSE
        let p = AmpProblem::new(
            generate(
                &EnsembleSpec {
                    rule: EntryRule::Homogeneous { dist: Rademacher },
                    alpha: 2.0,
                },
                5,
                10,
                2,
            )
            .unwrap(),
            vec![0.0; 10],
            vec![0.0; 5],
        )
        .unwrap();
        let (traj, _) = run_cs(
            &p,
            &ThresholdPolicy::Schedule(vec![1.0; 3]),
            None,
            3,
            &RunOptions::default(),
        )
        .unwrap();
        assert!(traj.records.iter().all(|r| r.qq == 0.0));
    }

    #[test]
    fn run_is_deterministic_and_gram_consistent() {
        let p = gaussian_problem(40, 80, 9);
        let policy = ThresholdPolicy::EmpiricalCoupled { kappa: 1.1402 };
        let opts = RunOptions {
            retain_vectors: true,
            ..Default::default()
        };
        let (t1, th1) = run_cs(&p, &policy, None, 5, &opts).unwrap();
        let (t2, th2) = run_cs(&p, &policy, None, 5, &opts).unwrap();
        assert_eq!(th1, th2);
        for (a, b) in t1.records.iter().zip(&t2.records) {
            assert_eq!(a.qq, b.qq);
            assert_eq!(a.lambda, b.lambda);
        }
        // stored diagonal equals a recomputation from retained vectors
        let vecs = t1.vectors.as_ref().unwrap();
        for t in 0..5 {
            let qq = stats::inner(&vecs.q[t], &vecs.q[t]).unwrap();
            let rel = (qq - t1.records[t].qq).abs() / qq.max(1e-300);
            assert!(rel < 1e-12);
            assert_eq!(t1.gram.q[t][t], t1.records[t].qq);
        }
        // gram symmetry + psd within 1e-8
        for g in [&t1.gram.q, &t1.gram.b, &t1.gram.m, &t1.gram.h] {
            let k = g.len();
            let m = nalgebra::DMatrix::from_fn(k, k, |i, j| g[i][j]);
            let eig = m.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > -1e-8), "gram not psd");
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(g[i][j], g[j][i]);
                }
            }
        }
    }

    #[test]
    fn run_t1_matches_single_step() {
        let p = gaussian_problem(10, 20, 13);
        let f = DenoiserSpec::ConstantSignal.build().unwrap();
        let g = DenoiserSpec::Residual.build().unwrap();
        let q0: Vec<f64> = p.x0.clone();
        let traj = run(&p, q0.clone(), f.as_ref(), g.as_ref(), 1, &RunOptions::default()).unwrap();
        let mut s = init(&p, q0).unwrap();
        step(&mut s, &p, f.as_ref(), g.as_ref(), &RunOptions::default()).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.records[0].bb, stats::inner(&s.b, &s.b).unwrap());
        assert_eq!(traj.records[0].hh, stats::inner(&s.h, &s.h).unwrap());
    }

    #[test]
    fn divergence_is_loud_with_iteration() {
        let p = gaussian_problem(30, 60, 17);
        // f amplifies h by 10 each round: spectral growth without Onsager
        let f = DenoiserSpec::Linear { a: 10.0 }.build().unwrap();
        let g = DenoiserSpec::Identity.build().unwrap();
        let opts = RunOptions {
            zero_onsager: true,
            ..Default::default()
        };
        let err = run(&p, vec![1.0; 60], f.as_ref(), g.as_ref(), 40, &opts).unwrap_err();
        match err {
            Error::NumericalFailure { iteration, .. } => assert!(iteration.is_some()),
            other => panic!("expected numerical failure, got {other}"),
        }
    }

    #[test]
    fn csv_export_schema() {
        let p = gaussian_problem(10, 20, 23);
        let (traj, _) = run_cs(
            &p,
            &ThresholdPolicy::EmpiricalCoupled { kappa: 1.1402 },
            None,
            2,
            &RunOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# amp-evolve schema v1\nt,qq,bb,hh,mm,lambda,xi\n"));
        assert_eq!(text.lines().count(), 2 + 2);
    }
}
