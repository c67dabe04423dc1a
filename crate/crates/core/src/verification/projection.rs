//! Least-squares projection of iterates onto their history, the
//! projection-decay experiment, and the perpendicular-moment bookkeeping.

use nalgebra::{DMatrix, DVector};

use crate::amp::AmpTrajectory;
use crate::error::{Error, Result};
use crate::rng::{key2, key3, KeyStream};
use crate::stats;

use super::report::{CheckRecord, VerificationReport};

/// v split into its least-squares projection onto a basis and the residual.
#[derive(Debug, Clone)]
pub struct ProjectionDecomposition {
    pub coefficients: Vec<f64>,
    pub parallel: Vec<f64>,
    pub perp: Vec<f64>,
    /// Condition number of the basis Gram matrix (squared singular-value
    /// ratio of the basis); 1 for an empty basis.
    pub gram_condition: f64,
    /// ⟨perp, perp⟩ — the finite-n surrogate of the perpendicular variance.
    pub perp_second_moment: f64,
    /// True when the Gram condition exceeded 1e10 and the pseudo-inverse
    /// fallback produced the minimum-norm coefficients.
    pub rank_deficient: bool,
}

const COND_LIMIT: f64 = 1e10;

/// Least-squares coefficients of v against the basis columns.
/// An empty basis is the t = 0 convention: parallel = 0, perp = v.
pub fn decompose(v: &[f64], basis: &[Vec<f64>]) -> Result<ProjectionDecomposition> {
    let n = v.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    if basis.is_empty() {
        return Ok(ProjectionDecomposition {
            coefficients: Vec::new(),
            parallel: vec![0.0; n],
            perp: v.to_vec(),
            gram_condition: 1.0,
            perp_second_moment: stats::emp_second_moment(v)?,
            rank_deficient: false,
        });
    }
    if basis.iter().any(|b| b.len() != n) {
        return Err(Error::InvalidInput("basis length mismatch".into()));
    }
    let k = basis.len();
    let b = DMatrix::from_fn(n, k, |i, j| basis[j][i]);
    let rhs = DVector::from_column_slice(v);
    let svd = b.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        (smax / smin) * (smax / smin)
    } else {
        f64::INFINITY
    };
    let rank_deficient = cond > COND_LIMIT;
    // pseudo-inverse fallback: truncate singular values below a relative cutoff
    let coeffs = svd
        .solve(&rhs, smax * 1e-13)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let parallel_v = &b * &coeffs;
    let parallel: Vec<f64> = parallel_v.iter().copied().collect();
    let perp: Vec<f64> = v.iter().zip(&parallel).map(|(a, p)| a - p).collect();
    let perp_second_moment = stats::emp_second_moment(&perp).unwrap_or(0.0);
    Ok(ProjectionDecomposition {
        coefficients: coeffs.iter().copied().collect(),
        parallel,
        perp,
        gram_condition: cond,
        perp_second_moment,
        rank_deficient,
    })
}

/// Orthonormal basis of dimension t in R^n from keyed Gaussian draws
/// (modified Gram–Schmidt).
pub fn random_orthonormal_basis(n: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(t);
    for j in 0..t {
        let mut s = KeyStream::new(key2(seed, j as u64), 0x0b);
        let mut v: Vec<f64> = (0..n)
            .map(|_| crate::distributions::normal::std_normal_quantile(s.next_unit_open()))
            .collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    basis
}

/// Empirical check that ‖P_M a‖²/n of an isotropic vector against a fixed
/// t-dimensional subspace tracks t·σ_a²/n and decays along the size grid.
pub fn projection_decay(
    sigma_a: f64,
    basis_dim: usize,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if n_grid.iter().any(|&n| basis_dim >= n) {
        return Err(Error::InvalidInput(
            "basis dimension must be below every grid size".into(),
        ));
    }
    let mut report = VerificationReport::new();
    let mut means = Vec::with_capacity(n_grid.len());
    for (gi, &n) in n_grid.iter().enumerate() {
        let mut acc = 0.0;
        for rep in 0..reps {
            let rep_seed = key3(seed, gi as u64, rep as u64);
            let basis = random_orthonormal_basis(n, basis_dim, rep_seed);
            let mut s = KeyStream::new(rep_seed ^ 0xA, 1);
            let a: Vec<f64> = (0..n)
                .map(|_| {
                    sigma_a
                        * crate::distributions::normal::std_normal_quantile(s.next_unit_open())
                })
                .collect();
            let proj_sq: f64 = basis
                .iter()
                .map(|b| {
                    let dot: f64 = b.iter().zip(&a).map(|(x, y)| x * y).sum();
                    dot * dot
                })
                .sum();
            acc += proj_sq / n as f64;
        }
        let mean = acc / reps as f64;
        means.push(mean);
        let expect = basis_dim as f64 * sigma_a * sigma_a / n as f64;
        let pass = if basis_dim == 0 {
            mean == 0.0
        } else {
            mean >= 0.5 * expect && mean <= 2.0 * expect
        };
        report.push(
            CheckRecord::new(format!("projection_decay.n{n}"), mean, 2.0 * expect)
                .with_pass(pass)
                .with_sizes(Some(n), None)
                .with_reps(reps)
                .with_seed(seed)
                .with_note(format!("expected {expect:.3e}, factor-2 band")),
        );
    }
    let decreasing = means.windows(2).all(|w| w[1] < w[0]) || basis_dim == 0;
    report.push(
        CheckRecord::new("projection_decay.monotone", if decreasing { 0.0 } else { 1.0 }, 0.5)
            .with_pass(decreasing)
            .with_seed(seed),
    );
    Ok(report)
}

/// Per-iteration (2+2α)-moments of the perpendicular components of q^t and
/// m^t against their histories, checked against the undecomposed vectors.
pub fn perp_moment_check(traj: &AmpTrajectory, alpha: f64) -> Result<VerificationReport> {
    if alpha <= 1.0 {
        return Err(Error::InvalidInput(format!("alpha = {alpha} must be > 1")));
    }
    let vecs = traj
        .vectors
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("trajectory has no retained vectors".into()))?;
    let p = 2.0 + 2.0 * alpha;
    let mut report = VerificationReport::new();
    for (label, family) in [("q", &vecs.q), ("m", &vecs.m)] {
        for t in 0..family.len() {
            let dec = decompose(&family[t], &family[..t].to_vec())?;
            let perp_moment = stats::power_mean(&dec.perp, p)?;
            let full_moment = stats::power_mean(&family[t], p)?;
            let pass = perp_moment.is_finite() && perp_moment <= full_moment + 1e-9;
            report.push(
                CheckRecord::new(format!("perp_moment.{label}{t}"), perp_moment, full_moment + 1e-9)
                    .with_pass(pass)
                    .with_note(format!("gram condition {:.3e}", dec.gram_condition)),
            );
        }
    }
    Ok(report)
}
