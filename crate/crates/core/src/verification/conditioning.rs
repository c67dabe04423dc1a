//! Conditional resampling of the measurement matrix given linear
//! constraints from past iterates: draw a fresh copy, project it off the
//! constrained row/column subspaces, and add the constraint-matching term
//!
//!   B = Y(Q*Q)⁻¹Q* + M(M*M)⁻¹X* − M(M*M)⁻¹X*Q(Q*Q)⁻¹Q*,
//!
//! so the result satisfies A·Q = Y and A*·M = X.

use nalgebra::DMatrix;

use crate::amp::AmpTrajectory;
use crate::ensembles::{generate, EnsembleSpec, Matrix};
use crate::error::{Error, Result};

/// Constraint set {A | A*M = X, AQ = Y}; either side may be empty.
#[derive(Debug, Clone)]
pub struct ConditioningConstraints {
    pub n: usize,
    pub big_n: usize,
    /// n×t
    pub m: DMatrix<f64>,
    /// N×t
    pub x: DMatrix<f64>,
    /// N×t'
    pub q: DMatrix<f64>,
    /// n×t'
    pub y: DMatrix<f64>,
}

const COND_LIMIT: f64 = 1e10;

fn columns_to_dmatrix(rows: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

impl ConditioningConstraints {
    pub fn new(
        n: usize,
        big_n: usize,
        m: Vec<Vec<f64>>,
        x: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if m.len() != x.len() || q.len() != y.len() {
            return Err(Error::InvalidInput(
                "constraint pair counts differ (M vs X, Q vs Y)".into(),
            ));
        }
        if m.iter().any(|c| c.len() != n) || y.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidInput("row-side column length != n".into()));
        }
        if x.iter().any(|c| c.len() != big_n) || q.iter().any(|c| c.len() != big_n) {
            return Err(Error::InvalidInput("column-side column length != N".into()));
        }
        Ok(ConditioningConstraints {
            n,
            big_n,
            m: columns_to_dmatrix(n, &m),
            x: columns_to_dmatrix(big_n, &x),
            q: columns_to_dmatrix(big_n, &q),
            y: columns_to_dmatrix(n, &y),
        })
    }

    /// Frobenius residuals (‖A·Q − Y‖_F/‖Y‖_F, ‖A*·M − X‖_F/‖X‖_F);
    /// an empty side contributes 0.
    pub fn residuals(&self, a: &Matrix) -> (f64, f64) {
        let ad = a.to_dmatrix();
        let rq = if self.q.ncols() > 0 {
            let diff = &ad * &self.q - &self.y;
            diff.norm() / self.y.norm().max(1e-300)
        } else {
            0.0
        };
        let rm = if self.m.ncols() > 0 {
            let diff = ad.transpose() * &self.m - &self.x;
            diff.norm() / self.x.norm().max(1e-300)
        } else {
            0.0
        };
        (rq, rm)
    }
}

/// Gram inverse with condition monitoring; rank-revealing via SVD.
fn gram_inverse(cols: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let gram = cols.transpose() * cols;
    let svd = gram.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > COND_LIMIT {
        return Err(Error::RankDeficient(format!(
            "{label} gram condition {:e} exceeds {COND_LIMIT:e}",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    svd.pseudo_inverse(0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))
}

/// Draw a fresh matrix from the ensemble and condition it on the
/// constraint set: A_cond = P⊥_M · Ã · P⊥_Q + B.
pub fn conditional_resample(
    c: &ConditioningConstraints,
    spec: &EnsembleSpec,
    seed: u64,
) -> Result<Matrix> {
    let has_m = c.m.ncols() > 0;
    let has_q = c.q.ncols() > 0;

    // realizability: X*Q = M*Y (both equal M*AQ for any satisfying A)
    if has_m && has_q {
        let lhs = c.x.transpose() * &c.q;
        let rhs = c.m.transpose() * &c.y;
        let scale = lhs.norm().max(rhs.norm()).max(1.0);
        if (lhs - rhs).norm() > 1e-8 * scale {
            return Err(Error::InconsistentConstraints(
                "X*Q != M*Y beyond tolerance".into(),
            ));
        }
    }

    let fresh = generate(spec, c.n, c.big_n, seed)?;
    let mut a = fresh.to_dmatrix();

    let gm_inv = if has_m {
        Some(gram_inverse(&c.m, "M")?)
    } else {
        None
    };
    let gq_inv = if has_q {
        Some(gram_inverse(&c.q, "Q")?)
    } else {
        None
    };

    // P_perp products without forming n×n / N×N projectors:
    // P⊥_M Ã P⊥_Q = Ã − M Gm⁻¹ (M*Ã) − (Ã Q) Gq⁻¹ Q* + M Gm⁻¹ (M*Ã Q) Gq⁻¹ Q*
    if let Some(gm) = &gm_inv {
        let mta = c.m.transpose() * &a;
        a -= &c.m * (gm * &mta);
    }
    if let Some(gq) = &gq_inv {
        let aq = &a * &c.q;
        a -= (aq * gq) * c.q.transpose();
    }

    // constraint-matching term B
    if let Some(gq) = &gq_inv {
        a += &c.y * (gq * c.q.transpose());
    }
    if let Some(gm) = &gm_inv {
        a += &c.m * (gm * c.x.transpose());
        if let Some(gq) = &gq_inv {
            let xtq = c.x.transpose() * &c.q;
            a -= &c.m * (gm * (xtq * (gq * c.q.transpose())));
        }
    }

    let data: Vec<f64> = (0..c.n)
        .flat_map(|i| (0..c.big_n).map(move |j| (i, j)))
        .map(|(i, j)| a[(i, j)])
        .collect();
    Matrix::from_vec(c.n, c.big_n, data)
}

/// Build the constraint set realized by the first `upto_t` iterations of a
/// recorded run: M = [m⁰ … m^{t−1}], X = [h¹+ξ₀q⁰ … h^t+ξ_{t−1}q^{t−1}],
/// Q = [q⁰ … q^{t−1}], Y = [b⁰ … b^{t−1}+λ_{t−1}m^{t−2}].
pub fn harvest_constraints(
    traj: &AmpTrajectory,
    upto_t: usize,
) -> Result<ConditioningConstraints> {
    let vecs = traj
        .vectors
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("trajectory has no retained vectors".into()))?;
    if upto_t == 0 || upto_t > vecs.q.len() {
        return Err(Error::InvalidInput(format!(
            "upto_t = {upto_t} outside 1..={}",
            vecs.q.len()
        )));
    }
    let n = vecs.m[0].len();
    let big_n = vecs.q[0].len();
    let mut m_cols = Vec::with_capacity(upto_t);
    let mut x_cols = Vec::with_capacity(upto_t);
    let mut q_cols = Vec::with_capacity(upto_t);
    let mut y_cols = Vec::with_capacity(upto_t);
    for t in 0..upto_t {
        m_cols.push(vecs.m[t].clone());
        let xi = traj.records[t].xi;
        // vecs.h[t] holds h^{t+1}
        x_cols.push(
            vecs.h[t]
                .iter()
                .zip(&vecs.q[t])
                .map(|(h, q)| h + xi * q)
                .collect(),
        );
        q_cols.push(vecs.q[t].clone());
        let lambda = traj.records[t].lambda;
        let y: Vec<f64> = if t == 0 {
            vecs.b[0].clone()
        } else {
            vecs.b[t]
                .iter()
                .zip(&vecs.m[t - 1])
                .map(|(b, m)| b + lambda * m)
                .collect()
        };
        y_cols.push(y);
    }
    ConditioningConstraints::new(n, big_n, m_cols, x_cols, q_cols, y_cols)
}
