//! Measurement-matrix ensembles: n×N matrices with independent entries
//! A_ij ~ (1/√n)·μ_ij, where each μ_ij is standardized (mean 0, variance 1)
//! but not necessarily identically distributed across positions.
//!
//! Entry (i, j) is drawn from a counter-based generator keyed by
//! (seed, i, j) through the entry law's quantile, so the value depends only
//! on that key — generation order, matrix shape, and parallel row
//! generation cannot change it, and matrices generated at different shapes
//! share their common (i, j) prefix.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{key3, unit_open};
use crate::ScalarDistribution;

/// Positionwise entry law selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntryRule {
    /// One law everywhere.
    Homogeneous { dist: ScalarDistribution },
    /// Law selected by parity of i + j.
    Checkerboard {
        even: ScalarDistribution,
        odd: ScalarDistribution,
    },
    /// Law selected by i mod len.
    RowPeriodic { dists: Vec<ScalarDistribution> },
    /// Law selected by a salted hash of (i, j). The salt is part of the
    /// rule, so the position-to-law assignment is a fixed property of the
    /// ensemble, independent of the generation seed.
    PositionHash {
        dists: Vec<ScalarDistribution>,
        #[serde(default)]
        salt: u64,
    },
}

impl EntryRule {
    pub fn dist_at(&self, i: usize, j: usize) -> &ScalarDistribution {
        match self {
            EntryRule::Homogeneous { dist } => dist,
            EntryRule::Checkerboard { even, odd } => {
                if (i + j) % 2 == 0 {
                    even
                } else {
                    odd
                }
            }
            EntryRule::RowPeriodic { dists } => &dists[i % dists.len()],
            EntryRule::PositionHash { dists, salt } => {
                let h = key3(0x11AA_55EE ^ *salt, i as u64, j as u64);
                &dists[(h % dists.len() as u64) as usize]
            }
        }
    }

    /// Referenced laws with human-readable labels, for validation reports.
    pub fn referenced(&self) -> Vec<(String, &ScalarDistribution)> {
        match self {
            EntryRule::Homogeneous { dist } => vec![("homogeneous".into(), dist)],
            EntryRule::Checkerboard { even, odd } => vec![
                ("checkerboard.even".into(), even),
                ("checkerboard.odd".into(), odd),
            ],
            EntryRule::RowPeriodic { dists } => dists
                .iter()
                .enumerate()
                .map(|(k, d)| (format!("row_periodic[{k}]"), d))
                .collect(),
            EntryRule::PositionHash { dists, .. } => dists
                .iter()
                .enumerate()
                .map(|(k, d)| (format!("position_hash[{k}]"), d))
                .collect(),
        }
    }
}

/// An entry rule together with the moment-certificate exponent α > 1 that
/// backs the o(n⁻²) decay of E[A^{2+2α}].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub rule: EntryRule,
    pub alpha: f64,
}

/// Per-law record in a validation report.
#[derive(Debug, Clone, Serialize)]
pub struct EntryLawCheck {
    pub label: String,
    pub mean: f64,
    pub variance: f64,
    pub moment_order: f64,
    pub moment: f64,
    pub pass: bool,
}

/// Outcome of `validate`: per-law standardization and moment checks plus
/// the α > 1 requirement. Failures are report entries, not errors.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleValidation {
    pub alpha: f64,
    pub alpha_ok: bool,
    pub entries: Vec<EntryLawCheck>,
    pub pass: bool,
}

/// Check that every referenced law has mean 0 and variance 1 within 1e-9
/// and a finite absolute moment of order 2+2α, and that α > 1.
pub fn validate(spec: &EnsembleSpec) -> EnsembleValidation {
    let alpha_ok = spec.alpha > 1.0;
    let order = 2.0 + 2.0 * spec.alpha;
    let mut entries = Vec::new();
    for (label, dist) in spec.rule.referenced() {
        let structural = dist.validate().is_ok();
        let mean = dist.mean();
        let variance = dist.variance();
        let moment = dist.abs_moment(order).unwrap_or(f64::INFINITY);
        let pass = structural
            && mean.abs() <= 1e-9
            && (variance - 1.0).abs() <= 1e-9
            && moment.is_finite();
        entries.push(EntryLawCheck {
            label,
            mean,
            variance,
            moment_order: order,
            moment,
            pass,
        });
    }
    let pass = alpha_ok && entries.iter().all(|e| e.pass);
    EnsembleValidation {
        alpha: spec.alpha,
        alpha_ok,
        entries,
        pass,
    }
}

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("matrix dimensions must be >= 1".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Aspect ratio ρ = n/N.
    pub fn rho(&self) -> f64 {
        self.rows as f64 / self.cols as f64
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// y = A v, exact dense product under plain floating accumulation.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::InvalidInput(format!(
                "matvec dimension mismatch: {} vs {}",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &x)| a * x)
                    .sum::<f64>()
            })
            .collect())
    }

    /// y = A* v (transpose product).
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::InvalidInput(format!(
                "matvec_t dimension mismatch: {} vs {}",
                v.len(),
                self.rows
            )));
        }
        let mut y = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (yj, &aij) in y.iter_mut().zip(self.row(i)) {
                    *yj += aij * vi;
                }
            }
        }
        Ok(y)
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Binary dump: two little-endian u64 dims, then row-major f64 entries.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidInput("dimension overflow".into()))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Draw an n×N matrix from the ensemble: entry (i, j) is an independent
/// draw from the rule's law at (i, j), scaled by 1/√n, and is a pure
/// function of (seed, i, j, rule).
pub fn generate(spec: &EnsembleSpec, n: usize, big_n: usize, seed: u64) -> Result<Matrix> {
    let report = validate(spec);
    if !report.pass {
        return Err(Error::InvalidSpec(format!(
            "ensemble failed validation: {}",
            serde_json::to_string(&report).unwrap_or_default()
        )));
    }
    if n == 0 || big_n == 0 {
        return Err(Error::InvalidSpec("dimensions must be >= 1".into()));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut data = Vec::with_capacity(n * big_n);
    match &spec.rule {
        // homogeneous fast path: no per-entry rule dispatch
        EntryRule::Homogeneous { dist } => {
            for i in 0..n {
                for j in 0..big_n {
                    let u = unit_open(key3(seed, i as u64, j as u64));
                    data.push(dist.quantile(u) * scale);
                }
            }
        }
        rule => {
            for i in 0..n {
                for j in 0..big_n {
                    let u = unit_open(key3(seed, i as u64, j as u64));
                    data.push(rule.dist_at(i, j).quantile(u) * scale);
                }
            }
        }
    }
    Matrix::from_vec(n, big_n, data)
}
