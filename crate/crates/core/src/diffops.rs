//! Central finite differences and the dense linear algebra used by every
//! analysis module: gradients, matrix-field derivatives, left annihilators
//! and the tall pseudo-inverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values at or below this are treated as rank loss.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceScheme {
    step: f64,
    order: u8,
}

impl FiniteDifferenceScheme {
    pub fn new(step: f64, order: u8) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Contract(format!(
                "finite-difference step must be > 0, got {step}"
            )));
        }
        if order != 2 && order != 4 {
            return Err(Error::Contract(format!(
                "finite-difference order must be 2 or 4, got {order}"
            )));
        }
        Ok(Self { step, order })
    }

    pub fn central2(step: f64) -> Result<Self> {
        Self::new(step, 2)
    }

    pub fn central4(step: f64) -> Result<Self> {
        Self::new(step, 4)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    fn combine<T, F>(&self, mut at: F) -> Result<T>
    where
        F: FnMut(f64) -> Result<T>,
        T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let h = self.step;
        match self.order {
            2 => Ok((at(h)? - at(-h)?) * (0.5 / h)),
            _ => {
                let a = at(2.0 * h)?;
                let b = at(h)?;
                let c = at(-h)?;
                let d = at(-2.0 * h)?;
                Ok(((b - c) * 8.0 + (d - a)) * (1.0 / (12.0 * h)))
            }
        }
    }
}

impl Default for FiniteDifferenceScheme {
    fn default() -> Self {
        Self { step: 1e-6, order: 2 }
    }
}

fn shifted(x: &DVector<f64>, i: usize, delta: f64) -> DVector<f64> {
    let mut y = x.clone();
    y[i] += delta;
    y
}

/// Central-difference gradient of a scalar function.
pub fn grad<F>(f: F, x: &DVector<f64>, scheme: &FiniteDifferenceScheme) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let eval = |y: DVector<f64>| -> Result<f64> {
        let v = f(&y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation {
                what: "scalar function".into(),
                point: y.iter().copied().collect(),
            })
        }
    };
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        g[i] = scheme.combine(|d| eval(shifted(x, i, d)))?;
    }
    Ok(g)
}

/// Entrywise central-difference derivative of a matrix field: element `i`
/// of the result is the partial derivative with respect to `q_i`.
pub fn jacobian_of_matrix_field<F>(
    field: F,
    q: &DVector<f64>,
    scheme: &FiniteDifferenceScheme,
) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let eval = |y: DVector<f64>| -> Result<DMatrix<f64>> {
        let m = field(&y);
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::Evaluation {
                what: "matrix field".into(),
                point: y.iter().copied().collect(),
            })
        }
    };
    (0..q.len())
        .map(|i| scheme.combine(|d| eval(shifted(q, i, d))))
        .collect()
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn require_full_column_rank(g: &DMatrix<f64>) -> Result<()> {
    if g.ncols() > g.nrows() {
        return Err(Error::Contract(format!(
            "expected a tall matrix, got {}x{}",
            g.nrows(),
            g.ncols()
        )));
    }
    if g.ncols() == 0 {
        return Ok(());
    }
    let sv = singular_values(g);
    if sv.last().copied().unwrap_or(0.0) <= RANK_TOLERANCE || sv.iter().any(|s| !s.is_finite()) {
        return Err(Error::Rank { singular_values: sv });
    }
    Ok(())
}

/// Full-row-rank left annihilator of a tall full-rank `g` (n x m).
///
/// Rows are orthonormal and span the orthogonal complement of `range(g)`;
/// each row is sign-fixed so its first entry with magnitude above 1e-12 is
/// positive. For `m = n` the result has zero rows.
pub fn left_annihilator(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_full_column_rank(g)?;
    let (n, m) = g.shape();
    if m == n {
        return Ok(DMatrix::zeros(0, n));
    }
    // Householder QR of [G | I]: the first m columns of Q span range(G),
    // the remaining n - m complete an orthonormal basis.
    let mut aug = DMatrix::zeros(n, m + n);
    aug.view_mut((0, 0), (n, m)).copy_from(g);
    aug.view_mut((0, m), (n, n)).fill_with_identity();
    let q = aug.qr().q();
    let mut perp = q.columns(m, n - m).transpose();
    for mut row in perp.row_iter_mut() {
        if let Some(first) = row.iter().copied().find(|v| v.abs() > 1e-12) {
            if first < 0.0 {
                row.neg_mut();
            }
        }
    }
    Ok(perp)
}

/// `(GᵀG)⁻¹Gᵀ` for a tall full-rank `g`.
pub fn pseudo_inverse_tall(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_full_column_rank(g)?;
    let gram = g.transpose() * g;
    let chol = gram.cholesky().ok_or_else(|| Error::Rank {
        singular_values: singular_values(g),
    })?;
    Ok(chol.solve(&g.transpose()))
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest entry of `|a - aᵀ|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Largest entry of `|a + aᵀ|`.
pub fn skewness_defect(a: &DMatrix<f64>) -> f64 {
    (a + a.transpose()).amax()
}

/// `xᵀ W x`.
pub fn weighted_sq_norm(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    x.dot(&(w * x))
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().try_inverse().ok_or_else(|| Error::Rank {
        singular_values: singular_values(a),
    })
}
