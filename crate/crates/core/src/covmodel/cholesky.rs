//! Cholesky output head: 21 unconstrained values to a positive definite
//! 6×6 covariance `Y = C Cᵀ`.
//!
//! Layout of the raw vector: six diagonal pre-activations, then the 15
//! strictly-lower entries of `C` row by row.

use nalgebra::Matrix6;

use crate::lie::Cov6;

pub const RAW_DIM: usize = 21;
/// Added to `softplus` so the diagonal of `C` never reaches zero.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// `(row, col)` of each strictly-lower raw entry, in raw order after the diagonal.
pub const LOWER_ENTRIES: [(usize, usize); 15] = {
    let mut out = [(0, 0); 15];
    let mut k = 0;
    let mut i = 1;
    while i < 6 {
        let mut j = 0;
        while j < i {
            out[k] = (i, j);
            k += 1;
            j += 1;
        }
        i += 1;
    }
    out
};

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Derivative of softplus.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus_inverse(y: f64) -> f64 {
    // ln(eʸ − 1) = y + ln(1 − e⁻ʸ)
    y + (-(-y).exp()).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CholeskyParams {
    pub raw: [f64; RAW_DIM],
}

impl CholeskyParams {
    pub fn new(raw: [f64; RAW_DIM]) -> Self {
        CholeskyParams { raw }
    }

    /// The lower-triangular factor `C`.
    pub fn factor(&self) -> Matrix6<f64> {
        let mut c = Matrix6::zeros();
        for i in 0..6 {
            c[(i, i)] = softplus(self.raw[i]) + DIAGONAL_FLOOR;
        }
        for (k, &(i, j)) in LOWER_ENTRIES.iter().enumerate() {
            c[(i, j)] = self.raw[6 + k];
        }
        c
    }

    /// Raw values whose factor is the Cholesky factor of `cov`.
    ///
    /// Diagonal entries at or below the floor are clamped to a pre-activation
    /// of −40, which maps back to the floor.
    pub fn from_cov(cov: &Cov6) -> Option<Self> {
        let l = cov.matrix().cholesky()?.l();
        let mut raw = [0.0; RAW_DIM];
        for i in 0..6 {
            let d = l[(i, i)] - DIAGONAL_FLOOR;
            raw[i] = if d > 1e-17 { softplus_inverse(d) } else { -40.0 };
        }
        for (k, &(i, j)) in LOWER_ENTRIES.iter().enumerate() {
            raw[6 + k] = l[(i, j)];
        }
        Some(CholeskyParams { raw })
    }

    /// Chain rule from `∂L/∂C` (lower triangle read) to `∂L/∂raw`.
    pub fn pullback(&self, d_c: &Matrix6<f64>) -> [f64; RAW_DIM] {
        let mut g = [0.0; RAW_DIM];
        for i in 0..6 {
            g[i] = d_c[(i, i)] * sigmoid(self.raw[i]);
        }
        for (k, &(i, j)) in LOWER_ENTRIES.iter().enumerate() {
            g[6 + k] = d_c[(i, j)];
        }
        g
    }
}

/// `Y = C Cᵀ`, positive definite for any finite raw vector.
pub fn params_to_cov(p: &CholeskyParams) -> Cov6 {
    let c = p.factor();
    let y = c * c.transpose();
    // Exactly symmetric by construction of the product up to rounding.
    Cov6::symmetrized(y).expect("C Cᵀ is symmetric positive semi-definite")
}
