//! Combined KL + Huber covariance loss and its exact gradient.

use nalgebra::{Cholesky, Matrix6, U6};

use super::cholesky::{params_to_cov, CholeskyParams, RAW_DIM};
use super::CovModelError;
use crate::lie::{Cov6, UPPER_TRIANGLE};

/// Labels with a smaller minimum eigenvalue get `LABEL_JITTER·I` added.
pub const LABEL_MIN_EIGENVALUE: f64 = 1e-12;
pub const LABEL_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.9,
            huber_delta: 1e-3,
        }
    }
}

/// Makes a near-singular label invertible.
pub fn regularize_label(y: &Cov6) -> Cov6 {
    if y.min_eigenvalue() < LABEL_MIN_EIGENVALUE {
        Cov6::symmetrized(y.matrix() + Matrix6::identity() * LABEL_JITTER)
            .expect("adding a positive diagonal keeps the label valid")
    } else {
        *y
    }
}

fn cholesky(y: &Cov6) -> Result<Cholesky<f64, U6>, CovModelError> {
    y.matrix()
        .cholesky()
        .ok_or(CovModelError::NotPositiveDefinite)
}

fn log_det(ch: &Cholesky<f64, U6>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `½(tr(Ȳ⁻¹Ŷ) − 6 + ln det Ȳ − ln det Ŷ)`, the divergence of `N(0, Ŷ)`
/// from `N(0, Ȳ)`. Neither argument is regularized here.
pub fn loss_kl(y_hat: &Cov6, y_bar: &Cov6) -> Result<f64, CovModelError> {
    let bar = cholesky(y_bar)?;
    let hat = cholesky(y_hat)?;
    let trace = bar.solve(y_hat.matrix()).trace();
    Ok(0.5 * (trace - 6.0 + log_det(&bar) - log_det(&hat)))
}

fn huber(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_slope(d: f64, delta: f64) -> f64 {
    d.clamp(-delta, delta)
}

/// Huber penalty summed over the 21 upper-triangular entry differences.
pub fn loss_huber(y_hat: &Cov6, y_bar: &Cov6, delta: f64) -> f64 {
    UPPER_TRIANGLE
        .iter()
        .map(|&(i, j)| huber(y_hat.matrix()[(i, j)] - y_bar.matrix()[(i, j)], delta))
        .sum()
}

/// KL with `Ŷ = CCᵀ` given by its factor, so `Ŷ` is never re-factored.
fn kl_from_factor(c: &Matrix6<f64>, y_bar: &Cov6) -> Result<(f64, Matrix6<f64>), CovModelError> {
    let bar = cholesky(y_bar)?;
    let y_hat = c * c.transpose();
    let trace = bar.solve(&y_hat).trace();
    let log_det_hat = 2.0 * c.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let c_inv = c
        .solve_lower_triangular(&Matrix6::identity())
        .ok_or(CovModelError::NotPositiveDefinite)?;
    let kl = 0.5 * (trace - 6.0 + log_det(&bar) - log_det_hat);
    // ∂KL/∂Ŷ = ½(Ȳ⁻¹ − Ŷ⁻¹)
    Ok((kl, (bar.inverse() - c_inv.transpose() * c_inv) * 0.5))
}

pub fn loss_combined(y_hat: &Cov6, y_bar: &Cov6, w: &LossWeights) -> Result<f64, CovModelError> {
    let kl = if w.alpha != 0.0 { w.alpha * loss_kl(y_hat, y_bar)? } else { 0.0 };
    Ok(kl + w.beta * loss_huber(y_hat, y_bar, w.huber_delta))
}

/// Combined loss of the raw head output and its gradient with respect to it.
///
/// With `dL = tr(Gᵀ dY)` and `Y = C Cᵀ`, the factor gradient is
/// `(G + Gᵀ) C`; only its lower triangle is used.
pub fn loss_and_grad_raw(
    p: &CholeskyParams,
    y_bar: &Cov6,
    w: &LossWeights,
) -> Result<(f64, [f64; RAW_DIM]), CovModelError> {
    let c = p.factor();
    let y_hat = params_to_cov(p);
    let mut loss = w.beta * loss_huber(&y_hat, y_bar, w.huber_delta);
    let mut g = Matrix6::zeros();
    if w.alpha != 0.0 {
        let (kl, d_kl) = kl_from_factor(&c, y_bar)?;
        loss += w.alpha * kl;
        g += d_kl * w.alpha;
    }
    for &(i, j) in UPPER_TRIANGLE.iter() {
        g[(i, j)] += w.beta * huber_slope(y_hat.matrix()[(i, j)] - y_bar.matrix()[(i, j)], w.huber_delta);
    }
    let d_c = (g + g.transpose()) * c;
    Ok((loss, p.pullback(&d_c)))
}
