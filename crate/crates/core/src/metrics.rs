//! Covariance prediction metrics: mean KL divergence and per-entry MAE
//! over the upper triangle (variance units).

use std::fmt::Write as _;

use thiserror::Error;

use crate::covmodel::{loss_kl, regularize_label, CovModelError};
use crate::lie::{Cov6, UPPER_TRIANGLE};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] CovModelError),
}

/// Slot of `(i, j)` in the upper-triangle ordering.
fn slot(i: usize, j: usize) -> usize {
    UPPER_TRIANGLE
        .iter()
        .position(|&e| e == (i, j))
        .expect("upper-triangle entry")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_kl: f64,
    pub mae_per_entry: [f64; 21],
    /// `(u_x, u_x)` entry.
    pub mae_x: f64,
    /// `(u_y, u_y)` entry.
    pub mae_y: f64,
    /// `(ω_z, ω_z)` entry.
    pub mae_yaw: f64,
    pub sample_count: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_count: {}", self.sample_count);
        let _ = writeln!(s, "mean_kl: {:.16e}", self.mean_kl);
        let _ = writeln!(s, "mae_x: {:.16e}", self.mae_x);
        let _ = writeln!(s, "mae_y: {:.16e}", self.mae_y);
        let _ = writeln!(s, "mae_yaw: {:.16e}", self.mae_yaw);
        for (k, &(i, j)) in UPPER_TRIANGLE.iter().enumerate() {
            let _ = writeln!(s, "mae_{i}{j}: {:.16e}", self.mae_per_entry[k]);
        }
        s
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["sample_count", "mean_kl", "mae_x", "mae_y", "mae_yaw"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend(UPPER_TRIANGLE.iter().map(|(i, j)| format!("mae_{i}{j}")));
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![self.sample_count.to_string()];
        cols.extend(
            [self.mean_kl, self.mae_x, self.mae_y, self.mae_yaw]
                .iter()
                .chain(self.mae_per_entry.iter())
                .map(|v| format!("{v:.16e}")),
        );
        cols.join(",")
    }
}

/// Averages KL divergence (labels regularized first) and absolute entry
/// errors over prediction/label pairs.
pub fn evaluate(predictions: &[Cov6], labels: &[Cov6]) -> Result<EvalReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let n = predictions.len() as f64;
    let mut kl = 0.0;
    let mut mae = [0.0; 21];
    for (p, l) in predictions.iter().zip(labels) {
        kl += loss_kl(p, &regularize_label(l))?;
        let (pu, lu) = (p.upper_triangle(), l.upper_triangle());
        for k in 0..21 {
            mae[k] += (pu[k] - lu[k]).abs();
        }
    }
    for v in &mut mae {
        *v /= n;
    }
    Ok(EvalReport {
        mean_kl: kl / n,
        mae_per_entry: mae,
        mae_x: mae[slot(0, 0)],
        mae_y: mae[slot(1, 1)],
        mae_yaw: mae[slot(5, 5)],
        sample_count: predictions.len(),
    })
}
