//! Two-layer regression head (32 → 64 tanh → 21) with an input standardizer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::cholesky::{params_to_cov, CholeskyParams, RAW_DIM};
use super::features::{extract_features, feature_spec_hash, FeatureVector, FEATURE_DIM};
use super::loss::{loss_and_grad_raw, LossWeights};
use super::CovModelError;
use crate::lie::Cov6;
use crate::pointcloud::PointCloud;

pub const HIDDEN_DIM: usize = 64;
pub const MODEL_FORMAT: &str = "covloc-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    /// Per-feature shift and scale applied before the first layer.
    pub input_mean: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// Free-form `key=value` pairs echoed into the model file.
    pub notes: Vec<(String, String)>,
}

/// Gradient of a loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ModelGrad {
    pub fn zeros() -> Self {
        ModelGrad {
            w1: DMatrix::zeros(HIDDEN_DIM, FEATURE_DIM),
            b1: DVector::zeros(HIDDEN_DIM),
            w2: DMatrix::zeros(RAW_DIM, HIDDEN_DIM),
            b2: DVector::zeros(RAW_DIM),
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGrad, s: f64) {
        self.w1 += &other.w1 * s;
        self.b1 += &other.b1 * s;
        self.w2 += &other.w2 * s;
        self.b2 += &other.b2 * s;
    }

    pub fn norm(&self) -> f64 {
        (self.w1.norm_squared()
            + self.b1.norm_squared()
            + self.w2.norm_squared()
            + self.b2.norm_squared())
        .sqrt()
    }
}

impl RegressionModel {
    /// All weights and biases zero, identity standardizer.
    pub fn zeros() -> Self {
        RegressionModel {
            input_mean: DVector::zeros(FEATURE_DIM),
            input_scale: DVector::from_element(FEATURE_DIM, 1.0),
            w1: DMatrix::zeros(HIDDEN_DIM, FEATURE_DIM),
            b1: DVector::zeros(HIDDEN_DIM),
            w2: DMatrix::zeros(RAW_DIM, HIDDEN_DIM),
            b2: DVector::zeros(RAW_DIM),
            notes: Vec::new(),
        }
    }

    /// Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros();
        let s1 = (FEATURE_DIM as f64).sqrt().recip();
        let s2 = (HIDDEN_DIM as f64).sqrt().recip();
        m.w1 = DMatrix::from_fn(HIDDEN_DIM, FEATURE_DIM, |_, _| s1 * rng.sample::<f64, _>(StandardNormal));
        m.w2 = DMatrix::from_fn(RAW_DIM, HIDDEN_DIM, |_, _| s2 * rng.sample::<f64, _>(StandardNormal));
        m
    }

    /// Fits the standardizer to the per-feature mean and spread of `inputs`.
    /// Constant features keep a unit scale.
    pub fn fit_standardizer(&mut self, inputs: &[FeatureVector]) {
        if inputs.is_empty() {
            return;
        }
        let n = inputs.len() as f64;
        for k in 0..FEATURE_DIM {
            let mean = inputs.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[k] = mean;
            self.input_scale[k] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
    }

    fn standardize(&self, x: &FeatureVector) -> DVector<f64> {
        DVector::from_fn(FEATURE_DIM, |k, _| (x[k] - self.input_mean[k]) / self.input_scale[k])
    }

    pub fn forward_raw(&self, x: &FeatureVector) -> CholeskyParams {
        let h = (&self.w1 * self.standardize(x) + &self.b1).map(f64::tanh);
        let out = &self.w2 * h + &self.b2;
        CholeskyParams::new(std::array::from_fn(|k| out[k]))
    }

    pub fn predict_features(&self, x: &FeatureVector) -> Cov6 {
        params_to_cov(&self.forward_raw(x))
    }

    /// Loss against one label and its gradient by backpropagation.
    pub fn loss_and_grad(
        &self,
        x: &FeatureVector,
        y_bar: &Cov6,
        w: &LossWeights,
    ) -> Result<(f64, ModelGrad), CovModelError> {
        let xs = self.standardize(x);
        let h = (&self.w1 * &xs + &self.b1).map(f64::tanh);
        let out = &self.w2 * &h + &self.b2;
        let p = CholeskyParams::new(std::array::from_fn(|k| out[k]));
        let (loss, g_raw) = loss_and_grad_raw(&p, y_bar, w)?;
        let g_out = DVector::from_column_slice(&g_raw);
        let g_h = self.w2.transpose() * &g_out;
        let g_pre = g_h.zip_map(&h, |g, hv| g * (1.0 - hv * hv));
        Ok((
            loss,
            ModelGrad {
                w1: &g_pre * xs.transpose(),
                b1: g_pre,
                w2: &g_out * h.transpose(),
                b2: g_out,
            },
        ))
    }

    pub fn apply(&mut self, grad: &ModelGrad, step: f64) {
        self.w1 -= &grad.w1 * step;
        self.b1 -= &grad.b1 * step;
        self.w2 -= &grad.w2 * step;
        self.b2 -= &grad.b2 * step;
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.w2].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.b1, &self.b2, &self.input_mean, &self.input_scale]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_text(&self) -> String {
        fn list<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
            vals.map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",")
        }
        fn row_major(m: &DMatrix<f64>) -> String {
            list(m.transpose().iter())
        }
        let mut s = String::new();
        let _ = writeln!(s, "format={MODEL_FORMAT}");
        let _ = writeln!(s, "version={MODEL_VERSION}");
        let _ = writeln!(s, "feature_spec={}", feature_spec_hash());
        let _ = writeln!(s, "dims={FEATURE_DIM},{HIDDEN_DIM},{RAW_DIM}");
        let _ = writeln!(s, "input_mean={}", list(self.input_mean.iter()));
        let _ = writeln!(s, "input_scale={}", list(self.input_scale.iter()));
        let _ = writeln!(s, "w1={}", row_major(&self.w1));
        let _ = writeln!(s, "b1={}", list(self.b1.iter()));
        let _ = writeln!(s, "w2={}", row_major(&self.w2));
        let _ = writeln!(s, "b2={}", list(self.b2.iter()));
        for (k, v) in &self.notes {
            let _ = writeln!(s, "note.{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CovModelError> {
        let bad = |line: usize, reason: String| CovModelError::MalformedModel { line, reason };
        let mut m = Self::zeros();
        let mut seen = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(lineno, "expected key=value".into()))?;
            let floats = |n: usize| -> Result<Vec<f64>, CovModelError> {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(lineno, format!("{key}: {e}")))?;
                if v.len() != n {
                    return Err(bad(lineno, format!("{key}: expected {n} values, got {}", v.len())));
                }
                Ok(v)
            };
            match key {
                "format" if value == MODEL_FORMAT => {}
                "version" if value == MODEL_VERSION.to_string() => {}
                "feature_spec" => {
                    if value != feature_spec_hash() {
                        return Err(CovModelError::FeatureMismatch);
                    }
                }
                "dims" if value == format!("{FEATURE_DIM},{HIDDEN_DIM},{RAW_DIM}") => {}
                "input_mean" => m.input_mean = DVector::from_vec(floats(FEATURE_DIM)?),
                "input_scale" => m.input_scale = DVector::from_vec(floats(FEATURE_DIM)?),
                "w1" => m.w1 = DMatrix::from_row_slice(HIDDEN_DIM, FEATURE_DIM, &floats(HIDDEN_DIM * FEATURE_DIM)?),
                "b1" => m.b1 = DVector::from_vec(floats(HIDDEN_DIM)?),
                "w2" => m.w2 = DMatrix::from_row_slice(RAW_DIM, HIDDEN_DIM, &floats(RAW_DIM * HIDDEN_DIM)?),
                "b2" => m.b2 = DVector::from_vec(floats(RAW_DIM)?),
                k if k.starts_with("note.") => {
                    m.notes.push((k["note.".len()..].to_string(), value.to_string()));
                    continue;
                }
                _ => return Err(bad(lineno, format!("unexpected entry `{key}={value}`"))),
            }
            seen.push(key.to_string());
        }
        for required in ["format", "version", "feature_spec", "dims", "input_mean", "input_scale", "w1", "b1", "w2", "b2"] {
            if !seen.iter().any(|k| k == required) {
                return Err(bad(0, format!("missing `{required}`")));
            }
        }
        if !m.is_finite() || m.input_scale.iter().any(|&s| s <= 0.0) {
            return Err(bad(0, "non-finite parameters or non-positive input scale".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CovModelError> {
        fs::write(path, self.to_text()).map_err(|e| CovModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CovModelError> {
        let text = fs::read_to_string(path).map_err(|e| CovModelError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Predicted covariance of a scan; always positive definite.
pub fn predict(model: &RegressionModel, scan: &PointCloud) -> Result<Cov6, CovModelError> {
    Ok(model.predict_features(&extract_features(scan)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::loss::loss_combined;
    use nalgebra::{Matrix6, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut impl Rng) -> FeatureVector {
        std::array::from_fn(|_| rng.random_range(-2.0..2.0))
    }

    fn random_label(rng: &mut impl Rng) -> Cov6 {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Cov6::symmetrized(a * a.transpose() / 6.0 + Matrix6::identity() * 0.05).unwrap()
    }

    #[test]
    fn zero_model_predicts_scaled_identity() {
        let y = RegressionModel::zeros().predict_features(&[0.3; FEATURE_DIM]);
        let d = 2f64.ln() + 1e-8;
        assert!((y.matrix() - Matrix6::identity() * d * d).amax() < 1e-15);
        let scan = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0); 3]).unwrap();
        let y2 = predict(&RegressionModel::zeros(), &scan).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn weight_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = LossWeights::default();
        for _ in 0..5 {
            let mut model = RegressionModel::random(&mut rng);
            model.b1 = DVector::from_fn(HIDDEN_DIM, |_, _| rng.random_range(-0.5..0.5));
            model.b2 = DVector::from_fn(RAW_DIM, |_, _| rng.random_range(-0.5..0.5));
            let x = random_features(&mut rng);
            let y = random_label(&mut rng);
            let (_, g) = model.loss_and_grad(&x, &y, &w).unwrap();
            let f = |m: &RegressionModel| loss_combined(&m.predict_features(&x), &y, &w).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let mut check = |analytic: f64, perturb: &dyn Fn(&mut RegressionModel, f64)| {
                let mut p = model.clone();
                perturb(&mut p, h);
                let mut m = model.clone();
                perturb(&mut m, -h);
                worst = worst.max(((f(&p) - f(&m)) / (2.0 * h) - analytic).abs());
            };
            for (r, c) in [(0, 0), (5, 17), (63, 31), (30, 2)] {
                check(g.w1[(r, c)], &|m, d| m.w1[(r, c)] += d);
            }
            for r in [0, 40, 63] {
                check(g.b1[r], &|m, d| m.b1[r] += d);
            }
            for (r, c) in [(0, 0), (20, 63), (7, 11), (13, 50)] {
                check(g.w2[(r, c)], &|m, d| m.w2[(r, c)] += d);
            }
            for r in 0..RAW_DIM {
                check(g.b2[r], &|m, d| m.b2[r] += d);
            }
            let scale = g.b2.amax().max(g.w2.amax()).max(g.w1.amax());
            assert!(worst / scale < 1e-4, "relative error {}", worst / scale);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = RegressionModel::random(&mut rng);
        model.notes.push(("alpha".into(), "0.1".into()));
        model.input_scale[3] = 2.5;
        let back = RegressionModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_text(), model.to_text());
    }

    #[test]
    fn malformed_models_are_rejected() {
        let text = RegressionModel::zeros().to_text();
        assert!(matches!(
            RegressionModel::from_text(&text.replace("w2=", "w3=")),
            Err(CovModelError::MalformedModel { .. })
        ));
        let stale = text
            .lines()
            .map(|l| if l.starts_with("feature_spec=") { "feature_spec=00" } else { l })
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(RegressionModel::from_text(&stale), Err(CovModelError::FeatureMismatch)));
        let short: String = text.lines().filter(|l| !l.starts_with("b1=")).collect::<Vec<_>>().join("\n");
        assert!(RegressionModel::from_text(&short).is_err());
    }
}
