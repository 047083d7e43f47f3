//! Training loop: weighted sampling with replacement, optional rigid
//! augmentation with adjoint label transport, plain gradient descent.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use super::cholesky::CholeskyParams;
use super::features::{extract_features, FeatureVector};
use super::loss::{regularize_label, LossWeights};
use super::network::{ModelGrad, RegressionModel};
use super::CovModelError;
use crate::lie::{Cov6, SE3Transform};
use crate::pointcloud::PointCloud;
use crate::rng::{rng_for, PipelineRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Half-width of the uniform x and y translation range (m).
    pub translation: f64,
    /// Half-width of the uniform yaw range (degrees).
    pub yaw_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            translation: 2.0,
            yaw_deg: 180.0,
        }
    }
}

impl AugmentConfig {
    /// Whether augmentation changes anything at all.
    pub fn is_active(&self) -> bool {
        self.enabled && (self.translation > 0.0 || self.yaw_deg > 0.0)
    }

    /// The ranges actually applied: zero when disabled.
    pub fn effective(&self) -> (f64, f64) {
        if self.is_active() {
            (self.translation, self.yaw_deg)
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossWeights,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Batch gradients longer than this are rescaled to this norm; 0 disables.
    pub max_grad_norm: f64,
    /// Start the output bias at the mean training label.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossWeights::default(),
            learning_rate: 0.05,
            steps: 500,
            batch_size: 8,
            seed: 0,
            augment: AugmentConfig::default(),
            max_grad_norm: 1.0,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CovModelError> {
        let l = &self.loss;
        let ok = l.alpha >= 0.0
            && l.beta >= 0.0
            && l.alpha.is_finite()
            && l.beta.is_finite()
            && l.huber_delta > 0.0
            && l.huber_delta.is_finite()
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_grad_norm >= 0.0
            && self.augment.translation >= 0.0
            && self.augment.yaw_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CovModelError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Resolved settings as `key=value` pairs, echoed into model files.
    pub fn echo(&self) -> Vec<(String, String)> {
        let (t, y) = self.augment.effective();
        [
            ("alpha", self.loss.alpha.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("huber_delta", self.loss.huber_delta.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("augment_translation", t.to_string()),
            ("augment_yaw_deg", y.to_string()),
            ("max_grad_norm", self.max_grad_norm.to_string()),
            ("warm_start", self.warm_start.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Draws `batch_size` indices with replacement, with probability
/// proportional to each label's largest absolute entry. All-zero labels
/// fall back to uniform sampling.
pub fn weighted_sample(
    labels: &[Cov6],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, CovModelError> {
    if labels.is_empty() {
        return Err(CovModelError::EmptyDataset);
    }
    let weights: Vec<f64> = labels.iter().map(Cov6::max_abs).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok((0..batch_size).map(|_| rng.random_range(0..labels.len())).collect());
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    Ok((0..batch_size)
        .map(|_| {
            let u = rng.random_range(0.0..acc);
            cumulative.partition_point(|&c| c <= u).min(labels.len() - 1)
        })
        .collect())
}

/// Moves the scan by a random planar motion `T` and transports the label,
/// `Y ← Ad(T) Y Ad(T)ᵀ`.
pub fn augment_sample(
    scan: &PointCloud,
    y: &Cov6,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> (PointCloud, Cov6) {
    if !cfg.is_active() {
        return (scan.clone(), *y);
    }
    let mut draw = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let tx = draw(cfg.translation);
    let ty = draw(cfg.translation);
    let yaw = draw(cfg.yaw_deg).to_radians();
    let t = SE3Transform::from_translation(Vector3::new(tx, ty, 0.0)) * SE3Transform::rot_z(yaw);
    let moved = y
        .transported(&t.adjoint())
        .expect("congruence keeps a covariance valid");
    (scan.transformed(&t), moved)
}

/// A scan with its covariance label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scan: PointCloud,
    pub label: Cov6,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RegressionModel,
    /// Mean batch loss before each update.
    pub trace: Vec<f64>,
}

const INIT_STREAM: u64 = 0x1A17;
const STEP_STREAM: u64 = 0x57E9;

/// The model `train` starts from, before any update.
pub fn initial_model(
    features: &[FeatureVector],
    labels: &[Cov6],
    cfg: &TrainConfig,
) -> RegressionModel {
    let mut model = RegressionModel::random(&mut rng_for(&[cfg.seed, INIT_STREAM]));
    model.fit_standardizer(features);
    if cfg.warm_start && !labels.is_empty() {
        let mean = labels.iter().map(|l| l.matrix()).sum::<nalgebra::Matrix6<f64>>() / labels.len() as f64;
        if let Some(p) = Cov6::symmetrized(mean).ok().as_ref().and_then(CholeskyParams::from_cov) {
            for (b, r) in model.b2.iter_mut().zip(p.raw) {
                *b = r;
            }
            // Start from the constant mean predictor.
            model.w2.fill(0.0);
        }
    }
    model.notes = cfg.echo();
    model
}

/// Gradient descent on the combined loss.
///
/// Batch loss and gradient are means over the batch; per-sample terms are
/// evaluated in parallel and summed in batch order.
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome, CovModelError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CovModelError::EmptyDataset);
    }
    let labels: Vec<Cov6> = samples.iter().map(|s| regularize_label(&s.label)).collect();
    let features: Vec<FeatureVector> = samples
        .par_iter()
        .map(|s| extract_features(&s.scan))
        .collect::<Result<_, _>>()?;
    let mut model = initial_model(&features, &labels, cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    let augment = cfg.augment.is_active();

    for step in 0..cfg.steps {
        let mut rng: PipelineRng = rng_for(&[cfg.seed, STEP_STREAM, step as u64]);
        let batch = weighted_sample(&labels, cfg.batch_size, &mut rng)?;
        let terms: Vec<(f64, ModelGrad)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                if augment {
                    let mut arng = rng_for(&[cfg.seed, STEP_STREAM, step as u64, slot as u64]);
                    let (scan, label) = augment_sample(&samples[i].scan, &samples[i].label, &mut arng, &cfg.augment);
                    let x = extract_features(&scan)?;
                    model.loss_and_grad(&x, &regularize_label(&label), &cfg.loss)
                } else {
                    model.loss_and_grad(&features[i], &labels[i], &cfg.loss)
                }
            })
            .collect::<Result<_, _>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = ModelGrad::zeros();
        let mut loss = 0.0;
        for (l, g) in &terms {
            loss += l * scale;
            grad.add_scaled(g, scale);
        }
        trace.push(loss);
        let norm = grad.norm();
        if !norm.is_finite() {
            return Err(CovModelError::NonFiniteGradient { step });
        }
        let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            cfg.max_grad_norm / norm
        } else {
            1.0
        };
        model.apply(&grad, cfg.learning_rate * clip);
    }
    Ok(TrainOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix6;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_label_is_always_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = vec![Cov6::from_diagonal(&[1.0; 6]).unwrap()];
        assert_eq!(weighted_sample(&labels, 5, &mut rng).unwrap(), vec![0; 5]);
        assert!(matches!(weighted_sample(&[], 5, &mut rng), Err(CovModelError::EmptyDataset)));
    }

    #[test]
    fn frequencies_follow_max_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = vec![
            Cov6::from_diagonal(&[1.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            Cov6::from_diagonal(&[0.1, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        ];
        let n = 100_000;
        let draws = weighted_sample(&labels, n, &mut rng).unwrap();
        let second = draws.iter().filter(|&&i| i == 1).count() as f64 / n as f64;
        assert!((second - 0.75).abs() < 0.01, "{second}");
        let zeros = vec![Cov6::zeros(); 4];
        let draws = weighted_sample(&zeros, n, &mut rng).unwrap();
        for k in 0..4 {
            let f = draws.iter().filter(|&&i| i == k).count() as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01);
        }
    }

    fn cloud() -> PointCloud {
        PointCloud::new((0..30).map(|i| Vector3::new(i as f64 * 0.3, (i % 7) as f64, (i % 3) as f64 - 1.0)).collect())
            .unwrap()
    }

    #[test]
    fn null_augmentation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Cov6::from_diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cfg = AugmentConfig {
            enabled: true,
            translation: 0.0,
            yaw_deg: 0.0,
        };
        let (c, y2) = augment_sample(&cloud(), &y, &mut rng, &cfg);
        assert_eq!((c, y2), (cloud(), y));
    }

    #[test]
    fn quarter_turn_swaps_axes() {
        let y = Cov6::from_diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = SE3Transform::rot_z(std::f64::consts::FRAC_PI_2);
        let m = y.transported(&t.adjoint()).unwrap();
        let m = m.matrix();
        // Rz(90°) maps x to y and y to −x: (a, b, c) becomes (b, a, c).
        for (i, e) in [2.0, 1.0, 3.0, 5.0, 4.0, 6.0].iter().enumerate() {
            assert!((m[(i, i)] - e).abs() < 1e-12);
        }
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(m[(i, j)].abs() < 1e-12);
                }
            }
        }
        // An anisotropic off-diagonal term changes sign: cov(u_x, u_y) = c ⇒ −c.
        let mut base = Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0));
        base[(0, 1)] = 0.5;
        base[(1, 0)] = 0.5;
        let m = Cov6::new(base).unwrap().transported(&t.adjoint()).unwrap();
        assert!((m.matrix()[(0, 1)] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn augmented_labels_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let y = Cov6::symmetrized(a * a.transpose()).unwrap();
        for _ in 0..1000 {
            let (_, out) = augment_sample(&cloud(), &y, &mut rng, &AugmentConfig::default());
            assert!(out.min_eigenvalue() >= -1e-10 * out.matrix().norm().max(1.0));
            assert!((out.matrix() - out.matrix().transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let samples = vec![
            TrainSample {
                scan: cloud(),
                label: Cov6::from_diagonal(&[0.1, 0.2, 0.3, 0.01, 0.02, 0.03]).unwrap(),
            },
            TrainSample {
                scan: cloud().transformed(&SE3Transform::rot_z(0.4)),
                label: Cov6::from_diagonal(&[1.0; 6]).unwrap(),
            },
        ];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 5,
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&samples, &cfg).unwrap();
        let feats: Vec<_> = samples.iter().map(|s| extract_features(&s.scan).unwrap()).collect();
        let labels: Vec<_> = samples.iter().map(|s| regularize_label(&s.label)).collect();
        assert_eq!(out.model, initial_model(&feats, &labels, &cfg));
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn single_record_overfits() {
        // Curvature along off-diagonal factor entries grows like α/λ_min(Y),
        // so the fixed step is only stable on a well-scaled label.
        let mut m = Matrix6::from_diagonal(&nalgebra::Vector6::new(2.0, 1.5, 1.0, 0.8, 0.5, 0.3));
        m[(0, 5)] = 0.2;
        m[(5, 0)] = 0.2;
        let samples = vec![TrainSample {
            scan: cloud(),
            label: Cov6::new(m).unwrap(),
        }];
        let cfg = TrainConfig {
            steps: 500,
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        let trace = train(&samples, &cfg).unwrap().trace;
        assert!(trace[499] < 0.1 * trace[0], "{} vs {}", trace[499], trace[0]);
        for k in 50..499 {
            assert!(trace[k + 1] <= trace[k], "step {k}: {} > {}", trace[k + 1], trace[k]);
        }
    }

    #[test]
    fn echo_reports_effective_augmentation() {
        let off = TrainConfig {
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            augment: AugmentConfig {
                enabled: true,
                translation: 0.0,
                yaw_deg: 0.0,
            },
            ..TrainConfig::default()
        };
        assert_eq!(off.echo(), zero.echo());
    }
}
