//! Ray-cast LiDAR-like fixture sequences with exact ground-truth poses.
//!
//! Scenes are unions of solid axis-aligned boxes and planes. A spinning
//! sensor with evenly spaced beams casts rays from each pose; hits get
//! Gaussian range noise and are returned in the sensor frame.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::lie::SE3Transform;
use crate::pointcloud::{InMemorySequence, PointCloud};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Closed room with pillars; well conditioned.
    Room,
    /// Long smooth corridor along x; translation along x is unobservable.
    Corridor,
    /// Ground plane only.
    Plane,
    /// Corridor stretches alternating with feature-rich halls. Corridor
    /// stretches are sparse and noisy, halls dense and clean.
    Mixed,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Room,
        SceneKind::Corridor,
        SceneKind::Plane,
        SceneKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Room => "room",
            SceneKind::Corridor => "corridor",
            SceneKind::Plane => "plane",
            SceneKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scene kind `{s}` (room, corridor, plane, mixed)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub kind: SceneKind,
    pub frames: usize,
    /// Scales the azimuth resolution; 1.0 gives 360 rays per beam.
    pub density: f64,
    /// Range noise standard deviation (m) before per-zone scaling.
    pub range_noise: f64,
    /// Forward motion per frame (m) for the corridor-like kinds.
    pub step: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SceneKind::Room,
            frames: 40,
            density: 1.0,
            range_noise: 0.01,
            step: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Solid { lo: Vector3<f64>, hi: Vector3<f64> },
    /// `normal · x = offset`.
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Primitive {
    fn solid(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Primitive::Solid {
            lo: Vector3::from(lo),
            hi: Vector3::from(hi),
        }
    }

    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Plane { normal, offset } => {
                let den = normal.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(o)) / den;
                (t > 0.0).then_some(t)
            }
            Primitive::Solid { lo, hi } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < lo[a] || o[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
        }
    }
}

/// Sensor behavior over an x-interval of the world.
#[derive(Debug, Clone, Copy)]
struct Zone {
    x0: f64,
    x1: f64,
    noise_scale: f64,
    keep_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    primitives: Vec<Primitive>,
    zones: Vec<Zone>,
}

const BEAMS: usize = 16;
const ELEVATION_DEG: (f64, f64) = (-22.0, 18.0);
const MIN_RANGE: f64 = 0.5;
const MAX_RANGE: f64 = 40.0;
const FLOOR: f64 = -1.6;
const CEILING: f64 = 1.8;

impl Scene {
    fn new(kind: SceneKind, cfg: &SynthConfig) -> Self {
        let floor = Primitive::Plane {
            normal: Vector3::z(),
            offset: FLOOR,
        };
        let ceiling = Primitive::Plane {
            normal: Vector3::z(),
            offset: CEILING,
        };
        let (f, c) = (FLOOR - 0.1, CEILING + 0.1);
        let mut primitives = vec![floor];
        let mut zones = Vec::new();
        match kind {
            SceneKind::Plane => {}
            SceneKind::Room => {
                primitives.push(ceiling);
                // Walls of a 9 m × 7 m room, then pillars and a cabinet.
                primitives.extend([
                    Primitive::solid([-4.2, -3.2, f], [-4.0, 3.8, c]),
                    Primitive::solid([5.0, -3.2, f], [5.2, 3.8, c]),
                    Primitive::solid([-4.2, -3.2, f], [5.2, -3.0, c]),
                    Primitive::solid([-4.2, 3.6, f], [5.2, 3.8, c]),
                    Primitive::solid([1.6, 1.1, f], [2.2, 1.6, c]),
                    Primitive::solid([-2.6, -1.9, f], [-2.1, -1.3, c]),
                    Primitive::solid([3.4, -3.0, f], [5.0, -2.2, -0.6]),
                    Primitive::solid([-4.0, 2.4, f], [-3.2, 3.6, 0.4]),
                ]);
            }
            SceneKind::Corridor => {
                primitives.push(ceiling);
                let len = corridor_extent(cfg);
                primitives.extend([
                    Primitive::solid([-len, -1.7, f], [len, -1.5, c]),
                    Primitive::solid([-len, 1.5, f], [len, 1.7, c]),
                ]);
            }
            SceneKind::Mixed => {
                primitives.push(ceiling);
                let mut rng = rng_for(&[cfg.seed, 0x5CE4E]);
                let len = corridor_extent(cfg);
                let mut x = -HALL_HALF;
                let mut hall = true;
                // Start behind the origin so the first frames have a map.
                let mut x_start = -HALL_HALF - 2.0 * SEGMENT;
                while x_start < -HALL_HALF {
                    mixed_corridor(&mut primitives, &mut rng, x_start, x_start + SEGMENT, f, c);
                    x_start += SEGMENT;
                }
                zones.push(Zone {
                    x0: f64::NEG_INFINITY,
                    x1: -HALL_HALF,
                    noise_scale: CORRIDOR_NOISE,
                    keep_fraction: CORRIDOR_KEEP,
                });
                while x < len {
                    let x1 = x + SEGMENT;
                    if hall {
                        mixed_hall(&mut primitives, &mut rng, x, x1, f, c);
                        zones.push(Zone {
                            x0: x,
                            x1,
                            noise_scale: HALL_NOISE,
                            keep_fraction: 1.0,
                        });
                    } else {
                        mixed_corridor(&mut primitives, &mut rng, x, x1, f, c);
                        zones.push(Zone {
                            x0: x,
                            x1,
                            noise_scale: CORRIDOR_NOISE,
                            keep_fraction: CORRIDOR_KEEP,
                        });
                    }
                    hall = !hall;
                    x = x1;
                }
            }
        }
        Scene { primitives, zones }
    }

    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.hit(o, d))
            .filter(|&t| (MIN_RANGE..=MAX_RANGE).contains(&t))
            .min_by(f64::total_cmp)
    }

    fn zone(&self, x: f64) -> (f64, f64) {
        self.zones
            .iter()
            .find(|z| z.x0 <= x && x < z.x1)
            .map_or((1.0, 1.0), |z| (z.noise_scale, z.keep_fraction))
    }
}

const SEGMENT: f64 = 24.0;
const HALL_HALF: f64 = 12.0;
const HALL_NOISE: f64 = 0.5;
const CORRIDOR_NOISE: f64 = 4.0;
const CORRIDOR_KEEP: f64 = 0.5;

fn corridor_extent(cfg: &SynthConfig) -> f64 {
    cfg.step.abs() * cfg.frames as f64 + 2.0 * SEGMENT + MAX_RANGE
}

/// Corridor stretch with a few shallow pilasters at irregular spacing.
fn mixed_corridor(
    out: &mut Vec<Primitive>,
    rng: &mut impl Rng,
    x0: f64,
    x1: f64,
    f: f64,
    c: f64,
) {
    out.push(Primitive::solid([x0, -1.7, f], [x1, -1.5, c]));
    out.push(Primitive::solid([x0, 1.5, f], [x1, 1.7, c]));
    let mut x = x0 + rng.random_range(2.0..5.0);
    while x + 0.4 < x1 {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (ylo, yhi) = if side > 0.0 { (1.25, 1.5) } else { (-1.5, -1.25) };
        out.push(Primitive::solid([x, ylo, f], [x + 0.4, yhi, c]));
        x += rng.random_range(5.0..9.0);
    }
}

/// Wide hall with end walls and randomly placed pillars and crates.
fn mixed_hall(
    out: &mut Vec<Primitive>,
    rng: &mut impl Rng,
    x0: f64,
    x1: f64,
    f: f64,
    c: f64,
) {
    const W: f64 = 6.0;
    out.push(Primitive::solid([x0, -W - 0.2, f], [x1, -W, c]));
    out.push(Primitive::solid([x0, W, f], [x1, W + 0.2, c]));
    for xe in [x0, x1 - 0.2] {
        out.push(Primitive::solid([xe, -W, f], [xe + 0.2, -1.5, c]));
        out.push(Primitive::solid([xe, 1.5, f], [xe + 0.2, W, c]));
    }
    for _ in 0..6 {
        let x = rng.random_range(x0 + 1.5..x1 - 2.0);
        let y = rng.random_range(2.2..W - 1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (sx, sy) = (rng.random_range(0.4..1.2), rng.random_range(0.4..1.2));
        let top = if rng.random_bool(0.5) { c } else { rng.random_range(-0.8..0.8) };
        out.push(Primitive::solid([x, y, f], [x + sx, y + sy, top]));
    }
}

fn ground_truth_pose(kind: SceneKind, k: usize, step: f64) -> SE3Transform {
    let kf = k as f64;
    let (x, y, yaw) = match kind {
        SceneKind::Room => (
            1.2 * (0.13 * kf).sin(),
            0.8 * (0.09 * kf + 0.5).sin(),
            0.3 * (0.07 * kf).sin(),
        ),
        _ => (step * kf, 0.15 * (0.21 * kf).sin(), 0.03 * (0.11 * kf).sin()),
    };
    SE3Transform::from_translation(Vector3::new(x, y, 0.0)) * SE3Transform::rot_z(yaw)
}

fn scan(scene: &Scene, pose: &SE3Transform, cfg: &SynthConfig, frame: usize) -> PointCloud {
    let mut rng = rng_for(&[cfg.seed, 0x5CA7, frame as u64]);
    let (noise_scale, keep) = scene.zone(pose.translation().x);
    let sigma = (cfg.range_noise * noise_scale).max(0.0);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let azimuths = ((360.0 * cfg.density).round() as usize).max(1);
    let origin = pose.translation();
    let mut points = Vec::with_capacity(BEAMS * azimuths);
    for b in 0..BEAMS {
        let el = (ELEVATION_DEG.0
            + (ELEVATION_DEG.1 - ELEVATION_DEG.0) * b as f64 / (BEAMS - 1) as f64)
            .to_radians();
        for a in 0..azimuths {
            let az = std::f64::consts::TAU * a as f64 / azimuths as f64;
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let world_dir = pose.transform_vector(&dir);
            // Draws happen for every ray so streams do not shift with hits.
            let eps = noise.sample(&mut rng);
            let kept = rng.random_range(0.0..1.0) < keep;
            if let Some(t) = scene.cast(origin, &world_dir) {
                if kept {
                    points.push(dir * (t + eps));
                }
            }
        }
    }
    PointCloud::new(points).expect("finite ray hits")
}

/// A deterministic sequence of scans (sensor frame) and ground-truth poses.
pub fn make_synthetic_scene(cfg: &SynthConfig) -> InMemorySequence {
    let scene = Scene::new(cfg.kind, cfg);
    let poses: Vec<SE3Transform> = (0..cfg.frames)
        .map(|k| ground_truth_pose(cfg.kind, k, cfg.step))
        .collect();
    let scans = poses
        .iter()
        .enumerate()
        .map(|(k, p)| scan(&scene, p, cfg, k))
        .collect();
    InMemorySequence::new(scans, poses)
}
