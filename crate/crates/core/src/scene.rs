//! Synthetic multi-sensor LiDAR scenes: axis-aligned cuboids on a ground
//! plane, observed by ray casting over an azimuth/elevation lattice.
//!
//! Stands in for a real multi-LiDAR capture at desk scale. Everything is
//! seeded: placement uses ChaCha stream 0, sensor `i` observing frame `f`
//! uses stream `1 + f * sensor_count + i`, so per-sensor casting can run in
//! any order without changing the output.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose6DoF, RigidTransform};
use crate::pointcloud::PointCloud;

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(
        "failed to place object {object} after {attempts} attempts; \
         reduce the object count or enlarge the ground extent"
    )]
    PlacementFailed { object: usize, attempts: usize },
    #[error("scene spec invalid: {0}")]
    InvalidSpec(String),
    #[error("ground truth file {path}: {reason}")]
    TruthFile { path: String, reason: String },
}

fn default_ground_x() -> [f64; 2] {
    [-15.0, 15.0]
}
fn default_ground_y() -> [f64; 2] {
    [-15.0, 15.0]
}
fn default_object_count() -> [u32; 2] {
    [5, 15]
}
fn default_size_min() -> [f64; 3] {
    [1.5, 1.5, 1.0]
}
fn default_size_max() -> [f64; 3] {
    [4.0, 3.0, 2.5]
}
fn default_sensors() -> Vec<Pose6DoF> {
    // The first (reference) sensor carries no rotation so that truth boxes
    // stay axis-aligned when moved into the reference frame for evaluation.
    vec![
        Pose6DoF::new(-3.0, -3.0, 2.5, 0.0, 0.0, 0.0),
        Pose6DoF::new(3.0, 3.0, 2.5, 0.0, 0.0, -3.0 * std::f64::consts::FRAC_PI_4),
    ]
}
fn default_azimuth_step() -> f64 {
    std::f64::consts::TAU / 720.0
}
fn default_elevation_step() -> f64 {
    0.02
}
fn default_azimuth_span() -> [f64; 2] {
    [-std::f64::consts::PI, std::f64::consts::PI]
}
fn default_elevation_span() -> [f64; 2] {
    [-0.35, 0.05]
}
fn default_max_range() -> f64 {
    60.0
}
fn default_noise_sigma() -> f64 {
    0.02
}
fn default_include_ground() -> bool {
    true
}
fn default_min_gap() -> f64 {
    2.0
}

/// Parameters of a synthetic scene. All fields have defaults so a config
/// only needs to name what it changes (typically the seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub ground_x: [f64; 2],
    pub ground_y: [f64; 2],
    /// Inclusive `[min, max]` cuboid count.
    pub object_count: [u32; 2],
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Sensor extrinsics: sensor-local -> world.
    pub sensors: Vec<Pose6DoF>,
    /// Azimuth/elevation lattice step, radians.
    pub azimuth_step: f64,
    pub elevation_step: f64,
    /// Half-open azimuth span, closed elevation span, radians.
    pub azimuth_span: [f64; 2],
    pub elevation_span: [f64; 2],
    pub max_range: f64,
    /// Gaussian sigma on the returned range, meters.
    pub noise_sigma: f64,
    pub include_ground: bool,
    /// Minimum xy gap between cuboid footprints, meters.
    pub min_gap: f64,
    /// Pre-placed structures (walls, buildings); not counted against
    /// `object_count`, but random placements avoid them.
    pub fixed_boxes: Vec<TruthBox>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ground_x: default_ground_x(),
            ground_y: default_ground_y(),
            object_count: default_object_count(),
            size_min: default_size_min(),
            size_max: default_size_max(),
            sensors: default_sensors(),
            azimuth_step: default_azimuth_step(),
            elevation_step: default_elevation_step(),
            azimuth_span: default_azimuth_span(),
            elevation_span: default_elevation_span(),
            max_range: default_max_range(),
            noise_sigma: default_noise_sigma(),
            include_ground: default_include_ground(),
            min_gap: default_min_gap(),
            fixed_boxes: Vec::new(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.azimuth_step <= 0.0 || self.elevation_step <= 0.0 {
            return Err(SceneError::InvalidSpec("angular steps must be > 0".into()));
        }
        if self.max_range <= 0.0 {
            return Err(SceneError::InvalidSpec("max range must be > 0".into()));
        }
        if self.sensors.is_empty() {
            return Err(SceneError::InvalidSpec("at least one sensor required".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SceneError::InvalidSpec("noise sigma must be >= 0".into()));
        }
        if self.min_gap < 0.0 {
            return Err(SceneError::InvalidSpec("min gap must be >= 0".into()));
        }
        if self.object_count[0] > self.object_count[1] {
            return Err(SceneError::InvalidSpec("object count range inverted".into()));
        }
        for a in 0..3 {
            if self.size_min[a] <= 0.0 || self.size_max[a] < self.size_min[a] {
                return Err(SceneError::InvalidSpec("cuboid size range invalid".into()));
            }
        }
        Ok(())
    }
}

/// One axis-aligned cuboid in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class_id: u32,
}

impl TruthBox {
    pub fn min(&self) -> [f64; 3] {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn max(&self) -> [f64; 3] {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }
}

/// Ground truth for one scene: object boxes plus the sensor extrinsics the
/// clouds were generated with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub boxes: Vec<TruthBox>,
    pub extrinsics: Vec<RigidTransform>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SceneError::TruthFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| SceneError::TruthFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::TruthFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| SceneError::TruthFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// One generated frame: a local-frame cloud per sensor plus the truth.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub clouds: Vec<PointCloud>,
    pub truth: GroundTruth,
}

/// Generates one frame: place cuboids by seeded rejection sampling, then ray
/// cast each sensor. Deterministic for a given spec.
pub fn gen_scene(spec: &SceneSpec) -> Result<SceneFrame, SceneError> {
    spec.validate()?;
    let boxes = place_objects(spec)?;
    let extrinsics: Vec<RigidTransform> =
        spec.sensors.iter().map(RigidTransform::from_pose).collect();
    let clouds = observe(spec, &boxes, 0)?;
    Ok(SceneFrame {
        clouds,
        truth: GroundTruth { boxes, extrinsics },
    })
}

/// Re-observes a fixed set of boxes (a static scene) at frame index `frame`;
/// only the range-noise draws differ between frames.
pub fn observe(spec: &SceneSpec, boxes: &[TruthBox], frame: u64) -> Result<Vec<PointCloud>, SceneError> {
    spec.validate()?;
    let n = spec.sensors.len() as u64;
    let mut clouds = Vec::with_capacity(spec.sensors.len());
    for (i, pose) in spec.sensors.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + frame * n + i as u64);
        let extrinsic = RigidTransform::from_pose(pose);
        clouds.push(cast_sensor(spec, boxes, &extrinsic, &mut rng)?);
    }
    Ok(clouds)
}

fn place_objects(spec: &SceneSpec) -> Result<Vec<TruthBox>, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let count = if spec.object_count[0] == spec.object_count[1] {
        spec.object_count[0]
    } else {
        rng.random_range(spec.object_count[0]..=spec.object_count[1])
    };
    let mut boxes: Vec<TruthBox> = spec.fixed_boxes.clone();
    for obj in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = [
                rng.random_range(spec.size_min[0]..=spec.size_max[0]),
                rng.random_range(spec.size_min[1]..=spec.size_max[1]),
                rng.random_range(spec.size_min[2]..=spec.size_max[2]),
            ];
            let center = [
                rng.random_range(spec.ground_x[0]..=spec.ground_x[1]),
                rng.random_range(spec.ground_y[0]..=spec.ground_y[1]),
                size[2] / 2.0,
            ];
            let candidate = TruthBox {
                center,
                size,
                class_id: 0,
            };
            let overlaps = boxes
                .iter()
                .any(|b| footprints_overlap(b, &candidate, spec.min_gap));
            let swallows_sensor = spec.sensors.iter().any(|s| {
                (s.tx - center[0]).abs() < size[0] / 2.0 && (s.ty - center[1]).abs() < size[1] / 2.0
            });
            if !overlaps && !swallows_sensor {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::PlacementFailed {
                object: obj as usize,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(boxes)
}

fn footprints_overlap(a: &TruthBox, b: &TruthBox, gap: f64) -> bool {
    (a.center[0] - b.center[0]).abs() < (a.size[0] + b.size[0]) / 2.0 + gap
        && (a.center[1] - b.center[1]).abs() < (a.size[1] + b.size[1]) / 2.0 + gap
}

fn cast_sensor(
    spec: &SceneSpec,
    boxes: &[TruthBox],
    extrinsic: &RigidTransform,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud, SceneError> {
    let origin = extrinsic.apply_point([0.0, 0.0, 0.0]);
    let rot = extrinsic.rotation();
    let inv = extrinsic.invert();
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("finite sigma"))
    } else {
        None
    };

    let n_az = ((spec.azimuth_span[1] - spec.azimuth_span[0]) / spec.azimuth_step).round() as usize;
    let n_el =
        ((spec.elevation_span[1] - spec.elevation_span[0]) / spec.elevation_step).round() as usize + 1;

    let mut points = Vec::new();
    for ei in 0..n_el {
        let el = spec.elevation_span[0] + ei as f64 * spec.elevation_step;
        let (sel, cel) = el.sin_cos();
        for ai in 0..n_az {
            let az = spec.azimuth_span[0] + ai as f64 * spec.azimuth_step;
            let (saz, caz) = az.sin_cos();
            let local = [cel * caz, cel * saz, sel];
            let dir = [
                rot[(0, 0)] * local[0] + rot[(0, 1)] * local[1] + rot[(0, 2)] * local[2],
                rot[(1, 0)] * local[0] + rot[(1, 1)] * local[1] + rot[(1, 2)] * local[2],
                rot[(2, 0)] * local[0] + rot[(2, 1)] * local[1] + rot[(2, 2)] * local[2],
            ];
            if let Some(t_hit) = nearest_hit(spec, boxes, origin, dir) {
                let t = match &noise {
                    Some(n) => t_hit + n.sample(rng),
                    None => t_hit,
                };
                let world = [
                    origin[0] + dir[0] * t,
                    origin[1] + dir[1] * t,
                    origin[2] + dir[2] * t,
                ];
                points.push(inv.apply_point(world));
            }
        }
    }
    PointCloud::from_points(points).map_err(|e| SceneError::InvalidSpec(e.to_string()))
}

/// Nearest intersection along `origin + t*dir` among all cuboid faces and
/// (optionally) the ground plane, within max range.
fn nearest_hit(spec: &SceneSpec, boxes: &[TruthBox], origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && t <= spec.max_range && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    if spec.include_ground && dir[2] < -1e-12 && origin[2] > 0.0 {
        consider(-origin[2] / dir[2]);
    }
    for b in boxes {
        if let Some(t) = ray_aabb(origin, dir, b.min(), b.max()) {
            consider(t);
        }
    }
    best
}

/// Slab-method ray/AABB intersection; returns the entry parameter, or the
/// exit parameter when the origin is inside the box.
pub fn ray_aabb(origin: [f64; 3], dir: [f64; 3], bmin: [f64; 3], bmax: [f64; 3]) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < bmin[a] || origin[a] > bmax[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = {
            let ta = (bmin[a] - origin[a]) * inv;
            let tb = (bmax[a] - origin[a]) * inv;
            if ta < tb { (ta, tb) } else { (tb, ta) }
        };
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmax < 0.0 {
        return None;
    }
    Some(if tmin > 0.0 { tmin } else { tmax })
}
