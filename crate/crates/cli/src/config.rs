//! Pipeline configuration: one JSON document with a default for every field
//! and unknown keys rejected (typos surface as errors naming the JSON path).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scmii_core::fusion::{
    averaging_fusion_kernel, seeded_fusion_kernel, FusionConfig, FusionMethod, FusionMethodName,
};
use scmii_core::geometry::{CalibrationFile, Pose6DoF};
use scmii_core::model::{init_weights, load_model, InitMode, NetworkSpec, Weights};
use scmii_core::ndt::AlignOptions;
use scmii_core::pointcloud::{load_cloud, CloudFormat, PointCloud};
use scmii_core::runtime::{BaselineMode, CostModel, LinkModel};
use scmii_core::scene::{gen_scene, GroundTruth, SceneSpec};
use scmii_core::sparse::GridSpec;

fn default_frames() -> u32 {
    3
}
fn default_timeout_ms() -> f64 {
    100.0
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_grid() -> GridSpec {
    // Sensor-local grid: 40 m x 40 m around the sensor, z in [-2.35, 1.65]
    // (above ground returns, below ~4 m world height for sensors at 2.5 m).
    GridSpec::new([-20.0, -20.0, -2.35], [0.4, 0.4, 0.4], [100, 100, 10])
}
fn default_init_seed() -> u64 {
    1
}
fn default_cell_size() -> f64 {
    2.0
}
fn default_min_points() -> usize {
    5
}
fn default_bandwidth_sweep() -> Vec<f64> {
    vec![10.0, 50.0, 100.0, 500.0, 1000.0]
}
fn default_edge_sweep() -> Vec<f64> {
    vec![2.5e9, 5e9, 1e10]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub grid: GridSpec,
    pub init_seed: u64,
    pub init_mode: InitMode,
    /// Load spec+weights from this model JSON instead of initializing.
    pub model_path: Option<PathBuf>,
    /// Experimental: per-device model overrides used by the edge role (the
    /// head architecture must match the shared model).
    pub device_model_paths: std::collections::BTreeMap<u16, PathBuf>,
    pub bev_threshold: f32,
    pub score_channel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            init_seed: default_init_seed(),
            init_mode: InitMode::IdentityPreserving,
            model_path: None,
            device_model_paths: Default::default(),
            bev_threshold: 0.5,
            score_channel: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionWeights {
    #[default]
    Averaging,
    Seeded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionCfg {
    pub method: FusionMethodName,
    /// Defaults to devices `0..N` in order.
    pub device_order: Option<Vec<u16>>,
    pub weights: FusionWeights,
    pub seed: u64,
}

impl Default for FusionCfg {
    fn default() -> Self {
        Self {
            method: FusionMethodName::Max,
            device_order: None,
            weights: FusionWeights::Averaging,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationSource {
    /// Ground-truth extrinsics from the scene.
    #[default]
    Truth,
    /// A calibration JSON on disk.
    File,
    /// NDT scan matching on frame 0.
    Ndt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationCfg {
    pub source: CalibrationSource,
    pub path: Option<PathBuf>,
    pub cell_size: f64,
    pub min_points: usize,
    /// One guess per non-reference device, used by the NDT source.
    pub initial_guesses: Vec<Pose6DoF>,
}

impl Default for CalibrationCfg {
    fn default() -> Self {
        Self {
            source: CalibrationSource::Truth,
            path: None,
            cell_size: default_cell_size(),
            min_points: default_min_points(),
            initial_guesses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchCfg {
    pub bandwidths_mbps: Vec<f64>,
    pub edge_mac_per_s: Vec<f64>,
}

impl Default for BenchCfg {
    fn default() -> Self {
        Self {
            bandwidths_mbps: default_bandwidth_sweep(),
            edge_mac_per_s: default_edge_sweep(),
        }
    }
}

/// Top-level pipeline configuration. Exactly one of `scene` / `cloud_dir`
/// supplies point clouds.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scene: Option<SceneSpec>,
    pub cloud_dir: Option<PathBuf>,
    pub frames: Option<u32>,
    pub network: NetworkConfig,
    pub fusion: FusionCfg,
    pub calibration: CalibrationCfg,
    pub link: LinkModel,
    pub cost: CostModel,
    pub baseline: BaselineMode,
    pub timeout_ms: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub bench: BenchCfg,
}

impl PipelineConfig {
    pub fn frames(&self) -> u32 {
        self.frames.unwrap_or_else(default_frames)
    }

    pub fn timeout_ms(&self) -> f64 {
        self.timeout_ms.unwrap_or_else(default_timeout_ms)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(default_out_dir)
    }

    /// Default config with a seeded scene; the zero-config path.
    pub fn with_default_scene(seed: u64) -> Self {
        Self {
            scene: Some(SceneSpec {
                seed,
                ..SceneSpec::default()
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self, require_source: bool) -> Result<()> {
        match (&self.scene, &self.cloud_dir) {
            (Some(_), Some(_)) => bail!("config: exactly one of `scene` and `cloud_dir` may be set"),
            (None, None) if require_source => {
                bail!("config: one of `scene` or `cloud_dir` is required")
            }
            _ => {}
        }
        if let Some(dir) = &self.cloud_dir {
            if !dir.exists() {
                bail!("config: cloud_dir {} does not exist", dir.display());
            }
        }
        if let Some(p) = &self.network.model_path {
            if !p.exists() {
                bail!("config: network.model_path {} does not exist", p.display());
            }
        }
        for (device, p) in &self.network.device_model_paths {
            if !p.exists() {
                bail!(
                    "config: network.device_model_paths[{device}] {} does not exist",
                    p.display()
                );
            }
        }
        if self.calibration.source == CalibrationSource::File {
            match &self.calibration.path {
                Some(p) if p.exists() => {}
                Some(p) => bail!("config: calibration.path {} does not exist", p.display()),
                None => bail!("config: calibration.source = \"file\" requires calibration.path"),
            }
        }
        Ok(())
    }
}

/// Loads and validates a config file; schema errors cite the JSON path of
/// the offending key.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let cfg: PipelineConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| anyhow::anyhow!("config {}: {}: {}", path.display(), e.path(), e.inner()))?;
    cfg.validate(false)?;
    Ok(cfg)
}

/// Everything a pipeline command needs, resolved from config + flags.
pub struct Resolved {
    pub config: PipelineConfig,
    pub spec: NetworkSpec,
    pub weights: Weights,
    /// Per frame, per device-slot clouds (sensor-local frames).
    pub frames: Vec<Vec<PointCloud>>,
    /// Per frame ground truth when available.
    pub truths: Vec<GroundTruth>,
    pub fusion: FusionConfig,
    pub calibration: CalibrationFile,
    pub devices: Vec<u16>,
}

/// Generates or loads the per-frame clouds and truth.
pub fn resolve_frames(config: &PipelineConfig) -> Result<(Vec<Vec<PointCloud>>, Vec<GroundTruth>)> {
    if let Some(scene) = &config.scene {
        let mut frames = Vec::new();
        let mut truths = Vec::new();
        for j in 0..config.frames() as u64 {
            // Frame j re-samples object placements with a derived seed;
            // sensors stay fixed.
            let spec_j = SceneSpec {
                seed: scene.seed + j,
                ..scene.clone()
            };
            let frame = gen_scene(&spec_j)?;
            frames.push(frame.clouds);
            truths.push(frame.truth);
        }
        Ok((frames, truths))
    } else if let Some(dir) = &config.cloud_dir {
        load_cloud_dir(dir)
    } else {
        bail!("config: one of `scene` or `cloud_dir` is required")
    }
}

/// Directory layout written by gen-scene:
/// `frames/NNN/sensor_MM.csv` + `frames/NNN/truth.json`.
pub fn load_cloud_dir(dir: &Path) -> Result<(Vec<Vec<PointCloud>>, Vec<GroundTruth>)> {
    let frames_dir = dir.join("frames");
    if !frames_dir.exists() {
        bail!("cloud_dir {}: missing frames/ subdirectory", dir.display());
    }
    let mut frame_ids: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .with_context(|| frames_dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    frame_ids.sort();
    if frame_ids.is_empty() {
        bail!("cloud_dir {}: no frame directories", dir.display());
    }
    let mut frames = Vec::new();
    let mut truths = Vec::new();
    for fd in frame_ids {
        let truth = GroundTruth::load(&fd.join("truth.json"))?;
        let mut clouds = Vec::new();
        for i in 0..truth.extrinsics.len() {
            let path = fd.join(format!("sensor_{i:02}.csv"));
            if !path.exists() {
                bail!("missing cloud file {}", path.display());
            }
            clouds.push(load_cloud(&path, CloudFormat::Csv)?);
        }
        frames.push(clouds);
        truths.push(truth);
    }
    Ok((frames, truths))
}

pub fn resolve_network(config: &PipelineConfig) -> Result<(NetworkSpec, Weights)> {
    if let Some(path) = &config.network.model_path {
        return Ok(load_model(path)?);
    }
    let mut spec = NetworkSpec::default_backbone(config.network.grid);
    spec.bev_threshold = config.network.bev_threshold;
    spec.score_channel = config.network.score_channel;
    let weights = init_weights(&spec, config.network.init_seed, config.network.init_mode)?;
    Ok((spec, weights))
}

pub fn resolve_fusion(
    config: &PipelineConfig,
    spec: &NetworkSpec,
    devices: &[u16],
    method_override: Option<FusionMethodName>,
) -> Result<FusionConfig> {
    let method_name = method_override.unwrap_or(config.fusion.method);
    let device_order = config
        .fusion
        .device_order
        .clone()
        .unwrap_or_else(|| devices.to_vec());
    let channels = spec.intermediate_channels();
    let method = match method_name.kernel_size() {
        None => FusionMethod::Max,
        Some(k) => {
            let kernel = match config.fusion.weights {
                FusionWeights::Averaging => averaging_fusion_kernel(device_order.len(), channels, k),
                FusionWeights::Seeded => {
                    seeded_fusion_kernel(device_order.len(), channels, k, config.fusion.seed)
                }
            };
            FusionMethod::ConcatConv { kernel }
        }
    };
    let cfg = FusionConfig {
        method,
        device_order,
        target_grid: spec.head_output_grid(),
    };
    cfg.validate(channels)?;
    Ok(cfg)
}

/// Ground-truth calibration: device i -> reference frame of device 0.
pub fn truth_calibration(truth: &GroundTruth) -> CalibrationFile {
    let mut calib = CalibrationFile::new(0);
    let inv_ref = truth.extrinsics[0].invert();
    for (i, e) in truth.extrinsics.iter().enumerate() {
        calib
            .transforms
            .insert(i as u16, inv_ref.compose(e).orthonormalized());
    }
    calib
}

pub fn resolve_calibration(
    config: &PipelineConfig,
    frames: &[Vec<PointCloud>],
    truths: &[GroundTruth],
) -> Result<CalibrationFile> {
    match config.calibration.source {
        CalibrationSource::Truth => {
            let truth = truths
                .first()
                .context("calibration.source = \"truth\" needs scene ground truth")?;
            Ok(truth_calibration(truth))
        }
        CalibrationSource::File => {
            let path = config
                .calibration
                .path
                .as_ref()
                .context("calibration.source = \"file\" requires calibration.path")?;
            Ok(CalibrationFile::load(path)?)
        }
        CalibrationSource::Ndt => {
            let frame0 = frames.first().context("NDT calibration needs frame 0")?;
            let n = frame0.len();
            let guesses: Vec<Pose6DoF> = if config.calibration.initial_guesses.is_empty() {
                vec![Pose6DoF::default(); n - 1]
            } else {
                config.calibration.initial_guesses.clone()
            };
            if guesses.len() != n - 1 {
                bail!(
                    "calibration.initial_guesses has {} entries for {} non-reference devices",
                    guesses.len(),
                    n - 1
                );
            }
            let transforms = scmii_core::ndt::calibrate(
                &frame0[0],
                &frame0[1..],
                &guesses,
                config.calibration.cell_size,
                config.calibration.min_points,
                &AlignOptions::default(),
            )?;
            let mut calib = CalibrationFile::new(0);
            for (i, t) in transforms.into_iter().enumerate() {
                calib.transforms.insert(i as u16 + 1, t);
            }
            Ok(calib)
        }
    }
}

/// Resolves the full pipeline context.
pub fn resolve(
    config: PipelineConfig,
    fusion_override: Option<FusionMethodName>,
) -> Result<Resolved> {
    config.validate(true)?;
    let (spec, weights) = resolve_network(&config)?;
    let (frames, truths) = resolve_frames(&config)?;
    let n_devices = frames
        .first()
        .map(|f| f.len())
        .context("no frames resolved")?;
    let devices: Vec<u16> = (0..n_devices as u16).collect();
    let fusion = resolve_fusion(&config, &spec, &devices, fusion_override)?;
    let calibration = resolve_calibration(&config, &frames, &truths)?;
    Ok(Resolved {
        config,
        spec,
        weights,
        frames,
        truths,
        fusion,
        calibration,
        devices,
    })
}

/// Moves truth boxes into the reference device frame for evaluation. Exact
/// when the reference extrinsic is rotation-free (the default scenes); a
/// rotated reference logs a warning since axis-aligned IoU then mismatches.
pub fn truth_in_reference_frame(truth: &GroundTruth) -> Vec<scmii_core::scene::TruthBox> {
    let inv_ref = truth.extrinsics[0].invert();
    if inv_ref.rotation_angle() > 1e-9 {
        log::warn!(
            "reference sensor carries rotation ({:.4} rad); axis-aligned IoU against \
             world-frame truth is approximate",
            inv_ref.rotation_angle()
        );
    }
    truth
        .boxes
        .iter()
        .map(|b| scmii_core::scene::TruthBox {
            center: inv_ref.apply_point(b.center),
            size: b.size,
            class_id: b.class_id,
        })
        .collect()
}

/// Sensor poses for `--devices N`: the rotation-free reference plus N-1
/// sensors on a circle facing inward.
pub fn sensors_for_devices(n: usize) -> Vec<Pose6DoF> {
    let mut sensors = vec![Pose6DoF::new(-3.0, -3.0, 2.5, 0.0, 0.0, 0.0)];
    let radius = 4.5;
    for i in 1..n {
        let angle = std::f64::consts::TAU * i as f64 / n as f64;
        sensors.push(Pose6DoF::new(
            radius * angle.cos(),
            radius * angle.sin(),
            2.5,
            0.0,
            0.0,
            angle + std::f64::consts::PI,
        ));
    }
    sensors
}

/// Serializable view of one pipeline frame outcome (the detections file).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub complete: bool,
    pub detections: Vec<scmii_core::model::Detection>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| path.display().to_string())?;
    Ok(())
}
