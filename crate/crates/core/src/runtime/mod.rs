//! Edge and server roles: the per-frame edge step, the server-side frame
//! barrier and inference, pluggable transports (stream sockets and an
//! in-process simulated link), and a virtual-clock pipeline simulator with a
//! compute cost model.

mod barrier;
mod net;
mod sim;

pub use barrier::{FrameBarrier, FrameRelease};
pub use net::{edge_client, serve, EdgeReport, ServeConfig, ServeOutcome, ServedFrame};
pub use sim::{simulate_pipeline, BaselineMode, SimFrameOutcome, SimOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fuse, transform_tensor, FusionConfig, FusionError};
use crate::geometry::CalibrationFile;
use crate::model::{
    run_head_instrumented, run_tail_instrumented, Detection, LayerRun, ModelError, NetworkSpec,
    Weights,
};
use crate::pointcloud::PointCloud;
use crate::protocol::{encode_feature, FeatureMessage, ProtocolError};
use crate::sparse::SparseFeatureTensor;

/// MAC-equivalent cost of moving one occupied voxel through the coordinate
/// transform (matrix apply + re-bin).
pub const TRANSFORM_MACS_PER_SITE: u64 = 25;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("no calibration transform for device {0}")]
    UnknownDevice(u16),
    #[error("frame {frame}: transport failure: {reason}")]
    Transport { frame: u64, reason: String },
    #[error("invalid {what}: {reason}")]
    InvalidConfig { what: &'static str, reason: String },
    #[error("socket role: {0}")]
    Net(String),
}

fn default_latency_ms() -> f64 {
    0.2
}
fn default_bandwidth_mbps() -> f64 {
    1000.0
}

/// Simulated network link between an edge role and the server.
/// Defaults model a 1 Gbps wired LAN.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkModel {
    pub latency_ms: f64,
    pub bandwidth_mbps: f64,
    /// Uniform extra delay in `[0, jitter_ms]`, seeded per (frame, device).
    pub jitter_ms: f64,
    /// Probability that a frame arrives corrupted (fails CRC) per device.
    pub corruption_prob: f64,
    pub seed: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            latency_ms: default_latency_ms(),
            bandwidth_mbps: default_bandwidth_mbps(),
            jitter_ms: 0.0,
            corruption_prob: 0.0,
            seed: 0,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |reason: String| RuntimeError::InvalidConfig {
            what: "link model",
            reason,
        };
        if self.latency_ms < 0.0 || self.jitter_ms < 0.0 {
            return Err(bad("latency and jitter must be >= 0".into()));
        }
        if self.bandwidth_mbps <= 0.0 {
            return Err(bad("bandwidth must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(bad(format!("corruption probability {}", self.corruption_prob)));
        }
        Ok(())
    }

    /// Transfer time of `bytes` excluding jitter.
    pub fn transfer_ms(&self, bytes: usize) -> f64 {
        self.latency_ms + bytes as f64 * 8.0 / (self.bandwidth_mbps * 1000.0)
    }
}

fn default_edge_mac() -> f64 {
    5e9
}
fn default_server_mac() -> f64 {
    1e11
}
fn default_overhead_ms() -> f64 {
    0.1
}
fn default_edge_ser() -> f64 {
    200.0
}
fn default_server_ser() -> f64 {
    2000.0
}
fn default_vox_mac() -> f64 {
    32.0
}

/// Parametric compute model. Defaults give the server 20x the edge MAC
/// throughput, standing in for an embedded device next to a workstation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub edge_mac_per_s: f64,
    pub server_mac_per_s: f64,
    /// Fixed scheduling overhead charged per layer (and per fusion stage).
    pub layer_overhead_ms: f64,
    pub edge_serialize_mb_per_s: f64,
    pub server_serialize_mb_per_s: f64,
    /// MAC-equivalents charged per input point during voxelization.
    pub voxelize_mac_per_point: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            edge_mac_per_s: default_edge_mac(),
            server_mac_per_s: default_server_mac(),
            layer_overhead_ms: default_overhead_ms(),
            edge_serialize_mb_per_s: default_edge_ser(),
            server_serialize_mb_per_s: default_server_ser(),
            voxelize_mac_per_point: default_vox_mac(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let vals = [
            self.edge_mac_per_s,
            self.server_mac_per_s,
            self.edge_serialize_mb_per_s,
            self.server_serialize_mb_per_s,
            self.voxelize_mac_per_point,
        ];
        if vals.iter().any(|v| *v <= 0.0) || self.layer_overhead_ms < 0.0 {
            return Err(RuntimeError::InvalidConfig {
                what: "cost model",
                reason: "throughputs must be > 0 and overhead >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn edge_compute_ms(&self, macs: u64, layers: usize) -> f64 {
        macs as f64 / self.edge_mac_per_s * 1e3 + self.layer_overhead_ms * layers as f64
    }

    pub fn server_compute_ms(&self, macs: u64, layers: usize) -> f64 {
        macs as f64 / self.server_mac_per_s * 1e3 + self.layer_overhead_ms * layers as f64
    }

    pub fn edge_serialize_ms(&self, bytes: usize) -> f64 {
        bytes as f64 / (self.edge_serialize_mb_per_s * 1000.0)
    }

    pub fn server_serialize_ms(&self, bytes: usize) -> f64 {
        bytes as f64 / (self.server_serialize_mb_per_s * 1000.0)
    }
}

/// Anything that can carry an encoded frame toward the server.
pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> std::io::Result<()>;
}

impl Transport for std::net::TcpStream {
    fn send(&mut self, frame: &[u8]) -> std::io::Result<()> {
        use std::io::Write;
        self.write_all(frame)
    }
}

/// Collects frames in memory (the simulated link and tests).
#[derive(Debug, Default)]
pub struct VecTransport {
    pub frames: Vec<Vec<u8>>,
}

impl Transport for VecTransport {
    fn send(&mut self, frame: &[u8]) -> std::io::Result<()> {
        self.frames.push(frame.to_vec());
        Ok(())
    }
}

/// One edge-side step: run the head on the local cloud, encode the
/// intermediate output, and transmit it. Returns the sent byte count.
/// A transport failure drops the frame (no retry) and surfaces the frame id.
pub fn edge_step(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
    device_id: u16,
    frame_id: u64,
    timestamp_us: u64,
    transport: &mut dyn Transport,
) -> Result<usize, RuntimeError> {
    let tensor = crate::model::run_head(cloud, spec, weights)?;
    let msg = FeatureMessage {
        device_id,
        frame_id,
        timestamp_us,
        tensor,
    };
    let bytes = encode_feature(&msg)?;
    transport
        .send(&bytes)
        .map_err(|e| RuntimeError::Transport {
            frame: frame_id,
            reason: e.to_string(),
        })?;
    Ok(bytes.len())
}

/// Server-side cost breakdown of one frame's inference.
#[derive(Debug, Clone, Default)]
pub struct InferStats {
    pub transform_macs: u64,
    pub fusion_macs: u64,
    pub tail_runs: Vec<LayerRun>,
}

/// Aligns released tensors into the common frame (reference device gets
/// identity), fuses per config, and runs the tail. Deterministic given
/// inputs; devices missing from a partial frame zero-fill their concat slots.
pub fn server_infer(
    tensors: &[(u16, SparseFeatureTensor)],
    calibration: &CalibrationFile,
    fusion: &FusionConfig,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<Vec<Detection>, RuntimeError> {
    Ok(server_infer_instrumented(tensors, calibration, fusion, spec, weights)?.0)
}

pub fn server_infer_instrumented(
    tensors: &[(u16, SparseFeatureTensor)],
    calibration: &CalibrationFile,
    fusion: &FusionConfig,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<(Vec<Detection>, InferStats), RuntimeError> {
    let mut stats = InferStats::default();
    let channels = spec.intermediate_channels();
    let mut slots: Vec<SparseFeatureTensor> = Vec::with_capacity(fusion.device_order.len());
    for device in &fusion.device_order {
        let slot = match tensors.iter().find(|(d, _)| d == device) {
            Some((_, tensor)) => {
                let t = calibration
                    .transform_for(*device)
                    .ok_or(RuntimeError::UnknownDevice(*device))?;
                stats.transform_macs += tensor.len() as u64 * TRANSFORM_MACS_PER_SITE;
                transform_tensor(tensor, &t, &fusion.target_grid)?
            }
            None => SparseFeatureTensor::new(fusion.target_grid, channels)
                .map_err(FusionError::from)?,
        };
        slots.push(slot);
    }
    let fused = fuse(&slots, fusion)?;
    let union_sites = fused.len() as u64;
    stats.fusion_macs = match &fusion.method {
        crate::fusion::FusionMethod::Max => union_sites * channels as u64,
        crate::fusion::FusionMethod::ConcatConv { kernel } => {
            union_sites * kernel.k.pow(3) as u64 * kernel.c_in as u64 * kernel.c_out as u64
        }
    };
    let (dets, tail_runs) = run_tail_instrumented(&fused, spec, weights)?;
    stats.tail_runs = tail_runs;
    Ok((dets, stats))
}

/// Edge-side modeled cost of one frame on one device.
#[derive(Debug, Clone, Copy)]
pub struct EdgeCost {
    pub macs: u64,
    pub bytes: usize,
}

pub(crate) fn head_cost(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
    cost: &CostModel,
) -> Result<(SparseFeatureTensor, u64), RuntimeError> {
    let (tensor, runs) = run_head_instrumented(cloud, spec, weights)?;
    let vox = (cloud.len() as f64 * cost.voxelize_mac_per_point) as u64;
    let conv: u64 = runs.iter().map(|r| r.macs).sum();
    Ok((tensor, vox + conv))
}

/// Per-frame timing row of the simulation report. Per-device columns are
/// ordered like the fusion device order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame_id: u64,
    pub edge_ms: Vec<f64>,
    pub transfer_ms: Vec<f64>,
    pub wait_ms: f64,
    pub fusion_ms: f64,
    pub tail_ms: f64,
    pub total_ms: f64,
    pub baseline_ms: f64,
    pub speedup: f64,
    pub complete: bool,
}

/// External reference figures printed next to the measured aggregates for
/// orientation; never asserted by this artifact.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferenceContext {
    pub mean_speedup: f64,
    pub edge_time_reduction_pct: f64,
}

impl Default for ReferenceContext {
    fn default() -> Self {
        Self {
            mean_speedup: 2.19,
            edge_time_reduction_pct: 71.6,
        }
    }
}

/// Virtual-clock timing over all frames plus aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: Vec<FrameTiming>,
    pub mean_speedup: f64,
    pub max_speedup: f64,
    pub mean_total_ms: f64,
    pub mean_baseline_ms: f64,
    /// Mean over frames and devices of `1 - edge_ms / baseline_ms`, percent.
    pub mean_edge_reduction_pct: f64,
    pub reference: ReferenceContext,
}

impl TimingReport {
    pub fn from_frames(frames: Vec<FrameTiming>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_speedup = frames.iter().map(|f| f.speedup).sum::<f64>() / n;
        let max_speedup = frames.iter().map(|f| f.speedup).fold(0.0, f64::max);
        let mean_total_ms = frames.iter().map(|f| f.total_ms).sum::<f64>() / n;
        let mean_baseline_ms = frames.iter().map(|f| f.baseline_ms).sum::<f64>() / n;
        let mut red_sum = 0.0;
        let mut red_n = 0usize;
        for f in &frames {
            for e in &f.edge_ms {
                if f.baseline_ms > 0.0 {
                    red_sum += (1.0 - e / f.baseline_ms) * 100.0;
                    red_n += 1;
                }
            }
        }
        Self {
            frames,
            mean_speedup,
            max_speedup,
            mean_total_ms,
            mean_baseline_ms,
            mean_edge_reduction_pct: red_sum / red_n.max(1) as f64,
            reference: ReferenceContext::default(),
        }
    }

    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join("/")
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>16} {:>16} {:>8} {:>8} {:>8} {:>9} {:>10} {:>8}\n",
            "frame", "edge ms", "transfer ms", "wait ms", "fuse ms", "tail ms", "total ms",
            "base ms", "speedup"
        ));
        for f in &self.frames {
            out.push_str(&format!(
                "{:>6} {:>16} {:>16} {:>8.3} {:>8.3} {:>8.3} {:>9.3} {:>10.3} {:>8.3}\n",
                f.frame_id,
                join(&f.edge_ms),
                join(&f.transfer_ms),
                f.wait_ms,
                f.fusion_ms,
                f.tail_ms,
                f.total_ms,
                f.baseline_ms,
                f.speedup
            ));
        }
        out.push_str(&format!(
            "mean speedup {:.3}x (max {:.3}x); mean edge-time reduction {:.1}%\n",
            self.mean_speedup, self.max_speedup, self.mean_edge_reduction_pct
        ));
        out.push_str(&format!(
            "reference points (external, not asserted): {:.2}x mean speedup, {:.1}% edge-time reduction\n",
            self.reference.mean_speedup, self.reference.edge_time_reduction_pct
        ));
        out
    }
}
