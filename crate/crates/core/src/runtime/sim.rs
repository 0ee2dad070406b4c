//! Virtual-clock, discrete-event simulation of the split pipeline over a
//! modeled link, against an edge-only baseline.
//!
//! The data path is real: head outputs are encoded to wire bytes, optionally
//! corrupted, decoded, pushed through the barrier, and fused exactly as the
//! networked pipeline would. Only time is simulated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fusion::FusionConfig;
use crate::geometry::CalibrationFile;
use crate::model::{run_unsplit_instrumented, Detection, NetworkSpec, Weights};
use crate::pointcloud::{transform_cloud, PointCloud};
use crate::protocol::{decode_frame, Message};
use crate::runtime::{
    edge_step, head_cost, server_infer_instrumented, CostModel, FrameBarrier, FrameTiming,
    LinkModel, RuntimeError, TimingReport, VecTransport,
};

/// How the edge-only baseline treats the other devices' raw clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// All clouds are already on the aggregating device (conservative).
    #[default]
    EdgeOnlyColocated,
    /// Non-reference clouds cross the modeled link first.
    EdgeOnlyNetworked,
}

/// Result of one simulated frame.
#[derive(Debug, Clone)]
pub struct SimFrameOutcome {
    pub frame_id: u64,
    pub complete: bool,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub timing: TimingReport,
    pub frames: Vec<SimFrameOutcome>,
    pub corrupted: u64,
}

/// Raw-cloud bytes for the networked baseline (the binary cloud format).
fn raw_cloud_bytes(cloud: &PointCloud) -> usize {
    4 + cloud.len() * 12
}

/// Runs the split pipeline on every frame and reports virtual-clock timing.
///
/// `frames[f][i]` is the frame-`f` local cloud of `fusion.device_order[i]`.
/// Per frame the modeled end-to-end time is
/// `release + fusion + tail`, where release follows the barrier semantics
/// over per-device arrivals `edge + serialize + transfer + deserialize`.
/// The edge-only baseline runs the unsplit model over the merged calibrated
/// clouds at edge throughput (plus raw-cloud transfers when networked).
pub fn simulate_pipeline(
    frames: &[Vec<PointCloud>],
    calibration: &CalibrationFile,
    spec: &NetworkSpec,
    weights: &Weights,
    fusion: &FusionConfig,
    link: &LinkModel,
    cost: &CostModel,
    baseline: BaselineMode,
    timeout_ms: f64,
) -> Result<SimOutput, RuntimeError> {
    link.validate()?;
    cost.validate()?;
    spec.validate().map_err(RuntimeError::Model)?;
    fusion
        .validate(spec.intermediate_channels())
        .map_err(RuntimeError::Fusion)?;
    let devices = &fusion.device_order;
    let n_dev = devices.len();

    let mut rows = Vec::with_capacity(frames.len());
    let mut outcomes = Vec::with_capacity(frames.len());
    let mut corrupted_total = 0u64;

    for (f, clouds) in frames.iter().enumerate() {
        if clouds.len() != n_dev {
            return Err(RuntimeError::InvalidConfig {
                what: "frames",
                reason: format!(
                    "frame {f} has {} clouds for {n_dev} devices",
                    clouds.len()
                ),
            });
        }
        let frame_id = f as u64;

        // Edge side per device: head compute, encode, modeled link.
        let mut edge_ms = Vec::with_capacity(n_dev);
        let mut transfer_ms = Vec::with_capacity(n_dev);
        let mut arrivals: Vec<(f64, usize, Vec<u8>, bool)> = Vec::with_capacity(n_dev);
        for (i, (device, cloud)) in devices.iter().zip(clouds).enumerate() {
            let (_, head_macs) = head_cost(cloud, spec, weights, cost)?;
            let e_ms = cost.edge_compute_ms(head_macs, 1);
            let mut sink = VecTransport::default();
            let bytes =
                edge_step(cloud, spec, weights, *device, frame_id, frame_id * 100_000, &mut sink)?;

            // Seeded per (frame, device): stream 2f*D+i for the jitter and
            // corruption draws, 2f*D+D+i for baseline transfers.
            let mut rng = ChaCha8Rng::seed_from_u64(link.seed);
            rng.set_stream((2 * f * n_dev + i) as u64);
            let jitter = if link.jitter_ms > 0.0 {
                rng.random_range(0.0..=link.jitter_ms)
            } else {
                0.0
            };
            let corrupt = link.corruption_prob > 0.0 && rng.random_bool(link.corruption_prob);

            let ser_ms = cost.edge_serialize_ms(bytes);
            let tr_ms = link.transfer_ms(bytes) + jitter;
            let deser_ms = cost.server_serialize_ms(bytes);
            edge_ms.push(e_ms + ser_ms);
            transfer_ms.push(tr_ms);

            let mut frame_bytes = sink.frames.pop().expect("edge_step sent one frame");
            if corrupt {
                corrupted_total += 1;
                let mid = frame_bytes.len() / 2;
                frame_bytes[mid] ^= 0x01;
            }
            arrivals.push((e_ms + ser_ms + tr_ms + deser_ms, i, frame_bytes, corrupt));
        }

        // Deliver in arrival order through the real decode path and barrier.
        arrivals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut barrier = FrameBarrier::new(devices.iter().copied(), timeout_ms);
        let mut release = None;
        let mut first_arrival_ms: Option<f64> = None;
        for (at_ms, _, bytes, _) in &arrivals {
            let now_us = (at_ms * 1000.0) as u64;
            if release.is_some() {
                break;
            }
            match decode_frame(bytes) {
                Ok((Message::Feature(msg), _)) => {
                    first_arrival_ms.get_or_insert(*at_ms);
                    release = barrier.offer(msg.device_id, msg.frame_id, msg.tensor, now_us);
                }
                Ok(_) => unreachable!("edge_step only emits FEATURE frames"),
                Err(e) => {
                    // Corrupted in transit: the frame is dropped, no retry.
                    log::debug!("frame {frame_id}: dropped corrupt arrival: {e}");
                }
            }
        }
        let release = match release {
            Some(r) => Some(r),
            None => {
                // Not completed by arrivals; the timeout fires if anything came.
                let deadline = barrier.next_deadline_us();
                deadline.and_then(|d| barrier.poll(d).into_iter().next())
            }
        };

        let (release_ms, wait_ms, tensors, complete) = match &release {
            Some(r) => {
                let release_ms = r.released_at_us as f64 / 1000.0;
                (
                    release_ms,
                    release_ms - first_arrival_ms.unwrap_or(release_ms),
                    r.tensors.clone(),
                    r.complete,
                )
            }
            // Every arrival was corrupted: the server never saw the frame.
            None => (timeout_ms, 0.0, Vec::new(), false),
        };

        let (detections, fusion_ms, tail_ms) = if tensors.is_empty() {
            (Vec::new(), 0.0, 0.0)
        } else {
            let (dets, stats) =
                server_infer_instrumented(&tensors, calibration, fusion, spec, weights)?;
            let fusion_ms =
                cost.server_compute_ms(stats.transform_macs + stats.fusion_macs, 1);
            let tail_macs: u64 = stats.tail_runs.iter().map(|r| r.macs).sum();
            let tail_ms = cost.server_compute_ms(tail_macs, stats.tail_runs.len());
            (dets, fusion_ms, tail_ms)
        };
        let total_ms = release_ms + fusion_ms + tail_ms;

        // Edge-only baseline: merge calibrated raw clouds, run the unsplit
        // model at edge throughput.
        let mut merged_parts = Vec::with_capacity(n_dev);
        for (device, cloud) in devices.iter().zip(clouds) {
            let t = calibration
                .transform_for(*device)
                .ok_or(RuntimeError::UnknownDevice(*device))?;
            merged_parts.push(transform_cloud(cloud, &t));
        }
        let merged = PointCloud::merge(&merged_parts.iter().collect::<Vec<_>>());
        let (_, runs) = run_unsplit_instrumented(&merged, spec, weights)?;
        let vox_macs = (merged.len() as f64 * cost.voxelize_mac_per_point) as u64;
        let conv_macs: u64 = runs.iter().map(|r| r.macs).sum();
        let mut baseline_ms = cost.edge_compute_ms(vox_macs + conv_macs, runs.len());
        if baseline == BaselineMode::EdgeOnlyNetworked {
            // Parallel raw-cloud transfers from the non-aggregating devices.
            let mut worst: f64 = 0.0;
            for (i, cloud) in clouds.iter().enumerate().skip(1) {
                let bytes = raw_cloud_bytes(cloud);
                let mut rng = ChaCha8Rng::seed_from_u64(link.seed);
                rng.set_stream((2 * f * n_dev + n_dev + i) as u64);
                let jitter = if link.jitter_ms > 0.0 {
                    rng.random_range(0.0..=link.jitter_ms)
                } else {
                    0.0
                };
                worst = worst
                    .max(cost.edge_serialize_ms(bytes) + link.transfer_ms(bytes) + jitter);
            }
            baseline_ms += worst;
        }

        rows.push(FrameTiming {
            frame_id,
            edge_ms,
            transfer_ms,
            wait_ms,
            fusion_ms,
            tail_ms,
            total_ms,
            baseline_ms,
            speedup: baseline_ms / total_ms,
            complete,
        });
        outcomes.push(SimFrameOutcome {
            frame_id,
            complete,
            detections,
        });
    }

    Ok(SimOutput {
        timing: TimingReport::from_frames(rows),
        frames: outcomes,
        corrupted: corrupted_total,
    })
}
