//! The toy split detector: a head (voxelize + one conv) that runs on edge
//! roles and a tail (remaining convs + BEV detection head) that runs on the
//! server. The split sits immediately after the first 3D convolution, so the
//! tail never sees raw point coordinates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::PointCloud;
use crate::sparse::{
    sparse_conv, voxelize, ConvKernel, GridSpec, SparseError, SparseFeatureTensor, COUNT_CHANNEL,
    VOXELIZE_CHANNELS,
};

/// Gain on the occupancy channel in identity-preserving head weights; large
/// enough that any occupied voxel clears the BEV threshold even after a 1/N
/// averaging fusion.
pub const OCCUPANCY_GAIN: f32 = 64.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("network spec invalid: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("weights carry {got} layers, spec has {expected}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("model file {path}: {reason}")]
    ModelFile { path: String, reason: String },
}

/// Shape of one convolution layer (weights live in [`Weights`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub relu: bool,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.kernel.pow(3) * self.c_in * self.c_out
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.pow(3) * self.c_in
    }
}

fn default_bev_threshold() -> f32 {
    0.5
}

/// Architecture of the split network: one pre-split head conv, the tail conv
/// stack, and the BEV detection head parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_grid: GridSpec,
    pub head: LayerShape,
    pub tail: Vec<LayerShape>,
    #[serde(default = "default_bev_threshold")]
    pub bev_threshold: f32,
    #[serde(default)]
    pub score_channel: usize,
}

impl NetworkSpec {
    /// Tiny default backbone: head k3 s1 (4 -> 16); tail k3 s2 (16 -> 32)
    /// and k3 s1 (32 -> 32).
    pub fn default_backbone(input_grid: GridSpec) -> Self {
        Self {
            input_grid,
            head: LayerShape {
                kernel: 3,
                stride: 1,
                c_in: VOXELIZE_CHANNELS,
                c_out: 16,
                relu: true,
            },
            tail: vec![
                LayerShape {
                    kernel: 3,
                    stride: 2,
                    c_in: 16,
                    c_out: 32,
                    relu: true,
                },
                LayerShape {
                    kernel: 3,
                    stride: 1,
                    c_in: 32,
                    c_out: 32,
                    relu: true,
                },
            ],
            bev_threshold: default_bev_threshold(),
            score_channel: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.input_grid.validate()?;
        if self.input_grid.stride_scale != 1 {
            return Err(ModelError::InvalidSpec(
                "input grid must have stride scale 1".into(),
            ));
        }
        if self.head.c_in != VOXELIZE_CHANNELS {
            return Err(ModelError::InvalidSpec(format!(
                "head input channels {} != voxelize channels {VOXELIZE_CHANNELS}",
                self.head.c_in
            )));
        }
        let mut c = self.head.c_out;
        for (i, l) in self.tail.iter().enumerate() {
            if l.c_in != c {
                return Err(ModelError::InvalidSpec(format!(
                    "tail layer {i} input channels {} != previous output {c}",
                    l.c_in
                )));
            }
            c = l.c_out;
        }
        if !(self.bev_threshold > 0.0 && self.bev_threshold < 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "BEV threshold {} outside (0, 1)",
                self.bev_threshold
            )));
        }
        if self.score_channel >= c {
            return Err(ModelError::InvalidSpec(format!(
                "score channel {} >= final channel count {c}",
                self.score_channel
            )));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut v = vec![self.head];
        v.extend_from_slice(&self.tail);
        v
    }

    /// Grid of the head output (what crosses the wire and gets fused).
    pub fn head_output_grid(&self) -> GridSpec {
        self.input_grid.strided(self.head.stride as u32)
    }

    /// Channel count of the intermediate output.
    pub fn intermediate_channels(&self) -> usize {
        self.head.c_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    SeededRandom,
    IdentityPreserving,
}

/// One layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// All layer parameters in head-then-tail order, plus how they were made.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
    pub seed: u64,
    pub mode: InitMode,
}

/// Deterministic weight initialization.
///
/// `SeededRandom` draws uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
/// `IdentityPreserving` wires, for each conv, the taps covering the stride
/// cell so occupancy flows through with positive gain: the head routes the
/// occupancy channel, later layers pass channel averages. The result is a
/// calibrated occupancy detector useful for end-to-end tests.
pub fn init_weights(spec: &NetworkSpec, seed: u64, mode: InitMode) -> Result<Weights, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (li, shape) in spec.layer_shapes().iter().enumerate() {
        let mut weights = vec![0.0f32; shape.weight_len()];
        let mut bias = vec![0.0f32; shape.c_out];
        match mode {
            InitMode::SeededRandom => {
                let bound = 1.0 / (shape.fan_in() as f32).sqrt();
                for w in weights.iter_mut() {
                    *w = rng.random_range(-bound..=bound);
                }
                for b in bias.iter_mut() {
                    *b = rng.random_range(-bound..=bound);
                }
            }
            InitMode::IdentityPreserving => {
                let k = shape.kernel;
                let half = k / 2;
                for oz in 0..k {
                    for oy in 0..k {
                        for ox in 0..k {
                            // Taps whose input offset lies in [0, stride)^3
                            // cover each input voxel exactly once.
                            let covered = [ox, oy, oz].iter().all(|o| {
                                let rel = *o as i64 - half as i64;
                                rel >= 0 && rel < shape.stride as i64
                            });
                            if !covered {
                                continue;
                            }
                            let flat = ox + k * oy + k * k * oz;
                            for co in 0..shape.c_out {
                                if li == 0 {
                                    let ci = COUNT_CHANNEL;
                                    weights[(flat * shape.c_in + ci) * shape.c_out + co] =
                                        OCCUPANCY_GAIN;
                                } else {
                                    for ci in 0..shape.c_in {
                                        weights[(flat * shape.c_in + ci) * shape.c_out + co] =
                                            1.0 / shape.c_in as f32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        layers.push(LayerWeights { weights, bias });
    }
    Ok(Weights { layers, seed, mode })
}

fn kernel_for(shape: &LayerShape, w: &LayerWeights) -> Result<ConvKernel, ModelError> {
    Ok(ConvKernel::new(
        shape.kernel,
        shape.stride,
        shape.c_in,
        shape.c_out,
        w.weights.clone(),
        w.bias.clone(),
        shape.relu,
    )?)
}

/// A 3D detection: axis-aligned box, score, class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub score: f32,
    pub class_id: u32,
}

/// Per-layer forward statistics for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRun {
    pub output_sites: usize,
    pub macs: u64,
}

fn conv_macs(shape: &LayerShape, output_sites: usize) -> u64 {
    output_sites as u64 * shape.kernel.pow(3) as u64 * shape.c_in as u64 * shape.c_out as u64
}

fn check_layers(spec: &NetworkSpec, weights: &Weights) -> Result<(), ModelError> {
    spec.validate()?;
    let shapes = spec.layer_shapes();
    if weights.layers.len() != shapes.len() {
        return Err(ModelError::LayerCountMismatch {
            expected: shapes.len(),
            got: weights.layers.len(),
        });
    }
    Ok(())
}

/// Edge-side forward pass: voxelize the local cloud and apply the single
/// head conv. Raw points never appear downstream of this call.
pub fn run_head(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<SparseFeatureTensor, ModelError> {
    Ok(run_head_instrumented(cloud, spec, weights)?.0)
}

pub fn run_head_instrumented(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<(SparseFeatureTensor, Vec<LayerRun>), ModelError> {
    check_layers(spec, weights)?;
    let vox = voxelize(cloud, &spec.input_grid)?;
    let kernel = kernel_for(&spec.head, &weights.layers[0])?;
    let out = sparse_conv(&vox, &kernel)?;
    let runs = vec![LayerRun {
        output_sites: out.len(),
        macs: conv_macs(&spec.head, out.len()),
    }];
    Ok((out, runs))
}

/// Server-side forward pass: tail convs, then the BEV occupancy head.
pub fn run_tail(
    fused: &SparseFeatureTensor,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<Vec<Detection>, ModelError> {
    Ok(run_tail_instrumented(fused, spec, weights)?.0)
}

pub fn run_tail_instrumented(
    fused: &SparseFeatureTensor,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<(Vec<Detection>, Vec<LayerRun>), ModelError> {
    check_layers(spec, weights)?;
    let mut t = fused.clone();
    let mut runs = Vec::new();
    for (shape, w) in spec.tail.iter().zip(&weights.layers[1..]) {
        let kernel = kernel_for(shape, w)?;
        t = sparse_conv(&t, &kernel)?;
        runs.push(LayerRun {
            output_sites: t.len(),
            macs: conv_macs(shape, t.len()),
        });
    }
    Ok((detect_bev(&t, spec), runs))
}

/// The whole network as one pass (no split, no fusion); the reference the
/// split pipeline must reproduce bit-exactly for a single sensor.
pub fn run_unsplit(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<Vec<Detection>, ModelError> {
    Ok(run_unsplit_instrumented(cloud, spec, weights)?.0)
}

pub fn run_unsplit_instrumented(
    cloud: &PointCloud,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<(Vec<Detection>, Vec<LayerRun>), ModelError> {
    let (head_out, mut runs) = run_head_instrumented(cloud, spec, weights)?;
    let (dets, tail_runs) = run_tail_instrumented(&head_out, spec, weights)?;
    runs.extend(tail_runs);
    Ok((dets, runs))
}

/// BEV occupancy head.
///
/// Projects the score channel to BEV by per-(x, y) column maximum over z,
/// thresholds, groups above-threshold cells into 8-connected components, and
/// boxes each component by the physical extent of its above-threshold voxels
/// expanded by half an effective voxel per side. The component score is the
/// mean of its BEV cell scores, clamped to [0, 1].
pub fn detect_bev(tensor: &SparseFeatureTensor, spec: &NetworkSpec) -> Vec<Detection> {
    let tau = spec.bev_threshold;
    let grid = tensor.grid();
    let ev = grid.effective_voxel_size();

    // Column maxima and the above-threshold voxels per column, in canonical
    // order for determinism.
    let mut bev: BTreeMap<(i32, i32), f32> = BTreeMap::new();
    let mut column_voxels: BTreeMap<(i32, i32), Vec<[i32; 3]>> = BTreeMap::new();
    for (idx, feat) in tensor.iter() {
        let s = feat[spec.score_channel];
        let key = (idx[1], idx[0]);
        let slot = bev.entry(key).or_insert(f32::NEG_INFINITY);
        if s > *slot {
            *slot = s;
        }
        if s > tau {
            column_voxels.entry(key).or_default().push(idx);
        }
    }

    let above: BTreeSet<(i32, i32)> = bev
        .iter()
        .filter(|(_, s)| **s > tau)
        .map(|(k, _)| *k)
        .collect();

    let mut visited: BTreeSet<(i32, i32)> = BTreeSet::new();
    let mut detections = Vec::new();
    for seed in &above {
        if visited.contains(seed) {
            continue;
        }
        // BFS over the 8-connected neighborhood.
        let mut component = Vec::new();
        let mut queue = vec![*seed];
        visited.insert(*seed);
        while let Some(cell) = queue.pop() {
            component.push(cell);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let n = (cell.0 + dy, cell.1 + dx);
                    if above.contains(&n) && visited.insert(n) {
                        queue.push(n);
                    }
                }
            }
        }
        component.sort_unstable();

        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for cell in &component {
            for idx in column_voxels.get(cell).map(|v| v.as_slice()).unwrap_or(&[]) {
                let c = grid.center_of(*idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        let mut score_sum = 0.0f32;
        for cell in &component {
            score_sum += bev[cell];
        }
        let score = (score_sum / component.len() as f32).clamp(0.0, 1.0);
        let center = [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ];
        let size = [
            hi[0] - lo[0] + ev[0],
            hi[1] - lo[1] + ev[1],
            hi[2] - lo[2] + ev[2],
        ];
        detections.push(Detection {
            center,
            size,
            score,
            class_id: 0,
        });
    }
    detections
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerWeightsDoc {
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    spec: NetworkSpec,
    seed: u64,
    mode: InitMode,
    layers: Vec<LayerWeightsDoc>,
}

fn encode_f32s(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f32s(s: &str) -> Result<Vec<f32>, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err("byte length not a multiple of 4".into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Persists spec + weights as one JSON document; weight arrays are base64
/// little-endian f32.
pub fn save_model(
    path: &Path,
    spec: &NetworkSpec,
    weights: &Weights,
) -> Result<(), ModelError> {
    check_layers(spec, weights)?;
    let doc = ModelDoc {
        spec: spec.clone(),
        seed: weights.seed,
        mode: weights.mode,
        layers: weights
            .layers
            .iter()
            .map(|l| LayerWeightsDoc {
                weights: encode_f32s(&l.weights),
                bias: encode_f32s(&l.bias),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| ModelError::ModelFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| ModelError::ModelFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_model(path: &Path) -> Result<(NetworkSpec, Weights), ModelError> {
    let file_err = |reason: String| ModelError::ModelFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let doc: ModelDoc = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
    let shapes = doc.spec.layer_shapes();
    if doc.layers.len() != shapes.len() {
        return Err(ModelError::LayerCountMismatch {
            expected: shapes.len(),
            got: doc.layers.len(),
        });
    }
    let mut layers = Vec::new();
    for (i, (l, shape)) in doc.layers.iter().zip(&shapes).enumerate() {
        let weights = decode_f32s(&l.weights).map_err(|e| file_err(format!("layer {i}: {e}")))?;
        let bias = decode_f32s(&l.bias).map_err(|e| file_err(format!("layer {i}: {e}")))?;
        if weights.len() != shape.weight_len() || bias.len() != shape.c_out {
            return Err(file_err(format!(
                "layer {i}: array lengths {}/{} do not match shape",
                weights.len(),
                bias.len()
            )));
        }
        layers.push(LayerWeights { weights, bias });
    }
    let weights = Weights {
        layers,
        seed: doc.seed,
        mode: doc.mode,
    };
    check_layers(&doc.spec, &weights)?;
    Ok((doc.spec, weights))
}
