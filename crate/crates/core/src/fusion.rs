//! Spatial alignment of intermediate tensors into a common frame and the two
//! integration operators: per-voxel max selection and channel concatenation
//! followed by a single convolution (kernel 1 or 3).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::sparse::{ConvKernel, GridSpec, SparseError, SparseFeatureTensor, VoxelIdx};
use std::collections::BTreeSet;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("tensor resolution (stride scale / base voxel size) does not match the target grid")]
    ResolutionMismatch,
    #[error("tensors disagree in grid or channel count")]
    GridMismatch,
    #[error("fusion requires at least one tensor")]
    NoTensors,
    #[error("fusion kernel expects {expected} input channels (devices x channels), got {got}")]
    KernelChannels { expected: usize, got: usize },
    #[error("fusion kernel must have stride 1")]
    StridedFusionKernel,
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Integration operator selection.
#[derive(Debug, Clone)]
pub enum FusionMethod {
    /// Per-voxel, per-channel maximum across devices.
    Max,
    /// Concatenate device channels and apply one conv (kernel 1 or 3).
    ConcatConv { kernel: ConvKernel },
}

/// How intermediate outputs are integrated: the operator, the device order
/// that fixes concatenation slots, and the common integration grid.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub device_order: Vec<u16>,
    pub target_grid: GridSpec,
}

impl FusionConfig {
    pub fn validate(&self, channels: usize) -> Result<(), FusionError> {
        let mut seen = BTreeSet::new();
        for d in &self.device_order {
            if !seen.insert(*d) {
                return Err(FusionError::GridMismatch);
            }
        }
        if let FusionMethod::ConcatConv { kernel } = &self.method {
            let expected = self.device_order.len() * channels;
            if kernel.c_in != expected {
                return Err(FusionError::KernelChannels {
                    expected,
                    got: kernel.c_in,
                });
            }
            if kernel.c_out != channels {
                return Err(FusionError::KernelChannels {
                    expected: channels,
                    got: kernel.c_out,
                });
            }
            if kernel.stride != 1 {
                return Err(FusionError::StridedFusionKernel);
            }
        }
        Ok(())
    }
}

/// Moves a tensor onto `target` through the rigid transform `t`.
///
/// Every occupied index is mapped voxel-center -> physical point -> `t` ->
/// target index (`round((p' - origin)/ev - 0.5)`, ties away from zero).
/// Entries landing outside the target dims are dropped; collisions combine
/// per-channel by maximum. Features are copied unmodified.
///
/// Requires the common-resolution assumption: same base voxel size and
/// stride scale on both grids.
pub fn transform_tensor(
    tensor: &SparseFeatureTensor,
    t: &RigidTransform,
    target: &GridSpec,
) -> Result<SparseFeatureTensor, FusionError> {
    target.validate()?;
    if !tensor.grid().same_resolution(target) {
        return Err(FusionError::ResolutionMismatch);
    }
    let ev = target.effective_voxel_size();
    let mut out = SparseFeatureTensor::new(*target, tensor.channels())?;
    for (idx, feat) in tensor.iter() {
        let p = tensor.grid().center_of(idx);
        let q = t.apply_point(p);
        let mut target_idx = [0i32; 3];
        let mut inside = true;
        for a in 0..3 {
            // Round half away from zero (f64::round's tie rule).
            let r = ((q[a] - target.origin[a]) / ev[a] - 0.5).round();
            if r < 0.0 || r >= target.dims[a] as f64 {
                inside = false;
                break;
            }
            target_idx[a] = r as i32;
        }
        if inside {
            out.insert_max(target_idx, feat.to_vec())?;
        }
    }
    Ok(out)
}

fn check_common(tensors: &[SparseFeatureTensor]) -> Result<(GridSpec, usize), FusionError> {
    let first = tensors.first().ok_or(FusionError::NoTensors)?;
    for t in &tensors[1..] {
        if t.grid() != first.grid() || t.channels() != first.channels() {
            return Err(FusionError::GridMismatch);
        }
    }
    Ok((*first.grid(), first.channels()))
}

/// Per-voxel max selection over tensors on a common grid: the support is the
/// union of supports; overlapping indices take the per-channel maximum and
/// sole occupants pass through verbatim.
pub fn fuse_max(tensors: &[SparseFeatureTensor]) -> Result<SparseFeatureTensor, FusionError> {
    let (grid, channels) = check_common(tensors)?;
    let mut out = SparseFeatureTensor::new(grid, channels)?;
    for t in tensors {
        for (idx, feat) in t.iter() {
            out.insert_max(idx, feat.to_vec())?;
        }
    }
    Ok(out)
}

/// Concatenation + convolution integration.
///
/// Builds a virtual `N*C`-channel tensor on the union support (devices are
/// slotted in list order; channels of devices absent at an index are
/// zero-filled) and applies the fusion conv. The output support is restricted
/// to the union support, and the output has `C` channels again.
pub fn fuse_concat_conv(
    tensors: &[SparseFeatureTensor],
    kernel: &ConvKernel,
) -> Result<SparseFeatureTensor, FusionError> {
    let (grid, channels) = check_common(tensors)?;
    let n = tensors.len();
    if kernel.c_in != n * channels {
        return Err(FusionError::KernelChannels {
            expected: n * channels,
            got: kernel.c_in,
        });
    }
    if kernel.c_out != channels {
        return Err(FusionError::KernelChannels {
            expected: channels,
            got: kernel.c_out,
        });
    }
    if kernel.stride != 1 {
        return Err(FusionError::StridedFusionKernel);
    }

    let union: BTreeSet<VoxelIdx> = tensors
        .iter()
        .flat_map(|t| t.occupied_indices().map(VoxelIdx))
        .collect();

    let k = kernel.k as i32;
    let half = k / 2;
    let mut out = SparseFeatureTensor::new(grid, channels)?;
    for y in &union {
        let mut acc = vec![0.0f32; channels];
        for oz in 0..k {
            for oy in 0..k {
                for ox in 0..k {
                    let x = VoxelIdx([y.0[0] + ox - half, y.0[1] + oy - half, y.0[2] + oz - half]);
                    if !union.contains(&x) {
                        continue;
                    }
                    let flat = (ox + k * oy + k * k * oz) as usize;
                    for (d, t) in tensors.iter().enumerate() {
                        let Some(feat) = t.get(x.0) else { continue };
                        for (ci, f) in feat.iter().enumerate() {
                            if *f == 0.0 {
                                continue;
                            }
                            let virtual_ci = d * channels + ci;
                            for (co, a) in acc.iter_mut().enumerate() {
                                *a += kernel.weight(flat, virtual_ci, co) * f;
                            }
                        }
                    }
                }
            }
        }
        for (co, a) in acc.iter_mut().enumerate() {
            *a += kernel.bias()[co];
            if kernel.relu && *a < 0.0 {
                *a = 0.0;
            }
        }
        out.insert(y.0, acc)?;
    }
    Ok(out)
}

/// Applies the configured integration operator. `tensors` must be ordered
/// per `cfg.device_order` (absent devices as empty tensors on the target
/// grid, so their concat channel slots zero-fill).
pub fn fuse(
    tensors: &[SparseFeatureTensor],
    cfg: &FusionConfig,
) -> Result<SparseFeatureTensor, FusionError> {
    match &cfg.method {
        FusionMethod::Max => fuse_max(tensors),
        FusionMethod::ConcatConv { kernel } => fuse_concat_conv(tensors, kernel),
    }
}

/// The averaging preset: the center tap maps each device's channel `c` to
/// output channel `c` with weight `1/n`, so the fused feature is the mean
/// over device slots (absent slots count as zero).
pub fn averaging_fusion_kernel(n: usize, channels: usize, k: usize) -> ConvKernel {
    let c_in = n * channels;
    let mut w = vec![0.0f32; k.pow(3) * c_in * channels];
    let center = {
        let h = k / 2;
        h + k * h + k * k * h
    };
    for d in 0..n {
        for c in 0..channels {
            w[(center * c_in + d * channels + c) * channels + c] = 1.0 / n as f32;
        }
    }
    ConvKernel::new(k, 1, c_in, channels, w, vec![0.0; channels], false)
        .expect("preset dimensions are consistent")
}

/// Seeded-random fusion kernel with the usual fan-in bound.
pub fn seeded_fusion_kernel(n: usize, channels: usize, k: usize, seed: u64) -> ConvKernel {
    use rand::Rng;
    use rand::SeedableRng;
    let c_in = n * channels;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / ((k.pow(3) * c_in) as f32).sqrt();
    let w = (0..k.pow(3) * c_in * channels)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    let bias = (0..channels).map(|_| rng.random_range(-bound..=bound)).collect();
    ConvKernel::new(k, 1, c_in, channels, w, bias, false).expect("dimensions are consistent")
}

/// Fusion-method names used by configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethodName {
    Max,
    Concat1,
    Concat3,
}

impl FusionMethodName {
    pub fn label(&self) -> &'static str {
        match self {
            FusionMethodName::Max => "max selection",
            FusionMethodName::Concat1 => "concat conv k=1",
            FusionMethodName::Concat3 => "concat conv k=3",
        }
    }

    pub fn kernel_size(&self) -> Option<usize> {
        match self {
            FusionMethodName::Max => None,
            FusionMethodName::Concat1 => Some(1),
            FusionMethodName::Concat3 => Some(3),
        }
    }
}
