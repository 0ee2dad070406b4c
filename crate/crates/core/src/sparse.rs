//! Sparse voxel feature tensors, point-cloud voxelization, and the regular
//! sparse 3D convolution the split network is built from.
//!
//! Features are 32-bit floats; all physical-coordinate bookkeeping is f64.
//! Tensor entries are kept in canonical `(z, y, x)`-ascending order, which
//! makes iteration, accumulation, and wire encoding deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::PointCloud;

/// Channel count produced by [`voxelize`]: mean offsets (3) + clipped count (1).
pub const VOXELIZE_CHANNELS: usize = 4;
/// Index of the clipped-count channel within the voxelize encoding.
pub const COUNT_CHANNEL: usize = 3;
/// Point count at which the count channel saturates.
pub const COUNT_CAP: u32 = 32;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("kernel expects {expected} input channels, tensor has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("voxelize requires stride scale 1, grid has {0}")]
    StridedVoxelizeGrid(u32),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("voxel index {index:?} outside grid dims {dims:?}")]
    IndexOutOfDims { index: [i32; 3], dims: [u32; 3] },
    #[error("feature vector length {got} != channel count {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("non-finite feature value")]
    NonFiniteFeature,
}

/// Placement of a voxel lattice in physical space.
///
/// `origin` is the corner of voxel index `(0,0,0)`; the effective voxel size
/// is `voxel_size * stride_scale`, where `stride_scale` is the product of
/// convolution strides applied so far. The physical center of index `i` is
/// `origin + (i + 0.5) * effective_voxel_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [u32; 3],
    pub stride_scale: u32,
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [u32; 3]) -> Self {
        Self {
            origin,
            voxel_size,
            dims,
            stride_scale: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        if !(self.origin.iter().all(|v| v.is_finite())
            && self.voxel_size.iter().all(|v| v.is_finite() && *v > 0.0))
        {
            return Err(SparseError::InvalidGrid(
                "origin must be finite and voxel size positive".into(),
            ));
        }
        if self.dims.iter().any(|d| *d == 0) {
            return Err(SparseError::InvalidGrid("dims must be >= 1".into()));
        }
        if self.stride_scale == 0 {
            return Err(SparseError::InvalidGrid("stride scale must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_voxel_size(&self) -> [f64; 3] {
        let s = self.stride_scale as f64;
        [
            self.voxel_size[0] * s,
            self.voxel_size[1] * s,
            self.voxel_size[2] * s,
        ]
    }

    /// Physical center of a voxel index at the current resolution.
    pub fn center_of(&self, idx: [i32; 3]) -> [f64; 3] {
        let ev = self.effective_voxel_size();
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * ev[0],
            self.origin[1] + (idx[1] as f64 + 0.5) * ev[1],
            self.origin[2] + (idx[2] as f64 + 0.5) * ev[2],
        ]
    }

    /// Containing voxel index of a physical point, or `None` outside dims.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[i32; 3]> {
        let ev = self.effective_voxel_size();
        let mut idx = [0i32; 3];
        for a in 0..3 {
            let q = ((p[a] - self.origin[a]) / ev[a]).floor();
            if q < 0.0 || q >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = q as i32;
        }
        Some(idx)
    }

    pub fn contains_index(&self, idx: [i32; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as u32) < self.dims[a])
    }

    /// Grid after a convolution of stride `s`: dims shrink by `ceil(d / s)`,
    /// the stride scale multiplies, origin and base voxel size are unchanged.
    pub fn strided(&self, s: u32) -> GridSpec {
        GridSpec {
            origin: self.origin,
            voxel_size: self.voxel_size,
            dims: [
                self.dims[0].div_ceil(s),
                self.dims[1].div_ceil(s),
                self.dims[2].div_ceil(s),
            ],
            stride_scale: self.stride_scale * s,
        }
    }

    /// True when both grids share base voxel size and stride scale (they may
    /// differ in origin and dims).
    pub fn same_resolution(&self, other: &GridSpec) -> bool {
        self.voxel_size == other.voxel_size && self.stride_scale == other.stride_scale
    }
}

/// Voxel index ordered by `(z, y, x)` — the canonical iteration and wire
/// order for tensor entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelIdx(pub [i32; 3]);

impl Ord for VoxelIdx {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let a = (self.0[2], self.0[1], self.0[0]);
        let b = (other.0[2], other.0[1], other.0[0]);
        a.cmp(&b)
    }
}

impl PartialOrd for VoxelIdx {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Sparse voxel grid of C-channel feature vectors — the intermediate output
/// that crosses the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureTensor {
    grid: GridSpec,
    channels: usize,
    entries: BTreeMap<VoxelIdx, Vec<f32>>,
}

impl SparseFeatureTensor {
    pub fn new(grid: GridSpec, channels: usize) -> Result<Self, SparseError> {
        grid.validate()?;
        if channels == 0 {
            return Err(SparseError::InvalidGrid("channel count must be >= 1".into()));
        }
        Ok(Self {
            grid,
            channels,
            entries: BTreeMap::new(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: [i32; 3]) -> Option<&[f32]> {
        self.entries.get(&VoxelIdx(idx)).map(|v| v.as_slice())
    }

    /// Entries in canonical `(z, y, x)`-ascending order.
    pub fn iter(&self) -> impl Iterator<Item = ([i32; 3], &[f32])> {
        self.entries.iter().map(|(k, v)| (k.0, v.as_slice()))
    }

    pub fn insert(&mut self, idx: [i32; 3], features: Vec<f32>) -> Result<(), SparseError> {
        if !self.grid.contains_index(idx) {
            return Err(SparseError::IndexOutOfDims {
                index: idx,
                dims: self.grid.dims,
            });
        }
        if features.len() != self.channels {
            return Err(SparseError::FeatureLength {
                expected: self.channels,
                got: features.len(),
            });
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(SparseError::NonFiniteFeature);
        }
        self.entries.insert(VoxelIdx(idx), features);
        Ok(())
    }

    /// Inserts, combining with any existing entry by per-channel maximum.
    pub fn insert_max(&mut self, idx: [i32; 3], features: Vec<f32>) -> Result<(), SparseError> {
        if let Some(existing) = self.entries.get_mut(&VoxelIdx(idx)) {
            for (e, f) in existing.iter_mut().zip(features.iter()) {
                *e = e.max(*f);
            }
            Ok(())
        } else {
            self.insert(idx, features)
        }
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = [i32; 3]> + '_ {
        self.entries.keys().map(|k| k.0)
    }
}

/// A dense 3D convolution kernel over sparse sites.
///
/// Weights are laid out `[k^3][c_in][c_out]` with kernel offsets linearized
/// x-fastest: `flat = ox + k*oy + k^2*oz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub k: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    pub relu: bool,
}

impl ConvKernel {
    pub fn new(
        k: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        relu: bool,
    ) -> Result<Self, SparseError> {
        if !matches!(k, 1 | 3) {
            return Err(SparseError::InvalidKernel(format!("kernel size {k} not in {{1, 3}}")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(SparseError::InvalidKernel(format!("stride {stride} not in {{1, 2}}")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(SparseError::InvalidKernel("channel counts must be >= 1".into()));
        }
        let expect = k * k * k * c_in * c_out;
        if weights.len() != expect {
            return Err(SparseError::InvalidKernel(format!(
                "weights length {} != k^3*c_in*c_out = {expect}",
                weights.len()
            )));
        }
        if bias.len() != c_out {
            return Err(SparseError::InvalidKernel(format!(
                "bias length {} != c_out = {c_out}",
                bias.len()
            )));
        }
        if !(weights.iter().all(|w| w.is_finite()) && bias.iter().all(|b| b.is_finite())) {
            return Err(SparseError::InvalidKernel("non-finite weight or bias".into()));
        }
        Ok(Self {
            k,
            stride,
            c_in,
            c_out,
            weights,
            bias,
            relu,
        })
    }

    #[inline]
    pub fn weight(&self, flat_offset: usize, ci: usize, co: usize) -> f32 {
        self.weights[(flat_offset * self.c_in + ci) * self.c_out + co]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

/// Voxelizes a cloud onto a stride-1 grid.
///
/// Each occupied voxel gets 4 channels: the mean offset of its points from
/// the voxel center, normalized per axis by the voxel size into
/// `[-0.5, 0.5]`, and `min(count, 32) / 32`. Points outside the grid are
/// dropped; an empty cloud produces an empty tensor.
pub fn voxelize(cloud: &PointCloud, grid: &GridSpec) -> Result<SparseFeatureTensor, SparseError> {
    grid.validate()?;
    if grid.stride_scale != 1 {
        return Err(SparseError::StridedVoxelizeGrid(grid.stride_scale));
    }
    let mut acc: BTreeMap<VoxelIdx, ([f64; 3], u32)> = BTreeMap::new();
    for p in cloud.points() {
        if let Some(idx) = grid.index_of(*p) {
            let slot = acc.entry(VoxelIdx(idx)).or_insert(([0.0; 3], 0));
            for a in 0..3 {
                slot.0[a] += p[a];
            }
            slot.1 += 1;
        }
    }
    let mut out = SparseFeatureTensor::new(*grid, VOXELIZE_CHANNELS)?;
    for (idx, (sum, n)) in acc {
        let center = grid.center_of(idx.0);
        let nf = n as f64;
        let mut feat = vec![0.0f32; VOXELIZE_CHANNELS];
        for a in 0..3 {
            feat[a] = ((sum[a] / nf - center[a]) / grid.voxel_size[a]) as f32;
        }
        feat[COUNT_CHANNEL] = n.min(COUNT_CAP) as f32 / COUNT_CAP as f32;
        out.insert(idx.0, feat)?;
    }
    Ok(out)
}

/// Regular sparse 3D convolution.
///
/// An output site `y` exists iff some occupied input `x` satisfies
/// `x = s*y + o - floor(k/2)` for a kernel offset `o` in `[0, k)^3`; its
/// feature is the weighted sum over all such `(x, o)` plus bias, with ReLU
/// when flagged. Output dims are `ceil(dims / s)` per axis and the stride
/// scale multiplies by `s`.
pub fn sparse_conv(
    input: &SparseFeatureTensor,
    kernel: &ConvKernel,
) -> Result<SparseFeatureTensor, SparseError> {
    if kernel.c_in != input.channels {
        return Err(SparseError::ChannelMismatch {
            expected: kernel.c_in,
            got: input.channels,
        });
    }
    let out_grid = input.grid.strided(kernel.stride as u32);
    let k = kernel.k as i32;
    let s = kernel.stride as i32;
    let half = k / 2;

    // Scatter: every occupied input contributes through each kernel offset to
    // the output site it lands on. Canonical input order keeps accumulation
    // deterministic.
    let mut acc: BTreeMap<VoxelIdx, Vec<f32>> = BTreeMap::new();
    for (x, feat) in input.iter() {
        for oz in 0..k {
            for oy in 0..k {
                for ox in 0..k {
                    let o = [ox, oy, oz];
                    let mut y = [0i32; 3];
                    let mut valid = true;
                    for a in 0..3 {
                        let num = x[a] + half - o[a];
                        if num.rem_euclid(s) != 0 {
                            valid = false;
                            break;
                        }
                        let ya = num / s;
                        if ya < 0 || ya as u32 >= out_grid.dims[a] {
                            valid = false;
                            break;
                        }
                        y[a] = ya;
                    }
                    if !valid {
                        continue;
                    }
                    let flat = (ox + k * oy + k * k * oz) as usize;
                    let slot = acc
                        .entry(VoxelIdx(y))
                        .or_insert_with(|| vec![0.0f32; kernel.c_out]);
                    for ci in 0..kernel.c_in {
                        let f = feat[ci];
                        if f == 0.0 {
                            continue;
                        }
                        for co in 0..kernel.c_out {
                            slot[co] += kernel.weight(flat, ci, co) * f;
                        }
                    }
                }
            }
        }
    }

    let mut out = SparseFeatureTensor::new(out_grid, kernel.c_out)?;
    for (idx, mut feat) in acc {
        for co in 0..kernel.c_out {
            feat[co] += kernel.bias()[co];
            if kernel.relu && feat[co] < 0.0 {
                feat[co] = 0.0;
            }
        }
        out.insert(idx.0, feat)?;
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::pointcloud::PointCloud;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(dims: [u32; 3]) -> GridSpec {
        GridSpec::new([0.0; 3], [1.0; 3], dims)
    }

    fn identity_kernel(c: usize) -> ConvKernel {
        let mut w = vec![0.0f32; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        ConvKernel::new(1, 1, c, c, w, vec![0.0; c], false).unwrap()
    }

    #[test]
    fn voxelize_point_at_center() {
        let grid = unit_grid([4, 4, 4]);
        let cloud = PointCloud::from_points(vec![[1.5, 2.5, 0.5]]).unwrap();
        let t = voxelize(&cloud, &grid).unwrap();
        assert_eq!(t.len(), 1);
        let f = t.get([1, 2, 0]).unwrap();
        assert_eq!(&f[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(f[COUNT_CHANNEL], 1.0 / 32.0);
    }

    #[test]
    fn voxelize_drops_out_of_grid_points() {
        let grid = unit_grid([2, 2, 2]);
        let cloud = PointCloud::from_points(vec![[5.0, 0.5, 0.5], [-0.1, 0.5, 0.5]]).unwrap();
        let t = voxelize(&cloud, &grid).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn voxelize_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = GridSpec::new([-4.0, -4.0, 0.0], [0.8, 0.8, 0.5], [10, 10, 8]);
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..4.0),
                ]
            })
            .collect();
        let cloud = PointCloud::from_points(points.clone()).unwrap();
        let t = voxelize(&cloud, &grid).unwrap();

        // Brute-force group-by.
        use std::collections::HashMap;
        let mut groups: HashMap<[i32; 3], Vec<[f64; 3]>> = HashMap::new();
        for p in &points {
            if let Some(idx) = grid.index_of(*p) {
                groups.entry(idx).or_default().push(*p);
            }
        }
        assert_eq!(t.len(), groups.len());
        for (idx, pts) in groups {
            let f = t.get(idx).unwrap();
            let n = pts.len() as f64;
            let center = grid.center_of(idx);
            for a in 0..3 {
                let mean: f64 = pts.iter().map(|p| p[a]).sum::<f64>() / n;
                let expect = (mean - center[a]) / grid.voxel_size[a];
                assert!((f[a] as f64 - expect).abs() < 1e-6);
                assert!(f[a] >= -0.5 && f[a] <= 0.5);
            }
            assert_eq!(f[COUNT_CHANNEL], (pts.len() as u32).min(32) as f32 / 32.0);
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t = random_tensor(&mut rng, unit_grid([6, 6, 6]), 3, 0.3);
        let out = sparse_conv(&t, &identity_kernel(3)).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn single_voxel_k3_all_ones_emits_27_sites() {
        let grid = unit_grid([8, 8, 8]);
        let mut t = SparseFeatureTensor::new(grid, 2).unwrap();
        t.insert([4, 4, 4], vec![1.5, -0.5]).unwrap();
        let w = vec![1.0f32; 27 * 2 * 2];
        let kernel = ConvKernel::new(3, 1, 2, 2, w, vec![0.0, 0.0], false).unwrap();
        let out = sparse_conv(&t, &kernel).unwrap();
        assert_eq!(out.len(), 27);
        for (idx, f) in out.iter() {
            for a in 0..3 {
                assert!((idx[a] - 4).abs() <= 1);
            }
            // All-ones weights: each out channel sums the input channels.
            assert_eq!(f, &[1.0, 1.0][..]);
        }

        // At a corner the neighborhood is clipped.
        let mut t2 = SparseFeatureTensor::new(grid, 2).unwrap();
        t2.insert([0, 0, 0], vec![1.0, 1.0]).unwrap();
        let kernel = ConvKernel::new(3, 1, 2, 2, vec![1.0; 27 * 4], vec![0.0; 2], false).unwrap();
        let out2 = sparse_conv(&t2, &kernel).unwrap();
        assert_eq!(out2.len(), 8);
    }

    #[test]
    fn conv_matches_dense_oracle_all_k_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..24 {
            let dims = [
                rng.random_range(3..=10u32),
                rng.random_range(3..=10u32),
                rng.random_range(3..=10u32),
            ];
            let c_in = rng.random_range(1..=3usize);
            let c_out = rng.random_range(1..=3usize);
            let t = random_tensor(&mut rng, unit_grid(dims), c_in, 0.25);
            for (k, s) in [(1, 1), (1, 2), (3, 1), (3, 2)] {
                let kernel = random_kernel(&mut rng, k, s, c_in, c_out, trial % 2 == 0);
                let got = sparse_conv(&t, &kernel).unwrap();
                let want = dense_conv_oracle(&t, &kernel);
                assert_eq!(got.len(), want.len(), "k={k} s={s} trial={trial}");
                for (idx, feat) in want {
                    let g = got.get(idx).unwrap_or_else(|| panic!("missing {idx:?}"));
                    for c in 0..c_out {
                        assert!(
                            (g[c] - feat[c]).abs() < 1e-5,
                            "k={k} s={s} idx={idx:?} c={c}: {} vs {}",
                            g[c],
                            feat[c]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_without_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let grid = unit_grid([6, 6, 6]);
        let kernel = random_kernel(&mut rng, 3, 1, 2, 2, false);
        // Zero bias so additivity holds exactly at the feature level.
        let kernel = ConvKernel::new(3, 1, 2, 2, kernel.weights().to_vec(), vec![0.0; 2], false)
            .unwrap();

        let a = random_tensor(&mut rng, grid, 2, 0.2);
        // Scaling.
        let mut a2 = SparseFeatureTensor::new(grid, 2).unwrap();
        for (idx, f) in a.iter() {
            a2.insert(idx, f.iter().map(|v| v * 2.0).collect()).unwrap();
        }
        let ca = sparse_conv(&a, &kernel).unwrap();
        let ca2 = sparse_conv(&a2, &kernel).unwrap();
        for (idx, f) in ca.iter() {
            let g = ca2.get(idx).unwrap();
            for c in 0..2 {
                assert!((g[c] - 2.0 * f[c]).abs() < 1e-5);
            }
        }

        // Additivity on disjoint supports.
        let b = {
            let mut b = SparseFeatureTensor::new(grid, 2).unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(25);
            for z in 0..6 {
                for y in 0..6 {
                    for x in 0..6 {
                        if a.get([x, y, z]).is_none() && rng2.random_bool(0.2) {
                            b.insert(
                                [x, y, z],
                                (0..2).map(|_| rng2.random_range(-1.0f32..1.0)).collect(),
                            )
                            .unwrap();
                        }
                    }
                }
            }
            b
        };
        let mut union = a.clone();
        for (idx, f) in b.iter() {
            union.insert(idx, f.to_vec()).unwrap();
        }
        let cu = sparse_conv(&union, &kernel).unwrap();
        let cb = sparse_conv(&b, &kernel).unwrap();
        for (idx, f) in cu.iter() {
            let fa = ca.get(idx).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; 2]);
            let fb = cb.get(idx).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; 2]);
            for c in 0..2 {
                assert!((f[c] - (fa[c] + fb[c])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn strided_grid_bookkeeping() {
        let grid = GridSpec::new([1.0, 2.0, 3.0], [0.5, 0.5, 0.25], [7, 8, 9]);
        let g1 = grid.strided(2);
        assert_eq!(g1.dims, [4, 4, 5]);
        assert_eq!(g1.stride_scale, 2);
        assert_eq!(g1.origin, grid.origin);
        let g2 = g1.strided(2);
        assert_eq!(g2.stride_scale, 4);
        assert_eq!(g2.effective_voxel_size(), [2.0, 2.0, 1.0]);
    }

    #[test]
    fn output_centers_near_receptive_field_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let grid = GridSpec::new([-2.0, -2.0, -2.0], [0.5, 0.5, 0.5], [8, 8, 8]);
        let t = random_tensor(&mut rng, grid, 2, 0.3);
        let kernel = random_kernel(&mut rng, 3, 2, 2, 2, false);
        let out = sparse_conv(&t, &kernel).unwrap();
        let ev_out = out.grid().effective_voxel_size();
        for (y, _) in out.iter() {
            let c_out = out.grid().center_of(y);
            // Centroid of the receptive-field input centers.
            let mut acc = [0.0f64; 3];
            let mut n = 0;
            for oz in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let x = [
                            2 * y[0] + ox - 1,
                            2 * y[1] + oy - 1,
                            2 * y[2] + oz - 1,
                        ];
                        if grid.contains_index(x) {
                            let c = grid.center_of(x);
                            for a in 0..3 {
                                acc[a] += c[a];
                            }
                            n += 1;
                        }
                    }
                }
            }
            for a in 0..3 {
                let centroid = acc[a] / n as f64;
                assert!((c_out[a] - centroid).abs() <= ev_out[a] + 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let t = SparseFeatureTensor::new(unit_grid([2, 2, 2]), 3).unwrap();
        let kernel = identity_kernel(2);
        assert!(matches!(
            sparse_conv(&t, &kernel),
            Err(SparseError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let t = SparseFeatureTensor::new(unit_grid([4, 4, 4]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let kernel = random_kernel(&mut rng, 3, 2, 2, 4, true);
        let out = sparse_conv(&t, &kernel).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 4);
    }
}
