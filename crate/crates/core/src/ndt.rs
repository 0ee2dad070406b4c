//! NDT map construction and 6-DoF scan matching.
//!
//! A reference cloud is modeled as per-cell Gaussians; a scan is aligned by
//! maximizing the sum of un-normalized Gaussian kernels with a damped Newton
//! (Levenberg) iteration on the Z-Y-X Euler pose, using analytic first and
//! second derivatives of the per-point score terms.

use std::collections::HashMap;

use nalgebra::{Cholesky, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{rot_x, rot_y, rot_z, Pose6DoF, RigidTransform};
use crate::pointcloud::PointCloud;

/// Relative eigenvalue clamp applied to cell covariances.
pub const EIGEN_CLAMP_RATIO: f64 = 1e-3;
/// Absolute eigenvalue floor in m^2 (covers fully degenerate cells).
pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NdtError {
    #[error("cannot build an NDT map from an empty cloud")]
    EmptyCloud,
    #[error("cell size must be > 0, got {0}")]
    BadCellSize(f64),
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("no overlap; provide a better initial guess")]
    NoOverlap,
    #[error("initial guess count {guesses} != cloud count {clouds}")]
    GuessCountMismatch { guesses: usize, clouds: usize },
    #[error("sensor {sensor}: {source}")]
    Calibrate {
        sensor: usize,
        #[source]
        source: Box<NdtError>,
    },
}

/// Gaussian model of one occupied cell.
#[derive(Debug, Clone)]
pub struct NdtCell {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub inverse_covariance: Matrix3<f64>,
    pub point_count: usize,
}

/// Per-cell Gaussian map of a reference cloud. Immutable after build.
#[derive(Debug, Clone)]
pub struct NdtMap {
    pub cell_size: f64,
    pub origin: [f64; 3],
    cells: HashMap<[i32; 3], NdtCell>,
}

impl NdtMap {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_index(&self, p: [f64; 3]) -> [i32; 3] {
        [
            ((p[0] - self.origin[0]) / self.cell_size).floor() as i32,
            ((p[1] - self.origin[1]) / self.cell_size).floor() as i32,
            ((p[2] - self.origin[2]) / self.cell_size).floor() as i32,
        ]
    }

    pub fn cell_at(&self, p: [f64; 3]) -> Option<&NdtCell> {
        self.cells.get(&self.cell_index(p))
    }

    pub fn cells(&self) -> impl Iterator<Item = (&[i32; 3], &NdtCell)> {
        self.cells.iter()
    }
}

/// Optimizer settings for [`ndt_align`].
#[derive(Debug, Clone, Copy)]
pub struct AlignOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the max-abs parameter step.
    pub step_threshold: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Per-iteration clamp on translation components, meters.
    pub max_translation_step: f64,
    /// Per-iteration clamp on rotation components, radians.
    pub max_rotation_step: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_threshold: 1e-4,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            max_translation_step: 0.5,
            max_rotation_step: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignStats {
    pub iterations: usize,
    pub score: f64,
    pub converged: bool,
    /// Score after every accepted step (starting with the initial score).
    pub score_trace: Vec<f64>,
}

/// Builds the per-cell Gaussian map.
///
/// Cells with fewer than `min_points` points are dropped. Covariances use the
/// (n-1) normalization and are regularized by clamping eigenvalues to at
/// least `max(EIGEN_CLAMP_RATIO * lambda_max, EIGEN_FLOOR)`.
pub fn build_ndt_map(
    reference: &PointCloud,
    cell_size: f64,
    min_points: usize,
) -> Result<NdtMap, NdtError> {
    if reference.is_empty() {
        return Err(NdtError::EmptyCloud);
    }
    if cell_size <= 0.0 || !cell_size.is_finite() {
        return Err(NdtError::BadCellSize(cell_size));
    }
    let mut origin = [f64::INFINITY; 3];
    for p in reference.points() {
        for a in 0..3 {
            origin[a] = origin[a].min(p[a]);
        }
    }

    struct Acc {
        sum: Vector3<f64>,
        outer: Matrix3<f64>,
        n: usize,
    }
    let mut accs: HashMap<[i32; 3], Acc> = HashMap::new();
    for p in reference.points() {
        let idx = [
            ((p[0] - origin[0]) / cell_size).floor() as i32,
            ((p[1] - origin[1]) / cell_size).floor() as i32,
            ((p[2] - origin[2]) / cell_size).floor() as i32,
        ];
        let v = Vector3::new(p[0], p[1], p[2]);
        let acc = accs.entry(idx).or_insert(Acc {
            sum: Vector3::zeros(),
            outer: Matrix3::zeros(),
            n: 0,
        });
        acc.sum += v;
        acc.outer += v * v.transpose();
        acc.n += 1;
    }

    let min_points = min_points.max(2);
    let mut cells = HashMap::new();
    for (idx, acc) in accs {
        if acc.n < min_points {
            continue;
        }
        let n = acc.n as f64;
        let mean = acc.sum / n;
        let cov = (acc.outer - mean * acc.sum.transpose()) / (n - 1.0);
        // Symmetrize against accumulation round-off before decomposing.
        let cov = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);
        let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
        let floor = (EIGEN_CLAMP_RATIO * lambda_max).max(EIGEN_FLOOR);
        let clamped = eig.eigenvalues.map(|l| l.max(floor));
        let v = eig.eigenvectors;
        let covariance = v * Matrix3::from_diagonal(&clamped) * v.transpose();
        let inverse_covariance =
            v * Matrix3::from_diagonal(&clamped.map(|l| 1.0 / l)) * v.transpose();
        cells.insert(
            idx,
            NdtCell {
                mean,
                covariance,
                inverse_covariance,
                point_count: acc.n,
            },
        );
    }
    Ok(NdtMap {
        cell_size,
        origin,
        cells,
    })
}

/// Sum over scan points of `exp(-0.5 * d^T Sigma^-1 d)` where `d` is the
/// offset of the transformed point from the mean of its containing cell;
/// points in empty cells contribute 0.
pub fn ndt_score(map: &NdtMap, scan: &PointCloud, pose: &Pose6DoF) -> f64 {
    let t = RigidTransform::from_pose(pose);
    let mut score = 0.0;
    for p in scan.points() {
        let q = t.apply_point(*p);
        if let Some(cell) = map.cell_at(q) {
            let d = Vector3::new(q[0], q[1], q[2]) - cell.mean;
            score += (-0.5 * (d.transpose() * cell.inverse_covariance * d)[(0, 0)]).exp();
        }
    }
    score
}

struct ScoreTerms {
    score: f64,
    gradient: Vector6<f64>,
    hessian: Matrix6<f64>,
    contributors: usize,
}

/// Analytic score, gradient, and Hessian at `pose`. Cell membership is held
/// fixed at the evaluation pose, so the derivatives are those of the
/// piecewise-smooth score away from cell borders.
fn score_terms(map: &NdtMap, scan: &PointCloud, pose: &Pose6DoF) -> ScoreTerms {
    let rx = rot_x(pose.roll);
    let ry = rot_y(pose.pitch);
    let rz = rot_z(pose.yaw);
    let (sx, cx) = pose.roll.sin_cos();
    let (sy, cy) = pose.pitch.sin_cos();
    let (sz, cz) = pose.yaw.sin_cos();
    let dx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sx, -cx, 0.0, cx, -sx);
    let dxx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -cx, sx, 0.0, -sx, -cx);
    let dy = Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy);
    let dyy = Matrix3::new(-cy, 0.0, -sy, 0.0, 0.0, 0.0, sy, 0.0, -cy);
    let dz = Matrix3::new(-sz, -cz, 0.0, cz, -sz, 0.0, 0.0, 0.0, 0.0);
    let dzz = Matrix3::new(-cz, sz, 0.0, -sz, -cz, 0.0, 0.0, 0.0, 0.0);

    let r = rz * ry * rx;
    let m_roll = rz * ry * dx;
    let m_pitch = rz * dy * rx;
    let m_yaw = dz * ry * rx;
    // Second derivatives of R by (roll, pitch, yaw) pairs.
    let m_rr = rz * ry * dxx;
    let m_rp = rz * dy * dx;
    let m_ry = dz * ry * dx;
    let m_pp = rz * dyy * rx;
    let m_py = dz * dy * rx;
    let m_yy = dzz * ry * rx;

    let t = Vector3::new(pose.tx, pose.ty, pose.tz);
    let mut score = 0.0;
    let mut gradient = Vector6::zeros();
    let mut hessian = Matrix6::zeros();
    let mut contributors = 0usize;

    for p in scan.points() {
        let x = Vector3::new(p[0], p[1], p[2]);
        let q = r * x + t;
        let Some(cell) = map.cell_at([q[0], q[1], q[2]]) else {
            continue;
        };
        contributors += 1;
        let b = &cell.inverse_covariance;
        let d = q - cell.mean;
        let bd = b * d;
        let e = (-0.5 * d.dot(&bd)).exp();
        score += e;

        // Jacobian columns of q wrt (tx, ty, tz, roll, pitch, yaw).
        let j = [
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
            m_roll * x,
            m_pitch * x,
            m_yaw * x,
        ];
        let mut u = [0.0f64; 6]; // u_k = d^T B J_k
        for k in 0..6 {
            u[k] = bd.dot(&j[k]);
            gradient[k] -= e * u[k];
        }
        // Nonzero second derivatives of q exist only for rotation pairs.
        let mut h2 = [[Vector3::zeros(); 3]; 3];
        h2[0][0] = m_rr * x;
        h2[0][1] = m_rp * x;
        h2[0][2] = m_ry * x;
        h2[1][0] = h2[0][1];
        h2[1][1] = m_pp * x;
        h2[1][2] = m_py * x;
        h2[2][0] = h2[0][2];
        h2[2][1] = h2[1][2];
        h2[2][2] = m_yy * x;
        for k in 0..6 {
            for l in k..6 {
                let mut v = u[k] * u[l] - j[l].dot(&(b * j[k]));
                if k >= 3 && l >= 3 {
                    v -= bd.dot(&h2[k - 3][l - 3]);
                }
                let v = e * v;
                hessian[(k, l)] += v;
                if l != k {
                    hessian[(l, k)] += v;
                }
            }
        }
    }
    ScoreTerms {
        score,
        gradient,
        hessian,
        contributors,
    }
}

/// Score and analytic gradient at `pose`, exposed for verification against
/// finite differences.
pub fn ndt_score_gradient(map: &NdtMap, scan: &PointCloud, pose: &Pose6DoF) -> (f64, [f64; 6]) {
    let terms = score_terms(map, scan, pose);
    let mut g = [0.0; 6];
    for k in 0..6 {
        g[k] = terms.gradient[k];
    }
    (terms.score, g)
}

/// Maximizes the NDT score over the 6 pose parameters by damped Newton
/// iteration with a per-iteration step clamp. Converges when the accepted
/// parameter step drops below the threshold.
pub fn ndt_align(
    map: &NdtMap,
    scan: &PointCloud,
    initial: &Pose6DoF,
    opts: &AlignOptions,
) -> Result<(Pose6DoF, AlignStats), NdtError> {
    if map.cell_count() == 0 {
        return Err(NdtError::EmptyInput("NDT map"));
    }
    if scan.is_empty() {
        return Err(NdtError::EmptyInput("scan"));
    }

    let mut pose = *initial;
    let mut terms = score_terms(map, scan, &pose);
    if terms.contributors == 0 || !terms.score.is_finite() {
        return Err(NdtError::NoOverlap);
    }
    let mut lambda = opts.damping_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut trace = vec![terms.score];

    'outer: for _ in 0..opts.max_iterations {
        iterations += 1;
        // Maximization: delta = (-H + lambda I)^-1 g.
        loop {
            let mut a = -terms.hessian;
            for k in 0..6 {
                a[(k, k)] += lambda;
            }
            let Some(chol) = Cholesky::new(a) else {
                lambda *= opts.damping_up;
                if lambda > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let mut delta = chol.solve(&terms.gradient);

            // Clamp translation / rotation step magnitudes, preserving direction.
            let mut scale = 1.0f64;
            for k in 0..3 {
                if delta[k].abs() > 0.0 {
                    scale = scale.min(opts.max_translation_step / delta[k].abs());
                }
                if delta[k + 3].abs() > 0.0 {
                    scale = scale.min(opts.max_rotation_step / delta[k + 3].abs());
                }
            }
            if scale < 1.0 {
                delta *= scale;
            }

            let step = delta.amax();
            let v = pose.to_vector();
            let candidate = Pose6DoF::from_vector([
                v[0] + delta[0],
                v[1] + delta[1],
                v[2] + delta[2],
                v[3] + delta[3],
                v[4] + delta[4],
                v[5] + delta[5],
            ]);
            let cand_terms = score_terms(map, scan, &candidate);
            if cand_terms.score > terms.score && cand_terms.score.is_finite() {
                pose = candidate;
                terms = cand_terms;
                trace.push(terms.score);
                lambda = (lambda * opts.damping_down).max(1e-12);
                // Converged iff an ACCEPTED step fell below the threshold; a
                // small damped step at huge lambda is rejection, not
                // stationarity.
                if step < opts.step_threshold {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            // A sub-threshold proposal that cannot improve the score is
            // stationarity under any damping.
            if step < opts.step_threshold {
                converged = true;
                break 'outer;
            }
            lambda *= opts.damping_up;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }

    Ok((
        pose,
        AlignStats {
            iterations,
            score: terms.score,
            converged,
            score_trace: trace,
        },
    ))
}

/// Restart offsets (dx, dy, dyaw) tried around each initial guess; the
/// alignment with the best final score wins. The sharp clamped Gaussians
/// leave ghost basins half a cell off the true optimum, and a handful of
/// restarts reliably covers them during the offline setup phase.
const RESTART_OFFSETS: [(f64, f64, f64); 5] = [
    (0.0, 0.0, 0.0),
    (0.25, 0.25, 0.04),
    (-0.25, 0.25, -0.04),
    (0.25, -0.25, -0.04),
    (-0.25, -0.25, 0.04),
];

/// Estimates, per non-reference sensor, the rigid transform from that
/// sensor's local frame into the reference frame, by aligning each cloud to
/// an NDT model of the reference cloud (best of a few restarts around the
/// provided guess).
pub fn calibrate(
    reference_cloud: &PointCloud,
    other_clouds: &[PointCloud],
    initial_guesses: &[Pose6DoF],
    cell_size: f64,
    min_points: usize,
    opts: &AlignOptions,
) -> Result<Vec<RigidTransform>, NdtError> {
    if other_clouds.len() != initial_guesses.len() {
        return Err(NdtError::GuessCountMismatch {
            guesses: initial_guesses.len(),
            clouds: other_clouds.len(),
        });
    }
    if other_clouds.is_empty() {
        return Ok(Vec::new());
    }
    let map = build_ndt_map(reference_cloud, cell_size, min_points)?;
    let mut out = Vec::with_capacity(other_clouds.len());
    for (i, (cloud, guess)) in other_clouds.iter().zip(initial_guesses).enumerate() {
        let mut best: Option<(Pose6DoF, AlignStats)> = None;
        let mut last_err = None;
        for (dx, dy, dyaw) in RESTART_OFFSETS {
            let start = Pose6DoF::new(
                guess.tx + dx,
                guess.ty + dy,
                guess.tz,
                guess.roll,
                guess.pitch,
                guess.yaw + dyaw,
            );
            match ndt_align(&map, cloud, &start, opts) {
                Ok((pose, stats)) => {
                    if best.as_ref().map_or(true, |(_, b)| stats.score > b.score) {
                        best = Some((pose, stats));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let (pose, stats) = best.ok_or_else(|| NdtError::Calibrate {
            sensor: i,
            source: Box::new(last_err.expect("no result implies an error")),
        })?;
        log::debug!(
            "calibrate sensor {i}: {} iterations, score {:.3}, converged {}",
            stats.iterations,
            stats.score,
            stats.converged
        );
        out.push(RigidTransform::from_pose(&pose).orthonormalized());
    }
    Ok(out)
}
