//! Point-cloud data type and file I/O (CSV and a small binary format).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::RigidTransform;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: truncated at byte {offset}: {reason}")]
    Truncated {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("intensity length {intensity} does not match point count {points}")]
    IntensityMismatch { intensity: usize, points: usize },
    #[error("intensity {value} at point {index} is outside [0, 1]")]
    IntensityRange { index: usize, value: f64 },
}

/// A cloud of 3D points in meters, optionally with per-point intensity
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(points: Vec<[f64; 3]>, intensity: Option<Vec<f64>>) -> Result<Self, CloudError> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CloudError::NonFinitePoint { index: i });
            }
        }
        if let Some(ints) = &intensity {
            if ints.len() != points.len() {
                return Err(CloudError::IntensityMismatch {
                    intensity: ints.len(),
                    points: points.len(),
                });
            }
            for (i, v) in ints.iter().enumerate() {
                if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                    return Err(CloudError::IntensityRange { index: i, value: *v });
                }
            }
        }
        Ok(Self { points, intensity })
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.points.is_empty() {
            return None;
        }
        let mut acc = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                acc[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        Some([acc[0] / n, acc[1] / n, acc[2] / n])
    }

    /// Concatenates clouds; intensity is kept only when every input has it.
    pub fn merge(clouds: &[&PointCloud]) -> PointCloud {
        let mut points = Vec::new();
        let all_intensity = clouds.iter().all(|c| c.intensity.is_some());
        let mut intensity = if all_intensity { Some(Vec::new()) } else { None };
        for c in clouds {
            points.extend_from_slice(&c.points);
            if let (Some(out), Some(src)) = (&mut intensity, &c.intensity) {
                out.extend_from_slice(src);
            }
        }
        PointCloud { points, intensity }
    }
}

/// On-disk cloud formats.
///
/// CSV rows are `x,y,z` or `x,y,z,i`. The binary format is a little-endian
/// `u32` point count followed by `count * 3` 32-bit floats (widened to f64
/// on load).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    XyzBinary,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, CloudError> {
    match format {
        CloudFormat::Csv => load_csv(path),
        CloudFormat::XyzBinary => load_binary(path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), CloudError> {
    let io_err = |source| CloudError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        CloudFormat::Csv => {
            let mut text = String::new();
            for (i, p) in cloud.points.iter().enumerate() {
                // Default float formatting round-trips f64 exactly.
                text.push_str(&format!("{},{},{}", p[0], p[1], p[2]));
                if let Some(ints) = &cloud.intensity {
                    text.push_str(&format!(",{}", ints[i]));
                }
                text.push('\n');
            }
            fs::write(path, text).map_err(io_err)
        }
        CloudFormat::XyzBinary => {
            let mut buf = Vec::with_capacity(4 + cloud.len() * 12);
            buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
            for p in &cloud.points {
                for a in 0..3 {
                    buf.extend_from_slice(&(p[a] as f32).to_le_bytes());
                }
            }
            fs::write(path, buf).map_err(io_err)
        }
    }
}

fn load_csv(path: &Path) -> Result<PointCloud, CloudError> {
    let text = fs::read_to_string(path).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |line: usize, reason: String| CloudError::Parse {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut points = Vec::new();
    let mut intensity: Option<Vec<f64>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                line_no,
                format!("expected 3 or 4 comma-separated fields, got {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.trim().parse::<f64>().map_err(|e| {
                parse_err(line_no, format!("field {}: {e} (got {f:?})", k + 1))
            })?;
            if !vals[k].is_finite() {
                return Err(parse_err(line_no, format!("field {} is not finite", k + 1)));
            }
        }
        let has_intensity = fields.len() == 4;
        if points.is_empty() {
            intensity = has_intensity.then(Vec::new);
        } else if has_intensity != intensity.is_some() {
            return Err(parse_err(
                line_no,
                "inconsistent column count across rows".into(),
            ));
        }
        points.push([vals[0], vals[1], vals[2]]);
        if let Some(ints) = &mut intensity {
            if !(0.0..=1.0).contains(&vals[3]) {
                return Err(parse_err(line_no, format!("intensity {} outside [0, 1]", vals[3])));
            }
            ints.push(vals[3]);
        }
    }
    Ok(PointCloud { points, intensity })
}

fn load_binary(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = fs::read(path).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let trunc = |offset: usize, reason: &str| CloudError::Truncated {
        path: path.display().to_string(),
        offset,
        reason: reason.into(),
    };
    if bytes.is_empty() {
        // Degenerate but unambiguous: an empty file is an empty cloud.
        return Ok(PointCloud::empty());
    }
    if bytes.len() < 4 {
        return Err(trunc(bytes.len(), "header shorter than 4-byte count"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let expected = 4 + count * 12;
    if bytes.len() < expected {
        return Err(trunc(
            bytes.len(),
            &format!("need {expected} bytes for {count} points"),
        ));
    }
    if bytes.len() > expected {
        return Err(trunc(expected, "trailing bytes after point data"));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let base = 4 + i * 12;
        let mut p = [0.0f64; 3];
        for a in 0..3 {
            let off = base + a * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(trunc(off, "non-finite coordinate"));
            }
            p[a] = v as f64;
        }
        points.push(p);
    }
    Ok(PointCloud {
        points,
        intensity: None,
    })
}

/// Applies `t` to every point; intensity is preserved.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(*p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}
