//! Analytic forward projection: ray-driven line integrals through a μ volume.
//!
//! Each detector pixel receives `∫ μ dl` along the source→pixel ray,
//! evaluated by midpoint sampling with trilinear interpolation and a step of
//! half the smallest voxel spacing. Samples outside the grid contribute
//! zero, so the projection is linear in the volume values.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};
use crate::geometry::Trajectory;
use crate::volume::{Unit, Volume};

/// A stack of detector frames, one per trajectory angle. Frames are stored
/// row-major (`idx = col + cols * row`), values are dimensionless line
/// integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub trajectory: Trajectory,
    pub frames: Vec<Vec<f64>>,
}

impl ProjectionSet {
    pub fn frame_len(&self) -> usize {
        let d = &self.trajectory.geometry.detector;
        d.rows * d.cols
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        if self.frames.len() != self.trajectory.n_views() {
            return Err(CbctError::InvalidArgument(format!(
                "{} frames for {} angles",
                self.frames.len(),
                self.trajectory.n_views()
            )));
        }
        let len = self.frame_len();
        for (k, f) in self.frames.iter().enumerate() {
            if f.len() != len {
                return Err(CbctError::InvalidData(format!(
                    "frame {k} has {} pixels, detector wants {len}",
                    f.len()
                )));
            }
            if let Some(&v) = f.iter().find(|v| !v.is_finite()) {
                return Err(CbctError::InvalidData(format!(
                    "frame {k} contains non-finite value {v}"
                )));
            }
        }
        Ok(())
    }

    /// Write `<stem>.proj` (TOML header) and `<stem>.raw` (all frames
    /// concatenated in angle order, f32 LE, row-major per frame).
    pub fn write(&self, stem: &Path) -> Result<()> {
        self.validate()?;
        let header = ProjectionHeader {
            trajectory: self.trajectory.clone(),
            data: format!(
                "{}.raw",
                stem.file_name().unwrap_or_default().to_string_lossy()
            ),
        };
        let header_path = stem.with_extension("proj");
        let raw_path = stem.with_extension("raw");
        let text = toml::to_string(&header)
            .map_err(|e| CbctError::InvalidData(format!("header serialization: {e}")))?;
        fs::write(&header_path, text).map_err(|e| CbctError::io(&header_path, e))?;
        let mut bytes = Vec::with_capacity(self.frames.len() * self.frame_len() * 4);
        for frame in &self.frames {
            for &v in frame {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(&raw_path, bytes).map_err(|e| CbctError::io(&raw_path, e))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<ProjectionSet> {
        let header_path = if stem.extension().map(|e| e == "proj").unwrap_or(false) {
            stem.to_path_buf()
        } else {
            stem.with_extension("proj")
        };
        let text =
            fs::read_to_string(&header_path).map_err(|e| CbctError::io(&header_path, e))?;
        let header: ProjectionHeader = toml::from_str(&text)
            .map_err(|e| CbctError::InvalidData(format!("{}: {e}", header_path.display())))?;
        let raw_path: PathBuf = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data);
        let bytes = fs::read(&raw_path).map_err(|e| CbctError::io(&raw_path, e))?;
        let d = &header.trajectory.geometry.detector;
        let frame_len = d.rows * d.cols;
        let n = header.trajectory.n_views();
        if bytes.len() != n * frame_len * 4 {
            return Err(CbctError::InvalidData(format!(
                "{}: expected {} bytes, found {}",
                raw_path.display(),
                n * frame_len * 4,
                bytes.len()
            )));
        }
        let mut frames = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(frame_len * 4) {
            frames.push(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            );
        }
        let set = ProjectionSet {
            trajectory: header.trajectory,
            frames,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    trajectory: Trajectory,
    data: String,
}

/// Project a μ volume onto every view of the trajectory.
pub fn forward_project(volume: &Volume, trajectory: &Trajectory) -> Result<ProjectionSet> {
    if volume.unit != Unit::Mu {
        return Err(CbctError::InvalidArgument(format!(
            "forward_project wants a MU volume, got {:?}",
            volume.unit
        )));
    }
    volume.validate()?;
    trajectory.validate()?;

    let step_mm = 0.5 * volume.grid.min_spacing();
    let geom = &trajectory.geometry;
    let d = &geom.detector;
    let (lo, hi) = volume.grid.bounds();

    let frames: Vec<Vec<f64>> = trajectory
        .angles_deg
        .par_iter()
        .map(|&angle| {
            let source = geom.source_position(angle);
            let mut frame = vec![0.0f64; d.rows * d.cols];
            for row in 0..d.rows {
                for col in 0..d.cols {
                    let pixel = geom.pixel_center(angle, row, col);
                    frame[col + d.cols * row] =
                        integrate_ray(volume, source, pixel, lo, hi, step_mm);
                }
            }
            frame
        })
        .collect();

    Ok(ProjectionSet {
        trajectory: trajectory.clone(),
        frames,
    })
}

/// Midpoint-rule line integral from `a` to `b`, restricted to the grid AABB.
fn integrate_ray(
    volume: &Volume,
    a: [f64; 3],
    b: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    step_mm: f64,
) -> f64 {
    let dir = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if len == 0.0 {
        return 0.0;
    }

    // slab clipping of the parametric segment t in [0, 1]
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if a[axis] < lo[axis] || a[axis] > hi[axis] {
                return 0.0;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let mut ta = (lo[axis] - a[axis]) * inv;
        let mut tb = (hi[axis] - a[axis]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return 0.0;
        }
    }

    let seg_len = (t1 - t0) * len;
    let n_steps = (seg_len / step_mm).ceil().max(1.0) as usize;
    let dt = seg_len / n_steps as f64;
    let mut acc = 0.0;
    for s in 0..n_steps {
        let t = t0 + (t1 - t0) * ((s as f64 + 0.5) / n_steps as f64);
        let p = [a[0] + t * dir[0], a[1] + t * dir[1], a[2] + t * dir[2]];
        acc += volume.sample_trilinear(p);
    }
    acc * dt
}
