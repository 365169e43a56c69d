//! Circular cone-beam acquisition geometry.
//!
//! The source rotates in the z = 0 plane at distance `sid_mm` from the
//! isocenter; a flat detector sits opposite the source at `sdd_mm` from it.
//! At gantry angle β (degrees) the source is at
//! `sid · (cos β, sin β, 0)` and the detector center at
//! `(sid − sdd) · (cos β, sin β, 0)`. Detector columns run along
//! `(−sin β, cos β, 0)` and rows along `(0, 0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};

/// Flat-panel detector: `rows × cols` pixels with physical pitches in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub rows: usize,
    pub cols: usize,
    pub pixel_pitch_u_mm: f64,
    pub pixel_pitch_v_mm: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 8 || self.cols < 8 {
            return Err(CbctError::InvalidArgument(format!(
                "detector must be at least 8x8, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.pixel_pitch_u_mm > 0.0) || !(self.pixel_pitch_v_mm > 0.0) {
            return Err(CbctError::InvalidArgument(
                "detector pixel pitches must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Physical (u, v) offset of a pixel center from the detector center.
    #[inline]
    pub fn pixel_offset_mm(&self, row: usize, col: usize) -> (f64, f64) {
        let u = (col as f64 - (self.cols as f64 - 1.0) / 2.0) * self.pixel_pitch_u_mm;
        let v = (row as f64 - (self.rows as f64 - 1.0) / 2.0) * self.pixel_pitch_v_mm;
        (u, v)
    }
}

/// Source-isocenter / source-detector distances plus the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub detector: DetectorSpec,
}

impl ConeBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.sid_mm > 0.0 && self.sid_mm < self.sdd_mm) {
            return Err(CbctError::InvalidArgument(format!(
                "need 0 < sid < sdd, got sid={} sdd={}",
                self.sid_mm, self.sdd_mm
            )));
        }
        self.detector.validate()
    }

    #[inline]
    pub fn source_position(&self, angle_deg: f64) -> [f64; 3] {
        let b = angle_deg.to_radians();
        [self.sid_mm * b.cos(), self.sid_mm * b.sin(), 0.0]
    }

    /// Unit vector along increasing detector column index.
    #[inline]
    pub fn detector_u_axis(angle_deg: f64) -> [f64; 3] {
        let b = angle_deg.to_radians();
        [-b.sin(), b.cos(), 0.0]
    }

    /// Physical center of detector pixel `(row, col)` at the given angle.
    pub fn pixel_center(&self, angle_deg: f64, row: usize, col: usize) -> [f64; 3] {
        let b = angle_deg.to_radians();
        let (cb, sb) = (b.cos(), b.sin());
        let center = [
            (self.sid_mm - self.sdd_mm) * cb,
            (self.sid_mm - self.sdd_mm) * sb,
            0.0,
        ];
        let (u, v) = self.detector.pixel_offset_mm(row, col);
        [center[0] - u * sb, center[1] + u * cb, center[2] + v]
    }
}

/// Defaults chosen to be C-arm-plausible at desk scale.
impl Default for ConeBeamGeometry {
    fn default() -> Self {
        ConeBeamGeometry {
            sid_mm: 750.0,
            sdd_mm: 1200.0,
            detector: DetectorSpec {
                rows: 96,
                cols: 96,
                pixel_pitch_u_mm: 2.0,
                pixel_pitch_v_mm: 2.0,
            },
        }
    }
}

/// The geometry plus an ordered list of gantry angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub geometry: ConeBeamGeometry,
    pub angles_deg: Vec<f64>,
}

impl Trajectory {
    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.angles_deg.is_empty() {
            return Err(CbctError::InvalidArgument("trajectory has no views".into()));
        }
        for w in self.angles_deg.windows(2) {
            if !(w[1] > w[0]) {
                return Err(CbctError::InvalidArgument(
                    "angles must be strictly increasing".into(),
                ));
            }
        }
        let first = self.angles_deg[0];
        let last = *self.angles_deg.last().unwrap();
        if first < 0.0 || last >= 360.0 {
            return Err(CbctError::InvalidArgument(
                "angles must lie in [0, 360)".into(),
            ));
        }
        Ok(())
    }
}

/// Equiangular full-scan trajectory: `angles[k] = k · 360 / n_views`.
pub fn build_trajectory(n_views: usize, geometry: ConeBeamGeometry) -> Result<Trajectory> {
    if n_views == 0 {
        return Err(CbctError::InvalidArgument(
            "trajectory needs at least one view".into(),
        ));
    }
    geometry.validate()?;
    let angles_deg = (0..n_views)
        .map(|k| k as f64 * 360.0 / n_views as f64)
        .collect();
    Ok(Trajectory {
        geometry,
        angles_deg,
    })
}
