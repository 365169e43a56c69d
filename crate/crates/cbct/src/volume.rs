//! 3D scalar volumes on regular grids, Hounsfield/attenuation conversion,
//! and the on-disk volume format.
//!
//! A [`Volume`] stores its samples in x-fastest order: the flat index of
//! voxel `(i, j, k)` is `i + nx * (j + ny * k)`. Values are kept as `f64`
//! in memory; the file format stores 32-bit IEEE-754 little-endian scalars
//! next to a UTF-8 TOML header sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};

/// Linear attenuation coefficient of water in mm⁻¹ (~70 keV), used for the
/// HU ↔ μ mapping `μ = μ_water · (1 + HU/1000)`.
pub const MU_WATER_PER_MM: f64 = 0.0192;

/// Hounsfield value of air; also the lowest HU a valid volume may contain
/// (with a small slack down to -1024 for imported data).
pub const HU_AIR: f64 = -1000.0;

/// Physical unit of the scalars stored in a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    /// Hounsfield units (water = 0, air = -1000).
    #[serde(rename = "HU")]
    Hu,
    /// Linear attenuation coefficient in mm⁻¹.
    #[serde(rename = "MU")]
    Mu,
    /// Dimensionless, typically `(HU + 1000) / scale_p99`.
    #[serde(rename = "NORMALIZED")]
    Normalized,
}

/// Regular 3D sampling grid. `origin_mm` is the offset of the *center* of
/// voxel `(0, 0, 0)` from the isocenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl VolumeGrid {
    /// Grid of `nx × ny × nz` voxels centered on the isocenter.
    pub fn centered(nx: usize, ny: usize, nz: usize, spacing_mm: [f64; 3]) -> Self {
        let origin = |n: usize, s: f64| -(n as f64 - 1.0) * s / 2.0;
        VolumeGrid {
            nx,
            ny,
            nz,
            spacing_mm,
            origin_mm: [
                origin(nx, spacing_mm[0]),
                origin(ny, spacing_mm[1]),
                origin(nz, spacing_mm[2]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 || self.nz < 8 {
            return Err(CbctError::InvalidArgument(format!(
                "grid counts must be >= 8, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(CbctError::InvalidArgument(format!(
                "grid spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Physical position (mm, relative to isocenter) of the voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing_mm.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Axis-aligned bounding box of the sampled region (voxel centers padded
    /// by half a voxel on each side).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = [
            self.origin_mm[0] - 0.5 * self.spacing_mm[0],
            self.origin_mm[1] - 0.5 * self.spacing_mm[1],
            self.origin_mm[2] - 0.5 * self.spacing_mm[2],
        ];
        let hi = [
            self.origin_mm[0] + (self.nx as f64 - 0.5) * self.spacing_mm[0],
            self.origin_mm[1] + (self.ny as f64 - 0.5) * self.spacing_mm[1],
            self.origin_mm[2] + (self.nz as f64 - 0.5) * self.spacing_mm[2],
        ];
        (lo, hi)
    }
}

/// A scalar field sampled on a [`VolumeGrid`], tagged with its [`Unit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub unit: Unit,
    pub values: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VolumeGrid, unit: Unit) -> Self {
        let n = grid.voxel_count();
        Volume {
            grid,
            unit,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(grid: VolumeGrid, unit: Unit, values: Vec<f64>) -> Result<Self> {
        let v = Volume { grid, unit, values };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.values.len() != self.grid.voxel_count() {
            return Err(CbctError::InvalidData(format!(
                "volume has {} values, grid wants {}",
                self.values.len(),
                self.grid.voxel_count()
            )));
        }
        if self.unit == Unit::Hu {
            if let Some(&v) = self.values.iter().find(|&&v| v < -1024.0) {
                return Err(CbctError::InvalidData(format!(
                    "HU volume contains value {v} below -1024"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid.nx * (j + self.grid.ny * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = self.idx(i, j, k);
        &mut self.values[idx]
    }

    /// Trilinear sample at a physical position (mm), zero outside the grid.
    ///
    /// Values live at voxel centers; out-of-grid neighbors contribute zero,
    /// which keeps the sampling linear in the stored values.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let g = &self.grid;
        let cx = (p[0] - g.origin_mm[0]) / g.spacing_mm[0];
        let cy = (p[1] - g.origin_mm[1]) / g.spacing_mm[1];
        let cz = (p[2] - g.origin_mm[2]) / g.spacing_mm[2];
        let (i0, fx) = split_coord(cx);
        let (j0, fy) = split_coord(cy);
        let (k0, fz) = split_coord(cz);

        let mut acc = 0.0;
        for dk in 0..2i64 {
            let k = k0 + dk;
            if k < 0 || k >= g.nz as i64 {
                continue;
            }
            let wz = if dk == 0 { 1.0 - fz } else { fz };
            for dj in 0..2i64 {
                let j = j0 + dj;
                if j < 0 || j >= g.ny as i64 {
                    continue;
                }
                let wy = if dj == 0 { 1.0 - fy } else { fy };
                for di in 0..2i64 {
                    let i = i0 + di;
                    if i < 0 || i >= g.nx as i64 {
                        continue;
                    }
                    let wx = if di == 0 { 1.0 - fx } else { fx };
                    acc += wx * wy * wz * self.at(i as usize, j as usize, k as usize);
                }
            }
        }
        acc
    }

    /// Extract axial slice `k` as a row-major `ny × nx` image (row = y).
    pub fn axial_slice(&self, k: usize) -> Vec<f64> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push(self.at(i, j, k));
            }
        }
        out
    }

    // ---- on-disk format ----------------------------------------------------

    /// Write `<stem>.vol` (TOML header) and `<stem>.raw` (f32 LE, x-fastest).
    pub fn write(&self, stem: &Path) -> Result<()> {
        self.validate()?;
        let header = VolumeHeader {
            nx: self.grid.nx,
            ny: self.grid.ny,
            nz: self.grid.nz,
            spacing_mm: self.grid.spacing_mm,
            origin_mm: self.grid.origin_mm,
            unit: self.unit,
            data: format!(
                "{}.raw",
                stem.file_name().unwrap_or_default().to_string_lossy()
            ),
        };
        let header_path = stem.with_extension("vol");
        let raw_path = stem.with_extension("raw");
        let text = toml::to_string(&header)
            .map_err(|e| CbctError::InvalidData(format!("header serialization: {e}")))?;
        fs::write(&header_path, text).map_err(|e| CbctError::io(&header_path, e))?;

        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| CbctError::io(&raw_path, e))?;
        Ok(())
    }

    /// Read a volume written by [`Volume::write`]. `stem` may carry the
    /// `.vol` extension or none.
    pub fn read(stem: &Path) -> Result<Volume> {
        let header_path = if stem.extension().map(|e| e == "vol").unwrap_or(false) {
            stem.to_path_buf()
        } else {
            stem.with_extension("vol")
        };
        let text =
            fs::read_to_string(&header_path).map_err(|e| CbctError::io(&header_path, e))?;
        let header: VolumeHeader = toml::from_str(&text)
            .map_err(|e| CbctError::InvalidData(format!("{}: {e}", header_path.display())))?;
        let raw_path: PathBuf = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data);
        let bytes = fs::read(&raw_path).map_err(|e| CbctError::io(&raw_path, e))?;
        let expect = header.nx * header.ny * header.nz;
        if bytes.len() != expect * 4 {
            return Err(CbctError::InvalidData(format!(
                "{}: expected {} bytes, found {}",
                raw_path.display(),
                expect * 4,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Volume::from_values(
            VolumeGrid {
                nx: header.nx,
                ny: header.ny,
                nz: header.nz,
                spacing_mm: header.spacing_mm,
                origin_mm: header.origin_mm,
            },
            header.unit,
            values,
        )
    }
}

#[inline]
fn split_coord(c: f64) -> (i64, f64) {
    let f = c.floor();
    (f as i64, c - f)
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    nx: usize,
    ny: usize,
    nz: usize,
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    unit: Unit,
    data: String,
}

/// Direction of the HU ↔ μ conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertDirection {
    HuToMu,
    MuToHu,
}

/// Convert between Hounsfield units and linear attenuation (mm⁻¹) using
/// `μ = μ_water · (1 + HU/1000)`; the inverse is exact.
pub fn hu_mu_convert(volume: &Volume, direction: ConvertDirection) -> Result<Volume> {
    let (want, out_unit) = match direction {
        ConvertDirection::HuToMu => (Unit::Hu, Unit::Mu),
        ConvertDirection::MuToHu => (Unit::Mu, Unit::Hu),
    };
    if volume.unit != want {
        return Err(CbctError::InvalidArgument(format!(
            "hu_mu_convert: volume unit is {:?}, expected {:?}",
            volume.unit, want
        )));
    }
    let values = match direction {
        ConvertDirection::HuToMu => volume
            .values
            .iter()
            .map(|&hu| MU_WATER_PER_MM * (1.0 + hu / 1000.0))
            .collect(),
        ConvertDirection::MuToHu => volume
            .values
            .iter()
            .map(|&mu| 1000.0 * (mu / MU_WATER_PER_MM - 1.0))
            .collect(),
    };
    Ok(Volume {
        grid: volume.grid.clone(),
        unit: out_unit,
        values,
    })
}
