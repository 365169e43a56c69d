//! Procedural chest-like phantoms and interventional needle insertion.
//!
//! These stand in for clinical planning/needle scans so the whole pipeline
//! runs hermetically: a soft-tissue body ellipsoid with two lung
//! ellipsoids, high-density rib arcs near the body surface, optional lung
//! nodules, and a steel-like needle cylinder. All structures are splatted
//! with a linear partial-volume ramp of one voxel width so projections do
//! not alias badly.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};
use crate::volume::{Unit, Volume, VolumeGrid};

pub const HU_BACKGROUND: f64 = -1000.0;
pub const HU_BODY: f64 = 40.0;
pub const HU_LUNG: f64 = -800.0;

/// Parameter ranges for one random phantom. All draws are taken from a
/// generator seeded with `seed`, in a fixed order, so a spec maps to
/// exactly one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub grid: VolumeGrid,
    /// In-plane body semi-axis ranges (x and y), mm.
    pub body_ax_mm: [f64; 2],
    pub body_by_mm: [f64; 2],
    /// Rib arc count range (total, spread over both sides and z).
    pub rib_count: [usize; 2],
    pub rib_radius_mm: [f64; 2],
    pub rib_hu: [f64; 2],
    /// Nodule count range (inclusive); nodules live inside the lungs.
    pub nodule_count: [usize; 2],
    pub nodule_radius_mm: [f64; 2],
    pub nodule_hu: [f64; 2],
}

impl PhantomSpec {
    /// Spec sized for the given grid: the body fills most of the in-plane
    /// field of view and spans the full z extent.
    pub fn for_grid(seed: u64, grid: VolumeGrid) -> Self {
        let half_x = (grid.nx as f64 - 1.0) * grid.spacing_mm[0] / 2.0;
        let half_y = (grid.ny as f64 - 1.0) * grid.spacing_mm[1] / 2.0;
        PhantomSpec {
            seed,
            grid,
            body_ax_mm: [0.78 * half_x, 0.92 * half_x],
            body_by_mm: [0.64 * half_y, 0.80 * half_y],
            rib_count: [8, 12],
            rib_radius_mm: [2.5, 4.0],
            rib_hu: [700.0, 1200.0],
            nodule_count: [0, 4],
            nodule_radius_mm: [2.5, 6.0],
            nodule_hu: [-50.0, 80.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let half_x = (self.grid.nx as f64 - 1.0) * self.grid.spacing_mm[0] / 2.0;
        let half_y = (self.grid.ny as f64 - 1.0) * self.grid.spacing_mm[1] / 2.0;
        if self.body_ax_mm[1] > half_x || self.body_by_mm[1] > half_y {
            return Err(CbctError::InvalidArgument(format!(
                "body semi-axes up to ({}, {}) exceed grid half extents ({half_x}, {half_y})",
                self.body_ax_mm[1], self.body_by_mm[1]
            )));
        }
        for r in [
            &self.body_ax_mm,
            &self.body_by_mm,
            &self.rib_radius_mm,
            &self.rib_hu,
            &self.nodule_radius_mm,
            &self.nodule_hu,
        ] {
            if r[0] > r[1] {
                return Err(CbctError::InvalidArgument(format!(
                    "inverted parameter range {r:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Linear partial-volume weight: 1 strictly inside, 0 beyond one voxel
/// outside, ramping across the boundary.
#[inline]
fn coverage(distance_inside_mm: f64, voxel_mm: f64) -> f64 {
    (distance_inside_mm / voxel_mm + 0.5).clamp(0.0, 1.0)
}

#[inline]
fn blend(target: &mut f64, hu: f64, w: f64) {
    if w > 0.0 {
        *target = *target + w * (hu - *target);
    }
}

/// Generate a deterministic phantom volume in HU.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let g = spec.grid.clone();
    let vox = g.min_spacing();
    let half_z = (g.nz as f64 - 1.0) * g.spacing_mm[2] / 2.0;

    let ax = rng.gen_range(spec.body_ax_mm[0]..=spec.body_ax_mm[1]);
    let by = rng.gen_range(spec.body_by_mm[0]..=spec.body_by_mm[1]);

    let mut vol = Volume::zeros(g.clone(), Unit::Hu);
    vol.values.fill(HU_BACKGROUND);

    // body ellipse (full z extent)
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.voxel_center(i, j, k);
                let q = ((p[0] / ax).powi(2) + (p[1] / by).powi(2)).sqrt();
                let d = (1.0 - q) * ax.min(by);
                blend(vol.at_mut(i, j, k), HU_BODY, coverage(d, vox));
            }
        }
    }

    // two lungs
    let lung_cx = 0.45 * ax;
    let lung = |sign: f64| {
        (
            [sign * lung_cx, -0.05 * by, 0.0],
            [0.40 * ax, 0.58 * by, 0.85 * half_z],
        )
    };
    for sign in [-1.0, 1.0] {
        let (c, r) = lung(sign);
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let p = g.voxel_center(i, j, k);
                    let q = (((p[0] - c[0]) / r[0]).powi(2)
                        + ((p[1] - c[1]) / r[1]).powi(2)
                        + ((p[2] - c[2]) / r[2]).powi(2))
                    .sqrt();
                    let d = (1.0 - q) * r[0].min(r[1]).min(r[2]);
                    blend(vol.at_mut(i, j, k), HU_LUNG, coverage(d, vox));
                }
            }
        }
    }

    // rib arcs: short tubes following the body perimeter, just inside it
    let n_ribs = rng.gen_range(spec.rib_count[0]..=spec.rib_count[1]);
    for m in 0..n_ribs {
        let phi0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let arc_span = rng.gen_range(0.5..0.9); // radians
        let z0 = -0.8 * half_z + (m as f64 + 0.5) / n_ribs as f64 * 1.6 * half_z;
        let tube_r = rng.gen_range(spec.rib_radius_mm[0]..=spec.rib_radius_mm[1]);
        let hu = rng.gen_range(spec.rib_hu[0]..=spec.rib_hu[1]);
        let n_pts = (arc_span * 0.87 * ax / 1.0).ceil() as usize + 1;
        for s in 0..n_pts {
            let phi = phi0 + arc_span * s as f64 / n_pts as f64;
            let center = [
                0.87 * ax * phi.cos(),
                0.87 * by * phi.sin(),
                z0 + 2.0 * (phi - phi0), // slight craniocaudal slant
            ];
            splat_sphere(&mut vol, center, tube_r, hu, vox);
        }
    }

    // nodules inside the lungs
    let n_nod = rng.gen_range(spec.nodule_count[0]..=spec.nodule_count[1]);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_nod && attempts < 200 {
        attempts += 1;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (c, r) = lung(sign);
        let cand = [
            c[0] + rng.gen_range(-0.6..0.6) * r[0],
            c[1] + rng.gen_range(-0.6..0.6) * r[1],
            c[2] + rng.gen_range(-0.6..0.6) * r[2],
        ];
        let q = (((cand[0] - c[0]) / r[0]).powi(2)
            + ((cand[1] - c[1]) / r[1]).powi(2)
            + ((cand[2] - c[2]) / r[2]).powi(2))
        .sqrt();
        if q > 0.7 {
            continue;
        }
        let radius = rng.gen_range(spec.nodule_radius_mm[0]..=spec.nodule_radius_mm[1]);
        let hu = rng.gen_range(spec.nodule_hu[0]..=spec.nodule_hu[1]);
        splat_sphere(&mut vol, cand, radius, hu, vox);
        placed += 1;
    }

    for v in vol.values.iter_mut() {
        *v = v.clamp(-1000.0, 1300.0);
    }
    Ok(vol)
}

/// Blend a sphere into the volume, visiting only its bounding box.
fn splat_sphere(vol: &mut Volume, center: [f64; 3], radius: f64, hu: f64, vox: f64) {
    let g = vol.grid.clone();
    let lo_hi = |c: f64, o: f64, s: f64, n: usize| {
        let lo = ((c - radius - vox - o) / s).floor().max(0.0) as usize;
        let hi = (((c + radius + vox - o) / s).ceil() as usize).min(n.saturating_sub(1));
        (lo, hi)
    };
    let (i0, i1) = lo_hi(center[0], g.origin_mm[0], g.spacing_mm[0], g.nx);
    let (j0, j1) = lo_hi(center[1], g.origin_mm[1], g.spacing_mm[1], g.ny);
    let (k0, k1) = lo_hi(center[2], g.origin_mm[2], g.spacing_mm[2], g.nz);
    for k in k0..=k1 {
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = g.voxel_center(i, j, k);
                let d = ((p[0] - center[0]).powi(2)
                    + (p[1] - center[1]).powi(2)
                    + (p[2] - center[2]).powi(2))
                .sqrt();
                blend(vol.at_mut(i, j, k), hu, coverage(radius - d, vox));
            }
        }
    }
}

/// Pose of the interventional needle: a cylinder of `radius_mm` around the
/// segment from `tip − direction·length` to `tip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedlePose {
    pub tip_mm: [f64; 3],
    pub direction: [f64; 3],
    pub length_mm: f64,
    pub radius_mm: f64,
    pub hu_value: f64,
}

impl NeedlePose {
    pub fn validate(&self, grid: &VolumeGrid) -> Result<()> {
        let norm = (self.direction[0].powi(2)
            + self.direction[1].powi(2)
            + self.direction[2].powi(2))
        .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CbctError::InvalidArgument(format!(
                "needle direction has norm {norm}, want 1"
            )));
        }
        if self.radius_mm < grid.min_spacing() {
            return Err(CbctError::InvalidArgument(format!(
                "needle radius {} mm is below one voxel spacing ({} mm)",
                self.radius_mm,
                grid.min_spacing()
            )));
        }
        if self.hu_value <= 900.0 {
            return Err(CbctError::InvalidArgument(
                "needle HU must exceed the 900 HU segmentation threshold".into(),
            ));
        }
        Ok(())
    }

    pub fn entry_mm(&self) -> [f64; 3] {
        [
            self.tip_mm[0] - self.direction[0] * self.length_mm,
            self.tip_mm[1] - self.direction[1] * self.length_mm,
            self.tip_mm[2] - self.direction[2] * self.length_mm,
        ]
    }
}

/// Insert the needle into a copy of `prior`, blending a one-voxel
/// partial-volume ramp at the cylinder surface.
pub fn insert_needle(prior: &Volume, pose: &NeedlePose) -> Result<Volume> {
    if prior.unit != Unit::Hu {
        return Err(CbctError::InvalidArgument(
            "insert_needle expects an HU volume".into(),
        ));
    }
    pose.validate(&prior.grid)?;
    let g = prior.grid.clone();
    let vox = g.min_spacing();
    let a = pose.entry_mm();
    let b = pose.tip_mm;

    let mut out = prior.clone();
    let pad = pose.radius_mm + vox;
    let lo_hi = |axis: usize, n: usize| {
        let lo_mm = a[axis].min(b[axis]) - pad;
        let hi_mm = a[axis].max(b[axis]) + pad;
        let lo = ((lo_mm - g.origin_mm[axis]) / g.spacing_mm[axis]).floor().max(0.0) as usize;
        let hi =
            (((hi_mm - g.origin_mm[axis]) / g.spacing_mm[axis]).ceil() as usize).min(n - 1);
        (lo, hi)
    };
    let (i0, i1) = lo_hi(0, g.nx);
    let (j0, j1) = lo_hi(1, g.ny);
    let (k0, k1) = lo_hi(2, g.nz);
    if i0 > i1 || j0 > j1 || k0 > k1 {
        return Err(CbctError::InvalidArgument(
            "needle does not intersect the volume grid".into(),
        ));
    }

    let mut touched = false;
    for k in k0..=k1 {
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = g.voxel_center(i, j, k);
                let d = point_segment_distance(p, a, b);
                let w = coverage(pose.radius_mm - d, vox);
                if w > 0.0 {
                    touched = true;
                    blend(out.at_mut(i, j, k), pose.hu_value, w);
                }
            }
        }
    }
    if !touched {
        return Err(CbctError::InvalidArgument(
            "needle does not intersect the volume grid".into(),
        ));
    }
    Ok(out)
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Segmentation ground truth: threshold the needle-only image at 900 HU.
/// The needle-only image is the interventional scan restricted to where it
/// differs from the prior, so dense anatomy (ribs) never enters the mask.
pub fn needle_mask(interventional: &Volume, prior: &Volume) -> Result<Volume> {
    if interventional.unit != Unit::Hu || prior.unit != Unit::Hu {
        return Err(CbctError::InvalidArgument(
            "needle_mask expects HU volumes".into(),
        ));
    }
    if interventional.grid != prior.grid {
        return Err(CbctError::InvalidArgument(
            "needle_mask: volumes live on different grids".into(),
        ));
    }
    let mut mask = Volume::zeros(interventional.grid.clone(), Unit::Normalized);
    for idx in 0..mask.values.len() {
        let differs = interventional.values[idx] != prior.values[idx];
        if differs && interventional.values[idx] > 900.0 {
            mask.values[idx] = 1.0;
        }
    }
    Ok(mask)
}

/// Normalize an HU volume by the nearest-rank 99th percentile of its
/// `HU + 1000` shift: output = (HU + 1000) / scale. Returns the volume in
/// normalized units together with the scale.
pub fn normalize_p99(volume: &Volume) -> Result<(Volume, f64)> {
    if volume.unit != Unit::Hu {
        return Err(CbctError::InvalidArgument(
            "normalize_p99 expects an HU volume".into(),
        ));
    }
    let scale = percentile_99_shifted(&volume.values);
    if scale <= 0.0 {
        return Err(CbctError::InvalidData(format!(
            "99th percentile of shifted values is {scale}, cannot normalize"
        )));
    }
    Ok((normalize_with_scale(volume, scale)?, scale))
}

/// Nearest-rank 99th percentile of `v + 1000`.
pub fn percentile_99_shifted(values: &[f64]) -> f64 {
    let mut shifted: Vec<f64> = values.iter().map(|v| v + 1000.0).collect();
    shifted.sort_by(f64::total_cmp);
    let n = shifted.len();
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    shifted[rank - 1]
}

/// Apply a known per-case scale to another HU image of the same case.
pub fn normalize_with_scale(volume: &Volume, scale: f64) -> Result<Volume> {
    if volume.unit != Unit::Hu {
        return Err(CbctError::InvalidArgument(
            "normalize_with_scale expects an HU volume".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(CbctError::InvalidData(format!("scale {scale} must be > 0")));
    }
    Ok(Volume {
        grid: volume.grid.clone(),
        unit: Unit::Normalized,
        values: volume.values.iter().map(|v| (v + 1000.0) / scale).collect(),
    })
}

/// Inverse of [`normalize_with_scale`].
pub fn denormalize(volume: &Volume, scale: f64) -> Result<Volume> {
    if volume.unit != Unit::Normalized {
        return Err(CbctError::InvalidArgument(
            "denormalize expects a normalized volume".into(),
        ));
    }
    Ok(Volume {
        grid: volume.grid.clone(),
        unit: Unit::Hu,
        values: volume.values.iter().map(|v| v * scale - 1000.0).collect(),
    })
}
