//! Paired (prior, interventional) cases and the on-disk dataset layout.
//!
//! Each case directory holds five volumes (`prior`, `interventional`,
//! `mask`, `sparse_fdk`, `ground_truth`), the sparse projection stack, and
//! a TOML manifest with the seeds, needle pose, normalization scale and
//! split tag. A raw-volume importer can substitute real data by writing
//! the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};
use crate::fdk::fdk_reconstruct;
use crate::geometry::{build_trajectory, ConeBeamGeometry};
use crate::image::Image2;
use crate::phantom::{
    generate_phantom, insert_needle, needle_mask, normalize_with_scale, percentile_99_shifted,
    NeedlePose, PhantomSpec,
};
use crate::projection::{forward_project, ProjectionSet};
use crate::volume::{hu_mu_convert, ConvertDirection, Volume};

pub const VOLUME_STEMS: [&str; 5] = [
    "prior",
    "interventional",
    "mask",
    "sparse_fdk",
    "ground_truth",
];

/// Acquisition protocol shared by every case of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProtocol {
    pub geometry: ConeBeamGeometry,
    pub n_sparse_views: usize,
    pub n_dense_views: usize,
}

impl Default for SimProtocol {
    fn default() -> Self {
        SimProtocol {
            geometry: ConeBeamGeometry::default(),
            n_sparse_views: 13,
            n_dense_views: 180,
        }
    }
}

/// One simulated interventional case.
#[derive(Debug, Clone)]
pub struct Case {
    pub case_id: String,
    pub prior: Volume,
    pub interventional: Volume,
    pub needle_mask: Volume,
    /// FDK of the sparse interventional scan, in HU (clamped at air).
    pub sparse_fdk: Volume,
    /// FDK of the dense interventional scan, in HU: the training target.
    pub ground_truth: Volume,
    pub sparse_projections: ProjectionSet,
    pub pose: NeedlePose,
    pub scale_p99: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub phantom_seed: u64,
    pub pose_seed: u64,
    pub pose: NeedlePose,
    pub scale_p99: f64,
    pub split: Split,
    pub n_sparse_views: usize,
    pub n_dense_views: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sample a needle pose that stays inside the scanner field of view.
/// Needles are steel-like (3000 HU, 1.5 mm radius) and mostly in-plane.
pub fn sample_needle_pose(rng: &mut impl Rng, spec: &PhantomSpec) -> Result<NeedlePose> {
    let g = &spec.grid;
    let half_x = (g.nx as f64 - 1.0) * g.spacing_mm[0] / 2.0;
    let half_z = (g.nz as f64 - 1.0) * g.spacing_mm[2] / 2.0;
    let r_max = 0.88 * half_x;
    let z_max = 0.72 * half_z;

    for _ in 0..1000 {
        let tip = [
            rng.gen_range(-0.5..0.5) * half_x,
            rng.gen_range(-0.5..0.5) * half_x,
            rng.gen_range(-0.4..0.4) * half_z,
        ];
        let dz = rng.gen_range(-0.35..0.35);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = (1.0f64 - dz * dz).sqrt();
        let direction = [s * phi.cos(), s * phi.sin(), dz];
        let length = rng.gen_range(40.0..60.0);
        let pose = NeedlePose {
            tip_mm: tip,
            direction,
            length_mm: length,
            // steel-like 1.5 mm needle, widened to one voxel on coarse grids
            radius_mm: 1.5f64.max(g.min_spacing()),
            hu_value: 3000.0,
        };
        let entry = pose.entry_mm();
        let inside = |p: [f64; 3]| {
            (p[0] * p[0] + p[1] * p[1]).sqrt() <= r_max && p[2].abs() <= z_max
        };
        if inside(tip) && inside(entry) {
            return Ok(pose);
        }
    }
    Err(CbctError::InvalidArgument(
        "could not place a needle inside the field of view".into(),
    ))
}

/// Reconstruct in HU with the FDK chain, clamping undershoot at air level.
fn reconstruct_hu(projections: &ProjectionSet, volume_grid: &crate::volume::VolumeGrid) -> Result<Volume> {
    let recon_mu = fdk_reconstruct(projections, volume_grid)?;
    let mut hu = hu_mu_convert(&recon_mu, ConvertDirection::MuToHu)?;
    for v in hu.values.iter_mut() {
        *v = v.max(-1000.0);
    }
    Ok(hu)
}

/// Build one complete case: phantom prior, needle insertion, mask, per-case
/// normalization scale, sparse projections + FDK input, and the dense-view
/// ground truth.
pub fn build_case(
    case_id: &str,
    spec: &PhantomSpec,
    pose_seed: u64,
    protocol: &SimProtocol,
) -> Result<Case> {
    let prior = generate_phantom(spec)?;
    let mut pose_rng = ChaCha12Rng::seed_from_u64(pose_seed);
    let pose = sample_needle_pose(&mut pose_rng, spec)?;
    let interventional = insert_needle(&prior, &pose)?;
    let mask = needle_mask(&interventional, &prior)?;
    if mask.values.iter().all(|&v| v == 0.0) {
        return Err(CbctError::InvalidData(format!(
            "{case_id}: needle mask is empty"
        )));
    }
    // scale computed on the prior and shared by every image of the case
    let scale_p99 = percentile_99_shifted(&prior.values);
    if scale_p99 <= 0.0 {
        return Err(CbctError::InvalidData(format!(
            "{case_id}: normalization scale {scale_p99}"
        )));
    }

    let mu = hu_mu_convert(&interventional, ConvertDirection::HuToMu)?;
    let sparse_traj = build_trajectory(protocol.n_sparse_views, protocol.geometry.clone())?;
    let dense_traj = build_trajectory(protocol.n_dense_views, protocol.geometry.clone())?;
    let sparse_projections = forward_project(&mu, &sparse_traj)?;
    let dense_projections = forward_project(&mu, &dense_traj)?;
    let sparse_fdk = reconstruct_hu(&sparse_projections, &spec.grid)?;
    let ground_truth = reconstruct_hu(&dense_projections, &spec.grid)?;

    Ok(Case {
        case_id: case_id.to_string(),
        prior,
        interventional,
        needle_mask: mask,
        sparse_fdk,
        ground_truth,
        sparse_projections,
        pose,
        scale_p99,
    })
}

/// Persist a case into `dir` (created if needed).
pub fn write_case(
    case: &Case,
    manifest: &CaseManifest,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CbctError::io(dir, e))?;
    case.prior.write(&dir.join("prior"))?;
    case.interventional.write(&dir.join("interventional"))?;
    case.needle_mask.write(&dir.join("mask"))?;
    case.sparse_fdk.write(&dir.join("sparse_fdk"))?;
    case.ground_truth.write(&dir.join("ground_truth"))?;
    case.sparse_projections.write(&dir.join("sparse"))?;
    let text = toml::to_string(manifest)
        .map_err(|e| CbctError::InvalidData(format!("case manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| CbctError::io(&path, e))?;
    Ok(())
}

pub fn read_case_manifest(dir: &Path) -> Result<CaseManifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| CbctError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| CbctError::InvalidData(format!("{}: {e}", path.display())))
}

/// Top-level dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_cases: usize,
    pub seed: u64,
    pub protocol: SimProtocol,
    pub cases: Vec<String>,
}

pub fn write_dataset_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let text = toml::to_string(manifest)
        .map_err(|e| CbctError::InvalidData(format!("dataset manifest: {e}")))?;
    let path = dir.join("dataset.toml");
    fs::write(&path, text).map_err(|e| CbctError::io(&path, e))?;
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("dataset.toml");
    let text = fs::read_to_string(&path).map_err(|e| CbctError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| CbctError::InvalidData(format!("{}: {e}", path.display())))
}

/// Deterministic 70/15/15 split by case, each split non-empty when
/// `n_cases >= 3`.
pub fn assign_splits(n_cases: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_cases).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_0511_7a61u64);
    order.shuffle(&mut rng);
    let mut n_val = ((n_cases as f64) * 0.15).round() as usize;
    let mut n_test = n_val;
    if n_cases >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let n_train = n_cases.saturating_sub(n_val + n_test);
    let mut splits = vec![Split::Train; n_cases];
    for (pos, &case_idx) in order.iter().enumerate() {
        splits[case_idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// In-memory slice stack of one case, normalized with the case scale.
#[derive(Debug, Clone)]
pub struct CaseSlices {
    pub case_id: String,
    pub scale_p99: f64,
    pub split: Split,
    /// Per-z normalized images, row = y.
    pub sparse: Vec<Image2<f32>>,
    pub prior: Vec<Image2<f32>>,
    pub ground_truth: Vec<Image2<f32>>,
    pub mask: Vec<Image2<f32>>,
    /// Ground-truth HU slices, for metric computation.
    pub ground_truth_hu: Vec<Image2<f64>>,
    pub sparse_hu: Vec<Image2<f64>>,
}

fn normalized_slices(volume: &Volume, scale: f64) -> Result<Vec<Image2<f32>>> {
    let norm = normalize_with_scale(volume, scale)?;
    Ok((0..norm.grid.nz)
        .map(|k| Image2::new(norm.grid.ny, norm.grid.nx, norm.axial_slice(k)).to_f32())
        .collect())
}

fn hu_slices(volume: &Volume) -> Vec<Image2<f64>> {
    (0..volume.grid.nz)
        .map(|k| Image2::new(volume.grid.ny, volume.grid.nx, volume.axial_slice(k)))
        .collect()
}

/// Load one case directory into slice stacks.
pub fn load_case_slices(dir: &Path) -> Result<CaseSlices> {
    let manifest = read_case_manifest(dir)?;
    let prior = Volume::read(&dir.join("prior"))?;
    let sparse = Volume::read(&dir.join("sparse_fdk"))?;
    let gt = Volume::read(&dir.join("ground_truth"))?;
    let mask = Volume::read(&dir.join("mask"))?;
    let scale = manifest.scale_p99;
    let mask_slices: Vec<Image2<f32>> = (0..mask.grid.nz)
        .map(|k| {
            let mut img = Image2::new(mask.grid.ny, mask.grid.nx, mask.axial_slice(k)).to_f32();
            for v in img.data.iter_mut() {
                *v = if *v > 0.5 { 1.0 } else { 0.0 };
            }
            img
        })
        .collect();
    Ok(CaseSlices {
        case_id: manifest.case_id,
        scale_p99: scale,
        split: manifest.split,
        sparse: normalized_slices(&sparse, scale)?,
        prior: normalized_slices(&prior, scale)?,
        ground_truth: normalized_slices(&gt, scale)?,
        mask: mask_slices,
        ground_truth_hu: hu_slices(&gt),
        sparse_hu: hu_slices(&sparse),
    })
}

/// Case directories of a dataset, in manifest order, optionally filtered
/// by split.
pub fn case_dirs(dataset_dir: &Path, split: Option<Split>) -> Result<Vec<PathBuf>> {
    let manifest = read_dataset_manifest(dataset_dir)?;
    let mut out = Vec::new();
    for case_id in &manifest.cases {
        let dir = dataset_dir.join(case_id);
        if let Some(want) = split {
            let m = read_case_manifest(&dir)?;
            if m.split != want {
                continue;
            }
        }
        out.push(dir);
    }
    Ok(out)
}

/// Training slice selection: every axial slice with at least one mask
/// pixel, plus an equal number of needle-free slices drawn without
/// replacement from the same case.
pub fn select_training_slices(case: &CaseSlices, seed: u64) -> Vec<usize> {
    let needle: Vec<usize> = (0..case.mask.len())
        .filter(|&k| case.mask[k].data.iter().any(|&v| v > 0.0))
        .collect();
    let mut clean: Vec<usize> = (0..case.mask.len())
        .filter(|k| !needle.contains(k))
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    clean.shuffle(&mut rng);
    clean.truncate(needle.len());
    let mut all = needle;
    all.extend(clean);
    all.sort_unstable();
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorSpec;
    use crate::volume::VolumeGrid;

    fn tiny_protocol() -> SimProtocol {
        SimProtocol {
            geometry: ConeBeamGeometry {
                sid_mm: 750.0,
                sdd_mm: 1200.0,
                detector: DetectorSpec {
                    rows: 48,
                    cols: 48,
                    pixel_pitch_u_mm: 4.0,
                    pixel_pitch_v_mm: 4.0,
                },
            },
            n_sparse_views: 13,
            n_dense_views: 36,
        }
    }

    fn tiny_spec(seed: u64) -> PhantomSpec {
        PhantomSpec::for_grid(seed, VolumeGrid::centered(32, 32, 24, [2.0, 2.0, 2.0]))
    }

    #[test]
    fn case_has_thirteen_sparse_frames_and_nonempty_mask() {
        let case = build_case("case_0000", &tiny_spec(4), 40, &tiny_protocol()).unwrap();
        assert_eq!(case.sparse_projections.frames.len(), 13);
        let mask_count: f64 = case.needle_mask.values.iter().sum();
        let total = case.needle_mask.values.len() as f64;
        assert!(mask_count > 0.0 && mask_count < 0.01 * total);
    }

    #[test]
    fn prior_and_interventional_differ_exactly_on_needle_support() {
        let case = build_case("case_0001", &tiny_spec(5), 50, &tiny_protocol()).unwrap();
        let differing: Vec<usize> = (0..case.prior.values.len())
            .filter(|&i| case.prior.values[i] != case.interventional.values[i])
            .collect();
        assert!(!differing.is_empty());
        // every mask voxel differs, and every differing voxel is within one
        // voxel of the needle surface (the sub-threshold ramp)
        for idx in 0..case.needle_mask.values.len() {
            if case.needle_mask.values[idx] == 1.0 {
                assert!(differing.contains(&idx));
            }
        }
        let g = &case.prior.grid;
        let a = case.pose.entry_mm();
        for &idx in &differing {
            let k = idx / (g.nx * g.ny);
            let j = (idx / g.nx) % g.ny;
            let i = idx % g.nx;
            let p = g.voxel_center(i, j, k);
            let ab = a;
            let d = {
                // distance to needle segment
                let b = case.pose.tip_mm;
                let abv = [b[0] - ab[0], b[1] - ab[1], b[2] - ab[2]];
                let ap = [p[0] - ab[0], p[1] - ab[1], p[2] - ab[2]];
                let len2 = abv[0] * abv[0] + abv[1] * abv[1] + abv[2] * abv[2];
                let t = ((ap[0] * abv[0] + ap[1] * abv[1] + ap[2] * abv[2]) / len2)
                    .clamp(0.0, 1.0);
                let q = [ab[0] + t * abv[0], ab[1] + t * abv[1], ab[2] + t * abv[2]];
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            };
            assert!(
                d <= case.pose.radius_mm + g.min_spacing(),
                "changed voxel {d} mm from needle axis"
            );
        }
    }

    #[test]
    fn case_write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let write_once = |sub: &str| {
            let case = build_case("case_0000", &tiny_spec(6), 60, &tiny_protocol()).unwrap();
            let manifest = CaseManifest {
                case_id: case.case_id.clone(),
                phantom_seed: 6,
                pose_seed: 60,
                pose: case.pose.clone(),
                scale_p99: case.scale_p99,
                split: Split::Train,
                n_sparse_views: 13,
                n_dense_views: 36,
            };
            let d = dir.path().join(sub);
            write_case(&case, &manifest, &d).unwrap();
            d
        };
        let a = write_once("a");
        let b = write_once("b");
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let x = fs::read(a.join(&name)).unwrap();
            let y = fs::read(b.join(&name)).unwrap();
            assert_eq!(x, y, "file {name:?} differs between identical builds");
        }
    }

    #[test]
    fn case_dir_has_five_volumes_plus_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let case = build_case("case_0000", &tiny_spec(7), 70, &tiny_protocol()).unwrap();
        let manifest = CaseManifest {
            case_id: case.case_id.clone(),
            phantom_seed: 7,
            pose_seed: 70,
            pose: case.pose.clone(),
            scale_p99: case.scale_p99,
            split: Split::Test,
            n_sparse_views: 13,
            n_dense_views: 36,
        };
        write_case(&case, &manifest, dir.path()).unwrap();
        let vol_headers = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .map(|x| x == "vol")
                    .unwrap_or(false)
            })
            .count();
        assert_eq!(vol_headers, 5);
        assert!(dir.path().join("manifest.toml").exists());
        assert!(dir.path().join("sparse.proj").exists());

        let back = ProjectionSet::read(&dir.path().join("sparse")).unwrap();
        assert_eq!(back.frames.len(), 13);
        let slices = load_case_slices(dir.path()).unwrap();
        assert_eq!(slices.sparse.len(), 24);
        assert_eq!(slices.split, Split::Test);
    }

    #[test]
    fn splits_are_deterministic_and_cover_all() {
        let a = assign_splits(20, 9);
        let b = assign_splits(20, 9);
        assert_eq!(a, b);
        let count = |s: Split| a.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train) + count(Split::Val) + count(Split::Test), 20);
        assert_eq!(count(Split::Train), 14);
        assert_eq!(count(Split::Val), 3);
        assert_eq!(count(Split::Test), 3);
        let c = assign_splits(20, 10);
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn training_slices_balance_needle_and_clean() {
        let dir = tempfile::tempdir().unwrap();
        let case = build_case("case_0000", &tiny_spec(8), 80, &tiny_protocol()).unwrap();
        let manifest = CaseManifest {
            case_id: case.case_id.clone(),
            phantom_seed: 8,
            pose_seed: 80,
            pose: case.pose.clone(),
            scale_p99: case.scale_p99,
            split: Split::Train,
            n_sparse_views: 13,
            n_dense_views: 36,
        };
        write_case(&case, &manifest, dir.path()).unwrap();
        let slices = load_case_slices(dir.path()).unwrap();
        let selected = select_training_slices(&slices, 3);
        let needle_count = selected
            .iter()
            .filter(|&&k| slices.mask[k].data.iter().any(|&v| v > 0.0))
            .count();
        assert!(needle_count > 0);
        assert_eq!(selected.len(), 2 * needle_count);
        let unique: std::collections::BTreeSet<usize> = selected.iter().cloned().collect();
        assert_eq!(unique.len(), selected.len());
    }
}
