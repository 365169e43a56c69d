//! Online training-time augmentation: shared rotation/scaling/flips on a
//! sample, plus an independent in-plane rotation of the prior slice that
//! emulates planning-scan misalignment.
//!
//! All resampling is bilinear about the image center with a constant fill
//! for pixels leaving the support. Transforms that are exact lattice
//! permutations (identity, pure flips, multiples of 90° at unit scale) take
//! an exact path so they introduce no interpolation error.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image2;
use crate::volume::Volume;

/// Whether the prior is misaligned during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MisalignMode {
    /// Prior rotated by an extra α ~ U[−max, +max] per sample.
    #[serde(rename = "mis")]
    Mis,
    /// Prior always aligned (α = 0).
    #[serde(rename = "no-mis")]
    NoMis,
}

/// Ranges for [`sample_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rot_max_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub misalign_max_deg: f64,
    pub mode: MisalignMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_max_deg: 10.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            misalign_max_deg: 5.0,
            mode: MisalignMode::Mis,
        }
    }
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation applied to the whole sample, degrees.
    pub rot_deg: f64,
    /// Isotropic zoom about the center.
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    /// Additional rotation applied to the prior slice only, degrees.
    pub misalign_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rot_deg: 0.0,
        scale: 1.0,
        flip_x: false,
        flip_y: false,
        misalign_deg: 0.0,
    };
}

/// Draw parameters in a fixed order: rotation, scale, flip_x, flip_y, then
/// (in `Mis` mode only) the prior misalignment.
pub fn sample_params(rng: &mut impl Rng, config: &AugmentConfig) -> AugmentParams {
    let rot_deg = rng.gen_range(-config.rot_max_deg..=config.rot_max_deg);
    let scale = rng.gen_range(config.scale_lo..=config.scale_hi);
    let flip_x = rng.gen_bool(0.5);
    let flip_y = rng.gen_bool(0.5);
    let misalign_deg = match config.mode {
        MisalignMode::Mis => rng.gen_range(-config.misalign_max_deg..=config.misalign_max_deg),
        MisalignMode::NoMis => 0.0,
    };
    AugmentParams {
        rot_deg,
        scale,
        flip_x,
        flip_y,
        misalign_deg,
    }
}

/// The quadruple fed to the networks: sparse FDK input, prior input, and
/// the two targets (reconstruction and binary instrument mask), all in
/// normalized units and of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub sparse: Image2<f32>,
    pub prior: Image2<f32>,
    pub target_recon: Image2<f32>,
    pub target_mask: Image2<f32>,
}

impl TrainingSample {
    pub fn validate(&self) {
        let (h, w) = (self.sparse.h, self.sparse.w);
        for img in [&self.prior, &self.target_recon, &self.target_mask] {
            assert_eq!((img.h, img.w), (h, w), "sample image dimensions differ");
        }
    }
}

/// Rotate about the image center, bilinear, `fill` outside the support.
/// Positive angles rotate content counter-clockwise in (row, col) space.
/// Multiples of 90° are exact lattice permutations on square images.
pub fn rotate_inplane<F: Float>(image: &Image2<F>, angle_deg: f64, fill: F) -> Image2<F> {
    transform(
        image,
        &AugmentParams {
            rot_deg: angle_deg,
            ..AugmentParams::IDENTITY
        },
        fill,
    )
}

/// Apply the shared transform to all four images and the extra prior
/// misalignment rotation to the prior only. The mask is re-binarized at
/// 0.5 after interpolation.
pub fn apply(sample: &TrainingSample, params: &AugmentParams) -> TrainingSample {
    sample.validate();
    let fill = 0.0f32; // normalized air
    let prior_params = AugmentParams {
        rot_deg: params.rot_deg + params.misalign_deg,
        ..*params
    };
    let mut mask = transform(&sample.target_mask, params, fill);
    for v in mask.data.iter_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    TrainingSample {
        sparse: transform(&sample.sparse, params, fill),
        prior: transform(&sample.prior, &prior_params, fill),
        target_recon: transform(&sample.target_recon, params, fill),
        target_mask: mask,
    }
}

/// Rotate every axial slice of a volume in-plane by the same angle.
pub fn rotate_volume_inplane(volume: &Volume, angle_deg: f64, fill: f64) -> Volume {
    let g = &volume.grid;
    let mut out = volume.clone();
    for k in 0..g.nz {
        let slice = Image2::new(g.ny, g.nx, volume.axial_slice(k));
        let rotated = rotate_inplane(&slice, angle_deg, fill);
        for j in 0..g.ny {
            for i in 0..g.nx {
                *out.at_mut(i, j, k) = rotated.at(j, i);
            }
        }
    }
    out
}

fn is_identity(params: &AugmentParams) -> bool {
    params.rot_deg.rem_euclid(360.0) == 0.0
        && params.scale == 1.0
        && !params.flip_x
        && !params.flip_y
}

/// Core resampler. The forward transform scales content about the center,
/// rotates it, then applies the flips; sampling inverts that chain.
fn transform<F: Float>(image: &Image2<F>, params: &AugmentParams, fill: F) -> Image2<F> {
    if is_identity(params) {
        return image.clone();
    }

    let (h, w) = (image.h, image.w);
    let quarter_turns = params.rot_deg.rem_euclid(360.0) / 90.0;
    let exact_quarter = quarter_turns.fract() == 0.0 && params.scale == 1.0 && h == w;

    let mut out = Image2::filled(h, w, fill);
    if exact_quarter {
        let q = (quarter_turns as usize) % 4;
        let n = h;
        for r in 0..n {
            for c in 0..n {
                // invert flips, then rotate the index CW to find the source
                let (mut sr, mut sc) = (r, c);
                if params.flip_y {
                    sr = n - 1 - sr;
                }
                if params.flip_x {
                    sc = n - 1 - sc;
                }
                for _ in 0..q {
                    let (nr, nc) = (sc, n - 1 - sr);
                    sr = nr;
                    sc = nc;
                }
                out.set(r, c, image.at(sr, sc));
            }
        }
        return out;
    }

    let theta = params.rot_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let inv_scale = 1.0 / params.scale;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for r in 0..h {
        for c in 0..w {
            let mut dy = r as f64 - cy;
            let mut dx = c as f64 - cx;
            if params.flip_y {
                dy = -dy;
            }
            if params.flip_x {
                dx = -dx;
            }
            // rotate by −θ: content appears rotated by +θ (CCW with y up;
            // rows increase downward, so visually this is a fixed chirality)
            let sx = (cos_t * dx + sin_t * dy) * inv_scale;
            let sy = (-sin_t * dx + cos_t * dy) * inv_scale;
            out.set(r, c, image.sample_bilinear(cy + sy, cx + sx, fill));
        }
    }
    out
}
