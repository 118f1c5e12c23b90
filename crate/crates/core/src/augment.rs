//! CutMix blending and complex-field augmentations.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};

/// Rectangle in pixel coordinates, `top..top+height` × `left..left+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Binary CutMix mask: `true` keeps the source pixel, `false` takes the partner's.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    pub mask: Array2<bool>,
    pub realized_lambda: f64,
    pub region: BoxRegion,
    /// Whether the target box had to be cut at the image border.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendResult {
    pub mixed: Array3<f64>,
    /// Realized mixing coefficient, the surviving area fraction of the source.
    pub lam: f64,
    /// Batch index of the partner sample.
    pub partner: usize,
    pub mask: MixMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    /// Beta(alpha, alpha) parameter for the mixing coefficient.
    pub alpha: f64,
    /// Blends per sample (M).
    #[serde(rename = "m")]
    pub blend_count: usize,
    pub mri_mag_range: (f64, f64),
    /// Apply magnitude scaling and random phase to complex samples.
    pub physical: bool,
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            blend_count: 4,
            mri_mag_range: (0.8, 1.25),
            physical: false,
            seed: 0,
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.blend_count == 0 {
            return Err(Error::Parameter("blend count M must be at least 1".into()));
        }
        let (low, high) = self.mri_mag_range;
        if !(low > 0.0 && low <= high) {
            return Err(Error::Parameter(format!(
                "magnitude range must satisfy 0 < low <= high, got ({low}, {high})"
            )));
        }
        Ok(())
    }
}

/// One draw from Beta(alpha, alpha).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

fn check_lambda(lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lam}")));
    }
    Ok(())
}

/// Mask whose box is centred on `(center_y, center_x)`.
///
/// The box sides are `floor(h·√(1−lam))` × `floor(w·√(1−lam))`, clipped at
/// the border; the realized coefficient is recomputed from the clipped area.
pub fn make_mask_at(h: usize, w: usize, lam: f64, center_y: usize, center_x: usize) -> Result<MixMask> {
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("mask size must be positive, got {h}×{w}")));
    }
    check_lambda(lam)?;
    let ratio = (1.0 - lam).sqrt();
    let cut_h = (h as f64 * ratio) as i64;
    let cut_w = (w as f64 * ratio) as i64;
    let top = center_y as i64 - cut_h / 2;
    let left = center_x as i64 - cut_w / 2;
    let (y0, y1) = (top.clamp(0, h as i64), (top + cut_h).clamp(0, h as i64));
    let (x0, x1) = (left.clamp(0, w as i64), (left + cut_w).clamp(0, w as i64));
    let clipped = y1 - y0 != cut_h || x1 - x0 != cut_w;
    let region = BoxRegion {
        top: y0 as usize,
        left: x0 as usize,
        height: (y1 - y0) as usize,
        width: (x1 - x0) as usize,
    };
    let mask = Array2::from_shape_fn((h, w), |(y, x)| !region.contains(y, x));
    let realized_lambda = 1.0 - region.area() as f64 / (h * w) as f64;
    Ok(MixMask {
        mask,
        realized_lambda,
        region,
        clipped,
    })
}

/// Mask with a uniformly drawn box centre.
pub fn make_mask<R: Rng + ?Sized>(h: usize, w: usize, lam: f64, rng: &mut R) -> Result<MixMask> {
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("mask size must be positive, got {h}×{w}")));
    }
    check_lambda(lam)?;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    make_mask_at(h, w, lam, cy, cx)
}

/// `mask ⊙ x_i + (1 − mask) ⊙ x_j`, the mask shared by every channel.
pub fn apply_mask(x_i: &Array3<f64>, x_j: &Array3<f64>, mask: &MixMask) -> Result<Array3<f64>> {
    if x_i.dim() != x_j.dim() {
        return Err(Error::Dimension(format!(
            "cannot blend shapes {:?} and {:?}",
            x_i.dim(),
            x_j.dim()
        )));
    }
    let (h, w, _) = x_i.dim();
    if mask.mask.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match image {h}×{w}",
            mask.mask.dim()
        )));
    }
    let mut mixed = x_i.clone();
    Zip::indexed(&mut mixed).and(x_j).for_each(|(y, x, _), out, other| {
        if !mask.mask[[y, x]] {
            *out = *other;
        }
    });
    Ok(mixed)
}

/// CutMix of two equally shaped images; returns the blend and its mask.
pub fn cutmix<R: Rng + ?Sized>(
    x_i: &Array3<f64>,
    x_j: &Array3<f64>,
    lam: f64,
    rng: &mut R,
) -> Result<(Array3<f64>, MixMask)> {
    if x_i.dim() != x_j.dim() {
        return Err(Error::Dimension(format!(
            "cannot blend shapes {:?} and {:?}",
            x_i.dim(),
            x_j.dim()
        )));
    }
    let (h, w, _) = x_i.dim();
    let mask = make_mask(h, w, lam, rng)?;
    let mixed = apply_mask(x_i, x_j, &mask)?;
    Ok((mixed, mask))
}

/// `M` independent in-batch blends of sample `i`, each with its own partner,
/// coefficient and box.
pub fn blend_set<R: Rng + ?Sized>(
    batch: &[Array3<f64>],
    i: usize,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<Vec<BlendResult>> {
    policy.validate()?;
    if batch.len() < 2 {
        return Err(Error::Capacity(format!(
            "blending needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    if i >= batch.len() {
        return Err(Error::Parameter(format!(
            "index {i} out of range for batch of {}",
            batch.len()
        )));
    }
    (0..policy.blend_count)
        .map(|_| {
            let k = rng.random_range(0..batch.len() - 1);
            let partner = if k >= i { k + 1 } else { k };
            let lam = sample_lambda(policy.alpha, rng)?;
            let (mixed, mask) = cutmix(&batch[i], &batch[partner], lam, rng)?;
            Ok(BlendResult {
                mixed,
                lam: mask.realized_lambda,
                partner,
                mask,
            })
        })
        .collect()
}

/// `s · z · e^{iφ}` for a two-channel complex sample.
pub fn scale_and_rotate(patch: &SampleRecord, scale: f64, phase: f64) -> Result<SampleRecord> {
    if patch.channels() != 2 {
        return Err(Error::Schema(format!(
            "complex augmentation needs 2 channels, sample {} has {}",
            patch.id,
            patch.channels()
        )));
    }
    let (sin, cos) = phase.sin_cos();
    let mut out = patch.clone();
    let (h, w, _) = out.tensor.dim();
    for y in 0..h {
        for x in 0..w {
            let re = patch.tensor[[y, x, 0]];
            let im = patch.tensor[[y, x, 1]];
            out.tensor[[y, x, 0]] = scale * (re * cos - im * sin);
            out.tensor[[y, x, 1]] = scale * (re * sin + im * cos);
        }
    }
    Ok(out)
}

/// Random magnitude scaling and global phase rotation.
pub fn mri_augment<R: Rng + ?Sized>(
    patch: &SampleRecord,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<SampleRecord> {
    policy.validate()?;
    if patch.channels() != 2 {
        return Err(Error::Schema(format!(
            "complex augmentation needs 2 channels, sample {} has {}",
            patch.id,
            patch.channels()
        )));
    }
    let (low, high) = policy.mri_mag_range;
    let scale = rng.random_range(low..=high);
    let phase = rng.random_range(0.0..2.0 * PI);
    scale_and_rotate(patch, scale, phase)
}
