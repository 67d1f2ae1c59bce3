//! Integrated feature pyramids and feature-level patch cropping.
//!
//! Cropping slices cells straight out of a precomputed pyramid level and
//! records the exact normalized footprint of the window, so coordinates
//! can be remapped between the image frame and the patch frame without
//! loss. Crops snap to the cell containing the requested center; sub-cell
//! offsets are absorbed by the coordinate remap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The three integrated feature maps per image at 1/32, 1/16 and 1/4 of
/// the input resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub coarse: Tensor,
    pub mid: Tensor,
    pub fine: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidLevel {
    Coarse,
    Mid,
    Fine,
}

impl FeaturePyramid {
    pub fn level(&self, level: PyramidLevel) -> &Tensor {
        match level {
            PyramidLevel::Coarse => &self.coarse,
            PyramidLevel::Mid => &self.mid,
            PyramidLevel::Fine => &self.fine,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (t, div, name) in [
            (&self.coarse, 32usize, "coarse"),
            (&self.mid, 16, "mid"),
            (&self.fine, 4, "fine"),
        ] {
            let s = t.shape();
            if s.len() != 4 || s[2] != h / div || s[3] != w / div {
                return Err(Error::Invalid(format!(
                    "pyramid level {} has shape {:?}, want spatial {}x{}",
                    name,
                    s,
                    h / div,
                    w / div
                )));
            }
        }
        Ok(())
    }
}

/// A window of feature cells plus its exact normalized footprint in the
/// source image frame.
#[derive(Debug, Clone)]
pub struct FeaturePatch {
    /// (1, C, w, w) cell values; zero-filled outside the map.
    pub data: Tensor,
    /// Normalized (x, y) of the window's top-left corner; may be negative
    /// when the window hangs over the border.
    pub origin: (f64, f64),
    /// Normalized (width, height) of the window footprint.
    pub extent: (f64, f64),
}

impl FeaturePatch {
    /// A pseudo-patch covering the whole map (used by the coarse stage).
    pub fn full(fmap: &Tensor) -> FeaturePatch {
        FeaturePatch { data: fmap.clone(), origin: (0.0, 0.0), extent: (1.0, 1.0) }
    }

    /// Map an image-frame coordinate into the patch frame. Out-of-patch
    /// inputs simply land outside [0,1]^2.
    pub fn global_to_local(&self, g: (f64, f64)) -> Result<(f64, f64)> {
        if self.extent.0 == 0.0 || self.extent.1 == 0.0 {
            return Err(Error::Degenerate("patch has zero extent".to_string()));
        }
        Ok(((g.0 - self.origin.0) / self.extent.0, (g.1 - self.origin.1) / self.extent.1))
    }

    /// Inverse of [`FeaturePatch::global_to_local`].
    pub fn local_to_global(&self, l: (f64, f64)) -> (f64, f64) {
        (self.origin.0 + l.0 * self.extent.0, self.origin.1 + l.1 * self.extent.1)
    }

    /// Window side in cells.
    pub fn cells(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Crop a w x w cell window whose center cell contains `center`.
///
/// `center` is a normalized image coordinate; `w` must be odd and no
/// larger than twice the map side. Out-of-bounds cells are zero-filled
/// and the recorded footprint keeps the remap exact regardless.
pub fn crop_feature_patch(fmap: &Tensor, center: (f64, f64), w: usize) -> Result<FeaturePatch> {
    let s = fmap.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("crop_feature_patch", format!("want (1,C,H,W), got {:?}", s)));
    }
    let (hc, wc) = (s[2], s[3]);
    if w % 2 == 0 || w == 0 {
        return Err(Error::Invalid(format!("crop window must be odd, got {}", w)));
    }
    if w > 2 * hc.min(wc) {
        return Err(Error::Invalid(format!(
            "crop window {} larger than 2x map side {}x{}",
            w, hc, wc
        )));
    }
    if !(0.0..=1.0).contains(&center.0) || !(0.0..=1.0).contains(&center.1) {
        return Err(Error::Invalid(format!("crop center {:?} outside [0,1]^2", center)));
    }
    // Cell containing the center (snap); the top boundary belongs to the
    // last cell.
    let cx = ((center.0 * wc as f64).floor() as usize).min(wc - 1);
    let cy = ((center.1 * hc as f64).floor() as usize).min(hc - 1);
    let half = (w / 2) as isize;
    let col0 = cx as isize - half;
    let row0 = cy as isize - half;
    let data = fmap.crop2d(row0, col0, w)?;
    Ok(FeaturePatch {
        data,
        origin: (col0 as f64 / wc as f64, row0 as f64 / hc as f64),
        extent: (w as f64 / wc as f64, w as f64 / hc as f64),
    })
}
