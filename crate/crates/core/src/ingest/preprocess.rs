use serde::{Deserialize, Serialize};

use super::IngestError;

/// Acquisition plane of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Axial => "AXIAL",
            Plane::Coronal => "CORONAL",
            Plane::Sagittal => "SAGITTAL",
        }
    }
}

const ISOTROPIC_RTOL: f64 = 1e-6;

/// Infers the acquisition plane from voxel spacing given in volume axis order
/// (x, y, z). The slicing axis is the one with the largest spacing; axis 0 is
/// sagittal, 1 coronal, 2 axial. Isotropic volumes are axial, and ties between
/// equal maximal spacings go to the lowest axis index.
pub fn infer_plane(spacing: [f64; 3]) -> Result<Plane, IngestError> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(IngestError::NonPositiveSpacing);
    }
    let max = spacing.iter().copied().fold(f64::MIN, f64::max);
    let min = spacing.iter().copied().fold(f64::MAX, f64::min);
    if (max - min) <= ISOTROPIC_RTOL * max {
        return Ok(Plane::Axial);
    }
    let axis = spacing.iter().position(|s| *s == max).unwrap_or(2);
    Ok(match axis {
        0 => Plane::Sagittal,
        1 => Plane::Coronal,
        _ => Plane::Axial,
    })
}

/// Every second slice index from the central window of at most 100 slices.
pub fn select_slice_indices(depth: usize) -> Vec<usize> {
    let window = depth.min(100);
    let start = (depth - window) / 2;
    (start..start + window).step_by(2).collect()
}
