//! Centre-likelihood targets built from centroid annotations.
//!
//! Each voxel is assigned to its nearest centroid. Voxels where that
//! assignment changes across a face form the Voronoi border and are hard
//! negatives; everything else decays as `exp(-k * D / d_m)` up to the cutoff
//! radius `d_m`.

use serde::{Deserialize, Serialize};

use crate::annotations::CentroidSet;
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenterMapParams {
    /// Cutoff radius in voxels.
    pub d_m: f64,
    /// Decay rate.
    pub k: f64,
    /// Per-axis distance scale `[z, y, x]`; `None` derives it from voxel spacing.
    pub anisotropy: Option<[f64; 3]>,
}

impl Default for CenterMapParams {
    fn default() -> Self {
        Self {
            d_m: 8.0,
            k: 3.0,
            anisotropy: None,
        }
    }
}

impl CenterMapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_m > 0.0) {
            return Err(Error::config("centermap", "d_m", "must be > 0"));
        }
        if !(self.k > 0.0) {
            return Err(Error::config("centermap", "k", "must be > 0"));
        }
        if let Some(a) = self.anisotropy {
            if a.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::config("centermap", "anisotropy", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Explicit anisotropy, or spacing relative to the finest axis.
    pub fn resolve_anisotropy(&self, spacing: [f32; 3]) -> [f64; 3] {
        self.anisotropy
            .unwrap_or_else(|| anisotropy_from_spacing(spacing))
    }
}

pub fn anisotropy_from_spacing(spacing: [f32; 3]) -> [f64; 3] {
    let finest = spacing.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    spacing.map(|s| s as f64 / finest)
}

/// Nearest-centroid assignment (1-based, ties to the lower index) and the
/// scaled Euclidean distance to that centroid.
pub fn nearest_centroid_field(
    dims: Dims,
    centroids: &CentroidSet,
    anisotropy: [f64; 3],
) -> Result<(LabelMap, Volume<f64>)> {
    if centroids.is_empty() {
        return Err(Error::Argument("empty centroid set".into()));
    }
    if centroids.len() > u16::MAX as usize {
        return Err(Error::Argument(format!(
            "{} centroids exceed the label range",
            centroids.len()
        )));
    }
    let points = centroids.points();
    let mut assignment = LabelMap::zeros(dims);
    let mut distance = Volume::<f64>::zeros(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let voxel = [z as f64, y as f64, x as f64];
                let mut best = (0usize, f64::INFINITY);
                for (i, c) in points.iter().enumerate() {
                    let d2: f64 = (0..3)
                        .map(|a| {
                            let d = anisotropy[a] * (voxel[a] - c[a]);
                            d * d
                        })
                        .sum();
                    if d2 < best.1 {
                        best = (i, d2);
                    }
                }
                assignment.set(z, y, x, (best.0 + 1) as u16);
                distance.set(z, y, x, best.1.sqrt());
            }
        }
    }
    Ok((assignment, distance))
}

const FACE_OFFSETS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Face neighbours of `(z, y, x)` that lie inside `dims`.
pub(crate) fn face_neighbors(dims: Dims, z: usize, y: usize, x: usize) -> impl Iterator<Item = [usize; 3]> {
    FACE_OFFSETS.iter().filter_map(move |o| {
        let c = [z as isize + o[0], y as isize + o[1], x as isize + o[2]];
        let inside = (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]);
        inside.then(|| [c[0] as usize, c[1] as usize, c[2] as usize])
    })
}

/// 1 where any face neighbour carries a different assignment.
pub fn voronoi_borders(assignment: &LabelMap) -> LabelMap {
    let dims = assignment.dims();
    let mut mask = assignment.map(|_| 0u16);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let own = assignment.get(z, y, x);
                let border = face_neighbors(dims, z, y, x)
                    .any(|[nz, ny, nx]| assignment.get(nz, ny, nx) != own);
                if border {
                    mask.set(z, y, x, 1);
                }
            }
        }
    }
    mask
}

/// Likelihood target `p(x)` for a grid of extent `dims`.
pub fn build_center_map(
    dims: Dims,
    centroids: &CentroidSet,
    params: &CenterMapParams,
    anisotropy: [f64; 3],
) -> Result<Volume<f32>> {
    params.validate()?;
    centroids.validate_bounds(dims)?;
    let (assignment, distance) = nearest_centroid_field(dims, centroids, anisotropy)?;
    let borders = voronoi_borders(&assignment);
    let data = distance
        .data()
        .iter()
        .zip(borders.data())
        .map(|(&d, &b)| {
            if b != 0 {
                0.0
            } else if d <= params.d_m {
                (-params.k * d / params.d_m).exp() as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(distance.with_data(data))
}
