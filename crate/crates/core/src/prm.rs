//! Peak response maps and pseudo labels.
//!
//! Local maxima of the stage-one likelihood are backpropagated through the
//! network to the input. Each normalized response is thresholded, and the
//! union of the resulting masks becomes the binary pseudo label used to train
//! stage two.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Propagation, UNet};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// `[z, y, x]` in voxels.
    pub coord: [f64; 3],
    pub score: f64,
}

impl Peak {
    pub fn distance(&self, other: &Peak) -> f64 {
        euclidean(self.coord, other.coord)
    }

    /// Nearest voxel.
    pub fn voxel(&self) -> [usize; 3] {
        self.coord.map(|c| c.round().max(0.0) as usize)
    }
}

pub(crate) fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Descending score, then lexicographic coordinate.
pub(crate) fn peak_order(a: &Peak, b: &Peak) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.coord
            .iter()
            .zip(&b.coord)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }
}

/// Strict 26-neighbourhood maxima at or above `threshold`, thinned so that no
/// two survivors are closer than `min_separation`.
pub fn detect_peaks(pred: &Volume<f32>, threshold: f64, min_separation: f64) -> PeakSet {
    let [nz, ny, nx] = pred.dims();
    let mut candidates = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = pred.get(z, y, x);
                if (v as f64) < threshold {
                    continue;
                }
                let mut strict = true;
                'scan: for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            if dz == 0 && dy == 0 && dx == 0 {
                                continue;
                            }
                            let (qz, qy, qx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                            if qz < 0
                                || qy < 0
                                || qx < 0
                                || qz >= nz as isize
                                || qy >= ny as isize
                                || qx >= nx as isize
                            {
                                continue;
                            }
                            if pred.get(qz as usize, qy as usize, qx as usize) >= v {
                                strict = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if strict {
                    candidates.push(Peak {
                        coord: [z as f64, y as f64, x as f64],
                        score: v as f64,
                    });
                }
            }
        }
    }
    candidates.sort_by(peak_order);
    let mut kept: Vec<Peak> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.distance(&c) >= min_separation) {
            kept.push(c);
        }
    }
    PeakSet { peaks: kept }
}

/// Single-linkage clusters under `distance <= radius`. Groups are ordered by
/// their first member; members are ascending.
pub fn single_linkage(points: &[[f64; 3]], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if euclidean(points[i], points[j]) <= radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot_of_root = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot_of_root[r]].push(i);
    }
    groups
}

/// Normalized absolute input gradient of the stage-one output at `peak`.
/// Returns `None` when the gradient vanishes everywhere.
pub fn peak_response(
    model: &UNet,
    image: &Volume<f32>,
    peak: [usize; 3],
    rule: Propagation,
) -> Result<Option<Volume<f32>>> {
    let grad = model.output_input_gradient(image, peak, rule)?;
    let max = grad.data().iter().fold(0f32, |m, g| m.max(g.abs()));
    if max == 0.0 {
        log::warn!("peak {peak:?}: input gradient vanishes, response is empty");
        return Ok(None);
    }
    Ok(Some(grad.map(|g| g.abs() / max)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmParams {
    pub peak_threshold: f64,
    pub min_separation: f64,
    /// Fraction of each response's maximum kept in its mask.
    pub response_threshold: f64,
    pub group_radius: f64,
    /// Activation rule of the backward pass that produces a response.
    pub propagation: Propagation,
}

impl Default for PrmParams {
    fn default() -> Self {
        Self {
            peak_threshold: 0.5,
            min_separation: 3.0,
            response_threshold: 0.2,
            group_radius: 5.0,
            propagation: Propagation::Guided,
        }
    }
}

impl PrmParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config("prm", key, msg));
        if !(0.0..=1.0).contains(&self.peak_threshold) {
            return bad("peak_threshold", "must lie in [0, 1]");
        }
        if !(self.min_separation >= 0.0) {
            return bad("min_separation", "must be >= 0");
        }
        if !(self.response_threshold > 0.0 && self.response_threshold <= 1.0) {
            return bad("response_threshold", "must lie in (0, 1]");
        }
        if !(self.group_radius >= 0.0) {
            return bad("group_radius", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub source: String,
    pub foreground: LabelMap,
    pub peaks: PeakSet,
    pub peak_groups: Vec<Vec<usize>>,
}

/// Binarizes a normalized response at `threshold` of its maximum (which is 1).
pub fn response_mask(response: &Volume<f32>, threshold: f64) -> LabelMap {
    response.map(|r| u16::from(r > 0.0 && r as f64 >= threshold))
}

pub fn build_pseudo_labels(
    source: &str,
    model: &UNet,
    image: &Volume<f32>,
    peaks: &PeakSet,
    params: &PrmParams,
) -> Result<PseudoLabelSet> {
    let mut foreground = image.map(|_| 0u16);
    for peak in &peaks.peaks {
        if let Some(response) = peak_response(model, image, peak.voxel(), params.propagation)? {
            let mask = response_mask(&response, params.response_threshold);
            for (f, m) in foreground.data_mut().iter_mut().zip(mask.data()) {
                *f |= m;
            }
        }
    }
    let coords: Vec<[f64; 3]> = peaks.peaks.iter().map(|p| p.coord).collect();
    Ok(PseudoLabelSet {
        source: source.to_string(),
        foreground,
        peaks: peaks.clone(),
        peak_groups: single_linkage(&coords, params.group_radius),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    source: String,
    peaks: Vec<Peak>,
    groups: Vec<Vec<usize>>,
}

impl PseudoLabelSet {
    pub fn sidecar_json(&self) -> String {
        let sidecar = Sidecar {
            source: self.source.clone(),
            peaks: self.peaks.peaks.clone(),
            groups: self.peak_groups.clone(),
        };
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
    }

    /// Writes the mask as a uint8 `VOL1` file and the peaks next to it.
    pub fn save(&self, volume_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mask: Volume<u8> = self.foreground.map(|v| v.min(1) as u8);
        crate::volume::write_volume(&mask, volume_path)?;
        fs::write(sidecar_path, self.sidecar_json()).map_err(|e| Error::storage(sidecar_path, e))
    }
}

/// Reads the peaks stored next to a pseudo label.
pub fn read_sidecar(path: &Path) -> Result<(PeakSet, Vec<Vec<usize>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let s: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(path, "sidecar", e.to_string()))?;
    Ok((PeakSet { peaks: s.peaks }, s.groups))
}
