//! Instance assignment: nearby likelihood peaks are merged, then a
//! marker-based watershed splits the stage-two foreground.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::centermap::face_neighbors;
use crate::error::{ensure_same_dims, Error, Result};
use crate::filters::gaussian_smooth;
use crate::prm::{peak_order, single_linkage, Peak, PeakSet};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForegroundRule {
    /// Foreground where the stage-two foreground score beats background.
    #[default]
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstancerParams {
    pub merge_radius: f64,
    pub foreground_rule: ForegroundRule,
    pub topography_sigma: f64,
}

impl Default for InstancerParams {
    fn default() -> Self {
        Self {
            merge_radius: 5.0,
            foreground_rule: ForegroundRule::Argmax,
            topography_sigma: 1.0,
        }
    }
}

impl InstancerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_radius >= 0.0) {
            return Err(Error::config("instancer", "merge_radius", "must be >= 0"));
        }
        if !(self.topography_sigma >= 0.0) {
            return Err(Error::config("instancer", "topography_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Binary foreground from the two class probabilities `[background, foreground]`.
pub fn foreground_mask(classes: &[Volume<f32>; 2], rule: ForegroundRule) -> Result<LabelMap> {
    ensure_same_dims("foreground_mask", classes[0].dims(), classes[1].dims())?;
    match rule {
        ForegroundRule::Argmax => Ok(classes[1].with_data(
            classes[0]
                .data()
                .iter()
                .zip(classes[1].data())
                .map(|(b, f)| u16::from(f > b))
                .collect(),
        )),
    }
}

/// Replaces each single-linkage cluster by its score-weighted mean position,
/// keeping the highest score.
pub fn merge_peaks(peaks: &PeakSet, merge_radius: f64) -> PeakSet {
    let coords: Vec<[f64; 3]> = peaks.peaks.iter().map(|p| p.coord).collect();
    let mut merged: Vec<Peak> = single_linkage(&coords, merge_radius)
        .into_iter()
        .map(|group| {
            let members: Vec<&Peak> = group.iter().map(|&i| &peaks.peaks[i]).collect();
            let weight: f64 = members.iter().map(|p| p.score).sum();
            let score = members.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.score));
            let coord = if weight > 0.0 {
                [0, 1, 2].map(|a| members.iter().map(|p| p.score * p.coord[a]).sum::<f64>() / weight)
            } else {
                [0, 1, 2].map(|a| members.iter().map(|p| p.coord[a]).sum::<f64>() / members.len() as f64)
            };
            Peak { coord, score }
        })
        .collect();
    merged.sort_by(peak_order);
    PeakSet { peaks: merged }
}

#[derive(PartialEq)]
struct Entry {
    height: f64,
    order: u64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // BinaryHeap is a max-heap: lowest height first, then earliest insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .height
            .total_cmp(&self.height)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority flood of `topography` from labelled seeds, restricted to `mask`.
pub fn priority_flood(mask: &LabelMap, topography: &Volume<f64>, labels: &mut LabelMap) {
    let dims = mask.dims();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            heap.push(Entry { height: topography.data()[i], order, index: i });
            order += 1;
        }
    }
    while let Some(Entry { index, .. }) = heap.pop() {
        let label = labels.data()[index];
        let [z, y, x] = labels.coord(index);
        for [qz, qy, qx] in face_neighbors(dims, z, y, x) {
            let j = labels.index(qz, qy, qx);
            if mask.data()[j] != 0 && labels.data()[j] == 0 {
                labels.data_mut()[j] = label;
                heap.push(Entry { height: topography.data()[j], order, index: j });
                order += 1;
            }
        }
    }
}

/// Gives each unlabeled foreground voxel the label of the nearest labeled
/// voxel. Only labeled voxels with an unlabeled face neighbour can be nearest.
fn fill_unreached(mask: &LabelMap, labels: &mut LabelMap) {
    let dims = mask.dims();
    let unreached: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.data()[i] != 0 && labels.data()[i] == 0)
        .collect();
    if unreached.is_empty() {
        return;
    }
    let frontier: Vec<usize> = (0..labels.len())
        .filter(|&i| {
            let [z, y, x] = labels.coord(i);
            labels.data()[i] != 0
                && face_neighbors(dims, z, y, x)
                    .into_iter()
                    .any(|[a, b, c]| labels.get(a, b, c) == 0)
        })
        .collect();
    if frontier.is_empty() {
        return;
    }
    let fcoords: Vec<[usize; 3]> = frontier.iter().map(|&i| labels.coord(i)).collect();
    let fill: Vec<(usize, u16)> = unreached
        .iter()
        .map(|&i| {
            let p = labels.coord(i);
            let mut best = (u64::MAX, 0);
            for (k, q) in fcoords.iter().enumerate() {
                let d: u64 = (0..3).map(|a| (p[a] as i64 - q[a] as i64).pow(2) as u64).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            (i, labels.data()[frontier[best.1]])
        })
        .collect();
    for (i, l) in fill {
        labels.data_mut()[i] = l;
    }
}

pub fn assign_instances(
    foreground: &LabelMap,
    likelihood: &Volume<f32>,
    peaks: &PeakSet,
    params: &InstancerParams,
) -> Result<LabelMap> {
    params.validate()?;
    ensure_same_dims("assign_instances", foreground.dims(), likelihood.dims())?;
    let mut labels = foreground.map(|_| 0u16);
    if foreground.data().iter().all(|&v| v == 0) {
        return Ok(labels);
    }
    let merged = merge_peaks(peaks, params.merge_radius);
    let mut next = 0u16;
    for peak in &merged.peaks {
        let [z, y, x] = peak.voxel();
        if !foreground.contains(peak.coord) || foreground.get(z, y, x) == 0 || labels.get(z, y, x) != 0 {
            log::warn!("peak at {:?} lies outside the foreground and is dropped", peak.coord);
            continue;
        }
        next = next
            .checked_add(1)
            .ok_or_else(|| Error::Runtime("more than 65535 instances".into()))?;
        labels.set(z, y, x, next);
    }
    if next == 0 {
        return Err(Error::NoMarkers);
    }
    let topography = if params.topography_sigma > 0.0 {
        gaussian_smooth(&likelihood.to_f64(), params.topography_sigma)
    } else {
        likelihood.to_f64()
    }
    .map(|v| -v);
    priority_flood(foreground, &topography, &mut labels);
    fill_unreached(foreground, &mut labels);
    Ok(labels)
}
