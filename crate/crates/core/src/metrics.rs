//! Segmentation scores: semantic IoU, SEG and MUCov.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::volume::LabelMap;

/// `|pred ∩ gt| / |pred ∪ gt|` over nonzero voxels; 1 when both are empty.
pub fn iou(pred_fg: &LabelMap, gt_fg: &LabelMap) -> Result<f64> {
    ensure_same_dims("iou", pred_fg.dims(), gt_fg.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred_fg.data().iter().zip(gt_fg.data()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Instance sizes and pairwise overlaps of two label maps.
#[derive(Clone, Debug, Default)]
pub struct Overlaps {
    pub pred_sizes: BTreeMap<u16, usize>,
    pub gt_sizes: BTreeMap<u16, usize>,
    /// `(gt, pred) -> shared voxels`, nonzero labels only.
    pub shared: BTreeMap<(u16, u16), usize>,
}

impl Overlaps {
    pub fn new(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        ensure_same_dims("overlaps", pred.dims(), gt.dims())?;
        let mut o = Overlaps::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p != 0 {
                *o.pred_sizes.entry(p).or_default() += 1;
            }
            if g != 0 {
                *o.gt_sizes.entry(g).or_default() += 1;
            }
            if p != 0 && g != 0 {
                *o.shared.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    pub fn jaccard(&self, gt: u16, pred: u16) -> f64 {
        let inter = self.shared.get(&(gt, pred)).copied().unwrap_or(0);
        let union = self.gt_sizes[&gt] + self.pred_sizes[&pred] - inter;
        inter as f64 / union as f64
    }

    /// The predicted instance covering more than half of `gt`, if any.
    pub fn covering(&self, gt: u16) -> Option<u16> {
        let size = self.gt_sizes[&gt];
        self.shared
            .range((gt, 0)..=(gt, u16::MAX))
            .find(|(_, &n)| 2 * n > size)
            .map(|(&(_, p), _)| p)
    }
}

pub fn seg_score(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(seg_from(&Overlaps::new(pred, gt)?))
}

fn seg_from(o: &Overlaps) -> f64 {
    if o.gt_sizes.is_empty() {
        return 1.0;
    }
    let total: f64 = o
        .gt_sizes
        .keys()
        .map(|&g| o.covering(g).map_or(0.0, |p| o.jaccard(g, p)))
        .sum();
    total / o.gt_sizes.len() as f64
}

pub fn mucov_score(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(mucov_from(&Overlaps::new(pred, gt)?))
}

fn best_gt_for(o: &Overlaps, p: u16) -> Option<(u16, f64)> {
    o.gt_sizes
        .keys()
        .map(|&g| (g, o.jaccard(g, p)))
        .fold(None, |best: Option<(u16, f64)>, (g, j)| match best {
            Some((_, b)) if b >= j => best,
            _ => Some((g, j)),
        })
}

fn mucov_from(o: &Overlaps) -> f64 {
    if o.pred_sizes.is_empty() {
        return if o.gt_sizes.is_empty() { 1.0 } else { 0.0 };
    }
    let total: f64 = o
        .pred_sizes
        .keys()
        .map(|&p| best_gt_for(o, p).map_or(0.0, |(_, j)| j))
        .sum();
    total / o.pred_sizes.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMatch {
    pub gt_label: u16,
    pub gt_voxels: usize,
    /// Predicted instance covering more than half of the ground truth.
    pub pred_label: Option<u16>,
    pub overlap: usize,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id: String,
    pub iou: f64,
    pub seg: f64,
    pub mucov: f64,
    pub per_instance: Vec<InstanceMatch>,
}

/// Aggregate CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub iou: f64,
    pub seg: f64,
    pub mucov: f64,
    pub gt_instances: usize,
    pub pred_instances: usize,
}

impl EvalReport {
    /// Scores `pred` against `gt`; the foreground for IoU is the nonzero set
    /// of each label map.
    pub fn new(id: &str, pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        Self::with_foreground(id, pred, pred, gt)
    }

    /// As [`EvalReport::new`] with IoU taken on a separate predicted
    /// foreground mask.
    pub fn with_foreground(id: &str, pred_fg: &LabelMap, pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        let o = Overlaps::new(pred, gt)?;
        let per_instance = o
            .gt_sizes
            .iter()
            .map(|(&g, &size)| {
                let pred_label = o.covering(g);
                InstanceMatch {
                    gt_label: g,
                    gt_voxels: size,
                    pred_label,
                    overlap: pred_label.map_or(0, |p| o.shared[&(g, p)]),
                    jaccard: pred_label.map_or(0.0, |p| o.jaccard(g, p)),
                }
            })
            .collect();
        Ok(Self {
            id: id.to_string(),
            iou: iou(pred_fg, gt)?,
            seg: seg_from(&o),
            mucov: mucov_from(&o),
            per_instance,
        })
    }

    pub fn row(&self, pred_instances: usize) -> ReportRow {
        ReportRow {
            id: self.id.clone(),
            iou: self.iou,
            seg: self.seg,
            mucov: self.mucov,
            gt_instances: self.per_instance.len(),
            pred_instances,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean of each score over the rows, labelled `mean`.
pub fn mean_row(rows: &[ReportRow]) -> ReportRow {
    let n = rows.len().max(1) as f64;
    ReportRow {
        id: "mean".into(),
        iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        seg: rows.iter().map(|r| r.seg).sum::<f64>() / n,
        mucov: rows.iter().map(|r| r.mucov).sum::<f64>() / n,
        gt_instances: rows.iter().map(|r| r.gt_instances).sum(),
        pred_instances: rows.iter().map(|r| r.pred_instances).sum(),
    }
}

pub fn write_rows(rows: &[ReportRow], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn line(values: &[u16]) -> LabelMap {
        Volume::new([1, 1, values.len()], [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let gt = line(&[1; 100]);
        let half: Vec<u16> = (0..100).map(|i| u16::from(i < 50)).collect();
        assert_eq!(iou(&line(&half), &gt).unwrap(), 0.5);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(iou(&line(&[0, 1]), &line(&[1, 0])).unwrap(), 0.0);
        assert_eq!(iou(&line(&[0, 0]), &line(&[0, 0])).unwrap(), 1.0);
        assert!(iou(&line(&[0]), &line(&[0, 0])).is_err());
    }

    #[test]
    fn seg_coverage_gate() {
        let gt = line(&[1; 100]);
        let pred: Vec<u16> = (0..100).map(|i| u16::from(i < 40)).collect();
        assert_eq!(seg_score(&line(&pred), &gt).unwrap(), 0.0);
        let mut gt120 = vec![1u16; 100];
        gt120.extend([0; 20]);
        let pred120 = vec![1u16; 120];
        let s = seg_score(&line(&pred120), &line(&gt120)).unwrap();
        assert!((s - 100.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn mucov_spurious_and_fused() {
        let gt = line(&[1, 1, 0, 0]);
        assert_eq!(mucov_score(&line(&[1, 1, 2, 2]), &gt).unwrap(), 0.5);
        let gt2 = line(&[1, 1, 2, 2]);
        assert_eq!(mucov_score(&line(&[1, 1, 1, 1]), &gt2).unwrap(), 0.5);
        assert_eq!(mucov_score(&line(&[0, 0]), &line(&[0, 1])).unwrap(), 0.0);
        assert_eq!(mucov_score(&line(&[0, 0]), &line(&[0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn perfect_report() {
        let x = line(&[0, 3, 3, 7, 7, 7]);
        let r = EvalReport::new("x", &x, &x).unwrap();
        assert_eq!((r.iou, r.seg, r.mucov), (1.0, 1.0, 1.0));
        assert_eq!(r.per_instance.len(), 2);
        assert_eq!(r.per_instance[1].pred_label, Some(7));
        assert_eq!(r.row(2).gt_instances, 2);
    }
}
