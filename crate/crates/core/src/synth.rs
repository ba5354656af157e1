//! Synthetic bright-field-like Z-stacks with known instances.
//!
//! Cells are non-overlapping ellipsoids. Each slice shows, for every cell it
//! cuts, a bright membrane ring around a slightly darker interior, blurred in
//! plane by an amount proportional to the distance from the cell's focal
//! slice.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{write_centroids, CentroidSet};
use crate::error::{Error, Result};
use crate::filters::gaussian_smooth;
use crate::manifest::{split_for_index, DatasetManifest, ManifestEntry};
use crate::volume::{write_volume, Dims, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dims: Dims,
    /// Voxel spacing `[z, y, x]` recorded in the written volumes.
    pub spacing: [f32; 3],
    /// Inclusive range.
    pub cell_count: [usize; 2],
    /// Radius range in voxels, on every axis.
    pub radius: [f64; 2],
    /// Relative per-axis scale jitter of each ellipsoid.
    pub axis_scale_jitter: f64,
    pub defocus_coefficient: f64,
    pub background: f64,
    pub membrane_contrast: f64,
    pub interior_contrast: f64,
    /// Gaussian width of the membrane ring, in voxels.
    pub membrane_width: f64,
    pub noise_sigma: f64,
    pub centroid_jitter_sigma: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [16, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            cell_count: [3, 8],
            radius: [3.0, 7.0],
            axis_scale_jitter: 0.3,
            defocus_coefficient: 0.6,
            background: 0.5,
            membrane_contrast: 0.3,
            interior_contrast: -0.1,
            membrane_width: 1.0,
            noise_sigma: 0.03,
            centroid_jitter_sigma: 1.0,
            max_attempts: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config("synth", key, msg));
        if self.dims.iter().any(|&d| d == 0) {
            return bad("dims", "every axis must be >= 1".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing", "must be positive".into());
        }
        let [lo, hi] = self.cell_count;
        if lo == 0 || hi < lo {
            return bad("cell_count", "need 1 <= min <= max".into());
        }
        let [rlo, rhi] = self.radius;
        if !(rlo >= 1.0 && rhi >= rlo) {
            return bad("radius", "need 1 <= min <= max".into());
        }
        if !(0.0..1.0).contains(&self.axis_scale_jitter) {
            return bad("axis_scale_jitter", "must lie in [0, 1)".into());
        }
        let extent = rhi * (1.0 + self.axis_scale_jitter);
        let plane = self.dims[1].min(self.dims[2]) as f64;
        if 2.0 * extent > plane - 1.0 {
            return bad(
                "radius",
                format!("largest cell ({extent:.2} voxels) does not fit in-plane ({plane} voxels)"),
            );
        }
        for (key, v) in [
            ("defocus_coefficient", self.defocus_coefficient),
            ("membrane_width", self.membrane_width),
            ("noise_sigma", self.noise_sigma),
            ("centroid_jitter_sigma", self.centroid_jitter_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be finite and >= 0".into());
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts", "must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub centre: [f64; 3],
    /// Semi-axes `[z, y, x]` in voxels.
    pub axes: [f64; 3],
}

impl Cell {
    fn normalized_radius2(&self, z: f64, y: f64, x: f64) -> f64 {
        let p = [z, y, x];
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.axes[a]).powi(2)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Volume<f32>,
    pub gt_instances: LabelMap,
    pub gt_centroids: CentroidSet,
    pub annotations: CentroidSet,
    pub cells: Vec<Cell>,
}

/// Blur width of a cell's contribution to slice `z`.
pub fn defocus_sigma(cfg: &SynthConfig, z: usize, cell_z: f64) -> f64 {
    cfg.defocus_coefficient * (z as f64 - cell_z).abs()
}

fn place_cells(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Cell>, LabelMap) {
    let dims = cfg.dims;
    let target = rng.gen_range(cfg.cell_count[0]..=cfg.cell_count[1]);
    let mut labels = LabelMap::zeros(dims).with_spacing(cfg.spacing);
    let mut cells = Vec::with_capacity(target);
    let jitter = cfg.axis_scale_jitter;
    'cells: for _ in 0..target {
        for _ in 0..cfg.max_attempts {
            let r = rng.gen_range(cfg.radius[0]..=cfg.radius[1]);
            let mut scale = || 1.0 + if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
            let axes = [r * scale(), r * scale(), r * scale()];
            let mut centre = [0.0; 3];
            for a in 0..3 {
                let hi = (dims[a] - 1) as f64;
                let margin = axes[a].min(hi / 2.0);
                centre[a] = if hi - margin > margin { rng.gen_range(margin..=hi - margin) } else { hi / 2.0 };
            }
            let cell = Cell { centre, axes };
            let (lo, hi) = bbox(&cell, dims);
            let mut voxels = Vec::new();
            let mut free = true;
            'scan: for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        if cell.normalized_radius2(z as f64, y as f64, x as f64) <= 1.0 {
                            if labels.get(z, y, x) != 0 {
                                free = false;
                                break 'scan;
                            }
                            voxels.push(labels.index(z, y, x));
                        }
                    }
                }
            }
            let c = cell.centre.map(|v| v.round() as usize);
            if free && cell.normalized_radius2(c[0] as f64, c[1] as f64, c[2] as f64) <= 1.0 {
                let label = cells.len() as u16 + 1;
                for i in voxels {
                    labels.data_mut()[i] = label;
                }
                cells.push(cell);
                continue 'cells;
            }
        }
        log::warn!(
            "could not place cell {} of {target} after {} attempts; generating {} cells",
            cells.len() + 1,
            cfg.max_attempts,
            cells.len()
        );
        break;
    }
    (cells, labels)
}

fn bbox(cell: &Cell, dims: Dims) -> ([usize; 3], [usize; 3]) {
    let lo = [0, 1, 2].map(|a| (cell.centre[a] - cell.axes[a]).floor().max(0.0) as usize);
    let hi = [0, 1, 2].map(|a| ((cell.centre[a] + cell.axes[a]).ceil() as usize).min(dims[a] - 1));
    (lo, hi)
}

/// Ring-plus-interior cross-section of `cell` on slice `z`, before blur.
fn cross_section(cfg: &SynthConfig, cell: &Cell, z: usize) -> Option<Volume<f64>> {
    let dz = (z as f64 - cell.centre[0]) / cell.axes[0];
    if dz.abs() >= 1.0 {
        return None;
    }
    let s = (1.0 - dz * dz).sqrt();
    let (ay, ax) = (cell.axes[1] * s, cell.axes[2] * s);
    let r_eff = 0.5 * (ay + ax);
    let w2 = 2.0 * cfg.membrane_width.max(1e-6).powi(2);
    let [_, ny, nx] = cfg.dims;
    Some(Volume::from_fn([1, ny, nx], |_, y, x| {
        let rho = (((y as f64 - cell.centre[1]) / ay).powi(2) + ((x as f64 - cell.centre[2]) / ax).powi(2)).sqrt();
        let d = (rho - 1.0) * r_eff;
        let mut v = cfg.membrane_contrast * (-d * d / w2).exp();
        if rho < 1.0 {
            v += cfg.interior_contrast;
        }
        v
    }))
}

fn render(cfg: &SynthConfig, cells: &[Cell], rng: &mut ChaCha8Rng) -> Volume<f32> {
    let [nz, ny, nx] = cfg.dims;
    let plane = ny * nx;
    let mut image = vec![cfg.background; nz * plane];
    for cell in cells {
        for z in 0..nz {
            let Some(section) = cross_section(cfg, cell, z) else {
                continue;
            };
            let sigma = defocus_sigma(cfg, z, cell.centre[0]);
            let blurred = if sigma > 1e-3 { gaussian_smooth(&section, sigma) } else { section };
            for (dst, v) in image[z * plane..(z + 1) * plane].iter_mut().zip(blurred.data()) {
                *dst += v;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in image.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    let data = image.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Volume::new(cfg.dims, cfg.spacing, data).expect("render geometry")
}

/// Pulls `point` toward `centre` until its nearest voxel carries `label`.
fn clamp_into(labels: &LabelMap, label: u16, centre: [f64; 3], point: [f64; 3]) -> [f64; 3] {
    let dims = labels.dims();
    let at = |t: f64| [0, 1, 2].map(|a| (centre[a] + t * (point[a] - centre[a])).clamp(0.0, (dims[a] - 1) as f64));
    let inside = |p: [f64; 3]| {
        let v = p.map(|c| c.round() as usize);
        labels.get(v[0], v[1], v[2]) == label
    };
    if inside(at(1.0)) {
        return at(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if inside(at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

pub fn generate_sample(cfg: &SynthConfig, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cells, gt_instances) = place_cells(cfg, &mut rng);
    let image = render(cfg, &cells, &mut rng);
    let exact: Vec<[f64; 3]> = cells.iter().map(|c| c.centre).collect();
    let jitter = Normal::new(0.0, cfg.centroid_jitter_sigma).expect("validated sigma");
    let annotated = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = [0, 1, 2].map(|a| c.centre[a] + jitter.sample(&mut rng));
            clamp_into(&gt_instances, i as u16 + 1, c.centre, p)
        })
        .collect();
    Ok(SynthSample {
        image,
        gt_instances,
        gt_centroids: CentroidSet::new(exact),
        annotations: CentroidSet::new(annotated),
        cells,
    })
}

/// Seed of the `index`-th sample of a dataset.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:03}")
}

/// Writes `n` samples under `out_dir` together with `manifest.json`.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("empty dataset: the sample count must be >= 1".into()));
    }
    for sub in ["volumes", "annotations", "ground_truth"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::storage(&d, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = sample_id(i);
        let s = generate_sample(cfg, sample_seed(cfg.seed, i))?;
        let volume = Path::new("volumes").join(format!("{id}.vol"));
        let centroids = Path::new("annotations").join(format!("{id}.json"));
        let gt = Path::new("ground_truth").join(format!("{id}.vol"));
        write_volume(&s.image, out_dir.join(&volume))?;
        write_volume(&s.gt_instances, out_dir.join(&gt))?;
        write_centroids(&s.annotations, out_dir.join(&centroids))?;
        write_centroids(&s.gt_centroids, out_dir.join("ground_truth").join(format!("{id}_centroids.json")))?;
        entries.push(ManifestEntry {
            id,
            volume,
            centroids,
            ground_truth: Some(gt),
            split: split_for_index(i),
        });
    }
    let manifest = DatasetManifest::new(out_dir, entries);
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Split;

    fn contrast(v: &Volume<f32>, z: usize) -> f64 {
        // Sum of squared in-plane differences.
        let [_, ny, nx] = v.dims();
        let mut s = 0.0;
        for y in 0..ny {
            for x in 0..nx - 1 {
                s += (v.get(z, y, x + 1) as f64 - v.get(z, y, x) as f64).powi(2);
            }
        }
        for y in 0..ny - 1 {
            for x in 0..nx {
                s += (v.get(z, y + 1, x) as f64 - v.get(z, y, x) as f64).powi(2);
            }
        }
        s
    }

    #[test]
    fn single_cell_focus() {
        let cfg = SynthConfig {
            cell_count: [1, 1],
            noise_sigma: 0.0,
            ..Default::default()
        };
        let s = generate_sample(&cfg, 3).unwrap();
        assert_eq!(s.gt_instances.max_label(), 1);
        let zc = s.cells[0].centre[0].round() as usize;
        let best = (0..16).max_by(|&a, &b| contrast(&s.image, a).total_cmp(&contrast(&s.image, b))).unwrap();
        assert_eq!(best, zc);
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(&cfg, 9).unwrap(), generate_sample(&cfg, 9).unwrap());
        assert_ne!(generate_sample(&cfg, 9).unwrap().image, generate_sample(&cfg, 10).unwrap().image);
    }

    #[test]
    fn annotations_inside_instances() {
        let cfg = SynthConfig::default();
        for seed in 0..10 {
            let s = generate_sample(&cfg, seed).unwrap();
            let n = s.cells.len();
            assert!((3..=8).contains(&n));
            assert_eq!(s.gt_instances.max_label() as usize, n);
            for (i, p) in s.annotations.points().iter().chain(s.gt_centroids.points()).enumerate() {
                let v = p.map(|c| c.round() as usize);
                assert_eq!(s.gt_instances.get(v[0], v[1], v[2]) as usize, i % n + 1);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crowded_config_reduces_count() {
        let cfg = SynthConfig {
            dims: [4, 12, 12],
            cell_count: [8, 8],
            radius: [4.0, 4.0],
            axis_scale_jitter: 0.0,
            max_attempts: 20,
            ..Default::default()
        };
        let s = generate_sample(&cfg, 1).unwrap();
        assert!(s.cells.len() < 8 && !s.cells.is_empty());
    }

    #[test]
    fn dataset_split_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { dims: [4, 16, 16], radius: [2.0, 3.0], cell_count: [1, 2], ..Default::default() };
        let m = generate_dataset(&cfg, 5, dir.path()).unwrap();
        assert_eq!(m.train().count(), 4);
        assert_eq!(m.split(Split::Validation).count(), 1);
        assert!(DatasetManifest::load(dir.path()).is_ok());
        let err = generate_dataset(&cfg, 0, dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
    }

    #[test]
    fn oversized_radius_rejected() {
        let cfg = SynthConfig { radius: [3.0, 40.0], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
