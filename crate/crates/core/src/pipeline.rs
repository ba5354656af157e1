//! Stage runners. Each stage reads its inputs from disk, writes its
//! artifacts next to the dataset, and fails with a pipeline-order error when
//! an upstream artifact is missing.

use std::fs;
use std::path::{Path, PathBuf};

use crate::annotations::read_centroids;
use crate::centermap::build_center_map;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::instancer::{assign_instances, foreground_mask};
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::metrics::{mean_row, write_rows, EvalReport, ReportRow};
use crate::net::checkpoint::LOSS_FILE;
use crate::net::train::{center_crop_z, write_loss_history, TrainOutcome};
use crate::net::{load_stage, save_model, train, Objective, Stage, Target, TrainSample, UNet};
use crate::prm::{build_pseudo_labels, detect_peaks, PeakSet, PseudoLabelSet};
use crate::refine::BoundaryLoss;
use crate::volume::{read_volume, write_volume, LabelMap, Volume};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

pub fn centermap_path(m: &DatasetManifest, cfg: &PipelineConfig, id: &str) -> PathBuf {
    m.resolve(&cfg.paths.centermaps).join(format!("{id}.vol"))
}

pub fn pseudo_label_path(m: &DatasetManifest, cfg: &PipelineConfig, id: &str) -> PathBuf {
    m.resolve(&cfg.paths.pseudo_labels).join(format!("{id}.vol"))
}

pub fn sidecar_path(m: &DatasetManifest, cfg: &PipelineConfig, id: &str) -> PathBuf {
    m.resolve(&cfg.paths.pseudo_labels).join(format!("{id}.peaks.json"))
}

pub fn default_model_dir(m: &DatasetManifest, cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    let name = match stage {
        Stage::S1 => "s1",
        Stage::S2 => "s2",
    };
    m.resolve(&cfg.paths.models).join(name)
}

pub fn default_prediction_dir(m: &DatasetManifest, cfg: &PipelineConfig) -> PathBuf {
    m.resolve(&cfg.paths.predictions)
}

/// Output files of [`write_inference`] for a volume stem.
pub struct PredictionPaths {
    pub foreground: PathBuf,
    pub likelihood: PathBuf,
    pub instances: PathBuf,
}

pub fn prediction_paths(dir: &Path, stem: &str) -> PredictionPaths {
    PredictionPaths {
        foreground: dir.join(format!("{stem}_fg.vol")),
        likelihood: dir.join(format!("{stem}_likelihood.vol")),
        instances: dir.join(format!("{stem}_instances.vol")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))
}

pub fn load_image(m: &DatasetManifest, entry: &ManifestEntry) -> Result<Volume<f32>> {
    Ok(read_volume(m.resolve(&entry.volume))?.into_f32())
}

fn require(path: &Path, what: &str, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::missing(format!("{what} {} (run `{stage}` first)", path.display())))
    }
}

/// Writes the centre-likelihood target of every entry. Returns the count.
pub fn run_centermap(m: &DatasetManifest, cfg: &PipelineConfig) -> Result<usize> {
    create_dir(&m.resolve(&cfg.paths.centermaps))?;
    for entry in &m.entries {
        let image = read_volume(m.resolve(&entry.volume))?;
        let spacing = image.spacing();
        let centroids = read_centroids(m.resolve(&entry.centroids))?;
        let anisotropy = cfg.centermap.resolve_anisotropy(spacing);
        let map = build_center_map(image.dims(), &centroids, &cfg.centermap, anisotropy)?.with_spacing(spacing);
        write_volume(&map, centermap_path(m, cfg, &entry.id))?;
    }
    Ok(m.entries.len())
}

fn crop<T: crate::volume::Element>(v: &Volume<T>, slices: Option<usize>) -> Volume<T> {
    match slices {
        Some(s) => center_crop_z(v, s),
        None => v.clone(),
    }
}

pub fn s1_samples(m: &DatasetManifest, cfg: &PipelineConfig, split: Split) -> Result<Vec<TrainSample>> {
    m.split(split)
        .map(|entry| {
            let path = centermap_path(m, cfg, &entry.id);
            require(&path, "centre map", "centermap")?;
            let target = read_volume(&path)?.into_f32().to_f64();
            let image = load_image(m, entry)?;
            Ok(TrainSample {
                id: entry.id.clone(),
                image: crop(&image, cfg.train_s1.crop_slices),
                target: Target::Likelihood(crop(&target, cfg.train_s1.crop_slices)),
            })
        })
        .collect()
}

fn save_outcome(outcome: &TrainOutcome, out_dir: &Path) -> Result<()> {
    save_model(&outcome.model, out_dir)?;
    write_loss_history(&outcome.history, out_dir.join(LOSS_FILE))
}

pub fn run_train_s1(m: &DatasetManifest, cfg: &PipelineConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let train_set = s1_samples(m, cfg, Split::Train)?;
    let val_set = s1_samples(m, cfg, Split::Validation)?;
    let outcome = train(
        &train_set,
        &val_set,
        &cfg.net,
        &cfg.train_s1,
        &Objective::S1(cfg.s1_loss.clone()),
    )?;
    save_outcome(&outcome, out_dir)?;
    Ok(outcome)
}

/// Peaks of the stage-one likelihood used for both pseudo labels and
/// instance seeds.
pub fn likelihood_peaks(likelihood: &Volume<f32>, cfg: &PipelineConfig) -> PeakSet {
    detect_peaks(likelihood, cfg.prm.peak_threshold, cfg.prm.min_separation)
}

pub fn pseudo_labels_for(
    s1: &UNet,
    id: &str,
    image: &Volume<f32>,
    cfg: &PipelineConfig,
) -> Result<PseudoLabelSet> {
    let likelihood = s1.predict_likelihood(image)?;
    let peaks = likelihood_peaks(&likelihood, cfg);
    if peaks.is_empty() {
        log::warn!("{id}: no likelihood peaks, pseudo label is empty");
    }
    build_pseudo_labels(id, s1, image, &peaks, &cfg.prm)
}

/// Writes pseudo labels and peak sidecars for every entry.
pub fn run_prm(m: &DatasetManifest, cfg: &PipelineConfig, s1_dir: &Path) -> Result<usize> {
    let s1 = load_stage(s1_dir, Stage::S1)?;
    create_dir(&m.resolve(&cfg.paths.pseudo_labels))?;
    for entry in &m.entries {
        let image = load_image(m, entry)?;
        let labels = pseudo_labels_for(&s1, &entry.id, &image, cfg)?;
        log::info!(
            "{}: {} peaks, {} pseudo-foreground voxels",
            entry.id,
            labels.peaks.len(),
            labels.foreground.data().iter().filter(|&&v| v != 0).count()
        );
        labels.save(&pseudo_label_path(m, cfg, &entry.id), &sidecar_path(m, cfg, &entry.id))?;
    }
    Ok(m.entries.len())
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    Ok(read_volume(path)?.into_labels().map(|v| v.min(1)))
}

pub fn s2_samples(m: &DatasetManifest, cfg: &PipelineConfig, split: Split) -> Result<Vec<TrainSample>> {
    let slices = cfg.train_s2.crop_slices;
    m.split(split)
        .map(|entry| {
            let path = pseudo_label_path(m, cfg, &entry.id);
            require(&path, "pseudo label", "prm")?;
            let label = crop(&read_mask(&path)?, slices).to_f64();
            let image = crop(&load_image(m, entry)?, slices);
            let boundary = if cfg.refine.lambda_refine > 0.0 {
                Some(BoundaryLoss::new(&image.to_f64(), &cfg.refine)?)
            } else {
                None
            };
            Ok(TrainSample {
                id: entry.id.clone(),
                image,
                target: Target::Pseudo { label, boundary },
            })
        })
        .collect()
}

pub fn run_train_s2(
    m: &DatasetManifest,
    cfg: &PipelineConfig,
    s1_dir: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    // The stage-one model must precede its pseudo labels.
    load_stage(s1_dir, Stage::S1)?;
    let train_set = s2_samples(m, cfg, Split::Train)?;
    let val_set = s2_samples(m, cfg, Split::Validation)?;
    let outcome = train(
        &train_set,
        &val_set,
        &cfg.net,
        &cfg.train_s2,
        &Objective::S2 {
            lambda_refine: cfg.refine.lambda_refine,
        },
    )?;
    save_outcome(&outcome, out_dir)?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub likelihood: Volume<f32>,
    pub foreground: LabelMap,
    pub peaks: PeakSet,
    pub instances: LabelMap,
}

pub fn infer(s1: &UNet, s2: &UNet, image: &Volume<f32>, cfg: &PipelineConfig) -> Result<Inference> {
    let likelihood = s1.predict_likelihood(image)?;
    let classes = s2.predict_classes(image)?;
    let foreground = foreground_mask(&classes, cfg.instancer.foreground_rule)?;
    let peaks = likelihood_peaks(&likelihood, cfg);
    let instances = match assign_instances(&foreground, &likelihood, &peaks, &cfg.instancer) {
        Err(Error::NoMarkers) => {
            log::warn!("foreground without likelihood peaks; no instances assigned");
            foreground.map(|_| 0u16)
        }
        other => other?,
    };
    Ok(Inference {
        likelihood,
        foreground,
        peaks,
        instances,
    })
}

pub fn write_inference(inf: &Inference, out_dir: &Path, stem: &str) -> Result<PredictionPaths> {
    create_dir(out_dir)?;
    let paths = prediction_paths(out_dir, stem);
    write_volume(&inf.foreground.map(|v| v.min(1) as u8), &paths.foreground)?;
    write_volume(&inf.likelihood, &paths.likelihood)?;
    write_volume(&inf.instances, &paths.instances)?;
    Ok(paths)
}

/// Runs inference on the entries of `split` (all entries when `None`).
pub fn run_infer_manifest(
    m: &DatasetManifest,
    cfg: &PipelineConfig,
    s1_dir: &Path,
    s2_dir: &Path,
    out_dir: &Path,
    split: Option<Split>,
) -> Result<usize> {
    let s1 = load_stage(s1_dir, Stage::S1)?;
    let s2 = load_stage(s2_dir, Stage::S2)?;
    let mut n = 0;
    for entry in m.entries.iter().filter(|e| split.map_or(true, |s| e.split == s)) {
        let inf = infer(&s1, &s2, &load_image(m, entry)?, cfg)?;
        write_inference(&inf, out_dir, &entry.id)?;
        n += 1;
    }
    Ok(n)
}

pub fn run_infer_volume(
    cfg: &PipelineConfig,
    s1_dir: &Path,
    s2_dir: &Path,
    volume: &Path,
    out_dir: &Path,
) -> Result<PredictionPaths> {
    let s1 = load_stage(s1_dir, Stage::S1)?;
    let s2 = load_stage(s2_dir, Stage::S2)?;
    let image = read_volume(volume)?.into_f32();
    let stem = volume
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("cannot derive a name from {}", volume.display())))?;
    write_inference(&infer(&s1, &s2, &image, cfg)?, out_dir, stem)
}

fn ground_truth(m: &DatasetManifest, entry: &ManifestEntry) -> Result<LabelMap> {
    let rel = entry
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("entry {} has no ground truth", entry.id)))?;
    Ok(read_volume(m.resolve(rel))?.into_labels())
}

/// Scores the predictions in `pred_dir` for every validation entry and
/// writes `eval.csv` (one row per entry plus the mean) and `eval.json`.
pub fn run_eval(m: &DatasetManifest, pred_dir: &Path) -> Result<(Vec<EvalReport>, ReportRow)> {
    let entries: Vec<&ManifestEntry> = m.validation().collect();
    if entries.is_empty() {
        return Err(Error::Argument("manifest has no validation entries".into()));
    }
    let missing: Vec<String> = entries
        .iter()
        .flat_map(|e| {
            let p = prediction_paths(pred_dir, &e.id);
            [p.foreground, p.instances]
        })
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::missing(format!(
            "predictions (run `infer` first): {}",
            missing.join(", ")
        )));
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for entry in entries {
        let p = prediction_paths(pred_dir, &entry.id);
        let fg = read_mask(&p.foreground)?;
        let instances = read_volume(&p.instances)?.into_labels();
        let gt = ground_truth(m, entry)?;
        let report = EvalReport::with_foreground(&entry.id, &fg, &instances, &gt)?;
        let pred_count = {
            let mut labels: Vec<u16> = instances.data().iter().copied().filter(|&v| v != 0).collect();
            labels.sort_unstable();
            labels.dedup();
            labels.len()
        };
        rows.push(report.row(pred_count));
        reports.push(report);
    }
    let mean = mean_row(&rows);
    let mut all = rows;
    all.push(mean.clone());
    write_rows(&all, &pred_dir.join(EVAL_CSV))?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    let path = pred_dir.join(EVAL_JSON);
    fs::write(&path, json).map_err(|e| Error::storage(&path, e))?;
    Ok((reports, mean))
}
