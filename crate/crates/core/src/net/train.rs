//! Single-worker training loop with Adam, per-epoch loss history and
//! best-validation model selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{s1_loss_grad, s2_loss_grad, LossTerms, S1LossParams};
use super::model::Padding;
use super::optim::Adam;
use super::tensor::Tensor;
use super::unet::{Gradients, NetConfig, Stage, UNet};
use crate::error::{Error, Result};
use crate::refine::BoundaryLoss;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Centered z-window used for training; `None` keeps full stacks.
    pub crop_slices: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-6,
            batch_size: 1,
            max_epochs: 40,
            seed: 0,
            crop_slices: Some(16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(section, key, msg));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size != 1 {
            return bad("batch_size", "only a batch size of 1 is supported");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be >= 1");
        }
        if self.crop_slices == Some(0) {
            return bad("crop_slices", "must be >= 1");
        }
        Ok(())
    }
}

/// Per-sample supervision.
#[derive(Clone, Debug)]
pub enum Target {
    /// Centre likelihood for stage one.
    Likelihood(Volume<f64>),
    /// Binary pseudo label for stage two, with an optional precomputed
    /// boundary term for this sample's image.
    Pseudo {
        label: Volume<f64>,
        boundary: Option<BoundaryLoss>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub image: Volume<f32>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    S1(S1LossParams),
    S2 { lambda_refine: f64 },
}

impl Objective {
    fn stage(&self) -> Stage {
        match self {
            Objective::S1(_) => Stage::S1,
            Objective::S2 { .. } => Stage::S2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub data: f64,
    pub aux: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss on the original grid and its gradient with respect to the logits.
fn loss_and_logit_grad(
    logits: &Tensor,
    sample: &TrainSample,
    objective: &Objective,
) -> Result<(LossTerms, Tensor)> {
    let dims = sample.image.dims();
    match (objective, &sample.target) {
        (Objective::S1(params), Target::Likelihood(target)) => {
            let pred = target.with_data(
                logits
                    .channel(0)
                    .iter()
                    .map(|&l| stable_sigmoid(l as f64))
                    .collect(),
            );
            let (terms, g) = s1_loss_grad(&pred, target, params)?;
            let mut out = Tensor::zeros(1, dims);
            for ((o, &gp), &y) in out.data.iter_mut().zip(g.data()).zip(pred.data()) {
                *o = (gp * y * (1.0 - y)) as f32;
            }
            Ok((terms, out))
        }
        (Objective::S2 { lambda_refine }, Target::Pseudo { label, boundary }) => {
            let to_f64 = |c: usize| label.with_data(logits.channel(c).iter().map(|&v| v as f64).collect());
            let scores = [to_f64(0), to_f64(1)];
            let (terms, grads) = s2_loss_grad(&scores, label, boundary.as_ref().map(|b| (b, *lambda_refine)))?;
            let mut out = Tensor::zeros(2, dims);
            for c in 0..2 {
                for (o, &g) in out.channel_mut(c).iter_mut().zip(grads[c].data()) {
                    *o = g as f32;
                }
            }
            Ok((terms, out))
        }
        _ => Err(Error::Argument(format!(
            "sample {} does not carry a target for {:?}",
            sample.id,
            objective.stage()
        ))),
    }
}

fn sample_step(
    net: &UNet,
    sample: &TrainSample,
    objective: &Objective,
) -> Result<(LossTerms, Gradients)> {
    let pad = Padding::new(sample.image.dims(), net.config.granularity());
    let input = pad.pad(&Tensor::from_volume(&sample.image));
    let mut terms = LossTerms::default();
    let (_, grads, _) = net.forward_backward(&input, false, |logits| {
        let (t, g) = loss_and_logit_grad(&pad.crop(logits), sample, objective)?;
        terms = t;
        Ok(pad.pad(&g))
    })?;
    Ok((terms, grads))
}

fn sample_loss(net: &UNet, sample: &TrainSample, objective: &Objective) -> Result<LossTerms> {
    let logits = net.logits(&sample.image)?;
    Ok(loss_and_logit_grad(&logits, sample, objective)?.0)
}

/// Mean loss of `net` over `samples`.
pub fn evaluate(net: &UNet, samples: &[TrainSample], objective: &Objective) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(net, s, objective)?.total;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn train(
    samples: &[TrainSample],
    validation: &[TrainSample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<TrainOutcome> {
    let stage = objective.stage();
    cfg.validate(match stage {
        Stage::S1 => "train_s1",
        Stage::S2 => "train_s2",
    })?;
    if samples.is_empty() {
        return Err(Error::missing("training samples (empty training split)"));
    }
    let mut net = UNet::new(stage, net_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, UNet)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        for &i in &order {
            let (terms, grads) = sample_step(&net, &samples[i], objective)?;
            if !terms.total.is_finite() {
                return Err(Error::Runtime(format!(
                    "non-finite loss at epoch {epoch} on sample {}",
                    samples[i].id
                )));
            }
            sums.total += terms.total;
            sums.data += terms.data;
            sums.aux += terms.aux;
            adam.step(&mut net, &grads);
        }
        let n = samples.len() as f64;
        let val_loss = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&net, validation, objective)?)
        };
        let record = EpochRecord {
            epoch,
            loss: sums.total / n,
            data: sums.data / n,
            aux: sums.aux / n,
            val_loss,
        };
        log::info!(
            "{stage:?} epoch {epoch}/{}: loss {:.5} (data {:.5}, aux {:.5}) val {:?}",
            cfg.max_epochs,
            record.loss,
            record.data,
            record.aux,
            record.val_loss
        );
        history.push(record);
        if let Some(v) = val_loss {
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, epoch, net.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, epoch, model)) => (model, epoch),
        None => (net, cfg.max_epochs),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

pub fn write_loss_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for record in history {
        w.serialize(record).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::storage(path, e))
}

/// Centered window of `slices` z-planes; stacks that are already small
/// enough are returned unchanged.
pub fn center_crop_z<T: crate::volume::Element>(v: &Volume<T>, slices: usize) -> Volume<T> {
    let [nz, ny, nx] = v.dims();
    if nz <= slices {
        return v.clone();
    }
    let start = (nz - slices) / 2;
    let plane = ny * nx;
    let data = v.data()[start * plane..(start + slices) * plane].to_vec();
    Volume::new([slices, ny, nx], v.spacing(), data).expect("cropped geometry")
}
