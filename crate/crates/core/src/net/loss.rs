//! Training objectives for both stages.
//!
//! Stage one regresses the centre likelihood with soft-target binary
//! cross-entropy plus a focal term restricted to near-certain centre voxels.
//! Stage two is two-class cross-entropy against the pseudo label plus the
//! weighted image-guided boundary term on the foreground probability.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::refine::{BoundaryLoss, RefineLossParams};
use crate::volume::Volume;

/// Clamp applied to predictions before taking logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S1LossParams {
    pub lambda_focal: f64,
    pub gamma: f64,
    pub focal_target_threshold: f64,
}

impl Default for S1LossParams {
    fn default() -> Self {
        Self {
            lambda_focal: 1.0,
            gamma: 2.0,
            focal_target_threshold: 0.7,
        }
    }
}

impl S1LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_focal >= 0.0) {
            return Err(Error::config("s1_loss", "lambda_focal", "must be >= 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("s1_loss", "gamma", "must be >= 0"));
        }
        if !(self.focal_target_threshold > 0.0 && self.focal_target_threshold < 1.0) {
            return Err(Error::config(
                "s1_loss",
                "focal_target_threshold",
                "must lie in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// Scalar loss with its named components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// BCE for stage one, cross-entropy for stage two.
    pub data: f64,
    /// Focal term for stage one, boundary term for stage two (unweighted).
    pub aux: f64,
}

fn s1_terms(
    pred: &Volume<f64>,
    target: &Volume<f64>,
    params: &S1LossParams,
    mut grad: Option<&mut [f64]>,
) -> Result<LossTerms> {
    ensure_same_dims("s1_loss", pred.dims(), target.dims())?;
    params.validate()?;
    let n = pred.len() as f64;
    let gated = target
        .data()
        .iter()
        .filter(|&&t| t > params.focal_target_threshold)
        .count();
    let mut bce = 0.0;
    let mut focal = 0.0;
    for (i, (&y_raw, &p)) in pred.data().iter().zip(target.data()).enumerate() {
        let clamped = !(LOG_EPS..=1.0 - LOG_EPS).contains(&y_raw);
        let y = y_raw.clamp(LOG_EPS, 1.0 - LOG_EPS);
        bce -= p * y.ln() + (1.0 - p) * (1.0 - y).ln();
        let mut d = -(p / y - (1.0 - p) / (1.0 - y)) / n;
        if p > params.focal_target_threshold {
            let q = 1.0 - y;
            let nll = -y.ln();
            focal += q.powf(params.gamma) * nll;
            let d_focal = -params.gamma * q.powf(params.gamma - 1.0) * nll - q.powf(params.gamma) / y;
            d += params.lambda_focal * d_focal / gated as f64;
        }
        if let Some(g) = grad.as_deref_mut() {
            g[i] = if clamped { 0.0 } else { d };
        }
    }
    let bce = bce / n;
    let focal = if gated > 0 { focal / gated as f64 } else { 0.0 };
    Ok(LossTerms {
        total: bce + params.lambda_focal * focal,
        data: bce,
        aux: focal,
    })
}

/// Stage-one loss for predictions `pred` in (0, 1).
pub fn s1_loss(pred: &Volume<f64>, target: &Volume<f64>, params: &S1LossParams) -> Result<LossTerms> {
    s1_terms(pred, target, params, None)
}

/// Stage-one loss and its gradient with respect to `pred`.
pub fn s1_loss_grad(
    pred: &Volume<f64>,
    target: &Volume<f64>,
    params: &S1LossParams,
) -> Result<(LossTerms, Volume<f64>)> {
    let mut grad = vec![0.0; pred.len()];
    let terms = s1_terms(pred, target, params, Some(&mut grad))?;
    Ok((terms, pred.with_data(grad)))
}

/// Background/foreground score pair.
pub type ScorePair = [Volume<f64>; 2];

/// Foreground probability of a two-class softmax.
pub fn foreground_probability(scores: &ScorePair) -> Volume<f64> {
    let data = scores[0]
        .data()
        .iter()
        .zip(scores[1].data())
        .map(|(&b, &f)| 1.0 / (1.0 + (b - f).exp()))
        .collect();
    scores[0].with_data(data)
}

fn s2_terms(
    scores: &ScorePair,
    pseudo: &Volume<f64>,
    boundary: Option<(&BoundaryLoss, f64)>,
    want_grad: bool,
) -> Result<(LossTerms, Option<ScorePair>)> {
    ensure_same_dims("s2_loss", scores[0].dims(), scores[1].dims())?;
    ensure_same_dims("s2_loss", scores[0].dims(), pseudo.dims())?;
    let n = pseudo.len() as f64;
    let fg = foreground_probability(scores);
    let mut ce = 0.0;
    let mut g_fg = vec![0.0; pseudo.len()];
    for (i, (&s0, &s1)) in scores[0].data().iter().zip(scores[1].data()).enumerate() {
        let y = pseudo.data()[i];
        let m = s0.max(s1);
        let lse = m + ((s0 - m).exp() + (s1 - m).exp()).ln();
        ce -= y * (s1 - lse) + (1.0 - y) * (s0 - lse);
        // d/ds1 of the mean cross-entropy; d/ds0 is its negative
        g_fg[i] = (fg.data()[i] - y) / n;
    }
    let ce = ce / n;
    let mut terms = LossTerms {
        total: ce,
        data: ce,
        aux: 0.0,
    };
    if let Some((loss, lambda)) = boundary {
        if want_grad {
            let (value, g_mask) = loss.value_and_grad(&fg)?;
            terms.aux = value;
            // chain through p = sigmoid(s1 - s0)
            for (i, g) in g_fg.iter_mut().enumerate() {
                let p = fg.data()[i];
                *g += lambda * g_mask.data()[i] * p * (1.0 - p);
            }
        } else {
            terms.aux = loss.value(&fg)?;
        }
        terms.total = ce + lambda * terms.aux;
    }
    let grads = want_grad.then(|| {
        let neg = g_fg.iter().map(|g| -g).collect();
        [pseudo.with_data(neg), pseudo.with_data(g_fg)]
    });
    Ok((terms, grads))
}

/// Stage-two loss for a score pair against a binary pseudo label, guided by
/// `image`. A zero `lambda_refine` leaves plain cross-entropy.
pub fn s2_loss(
    scores: &ScorePair,
    pseudo: &Volume<f64>,
    image: &Volume<f64>,
    refine: &RefineLossParams,
) -> Result<LossTerms> {
    ensure_same_dims("s2_loss", image.dims(), pseudo.dims())?;
    if refine.lambda_refine == 0.0 {
        return Ok(s2_terms(scores, pseudo, None, false)?.0);
    }
    let boundary = BoundaryLoss::new(image, refine)?;
    Ok(s2_terms(scores, pseudo, Some((&boundary, refine.lambda_refine)), false)?.0)
}

/// Stage-two loss with a precomputed boundary term; returns gradients for
/// both score channels.
pub fn s2_loss_grad(
    scores: &ScorePair,
    pseudo: &Volume<f64>,
    boundary: Option<(&BoundaryLoss, f64)>,
) -> Result<(LossTerms, ScorePair)> {
    let boundary = boundary.filter(|(_, lambda)| *lambda != 0.0);
    let (terms, grads) = s2_terms(scores, pseudo, boundary, true)?;
    Ok((terms, grads.expect("requested")))
}
