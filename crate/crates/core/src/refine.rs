//! Image-guided boundary refinement loss.
//!
//! The loss is the mean over voxels of `|grad G(S, sigma1)| * w`, where the
//! weight `w = exp(-|R|^p)` is small wherever the image response `R` is
//! strong. `R` is the Laplacian of the smoothed image for bright-field data
//! and its gradient magnitude for fluorescence data. Mask edges placed on
//! strong image responses are therefore cheap, while image structure without
//! a matching mask edge costs nothing.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::filters::{
    axis_difference, axis_difference_adjoint, gaussian_smooth, gaussian_smooth_adjoint,
    gradient_magnitude, laplacian,
};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Bright-field: Laplacian of Gaussian.
    #[serde(alias = "bf")]
    Laplacian,
    /// Fluorescence: gradient magnitude of the smoothed image.
    #[serde(alias = "fl")]
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseNormalization {
    PerVolumeMax,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineLossParams {
    pub mode: RefineMode,
    pub lambda_refine: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub p_norm: f64,
    pub image_response_normalization: ResponseNormalization,
}

impl Default for RefineLossParams {
    fn default() -> Self {
        Self {
            mode: RefineMode::Laplacian,
            lambda_refine: 1.0,
            sigma1: 3.0,
            sigma2: 3.0,
            p_norm: 2.0,
            image_response_normalization: ResponseNormalization::PerVolumeMax,
        }
    }
}

impl RefineLossParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config("refine", key, msg));
        if !(self.sigma1 > 0.0) {
            return bad("sigma1", "must be > 0");
        }
        if !(self.sigma2 > 0.0) {
            return bad("sigma2", "must be > 0");
        }
        if !(self.p_norm >= 1.0) {
            return bad("p_norm", "must be >= 1");
        }
        if !(self.lambda_refine >= 0.0) {
            return bad("lambda_refine", "must be >= 0");
        }
        Ok(())
    }
}

/// Image response `R` before normalization.
pub fn image_response(image: &Volume<f64>, params: &RefineLossParams) -> Volume<f64> {
    let smoothed = gaussian_smooth(image, params.sigma2);
    match params.mode {
        RefineMode::Laplacian => laplacian(&smoothed),
        RefineMode::Gradient => gradient_magnitude(&smoothed),
    }
}

/// Responses below this are treated as numerically zero when normalizing.
const RESPONSE_FLOOR: f64 = 1e-9;

/// Per-voxel weight `exp(-|R|^p)`. An all-zero response gives `w = 1`.
pub fn weight_field(image: &Volume<f64>, params: &RefineLossParams) -> Volume<f64> {
    let response = image_response(image, params);
    let scale = match params.image_response_normalization {
        ResponseNormalization::PerVolumeMax => {
            let m = response.data().iter().fold(0.0f64, |m, r| m.max(r.abs()));
            if m > RESPONSE_FLOOR {
                1.0 / m
            } else {
                0.0
            }
        }
        ResponseNormalization::None => 1.0,
    };
    response.map(|r| (-(r * scale).abs().powf(params.p_norm)).exp())
}

/// The mask-dependent factor `|grad G(S, sigma1)|`.
pub fn edge_strength(mask: &Volume<f64>, sigma1: f64) -> Volume<f64> {
    gradient_magnitude(&gaussian_smooth(mask, sigma1))
}

/// Boundary loss with the image weight precomputed, reusable across
/// training steps on the same image.
#[derive(Clone, Debug)]
pub struct BoundaryLoss {
    weights: Volume<f64>,
    sigma1: f64,
}

impl BoundaryLoss {
    pub fn new(image: &Volume<f64>, params: &RefineLossParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            weights: weight_field(image, params),
            sigma1: params.sigma1,
        })
    }

    pub fn from_weights(weights: Volume<f64>, sigma1: f64) -> Self {
        Self { weights, sigma1 }
    }

    pub fn weights(&self) -> &Volume<f64> {
        &self.weights
    }

    pub fn value(&self, mask: &Volume<f64>) -> Result<f64> {
        ensure_same_dims("boundary_loss", mask.dims(), self.weights.dims())?;
        let edges = edge_strength(mask, self.sigma1);
        let total: f64 = edges
            .data()
            .iter()
            .zip(self.weights.data())
            .map(|(e, w)| e * w)
            .sum();
        Ok(total / mask.len() as f64)
    }

    /// Loss and its gradient with respect to the mask.
    pub fn value_and_grad(&self, mask: &Volume<f64>) -> Result<(f64, Volume<f64>)> {
        ensure_same_dims("boundary_loss", mask.dims(), self.weights.dims())?;
        let n = mask.len() as f64;
        let smoothed = gaussian_smooth(mask, self.sigma1);
        let diffs = [0, 1, 2].map(|a| axis_difference(&smoothed, a));
        let mut loss = 0.0;
        let mut coeff = vec![0.0; mask.len()];
        for (i, c) in coeff.iter_mut().enumerate() {
            let d = [diffs[0].data()[i], diffs[1].data()[i], diffs[2].data()[i]];
            let m = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let w = self.weights.data()[i];
            loss += m * w;
            // subgradient 0 where the magnitude vanishes
            if m > 0.0 {
                *c = w / (n * m);
            }
        }
        let mut grad_smoothed = vec![0.0; mask.len()];
        for (a, d) in diffs.iter().enumerate() {
            let upstream = d.with_data(
                d.data()
                    .iter()
                    .zip(&coeff)
                    .map(|(di, ci)| di * ci)
                    .collect(),
            );
            let back = axis_difference_adjoint(&upstream, a);
            for (g, b) in grad_smoothed.iter_mut().zip(back.data()) {
                *g += b;
            }
        }
        let grad = gaussian_smooth_adjoint(&mask.with_data(grad_smoothed), self.sigma1);
        Ok((loss / n, grad))
    }
}

/// One-shot evaluation for a soft mask `S` against image `I`.
pub fn boundary_loss(
    mask: &Volume<f64>,
    image: &Volume<f64>,
    params: &RefineLossParams,
) -> Result<f64> {
    ensure_same_dims("boundary_loss", mask.dims(), image.dims())?;
    BoundaryLoss::new(image, params)?.value(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_mask_costs_nothing() {
        let image = Volume::from_fn([4, 8, 8], |z, y, x| ((z * 7 + y * 3 + x) % 5) as f64 / 5.0);
        for mode in [RefineMode::Laplacian, RefineMode::Gradient] {
            let params = RefineLossParams {
                mode,
                ..Default::default()
            };
            let mask = Volume::filled([4, 8, 8], 0.7);
            assert_eq!(boundary_loss(&mask, &image, &params).unwrap(), 0.0);
        }
    }

    #[test]
    fn flat_image_gives_unit_weight() {
        let image = Volume::filled([4, 8, 8], 0.3);
        let params = RefineLossParams::default();
        assert!(weight_field(&image, &params).data().iter().all(|&w| w == 1.0));
        let mask = Volume::from_fn([4, 8, 8], |_, _, x| f64::from(x >= 4));
        let loss = boundary_loss(&mask, &image, &params).unwrap();
        let expected = edge_strength(&mask, 3.0).data().iter().sum::<f64>() / 256.0;
        assert!(loss > 0.0);
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let err = boundary_loss(
            &Volume::zeros([2, 2, 2]),
            &Volume::zeros([2, 2, 3]),
            &RefineLossParams::default(),
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn invalid_params() {
        let params = RefineLossParams {
            p_norm: 0.5,
            ..Default::default()
        };
        assert!(params.validate().is_err());
    }

    #[test]
    fn mode_aliases_parse() {
        #[derive(Deserialize)]
        struct W {
            mode: RefineMode,
        }
        let w: W = toml::from_str("mode = \"fl\"").unwrap();
        assert_eq!(w.mode, RefineMode::Gradient);
    }
}
