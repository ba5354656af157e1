//! Inference helpers: padding to the network grid, output squashing, and the
//! input-gradient used for peak response maps.

use super::tensor::Tensor;
use super::unet::{sigmoid, Propagation, Stage, UNet};
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Volume};

/// Symmetric zero padding up to the next multiple of `granularity`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub original: Dims,
    pub padded: Dims,
    pub before: [usize; 3],
}

impl Padding {
    pub fn new(original: Dims, granularity: usize) -> Self {
        let padded = original.map(|d| d.div_ceil(granularity) * granularity);
        let before = [0, 1, 2].map(|a| (padded[a] - original[a]) / 2);
        Self {
            original,
            padded,
            before,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.original == self.padded
    }

    pub fn pad(&self, t: &Tensor) -> Tensor {
        if self.is_identity() {
            return t.clone();
        }
        let [oz, oy, ox] = self.original;
        let [_, py, px] = self.padded;
        let [bz, by, bx] = self.before;
        let mut out = Tensor::zeros(t.channels, self.padded);
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..oz {
                for y in 0..oy {
                    let s = (z * oy + y) * ox;
                    let d = ((z + bz) * py + y + by) * px + bx;
                    dst[d..d + ox].copy_from_slice(&src[s..s + ox]);
                }
            }
        }
        out
    }

    pub fn crop(&self, t: &Tensor) -> Tensor {
        if self.is_identity() {
            return t.clone();
        }
        let [oz, oy, ox] = self.original;
        let [_, py, px] = self.padded;
        let [bz, by, bx] = self.before;
        let mut out = Tensor::zeros(t.channels, self.original);
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..oz {
                for y in 0..oy {
                    let d = (z * oy + y) * ox;
                    let s = ((z + bz) * py + y + by) * px + bx;
                    dst[d..d + ox].copy_from_slice(&src[s..s + ox]);
                }
            }
        }
        out
    }
}

impl UNet {
    fn padding_for(&self, dims: Dims) -> Padding {
        Padding::new(dims, self.config.granularity())
    }

    /// Logits on the original grid for an arbitrarily sized input.
    pub fn logits(&self, volume: &Volume<f32>) -> Result<Tensor> {
        let pad = self.padding_for(volume.dims());
        let out = self.forward(&pad.pad(&Tensor::from_volume(volume)))?;
        Ok(pad.crop(&out))
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::config(
                "model",
                "stage",
                format!("expected a {stage:?} model, got {:?}", self.stage),
            ));
        }
        Ok(())
    }

    /// Centre likelihood in (0, 1).
    pub fn predict_likelihood(&self, volume: &Volume<f32>) -> Result<Volume<f32>> {
        self.expect_stage(Stage::S1)?;
        let logits = self.logits(volume)?;
        let data = logits.data.iter().map(|&l| sigmoid(l)).collect();
        Ok(volume.with_data(data))
    }

    /// Background and foreground probabilities, summing to one per voxel.
    pub fn predict_classes(&self, volume: &Volume<f32>) -> Result<[Volume<f32>; 2]> {
        self.expect_stage(Stage::S2)?;
        let logits = self.logits(volume)?;
        let fg: Vec<f32> = logits
            .channel(0)
            .iter()
            .zip(logits.channel(1))
            .map(|(&b, &f)| sigmoid(f - b))
            .collect();
        let bg = fg.iter().map(|&p| 1.0 - p).collect();
        Ok([volume.with_data(bg), volume.with_data(fg)])
    }

    /// Gradient of the squashed stage-one output at `voxel` with respect to
    /// every input voxel, backpropagated under `rule`.
    pub fn output_input_gradient(
        &self,
        volume: &Volume<f32>,
        voxel: [usize; 3],
        rule: Propagation,
    ) -> Result<Volume<f32>> {
        self.expect_stage(Stage::S1)?;
        let dims = volume.dims();
        if (0..3).any(|a| voxel[a] >= dims[a]) {
            return Err(Error::Argument(format!(
                "voxel {voxel:?} outside {dims:?}"
            )));
        }
        let pad = self.padding_for(dims);
        let input = pad.pad(&Tensor::from_volume(volume));
        let p = [0, 1, 2].map(|a| voxel[a] + pad.before[a]);
        let flat = (p[0] * pad.padded[1] + p[1]) * pad.padded[2] + p[2];
        let (_, _, grad) = self.forward_backward_with(&input, true, rule, |logits| {
            let mut g = Tensor::zeros(logits.channels, logits.dims);
            let s = sigmoid(logits.data[flat]);
            g.data[flat] = s * (1.0 - s);
            Ok(g)
        })?;
        let grad = pad.crop(&grad.expect("input gradient requested"));
        debug_assert_eq!(grad.data.len(), voxel_count(dims));
        Ok(volume.with_data(grad.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::unet::NetConfig;

    fn net(stage: Stage) -> UNet {
        let cfg = NetConfig {
            depth: 2,
            base_channels: 2,
            convs_per_level: 1,
            ..Default::default()
        };
        UNet::new(stage, cfg, 1).unwrap()
    }

    #[test]
    fn padding_roundtrip() {
        let pad = Padding::new([5, 6, 7], 4);
        assert_eq!(pad.padded, [8, 8, 8]);
        assert_eq!(pad.before, [1, 1, 0]);
        let mut t = Tensor::zeros(2, [5, 6, 7]);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        assert_eq!(pad.crop(&pad.pad(&t)), t);
    }

    #[test]
    fn odd_input_is_cropped_back() {
        let v = Volume::from_fn([3, 5, 7], |z, y, x| ((z + y + x) % 3) as f32 / 3.0);
        let p = net(Stage::S1).predict_likelihood(&v).unwrap();
        assert_eq!(p.dims(), [3, 5, 7]);
        assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let v = Volume::from_fn([4, 4, 4], |z, y, x| ((z * y + x) % 5) as f32 / 5.0);
        let [bg, fg] = net(Stage::S2).predict_classes(&v).unwrap();
        for (b, f) in bg.data().iter().zip(fg.data()) {
            assert!((b + f - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stage_mismatch_is_config_error() {
        let v = Volume::<f32>::zeros([4, 4, 4]);
        assert!(matches!(
            net(Stage::S2).predict_likelihood(&v),
            Err(Error::Config { .. })
        ));
    }
}
