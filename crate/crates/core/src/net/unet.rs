//! 3D U-Net with hand-written backpropagation.
//!
//! Each level runs `convs_per_level` 3x3x3 convolutions with leaky ReLU. Levels are
//! joined by 2x max pooling on the way down. On the way up, a 1x1 projection
//! reduces channels, nearest-neighbour upsampling restores resolution, and the
//! result is concatenated with the skip connection. A 1x1 head produces the
//! output logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_backward_guided, relu_forward,
    upsample_backward,
    upsample_forward, Conv3d, ConvGrad,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
}

/// How gradients pass the activations when backpropagating to the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// The exact derivative.
    Gradient,
    /// Guided backpropagation: negative signal and inactive units are cut.
    #[default]
    Guided,
}

impl Stage {
    pub fn out_channels(self) -> usize {
        match self {
            Stage::S1 => 1,
            Stage::S2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Number of 2x downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            depth: 3,
            base_channels: 16,
            convs_per_level: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config("net", key, msg));
        if self.in_channels != 1 {
            return bad("in_channels", "only single-channel input is supported");
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be >= 1");
        }
        if self.convs_per_level == 0 {
            return bad("convs_per_level", "must be >= 1");
        }
        if self.depth > 6 {
            return bad("depth", "must be <= 6");
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Grid extents must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub stage: Stage,
    pub config: NetConfig,
    /// `depth + 1` blocks; the last one is the bottleneck.
    encoders: Vec<Vec<Conv3d>>,
    /// 1x1 projections from level `l + 1` down to level `l` channels.
    ups: Vec<Conv3d>,
    decoders: Vec<Vec<Conv3d>>,
    head: Conv3d,
}

/// Parameter gradients, mirroring [`UNet::params`] order.
pub type Gradients = Vec<ConvGrad>;

struct BlockCache {
    input: Tensor,
    outputs: Vec<Tensor>,
}

struct Cache {
    encoders: Vec<BlockCache>,
    pool_args: Vec<(Vec<u32>, Dims)>,
    up_inputs: Vec<Tensor>,
    decoders: Vec<BlockCache>,
    head_input: Tensor,
}

fn block_forward(convs: &[Conv3d], input: Tensor) -> BlockCache {
    let mut outputs = Vec::with_capacity(convs.len());
    for (j, conv) in convs.iter().enumerate() {
        let src = if j == 0 { &input } else { &outputs[j - 1] };
        let mut h = conv.forward(src);
        relu_forward(&mut h);
        outputs.push(h);
    }
    BlockCache { input, outputs }
}

/// Backpropagates through a block; returns per-conv grads and the gradient
/// with respect to the block input when requested.
fn block_backward(
    convs: &[Conv3d],
    cache: &BlockCache,
    mut grad: Tensor,
    need_input: bool,
    rule: Propagation,
) -> (Vec<ConvGrad>, Option<Tensor>) {
    let mut grads = Vec::with_capacity(convs.len());
    for j in (0..convs.len()).rev() {
        match rule {
            Propagation::Gradient => relu_backward(&cache.outputs[j], &mut grad),
            Propagation::Guided => relu_backward_guided(&cache.outputs[j], &mut grad),
        }
        let input = if j == 0 { &cache.input } else { &cache.outputs[j - 1] };
        let (pg, gin) = convs[j].backward(input, &grad, j > 0 || need_input);
        grads.push(pg);
        match gin {
            Some(g) => grad = g,
            None => {
                grads.reverse();
                return (grads, None);
            }
        }
    }
    grads.reverse();
    (grads, Some(grad))
}

impl UNet {
    /// He-initialized network; the same seed always yields the same weights.
    pub fn new(stage: Stage, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |conv: &mut Conv3d| {
            let fan_in = (conv.in_channels * conv.taps()) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            conv.weight
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng) as f32);
        };
        let mut encoders = Vec::new();
        for level in 0..=config.depth {
            let mut block = Vec::new();
            let mut in_c = if level == 0 {
                config.in_channels
            } else {
                config.channels(level - 1)
            };
            for _ in 0..config.convs_per_level {
                let mut conv = Conv3d::zeros(in_c, config.channels(level), 3);
                init(&mut conv);
                in_c = config.channels(level);
                block.push(conv);
            }
            encoders.push(block);
        }
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for level in 0..config.depth {
            let c = config.channels(level);
            let mut up = Conv3d::zeros(config.channels(level + 1), c, 1);
            init(&mut up);
            ups.push(up);
            let mut block = Vec::new();
            let mut in_c = 2 * c;
            for _ in 0..config.convs_per_level {
                let mut conv = Conv3d::zeros(in_c, c, 3);
                init(&mut conv);
                in_c = c;
                block.push(conv);
            }
            decoders.push(block);
        }
        let mut head = Conv3d::zeros(config.base_channels, stage.out_channels(), 1);
        let normal = Normal::new(0.0, (1.0 / config.base_channels as f64).sqrt()).unwrap();
        head.weight
            .iter_mut()
            .for_each(|w| *w = normal.sample(&mut rng) as f32);
        Ok(Self {
            stage,
            config,
            encoders,
            ups,
            decoders,
            head,
        })
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Conv3d)> {
        let mut out = Vec::new();
        for (l, block) in self.encoders.iter().enumerate() {
            for (j, c) in block.iter().enumerate() {
                out.push((format!("enc{l}.conv{j}"), c));
            }
        }
        for (l, up) in self.ups.iter().enumerate() {
            out.push((format!("up{l}"), up));
        }
        for (l, block) in self.decoders.iter().enumerate() {
            for (j, c) in block.iter().enumerate() {
                out.push((format!("dec{l}.conv{j}"), c));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut out: Vec<&mut Conv3d> = Vec::new();
        for block in self.encoders.iter_mut() {
            out.extend(block.iter_mut());
        }
        out.extend(self.ups.iter_mut());
        for block in self.decoders.iter_mut() {
            out.extend(block.iter_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn head_mut(&mut self) -> &mut Conv3d {
        &mut self.head
    }

    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .map(|(_, c)| c.weight.len() + c.bias.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels != self.config.in_channels {
            return Err(Error::Argument(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, input.channels
            )));
        }
        let g = self.config.granularity();
        if input.dims.iter().any(|&d| d % g != 0) {
            return Err(Error::Argument(format!(
                "input dims {:?} not divisible by {g}",
                input.dims
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, input: &Tensor) -> (Tensor, Cache) {
        let depth = self.config.depth;
        let mut encoders = Vec::with_capacity(depth + 1);
        let mut pool_args = Vec::with_capacity(depth);
        let mut current = input.clone();
        for level in 0..=depth {
            if level > 0 {
                let prev: &BlockCache = &encoders[level - 1];
                let last = prev.outputs.last().expect("non-empty block");
                let (pooled, arg) = maxpool_forward(last);
                pool_args.push((arg, last.dims));
                current = pooled;
            }
            encoders.push(block_forward(&self.encoders[level], current.clone()));
        }
        let mut x = encoders[depth].outputs.last().unwrap().clone();
        let mut up_inputs = vec![Tensor::zeros(0, [1, 1, 1]); depth];
        let mut decoders: Vec<Option<BlockCache>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let projected = self.ups[level].forward(&x);
            up_inputs[level] = x;
            let up = upsample_forward(&projected);
            let skip = encoders[level].outputs.last().unwrap();
            let cat = up.concat(skip);
            let cache = block_forward(&self.decoders[level], cat);
            x = cache.outputs.last().unwrap().clone();
            decoders[level] = Some(cache);
        }
        let logits = self.head.forward(&x);
        (
            logits,
            Cache {
                encoders,
                pool_args,
                up_inputs,
                decoders: decoders.into_iter().map(Option::unwrap).collect(),
                head_input: x,
            },
        )
    }

    /// Raw output logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        Ok(self.forward_cached(input).0)
    }

    /// Forward pass followed by backpropagation of `grad_fn(logits)`.
    ///
    /// Returns the logits, the parameter gradients in [`UNet::params`] order
    /// and, when `need_input` is set, the gradient with respect to the input.
    pub fn forward_backward(
        &self,
        input: &Tensor,
        need_input: bool,
        grad_fn: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Gradients, Option<Tensor>)> {
        self.forward_backward_with(input, need_input, Propagation::Gradient, grad_fn)
    }

    /// [`UNet::forward_backward`] with a choice of activation rule.
    pub fn forward_backward_with(
        &self,
        input: &Tensor,
        need_input: bool,
        rule: Propagation,
        grad_fn: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Gradients, Option<Tensor>)> {
        self.check_input(input)?;
        let depth = self.config.depth;
        let (logits, cache) = self.forward_cached(input);
        let grad_logits = grad_fn(&logits)?;
        assert_eq!(grad_logits.data.len(), logits.data.len(), "grad shape");

        let (head_grad, g) = self.head.backward(&cache.head_input, &grad_logits, true);
        let mut g = g.unwrap();
        let mut dec_grads: Vec<Vec<ConvGrad>> = (0..depth).map(|_| Vec::new()).collect();
        let mut up_grads: Vec<Option<ConvGrad>> = (0..depth).map(|_| None).collect();
        // gradients flowing into each encoder block's output via skips
        let mut skip_grads: Vec<Option<Tensor>> = (0..=depth).map(|_| None).collect();
        for level in 0..depth {
            let (grads, gin) = block_backward(&self.decoders[level], &cache.decoders[level], g, true, rule);
            dec_grads[level] = grads;
            let c_up = self.config.channels(level);
            let (g_up, g_skip) = gin.unwrap().split_channels(c_up);
            skip_grads[level] = Some(g_skip);
            let g_proj = upsample_backward(&g_up);
            let (pg, g_below) = self.ups[level].backward(&cache.up_inputs[level], &g_proj, true);
            up_grads[level] = Some(pg);
            g = g_below.unwrap();
        }
        // g now holds the gradient at the bottleneck output
        let mut enc_grads: Vec<Vec<ConvGrad>> = (0..=depth).map(|_| Vec::new()).collect();
        let mut input_grad = None;
        for level in (0..=depth).rev() {
            if level < depth {
                g.add_assign(skip_grads[level].as_ref().unwrap());
            }
            let need = level > 0 || need_input;
            let (grads, gin) = block_backward(&self.encoders[level], &cache.encoders[level], g, need, rule);
            enc_grads[level] = grads;
            if level > 0 {
                let (arg, dims) = &cache.pool_args[level - 1];
                g = maxpool_backward(&gin.unwrap(), arg, *dims);
            } else {
                input_grad = gin;
                g = Tensor::zeros(0, [1, 1, 1]);
            }
        }
        let _ = g;
        let mut all = Vec::new();
        for grads in enc_grads {
            all.extend(grads);
        }
        all.extend(up_grads.into_iter().map(Option::unwrap));
        for grads in dec_grads {
            all.extend(grads);
        }
        all.push(head_grad);
        Ok((logits, all, input_grad))
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> NetConfig {
        NetConfig {
            in_channels: 1,
            depth: 2,
            base_channels: 2,
            convs_per_level: 1,
        }
    }

    fn random_input(dims: Dims, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(1, dims);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        t
    }

    #[test]
    fn output_keeps_grid() {
        for stage in [Stage::S1, Stage::S2] {
            let net = UNet::new(stage, small(), 0).unwrap();
            let out = net.forward(&random_input([4, 8, 8], 1)).unwrap();
            assert_eq!(out.dims, [4, 8, 8]);
            assert_eq!(out.channels, stage.out_channels());
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = UNet::new(Stage::S1, small(), 0).unwrap();
        assert!(net.forward(&random_input([4, 6, 8], 1)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::new(Stage::S1, small(), 7).unwrap();
        let b = UNet::new(Stage::S1, small(), 7).unwrap();
        let c = UNet::new(Stage::S1, small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    /// Loss = sum(logits * r) for a fixed random r; the gradient of each
    /// parameter and of the input is checked by central differences in f64.
    #[test]
    fn backprop_matches_finite_differences() {
        let mut net = UNet::new(Stage::S2, small(), 3).unwrap();
        // nudge biases so ReLUs are not all active/inactive
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for conv in net.params_mut() {
            conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
        let input = random_input([4, 4, 4], 2);
        let mut r = Tensor::zeros(2, [4, 4, 4]);
        r.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let objective = |net: &UNet, input: &Tensor| -> f64 {
            let out = net.forward(input).unwrap();
            out.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, grads, gin) = net
            .forward_backward(&input, true, |_| Ok(r.clone()))
            .unwrap();
        let h = 1e-3f32;
        let mut checked = 0;
        let n_params = net.params().len();
        for p in 0..n_params {
            for idx in [0usize, 5] {
                let len = net.params()[p].1.weight.len();
                if idx >= len {
                    continue;
                }
                let orig = net.params_mut()[p].weight[idx];
                net.params_mut()[p].weight[idx] = orig + h;
                let up = objective(&net, &input);
                net.params_mut()[p].weight[idx] = orig - h;
                let down = objective(&net, &input);
                net.params_mut()[p].weight[idx] = orig;
                let numeric = (up - down) / (2.0 * h as f64);
                let analytic = grads[p].weight[idx];
                assert!(
                    (numeric - analytic).abs() < 2e-2 * analytic.abs().max(0.05),
                    "param {} idx {idx}: {numeric} vs {analytic}",
                    net.params()[p].0
                );
                checked += 1;
            }
        }
        assert!(checked > 10);
        let gin = gin.unwrap();
        for idx in [0usize, 21, 63] {
            let mut plus = input.clone();
            plus.data[idx] += h;
            let mut minus = input.clone();
            minus.data[idx] -= h;
            let numeric = (objective(&net, &plus) - objective(&net, &minus)) / (2.0 * h as f64);
            let analytic = gin.data[idx] as f64;
            assert!(
                (numeric - analytic).abs() < 2e-2 * analytic.abs().max(0.05),
                "input {idx}: {numeric} vs {analytic}"
            );
        }
    }
}
