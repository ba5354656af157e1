//! Forward and backward kernels for the volumetric layers.
//!
//! Everything here is single-threaded with a fixed summation order, so
//! results are bitwise reproducible.

use super::tensor::Tensor;
use crate::volume::Dims;

/// `dst[p] += sum_k w[k] * src[p + k - 1]` over a 3x3x3 neighbourhood with
/// zero padding.
fn correlate3_accumulate(dst: &mut [f32], src: &[f32], w: &[f32], dims: Dims) {
    let [nz, ny, nx] = dims;
    for z in 0..nz {
        for kz in 0..3 {
            let sz = z as isize + kz as isize - 1;
            if sz < 0 || sz >= nz as isize {
                continue;
            }
            let sz = sz as usize;
            for y in 0..ny {
                let drow = &mut dst[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let srow = &src[(sz * ny + sy) * nx..(sz * ny + sy + 1) * nx];
                    let base = kz * 9 + ky * 3;
                    row_taps(drow, srow, w[base], w[base + 1], w[base + 2]);
                }
            }
        }
    }
}

/// `d[x] += w0 * s[x - 1] + w1 * s[x] + w2 * s[x + 1]`, zero outside.
#[inline]
fn row_taps(d: &mut [f32], s: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = d.len();
    if n == 1 {
        d[0] += w1 * s[0];
        return;
    }
    d[0] += w1 * s[0] + w2 * s[1];
    let mid = &mut d[1..n - 1];
    let a = &s[..n - 2];
    let b = &s[1..n - 1];
    let c = &s[2..];
    for (((dv, &av), &bv), &cv) in mid.iter_mut().zip(a).zip(b).zip(c) {
        *dv += w0 * av + w1 * bv + w2 * cv;
    }
    d[n - 1] += w0 * s[n - 2] + w1 * s[n - 1];
}

/// `out[k] += sum_p g[p] * src[p + k - 1]` for the 27 kernel taps.
///
/// Products are accumulated lane-wise into `scratch` (27 rows of `nx`) and
/// reduced into `out` once per slice.
fn correlate3_weight_grad(out: &mut [f64], g: &[f32], src: &[f32], dims: Dims, scratch: &mut [f32]) {
    let [nz, ny, nx] = dims;
    debug_assert_eq!(scratch.len(), 27 * nx);
    scratch.iter_mut().for_each(|v| *v = 0.0);
    for z in 0..nz {
        for kz in 0..3 {
            let sz = z as isize + kz as isize - 1;
            if sz < 0 || sz >= nz as isize {
                continue;
            }
            let sz = sz as usize;
            for y in 0..ny {
                let grow = &g[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let srow = &src[(sz * ny + sy) * nx..(sz * ny + sy + 1) * nx];
                    let base = (kz * 9 + ky * 3) * nx;
                    let (left, rest) = scratch[base..base + 3 * nx].split_at_mut(nx);
                    let (centre, right) = rest.split_at_mut(nx);
                    // kx = 0 pairs g[x] with s[x - 1]
                    if nx > 1 {
                        mul_acc(&mut left[1..], &grow[1..], &srow[..nx - 1]);
                        mul_acc(&mut right[..nx - 1], &grow[..nx - 1], &srow[1..]);
                    }
                    mul_acc(centre, grow, srow);
                }
            }
        }
        // flush per slice to keep the f32 partial sums short
        for (k, o) in out.iter_mut().enumerate() {
            let lane = &mut scratch[k * nx..(k + 1) * nx];
            *o += lane.iter().map(|&v| v as f64).sum::<f64>();
            lane.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[inline]
fn mul_acc(acc: &mut [f32], a: &[f32], b: &[f32]) {
    for ((s, &x), &y) in acc.iter_mut().zip(a).zip(b) {
        *s += x * y;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // eight independent lanes so the loop vectorizes
    let mut lanes = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            lanes[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(dst: &mut [f32], alpha: f32, src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Convolution with a cubic kernel of size 1 or 3 (zero padding keeps the
/// grid size). Weights are laid out `[out][in][kz][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let taps = kernel * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * taps],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn w(&self, o: usize, i: usize) -> &[f32] {
        let t = self.taps();
        let start = (o * self.in_channels + i) * t;
        &self.weight[start..start + t]
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let mut out = Tensor::zeros(self.out_channels, input.dims);
        for o in 0..self.out_channels {
            let dst = out.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                let w = self.w(o, i);
                if self.kernel == 1 {
                    axpy(dst, w[0], src);
                } else {
                    correlate3_accumulate(dst, src, w, input.dims);
                }
            }
        }
        out
    }

    /// Parameter gradients, plus the input gradient when `need_input`.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        need_input: bool,
    ) -> (ConvGrad, Option<Tensor>) {
        let t = self.taps();
        let mut grad = ConvGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.out_channels],
        };
        let mut scratch = vec![0f32; 27 * input.dims[2]];
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            grad.bias[o] = g.iter().map(|&v| v as f64).sum();
            for i in 0..self.in_channels {
                let src = input.channel(i);
                let start = (o * self.in_channels + i) * t;
                let slot = &mut grad.weight[start..start + t];
                if self.kernel == 1 {
                    slot[0] = g
                        .chunks(4096)
                        .zip(src.chunks(4096))
                        .map(|(a, b)| dot(a, b) as f64)
                        .sum();
                } else {
                    correlate3_weight_grad(slot, g, src, input.dims, &mut scratch);
                }
            }
        }
        let grad_in = need_input.then(|| {
            let mut gi = Tensor::zeros(self.in_channels, input.dims);
            for i in 0..self.in_channels {
                let dst = gi.channel_mut(i);
                for o in 0..self.out_channels {
                    let w = self.w(o, i);
                    let g = grad_out.channel(o);
                    if self.kernel == 1 {
                        axpy(dst, w[0], g);
                    } else {
                        let mut flipped = [0f32; 27];
                        for (k, f) in flipped.iter_mut().enumerate() {
                            *f = w[26 - k];
                        }
                        correlate3_accumulate(dst, g, &flipped, input.dims);
                    }
                }
            }
            gi
        });
        (grad, grad_in)
    }
}

/// Negative-side slope of the activation.
pub const LEAKY_SLOPE: f32 = 0.01;

pub fn relu_forward(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    });
}

/// Scales `grad` where the activation output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Guided-backpropagation rule: only positive signal through positive
/// activations.
pub fn relu_backward_guided(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 || *g < 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2x2 max pooling. Returns the pooled tensor and the flat argmax index
/// (within the input) of each output voxel.
pub fn maxpool_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    let [nz, ny, nx] = input.dims;
    assert!(
        nz % 2 == 0 && ny % 2 == 0 && nx % 2 == 0,
        "pooling needs even dims, got {:?}",
        input.dims
    );
    let od = [nz / 2, ny / 2, nx / 2];
    let mut out = Tensor::zeros(input.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let n_out = out.voxels();
    for c in 0..input.channels {
        let src = input.channel(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let mut best_i = ((2 * z) * ny + 2 * y) * nx + 2 * x;
                    let mut best = src[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (z * od[1] + y) * od[2] + x;
                    out.data[c * n_out + o] = best;
                    arg[c * n_out + o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(grad_out: &Tensor, arg: &[u32], input_dims: Dims) -> Tensor {
    let mut gi = Tensor::zeros(grad_out.channels, input_dims);
    let n_out = grad_out.voxels();
    let n_in = gi.voxels();
    for c in 0..grad_out.channels {
        for o in 0..n_out {
            let idx = c * n_out + o;
            gi.data[c * n_in + arg[idx] as usize] += grad_out.data[idx];
        }
    }
    gi
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward(input: &Tensor) -> Tensor {
    let [nz, ny, nx] = input.dims;
    let od = [2 * nz, 2 * ny, 2 * nx];
    let mut out = Tensor::zeros(input.channels, od);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                let srow = &src[((z / 2) * ny + y / 2) * nx..][..nx];
                let drow = &mut dst[(z * od[1] + y) * od[2]..][..od[2]];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &Tensor) -> Tensor {
    let od = grad_out.dims;
    let id = [od[0] / 2, od[1] / 2, od[2] / 2];
    let mut gi = Tensor::zeros(grad_out.channels, id);
    for c in 0..grad_out.channels {
        let g = grad_out.channel(c);
        let dst = gi.channel_mut(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                let grow = &g[(z * od[1] + y) * od[2]..][..od[2]];
                let drow = &mut dst[((z / 2) * id[1] + y / 2) * id[2]..][..id[2]];
                for (x, &v) in grow.iter().enumerate() {
                    drow[x / 2] += v;
                }
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, dims: Dims, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(c, dims);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        t
    }

    fn random_conv(i: usize, o: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv3d {
        let mut conv = Conv3d::zeros(i, o, k);
        conv.weight.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        conv.bias.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        conv
    }

    #[test]
    fn activation_backward_rules() {
        let mut out = Tensor::zeros(1, [1, 1, 4]);
        out.data.copy_from_slice(&[1.0, -0.02, 2.0, 0.0]);
        let mut g = Tensor::zeros(1, [1, 1, 4]);
        g.data.copy_from_slice(&[0.5, 0.5, -0.5, 0.5]);
        let mut exact = g.clone();
        relu_backward(&out, &mut exact);
        assert_eq!(exact.data, vec![0.5, 0.5 * LEAKY_SLOPE, -0.5, 0.5 * LEAKY_SLOPE]);
        relu_backward_guided(&out, &mut g);
        assert_eq!(g.data, vec![0.5, 0.0, 0.0, 0.0]);
    }

    /// Direct zero-padded convolution.
    fn conv_oracle(conv: &Conv3d, input: &Tensor) -> Vec<f64> {
        let [nz, ny, nx] = input.dims;
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Vec::new();
        for o in 0..conv.out_channels {
            for z in 0..nz as isize {
                for y in 0..ny as isize {
                    for x in 0..nx as isize {
                        let mut acc = conv.bias[o] as f64;
                        for i in 0..conv.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sz, sy, sx) = (z + kz - r, y + ky - r, x + kx - r);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= nz as isize
                                            || sy >= ny as isize
                                            || sx >= nx as isize
                                        {
                                            continue;
                                        }
                                        let w = conv.w(o, i)[((kz * k + ky) * k + kx) as usize];
                                        let s = input.channel(i)
                                            [((sz as usize * ny) + sy as usize) * nx + sx as usize];
                                        acc += w as f64 * s as f64;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, dims) in [(3, [3, 4, 5]), (3, [1, 1, 2]), (1, [2, 3, 4]), (3, [2, 2, 1])] {
            let conv = random_conv(2, 3, k, &mut rng);
            let input = random_tensor(2, dims, &mut rng);
            let got = conv.forward(&input);
            for (g, e) in got.data.iter().zip(conv_oracle(&conv, &input)) {
                assert!((*g as f64 - e).abs() < 1e-4, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and in w; check both gradients against it.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 3] {
            let dims = [3, 4, 5];
            let mut conv = random_conv(2, 3, k, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = 0.0);
            let x = random_tensor(2, dims, &mut rng);
            let g = random_tensor(3, dims, &mut rng);
            let y = conv.forward(&x);
            let inner: f64 = y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum();
            let (pg, gx) = conv.backward(&x, &g, true);
            let via_x: f64 = gx
                .unwrap()
                .data
                .iter()
                .zip(&x.data)
                .map(|(a, b)| (a * b) as f64)
                .sum();
            let via_w: f64 = pg
                .weight
                .iter()
                .zip(&conv.weight)
                .map(|(a, b)| a * *b as f64)
                .sum();
            assert!((inner - via_x).abs() < 1e-3 * inner.abs().max(1.0));
            assert!((inner - via_w).abs() < 1e-3 * inner.abs().max(1.0));
            let gsum: f64 = g.channel(1).iter().map(|&v| v as f64).sum();
            assert!((pg.bias[1] - gsum).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(2, [2, 4, 6], &mut rng);
        let (p, arg) = maxpool_forward(&x);
        assert_eq!(p.dims, [1, 2, 3]);
        for (c_out, &a) in p.data.iter().zip(&arg) {
            let c = (p.data.iter().position(|v| v == c_out).unwrap()) / p.voxels();
            assert_eq!(x.channel(c)[a as usize], *c_out);
        }
        let g = random_tensor(2, [1, 2, 3], &mut rng);
        let gi = maxpool_backward(&g, &arg, x.dims);
        assert!((gi.data.iter().sum::<f32>() - g.data.iter().sum::<f32>()).abs() < 1e-5);

        let u = upsample_forward(&g);
        let h = random_tensor(2, u.dims, &mut rng);
        let lhs: f32 = u.data.iter().zip(&h.data).map(|(a, b)| a * b).sum();
        let back = upsample_backward(&h);
        let rhs: f32 = back.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
