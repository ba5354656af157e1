//! Separable Gaussian smoothing and finite-difference operators on `f64`
//! volumes, together with the adjoints needed to backpropagate through them.

use crate::volume::{Dims, Volume};

/// Normalized 1D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`),
/// repeated as often as needed for kernels wider than the axis.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn strides(dims: Dims) -> [usize; 3] {
    [dims[1] * dims[2], dims[2], 1]
}

/// Calls `f(start)` for the first element of every line along `axis`.
fn for_each_line(dims: Dims, axis: usize, mut f: impl FnMut(usize)) {
    let st = strides(dims);
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for i in 0..dims[others[0]] {
        for j in 0..dims[others[1]] {
            f(i * st[others[0]] + j * st[others[1]]);
        }
    }
}

fn convolve_axis(data: &[f64], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let n = dims[axis];
    let stride = strides(dims)[axis];
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    for_each_line(dims, axis, |start| {
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[start + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                acc += w * line[reflect_index(i as isize + j as isize - r, n)];
            }
            out[start + i * stride] = acc;
        }
    });
    out
}

fn convolve_axis_adjoint(grad: &[f64], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let n = dims[axis];
    let stride = strides(dims)[axis];
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; grad.len()];
    let mut line = vec![0.0; n];
    for_each_line(dims, axis, |start| {
        line.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let g = grad[start + i * stride];
            for (j, &w) in kernel.iter().enumerate() {
                line[reflect_index(i as isize + j as isize - r, n)] += w * g;
            }
        }
        for (i, v) in line.iter().enumerate() {
            out[start + i * stride] = *v;
        }
    });
    out
}

/// Separable Gaussian blur along z, y and x.
pub fn gaussian_smooth(v: &Volume<f64>, sigma: f64) -> Volume<f64> {
    let kernel = gaussian_kernel(sigma);
    let dims = v.dims();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        data = convolve_axis(&data, dims, axis, &kernel);
    }
    v.with_data(data)
}

/// Transpose of [`gaussian_smooth`] (they differ only near the borders).
pub fn gaussian_smooth_adjoint(grad: &Volume<f64>, sigma: f64) -> Volume<f64> {
    let kernel = gaussian_kernel(sigma);
    let dims = grad.dims();
    let mut data = grad.data().to_vec();
    for axis in (0..3).rev() {
        data = convolve_axis_adjoint(&data, dims, axis, &kernel);
    }
    grad.with_data(data)
}

/// Central difference along `axis`, one-sided at both ends.
pub fn axis_difference(v: &Volume<f64>, axis: usize) -> Volume<f64> {
    let dims = v.dims();
    let n = dims[axis];
    let stride = strides(dims)[axis];
    let src = v.data();
    let mut out = vec![0.0; src.len()];
    if n >= 2 {
        for_each_line(dims, axis, |start| {
            let at = |i: usize| src[start + i * stride];
            out[start] = at(1) - at(0);
            out[start + (n - 1) * stride] = at(n - 1) - at(n - 2);
            for i in 1..n - 1 {
                out[start + i * stride] = 0.5 * (at(i + 1) - at(i - 1));
            }
        });
    }
    v.with_data(out)
}

/// Transpose of [`axis_difference`].
pub fn axis_difference_adjoint(grad: &Volume<f64>, axis: usize) -> Volume<f64> {
    let dims = grad.dims();
    let n = dims[axis];
    let stride = strides(dims)[axis];
    let g = grad.data();
    let mut out = vec![0.0; g.len()];
    if n >= 2 {
        for_each_line(dims, axis, |start| {
            let idx = |i: usize| start + i * stride;
            let first = g[idx(0)];
            out[idx(1)] += first;
            out[idx(0)] -= first;
            let last = g[idx(n - 1)];
            out[idx(n - 1)] += last;
            out[idx(n - 2)] -= last;
            for i in 1..n - 1 {
                let h = 0.5 * g[idx(i)];
                out[idx(i + 1)] += h;
                out[idx(i - 1)] -= h;
            }
        });
    }
    grad.with_data(out)
}

/// Per-voxel Euclidean norm of the finite-difference gradient.
pub fn gradient_magnitude(v: &Volume<f64>) -> Volume<f64> {
    let [dz, dy, dx] = [0, 1, 2].map(|a| axis_difference(v, a));
    let data = dz
        .data()
        .iter()
        .zip(dy.data())
        .zip(dx.data())
        .map(|((a, b), c)| (a * a + b * b + c * c).sqrt())
        .collect();
    v.with_data(data)
}

/// 7-point Laplacian with replicated borders.
pub fn laplacian(v: &Volume<f64>) -> Volume<f64> {
    let [nz, ny, nx] = v.dims();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    Volume::from_fn([nz, ny, nx], |z, y, x| {
        let (zi, yi, xi) = (z as isize, y as isize, x as isize);
        let neighbors = v.get(clamp(zi - 1, nz), y, x)
            + v.get(clamp(zi + 1, nz), y, x)
            + v.get(z, clamp(yi - 1, ny), x)
            + v.get(z, clamp(yi + 1, ny), x)
            + v.get(z, y, clamp(xi - 1, nx))
            + v.get(z, y, clamp(xi + 1, nx));
        neighbors - 6.0 * v.get(z, y, x)
    })
    .with_spacing(v.spacing())
}
