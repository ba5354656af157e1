//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use zseg::annotations::CentroidSet;
use zseg::volume::{LabelMap, Volume};

pub fn neighbors6(dims: [usize; 3], p: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for axis in 0..3 {
        if p[axis] > 0 {
            let mut q = p;
            q[axis] -= 1;
            out.push(q);
        }
        if p[axis] + 1 < dims[axis] {
            let mut q = p;
            q[axis] += 1;
            out.push(q);
        }
    }
    out
}

/// Centre map straight from its definition: 0 on assignment changes,
/// `exp(-k D / d_m)` within `d_m`, else 0.
pub fn center_map_oracle(dims: [usize; 3], c: &CentroidSet, d_m: f64, k: f64, a: [f64; 3]) -> Volume<f64> {
    let nearest = |p: [usize; 3]| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, q) in c.points().iter().enumerate() {
            let d2 = (0..3).map(|ax| (a[ax] * (p[ax] as f64 - q[ax])).powi(2)).sum::<f64>();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    };
    Volume::from_fn(dims, |z, y, x| {
        let (owner, d) = nearest([z, y, x]);
        if neighbors6(dims, [z, y, x]).into_iter().any(|q| nearest(q).0 != owner) {
            0.0
        } else if d <= d_m {
            (-k * d / d_m).exp()
        } else {
            0.0
        }
    })
}

pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Full 3D convolution with the outer-product Gaussian kernel.
pub fn dense_gaussian(v: &Volume<f64>, sigma: f64) -> Volume<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w1: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = w1.iter().sum();
    let w1: Vec<f64> = w1.iter().map(|w| w / norm).collect();
    let dims = v.dims();
    Volume::from_fn(dims, |z, y, x| {
        let mut s = 0.0;
        for (a, wa) in w1.iter().enumerate() {
            for (b, wb) in w1.iter().enumerate() {
                for (c, wc) in w1.iter().enumerate() {
                    let qz = reflect(z as isize + a as isize - radius, dims[0]);
                    let qy = reflect(y as isize + b as isize - radius, dims[1]);
                    let qx = reflect(x as isize + c as isize - radius, dims[2]);
                    s += wa * wb * wc * v.get(qz, qy, qx);
                }
            }
        }
        s
    })
}

fn shifted(v: &Volume<f64>, p: [usize; 3], axis: usize, delta: isize) -> f64 {
    let mut q = p;
    q[axis] = (p[axis] as isize + delta) as usize;
    v.get(q[0], q[1], q[2])
}

/// Central difference, one-sided at the two ends, zero on a single-voxel axis.
pub fn diff_oracle(v: &Volume<f64>, p: [usize; 3], axis: usize) -> f64 {
    let n = v.dims()[axis];
    if n == 1 {
        0.0
    } else if p[axis] == 0 {
        shifted(v, p, axis, 1) - shifted(v, p, axis, 0)
    } else if p[axis] == n - 1 {
        shifted(v, p, axis, 0) - shifted(v, p, axis, -1)
    } else {
        (shifted(v, p, axis, 1) - shifted(v, p, axis, -1)) / 2.0
    }
}

pub fn gradient_magnitude_oracle(v: &Volume<f64>) -> Volume<f64> {
    Volume::from_fn(v.dims(), |z, y, x| {
        (0..3).map(|a| diff_oracle(v, [z, y, x], a).powi(2)).sum::<f64>().sqrt()
    })
}

/// 7-point Laplacian with replicated borders.
pub fn laplacian_oracle(v: &Volume<f64>) -> Volume<f64> {
    let dims = v.dims();
    Volume::from_fn(dims, |z, y, x| {
        let p = [z, y, x];
        let mut s = 0.0;
        for axis in 0..3 {
            for delta in [-1isize, 1] {
                let mut q = p;
                q[axis] = (p[axis] as isize + delta).clamp(0, dims[axis] as isize - 1) as usize;
                s += v.get(q[0], q[1], q[2]);
            }
        }
        s - 6.0 * v.get(z, y, x)
    })
}

/// Maximum relative error between an analytic gradient and a fourth-order
/// central difference with step `h`. Entries are compared relative to the larger of the two
/// magnitudes, floored at 1e-3 of the largest numeric entry.
pub fn fd_relative_error(analytic: &[f64], f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let mut at = |d: f64| {
            probe[i] = x[i] + d;
            f(&probe)
        };
        let d = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        probe[i] = x[i];
        numeric.push(d);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-300))
        .fold(0.0, f64::max)
}

/// Connected components (6-connectivity) of the nonzero voxels.
pub fn components(mask: &LabelMap) -> LabelMap {
    let dims = mask.dims();
    let mut out = mask.map(|_| 0u16);
    let mut next = 0;
    for i in 0..mask.len() {
        if mask.data()[i] == 0 || out.data()[i] != 0 {
            continue;
        }
        next += 1;
        let mut queue = VecDeque::from([mask.coord(i)]);
        out.data_mut()[i] = next;
        while let Some(p) = queue.pop_front() {
            for q in neighbors6(dims, p) {
                let j = mask.index(q[0], q[1], q[2]);
                if mask.data()[j] != 0 && out.data()[j] == 0 {
                    out.data_mut()[j] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    out
}

pub fn label_set(v: &LabelMap) -> BTreeSet<u16> {
    v.data().iter().copied().filter(|&l| l != 0).collect()
}

fn jaccard(a: &LabelMap, la: u16, b: &LabelMap, lb: u16) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x == la, y == lb);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    inter as f64 / union as f64
}

pub fn iou_oracle(p: &LabelMap, g: &LabelMap) -> f64 {
    let inter = p.data().iter().zip(g.data()).filter(|(a, b)| **a != 0 && **b != 0).count();
    let union = p.data().iter().zip(g.data()).filter(|(a, b)| **a != 0 || **b != 0).count();
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

pub fn seg_oracle(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let gts = label_set(gt);
    if gts.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for &g in &gts {
        let size = gt.data().iter().filter(|&&v| v == g).count();
        for &r in &label_set(pred) {
            let overlap = gt.data().iter().zip(pred.data()).filter(|(a, b)| **a == g && **b == r).count();
            if 2 * overlap > size {
                total += jaccard(gt, g, pred, r);
            }
        }
    }
    total / gts.len() as f64
}

pub fn mucov_oracle(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let preds = label_set(pred);
    if preds.is_empty() {
        return if label_set(gt).is_empty() { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for &r in &preds {
        total += label_set(gt).iter().map(|&g| jaccard(pred, r, gt, g)).fold(0.0, f64::max);
    }
    total / preds.len() as f64
}
