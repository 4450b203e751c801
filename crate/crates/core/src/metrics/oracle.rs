//! Straightforward re-implementations of the metrics, used to cross-check
//! the main code paths. They share no helpers with it.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::datamodel::MotionSeq;

fn col(m: &MotionSeq, d: usize) -> Vec<f64> {
    (0..m.frames()).map(|t| m.data().at(&[t, d])).collect()
}

pub fn mse(gen: &MotionSeq, gt: &MotionSeq, dims: core::ops::Range<usize>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for d in dims {
        for t in 0..gen.frames() {
            let e = gen.data().at(&[t, d]) - gt.data().at(&[t, d]);
            s += e * e;
            n += 1;
        }
    }
    s / n as f64
}

pub fn pcc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    let sa = libm::sqrt(va);
    let sb = libm::sqrt(vb);
    if sa == 0.0 || sb == 0.0 || va < 1e-20 * a.iter().map(|x| x * x).sum::<f64>() || vb < 1e-20 * b.iter().map(|y| y * y).sum::<f64>() {
        return None;
    }
    Some(cov / sa / sb)
}

/// Per-dim mean correlation difference over `dims`; `None` when no dim is
/// usable.
pub fn rpcc(gen: &MotionSeq, gt: &MotionSeq, user: &MotionSeq, dims: core::ops::Range<usize>) -> Option<f64> {
    let mut pg = Vec::new();
    let mut pa = Vec::new();
    for d in dims {
        let u = col(user, d);
        if let (Some(x), Some(y)) = (pcc(&col(gt, d), &u), pcc(&col(gen, d), &u)) {
            pg.push(x);
            pa.push(y);
        }
    }
    if pg.is_empty() {
        return None;
    }
    let n = pg.len() as f64;
    Some((pg.iter().sum::<f64>() / n - pa.iter().sum::<f64>() / n).abs())
}

pub fn variance(set: &[MotionSeq], dims: core::ops::Range<usize>) -> f64 {
    let mut total = 0.0;
    for m in set {
        let mut per = 0.0;
        for d in dims.clone() {
            let x = col(m, d);
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let mut ss = 0.0;
            for v in &x {
                ss += (v - mu) * (v - mu);
            }
            per += ss / (x.len() - 1) as f64;
        }
        total += per / dims.len() as f64;
    }
    total / set.len() as f64
}

/// Entropy (bits) of nearest-centroid assignments of `points`.
pub fn assignment_entropy(points: &[f64], centroids: &[f64], dim: usize) -> f64 {
    let k = centroids.len() / dim;
    let mut hist = vec![0usize; k];
    for x in points.chunks(dim) {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for c in 0..k {
            let mut d = 0.0;
            for j in 0..dim {
                d += libm::pow(x[j] - centroids[c * dim + j], 2.0);
            }
            if d < bd {
                bd = d;
                best = c;
            }
        }
        hist[best] += 1;
    }
    let n = (points.len() / dim) as f64;
    let mut h = 0.0;
    for c in hist {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * libm::log(p) / core::f64::consts::LN_2;
        }
    }
    h
}

fn covariance(x: &[f64], dim: usize, eps: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len() / dim;
    let mut mu = vec![0.0; dim];
    for r in 0..n {
        for j in 0..dim {
            mu[j] += x[r * dim + j] / n as f64;
        }
    }
    let mut c = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for r in 0..n {
                s += (x[r * dim + i] - mu[i]) * (x[r * dim + j] - mu[j]);
            }
            c[(i, j)] = s / (n - 1) as f64 + if i == j { eps } else { 0.0 };
        }
    }
    (mu, c)
}

/// Square root by Denman-Beavers iteration (valid for matrices with
/// positive real spectrum, as products of SPD matrices have).
pub fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    // Scale towards unit spectrum for faster convergence.
    let s = a.trace().abs() / n as f64;
    let s = if s > 0.0 { s } else { 1.0 };
    let mut y = a / s;
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() <= 1e-15 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y * libm::sqrt(s)
}

pub fn frechet(gen: &[f64], gt: &[f64], dim: usize, eps: f64) -> f64 {
    let (mg, sg) = covariance(gen, dim, eps);
    let (mr, sr) = covariance(gt, dim, eps);
    let root = sqrtm_denman_beavers(&(&sg * &sr));
    let mut d2 = 0.0;
    for j in 0..dim {
        d2 += (mg[j] - mr[j]) * (mg[j] - mr[j]);
    }
    d2 + sg.trace() + sr.trace() - 2.0 * root.trace()
}

pub fn lipsync(motion: &MotionSeq, energy: &[f64], speaking: &[bool]) -> Option<f64> {
    let mut a = Vec::new();
    let mut e = Vec::new();
    for t in 0..motion.frames() {
        if speaking[t] {
            a.push(motion.data().at(&[t, 0]));
            e.push(energy[t]);
        }
    }
    if a.len() < 4 {
        return None;
    }
    pcc(&a, &e)
}
