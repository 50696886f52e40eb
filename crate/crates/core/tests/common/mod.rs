#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umfa::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(size: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng(seed))
}

pub fn write_ppm(path: &Path, size: usize, f: impl Fn(usize, usize) -> [u8; 3]) {
    let mut b = format!("P6\n{size} {size}\n255\n").into_bytes();
    for y in 0..size {
        for x in 0..size {
            b.extend_from_slice(&f(x, y));
        }
    }
    std::fs::write(path, b).unwrap();
}

/// A blocky gradient "photo" and a smooth colour-wave "painting".
pub fn write_toy_pair(dir: &Path, size: usize) {
    let s = (size - 1) as f64;
    write_ppm(&dir.join("content.ppm"), size, |x, y| {
        let check = if (x / 8 + y / 8) % 2 == 0 { 40 } else { 160 };
        [(255.0 * x as f64 / s) as u8, (255.0 * y as f64 / s) as u8, check]
    });
    write_ppm(&dir.join("style.ppm"), size, |x, y| {
        let (x, y) = (x as f64, y as f64);
        [
            (127.0 + 127.0 * (0.8 * x).sin()) as u8,
            (127.0 + 127.0 * (0.6 * y).cos()) as u8,
            (127.0 + 127.0 * (0.4 * (x + y)).sin()) as u8,
        ]
    });
}

/// Population per-channel (mean, std) in f64.
pub fn channel_stats(t: &Tensor<f32>) -> Vec<(f64, f64)> {
    let s: Shape = t.shape();
    t.data()
        .chunks_exact(s.plane())
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}
