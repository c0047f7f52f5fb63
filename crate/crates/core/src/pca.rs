//! Two-component PCA by power iteration with deflation. Deterministic:
//! fixed start vector, fixed iteration budget. Used for embedding exports as
//! a dependency-free stand-in for nonlinear projections.

use crate::error::{Error, Result};

/// Projects rows of `data` (n×d, row-major) onto the top two principal axes.
/// Returns the projected coordinates and the two axes.
#[allow(clippy::type_complexity)]
pub fn project_2d(data: &[f64], n: usize, d: usize) -> Result<(Vec<[f64; 2]>, [Vec<f64>; 2])> {
    if n == 0 || d < 2 || data.len() != n * d {
        return Err(Error::invalid(format!("pca wants n×d with d ≥ 2, got n={n}, d={d}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += data[r * d + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        for i in 0..d {
            let di = data[r * d + i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (data[r * d + j] - mean[j]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= n as f64;
    }

    let axis1 = power_iteration(&cov, d, None);
    let axis2 = power_iteration(&cov, d, Some(&axis1));
    let project = |row: &[f64], axis: &[f64]| {
        row.iter().zip(axis).zip(&mean).map(|((&x, &a), &m)| (x - m) * a).sum::<f64>()
    };
    let coords = (0..n)
        .map(|r| {
            let row = &data[r * d..(r + 1) * d];
            [project(row, &axis1), project(row, &axis2)]
        })
        .collect();
    Ok((coords, [axis1, axis2]))
}

fn power_iteration(cov: &[f64], d: usize, deflate: Option<&[f64]>) -> Vec<f64> {
    // Deterministic non-degenerate start.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 0.01).collect();
    normalize(&mut v);
    for _ in 0..500 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                w[i] += cov[i * d + j] * v[j];
            }
        }
        if let Some(prev) = deflate {
            let dot: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= dot * pi;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    if let Some(prev) = deflate {
        let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
        for (vi, pi) in v.iter_mut().zip(prev) {
            *vi -= dot * pi;
        }
        normalize(&mut v);
    }
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Pearson correlation between full-dimensional and projected pairwise
/// distances over a deterministic subsample of pairs. Higher is better
/// structure preservation.
pub fn distance_correlation(data: &[f64], n: usize, d: usize, coords: &[[f64; 2]]) -> f64 {
    let mut full = Vec::new();
    let mut proj = Vec::new();
    // Deterministic pair subsample: stride through the upper triangle.
    let stride = (n * (n - 1) / 2 / 512).max(1);
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if count.is_multiple_of(stride) {
                let mut df = 0.0;
                for c in 0..d {
                    let diff = data[i * d + c] - data[j * d + c];
                    df += diff * diff;
                }
                full.push(df.sqrt());
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                proj.push((dx * dx + dy * dy).sqrt());
            }
            count += 1;
        }
    }
    pearson(&full, &proj)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
