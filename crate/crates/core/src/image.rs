//! Small image kernels: separately from the autodiff tape, these operate on
//! plain H×W×C tensors. Used by the perturbation suite and by attention-map
//! upsampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Discrete 5×5 Gaussian with σ = 1: normalized samples of the continuous
/// kernel at integer offsets.
pub fn gaussian5_kernel() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = (-(dy * dy + dx * dx) / 2.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// The 5-center Laplacian sharpening kernel; sums to one so constant regions
/// are unchanged.
pub const SHARPEN3: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

fn convolve<F: Scalar>(img: &Tensor<F>, kernel: &[&[f64]]) -> Result<Tensor<F>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "convolve",
            detail: format!("expected H×W×C, got {:?}", shape),
        });
    }
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let kh = kernel.len();
    let kw = kernel[0].len();
    if h < kh || w < kw {
        return Err(Error::invalid(format!("image {}×{} smaller than kernel {}×{}", h, w, kh, kw)));
    }
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![F::zero(); h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut s = 0.0;
                for (ki, krow) in kernel.iter().enumerate() {
                    for (kj, &kv) in krow.iter().enumerate() {
                        let sy = reflect(y as isize + ki as isize - ry, h);
                        let sx = reflect(x as isize + kj as isize - rx, w);
                        s += kv * img.at3(sy, sx, c).to_f64();
                    }
                }
                out[(y * w + x) * ch + c] = F::from_f64(s);
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

pub fn blur5<F: Scalar>(img: &Tensor<F>) -> Result<Tensor<F>> {
    let k = gaussian5_kernel();
    let rows: Vec<&[f64]> = k.iter().map(|r| r.as_slice()).collect();
    convolve(img, &rows)
}

pub fn sharpen3<F: Scalar>(img: &Tensor<F>) -> Result<Tensor<F>> {
    let rows: Vec<&[f64]> = SHARPEN3.iter().map(|r| r.as_slice()).collect();
    convolve(img, &rows)
}

/// Bilinear sample with clamp-to-edge, coordinates in pixel units.
fn sample_bilinear<F: Scalar>(img: &Tensor<F>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cl = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (y, x) = (cl(y, h), cl(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v00 = img.at3(y0, x0, c).to_f64();
    let v01 = img.at3(y0, x1, c).to_f64();
    let v10 = img.at3(y1, x0, c).to_f64();
    let v11 = img.at3(y1, x1, c).to_f64();
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Inverse-warp by a 2×3 affine matrix mapping output pixel offsets (about
/// the image center) to source offsets: [a b tx; c d ty] acting on (x, y).
pub fn affine_warp<F: Scalar>(img: &Tensor<F>, m: &[f64; 6]) -> Result<Tensor<F>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "affine_warp",
            detail: format!("expected H×W×C, got {:?}", shape),
        });
    }
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![F::zero(); h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = m[0] * dx + m[1] * dy + m[2] + cx;
            let sy = m[3] * dx + m[4] * dy + m[5] + cy;
            for c in 0..ch {
                out[(y * w + x) * ch + c] = F::from_f64(sample_bilinear(img, sy, sx, c));
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Bilinear resize of an H×W map (rank-2 tensor) to a new size, corners
/// aligned to the image extent.
pub fn bilinear_resize<F: Scalar>(map: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_resize",
            detail: format!("expected H×W, got {:?}", shape),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let as3 = Tensor::from_vec(vec![h, w, 1], map.data().to_vec())?;
    let sy = if out_h > 1 { (h as f64 - 1.0) / (out_h as f64 - 1.0) } else { 0.0 };
    let sx = if out_w > 1 { (w as f64 - 1.0) / (out_w as f64 - 1.0) } else { 0.0 };
    let mut out = vec![F::zero(); out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            out[y * out_w + x] =
                F::from_f64(sample_bilinear(&as3, y as f64 * sy, x as f64 * sx, 0));
        }
    }
    Tensor::from_vec(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_matches_closed_form_and_sums_to_one() {
        let k = gaussian5_kernel();
        let sum: f64 = k.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Ratio of off-center to center weight is exp(-r²/2).
        assert!((k[2][3] / k[2][2] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k[0][0] / k[2][2] - (-4.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn blur_and_sharpen_leave_constants_unchanged() {
        let img = Tensor::<f64>::full(&[6, 7, 2], 3.25);
        let b = blur5(&img).unwrap();
        let s = sharpen3(&img).unwrap();
        for &v in b.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
        for &v in s.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        // Reflect padding conserves total mass for symmetric kernels, so the
        // image mean is preserved.
        let img = Tensor::<f64>::from_fn(&[8, 8, 1], |i| ((i * 37) % 11) as f64 * 0.1);
        let b = blur5(&img).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean(&img) - mean(&b)).abs() < 1e-10);
    }

    #[test]
    fn identity_warp_is_identity() {
        let img = Tensor::<f64>::from_fn(&[5, 6, 1], |i| i as f64);
        let out = affine_warp(&img, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_constant_map_is_constant() {
        let m = Tensor::<f64>::full(&[4, 4], 0.25);
        let r = bilinear_resize(&m, 9, 9).unwrap();
        for &v in r.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = Tensor::<f64>::zeros(&[4, 4, 1]);
        assert!(blur5(&img).is_err());
    }
}
