//! Spectral forward model: spectral response functions over a discrete
//! wavelength grid, randomized SRF perturbation, and rendering of color
//! fundus images from multispectral datacubes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The interrogated wavelength grid, in nanometres.
pub const DEFAULT_WAVELENGTHS: [f64; 7] = [550.0, 580.0, 590.0, 620.0, 660.0, 685.0, 740.0];

/// Channel indices within an SRF / rendered image.
pub const CHANNEL_R: usize = 0;
pub const CHANNEL_G: usize = 1;
pub const CHANNEL_B: usize = 2;

/// The blue channel is excluded from spectral losses: the effective band of
/// the instrument starts at 550 nm.
pub const LOSS_CHANNELS: [usize; 2] = [CHANNEL_R, CHANNEL_G];

/// Per-channel spectral response weights over the wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Srf<F: Scalar> {
    wavelengths: Vec<f64>,
    /// 3×|Λ| non-negative responses, rows R, G, B.
    weights: Tensor<F>,
}

impl<F: Scalar> Srf<F> {
    pub fn new(wavelengths: Vec<f64>, weights: Tensor<F>) -> Result<Self> {
        if weights.shape() != [3, wavelengths.len()] {
            return Err(Error::ShapeMismatch {
                op: "srf",
                detail: format!("weights {:?} vs 3×{}", weights.shape(), wavelengths.len()),
            });
        }
        if wavelengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("wavelengths must be strictly increasing"));
        }
        if weights.data().iter().any(|&v| v < F::zero()) {
            return Err(Error::invalid("SRF weights must be non-negative"));
        }
        Ok(Srf { wavelengths, weights })
    }

    /// A smooth Gaussian-bump baseline over the default grid, peaking at
    /// longer wavelengths for R and shorter for G/B.
    pub fn baseline() -> Self {
        let lams = DEFAULT_WAVELENGTHS.to_vec();
        let bump = |lam: f64, center: f64, width: f64| (-(lam - center).powi(2) / (2.0 * width * width)).exp();
        let mut w = Vec::with_capacity(3 * lams.len());
        for &lam in &lams {
            w.push(F::from_f64(bump(lam, 650.0, 60.0)));
        }
        for &lam in &lams {
            w.push(F::from_f64(bump(lam, 560.0, 45.0)));
        }
        for &lam in &lams {
            w.push(F::from_f64(0.2 * bump(lam, 550.0, 35.0)));
        }
        let weights = Tensor::from_vec(vec![3, lams.len()], w).expect("baseline shape");
        Srf { wavelengths: lams, weights }
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn weights(&self) -> &Tensor<F> {
        &self.weights
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn weight(&self, channel: usize, band: usize) -> F {
        self.weights.data()[channel * self.bands() + band]
    }

    /// CSV with header `wavelength_nm,R,G,B`, one row per wavelength.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("wavelength_nm,R,G,B\n");
        for (i, &lam) in self.wavelengths.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                lam,
                self.weight(CHANNEL_R, i).to_f64(),
                self.weight(CHANNEL_G, i).to_f64(),
                self.weight(CHANNEL_B, i).to_f64()
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty SRF csv"))?;
        if header.trim() != "wavelength_nm,R,G,B" {
            return Err(Error::invalid(format!("unexpected SRF header: {header}")));
        }
        let mut lams = Vec::new();
        let mut rows: [Vec<F>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::invalid(format!("bad SRF row: {line}")));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number: {s}")))
            };
            lams.push(parse(fields[0])?);
            for (c, row) in rows.iter_mut().enumerate() {
                row.push(F::from_f64(parse(fields[c + 1])?));
            }
        }
        let n = lams.len();
        let mut data = Vec::with_capacity(3 * n);
        for row in &rows {
            data.extend_from_slice(row);
        }
        Srf::new(lams, Tensor::from_vec(vec![3, n], data)?)
    }
}

/// H×W×|Λ| non-negative spectral intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct MsiDatacube<F: Scalar> {
    data: Tensor<F>,
}

impl<F: Scalar> MsiDatacube<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "msi_datacube",
                detail: format!("expected H×W×bands, got {:?}", data.shape()),
            });
        }
        if data.data().iter().any(|&v| v < F::zero()) {
            return Err(Error::invalid("datacube intensities must be non-negative"));
        }
        Ok(MsiDatacube { data })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Per-pixel, per-channel spectral dot product: c_i(h,w) = Σ_λ S(h,w,λ)·M_i(λ).
/// All three channels are rendered; spectral losses downstream restrict
/// themselves to [`LOSS_CHANNELS`].
pub fn render_cfp<F: Scalar>(cube: &MsiDatacube<F>, srf: &Srf<F>) -> Result<Tensor<F>> {
    if cube.bands() != srf.bands() {
        return Err(Error::ShapeMismatch {
            op: "render_cfp",
            detail: format!("{} cube bands vs {} SRF bands", cube.bands(), srf.bands()),
        });
    }
    let (h, w, bands) = (cube.height(), cube.width(), cube.bands());
    let mut out = vec![F::zero(); h * w * 3];
    let s = cube.tensor().data();
    for p in 0..h * w {
        for ch in 0..3 {
            let mut acc = F::zero();
            for b in 0..bands {
                acc += s[p * bands + b] * srf.weight(ch, b);
            }
            out[p * 3 + ch] = acc;
        }
    }
    Tensor::from_vec(vec![h, w, 3], out)
}

/// Randomized SRF perturbation parameters: per-wavelength amplitude noise and
/// a smoothing kernel whose width is drawn uniformly from [|Λ|/15, |Λ|/3]
/// (rounded, at least 1). The kernel is normalized to unit sum so it
/// perturbs shape rather than gross scale; near-zero-sum draws are rejected
/// and redrawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationParams {
    pub amplitude: Vec<f64>,
    pub kernel: Vec<f64>,
}

impl PerturbationParams {
    pub fn sample(n_wavelengths: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = n_wavelengths as f64 / 15.0;
        let hi = n_wavelengths as f64 / 3.0;
        let width = (rng.gen_range(lo..hi).round() as usize).max(1);
        let kernel = loop {
            let k: Vec<f64> = (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let sum: f64 = k.iter().sum();
            if sum.abs() > 0.1 {
                break k.iter().map(|v| v / sum).collect::<Vec<f64>>();
            }
        };
        let amplitude: Vec<f64> =
            (0..n_wavelengths).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        PerturbationParams { amplitude, kernel }
    }

    /// Unit impulse kernel, zero amplitude noise: the identity perturbation.
    pub fn identity(n_wavelengths: usize) -> Self {
        PerturbationParams { amplitude: vec![0.0; n_wavelengths], kernel: vec![1.0] }
    }

    pub fn validate(&self, n_wavelengths: usize) -> Result<()> {
        if self.amplitude.len() != n_wavelengths {
            return Err(Error::invalid(format!(
                "amplitude length {} vs {} wavelengths",
                self.amplitude.len(),
                n_wavelengths
            )));
        }
        let max_width = ((n_wavelengths as f64 / 3.0).round() as usize).max(1);
        if self.kernel.is_empty() || self.kernel.len() > max_width {
            return Err(Error::invalid(format!(
                "kernel width {} outside [1, {}]",
                self.kernel.len(),
                max_width
            )));
        }
        Ok(())
    }
}

/// Convolve each channel with the smoothing kernel (same-length output, zero
/// padding), modulate by (1 + amplitude noise), clamp negatives to zero.
pub fn perturb_srf<F: Scalar>(srf: &Srf<F>, params: &PerturbationParams) -> Result<Srf<F>> {
    params.validate(srf.bands())?;
    let bands = srf.bands();
    let kw = params.kernel.len();
    let offset = (kw - 1) / 2;
    let mut out = vec![F::zero(); 3 * bands];
    for ch in 0..3 {
        for i in 0..bands {
            let mut acc = 0.0;
            for (j, &kv) in params.kernel.iter().enumerate() {
                let src = i as isize + j as isize - offset as isize;
                if src >= 0 && (src as usize) < bands {
                    acc += kv * srf.weight(ch, src as usize).to_f64();
                }
            }
            let v = (1.0 + params.amplitude[i]) * acc;
            out[ch * bands + i] = F::from_f64(v.max(0.0));
        }
    }
    Srf::new(srf.wavelengths().to_vec(), Tensor::from_vec(vec![3, bands], out)?)
}

/// Renders the reference image (true cube under the true perturbed SRF) and
/// the reconstruction (predicted cube under the generated SRF).
pub fn cycle_reconstruction_pair<F: Scalar>(
    s_true: &MsiDatacube<F>,
    s_pred: &MsiDatacube<F>,
    srf_true: &Srf<F>,
    srf_pred: &Srf<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let c = render_cfp(s_true, srf_true)?;
    let c_rec = render_cfp(s_pred, srf_pred)?;
    Ok((c, c_rec))
}
