//! Denoising (non-local means) and edge enhancement (unsharp mask).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{reflect_index, Dims, ScalarVolume};

/// Non-local means parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlmParams {
    /// Filtering strength in grayscale units.
    pub h: f64,
    /// Standard deviation of the Gaussian patch kernel, in voxels.
    pub sigma: f64,
    /// Half size of the patch window.
    pub patch_radius: usize,
    /// Half size of the search window.
    pub search_radius: usize,
}

impl Default for NlmParams {
    fn default() -> Self {
        NlmParams {
            h: 1000.0,
            sigma: 1.0,
            patch_radius: 1,
            search_radius: 5,
        }
    }
}

impl NlmParams {
    /// Defaults with `h = 0.6 * sigma_noise`, the noise level estimated from
    /// the volume itself.
    pub fn estimated_for(vol: &ScalarVolume) -> Self {
        let noise = estimate_noise_std(vol);
        NlmParams {
            h: (0.6 * noise).max(1.0),
            ..NlmParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::InvalidParameter(format!("NLM h must be > 0, got {}", self.h)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "NLM sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.patch_radius < 1 {
            return Err(Error::InvalidParameter("NLM patch_radius must be >= 1".into()));
        }
        if self.search_radius < self.patch_radius {
            return Err(Error::InvalidParameter(format!(
                "NLM search_radius {} must be >= patch_radius {}",
                self.search_radius, self.patch_radius
            )));
        }
        Ok(())
    }
}

/// Unsharp mask parameters: `I_UM = c/(2c-1) I - (1-c)/(2c-1) I_L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnsharpParams {
    pub c: f64,
    pub blur_sigma: f64,
}

impl Default for UnsharpParams {
    fn default() -> Self {
        UnsharpParams {
            c: 0.75,
            blur_sigma: 2.0,
        }
    }
}

impl UnsharpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.5 && self.c <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "unsharp weight c must lie in (0.5, 1], got {}",
                self.c
            )));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "blur sigma must be > 0, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Border {
    /// Samples outside the grid contribute nothing.
    Zero,
    Mirror,
}

/// 1D correlation of `src` along `axis` (0 = x, 1 = y, 2 = z) with an
/// odd-length kernel centered at `kernel.len() / 2`.
pub(crate) fn convolve_axis(src: &[f64], dims: Dims, kernel: &[f64], axis: usize, border: Border, dst: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let (len, stride) = match axis {
        0 => (nx, 1usize),
        1 => (ny, nx),
        _ => (nz, nx * ny),
    };
    dst.par_chunks_mut(nx).enumerate().for_each(|(row, out)| {
        let y = row % ny;
        let z = row / ny;
        let base = nx * (y + ny * z);
        for (x, o) in out.iter_mut().enumerate() {
            let (pos, origin) = match axis {
                0 => (x, base),
                1 => (y, x + nx * ny * z),
                _ => (z, x + nx * y),
            };
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let p = pos as i64 + k as i64 - r;
                let q = if p < 0 || p >= len as i64 {
                    match border {
                        Border::Zero => continue,
                        Border::Mirror => reflect_index(p, len),
                    }
                } else {
                    p as usize
                };
                acc += w * src[origin + q * stride];
            }
            *o = acc;
        }
    });
}

fn separable(src: &[f64], dims: Dims, kernel: &[f64], border: Border) -> Vec<f64> {
    let mut a = vec![0.0; src.len()];
    let mut b = vec![0.0; src.len()];
    convolve_axis(src, dims, kernel, 0, border, &mut a);
    convolve_axis(&a, dims, kernel, 1, border, &mut b);
    convolve_axis(&b, dims, kernel, 2, border, &mut a);
    a
}

/// Normalized 1D Gaussian samples on `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn to_f64(vol: &ScalarVolume) -> Vec<f64> {
    vol.data().iter().map(|&v| v as f64).collect()
}

/// Rounds to nearest and clamps into the 16-bit range.
#[inline]
pub fn to_u16(v: f64) -> u16 {
    v.round().clamp(0.0, 65535.0) as u16
}

/// Gaussian blur returning unrounded values.
pub fn gaussian_blur_f64(vol: &ScalarVolume, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("blur sigma must be > 0, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma, (4.0 * sigma).ceil() as usize);
    Ok(separable(&to_f64(vol), vol.dims(), &kernel, Border::Mirror))
}

/// Separable Gaussian blur, kernel truncated at `ceil(4 sigma)` and
/// renormalized, mirror borders.
pub fn gaussian_blur(vol: &ScalarVolume, sigma: f64) -> Result<ScalarVolume> {
    let out = gaussian_blur_f64(vol, sigma)?;
    vol.with_data(out.into_iter().map(to_u16).collect())
}

/// Unsharp masking with a Gaussian low-pass image.
pub fn unsharp_mask(vol: &ScalarVolume, p: &UnsharpParams) -> Result<ScalarVolume> {
    p.validate()?;
    let low = gaussian_blur_f64(vol, p.blur_sigma)?;
    let denom = 2.0 * p.c - 1.0;
    let a = p.c / denom;
    let b = (1.0 - p.c) / denom;
    let data = vol
        .data()
        .par_iter()
        .zip(low.par_iter())
        .map(|(&i, &l)| to_u16(a * i as f64 - b * l))
        .collect();
    vol.with_data(data)
}

/// Noise standard deviation estimated from the 7-point Laplacian response
/// over interior voxels; for white noise of variance `s^2` the response has
/// variance `42 s^2`.
pub fn estimate_noise_std(vol: &ScalarVolume) -> f64 {
    let d = vol.dims();
    if d.nx < 3 || d.ny < 3 || d.nz < 3 {
        return 0.0;
    }
    let data = vol.data();
    let (sx, sy, sz) = (1usize, d.nx, d.nx * d.ny);
    let (sum, sum2, count) = (1..d.nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut acc = (0.0f64, 0.0f64, 0usize);
            for y in 1..d.ny - 1 {
                for x in 1..d.nx - 1 {
                    let i = d.index(x, y, z);
                    let l = data[i - sx] as f64
                        + data[i + sx] as f64
                        + data[i - sy] as f64
                        + data[i + sy] as f64
                        + data[i - sz] as f64
                        + data[i + sz] as f64
                        - 6.0 * data[i] as f64;
                    acc.0 += l;
                    acc.1 += l * l;
                    acc.2 += 1;
                }
            }
            acc
        })
        .reduce(|| (0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = count as f64;
    let var = (sum2 / n - (sum / n).powi(2)).max(0.0);
    var.sqrt() / 42f64.sqrt()
}

/// Non-local means restricted to a cubic search window.
///
/// For every search offset `o` the squared difference image
/// `E_o(p) = (I(p) - I(p + o))^2` (zero where `p` or `p + o` leaves the
/// grid) is convolved with the separable patch kernel; this yields the
/// Gaussian-weighted patch distance between `x` and `x + o` with
/// out-of-grid summands dropped.
pub fn nonlocal_means(vol: &ScalarVolume, p: &NlmParams) -> Result<ScalarVolume> {
    p.validate()?;
    let d = vol.dims();
    let n = d.len();
    let img = to_f64(vol);
    let kernel = gaussian_kernel(p.sigma, p.patch_radius);
    let inv_h2 = 1.0 / (p.h * p.h);
    let s = p.search_radius as i64;

    let mut acc_w = vec![0.0f64; n];
    let mut acc_v = vec![0.0f64; n];
    let mut diff = vec![0.0f64; n];
    let mut tmp_a = vec![0.0f64; n];
    let mut tmp_b = vec![0.0f64; n];

    for oz in -s..=s {
        for oy in -s..=s {
            for ox in -s..=s {
                let shifted = |i: usize| -> Option<usize> {
                    let (x, y, z) = d.coords(i);
                    d.checked_index(x as i64 + ox, y as i64 + oy, z as i64 + oz)
                };
                diff.par_iter_mut().enumerate().for_each(|(i, e)| {
                    *e = match shifted(i) {
                        Some(j) => {
                            let t = img[i] - img[j];
                            t * t
                        }
                        None => 0.0,
                    };
                });
                convolve_axis(&diff, d, &kernel, 0, Border::Zero, &mut tmp_a);
                convolve_axis(&tmp_a, d, &kernel, 1, Border::Zero, &mut tmp_b);
                convolve_axis(&tmp_b, d, &kernel, 2, Border::Zero, &mut tmp_a);
                acc_w
                    .par_iter_mut()
                    .zip(acc_v.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, (w_acc, v_acc))| {
                        if let Some(j) = shifted(i) {
                            let w = (-tmp_a[i] * inv_h2).exp();
                            *w_acc += w;
                            *v_acc += w * img[j];
                        }
                    });
            }
        }
    }
    let data = acc_v
        .par_iter()
        .zip(acc_w.par_iter())
        .map(|(&v, &w)| to_u16(v / w))
        .collect();
    vol.with_data(data)
}
