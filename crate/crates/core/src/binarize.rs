//! Foreground extraction: Sauvola local thresholds, opening by a digital
//! ball, and the exact Euclidean distance transform.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{BinaryVolume, Dims, RealGrid, ScalarVolume};

/// Sauvola threshold parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SauvolaParams {
    /// Half size of the cuboidal window, in voxels.
    pub window_radius: usize,
    /// Sensitivity; larger values lower the threshold less.
    pub k: f64,
    /// Dynamic range of the standard deviation.
    pub r: f64,
}

impl Default for SauvolaParams {
    fn default() -> Self {
        SauvolaParams {
            window_radius: 15,
            k: 0.34,
            r: 32768.0,
        }
    }
}

impl SauvolaParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 {
            return Err(Error::InvalidParameter("Sauvola window_radius must be >= 1".into()));
        }
        if !(0.2..=0.5).contains(&self.k) {
            return Err(Error::InvalidParameter(format!(
                "Sauvola k must lie in [0.2, 0.5], got {}",
                self.k
            )));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidParameter(format!("Sauvola R must be > 0, got {}", self.r)));
        }
        Ok(())
    }
}

/// Summed-volume tables of `I` and `I^2` with a zero border, so that any
/// clipped window sum is eight lookups.
struct IntegralVolume {
    dims: Dims,
    sum: Vec<u64>,
    sum_sq: Vec<u64>,
}

impl IntegralVolume {
    fn new(vol: &ScalarVolume) -> Self {
        let d = vol.dims();
        let (sx, sy) = (d.nx + 1, d.ny + 1);
        let len = sx * sy * (d.nz + 1);
        let mut sum = vec![0u64; len];
        let mut sum_sq = vec![0u64; len];
        let data = vol.data();
        for z in 0..d.nz {
            for y in 0..d.ny {
                let mut row = 0u64;
                let mut row_sq = 0u64;
                for x in 0..d.nx {
                    let v = data[d.index(x, y, z)] as u64;
                    row += v;
                    row_sq += v * v;
                    let i = (x + 1) + sx * ((y + 1) + sy * (z + 1));
                    let above = (x + 1) + sx * (y + sy * (z + 1));
                    let behind = (x + 1) + sx * ((y + 1) + sy * z);
                    let both = (x + 1) + sx * (y + sy * z);
                    // S(x,y,z) = row + S(x,y-1,z) + S(x,y,z-1) - S(x,y-1,z-1)
                    sum[i] = row
                        .wrapping_add(sum[above])
                        .wrapping_add(sum[behind])
                        .wrapping_sub(sum[both]);
                    sum_sq[i] = row_sq
                        .wrapping_add(sum_sq[above])
                        .wrapping_add(sum_sq[behind])
                        .wrapping_sub(sum_sq[both]);
                }
            }
        }
        IntegralVolume { dims: d, sum, sum_sq }
    }

    /// Sums over the half-open box `[lo, hi)`.
    fn box_sums(&self, lo: [usize; 3], hi: [usize; 3]) -> (u64, u64) {
        let (sx, sy) = (self.dims.nx + 1, self.dims.ny + 1);
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        let corners = [
            (at(hi[0], hi[1], hi[2]), true),
            (at(lo[0], hi[1], hi[2]), false),
            (at(hi[0], lo[1], hi[2]), false),
            (at(hi[0], hi[1], lo[2]), false),
            (at(lo[0], lo[1], hi[2]), true),
            (at(lo[0], hi[1], lo[2]), true),
            (at(hi[0], lo[1], lo[2]), true),
            (at(lo[0], lo[1], lo[2]), false),
        ];
        let mut s = 0u64;
        let mut s2 = 0u64;
        for (i, plus) in corners {
            if plus {
                s = s.wrapping_add(self.sum[i]);
                s2 = s2.wrapping_add(self.sum_sq[i]);
            } else {
                s = s.wrapping_sub(self.sum[i]);
                s2 = s2.wrapping_sub(self.sum_sq[i]);
            }
        }
        (s, s2)
    }
}

/// Local mean and (population) standard deviation over the window clipped
/// to the volume. The variance is formed exactly in integer arithmetic.
pub fn local_mean_std(vol: &ScalarVolume, window_radius: usize) -> (Vec<f64>, Vec<f64>) {
    let d = vol.dims();
    let table = IntegralVolume::new(vol);
    let r = window_radius;
    let stats: Vec<(f64, f64)> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = d.coords(i);
            let lo = [x.saturating_sub(r), y.saturating_sub(r), z.saturating_sub(r)];
            let hi = [(x + r + 1).min(d.nx), (y + r + 1).min(d.ny), (z + r + 1).min(d.nz)];
            let n = ((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2])) as u128;
            let (s, s2) = table.box_sums(lo, hi);
            let (s, s2) = (s as u128, s2 as u128);
            let var_num = n * s2 - s * s;
            let mean = s as f64 / n as f64;
            let var = var_num as f64 / (n * n) as f64;
            (mean, var.sqrt())
        })
        .collect();
    stats.into_iter().unzip()
}

/// Per-voxel Sauvola thresholds `t = m (1 + k (s / R - 1))`.
pub fn sauvola_thresholds(vol: &ScalarVolume, p: &SauvolaParams) -> Result<Vec<f64>> {
    p.validate()?;
    let (mean, std) = local_mean_std(vol, p.window_radius);
    Ok(mean
        .into_par_iter()
        .zip(std)
        .map(|(m, s)| m * (1.0 + p.k * (s / p.r - 1.0)))
        .collect())
}

/// `B(x) = 1` iff `I(x) >= t(x)`.
pub fn sauvola_binarize(vol: &ScalarVolume, p: &SauvolaParams) -> Result<BinaryVolume> {
    let t = sauvola_thresholds(vol, p)?;
    vol.with_data(
        vol.data()
            .par_iter()
            .zip(t.par_iter())
            .map(|(&v, &t)| v as f64 >= t)
            .collect(),
    )
}

/// Otsu's global threshold over the 16-bit histogram. Voxels `>=` the
/// returned value form the bright class.
pub fn otsu_threshold(vol: &ScalarVolume) -> u16 {
    let mut hist = vec![0u64; 65536];
    for &v in vol.data() {
        hist[v as usize] += 1;
    }
    let total = vol.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0u16);
    for (t, &c) in hist.iter().enumerate().take(65535) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = (t + 1) as u16;
        }
    }
    best_t
}

/// Lower bound applied on top of the local thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Floor {
    /// Pure Sauvola.
    None,
    /// Otsu's global threshold of the input.
    #[default]
    Otsu,
    Fixed(f64),
}

/// Full binarization stage: Sauvola thresholds, optional global floor,
/// then opening by a ball (`open_radius = 0` skips it).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarizeParams {
    pub sauvola: SauvolaParams,
    pub floor: Floor,
    pub open_radius: usize,
}

impl Default for BinarizeParams {
    fn default() -> Self {
        BinarizeParams {
            sauvola: SauvolaParams::default(),
            floor: Floor::Otsu,
            open_radius: 1,
        }
    }
}

pub fn binarize(vol: &ScalarVolume, p: &BinarizeParams) -> Result<BinaryVolume> {
    let t = sauvola_thresholds(vol, &p.sauvola)?;
    let floor = match p.floor {
        Floor::None => f64::NEG_INFINITY,
        Floor::Otsu => otsu_threshold(vol) as f64,
        Floor::Fixed(f) => f,
    };
    let mask = vol.with_data(
        vol.data()
            .par_iter()
            .zip(t.par_iter())
            .map(|(&v, &t)| v as f64 >= t && v as f64 >= floor)
            .collect(),
    )?;
    if p.open_radius == 0 {
        Ok(mask)
    } else {
        morphological_opening(&mask, p.open_radius)
    }
}

/// Lattice offsets of the digital ball `{z : |z| <= radius}`.
pub fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Minkowski difference; voxels outside the volume count as background.
pub fn erode(mask: &BinaryVolume, offsets: &[[i64; 3]]) -> BinaryVolume {
    let d = mask.dims();
    let data = (0..d.len())
        .into_par_iter()
        .map(|i| {
            if !*mask.at(i) {
                return false;
            }
            let (x, y, z) = d.coords(i);
            offsets.iter().all(|o| {
                mask.get_checked(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2])
                    .copied()
                    .unwrap_or(false)
            })
        })
        .collect();
    mask.with_data(data).expect("same geometry")
}

/// Minkowski sum with the offset set.
pub fn dilate(mask: &BinaryVolume, offsets: &[[i64; 3]]) -> BinaryVolume {
    let d = mask.dims();
    let data = (0..d.len())
        .into_par_iter()
        .map(|i| {
            if *mask.at(i) {
                return true;
            }
            let (x, y, z) = d.coords(i);
            offsets.iter().any(|o| {
                mask.get_checked(x as i64 - o[0], y as i64 - o[1], z as i64 - o[2])
                    .copied()
                    .unwrap_or(false)
            })
        })
        .collect();
    mask.with_data(data).expect("same geometry")
}

/// Opening `(A erode ball) dilate ball`.
pub fn morphological_opening(mask: &BinaryVolume, radius: usize) -> Result<BinaryVolume> {
    if radius < 1 {
        return Err(Error::InvalidParameter("opening radius must be >= 1".into()));
    }
    let ball = ball_offsets(radius);
    Ok(dilate(&erode(mask, &ball), &ball))
}

/// Stand-in for "no background in range" inside the parabola passes.
const FAR: f64 = 1e20;

/// Lower envelope of parabolas `f(q) + (p - q)^2` for one line.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= zb[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= zb[k] {
                // k == 0: the new parabola dominates everywhere.
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                zb[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            zb[k] = s;
            zb[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while zb[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dp = p as f64 - q as f64;
        *o = (dp * dp + f[q]).min(FAR);
    }
}

fn edt_pass(src: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let (len, stride, lines): (usize, usize, Vec<usize>) = match axis {
        0 => (nx, 1, (0..ny * nz).map(|r| r * nx).collect()),
        1 => (
            ny,
            nx,
            (0..nz).flat_map(|z| (0..nx).map(move |x| x + nx * ny * z)).collect(),
        ),
        _ => (nz, nx * ny, (0..nx * ny).collect()),
    };
    let results: Vec<Vec<f64>> = lines
        .par_iter()
        .map_init(
            || (vec![0.0; len], vec![0usize; len], vec![0.0; len + 1]),
            |(f, v, zb), &origin| {
                for (i, fi) in f.iter_mut().enumerate() {
                    *fi = src[origin + i * stride];
                }
                let mut out = vec![0.0; len];
                edt_line(f, &mut out, v, zb);
                out
            },
        )
        .collect();
    let mut dst = vec![0.0; src.len()];
    for (&origin, line) in lines.iter().zip(&results) {
        for (i, &val) in line.iter().enumerate() {
            dst[origin + i * stride] = val;
        }
    }
    dst
}

/// Squared Euclidean distance (voxel units) from every voxel to the nearest
/// background voxel center; background voxels are 0. Exact, by three
/// separable lower-envelope passes.
pub fn squared_distance_transform(mask: &BinaryVolume) -> Vec<f64> {
    let d = mask.dims();
    let init: Vec<f64> = mask.data().iter().map(|&b| if b { FAR } else { 0.0 }).collect();
    let a = edt_pass(&init, d, 0);
    let b = edt_pass(&a, d, 1);
    edt_pass(&b, d, 2)
}

/// Euclidean distance transform. A mask without any background voxel maps
/// to `f64::MAX` everywhere.
pub fn distance_transform(mask: &BinaryVolume) -> RealGrid {
    let sq = squared_distance_transform(mask);
    let data = sq
        .into_par_iter()
        .map(|v| if v >= FAR / 2.0 { f64::MAX } else { v.sqrt() })
        .collect();
    mask.with_data(data).expect("same geometry")
}
