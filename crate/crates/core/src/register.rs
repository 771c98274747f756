//! Rigid registration of a binary section inside a binary volume.
//!
//! For fixed rotation angles the best integer shift is found exactly by FFT
//! cross-correlation of every volume slice with the section; Nelder-Mead
//! searches the three Euler angles on a block-OR pyramid.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryPlane, BinaryVolume, Dims, Grid2, Grid3};

/// Euler angles (Z-Y-X intrinsic, radians) and an integer-valued shift of
/// the section, in voxels. The rotation pivots about the volume center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub angles: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            angles: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(self.angles)
    }

    /// Volume coordinates of section pixel `(u, v)`:
    /// `R^T ((u, v, 0) + t - c) + c`.
    pub fn plane_point(&self, dims: Dims, u: f64, v: f64) -> [f64; 3] {
        let c = Vector3::from(dims.center());
        let y = Vector3::new(u, v, 0.0) + Vector3::from(self.translation) - c;
        let p = self.rotation().transpose() * y + c;
        [p.x, p.y, p.z]
    }

    /// Nearest voxel hit by section pixel `(u, v)`, if inside the volume.
    pub fn plane_voxel(&self, dims: Dims, u: usize, v: usize) -> Option<usize> {
        let p = self.plane_point(dims, u as f64, v as f64);
        dims.checked_index(p[0].round() as i64, p[1].round() as i64, p[2].round() as i64)
    }

    pub fn angles_deg(&self) -> [f64; 3] {
        self.angles.map(f64::to_degrees)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.angles_deg();
        write!(
            f,
            "angles_deg {} {} {}\ntranslation {} {} {}",
            a[0], a[1], a[2], self.translation[0], self.translation[1], self.translation[2]
        )
    }
}

/// `Rz(a0) Ry(a1) Rx(a2)`.
pub fn rotation_matrix(angles: [f64; 3]) -> Matrix3<f64> {
    let (sz, cz) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sx, cx) = angles[2].sin_cos();
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    rz * ry * rx
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// `B_R(y) = B(round(R^T (y - c) + c))`, background outside the grid.
pub fn rotate_volume<T: Copy + Default + Send + Sync>(vol: &Grid3<T>, angles: [f64; 3]) -> Grid3<T> {
    if angles == [0.0; 3] {
        return vol.clone();
    }
    let data = rotate_slab(vol, angles, 0..vol.dims().nz);
    vol.with_data(data).expect("same geometry")
}

/// Slices `zs` of the rotated volume, concatenated.
fn rotate_slab<T: Copy + Default + Send + Sync>(vol: &Grid3<T>, angles: [f64; 3], zs: std::ops::Range<usize>) -> Vec<T> {
    let d = vol.dims();
    let rt = rotation_matrix(angles).transpose();
    let c = Vector3::from(d.center());
    let plane = d.nx * d.ny;
    let z0 = zs.start;
    let mut out = vec![T::default(); plane * zs.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        let z = z0 + k;
        let col = rt.column(0).into_owned();
        for y in 0..d.ny {
            let row = rt * (Vector3::new(0.0, y as f64, z as f64) - c) + c;
            for x in 0..d.nx {
                let p = row + col * x as f64;
                if let Some(v) = vol.get_checked(p.x.round() as i64, p.y.round() as i64, p.z.round() as i64) {
                    slab[x + d.nx * y] = *v;
                }
            }
        }
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TranslationResult {
    pub shift: [i64; 3],
    pub overlap: u64,
    /// Set when the section has no foreground.
    pub empty_plane: bool,
}

/// Orders candidates by score, then by lexicographically smaller shift.
fn better(a: (f64, [i64; 3]), b: (f64, [i64; 3])) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Voxel weight used in the correlation.
pub trait Weight: Copy + Send + Sync {
    /// Correlation scores are exact integers.
    const INTEGER: bool;
    fn weight(self) -> f64;
}

impl Weight for bool {
    const INTEGER: bool = true;
    fn weight(self) -> f64 {
        self as u8 as f64
    }
}

impl Weight for f64 {
    const INTEGER: bool = false;
    fn weight(self) -> f64 {
        self
    }
}

/// Smallest even `2^a 3^b 5^c 7^d >= n`.
pub fn fft_size(n: usize) -> usize {
    let mut m = n.max(2);
    loop {
        if m % 2 == 0 {
            let mut r = m;
            for p in [2, 3, 5, 7] {
                while r % p == 0 {
                    r /= p;
                }
            }
            if r == 1 {
                return m;
            }
        }
        m += 1;
    }
}

/// Precomputed FFT plans and section spectrum for repeated correlation
/// against volumes of one cross-section size.
pub struct Correlator {
    nx: usize,
    ny: usize,
    pw: usize,
    ph: usize,
    fx: usize,
    fy: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    plane_spec: Vec<Complex<f64>>,
    plane_mass: f64,
    /// Binary inputs: scores are rounded to exact counts.
    integer: bool,
}

impl Correlator {
    pub fn new<T: Weight>(vol_dims: Dims, plane: &Grid2<T>) -> Result<Self> {
        let (pw, ph) = (plane.nx(), plane.ny());
        if pw > vol_dims.nx || ph > vol_dims.ny {
            return Err(Error::Dimension(format!(
                "section {pw}x{ph} larger than volume cross-section {}x{}",
                vol_dims.nx, vol_dims.ny
            )));
        }
        let fx = fft_size(vol_dims.nx + pw - 1);
        let fy = fft_size(vol_dims.ny + ph - 1);
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        let mut c = Correlator {
            nx: vol_dims.nx,
            ny: vol_dims.ny,
            pw,
            ph,
            fx,
            fy,
            r2c: rp.plan_fft_forward(fx),
            c2r: rp.plan_fft_inverse(fx),
            col_fwd: cp.plan_fft_forward(fy),
            col_inv: cp.plan_fft_inverse(fy),
            plane_spec: Vec::new(),
            plane_mass: 0.0,
            integer: T::INTEGER,
        };
        let mut img = vec![0.0; fx * fy];
        for v in 0..ph {
            for u in 0..pw {
                let w = plane.get(u, v).weight();
                img[u + fx * v] = w;
                c.plane_mass += w;
            }
        }
        c.plane_spec = c.forward(&mut img);
        Ok(c)
    }

    /// Sum of section weights (foreground count for binary sections).
    pub fn plane_mass(&self) -> f64 {
        self.plane_mass
    }

    fn half(&self) -> usize {
        self.fx / 2 + 1
    }

    /// 2D spectrum laid out as `fy` rows of `fx / 2 + 1` bins.
    fn forward(&self, img: &mut [f64]) -> Vec<Complex<f64>> {
        let h = self.half();
        let mut spec = vec![Complex::new(0.0, 0.0); h * self.fy];
        for (row, out) in img.chunks_mut(self.fx).zip(spec.chunks_mut(h)) {
            self.r2c.process(row, out).expect("sizes match plan");
        }
        let mut col = vec![Complex::new(0.0, 0.0); self.fy];
        for k in 0..h {
            for y in 0..self.fy {
                col[y] = spec[k + h * y];
            }
            self.col_fwd.process(&mut col);
            for y in 0..self.fy {
                spec[k + h * y] = col[y];
            }
        }
        spec
    }

    fn inverse(&self, spec: &mut [Complex<f64>]) -> Vec<f64> {
        let h = self.half();
        let mut col = vec![Complex::new(0.0, 0.0); self.fy];
        for k in 0..h {
            for y in 0..self.fy {
                col[y] = spec[k + h * y];
            }
            self.col_inv.process(&mut col);
            for y in 0..self.fy {
                spec[k + h * y] = col[y];
            }
        }
        let mut img = vec![0.0; self.fx * self.fy];
        for (row, out) in spec.chunks_mut(h).zip(img.chunks_mut(self.fx)) {
            row[0].im = 0.0;
            row[h - 1].im = 0.0;
            self.c2r.process(row, out).expect("sizes match plan");
        }
        let norm = 1.0 / (self.fx * self.fy) as f64;
        img.iter_mut().for_each(|v| *v *= norm);
        img
    }

    /// Best in-plane shift for one slice.
    fn slice_best<T: Weight>(&self, slice: &[T]) -> (f64, [i64; 2]) {
        let lo = [-(self.pw as i64 - 1), -(self.ph as i64 - 1)];
        let mut img = vec![0.0; self.fx * self.fy];
        let mut any = false;
        for y in 0..self.ny {
            for x in 0..self.nx {
                let w = slice[x + self.nx * y].weight();
                if w != 0.0 {
                    img[x + self.fx * y] = w;
                    any = true;
                }
            }
        }
        if !any {
            return (0.0, lo);
        }
        // Zero-mean sections give negative scores, so start below any value.
        let mut spec = self.forward(&mut img);
        for (s, p) in spec.iter_mut().zip(&self.plane_spec) {
            *s *= p.conj();
        }
        let corr = self.inverse(&mut spec);
        let mut best = (f64::NEG_INFINITY, lo);
        for s2 in lo[1]..self.ny as i64 {
            let iy = s2.rem_euclid(self.fy as i64) as usize;
            for s1 in lo[0]..self.nx as i64 {
                let ix = s1.rem_euclid(self.fx as i64) as usize;
                let mut v = corr[ix + self.fx * iy];
                if self.integer {
                    v = v.round().max(0.0);
                }
                // Scan order is lexicographic in (s1, s2) only per row; compare explicitly.
                if v > best.0 || (v == best.0 && (s1, s2) < (best.1[0], best.1[1])) {
                    best = (v, [s1, s2]);
                }
            }
        }
        best
    }

    /// Maximal score and its shift over all shifts with partial overlap.
    pub fn best_score<T: Weight>(&self, vol: &Grid3<T>) -> Result<(f64, [i64; 3])> {
        let d = vol.dims();
        if d.nx != self.nx || d.ny != self.ny {
            return Err(Error::Dimension("volume does not match correlator".into()));
        }
        Ok(self.best_in_slices(vol.data(), 0))
    }

    /// Best score over consecutive slices starting at depth `z0`.
    fn best_in_slices<T: Weight>(&self, data: &[T], z0: usize) -> (f64, [i64; 3]) {
        let plane = self.nx * self.ny;
        let per_slice: Vec<(f64, [i64; 3])> = data
            .par_chunks(plane)
            .enumerate()
            .map(|(k, s)| {
                let (v, [a, b]) = self.slice_best(s);
                (v, [a, b, (z0 + k) as i64])
            })
            .collect();
        let mut best = per_slice[0];
        for &c in &per_slice[1..] {
            if better(c, best) {
                best = c;
            }
        }
        best
    }

    /// Best score of the rotated volume restricted to depths `zs`.
    fn rotated_score<T: Weight + Default>(&self, vol: &Grid3<T>, angles: [f64; 3], zs: std::ops::Range<usize>) -> (f64, [i64; 3]) {
        let z0 = zs.start;
        self.best_in_slices(&rotate_slab(vol, angles, zs), z0)
    }

    /// Exact maximizer of the binary overlap.
    pub fn best_translation(&self, vol: &BinaryVolume) -> Result<TranslationResult> {
        if self.plane_mass == 0.0 {
            return Ok(TranslationResult {
                shift: [0; 3],
                overlap: 0,
                empty_plane: true,
            });
        }
        let (v, shift) = self.best_score(vol)?;
        Ok(TranslationResult {
            shift,
            overlap: v as u64,
            empty_plane: false,
        })
    }
}

/// Integer shift `x` maximizing `sum_y B_R(y) B_plane(y - x)` with the
/// section embedded at `x3 = 0`; ties go to the lexicographically
/// smallest `(x1, x2, x3)`.
pub fn best_translation(vol: &BinaryVolume, plane: &BinaryPlane) -> Result<TranslationResult> {
    Correlator::new(vol.dims(), plane)?.best_translation(vol)
}

/// Overlap of the section placed at `shift` in `vol`.
pub fn overlap_at(vol: &BinaryVolume, plane: &BinaryPlane, shift: [i64; 3]) -> u64 {
    let mut n = 0;
    for v in 0..plane.ny() {
        for u in 0..plane.nx() {
            if *plane.get(u, v) {
                if let Some(&b) = vol.get_checked(u as i64 + shift[0], v as i64 + shift[1], shift[2]) {
                    n += b as u64;
                }
            }
        }
    }
    n
}

/// Foreground fraction of `f^3` blocks; voxels beyond the far faces count
/// as background.
pub fn block_mean_volume(vol: &BinaryVolume, f: usize) -> Grid3<f64> {
    let d = vol.dims();
    let nd = Dims::new(d.nx.div_ceil(f), d.ny.div_ceil(f), d.nz.div_ceil(f));
    let mut out = vec![0.0; nd.len()];
    let w = 1.0 / (f * f * f) as f64;
    for i in 0..d.len() {
        if *vol.at(i) {
            let (x, y, z) = d.coords(i);
            out[nd.index(x / f, y / f, z / f)] += w;
        }
    }
    Grid3::from_vec(nd, vol.spacing() * f as f64, out).expect("valid dims")
}

pub fn block_mean_plane(plane: &BinaryPlane, f: usize) -> Grid2<f64> {
    let (nx, ny) = (plane.nx().div_ceil(f), plane.ny().div_ceil(f));
    let mut out = vec![0.0; nx * ny];
    let w = 1.0 / (f * f) as f64;
    for y in 0..plane.ny() {
        for x in 0..plane.nx() {
            if *plane.get(x, y) {
                out[x / f + nx * (y / f)] += w;
            }
        }
    }
    Grid2::from_vec(nx, ny, plane.spacing() * f as f64, out).expect("valid dims")
}

/// Outcome of a Nelder-Mead minimization.
#[derive(Clone, Debug)]
pub struct SimplexResult {
    pub x: [f64; 3],
    pub value: f64,
    pub iterations: usize,
    /// Best value after each iteration.
    pub trace: Vec<f64>,
}

/// Nelder-Mead on three parameters with coefficients (1, 2, 0.5, 0.5).
/// The initial simplex is `x0` and `x0 + step_i e_i`; iteration stops once
/// the spread of vertex values is below `tol` or after `max_iter` steps.
pub fn nelder_mead(mut f: impl FnMut(&[f64; 3]) -> f64, x0: [f64; 3], step: [f64; 3], max_iter: usize, tol: f64) -> SimplexResult {
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((x0, f(&x0)));
    for i in 0..3 {
        let mut p = x0;
        p[i] += step[i];
        simplex.push((p, f(&p)));
    }
    let lerp = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
    };
    let mut trace = Vec::new();
    let mut it = 0;
    loop {
        // Stable sort keeps earlier vertices first among equal values.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[3].1 - simplex[0].1 < tol || it >= max_iter {
            break;
        }
        it += 1;
        let mut centroid = [0.0; 3];
        for v in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += v.0[k] / 3.0;
            }
        }
        let worst = simplex[3];
        let xr = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&xe);
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = lerp(&centroid, &xr, 0.5);
                (xc, f(&xc))
            } else {
                let xc = lerp(&centroid, &worst.0, 0.5);
                (xc, f(&xc))
            };
            if fc < worst.1.min(fr) {
                simplex[3] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let p = lerp(&best, &v.0, 0.5);
                    *v = (p, f(&p));
                }
            }
        }
        trace.push(simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min));
    }
    SimplexResult {
        x: simplex[0].0,
        value: simplex[0].1,
        iterations: it,
        trace,
    }
}

/// Nelder-Mead restarted from its optimum with a fresh simplex until a run
/// brings no improvement.
fn restarted_simplex(
    mut f: impl FnMut(&[f64; 3]) -> f64,
    x0: [f64; 3],
    step: [f64; 3],
    max_iter: usize,
    tol: f64,
) -> SimplexResult {
    const RESTARTS: usize = 3;
    let mut res = nelder_mead(&mut f, x0, step, max_iter, tol);
    for _ in 0..RESTARTS {
        let next = nelder_mead(&mut f, res.x, step, max_iter, tol);
        let improved = next.value < res.value - tol;
        res.iterations += next.iterations;
        res.trace.extend(next.trace.iter().map(|v| v.min(res.value)));
        if next.value < res.value {
            res.x = next.x;
            res.value = next.value;
        }
        if !improved {
            break;
        }
    }
    res
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterOptions {
    /// Downsampling factors, coarsest first; must end with 1.
    pub pyramid: Vec<usize>,
    pub max_iter: usize,
    pub initial_angles: [f64; 3],
    /// Initial simplex step at the coarsest level, degrees.
    pub coarse_step_deg: f64,
    /// Initial simplex step at the finest level, degrees.
    pub fine_step_deg: f64,
    /// Extra coarse-level starts at `initial ± offset` along each axis,
    /// degrees; 0 disables them.
    pub start_offset_deg: f64,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            pyramid: vec![4, 2, 1],
            max_iter: 200,
            initial_angles: [0.0; 3],
            coarse_step_deg: 5.0,
            fine_step_deg: 1.0,
            start_offset_deg: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub overlap: u64,
    pub normalized_overlap: f64,
    /// `(iteration, overlap)` over all levels, iterations counted globally.
    pub trace: Vec<(usize, f64)>,
    /// Overlap of the coarse-level optimum re-evaluated at full resolution.
    pub coarse_overlap_at_fine: u64,
}

impl RegistrationResult {
    /// Below half of the section matched.
    pub fn is_degenerate(&self) -> bool {
        self.normalized_overlap < 0.5
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}\noverlap {}\nnormalized_overlap {}\n",
            self.transform, self.overlap, self.normalized_overlap
        )
    }

    /// Reads the transform back from `to_text` output.
    pub fn parse_transform(text: &str) -> Result<RigidTransform> {
        let mut angles = None;
        let mut translation = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let key = it.next();
            let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| Error::Parse(format!("bad number in line '{line}'")))?;
            match key {
                Some("angles_deg") if vals.len() == 3 => {
                    angles = Some([vals[0].to_radians(), vals[1].to_radians(), vals[2].to_radians()])
                }
                Some("translation") if vals.len() == 3 => translation = Some([vals[0], vals[1], vals[2]]),
                _ => {}
            }
        }
        match (angles, translation) {
            (Some(angles), Some(translation)) => Ok(RigidTransform { angles, translation }),
            _ => Err(Error::Parse("registration result lacks angles_deg or translation".into())),
        }
    }
}

/// Coarse-to-fine rigid registration of `plane` in `vol`.
pub fn register_section(vol: &BinaryVolume, plane: &BinaryPlane, opts: &RegisterOptions) -> Result<RegistrationResult> {
    if opts.pyramid.is_empty() || *opts.pyramid.last().unwrap() != 1 || opts.pyramid.contains(&0) {
        return Err(Error::InvalidParameter("pyramid must be non-empty, positive and end with 1".into()));
    }
    let count = plane.count() as u64;
    if count == 0 {
        return Err(Error::Empty("section has no foreground".into()));
    }
    let levels = opts.pyramid.len();
    let mut angles = opts.initial_angles;
    let mut trace = Vec::new();
    let mut iter_base = 0;
    let mut coarse_overlap_at_fine = 0;
    let mut final_t = None;
    // Depth of the section in full-resolution voxels, once known.
    let mut depth: Option<(f64, usize)> = None;
    for (li, &f) in opts.pyramid.iter().enumerate() {
        let step_deg = if levels == 1 {
            opts.fine_step_deg
        } else {
            let t = li as f64 / (levels - 1) as f64;
            opts.coarse_step_deg * (opts.fine_step_deg / opts.coarse_step_deg).powf(t)
        };
        let step = [step_deg.to_radians(); 3];
        let (v, p) = if f == 1 {
            (vol.map(|&b| b as u8 as f64), plane.map(|&b| b as u8 as f64))
        } else {
            (block_mean_volume(vol, f), block_mean_plane(plane, f))
        };
        let nz = v.dims().nz;
        let zs = match depth {
            Some((z, prev)) => {
                let c = (z - (f as f64 - 1.0) / 2.0) / f as f64;
                let half = (3 * prev / f).max(4) as f64;
                let lo = (c - half).floor().max(0.0) as usize;
                let hi = ((c + half).ceil() as usize + 1).min(nz);
                if lo < hi { lo..hi } else { 0..nz }
            }
            None => 0..nz,
        };
        let mut centered = p.clone();
        let mean = centered.data().iter().sum::<f64>() / centered.len() as f64;
        centered.data_mut().iter_mut().for_each(|x| *x -= mean);
        let tol = 1e-3 * mean * centered.len() as f64;
        let corr = Correlator::new(v.dims(), &centered)?;
        let mut starts = vec![angles];
        if (li == 0 || f == 1) && opts.start_offset_deg > 0.0 {
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut a = angles;
                    a[axis] += sign * opts.start_offset_deg.to_radians();
                    starts.push(a);
                }
            }
        }
        let mut res: Option<SimplexResult> = None;
        for x0 in starts {
            let r = restarted_simplex(|a| -corr.rotated_score(&v, *a, zs.clone()).0, x0, step, opts.max_iter, tol);
            res = match res {
                Some(mut best) => {
                    best.iterations += r.iterations;
                    if r.value < best.value {
                        best.x = r.x;
                        best.value = r.value;
                        best.trace.extend(r.trace.iter().map(|v| v.min(best.value)));
                    }
                    Some(best)
                }
                None => Some(r),
            };
        }
        let mut res = res.expect("at least one start");
        if f == 1 {
            let corr = Correlator::new(vol.dims(), plane)?;
            let overlap = |a: &[f64; 3]| -> f64 { -corr.rotated_score(vol, *a, zs.clone()).0 };
            coarse_overlap_at_fine = corr.best_score(&rotate_volume(vol, angles))?.0 as u64;
            let polish = restarted_simplex(overlap, res.x, step, opts.max_iter, 1.0);
            res.iterations += polish.iterations;
            res.trace = polish.trace.clone();
            res.x = polish.x;
            final_t = Some(corr.best_translation(&rotate_volume(vol, res.x))?);
            if final_t.unwrap().overlap < coarse_overlap_at_fine {
                res.x = angles;
                final_t = Some(corr.best_translation(&rotate_volume(vol, angles))?);
            }
        } else {
            let z = corr.rotated_score(&v, res.x, 0..nz).1[2];
            depth = Some((z as f64 * f as f64 + (f as f64 - 1.0) / 2.0, f));
        }
        for (k, val) in res.trace.iter().enumerate() {
            trace.push((iter_base + k + 1, -val));
        }
        iter_base += res.iterations;
        angles = res.x;
    }
    let t = final_t.expect("pyramid ends with 1");
    let transform = RigidTransform {
        angles: angles.map(wrap_angle),
        translation: t.shift.map(|s| s as f64),
    };
    Ok(RegistrationResult {
        transform,
        overlap: t.overlap,
        normalized_overlap: t.overlap as f64 / count as f64,
        trace,
        coarse_overlap_at_fine,
    })
}

/// Section seen by `transform`: pixel `(u, v)` of a `pw x ph` plane takes
/// the nearest voxel value, background outside the volume.
pub fn sample_section<T: Copy + Default>(
    vol: &crate::volgrid::Grid3<T>,
    transform: &RigidTransform,
    pw: usize,
    ph: usize,
) -> Grid2<T> {
    let d = vol.dims();
    let mut data = vec![T::default(); pw * ph];
    for v in 0..ph {
        for u in 0..pw {
            if let Some(i) = transform.plane_voxel(d, u, v) {
                data[u + pw * v] = *vol.at(i);
            }
        }
    }
    Grid2::from_vec(pw, ph, vol.spacing(), data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(d: Dims, p: f64, seed: u64) -> BinaryVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid3::from_vec(d, 1.0, (0..d.len()).map(|_| rng.gen_bool(p)).collect()).unwrap()
    }

    fn random_plane(w: usize, h: usize, p: f64, seed: u64) -> BinaryPlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid2::from_vec(w, h, 1.0, (0..w * h).map(|_| rng.gen_bool(p)).collect()).unwrap()
    }

    fn brute_translation(vol: &BinaryVolume, plane: &BinaryPlane) -> ([i64; 3], u64) {
        let d = vol.dims();
        let mut best = (0.0, [i64::MAX; 3]);
        for x1 in -(plane.nx() as i64 - 1)..d.nx as i64 {
            for x2 in -(plane.ny() as i64 - 1)..d.ny as i64 {
                for x3 in 0..d.nz as i64 {
                    let v = overlap_at(vol, plane, [x1, x2, x3]) as f64;
                    if better((v, [x1, x2, x3]), best) {
                        best = (v, [x1, x2, x3]);
                    }
                }
            }
        }
        (best.1, best.0 as u64)
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = rotation_matrix([0.3, -1.1, 2.0]);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let rz = rotation_matrix([PI / 2.0, 0.0, 0.0]);
        let e = rz * Vector3::new(1.0, 0.0, 0.0);
        assert!((e - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let v = random_volume(Dims::new(9, 7, 5), 0.4, 1);
        assert_eq!(rotate_volume(&v, [0.0; 3]), v);
    }

    #[test]
    fn quarter_turn_about_z_permutes_indices() {
        let n = 9;
        let d = Dims::new(n, n, 4);
        let v = random_volume(d, 0.3, 2);
        let r = rotate_volume(&v, [PI / 2.0, 0.0, 0.0]);
        // Output (x, y) samples R^T((x, y) - c) + c = (y, n-1-x).
        for z in 0..4 {
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(r.get(x, y, z), v.get(y, n - 1 - x, z));
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_mostly_agrees() {
        let d = Dims::cube(40);
        let mut m = Grid3::filled(d, 1.0, false).unwrap();
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let (a, b, c) = (x as f64 - 18.0, y as f64 - 21.0, z as f64 - 20.0);
            if (a / 14.0).powi(2) + (b / 9.0).powi(2) + (c / 11.0).powi(2) <= 1.0 {
                m.data_mut()[i] = true;
            }
        }
        let ang = [0.15, -0.1, 0.12];
        let rt = rotation_matrix(ang);
        let c = Vector3::from(d.center());
        let mut inv = vec![false; d.len()];
        let once = rotate_volume(&m, ang);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let p = rt * (Vector3::new(x as f64, y as f64, z as f64) - c) + c;
            if let Some(&b) = once.get_checked(p.x.round() as i64, p.y.round() as i64, p.z.round() as i64) {
                inv[i] = b;
            }
        }
        let agree = inv.iter().zip(m.data()).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.98 * d.len() as f64);
    }

    #[test]
    fn translation_finds_true_slice() {
        let v = random_volume(Dims::new(20, 18, 10), 0.5, 3);
        let (a, b, c) = (5usize, 3usize, 7usize);
        let plane = Grid2::from_vec(8, 6, 1.0, (0..48).map(|i| *v.get(a + i % 8, b + i / 8, c)).collect()).unwrap();
        let t = best_translation(&v, &plane).unwrap();
        assert_eq!(t.shift, [5, 3, 7]);
        assert_eq!(t.overlap, plane.count() as u64);
    }

    #[test]
    fn translation_matches_brute_force() {
        for seed in 0..4 {
            let v = random_volume(Dims::cube(16), 0.45, seed);
            let p = random_plane(8, 8, 0.5, seed + 100);
            let t = best_translation(&v, &p).unwrap();
            let (s, o) = brute_translation(&v, &p);
            assert_eq!((t.shift, t.overlap), (s, o));
        }
    }

    #[test]
    fn empty_plane_is_flagged() {
        let v = random_volume(Dims::cube(6), 0.5, 4);
        let p = Grid2::filled(3, 3, 1.0, false).unwrap();
        let t = best_translation(&v, &p).unwrap();
        assert!(t.empty_plane);
        assert_eq!((t.shift, t.overlap), ([0, 0, 0], 0));
        assert!(register_section(&v, &p, &RegisterOptions::default()).is_err());
    }

    #[test]
    fn ties_prefer_smallest_shift() {
        let v = Grid3::filled(Dims::new(5, 5, 3), 1.0, true).unwrap();
        let p = Grid2::filled(2, 2, 1.0, true).unwrap();
        let t = best_translation(&v, &p).unwrap();
        assert_eq!((t.shift, t.overlap), ([0, 0, 0], 4));
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let r = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2) + 0.5 * (x[2] - 2.0).powi(2),
            [0.0; 3],
            [0.5; 3],
            500,
            1e-14,
        );
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] + 0.5).abs() < 1e-5 && (r.x[2] - 2.0).abs() < 1e-5);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    fn blob_volume(n: usize, seed: u64) -> BinaryVolume {
        let d = Dims::cube(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let balls: Vec<([f64; 3], f64)> = (0..n * n * n / 1500)
            .map(|_| {
                let c = [0; 3].map(|_| rng.gen_range(4.0..n as f64 - 4.0));
                (c, rng.gen_range(2.5..6.0))
            })
            .collect();
        let data = (0..d.len())
            .map(|i| {
                let (x, y, z) = d.coords(i);
                balls.iter().any(|(c, r)| {
                    (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
                })
            })
            .collect();
        Grid3::from_vec(d, 1.0, data).unwrap()
    }

    #[test]
    fn identity_section_is_recovered_exactly() {
        let v = blob_volume(48, 7);
        let k = 20;
        let plane = Grid2::from_vec(48, 48, 1.0, (0..48 * 48).map(|i| *v.get(i % 48, i / 48, k)).collect()).unwrap();
        let r = register_section(&v, &plane, &RegisterOptions::default()).unwrap();
        assert_eq!(r.transform.translation, [0.0, 0.0, k as f64]);
        assert_eq!(r.normalized_overlap, 1.0);
        assert!(r.overlap >= r.coarse_overlap_at_fine);
    }

    #[test]
    fn rotated_section_is_recovered() {
        let v = blob_volume(64, 9);
        let truth = RigidTransform {
            angles: [4f64.to_radians(), -3f64.to_radians(), 5f64.to_radians()],
            translation: [6.0, -4.0, 30.0],
        };
        let plane = sample_section(&v, &truth, 52, 52);
        let r = register_section(&v, &plane, &RegisterOptions::default()).unwrap();
        for k in 0..3 {
            assert!((r.transform.translation[k] - truth.translation[k]).abs() <= 1.0, "{:?}", r.transform);
            assert!((r.transform.angles[k] - truth.angles[k]).abs().to_degrees() <= 1.0, "{:?}", r.transform);
        }
        assert!(r.overlap >= r.coarse_overlap_at_fine);
    }

    #[test]
    fn result_text_round_trip() {
        let t = RigidTransform {
            angles: [0.1, -0.2, 0.05],
            translation: [3.0, -1.0, 7.0],
        };
        let res = RegistrationResult {
            transform: t,
            overlap: 10,
            normalized_overlap: 0.5,
            trace: vec![],
            coarse_overlap_at_fine: 0,
        };
        let back = RegistrationResult::parse_transform(&res.to_text()).unwrap();
        for k in 0..3 {
            assert!((back.angles[k] - t.angles[k]).abs() < 1e-12);
        }
        assert_eq!(back.translation, t.translation);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fft_translation_equals_enumeration(seed in any::<u64>(), nz in 1usize..6, pw in 1usize..7, ph in 1usize..7, p in 0.05f64..0.95) {
            let v = random_volume(Dims::new(9, 8, nz), p, seed);
            let pl = random_plane(pw, ph, 0.6, seed ^ 1);
            prop_assume!(pl.count() > 0);
            let t = best_translation(&v, &pl).unwrap();
            let (s, o) = brute_translation(&v, &pl);
            prop_assert_eq!((t.shift, t.overlap), (s, o));
        }
    }
}
