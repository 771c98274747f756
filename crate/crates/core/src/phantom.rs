//! Synthetic particle packings with ground truth: grayscale volume,
//! particle labels, mineral sections under known rigid transforms and
//! labeled merge-edge datasets.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attenuation::MineralTable;
use crate::error::{Error, Result};
use crate::mergegraph::{EdgeFeatures, EdgeRecord, RegionGraph};
use crate::register::RigidTransform;
use crate::volgrid::{write_volume, AnyVolume, BinaryPlane, Dims, Grid2, Grid3, LabelPlane, LabelVolume, ScalarVolume};

/// Grayscale-to-attenuation line used for rendering: `rho mu_m = a I + b`.
pub const INSTRUMENT_SLOPE: f64 = 3.9e-5;
pub const INSTRUMENT_INTERCEPT: f64 = -0.17;

/// Grayscale of a material with the given `rho mu_m` on the instrument line.
pub fn instrument_gray(rho_mu: f64) -> f64 {
    (rho_mu - INSTRUMENT_INTERCEPT) / INSTRUMENT_SLOPE
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Voxel edge length, micrometers.
    pub spacing: f64,
    pub count: usize,
    /// Volume-equivalent sphere diameter range, micrometers.
    pub size_range: (f64, f64),
    /// Superellipsoid exponent range; 2 is an ellipsoid.
    pub exponent_range: (f64, f64),
    /// Long-to-short axis ratio of ordinary particles.
    pub aspect_range: (f64, f64),
    /// Share of particles drawn with `elongated_aspect`.
    pub elongated_fraction: f64,
    pub elongated_aspect: (f64, f64),
    /// Relative amplitude of the cross-section modulation along the long
    /// axis of elongated particles; 0 gives plain superellipsoids.
    pub waviness: f64,
    /// `(mineral code, fraction)`.
    pub minerals: Vec<(u8, f64)>,
    pub background: f64,
    pub noise_std: f64,
    /// Concentric ring bias amplitude as a fraction of 65535.
    pub ring_amplitude: f64,
    /// Ring period in voxels.
    pub ring_period: f64,
    /// Minimum Chebyshev distance between particles, voxels.
    pub gap: usize,
    pub sections: usize,
    /// Pixel size of the mineral sections, micrometers.
    pub mla_spacing: f64,
    pub max_angle_deg: f64,
    pub max_shift: i64,
    /// Section side length relative to the volume's x and y extent.
    pub section_fraction: f64,
    /// Placement attempts per particle.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let table = MineralTable::builtin();
        let n = table.minerals().len() as f64;
        PhantomSpec {
            dims: Dims::cube(128),
            spacing: 15.0,
            count: 20,
            size_range: (315.0, 500.0),
            exponent_range: (2.0, 3.0),
            aspect_range: (1.0, 1.8),
            elongated_fraction: 0.3,
            elongated_aspect: (2.5, 4.0),
            waviness: 0.0,
            minerals: table.minerals().iter().map(|m| (m.code, 1.0 / n)).collect(),
            background: 0.0,
            noise_std: 800.0,
            ring_amplitude: 0.0,
            ring_period: 12.0,
            gap: 1,
            sections: 2,
            mla_spacing: 3.75,
            max_angle_deg: 10.0,
            max_shift: 15,
            section_fraction: 0.75,
            max_attempts: 500,
            seed: 0,
        }
    }
}

fn parse_pair(v: &str) -> Result<(f64, f64)> {
    let p: Vec<&str> = v.split(',').map(str::trim).collect();
    if p.len() != 2 {
        return Err(Error::Parse(format!("expected two comma-separated numbers, got '{v}'")));
    }
    Ok((parse_num(p[0])?, parse_num(p[1])?))
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse(format!("bad number '{v}'")))
}

impl PhantomSpec {
    pub fn validate(&self, table: &MineralTable) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dims.is_empty() || !(self.spacing > 0.0) || !(self.mla_spacing > 0.0) {
            return bad("dims, spacing and mla_spacing must be positive".into());
        }
        for (name, (lo, hi), min) in [
            ("size_range", self.size_range, 0.0),
            ("exponent_range", self.exponent_range, 1.0),
            ("aspect_range", self.aspect_range, 1.0),
            ("elongated_aspect", self.elongated_aspect, 1.0),
        ] {
            if !(lo > 0.0 && lo >= min && hi >= lo) {
                return bad(format!("{name} must satisfy {min} <= low <= high, got ({lo}, {hi})"));
            }
        }
        if !(0.0..=1.0).contains(&self.elongated_fraction) {
            return bad("elongated_fraction must be in [0, 1]".into());
        }
        if !(0.0..0.9).contains(&self.waviness) {
            return bad("waviness must be in [0, 0.9)".into());
        }
        if self.minerals.is_empty() {
            return bad("mineral mix is empty".into());
        }
        let total: f64 = self.minerals.iter().map(|m| m.1).sum();
        if (total - 1.0).abs() > 1e-9 || self.minerals.iter().any(|m| m.1 < 0.0) {
            return bad(format!("mineral fractions must be non-negative and sum to 1, got {total}"));
        }
        if let Some((c, _)) = self.minerals.iter().find(|(c, _)| table.get(*c).is_none()) {
            return bad(format!("mineral code {c} not in table"));
        }
        if self.noise_std < 0.0 || !(0.0..=0.08).contains(&self.ring_amplitude) || !(self.ring_period > 0.0) {
            return bad("noise_std >= 0, ring_amplitude in [0, 0.08], ring_period > 0 required".into());
        }
        if !(self.section_fraction > 0.0 && self.section_fraction <= 1.0) || self.max_shift < 0 {
            return bad("section_fraction in (0, 1] and max_shift >= 0 required".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines; unknown keys are rejected, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = PhantomSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))?;
            let v = v.trim();
            match k.trim() {
                "dims" => {
                    let d: Vec<usize> = v.split(',').map(parse_num).collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(Error::Parse(format!("dims needs three values, got '{v}'")));
                    }
                    s.dims = Dims::new(d[0], d[1], d[2]);
                }
                "spacing_um" => s.spacing = parse_num(v)?,
                "count" => s.count = parse_num(v)?,
                "size_um" => s.size_range = parse_pair(v)?,
                "exponent" => s.exponent_range = parse_pair(v)?,
                "aspect" => s.aspect_range = parse_pair(v)?,
                "elongated_fraction" => s.elongated_fraction = parse_num(v)?,
                "elongated_aspect" => s.elongated_aspect = parse_pair(v)?,
                "waviness" => s.waviness = parse_num(v)?,
                "minerals" => {
                    s.minerals = v
                        .split(',')
                        .map(|item| {
                            let (c, f) = item
                                .split_once(':')
                                .ok_or_else(|| Error::Parse(format!("expected code:fraction, got '{item}'")))?;
                            Ok((parse_num(c)?, parse_num(f)?))
                        })
                        .collect::<Result<_>>()?
                }
                "background" => s.background = parse_num(v)?,
                "noise_std" => s.noise_std = parse_num(v)?,
                "ring_amplitude" => s.ring_amplitude = parse_num(v)?,
                "ring_period" => s.ring_period = parse_num(v)?,
                "gap" => s.gap = parse_num(v)?,
                "sections" => s.sections = parse_num(v)?,
                "mla_spacing_um" => s.mla_spacing = parse_num(v)?,
                "max_angle_deg" => s.max_angle_deg = parse_num(v)?,
                "max_shift" => s.max_shift = parse_num(v)?,
                "section_fraction" => s.section_fraction = parse_num(v)?,
                "max_attempts" => s.max_attempts = parse_num(v)?,
                "seed" => s.seed = parse_num(v)?,
                other => return Err(Error::Parse(format!("unknown phantom key '{other}'"))),
            }
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let d = self.dims;
        let minerals: Vec<String> = self.minerals.iter().map(|(c, f)| format!("{c}:{f}")).collect();
        format!(
            "dims={},{},{}\nspacing_um={}\ncount={}\nsize_um={},{}\nexponent={},{}\naspect={},{}\n\
             elongated_fraction={}\nelongated_aspect={},{}\nwaviness={}\nminerals={}\nbackground={}\nnoise_std={}\n\
             ring_amplitude={}\nring_period={}\ngap={}\nsections={}\nmla_spacing_um={}\nmax_angle_deg={}\n\
             max_shift={}\nsection_fraction={}\nmax_attempts={}\nseed={}\n",
            d.nx,
            d.ny,
            d.nz,
            self.spacing,
            self.count,
            self.size_range.0,
            self.size_range.1,
            self.exponent_range.0,
            self.exponent_range.1,
            self.aspect_range.0,
            self.aspect_range.1,
            self.elongated_fraction,
            self.elongated_aspect.0,
            self.elongated_aspect.1,
            self.waviness,
            minerals.join(","),
            self.background,
            self.noise_std,
            self.ring_amplitude,
            self.ring_period,
            self.gap,
            self.sections,
            self.mla_spacing,
            self.max_angle_deg,
            self.max_shift,
            self.section_fraction,
            self.max_attempts,
            self.seed
        )
    }
}

/// One placed superellipsoid `|x/a|^e + |y/(b m)|^e + |z/(c m)|^e <= 1` in
/// its body frame, `m(x) = 1 + w cos(pi k x / a + phi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub id: u32,
    pub mineral: u8,
    pub center: [f64; 3],
    /// Semi-axes in voxels, longest first.
    pub semi_axes: [f64; 3],
    pub exponent: f64,
    pub shape: Waviness,
    /// Body-to-volume rotation.
    pub rotation: Matrix3<f64>,
    pub elongated: bool,
    pub voxels: usize,
}

/// Cross-section modulation `(w, k, phi)` along the long axis.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Waviness {
    pub amplitude: f64,
    /// Periods over the full length `2a`.
    pub periods: f64,
    pub phase: f64,
}

impl Waviness {
    fn factor(&self, x: f64, a: f64) -> f64 {
        1.0 + self.amplitude * (std::f64::consts::PI * self.periods * x / a + self.phase).cos()
    }
}

impl Particle {
    pub fn aspect(&self) -> f64 {
        self.semi_axes[0] / self.semi_axes[2]
    }
}

/// A mineral section with the transform that placed it.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub transform: RigidTransform,
    /// Section extent in voxels.
    pub size: (usize, usize),
    /// Mineral codes at `mla_spacing`.
    pub plane: LabelPlane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOutput {
    pub spec: PhantomSpec,
    pub gray: ScalarVolume,
    pub labels: LabelVolume,
    pub particles: Vec<Particle>,
    pub sections: Vec<Section>,
}

impl PhantomOutput {
    /// Mineral code per label, index 0 for background.
    pub fn mineral_of_label(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.particles.len() + 1];
        for p in &self.particles {
            m[p.id as usize] = p.mineral;
        }
        m
    }

    /// Voxel count per mineral code.
    pub fn mineral_voxels(&self) -> Vec<(u8, usize)> {
        let mut out: Vec<(u8, usize)> = Vec::new();
        for p in &self.particles {
            match out.iter_mut().find(|(c, _)| *c == p.mineral) {
                Some(e) => e.1 += p.voxels,
                None => out.push((p.mineral, p.voxels)),
            }
        }
        out.sort_unstable();
        out
    }

    pub fn particles_csv(&self) -> String {
        let mut s = String::from("id,mineral,cx,cy,cz,a,b,c,exponent,elongated,voxels\n");
        for p in &self.particles {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                p.id,
                p.mineral,
                p.center[0],
                p.center[1],
                p.center[2],
                p.semi_axes[0],
                p.semi_axes[1],
                p.semi_axes[2],
                p.exponent,
                p.elongated as u8,
                p.voxels
            );
        }
        s
    }

    /// Writes `gray`, `labels`, `section_<k>` volumes with sidecars, the
    /// section transforms, `particles.csv` and `phantom.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_volume(&dir.join("gray.raw"), &AnyVolume::U16(self.gray.clone()))?;
        write_volume(&dir.join("labels.raw"), &AnyVolume::U32(self.labels.clone()))?;
        for (k, s) in self.sections.iter().enumerate() {
            write_volume(&dir.join(format!("section_{k}.raw")), &AnyVolume::U8(s.plane.to_volume()))?;
            let t = format!("{}\nsize {} {}\n", s.transform, s.size.0, s.size.1);
            let p = dir.join(format!("section_{k}_transform.txt"));
            std::fs::write(&p, t).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("particles.csv");
        std::fs::write(&p, self.particles_csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("phantom.txt");
        std::fs::write(&p, self.spec.to_text()).map_err(|e| Error::io(&p, e))
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn pick_mineral(rng: &mut ChaCha8Rng, mix: &[(u8, f64)]) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(c, f) in mix {
        acc += f;
        if u < acc {
            return c;
        }
    }
    mix.last().expect("non-empty mix").0
}

/// Voxels of a superellipsoid inside the grid, or `None` if any part of
/// the body would leave the grid interior.
fn rasterize(d: Dims, center: Vector3<f64>, axes: [f64; 3], e: f64, wave: &Waviness, rot: &Matrix3<f64>) -> Option<Vec<usize>> {
    let rt = rot.transpose();
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    let n = d.as_array();
    let reach = [axes[0], axes[1] * (1.0 + wave.amplitude), axes[2] * (1.0 + wave.amplitude)];
    for k in 0..3 {
        let h: f64 = (0..3).map(|j| rot[(k, j)].abs() * reach[j]).sum();
        lo[k] = (center[k] - h).floor() as i64;
        hi[k] = (center[k] + h).ceil() as i64;
        if lo[k] < 1 || hi[k] > n[k] as i64 - 2 {
            return None;
        }
    }
    let inv = [1.0 / axes[0], 1.0 / axes[1], 1.0 / axes[2]];
    let mut out = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let q = rt * (Vector3::new(x as f64, y as f64, z as f64) - center);
                let m = wave.factor(q.x, axes[0]);
                let s = (q.x * inv[0]).abs().powf(e) + (q.y * inv[1] / m).abs().powf(e) + (q.z * inv[2] / m).abs().powf(e);
                if s <= 1.0 {
                    out.push(d.index(x as usize, y as usize, z as usize));
                }
            }
        }
    }
    Some(out)
}

/// Packs the particles by rejection sampling, renders the grayscale volume
/// and cuts the mineral sections.
pub fn generate(spec: &PhantomSpec, table: &MineralTable) -> Result<PhantomOutput> {
    spec.validate(table)?;
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u32; d.len()];
    let mut reserved = vec![false; d.len()];
    let n_elongated = (spec.elongated_fraction * spec.count as f64).ceil() as usize;
    let g = spec.gap as i64;
    let mut particles = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let elongated = i < n_elongated;
        let diameter = uniform(&mut rng, spec.size_range) / spec.spacing;
        let aspect = uniform(&mut rng, if elongated { spec.elongated_aspect } else { spec.aspect_range });
        let exponent = uniform(&mut rng, spec.exponent_range);
        let mineral = pick_mineral(&mut rng, &spec.minerals);
        let shape = if elongated && spec.waviness > 0.0 {
            Waviness {
                amplitude: spec.waviness,
                periods: rng.gen_range(1.5..2.5),
                phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            }
        } else {
            Waviness::default()
        };
        let r = 0.5 * diameter;
        let axes = [r * aspect.powf(2.0 / 3.0), r * aspect.powf(-1.0 / 3.0), r * aspect.powf(-1.0 / 3.0)];
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ));
            let rot = *q.to_rotation_matrix().matrix();
            let c = Vector3::new(
                rng.gen_range(0.0..d.nx as f64),
                rng.gen_range(0.0..d.ny as f64),
                rng.gen_range(0.0..d.nz as f64),
            );
            let Some(vox) = rasterize(d, c, axes, exponent, &shape, &rot) else { continue };
            if vox.is_empty() || vox.iter().any(|&v| reserved[v]) {
                continue;
            }
            placed = Some((c, rot, vox));
            break;
        }
        let (c, rot, vox) = placed.ok_or_else(|| {
            Error::Packing(format!(
                "could not place particle {} of {} after {} attempts; lower the count or size",
                i + 1,
                spec.count,
                spec.max_attempts
            ))
        })?;
        let id = i as u32 + 1;
        for &v in &vox {
            labels[v] = id;
            let (x, y, z) = d.coords(v);
            for dz in -g..=g {
                for dy in -g..=g {
                    for dx in -g..=g {
                        if let Some(j) = d.checked_index(x as i64 + dx, y as i64 + dy, z as i64 + dz) {
                            reserved[j] = true;
                        }
                    }
                }
            }
        }
        particles.push(Particle {
            id,
            mineral,
            center: [c.x, c.y, c.z],
            semi_axes: axes,
            exponent,
            shape,
            rotation: rot,
            elongated,
            voxels: vox.len(),
        });
    }
    let labels = Grid3::from_vec(d, spec.spacing, labels)?;

    let mut gray_of = vec![spec.background; particles.len() + 1];
    for p in &particles {
        let m = table.get(p.mineral).expect("validated");
        gray_of[p.id as usize] = instrument_gray(m.rho_mu());
    }
    let c = d.center();
    let plane = d.nx * d.ny;
    let mut gray = vec![0u16; d.len()];
    let noise_seed = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
    gray.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        rng.set_stream(z as u64);
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = x + d.nx * y;
                let mut v = gray_of[labels.data()[i + plane * z] as usize];
                if spec.ring_amplitude > 0.0 {
                    let r = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)).sqrt();
                    v += spec.ring_amplitude * 65535.0 * (2.0 * std::f64::consts::PI * r / spec.ring_period).cos();
                }
                if spec.noise_std > 0.0 {
                    v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                slab[i] = crate::prefilter::to_u16(v);
            }
        }
    });
    let gray = Grid3::from_vec(d, spec.spacing, gray)?;

    let mut out = PhantomOutput {
        spec: spec.clone(),
        gray,
        labels,
        particles,
        sections: Vec::new(),
    };
    for _ in 0..spec.sections {
        let (transform, (pw, ph)) = random_section_transform(spec, &mut rng);
        let plane = render_mla_section(&out, &transform, (pw, ph), spec.mla_spacing)?;
        out.sections.push(Section {
            transform,
            size: (pw, ph),
            plane,
        });
    }
    Ok(out)
}

/// Mineral codes along the transformed plane on a grid of pitch
/// `mla_spacing`, sampled from the ground-truth labels by nearest voxel.
/// `size` is the section extent in voxels.
pub fn render_mla_section(out: &PhantomOutput, transform: &RigidTransform, size: (usize, usize), mla_spacing: f64) -> Result<LabelPlane> {
    if !(mla_spacing > 0.0) || size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidParameter("section size and spacing must be positive".into()));
    }
    let s = mla_spacing / out.labels.spacing();
    let nu = ((size.0 - 1) as f64 / s).floor() as usize + 1;
    let nv = ((size.1 - 1) as f64 / s).floor() as usize + 1;
    let minerals = out.mineral_of_label();
    let d = out.labels.dims();
    let mut data = vec![0u8; nu * nv];
    let mut inside = 0usize;
    for v in 0..nv {
        for u in 0..nu {
            let p = transform.plane_point(d, u as f64 * s, v as f64 * s);
            if let Some(&l) = out.labels.get_checked(p[0].round() as i64, p[1].round() as i64, p[2].round() as i64) {
                inside += 1;
                data[u + nu * v] = minerals[l as usize];
            }
        }
    }
    if inside == 0 {
        return Err(Error::InvalidParameter("section plane does not intersect the volume".into()));
    }
    Grid2::from_vec(nu, nv, mla_spacing, data)
}

/// Section foreground resampled to voxel pitch: pixel `(U, V)` takes the
/// fine pixel nearest to `(U, V) * vol_spacing / plane_spacing`.
pub fn section_mask(plane: &LabelPlane, vol_spacing: f64, size: (usize, usize)) -> Result<BinaryPlane> {
    let f = vol_spacing / plane.spacing();
    let mut data = vec![false; size.0 * size.1];
    for v in 0..size.1 {
        for u in 0..size.0 {
            let (fu, fv) = ((u as f64 * f).round() as i64, (v as f64 * f).round() as i64);
            data[u + size.0 * v] = plane.get_checked(fu, fv).is_some_and(|&c| c != 0);
        }
    }
    Grid2::from_vec(size.0, size.1, vol_spacing, data)
}

/// Labeled merge edges from ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDataset {
    pub records: Vec<EdgeRecord>,
    /// Regions whose majority particle covers less than 60% of their voxels
    /// or is background.
    pub ambiguous_regions: usize,
    /// Edges dropped because an endpoint is ambiguous.
    pub excluded_edges: usize,
}

impl EdgeDataset {
    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == Some(1)).count()
    }

    pub fn negatives(&self) -> usize {
        self.records.iter().filter(|r| r.label == Some(0)).count()
    }
}

/// Majority ground-truth particle per region, `None` if ambiguous.
pub fn region_majority(truth: &LabelVolume, regions: &LabelVolume, min_share: f64) -> Result<Vec<Option<u32>>> {
    if !truth.same_shape(regions) {
        return Err(Error::Dimension("label volumes differ in shape".into()));
    }
    let n = regions.max_label() as usize + 1;
    let mut counts: Vec<std::collections::HashMap<u32, u64>> = vec![Default::default(); n];
    for (&r, &t) in regions.data().iter().zip(truth.data()) {
        if r != 0 {
            *counts[r as usize].entry(t).or_default() += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|c| {
            let total: u64 = c.values().sum();
            let (&id, &n) = c.iter().max_by_key(|(&id, &n)| (n, std::cmp::Reverse(id)))?;
            (id != 0 && n as f64 >= min_share * total as f64).then_some(id)
        })
        .collect())
}

/// Edge label 1 iff both regions' majority particles coincide; regions
/// with an ambiguous majority are left out.
pub fn edge_training_set(
    truth: &LabelVolume,
    regions: &LabelVolume,
    graph: &RegionGraph,
    features: &[EdgeFeatures],
) -> Result<EdgeDataset> {
    if features.len() != graph.edges.len() {
        return Err(Error::Dimension("one feature vector per edge required".into()));
    }
    let major = region_majority(truth, regions, 0.6)?;
    let ambiguous_regions = graph.regions.iter().filter(|&&r| major[r as usize].is_none()).count();
    let mut records = Vec::new();
    let mut excluded_edges = 0;
    for (e, f) in graph.edges.iter().zip(features) {
        match (major[e.a as usize], major[e.b as usize]) {
            (Some(a), Some(b)) => records.push(EdgeRecord {
                v1: e.a,
                v2: e.b,
                features: *f,
                label: Some((a == b) as u8),
            }),
            _ => excluded_edges += 1,
        }
    }
    Ok(EdgeDataset {
        records,
        ambiguous_regions,
        excluded_edges,
    })
}

/// Random rigid transform within the spec's angle and shift limits,
/// centered like the generated sections.
pub fn random_section_transform(spec: &PhantomSpec, rng: &mut impl Rng) -> (RigidTransform, (usize, usize)) {
    let d = spec.dims;
    let pw = ((spec.section_fraction * d.nx as f64).round() as usize).max(1);
    let ph = ((spec.section_fraction * d.ny as f64).round() as usize).max(1);
    let max_a = spec.max_angle_deg.to_radians();
    let angles = [0; 3].map(|_| if max_a > 0.0 { rng.gen_range(-max_a..=max_a) } else { 0.0 });
    let shift = [0; 3].map(|_| rng.gen_range(-spec.max_shift..=spec.max_shift) as f64);
    (
        RigidTransform {
            angles,
            translation: [
                ((d.nx - pw) / 2) as f64 + shift[0],
                ((d.ny - ph) / 2) as f64 + shift[1],
                (d.nz / 2) as f64 + shift[2],
            ],
        },
        (pw, ph),
    )
}
