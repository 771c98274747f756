//! Mineral phases from registered sections, linear regression of
//! `rho * mu_m` on mean grayscale, and volumetric prediction.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::register::RigidTransform;
use crate::volgrid::{BinaryVolume, Grid3, LabelPlane, RealGrid, ScalarVolume};

const BUILTIN_TABLE: &str = include_str!("../data/minerals.csv");

#[derive(Clone, Debug, PartialEq)]
pub struct Mineral {
    pub name: String,
    pub code: u8,
    /// Mass density, g/cm^3.
    pub rho: f64,
    /// Mass attenuation coefficient, cm^2/g.
    pub mu_m: f64,
    /// Published mean grayscale, if known.
    pub mean_gray: Option<f64>,
}

impl Mineral {
    pub fn rho_mu(&self) -> f64 {
        self.rho * self.mu_m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MineralTable {
    minerals: Vec<Mineral>,
}

impl MineralTable {
    pub fn new(minerals: Vec<Mineral>) -> Result<Self> {
        for (i, m) in minerals.iter().enumerate() {
            if m.code == 0 {
                return Err(Error::InvalidParameter(format!("{}: code 0 is background", m.name)));
            }
            if !(m.rho > 0.0 && m.mu_m > 0.0) {
                return Err(Error::InvalidParameter(format!("{}: rho and mu_m must be positive", m.name)));
            }
            if minerals[..i].iter().any(|o| o.code == m.code) {
                return Err(Error::InvalidParameter(format!("duplicate mineral code {}", m.code)));
            }
        }
        Ok(MineralTable { minerals })
    }

    /// Quartz, kaolinite, muscovite, zinnwaldite and topaz with their
    /// densities, attenuation coefficients and measured mean grayscale.
    pub fn builtin() -> Self {
        Self::parse_csv(BUILTIN_TABLE).expect("bundled table parses")
    }

    pub fn minerals(&self) -> &[Mineral] {
        &self.minerals
    }

    pub fn get(&self, code: u8) -> Option<&Mineral> {
        self.minerals.iter().find(|m| m.code == code)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mineral> {
        self.minerals.iter().find(|m| m.name == name)
    }

    /// CSV `name,code,rho,mu_m[,mean_gray]` with a header line.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty mineral table".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[..4] != ["name", "code", "rho", "mu_m"] {
            return Err(Error::Parse(format!("unexpected mineral table header '{header}'")));
        }
        let mut minerals = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() < 4 || f.len() > 5 {
                return Err(Error::Parse(format!("bad mineral row '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}' in '{line}'")));
            minerals.push(Mineral {
                name: f[0].to_string(),
                code: f[1].parse().map_err(|_| Error::Parse(format!("bad code '{}'", f[1])))?,
                rho: num(f[2])?,
                mu_m: num(f[3])?,
                mean_gray: match f.get(4) {
                    Some(s) if !s.is_empty() => Some(num(s)?),
                    _ => None,
                },
            });
        }
        Self::new(minerals)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,code,rho,mu_m,mean_gray\n");
        for m in &self.minerals {
            let g = m.mean_gray.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", m.name, m.code, m.rho, m.mu_m, g);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Pixels `(u, v)` of one mineral phase in a label plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub code: u8,
    pub pixels: Vec<(usize, usize)>,
}

impl Phase {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// `{x : I_MLA(x) = code}`.
pub fn extract_phase(plane: &LabelPlane, code: u8, table: &MineralTable) -> Result<Phase> {
    if table.get(code).is_none() {
        return Err(Error::InvalidParameter(format!("mineral code {code} not in table")));
    }
    let mut pixels = Vec::new();
    for v in 0..plane.ny() {
        for u in 0..plane.nx() {
            if *plane.get(u, v) == code {
                pixels.push((u, v));
            }
        }
    }
    Ok(Phase { code, pixels })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseMean {
    pub mean: f64,
    /// Pixels that landed inside the volume.
    pub count: usize,
    /// Pixels mapped outside the volume.
    pub skipped: usize,
}

/// Mean grayscale of the voxels hit by the phase pixels. Pixel `(u, v)` of
/// a plane with spacing `s_p` sits at plane coordinate `(u, v) s_p / s_v`
/// in voxel units before the transform is applied.
pub fn mean_phase_gray(
    vol: &ScalarVolume,
    transform: &RigidTransform,
    phase: &Phase,
    plane_spacing: f64,
) -> Result<PhaseMean> {
    let scale = plane_spacing / vol.spacing();
    let d = vol.dims();
    let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
    for &(u, v) in &phase.pixels {
        let p = transform.plane_point(d, u as f64 * scale, v as f64 * scale);
        match vol.get_checked(p[0].round() as i64, p[1].round() as i64, p[2].round() as i64) {
            Some(&g) => {
                sum += g as f64;
                count += 1;
            }
            None => skipped += 1,
        }
    }
    if count == 0 {
        return Err(Error::Empty(format!("no pixel of phase {} falls inside the volume", phase.code)));
    }
    Ok(PhaseMean {
        mean: sum / count as f64,
        count,
        skipped,
    })
}

/// One calibration point: a mineral's mean grayscale and material constants.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSample {
    pub name: String,
    pub mean_gray: f64,
    pub rho: f64,
    pub mu_m: f64,
    /// Phase size, used only by weighted fits.
    pub count: usize,
}

impl CalibrationSample {
    pub fn rho_mu(&self) -> f64 {
        self.rho * self.mu_m
    }
}

/// Samples built from the table's published mean grayscale values.
pub fn table_samples(table: &MineralTable) -> Vec<CalibrationSample> {
    table
        .minerals()
        .iter()
        .filter_map(|m| {
            m.mean_gray.map(|g| CalibrationSample {
                name: m.name.clone(),
                mean_gray: g,
                rho: m.rho,
                mu_m: m.mu_m,
                count: 1,
            })
        })
        .collect()
}

/// Per-mineral samples from a registered section; minerals absent from
/// the section are returned by name in the second vector.
pub fn section_samples(
    vol: &ScalarVolume,
    transform: &RigidTransform,
    plane: &LabelPlane,
    table: &MineralTable,
) -> Result<(Vec<CalibrationSample>, Vec<String>)> {
    let mut samples = Vec::new();
    let mut absent = Vec::new();
    for m in table.minerals() {
        let phase = extract_phase(plane, m.code, table)?;
        if phase.is_empty() {
            absent.push(m.name.clone());
            continue;
        }
        match mean_phase_gray(vol, transform, &phase, plane.spacing()) {
            Ok(pm) => samples.push(CalibrationSample {
                name: m.name.clone(),
                mean_gray: pm.mean,
                rho: m.rho,
                mu_m: m.mu_m,
                count: pm.count,
            }),
            Err(Error::Empty(_)) => absent.push(m.name.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((samples, absent))
}

/// Straight line `y = slope x + intercept` with goodness of fit.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

/// (Weighted) least squares line through `(x, y)`.
pub fn least_squares(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Result<LinearFit> {
    if x.len() != y.len() || w.is_some_and(|w| w.len() != x.len()) {
        return Err(Error::Dimension("regression inputs differ in length".into()));
    }
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..x.len()).map(weight).sum();
    if x.is_empty() || sw <= 0.0 {
        return Err(Error::Regression("no samples".into()));
    }
    let mx = (0..x.len()).map(|i| weight(i) * x[i]).sum::<f64>() / sw;
    let my = (0..x.len()).map(|i| weight(i) * y[i]).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += weight(i) * dx * dx;
        sxy += weight(i) * dx * dy;
        syy += weight(i) * dy * dy;
    }
    if sxx <= 1e-12 * (1.0 + mx * mx) * sw {
        return Err(Error::Regression("fewer than two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| yi - (slope * xi + intercept)).collect();
    let ss_res: f64 = residuals.iter().enumerate().map(|(i, r)| weight(i) * r * r).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        residuals,
    })
}

/// `rho mu_m = a I + b`, valid on the calibrated grayscale interval.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationModel {
    pub slope: f64,
    pub intercept: f64,
    pub valid: (f64, f64),
    pub r_squared: f64,
    /// `(mineral, residual)` per calibration sample.
    pub residuals: Vec<(String, f64)>,
}

impl AttenuationModel {
    pub fn predict(&self, gray: f64) -> f64 {
        self.slope * gray + self.intercept
    }

    pub fn in_range(&self, gray: f64) -> bool {
        gray >= self.valid.0 && gray <= self.valid.1
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "slope {:e}\nintercept {}\nvalid {} {}\nr_squared {}\n",
            self.slope, self.intercept, self.valid.0, self.valid.1, self.r_squared
        );
        for (n, r) in &self.residuals {
            let _ = writeln!(s, "residual {n} {r}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut slope, mut intercept, mut valid, mut r2) = (None, None, None, None);
        let mut residuals = Vec::new();
        let num = |s: Option<&str>| -> Result<f64> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse("bad number in attenuation model".into()))
        };
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("slope") => slope = Some(num(it.next())?),
                Some("intercept") => intercept = Some(num(it.next())?),
                Some("valid") => valid = Some((num(it.next())?, num(it.next())?)),
                Some("r_squared") => r2 = Some(num(it.next())?),
                Some("residual") => {
                    let name = it.next().unwrap_or_default().to_string();
                    residuals.push((name, num(it.next())?));
                }
                _ => {}
            }
        }
        match (slope, intercept, valid) {
            (Some(slope), Some(intercept), Some(valid)) => Ok(AttenuationModel {
                slope,
                intercept,
                valid,
                r_squared: r2.unwrap_or(f64::NAN),
                residuals,
            }),
            _ => Err(Error::Parse("attenuation model needs slope, intercept and valid".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Least squares of `rho mu_m` on mean grayscale, optionally weighted by
/// phase size.
pub fn fit_attenuation(samples: &[CalibrationSample], weighted: bool) -> Result<AttenuationModel> {
    let x: Vec<f64> = samples.iter().map(|s| s.mean_gray).collect();
    let y: Vec<f64> = samples.iter().map(CalibrationSample::rho_mu).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.count as f64).collect();
    let fit = least_squares(&x, &y, weighted.then_some(&w[..]))?;
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AttenuationModel {
        slope: fit.slope,
        intercept: fit.intercept,
        valid: (lo.max(0.0), hi.min(65535.0)),
        r_squared: fit.r_squared,
        residuals: samples.iter().map(|s| s.name.clone()).zip(fit.residuals).collect(),
    })
}

/// `mu_m = c1 I + c2`, ignoring density.
pub fn mu_only_fit(samples: &[CalibrationSample]) -> Result<LinearFit> {
    let x: Vec<f64> = samples.iter().map(|s| s.mean_gray).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.mu_m).collect();
    least_squares(&x, &y, None)
}

/// Predicted `rho mu_m` on masked voxels (zero elsewhere) and the masked
/// voxels whose grayscale lies outside the calibrated interval.
pub fn predict_map(vol: &ScalarVolume, model: &AttenuationModel, mask: Option<&BinaryVolume>) -> Result<(RealGrid, BinaryVolume)> {
    if let Some(m) = mask {
        if !m.same_shape(vol) {
            return Err(Error::Dimension("mask and volume differ in shape".into()));
        }
    }
    let inside = |i: usize| mask.is_none_or(|m| *m.at(i));
    let (pred, flag): (Vec<f64>, Vec<bool>) = vol
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            if inside(i) {
                (model.predict(g as f64), !model.in_range(g as f64))
            } else {
                (0.0, false)
            }
        })
        .unzip();
    Ok((
        Grid3::from_vec(vol.dims(), vol.spacing(), pred)?,
        Grid3::from_vec(vol.dims(), vol.spacing(), flag)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub mineral: String,
    pub mean_gray: f64,
    pub count: usize,
    pub predicted: f64,
    pub truth: f64,
}

impl ValidationRow {
    pub fn relative_error(&self) -> f64 {
        ((self.predicted - self.truth) / self.truth).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    /// Minerals of the table not found in the section.
    pub skipped: Vec<String>,
}

impl ValidationReport {
    pub fn max_relative_error(&self) -> f64 {
        self.rows.iter().map(ValidationRow::relative_error).fold(0.0, f64::max)
    }

    /// Scatter data `mineral,predicted,true`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mineral,predicted,true\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.mineral, r.predicted, r.truth);
        }
        s
    }
}

/// Predicts each mineral's `rho mu_m` from its mean grayscale along a
/// second registered section and pairs it with the tabulated value.
pub fn validate_section(
    vol: &ScalarVolume,
    model: &AttenuationModel,
    transform: &RigidTransform,
    plane: &LabelPlane,
    table: &MineralTable,
) -> Result<ValidationReport> {
    let (samples, skipped) = section_samples(vol, transform, plane, table)?;
    let rows = samples
        .into_iter()
        .map(|s| ValidationRow {
            predicted: model.predict(s.mean_gray),
            truth: s.rho_mu(),
            mineral: s.name,
            mean_gray: s.mean_gray,
            count: s.count,
        })
        .collect();
    Ok(ValidationReport { rows, skipped })
}
