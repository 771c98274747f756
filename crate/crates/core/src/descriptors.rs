//! Size and shape descriptors of planar particle sections.
//!
//! Coordinates are pixel centers; results are scaled by the pixel spacing.
//! The perimeter uses the corner-count weights on the 8-connected boundary
//! chain code, the mean width averages the hull extent over 180 directions.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::Grid2;

/// Weight of an axis-aligned chain step.
pub const W_STRAIGHT: f64 = 0.948;
/// Weight of a diagonal chain step.
pub const W_DIAGONAL: f64 = 1.340;
/// Directions sampled by the mean width quadrature.
pub const WIDTH_ANGLES: usize = 180;

pub type Pixel = (i64, i64);

/// Particle-id image; 0 is background.
pub type ParticlePlane = Grid2<u32>;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorRow {
    pub id: u32,
    pub area: f64,
    pub perimeter: f64,
    pub mean_width: f64,
    pub sphericity: f64,
    pub convexity: f64,
    pub elongation: f64,
}

/// Pixel area in squared length units.
pub fn area(pixels: &[Pixel], spacing: f64) -> f64 {
    pixels.len() as f64 * spacing * spacing
}

// Directions in image coordinates (y grows downward), anticlockwise on screen.
const DIRS: [Pixel; 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

/// 8-connected components of a pixel set, each sorted in raster order.
fn components(pixels: &[Pixel]) -> Vec<Vec<Pixel>> {
    let mut set: std::collections::HashSet<Pixel> = pixels.iter().copied().collect();
    let mut sorted: Vec<Pixel> = pixels.to_vec();
    sorted.sort_unstable_by_key(|&(x, y)| (y, x));
    let mut out = Vec::new();
    for &p in &sorted {
        if !set.remove(&p) {
            continue;
        }
        let mut comp = vec![p];
        let mut queue = VecDeque::from([p]);
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in DIRS {
                let q = (x + dx, y + dy);
                if set.remove(&q) {
                    comp.push(q);
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

/// Chain-code step counts `(straight, diagonal)` of the outer boundary of
/// one 8-connected component, by Moore tracing from its raster-first pixel.
pub fn chain_counts(component: &[Pixel]) -> (usize, usize) {
    let set: std::collections::HashSet<Pixel> = component.iter().copied().collect();
    let start = *component
        .iter()
        .min_by_key(|&&(x, y)| (y, x))
        .expect("non-empty component");
    let mut dir = 7usize;
    let mut cur = start;
    let mut moves: Vec<usize> = Vec::new();
    let mut path: Vec<Pixel> = vec![start];
    loop {
        let first = if dir % 2 == 0 { (dir + 7) % 8 } else { (dir + 6) % 8 };
        let mut next = None;
        for k in 0..8 {
            let d = (first + k) % 8;
            let q = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
            if set.contains(&q) {
                next = Some((d, q));
                break;
            }
        }
        let Some((d, q)) = next else {
            return (0, 0);
        };
        moves.push(d);
        path.push(q);
        dir = d;
        cur = q;
        let n = path.len();
        if n >= 3 && path[n - 1] == path[1] && path[n - 2] == path[0] {
            moves.pop();
            break;
        }
    }
    let diagonal = moves.iter().filter(|&&d| d % 2 == 1).count();
    (moves.len() - diagonal, diagonal)
}

/// Corner-count perimeter. Four straight unit steps are added per
/// component, so a single pixel measures `4 * 0.948` and a digital
/// rectangle `0.948 * 2 (w + h)`.
pub fn perimeter_cornercount(pixels: &[Pixel], spacing: f64) -> f64 {
    components(pixels)
        .iter()
        .map(|c| {
            let (s, d) = chain_counts(c);
            W_STRAIGHT * (s + 4) as f64 + W_DIAGONAL * d as f64
        })
        .sum::<f64>()
        * spacing
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of pixel centers, counterclockwise in (x, y) without
/// collinear points.
pub fn convex_hull(pixels: &[Pixel]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = pixels.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let half = |iter: &mut dyn Iterator<Item = &(f64, f64)>| {
        let mut chain: Vec<(f64, f64)> = Vec::new();
        for &p in iter {
            while chain.len() >= 2 && cross(chain[chain.len() - 2], chain[chain.len() - 1], p) <= 0.0 {
                chain.pop();
            }
            chain.push(p);
        }
        chain.pop();
        chain
    };
    let mut hull = half(&mut pts.iter());
    hull.extend(half(&mut pts.iter().rev()));
    hull
}

/// Area and perimeter of a hull polygon; degenerate hulls have area 0 and
/// perimeter twice their length.
pub fn polygon_area_perimeter(hull: &[(f64, f64)]) -> (f64, f64) {
    let n = hull.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mut a = 0.0;
    let mut l = 0.0;
    for i in 0..n {
        let (p, q) = (hull[i], hull[(i + 1) % n]);
        a += p.0 * q.1 - q.0 * p.1;
        l += ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
    }
    (a.abs() / 2.0, l)
}

/// Directional extent of the hull averaged over `WIDTH_ANGLES` angles in
/// `[0, pi)`, plus `4 / pi` for the pixel square (the mean width of a unit
/// square), times spacing.
pub fn mean_width(pixels: &[Pixel], spacing: f64) -> f64 {
    let hull = convex_hull(pixels);
    let mut sum = 0.0;
    for k in 0..WIDTH_ANGLES {
        let a = PI * k as f64 / WIDTH_ANGLES as f64;
        let (c, s) = (a.cos(), a.sin());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &hull {
            let t = x * c + y * s;
            lo = lo.min(t);
            hi = hi.max(t);
        }
        sum += hi - lo;
    }
    (sum / WIDTH_ANGLES as f64 + 4.0 / PI) * spacing
}

/// Shape factors with a flag telling whether any of them was clamped to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeFactors {
    pub sphericity: f64,
    pub convexity: f64,
    pub elongation: f64,
    pub clamped: bool,
}

/// Sphericity `4 pi a / l^2`, convexity `a / a(hull)` and elongation as the
/// ratio of second-moment semiaxes. The hull area is the pixel-center hull
/// dilated by a disk of half a pixel; second moments include the `1/12`
/// variance of each pixel square.
pub fn shape_factors(pixels: &[Pixel]) -> ShapeFactors {
    if pixels.len() <= 1 {
        return ShapeFactors {
            sphericity: 1.0,
            convexity: 1.0,
            elongation: 1.0,
            clamped: false,
        };
    }
    let a = pixels.len() as f64;
    let l = perimeter_cornercount(pixels, 1.0);
    let mut clamped = false;
    let mut clamp = |v: f64| {
        if v > 1.0 {
            clamped = true;
            1.0
        } else {
            v
        }
    };
    let sphericity = clamp(4.0 * PI * a / (l * l));
    let (ha, hl) = polygon_area_perimeter(&convex_hull(pixels));
    let convexity = clamp(a / (ha + 0.5 * hl + PI / 4.0));
    let (lmin, lmax) = second_moment_eigenvalues(pixels);
    let elongation = clamp((lmin / lmax).sqrt());
    ShapeFactors {
        sphericity,
        convexity,
        elongation,
        clamped,
    }
}

/// Eigenvalues `(small, large)` of the second-moment matrix of the union
/// of pixel squares.
pub fn second_moment_eigenvalues(pixels: &[Pixel]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (mx, my) = pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / n + 1.0 / 12.0, syy / n + 1.0 / 12.0, sxy / n);
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    ((tr - disc) / 2.0, (tr + disc) / 2.0)
}

pub fn describe_particle(id: u32, pixels: &[Pixel], spacing: f64) -> (DescriptorRow, bool) {
    let f = shape_factors(pixels);
    (
        DescriptorRow {
            id,
            area: area(pixels, spacing),
            perimeter: perimeter_cornercount(pixels, spacing),
            mean_width: mean_width(pixels, spacing),
            sphericity: f.sphericity,
            convexity: f.convexity,
            elongation: f.elongation,
        },
        f.clamped,
    )
}

/// Pixel lists per positive label, in label order.
pub fn particle_pixels(labels: &ParticlePlane) -> BTreeMap<u32, Vec<Pixel>> {
    let mut out: BTreeMap<u32, Vec<Pixel>> = BTreeMap::new();
    for y in 0..labels.ny() {
        for x in 0..labels.nx() {
            let l = *labels.get(x, y);
            if l != 0 {
                out.entry(l).or_default().push((x as i64, y as i64));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorTable {
    pub rows: Vec<DescriptorRow>,
    /// Particles with at least one shape factor clamped to 1.
    pub clamped: usize,
}

/// Descriptors for every particle of a label plane, in id order.
pub fn describe_plane(labels: &ParticlePlane) -> DescriptorTable {
    let spacing = labels.spacing();
    let particles: Vec<(u32, Vec<Pixel>)> = particle_pixels(labels).into_iter().collect();
    let results: Vec<(DescriptorRow, bool)> = particles
        .par_iter()
        .map(|(id, px)| describe_particle(*id, px, spacing))
        .collect();
    let clamped = results.iter().filter(|r| r.1).count();
    DescriptorTable {
        rows: results.into_iter().map(|r| r.0).collect(),
        clamped,
    }
}

/// 8-connected components of the nonzero pixels of any plane, numbered in
/// raster order.
pub fn label_components<T: Copy + PartialEq + Default>(plane: &Grid2<T>) -> ParticlePlane {
    let (nx, ny) = (plane.nx(), plane.ny());
    let zero = T::default();
    let mut out = vec![0u32; nx * ny];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..nx * ny {
        if plane.data()[start] == zero || out[start] != 0 {
            continue;
        }
        next += 1;
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % nx) as i64, (i / nx) as i64);
            for (dx, dy) in DIRS {
                if let Some(v) = plane.get_checked(x + dx, y + dy) {
                    let j = (x + dx) as usize + nx * (y + dy) as usize;
                    if *v != zero && out[j] == 0 {
                        out[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    Grid2::from_vec(nx, ny, plane.spacing(), out).expect("same geometry")
}

/// Block-majority downsampling by a real factor. Coarse pixel `(i, j)`
/// takes the most frequent value among fine pixels whose centers fall in
/// `[i f, (i+1) f) x [j f, (j+1) f)`; ties go to the smaller value.
pub fn coarsen_majority<T: Copy + Ord>(plane: &Grid2<T>, factor: f64) -> Result<Grid2<T>> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidParameter(format!("coarsening factor must be >= 1, got {factor}")));
    }
    let cx = ((plane.nx() as f64) / factor).floor().max(1.0) as usize;
    let cy = ((plane.ny() as f64) / factor).floor().max(1.0) as usize;
    let range = |i: usize, n: usize| -> (usize, usize) {
        // Fine pixel k has center k + 0.5.
        let lo = ((i as f64 * factor - 0.5).ceil().max(0.0)) as usize;
        let hi = (((i + 1) as f64 * factor - 0.5).ceil().max(0.0) as usize).min(n);
        (lo, hi.max(lo + 1).min(n))
    };
    let mut data = Vec::with_capacity(cx * cy);
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for j in 0..cy {
        let (y0, y1) = range(j, plane.ny());
        for i in 0..cx {
            let (x0, x1) = range(i, plane.nx());
            counts.clear();
            for y in y0..y1 {
                for x in x0..x1 {
                    *counts.entry(*plane.get(x, y)).or_insert(0) += 1;
                }
            }
            let mut best = None;
            for (&v, &c) in &counts {
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((v, c));
                }
            }
            data.push(best.expect("non-empty block").0);
        }
    }
    Grid2::from_vec(cx, cy, plane.spacing() * factor, data)
}

pub const CSV_HEADER: &str = "id,area,perimeter,mean_width,sphericity,convexity,elongation";

pub fn rows_to_csv(rows: &[DescriptorRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.id, r.area, r.perimeter, r.mean_width, r.sphericity, r.convexity, r.elongation
        )
        .unwrap();
    }
    s
}

pub fn write_rows(path: &Path, rows: &[DescriptorRow]) -> Result<()> {
    write_text(path, &rows_to_csv(rows))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<DescriptorRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let bad = || Error::Parse(format!("{}:{}: malformed row", path.display(), n + 2));
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 7 {
                return Err(bad());
            }
            let f = |k: usize| c[k].trim().parse::<f64>().map_err(|_| bad());
            Ok(DescriptorRow {
                id: c[0].trim().parse().map_err(|_| bad())?,
                area: f(1)?,
                perimeter: f(2)?,
                mean_width: f(3)?,
                sphericity: f(4)?,
                convexity: f(5)?,
                elongation: f(6)?,
            })
        })
        .collect()
}

/// Equal-width histogram over `[min, max]` of the values, as
/// `(bin center, relative frequency)`. Identical values give one bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Empty("no values to bin".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be >= 1".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = values.len() as f64;
    if !(hi > lo) {
        return Ok(vec![(lo, 1.0)]);
    }
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + (k as f64 + 0.5) * w, c as f64 / n))
        .collect())
}

pub const DESCRIPTOR_NAMES: [&str; 6] = ["area", "perimeter", "mean_width", "sphericity", "convexity", "elongation"];

/// Histograms of every descriptor, in `DESCRIPTOR_NAMES` order.
pub fn distributions(rows: &[DescriptorRow], bins: usize) -> Result<Vec<(&'static str, Vec<(f64, f64)>)>> {
    if rows.is_empty() {
        return Err(Error::Empty("no particles".into()));
    }
    let get: [fn(&DescriptorRow) -> f64; 6] = [
        |r| r.area,
        |r| r.perimeter,
        |r| r.mean_width,
        |r| r.sphericity,
        |r| r.convexity,
        |r| r.elongation,
    ];
    DESCRIPTOR_NAMES
        .iter()
        .zip(get)
        .map(|(name, g)| {
            let v: Vec<f64> = rows.iter().map(g).collect();
            Ok((*name, histogram(&v, bins)?))
        })
        .collect()
}

/// Writes `<name>.csv` with `bin_center,relative_frequency` per descriptor.
pub fn export_distributions(rows: &[DescriptorRow], bins: usize, out_dir: &Path) -> Result<()> {
    for (name, hist) in distributions(rows, bins)? {
        let mut s = String::from("bin_center,relative_frequency\n");
        for (c, f) in hist {
            writeln!(s, "{c},{f}").unwrap();
        }
        write_text(&out_dir.join(format!("{name}.csv")), &s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(r: f64) -> Vec<Pixel> {
        let n = r.ceil() as i64 + 1;
        let mut out = Vec::new();
        for y in -n..=n {
            for x in -n..=n {
                if ((x * x + y * y) as f64) <= r * r {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn rect(w: i64, h: i64) -> Vec<Pixel> {
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect()
    }

    fn diamond(n: i64) -> Vec<Pixel> {
        let mut out = Vec::new();
        for y in -n..=n {
            for x in -n..=n {
                if x.abs() + y.abs() <= n {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn rotate90(px: &[Pixel]) -> Vec<Pixel> {
        px.iter().map(|&(x, y)| (-y, x)).collect()
    }

    fn dense_mean_width(px: &[Pixel]) -> f64 {
        // Pixel squares sampled by their corners; exact extent of the union.
        let corners: Vec<(f64, f64)> = px
            .iter()
            .flat_map(|&(x, y)| {
                [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)]
                    .into_iter()
                    .map(move |(a, b)| (x as f64 + a, y as f64 + b))
            })
            .collect();
        let n = 10_000;
        let mut s = 0.0;
        for k in 0..n {
            let a = PI * (k as f64 + 0.5) / n as f64;
            let (lo, hi) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
                let t = x * a.cos() + y * a.sin();
                (lo.min(t), hi.max(t))
            });
            s += hi - lo;
        }
        s / n as f64
    }

    #[test]
    fn area_counts_pixels() {
        assert_eq!(area(&rect(10, 10), 1.0), 100.0);
        assert_eq!(area(&[(3, 4)], 4.5), 20.25);
        let blob = disk(7.3);
        assert_eq!(area(&blob, 2.0), 4.0 * blob.len() as f64);
    }

    #[test]
    fn perimeter_of_square_and_pixel() {
        assert!((perimeter_cornercount(&rect(10, 10), 1.0) - 37.92).abs() < 1e-9);
        assert!((perimeter_cornercount(&[(0, 0)], 2.0) - 2.0 * 3.792).abs() < 1e-12);
        assert_eq!(chain_counts(&rect(10, 10)), (36, 0));
        assert_eq!(chain_counts(&rect(2, 1)), (2, 0));
    }

    #[test]
    fn perimeter_of_disk_and_diamond() {
        let p = perimeter_cornercount(&disk(30.0), 1.0);
        assert!((p / (2.0 * PI * 30.0) - 1.0).abs() < 0.02, "{p}");
        // Diamond |x|+|y| <= n: square rotated by 45 degrees, side n*sqrt(2).
        let n = 20;
        let (s, d) = chain_counts(&diamond(n));
        assert_eq!((s, d), (0, 4 * n as usize));
        let p = perimeter_cornercount(&diamond(n), 1.0);
        let want = 4.0 * n as f64 * 2f64.sqrt();
        assert!((p / want - 1.0).abs() < 0.03, "{p} vs {want}");
    }

    #[test]
    fn perimeter_sums_components() {
        let mut two = rect(3, 3);
        two.extend(rect(3, 3).into_iter().map(|(x, y)| (x + 10, y)));
        let one = perimeter_cornercount(&rect(3, 3), 1.0);
        assert!((perimeter_cornercount(&two, 1.0) - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn mean_width_cases() {
        let w = mean_width(&disk(100.0), 1.0);
        assert!((w / 200.0 - 1.0).abs() < 0.01, "{w}");
        let w = mean_width(&rect(20, 10), 1.0);
        assert!((w / (60.0 / PI) - 1.0).abs() < 0.02, "{w}");
        assert!((w - dense_mean_width(&rect(20, 10))).abs() < 1e-3, "{w} {}", dense_mean_width(&rect(20, 10)));
        let seg = rect(1, 30);
        let w = mean_width(&seg, 1.0);
        assert!((w - 62.0 / PI).abs() < 1e-3, "{w}");
        assert!((w - dense_mean_width(&seg)).abs() < 1e-3);
        let w = mean_width(&disk(12.5), 1.0);
        assert!((w - dense_mean_width(&disk(12.5))).abs() < 0.02 * w);
    }

    #[test]
    fn disk_shape_factors() {
        let f = shape_factors(&disk(30.0));
        assert!(f.sphericity >= 0.95, "{f:?}");
        assert!(f.convexity >= 0.95, "{f:?}");
        assert!(f.elongation >= 0.95, "{f:?}");
    }

    #[test]
    fn rectangle_elongation_and_convexity() {
        let f = shape_factors(&rect(30, 10));
        assert!((f.elongation / (1.0 / 3.0) - 1.0).abs() < 0.05, "{f:?}");
        assert!((f.convexity - 1.0).abs() <= 0.02);
        assert!(f.clamped, "hull correction slightly exceeds the rectangle");
        let one = shape_factors(&[(5, 5)]);
        assert_eq!((one.sphericity, one.convexity, one.elongation), (1.0, 1.0, 1.0));
    }

    #[test]
    fn nonconvex_shape_has_low_convexity() {
        // L shape: two 20x5 bars.
        let mut l = rect(20, 5);
        l.extend(rect(5, 20).into_iter().filter(|&(_, y)| y >= 5));
        let f = shape_factors(&l);
        assert!(f.convexity < 0.75, "{f:?}");
    }

    #[test]
    fn quarter_turn_invariance() {
        let mut blob = disk(9.0);
        blob.extend(rect(25, 4));
        let a = describe_particle(1, &blob, 1.5).0;
        let b = describe_particle(1, &rotate90(&blob), 1.5).0;
        assert!((a.area - b.area).abs() < 1e-12);
        assert!((a.perimeter - b.perimeter).abs() < 1e-9);
        assert!((a.mean_width - b.mean_width).abs() < 1e-9, "{} {}", a.mean_width, b.mean_width);
        assert!((a.sphericity - b.sphericity).abs() < 1e-12);
        assert!((a.convexity - b.convexity).abs() < 1e-12);
        assert!((a.elongation - b.elongation).abs() < 1e-12);
    }

    #[test]
    fn describe_plane_and_components() {
        let mut p = Grid2::filled(30, 20, 1.0, 0u8).unwrap();
        for y in 2..6 {
            for x in 2..8 {
                p.set(x, y, 19);
            }
        }
        p.set(12, 12, 23);
        p.set(13, 13, 23);
        let labels = label_components(&p);
        assert_eq!(labels.data().iter().copied().max(), Some(2));
        let t = describe_plane(&labels);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].area, 24.0);
        assert_eq!(t.rows[1].area, 2.0);
    }

    #[test]
    fn coarsening_by_integer_and_real_factors() {
        let mut p = Grid2::filled(9, 9, 1.0, 0u32).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                if x < 6 {
                    p.set(x, y, 3);
                }
            }
        }
        let c = coarsen_majority(&p, 3.0).unwrap();
        assert_eq!((c.nx(), c.ny(), c.spacing()), (3, 3, 3.0));
        assert_eq!(c.data(), &[3, 3, 0, 3, 3, 0, 3, 3, 0]);
        let c = coarsen_majority(&p, 4.5).unwrap();
        assert_eq!((c.nx(), c.ny()), (2, 2));
        // Column 0 holds fine x 0..4, column 1 fine x 4..9.
        assert_eq!(c.data(), &[3, 0, 3, 0]);
        assert!(coarsen_majority(&p, 0.5).is_err());
    }

    #[test]
    fn coarsened_disk_descriptors_stay_comparable() {
        let r = 90.0;
        let n = 200usize;
        let mut fine = Grid2::filled(n, n, 1.0, 0u32).unwrap();
        for (x, y) in disk(r) {
            fine.set((x + 100) as usize, (y + 100) as usize, 1);
        }
        let coarse = coarsen_majority(&fine, 4.5).unwrap();
        let a = &describe_plane(&fine).rows[0];
        let b = &describe_plane(&coarse).rows[0];
        assert!((a.area / b.area - 1.0).abs() < 0.03);
        assert!((a.mean_width / b.mean_width - 1.0).abs() < 0.03);
        assert!((a.elongation - b.elongation).abs() < 0.03);
    }

    #[test]
    fn histograms() {
        let row = |a: f64| DescriptorRow {
            id: 1,
            area: a,
            perimeter: 1.0,
            mean_width: 1.0,
            sphericity: 1.0,
            convexity: 1.0,
            elongation: 1.0,
        };
        let one = distributions(&[row(5.0)], 10).unwrap();
        assert!(one.iter().all(|(_, h)| h == &vec![(if h[0].0 == 5.0 { 5.0 } else { 1.0 }, 1.0)]));
        let two = distributions(&[row(5.0), row(5.0)], 10).unwrap();
        assert_eq!(one, two);
        assert!(distributions(&[], 4).is_err());
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h, vec![(0.75, 0.5), (2.25, 0.5)]);
        let dir = tempfile::tempdir().unwrap();
        export_distributions(&[row(1.0), row(4.0)], 3, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("area.csv")).unwrap();
        assert!(text.starts_with("bin_center,relative_frequency\n"));
    }

    #[test]
    fn scaled_areas_shift_histogram_by_square() {
        let areas = [3.0, 7.0, 8.0, 20.0, 41.0];
        let s = 4.5f64;
        let h1 = histogram(&areas, 5).unwrap();
        let scaled: Vec<f64> = areas.iter().map(|a| a * s * s).collect();
        let h2 = histogram(&scaled, 5).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a.0 * s * s - b.0).abs() < 1e-9 * b.0);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = describe_plane(&label_components(&Grid2::from_vec(4, 1, 2.0, vec![1u8, 1, 0, 1]).unwrap())).rows;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        write_rows(&p, &rows).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn factors_in_unit_interval(w in 1i64..25, h in 1i64..25, r in 0.0f64..9.0) {
            let mut px = rect(w, h);
            px.extend(disk(r).into_iter().map(|(x, y)| (x + w, y + h)));
            px.sort_unstable();
            px.dedup();
            let f = shape_factors(&px);
            for v in [f.sphericity, f.convexity, f.elongation] {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }

        #[test]
        fn hull_encloses_all_points(pts in proptest::collection::vec((-15i64..15, -15i64..15), 1..60)) {
            let hull = convex_hull(&pts);
            if hull.len() >= 3 {
                for i in 0..hull.len() {
                    let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                    for &(x, y) in &pts {
                        prop_assert!(cross(a, b, (x as f64, y as f64)) >= 0.0);
                    }
                }
            }
            for v in &hull {
                prop_assert!(pts.contains(&(v.0 as i64, v.1 as i64)));
            }
        }

        #[test]
        fn integer_scaling_covariance(w in 2i64..12, h in 2i64..12, k in 2i64..4) {
            let px = rect(w, h);
            let big = rect(w * k, h * k);
            let a = describe_particle(1, &px, k as f64).0;
            let b = describe_particle(1, &big, 1.0).0;
            prop_assert!((a.area - b.area).abs() < 1e-9);
            prop_assert!((a.elongation - b.elongation).abs() < 1e-12);
            // Boundary terms make small digital rectangles only approximately covariant.
            prop_assert!((a.perimeter / b.perimeter - 1.0).abs() < 0.05 + 1.0 / (w.min(h) * k) as f64);
        }
    }
}
