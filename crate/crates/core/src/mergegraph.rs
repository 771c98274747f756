//! Region adjacency graph of a watershed labeling, per-edge features and
//! threshold merging of oversegmented particles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::binarize::ball_offsets;
use crate::error::{Error, Result};
use crate::prefilter::{convolve_axis, Border};
use crate::volgrid::{neighbor_offsets, LabelVolume, RealGrid, ScalarVolume};

/// Length of the per-edge feature vector.
pub const FEATURE_DIM: usize = 18;

/// Column names of the feature vector, in order.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "gray_mean",
    "gray_std",
    "gray_skew",
    "gray_kurt",
    "grad_mean",
    "grad_std",
    "grad_skew",
    "grad_kurt",
    "pca1",
    "pca2",
    "pca3",
    "curvature",
    "log_interface",
    "log_vol_small",
    "log_vol_large",
    "region_contrast",
    "contact_ratio",
    "interface_contrast",
];

pub type EdgeFeatures = [f64; FEATURE_DIM];

/// Interface between two adjacent regions, `a < b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEdge {
    pub a: u32,
    pub b: u32,
    /// Voxels of either region 26-adjacent to the other, ascending.
    pub interface: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    /// Labels present in the volume, ascending.
    pub regions: Vec<u32>,
    /// Voxel count per label, indexed by label (entry 0 is background).
    pub volumes: Vec<u64>,
    /// Edges sorted by `(a, b)`.
    pub edges: Vec<RegionEdge>,
}

impl RegionGraph {
    pub fn edge_index(&self, a: u32, b: u32) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search_by(|e| (e.a, e.b).cmp(&key)).ok()
    }

    pub fn pairs(&self) -> Vec<(u32, u32)> {
        self.edges.iter().map(|e| (e.a, e.b)).collect()
    }
}

/// Scans the labeling once and records every 26-adjacent pair of distinct
/// positive labels together with the voxels on either side.
pub fn build_region_graph(labels: &LabelVolume) -> RegionGraph {
    let d = labels.dims();
    let data = labels.data();
    let max = labels.max_label() as usize;
    let mut volumes = vec![0u64; max + 1];
    for &l in data {
        volumes[l as usize] += 1;
    }
    let regions = (1..=max as u32).filter(|&l| volumes[l as usize] > 0).collect();
    let offs = neighbor_offsets(26);
    let plane = d.nx * d.ny;
    let hits: Vec<((u32, u32), usize)> = (0..d.nz)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut local = Vec::new();
            let mut seen: Vec<u32> = Vec::with_capacity(26);
            for i in z * plane..(z + 1) * plane {
                let l = data[i];
                if l == 0 {
                    continue;
                }
                let (x, y, _) = d.coords(i);
                seen.clear();
                for o in &offs {
                    if let Some(j) = d.checked_index(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]) {
                        let m = data[j];
                        if m != 0 && m != l && !seen.contains(&m) {
                            seen.push(m);
                            local.push(((l.min(m), l.max(m)), i));
                        }
                    }
                }
            }
            local
        })
        .collect();
    let mut grouped: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (k, i) in hits {
        grouped.entry(k).or_default().push(i);
    }
    let edges = grouped
        .into_iter()
        .map(|((a, b), mut interface)| {
            interface.sort_unstable();
            RegionEdge { a, b, interface }
        })
        .collect();
    RegionGraph { regions, volumes, edges }
}

/// Euclidean norm of the three 3x3x3 Sobel responses, mirror borders.
pub fn sobel_gradient_magnitude(vol: &ScalarVolume) -> RealGrid {
    let d = vol.dims();
    let src: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let smooth = [1.0, 2.0, 1.0];
    let deriv = [-1.0, 0.0, 1.0];
    let n = src.len();
    let mut mag = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for axis in 0..3 {
        let k = |ax: usize| if ax == axis { &deriv[..] } else { &smooth[..] };
        convolve_axis(&src, d, k(0), 0, Border::Mirror, &mut a);
        convolve_axis(&a, d, k(1), 1, Border::Mirror, &mut b);
        convolve_axis(&b, d, k(2), 2, Border::Mirror, &mut a);
        mag.par_iter_mut().zip(a.par_iter()).for_each(|(m, g)| *m += g * g);
    }
    mag.par_iter_mut().for_each(|m| *m = m.sqrt());
    vol.with_data(mag).expect("same geometry")
}

/// Mean, population standard deviation, skewness and excess kurtosis.
/// Degenerate samples report 0 for the last three.
pub fn four_moments(values: &[f64]) -> [f64; 4] {
    if values.is_empty() {
        return [0.0; 4];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let c = v - mean;
        let c2 = c * c;
        m2 += c2;
        m3 += c2 * c;
        m4 += c2 * c2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return [mean, 0.0, 0.0, 0.0];
    }
    [mean, std, m3 / (std * m2), m4 / (m2 * m2) - 3.0]
}

fn covariance(points: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let cov = points
        .iter()
        .fold(Matrix3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose())
        / n;
    (mean, cov)
}

/// Eigenvalues of the interface coordinate covariance, descending and
/// normalized to sum 1. A single point gives equal thirds.
pub fn pca_eigenvalues(points: &[Vector3<f64>]) -> [f64; 3] {
    if points.is_empty() {
        return [1.0 / 3.0; 3];
    }
    let (_, cov) = covariance(points);
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = ev.iter().sum();
    if s <= 1e-12 {
        return [1.0 / 3.0; 3];
    }
    [ev[0] / s, ev[1] / s, ev[2] / s]
}

/// Mean curvature magnitude at the origin of a quadric fitted to `points`
/// (coordinates relative to the evaluation point) in their PCA frame.
fn quadric_mean_curvature(points: &[Vector3<f64>]) -> Option<f64> {
    if points.len() < 8 {
        return None;
    }
    let (_, cov) = covariance(points);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let t1 = eig.eigenvectors.column(order[0]).into_owned();
    let t2 = eig.eigenvectors.column(order[1]).into_owned();
    let nrm = eig.eigenvectors.column(order[2]).into_owned();
    let m = points.len();
    let mut a = DMatrix::zeros(m, 6);
    let mut w = DVector::zeros(m);
    for (r, p) in points.iter().enumerate() {
        let (u, v) = (p.dot(&t1), p.dot(&t2));
        a[(r, 0)] = u * u;
        a[(r, 1)] = u * v;
        a[(r, 2)] = v * v;
        a[(r, 3)] = u;
        a[(r, 4)] = v;
        a[(r, 5)] = 1.0;
        w[r] = p.dot(&nrm);
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-9 * smax {
        return None;
    }
    let c = svd.solve(&w, 1e-12).ok()?;
    let (huu, huv, hvv, hu, hv) = (2.0 * c[0], c[1], 2.0 * c[2], c[3], c[4]);
    let g = 1.0 + hu * hu + hv * hv;
    let h = ((1.0 + hv * hv) * huu - 2.0 * hu * hv * huv + (1.0 + hu * hu) * hvv) / (2.0 * g.powf(1.5));
    Some(h.abs())
}

/// Average of the local quadric mean curvature over a one-voxel-thick
/// surface layer (ascending indices), each voxel fitted to the layer
/// voxels within radius `radius`.
pub fn interface_curvature(interface: &[usize], dims: crate::volgrid::Dims, radius: usize) -> f64 {
    let offs = ball_offsets(radius);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut pts = Vec::with_capacity(offs.len());
    for &i in interface {
        let (x, y, z) = dims.coords(i);
        pts.clear();
        for o in &offs {
            if let Some(j) = dims.checked_index(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]) {
                if interface.binary_search(&j).is_ok() {
                    pts.push(Vector3::new(o[0] as f64, o[1] as f64, o[2] as f64));
                }
            }
        }
        if let Some(h) = quadric_mean_curvature(&pts) {
            sum += h;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Radius of the dilation that defines the sampling neighborhood.
pub const NEIGHBORHOOD_RADIUS: usize = 2;
/// Radius of the local quadric fit.
pub const CURVATURE_RADIUS: usize = 3;

/// Feature vectors for every graph edge, in edge order.
pub fn extract_edge_features(
    graph: &RegionGraph,
    gray: &ScalarVolume,
    grad: &RealGrid,
    labels: &LabelVolume,
) -> Result<Vec<EdgeFeatures>> {
    if !gray.same_shape(labels) || !grad.same_shape(labels) {
        return Err(Error::Dimension("gray, gradient and labels differ in shape".into()));
    }
    let d = labels.dims();
    if graph.volumes.len() != labels.max_label() as usize + 1 {
        return Err(Error::Contract("graph does not match labeling".into()));
    }
    let mut gray_sum = vec![0.0f64; graph.volumes.len()];
    for (&l, &g) in labels.data().iter().zip(gray.data()) {
        gray_sum[l as usize] += g as f64;
    }
    let region_mean = |l: u32| gray_sum[l as usize] / graph.volumes[l as usize].max(1) as f64;
    let dil = ball_offsets(NEIGHBORHOOD_RADIUS);
    let out = graph
        .edges
        .par_iter()
        .map(|e| {
            let mut hood = Vec::with_capacity(e.interface.len() * 4);
            for &i in &e.interface {
                let (x, y, z) = d.coords(i);
                for o in &dil {
                    if let Some(j) = d.checked_index(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]) {
                        let l = *labels.at(j);
                        if l == e.a || l == e.b {
                            hood.push(j);
                        }
                    }
                }
            }
            hood.sort_unstable();
            hood.dedup();
            let gv: Vec<f64> = hood.iter().map(|&j| *gray.at(j) as f64).collect();
            let dv: Vec<f64> = hood.iter().map(|&j| *grad.at(j)).collect();
            let gm = four_moments(&gv);
            let dm = four_moments(&dv);
            let pts: Vec<Vector3<f64>> = e
                .interface
                .iter()
                .map(|&i| {
                    let (x, y, z) = d.coords(i);
                    Vector3::new(x as f64, y as f64, z as f64)
                })
                .collect();
            let pca = pca_eigenvalues(&pts);
            // Each side of the interface is one layer; fitting both layers at
            // once biases flat interfaces.
            let side = |l: u32| -> Vec<usize> {
                e.interface.iter().copied().filter(|&i| *labels.at(i) == l).collect()
            };
            let curv = 0.5
                * (interface_curvature(&side(e.a), d, CURVATURE_RADIUS)
                    + interface_curvature(&side(e.b), d, CURVATURE_RADIUS));
            let (va, vb) = (graph.volumes[e.a as usize], graph.volumes[e.b as usize]);
            let (small, large) = (va.min(vb) as f64, va.max(vb) as f64);
            let (ma, mb) = (region_mean(e.a), region_mean(e.b));
            let iface_mean =
                e.interface.iter().map(|&i| *gray.at(i) as f64).sum::<f64>() / e.interface.len() as f64;
            let n_if = e.interface.len() as f64;
            [
                gm[0],
                gm[1],
                gm[2],
                gm[3],
                dm[0],
                dm[1],
                dm[2],
                dm[3],
                pca[0],
                pca[1],
                pca[2],
                curv,
                n_if.ln_1p(),
                small.ln_1p(),
                large.ln_1p(),
                (ma - mb).abs(),
                n_if / small.powf(2.0 / 3.0),
                iface_mean - 0.5 * (ma + mb),
            ]
        })
        .collect();
    Ok(out)
}

/// Representative (smallest label) of each label's component after
/// joining every edge with weight `>= lambda`; index 0 maps to 0.
pub fn merge_components(max_label: u32, pairs: &[(u32, u32)], weights: &[f64], lambda: f64) -> Result<Vec<u32>> {
    if pairs.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} edges but {} weights",
            pairs.len(),
            weights.len()
        )));
    }
    let mut parent: Vec<u32> = (0..=max_label).collect();
    fn find(p: &mut [u32], mut i: u32) -> u32 {
        while p[i as usize] != i {
            let g = p[p[i as usize] as usize];
            p[i as usize] = g;
            i = g;
        }
        i
    }
    for (&(a, b), &w) in pairs.iter().zip(weights) {
        if a == 0 || b == 0 || a > max_label || b > max_label {
            return Err(Error::Contract(format!("edge ({a},{b}) references an unknown region")));
        }
        if w >= lambda {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb) as usize] = ra.min(rb);
            }
        }
    }
    Ok((0..=max_label).map(|l| find(&mut parent, l)).collect())
}

/// Merges regions joined by edges of weight `>= lambda` and relabels the
/// result contiguously in scan order.
pub fn merge_regions(labels: &LabelVolume, graph: &RegionGraph, weights: &[f64], lambda: f64) -> Result<LabelVolume> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must be in (0,1), got {lambda}")));
    }
    let max = labels.max_label();
    let rep = merge_components(max, &graph.pairs(), weights, lambda)?;
    let merged = labels.map(|&l| rep[l as usize]);
    Ok(merged.relabel_sequential().0)
}

/// One row of the edge-feature table.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub v1: u32,
    pub v2: u32,
    pub features: EdgeFeatures,
    pub label: Option<u8>,
}

pub fn edge_csv_header() -> String {
    let mut h = String::from("v1,v2");
    for k in 1..=FEATURE_DIM {
        write!(h, ",f{k}").unwrap();
    }
    h.push_str(",label");
    h
}

pub fn write_edge_csv(path: &Path, rows: &[EdgeRecord]) -> Result<()> {
    let mut out = edge_csv_header();
    out.push('\n');
    for r in rows {
        write!(out, "{},{}", r.v1, r.v2).unwrap();
        for f in &r.features {
            write!(out, ",{f}").unwrap();
        }
        match r.label {
            Some(l) => writeln!(out, ",{l}").unwrap(),
            None => out.push_str(",\n"),
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_edge_csv(path: &Path) -> Result<Vec<EdgeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    if header.trim() != edge_csv_header() {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("{}:{}: {what}", path.display(), n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != FEATURE_DIM + 3 {
            return Err(bad("wrong column count"));
        }
        let v1 = cols[0].trim().parse().map_err(|_| bad("bad v1"))?;
        let v2 = cols[1].trim().parse().map_err(|_| bad("bad v2"))?;
        let mut features = [0.0; FEATURE_DIM];
        for (k, f) in features.iter_mut().enumerate() {
            *f = cols[2 + k].trim().parse().map_err(|_| bad("bad feature"))?;
        }
        let last = cols[FEATURE_DIM + 2].trim();
        let label = match last {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(bad("label must be 0, 1 or empty")),
        };
        rows.push(EdgeRecord { v1, v2, features, label });
    }
    Ok(rows)
}
