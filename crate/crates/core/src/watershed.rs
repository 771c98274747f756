//! Marker-based watershed on the inverted distance transform.
//!
//! Markers are the extended regional minima (h-minima) of the height
//! function, found by morphological reconstruction by erosion of `f + h`
//! over `f`. Flooding then proceeds from the markers with a single priority
//! queue ordered by `(height, label, voxel index)`, which makes the result
//! independent of thread count.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use crate::binarize::distance_transform;
use crate::error::{Error, Result};
use crate::volgrid::{neighbor_offsets, BinaryVolume, Dims, LabelVolume, RealGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatershedParams {
    /// Depth of the extended minima, in distance units.
    pub h_depth: f64,
    /// 6 or 26.
    pub connectivity: u8,
}

impl Default for WatershedParams {
    fn default() -> Self {
        WatershedParams {
            h_depth: 2.0,
            connectivity: 26,
        }
    }
}

impl WatershedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_depth >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "h_depth must be >= 0, got {}",
                self.h_depth
            )));
        }
        check_connectivity(self.connectivity)
    }
}

fn check_connectivity(c: u8) -> Result<()> {
    if c == 6 || c == 26 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("connectivity must be 6 or 26, got {c}")))
    }
}

/// Float priority with a total order.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Height(f64);

impl Eq for Height {}

impl PartialOrd for Height {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Height {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Precomputed neighbor stepping that skips out-of-grid positions.
struct Neighborhood {
    dims: Dims,
    offsets: Vec<[i64; 3]>,
}

impl Neighborhood {
    fn new(dims: Dims, connectivity: u8) -> Self {
        Neighborhood {
            dims,
            offsets: neighbor_offsets(connectivity),
        }
    }

    #[inline]
    fn for_each(&self, i: usize, mut f: impl FnMut(usize)) {
        let (x, y, z) = self.dims.coords(i);
        for o in &self.offsets {
            if let Some(j) = self
                .dims
                .checked_index(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2])
            {
                f(j);
            }
        }
    }
}

/// Connected components in scan order; labels are `1..=count`.
pub fn connected_components(mask: &BinaryVolume, connectivity: u8) -> Result<(LabelVolume, u32)> {
    check_connectivity(connectivity)?;
    let d = mask.dims();
    let nb = Neighborhood::new(d, connectivity);
    let mut labels = vec![0u32; d.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..d.len() {
        if !mask.at(start) || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            nb.for_each(i, |j| {
                if *mask.at(j) && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            });
        }
    }
    Ok((mask.with_data(labels)?, next))
}

/// Reconstruction by erosion of `marker` over `floor` restricted to `mask`
/// (`marker >= floor`). Computed by minimax-path propagation.
fn reconstruct_by_erosion(floor: &[f64], marker: &[f64], mask: &BinaryVolume, nb: &Neighborhood) -> Vec<f64> {
    let mut rec = marker.to_vec();
    let mut heap: BinaryHeap<Reverse<(Height, usize)>> = (0..rec.len())
        .filter(|&i| *mask.at(i))
        .map(|i| Reverse((Height(rec[i]), i)))
        .collect();
    while let Some(Reverse((Height(v), i))) = heap.pop() {
        if v > rec[i] {
            continue;
        }
        nb.for_each(i, |j| {
            if *mask.at(j) {
                let cand = v.max(floor[j]);
                if cand < rec[j] {
                    rec[j] = cand;
                    heap.push(Reverse((Height(cand), j)));
                }
            }
        });
    }
    rec
}

/// Extended regional minima of `height` inside `mask`, one label per
/// connected minimum plateau, numbered in scan order.
pub fn extended_minima_markers(height: &RealGrid, mask: &BinaryVolume, p: &WatershedParams) -> Result<LabelVolume> {
    p.validate()?;
    if !height.same_shape(mask) {
        return Err(Error::Dimension("height and mask differ in shape".into()));
    }
    let d = mask.dims();
    let nb = Neighborhood::new(d, p.connectivity);
    let f = height.data();
    for i in 0..d.len() {
        if *mask.at(i) && !f[i].is_finite() {
            return Err(Error::Contract(format!("height is not finite at masked voxel {i}")));
        }
    }
    let raised: Vec<f64> = f.iter().map(|v| v + p.h_depth).collect();
    let rec = reconstruct_by_erosion(f, &raised, mask, &nb);

    let mut labels = vec![0u32; d.len()];
    let mut visited = vec![false; d.len()];
    let mut next = 0u32;
    let mut plateau = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..d.len() {
        if !mask.at(start) || visited[start] {
            continue;
        }
        let level = rec[start];
        let mut is_min = true;
        plateau.clear();
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            plateau.push(i);
            nb.for_each(i, |j| {
                if !mask.at(j) {
                    return;
                }
                if rec[j] < level {
                    is_min = false;
                } else if rec[j] == level && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            });
        }
        if is_min {
            next += 1;
            for &i in &plateau {
                labels[i] = next;
            }
        }
    }
    // Plateaus are discovered in scan order of their first voxel, so the
    // numbering is already canonical.
    mask.with_data(labels)
}

/// Priority-flood watershed from `markers` over `height` inside `mask`.
///
/// Each unlabeled voxel is queued once, carrying the label of the region
/// that reached it first; the queue pops in `(height, label, index)` order.
/// Mask voxels not connected to any marker stay 0.
pub fn marker_watershed(height: &RealGrid, markers: &LabelVolume, mask: &BinaryVolume, connectivity: u8) -> Result<LabelVolume> {
    check_connectivity(connectivity)?;
    if !height.same_shape(mask) || !markers.same_shape(mask) {
        return Err(Error::Dimension("height, markers and mask differ in shape".into()));
    }
    let d = mask.dims();
    let nb = Neighborhood::new(d, connectivity);
    let f = height.data();
    let mut labels = markers.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && !mask.at(i) {
            let (x, y, z) = d.coords(i);
            return Err(Error::Contract(format!("marker voxel ({x},{y},{z}) lies outside the mask")));
        }
    }
    let mut queued = vec![false; d.len()];
    let mut heap: BinaryHeap<Reverse<(Height, u32, usize)>> = BinaryHeap::new();
    for i in 0..d.len() {
        if labels[i] == 0 {
            continue;
        }
        let l = labels[i];
        nb.for_each(i, |j| {
            if *mask.at(j) && labels[j] == 0 && !queued[j] {
                queued[j] = true;
                heap.push(Reverse((Height(f[j]), l, j)));
            }
        });
    }
    while let Some(Reverse((_, l, i))) = heap.pop() {
        labels[i] = l;
        nb.for_each(i, |j| {
            if *mask.at(j) && labels[j] == 0 && !queued[j] {
                queued[j] = true;
                heap.push(Reverse((Height(f[j]), l, j)));
            }
        });
    }
    mask.with_data(labels)
}

/// Foreground voxels 26-adjacent to a voxel of a different positive label.
pub fn watershed_lines(labels: &LabelVolume) -> BinaryVolume {
    let d = labels.dims();
    let nb = Neighborhood::new(d, 26);
    let data = (0..d.len())
        .map(|i| {
            let l = *labels.at(i);
            if l == 0 {
                return false;
            }
            let mut hit = false;
            nb.for_each(i, |j| {
                let m = *labels.at(j);
                if m != 0 && m != l {
                    hit = true;
                }
            });
            hit
        })
        .collect();
    labels.with_data(data).expect("same geometry")
}

/// Negated Euclidean distance transform, the height function for flooding.
pub fn inverted_distance(mask: &BinaryVolume) -> RealGrid {
    distance_transform(mask).map(|&v| if v == f64::MAX { f64::MIN } else { -v })
}

/// Distance transform, markers and flooding in one call.
pub fn segment(mask: &BinaryVolume, p: &WatershedParams) -> Result<LabelVolume> {
    let height = inverted_distance(mask);
    let markers = extended_minima_markers(&height, mask, p)?;
    marker_watershed(&height, &markers, mask, p.connectivity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball_mask(d: Dims, centers: &[([f64; 3], f64)]) -> BinaryVolume {
        let data = (0..d.len())
            .map(|i| {
                let (x, y, z) = d.coords(i);
                centers.iter().any(|(c, r)| {
                    let (a, b, e) = (x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]);
                    a * a + b * b + e * e <= r * r
                })
            })
            .collect();
        Grid3::from_vec(d, 1.0, data).unwrap()
    }

    /// Two radius-10 balls 24 apart along x joined by a bridge whose radius
    /// narrows to 3 at the midplane x = 24.
    fn fused_pair() -> BinaryVolume {
        let d = Dims::new(48, 26, 26);
        let mut m = ball_mask(d, &[([12.0, 12.5, 12.5], 10.0), ([36.0, 12.5, 12.5], 10.0)]);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let (b, c) = (y as f64 - 12.5, z as f64 - 12.5);
            let rho = 3.0 + 0.5 * (x as f64 - 24.0).abs();
            if (12..=36).contains(&x) && b * b + c * c <= rho * rho {
                m.data_mut()[i] = true;
            }
        }
        m
    }

    fn count_labels(l: &LabelVolume) -> usize {
        let mut v: Vec<u32> = l.data().iter().copied().filter(|&x| x > 0).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    #[test]
    fn single_ball_has_one_marker() {
        let m = ball_mask(Dims::cube(25), &[([12.0, 12.0, 12.0], 9.0)]);
        let h = inverted_distance(&m);
        let mk = extended_minima_markers(&h, &m, &WatershedParams::default()).unwrap();
        assert_eq!(mk.max_label(), 1);
    }

    #[test]
    fn fused_pair_has_two_markers_until_h_is_huge() {
        let m = fused_pair();
        let h = inverted_distance(&m);
        for depth in [0.0, 1.0, 2.0, 3.0] {
            let mk = extended_minima_markers(&h, &m, &WatershedParams { h_depth: depth, connectivity: 26 })
                .unwrap();
            assert_eq!(mk.max_label(), 2, "h = {depth}");
        }
        let mk = extended_minima_markers(&h, &m, &WatershedParams { h_depth: 50.0, connectivity: 26 }).unwrap();
        assert_eq!(mk.max_label(), 1);
    }

    #[test]
    fn empty_mask_gives_empty_labeling() {
        let m = Grid3::filled(Dims::cube(5), 1.0, false).unwrap();
        let h = inverted_distance(&m);
        let mk = extended_minima_markers(&h, &m, &WatershedParams::default()).unwrap();
        assert_eq!(mk.max_label(), 0);
        assert_eq!(segment(&m, &WatershedParams::default()).unwrap().max_label(), 0);
    }

    #[test]
    fn one_marker_floods_whole_ball() {
        let m = ball_mask(Dims::cube(21), &[([10.0, 10.0, 10.0], 8.0)]);
        let h = inverted_distance(&m);
        let mut mk = m.map(|_| 0u32);
        mk.set(10, 10, 10, 1);
        let ws = marker_watershed(&h, &mk, &m, 26).unwrap();
        for i in 0..m.len() {
            assert_eq!(*ws.at(i), *m.at(i) as u32);
        }
    }

    #[test]
    fn marker_outside_mask_is_rejected() {
        let m = ball_mask(Dims::cube(9), &[([4.0, 4.0, 4.0], 2.0)]);
        let mut mk = m.map(|_| 0u32);
        mk.set(0, 0, 0, 1);
        let err = marker_watershed(&inverted_distance(&m), &mk, &m, 26).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fused_pair_splits_at_bisector() {
        let m = fused_pair();
        let ws = segment(&m, &WatershedParams::default()).unwrap();
        assert_eq!(count_labels(&ws), 2);
        let lines = watershed_lines(&ws);
        let d = m.dims();
        let interface: Vec<usize> = (0..d.len()).filter(|&i| *lines.at(i)).collect();
        assert!(!interface.is_empty());
        let near = interface
            .iter()
            .filter(|&&i| (d.coords(i).0 as f64 - 24.0).abs() <= 1.0)
            .count();
        assert!(near as f64 >= 0.95 * interface.len() as f64, "{near}/{}", interface.len());
    }

    #[test]
    fn region_count_equals_marker_count_and_partitions_mask() {
        let d = Dims::cube(30);
        let m = ball_mask(
            d,
            &[([8.0, 8.0, 8.0], 6.0), ([17.0, 9.0, 8.0], 5.0), ([20.0, 20.0, 20.0], 7.0)],
        );
        let h = inverted_distance(&m);
        let p = WatershedParams::default();
        let mk = extended_minima_markers(&h, &m, &p).unwrap();
        let ws = marker_watershed(&h, &mk, &m, 26).unwrap();
        assert_eq!(count_labels(&ws), mk.max_label() as usize);
        for i in 0..d.len() {
            assert_eq!(*ws.at(i) > 0, *m.at(i));
        }
    }

    #[test]
    fn components_basic_cases() {
        let empty = Grid3::filled(Dims::cube(4), 1.0, false).unwrap();
        assert_eq!(connected_components(&empty, 26).unwrap().1, 0);
        let mut diag = empty.clone();
        diag.set(1, 1, 1, true);
        diag.set(2, 2, 2, true);
        assert_eq!(connected_components(&diag, 26).unwrap().1, 1);
        assert_eq!(connected_components(&diag, 6).unwrap().1, 2);
        assert!(connected_components(&diag, 8).is_err());
    }

    fn union_find_components(mask: &BinaryVolume, conn: u8) -> Vec<u32> {
        let d = mask.dims();
        let mut parent: Vec<usize> = (0..d.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let offs = neighbor_offsets(conn);
        for i in 0..d.len() {
            if !mask.at(i) {
                continue;
            }
            let (x, y, z) = d.coords(i);
            for o in &offs {
                if let Some(j) = d.checked_index(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]) {
                    if *mask.at(j) {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut map = std::collections::HashMap::new();
        (0..d.len())
            .map(|i| {
                if !mask.at(i) {
                    return 0;
                }
                let r = find(&mut parent, i);
                let n = map.len() as u32 + 1;
                *map.entry(r).or_insert(n)
            })
            .collect()
    }

    #[test]
    fn components_match_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let d = Dims::cube(10);
            let m = Grid3::from_vec(d, 1.0, (0..d.len()).map(|_| rng.gen_bool(0.35)).collect()).unwrap();
            for conn in [6, 26] {
                let (cc, _) = connected_components(&m, conn).unwrap();
                assert_eq!(cc.data(), union_find_components(&m, conn).as_slice());
            }
        }
    }

    #[test]
    fn flooding_is_identical_across_thread_pools() {
        let d = Dims::cube(28);
        let m = ball_mask(
            d,
            &[([9.0, 9.0, 9.0], 7.0), ([18.0, 10.0, 9.0], 6.0), ([14.0, 19.0, 18.0], 8.0)],
        );
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| segment(&m, &WatershedParams::default()).unwrap())
        };
        assert_eq!(run(1), run(8));
    }
}
